"""How much a single GrabCut pass improves the coarse masks, per category."""
import argparse
from collections import defaultdict
from pathlib import Path

import numpy as np

from maskforge import imagecore as ic
from maskforge.cli import load_samples
from maskforge.evalmetrics import binary_iou
from maskforge.grabcut import GrabCutParams, run_grabcut

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--manifest", default=str(ROOT / "data" / "synthetic" / "manifest.json"))
    ap.add_argument("--gamma", type=float, default=50.0)
    args = ap.parse_args()

    params = GrabCutParams(gamma=args.gamma)
    per_cat = defaultdict(lambda: ([], []))
    for s in load_samples(ic.load_manifest(args.manifest)):
        truth = s.gt == s.category
        per_cat[s.category][0].append(binary_iou(s.coarse_mask, truth))
        per_cat[s.category][1].append(binary_iou(run_grabcut(s.image, s.coarse_mask, params), truth))
    print(f"{'category':>8} {'n':>3} {'coarse':>7} {'grabcut':>7}")
    for c in sorted(per_cat):
        before, after = per_cat[c]
        print(f"{c:>8} {len(before):>3} {np.mean(before):7.3f} {np.mean(after):7.3f}")
    allb = [v for b, _ in per_cat.values() for v in b]
    alla = [v for _, a in per_cat.values() for v in a]
    print(f"{'all':>8} {len(allb):>3} {np.mean(allb):7.3f} {np.mean(alla):7.3f}")


if __name__ == "__main__":
    main()
