"""Mean IOU per round with and without GrabCut between rounds.

Prints a table and writes curve.json (plus curve.png when matplotlib is
available) to --out.
"""
import argparse
import json
import time
from pathlib import Path

from maskforge import imagecore as ic
from maskforge.cli import load_samples
from maskforge.evalmetrics import evaluate
from maskforge.refinery import RefinementConfig, init_state, run_round
from maskforge.segment import AppearanceBackend

ROOT = Path(__file__).resolve().parents[1]


def curve(samples, config, seed):
    by_id = {s.image_id: s for s in samples}
    backend = AppearanceBackend(5, seed)
    state = init_state(samples, config=config)
    rows = []
    for k in range(config.rounds + 1):
        if k:
            state = run_round(state, backend, samples, config)
        rep = evaluate([(r.mask, by_id[r.image_id].gt) for r in state.records])
        rows.append({"round": k, "mean_iou": rep.mean_iou, "mean_binary_iou": rep.mean_binary_iou,
                     "active": len(state.active_records())})
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--manifest", default=str(ROOT / "data" / "synthetic" / "manifest.json"))
    ap.add_argument("--rounds", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=str(ROOT / "runs" / "curve"))
    args = ap.parse_args()

    samples = load_samples(ic.load_manifest(args.manifest))
    result = {}
    for label, flag in (("with_grabcut", True), ("without_grabcut", False)):
        t0 = time.perf_counter()
        cfg = RefinementConfig(rounds=args.rounds, apply_grabcut_between_rounds=flag, seed=args.seed)
        result[label] = curve(samples, cfg, args.seed)
        print(f"{label}: {time.perf_counter() - t0:.1f}s")

    print(f"{'round':>5} {'mIoU+gc':>8} {'mIoU-gc':>8} {'bIoU+gc':>8} {'bIoU-gc':>8}")
    for a, b in zip(result["with_grabcut"], result["without_grabcut"]):
        print(f"{a['round']:>5} {a['mean_iou']:8.3f} {b['mean_iou']:8.3f} {a['mean_binary_iou']:8.3f} {b['mean_binary_iou']:8.3f}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "curve.json").write_text(json.dumps(result, indent=1) + "\n")
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for label, rows in result.items():
        ax.plot([r["round"] for r in rows], [r["mean_iou"] for r in rows], marker="o", label=label.replace("_", " "))
    ax.set_xlabel("round")
    ax.set_ylabel("mean IOU")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "curve.png", dpi=120)


if __name__ == "__main__":
    main()
