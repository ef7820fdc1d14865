"""Regenerate the bundled synthetic dataset under data/synthetic/."""
import argparse
from pathlib import Path

from maskforge.synthetic import write_dataset

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(ROOT / "data" / "synthetic"))
    ap.add_argument("--n-images", type=int, default=36)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    manifest = write_dataset(args.out, args.n_images, args.size, args.seed)
    print(f"wrote {args.n_images} images, manifest at {manifest}")


if __name__ == "__main__":
    main()
