"""Four-variant comparison (SegNet through multimodal attention) on the synthetic set.

Every variant shares one seed and one data order; the table and both audits
land in ``<out>/ablation.txt`` and ``<out>/ablation.json``.  Ordering across
variants is recorded, not asserted.

    python3 scripts/run_ablation.py --out runs/ablation --epochs 30
"""

import argparse
from pathlib import Path

from hsegnet.cli import cmd_ablation
from hsegnet.config import load_config
from hsegnet.data import generate_synthetic_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--n", type=int, default=80)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--widths", default="16,32")
    args = ap.parse_args()

    out = Path(args.out)
    generate_synthetic_dataset(out / "data", args.n, args.size, args.size, seed=args.seed)
    rc = load_config(
        overrides={
            "train.seed": str(args.seed),
            "train.epochs": str(args.epochs),
            "model.widths": args.widths,
            "model.input_size": str(args.size),
            "model.dtype": "float32",
        }
    )
    doc = cmd_ablation(rc, out / "data", out)
    for metric in ("dice", "iou"):
        print(f"{metric} ordering (best first): {' > '.join(doc['ordering'][metric])}")


if __name__ == "__main__":
    main()
