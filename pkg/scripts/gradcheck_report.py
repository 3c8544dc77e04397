"""Write a per-tensor gradient-check report for every scope to a text file.

    python3 scripts/gradcheck_report.py --out runs/gradcheck.txt
"""

import argparse
import time
from pathlib import Path

from hsegnet.checks import SCOPES, run_scope


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/gradcheck.txt")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--h", type=float, default=1e-5)
    ap.add_argument("--tol", type=float, default=1e-4)
    args = ap.parse_args()

    lines, ok = [], True
    t0 = time.perf_counter()
    for scope in SCOPES:
        for name, rep, secs in run_scope(scope, args.seed, args.h, args.tol):
            ok &= rep.passed
            lines.append(f"== {scope} / {name}  ({secs:.2f}s, {'pass' if rep.passed else 'FAIL'})")
            lines.append(rep.table())
            lines.append("")
    lines.append(f"overall: {'pass' if ok else 'FAIL'} in {time.perf_counter() - t0:.1f}s")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n")
    print(lines[-1], "->", out)
    raise SystemExit(0 if ok else 3)


if __name__ == "__main__":
    main()
