"""Sweep gamma_aes on the seeded synthetic corpus and compare multi-task
training against scoring alone.

    python3 scripts/directional_sweep.py --out runs/directional
"""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from gedaes.experiment import DirectionalSetup, run_directional
from gedaes.training import write_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--out", default="runs/directional")
    ap.add_argument("--seed", type=int, default=0, help="corpus and training seed")
    ap.add_argument("--max-epochs", type=int, default=None)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")

    setup = DirectionalSetup()
    setup.synthetic = replace(setup.synthetic, seed=args.seed)
    setup.train = replace(setup.train, seed=args.seed)
    if args.max_epochs:
        setup.train = replace(setup.train, max_epochs=args.max_epochs)

    def show(row, params, record):
        print(row.to_line(), flush=True)

    result = run_directional(setup, workers=args.workers, on_point=show)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_sweep(out / "sweep.txt", result.rows)
    (out / "summary.txt").write_text(result.summary() + "\n", encoding="utf-8")
    print(result.summary())
    print("PASS" if result.passed else "FAIL")
    return 0 if result.passed else 1


if __name__ == "__main__":
    sys.exit(main())
