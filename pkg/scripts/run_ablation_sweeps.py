#!/usr/bin/env python3
"""Sweep contrastive hyper-parameters (queue size, temperature, key-MLP
momentum) and report linear-probe accuracy per setting against the
untrained baseline. Writes sweep.csv into --out."""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from skelrep.evaluate import ProbeConfig
from skelrep.experiment import OrderingConfig, run_cml_sweep, write_sweep_csv

AXES = {
    "K": (2, 8, 64, 256),
    "tau": (0.01, 0.1, 1.0),
    "m_mlp": (0.999, 1.0),
    "m_enc": (0.5, 0.9, 0.999, 1.0),
}


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="sweep_out")
    parser.add_argument("--axes", nargs="*", default=["K", "tau", "m_mlp"], choices=sorted(AXES))
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--train-per-class", type=int, default=60)
    parser.add_argument("--test-per-class", type=int, default=30)
    parser.add_argument("--cml-epochs", type=int, default=12)
    args = parser.parse_args()

    cfg = OrderingConfig(
        train_per_class=args.train_per_class,
        test_per_class=args.test_per_class,
        cml_epochs=args.cml_epochs,
        probe=ProbeConfig(epochs=60),
    )
    rows = []
    for axis in args.axes:
        rows += run_cml_sweep(cfg, axis, AXES[axis], seed=args.seed)
        for r in rows[-len(AXES[axis]):]:
            print(f"{r['param']}={r['value']}: accuracy {r['accuracy']:.3f} (rand {r['rand_accuracy']:.3f})")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(rows, out / "sweep.csv")
    print(f"wrote {out / 'sweep.csv'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
