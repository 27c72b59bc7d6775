#!/usr/bin/env python3
"""End-to-end CLI walkthrough on a small synthetic dataset.

Generates data, preprocesses it, pretrains the contrastive learner, runs
the two-step fused training against it, then evaluates with the linear
probe and the nearest-neighbour protocol. Everything lands under --out.
"""

import argparse
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from skelrep.cli import main as cli


def run(args: list[str]) -> None:
    code = cli(args)
    if code != 0:
        raise SystemExit(f"command {' '.join(args[:1])} exited with {code}")


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="demo_out")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def config(name, payload):
        path = out / f"{name}.json"
        path.write_text(json.dumps(payload, indent=2))
        return str(path)

    synth = config("synth", {
        "classes": 6, "samples_per_class": 40, "test_samples_per_class": 20,
        "T": 20, "J": 8, "noise_sigma": 0.1, "seed": args.seed,
    })
    run(["synth", "--config", synth, "--out", str(out / "raw")])

    for split in ("train", "test"):
        pre = config(f"pre_{split}", {
            "input": str(out / "raw" / f"{split}.jsonl"),
            "max_frames": 20,
            "output_name": f"{split}.jsonl",
        })
        run(["preprocess", "--config", pre, "--out", str(out / "data")])

    train_data = str(out / "data" / "train.jsonl")
    cml = config("cml", {
        "mode": "cml", "train_data": train_data, "epochs": 10, "lr": 0.005,
        "seed": args.seed,
    })
    run(["train", "--config", cml, "--out", str(out / "cml")])

    crrl = config("crrl", {
        "mode": "crrl", "train_data": train_data, "epochs": 8, "lr": 0.4,
        "lambda_d": 4.0, "teacher_checkpoint": str(out / "cml" / "checkpoint"),
        "seed": args.seed,
    })
    run(["train", "--config", crrl, "--out", str(out / "crrl")])

    for proto in ("linear", "knn"):
        eval_cfg = config(f"eval_{proto}", {
            "checkpoint": str(out / "crrl" / "checkpoint"),
            "train_data": train_data,
            "test_data": str(out / "data" / "test.jsonl"),
        })
        run([f"eval-{proto}", "--config", eval_cfg, "--out", str(out / f"eval_{proto}")])

    report = config("report", {"inputs": [str(out / "eval_linear"), str(out / "eval_knn")]})
    run(["report", "--config", report, "--out", str(out / "report")])
    print((out / "report" / "summary.txt").read_text())
    return 0


if __name__ == "__main__":
    sys.exit(main())
