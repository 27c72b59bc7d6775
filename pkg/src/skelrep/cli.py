"""Command-line front end.

Subcommands: synth, preprocess, train, eval-linear, eval-knn, report.
Global flags: --config PATH (JSON document), --seed N (overrides the config
seed), --out DIR (output directory). Exit codes: 0 success, 2 usage error,
3 config error, 4 data error, 5 internal numeric error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .checkpoint import CheckpointRecord
from .config import load_config, write_resolved
from .contrast import CmlConfig
from .data import (
    DatasetManifest,
    JointMap,
    SynthConfig,
    load_dataset,
    preprocess_manifest,
    save_dataset,
    synth_generate,
)
from .errors import (
    ArgumentError,
    ConfigError,
    DataError,
    NumericError,
    ParseError,
    SchemaError,
    SkelrepError,
    StateError,
)
from .evaluate import (
    ProbeConfig,
    REPORT_HEADER,
    embed_manifest,
    knn_eval,
    linear_probe,
    write_report,
)
from .fuser import DistillConfig
from .pipeline import TrainConfig, encoder_from_checkpoint, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_NUMERIC = 5

COMMANDS = ("synth", "preprocess", "train", "eval-linear", "eval-knn", "report")


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skelrep",
        description="Skeleton sequence representation learning toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to the JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", required=True, help="output directory")
    return parser


def _load_data(path: str, name: str | None = None) -> DatasetManifest:
    if not Path(path).exists():
        raise DataError(f"dataset file {path} does not exist")
    return load_dataset(path, name)


def _cmd_synth(cfg: dict, out: Path) -> None:
    scfg = SynthConfig(**cfg)
    train_m, test_m = synth_generate(scfg)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(train_m, out / "train.jsonl")
    save_dataset(test_m, out / "test.jsonl")


def _cmd_preprocess(cfg: dict, out: Path) -> None:
    manifest = _load_data(cfg["input"])
    jmap = JointMap(**cfg["joint_map"]) if cfg.get("joint_map") else None
    processed = preprocess_manifest(
        manifest, cfg["max_frames"], jmap, per_frame=cfg.get("per_frame", False)
    )
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(processed, out / cfg.get("output_name", "processed.jsonl"))


def _train_config(cfg: dict) -> TrainConfig:
    cml = CmlConfig(
        tau=cfg["tau"],
        m_enc=cfg["m_enc"],
        m_mlp=cfg["m_mlp"],
        K=cfg["K"],
        normalize_embeddings=cfg.get("normalize_embeddings", True),
    )
    milestones = cfg.get("lr_milestones")
    return TrainConfig(
        mode=cfg["mode"],
        epochs=cfg["epochs"],
        lr=cfg["lr"],
        lr_milestones=tuple(milestones) if milestones is not None else None,
        batch_size=cfg["batch_size"],
        seed=cfg["seed"],
        momentum=cfg["momentum"],
        weight_decay=cfg["weight_decay"],
        hidden_size=cfg["hidden_size"],
        embed_dim=cfg["embed_dim"],
        mlp_hidden=cfg.get("mlp_hidden"),
        depth=cfg["depth"],
        dropout=cfg["dropout"],
        cml=cml,
        distill=DistillConfig(lambda_d=cfg["lambda_d"]),
        recon_direction=cfg["recon_direction"],
        teacher_checkpoint=cfg.get("teacher_checkpoint"),
        log_walltime=cfg.get("log_walltime", False),
    )


def _cmd_train(cfg: dict, out: Path) -> None:
    tcfg = _train_config(cfg)
    if tcfg.mode in ("crrl", "cml-pretrain-ser", "ser-pretrain-cml", "ser-distill-cml", "finetune"):
        if tcfg.teacher_checkpoint is None:
            raise ConfigError(f"mode {tcfg.mode!r} requires teacher_checkpoint")
    manifest = _load_data(cfg["train_data"], "train")
    train(manifest, tcfg, out_dir=out, resume=cfg.get("resume"))


def _cmd_eval(cfg: dict, out: Path, protocol: str) -> None:
    record = CheckpointRecord.load(cfg["checkpoint"])
    encoder = encoder_from_checkpoint(record)
    train_set = embed_manifest(encoder, _load_data(cfg["train_data"], "train"))
    test_set = embed_manifest(encoder, _load_data(cfg["test_data"], "test"))
    if protocol == "linear":
        probe = ProbeConfig(
            lr=cfg["lr"],
            epochs=cfg["epochs"],
            momentum=cfg["momentum"],
            weight_decay=cfg["weight_decay"],
            batch_size=cfg["batch_size"],
            seed=cfg["seed"],
        )
        report = linear_probe(train_set, test_set, probe)
    else:
        report = knn_eval(train_set, test_set, k=cfg.get("k", 1), seed=cfg["seed"])
    write_report(report, out)


def _cmd_report(cfg: dict, out: Path) -> None:
    rows = []
    summaries = []
    for item in cfg["inputs"]:
        src = Path(item)
        report_csv = src / "report.csv"
        if not report_csv.exists():
            raise DataError(f"no report.csv under {src}")
        lines = report_csv.read_text(encoding="utf-8").strip().splitlines()
        rows.extend(f"{src.name},{line}" for line in lines[1:])
        for name in ("confusion.csv", "confusion_norm.csv"):
            source = src / name
            if source.exists():
                (out / f"{src.name}.{name}").write_text(source.read_text(encoding="utf-8"))
        summary = src / "summary.txt"
        if summary.exists():
            summaries.append(f"== {src.name} ==\n{summary.read_text(encoding='utf-8')}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text("run," + REPORT_HEADER + "\n" + "\n".join(rows) + "\n")
    (out / "summary.txt").write_text("\n".join(summaries) if summaries else "no summaries\n")


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    out = Path(args.out)
    try:
        cfg = load_config(args.config, args.command, args.seed)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "synth":
            _cmd_synth(cfg, out)
        elif args.command == "preprocess":
            _cmd_preprocess(cfg, out)
        elif args.command == "train":
            _cmd_train(cfg, out)
        elif args.command == "eval-linear":
            _cmd_eval(cfg, out, "linear")
        elif args.command == "eval-knn":
            _cmd_eval(cfg, out, "knn")
        elif args.command == "report":
            _cmd_report(cfg, out)
        write_resolved(cfg, out)
    except (SchemaError, ConfigError, ArgumentError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ParseError, StateError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SkelrepError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
