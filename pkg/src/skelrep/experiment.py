"""Seeded desk-scale experiments: mode-ordering study and hyper-parameter sweeps.

The ordering experiment trains the contrastive learner, the reconstructor
(in all three reconstruction directions), and the fused model on one
synthetic split per seed, then scores every encoder (plus the untrained
baseline) with the linear probe. It reports per-mode accuracies and the
reversal-pair diagnostics (cross-confusion and pair accuracy) that the
temporally-inverse class pair exposes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .contrast import CmlConfig
from .data import DatasetManifest, SynthConfig, preprocess_manifest, synth_generate
from .evaluate import (
    EvalReport,
    ProbeConfig,
    embed_manifest,
    linear_probe,
    random_encoder,
)
from .pipeline import (
    CheckpointRecord,
    TrainConfig,
    encoder_from_checkpoint,
    train_cml,
    train_crrl,
    train_variant,
)

ORDERING_MODES = ("rand", "cml", "ser", "ser_forward", "ser_reverse", "crrl")


@dataclass
class OrderingConfig:
    """Desk-scale defaults: 6 classes with a reversal pair, hidden 64."""

    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    classes: int = 6
    train_per_class: int = 200
    test_per_class: int = 100
    T: int = 20
    J: int = 8
    noise_sigma: float = 0.1
    hidden_size: int = 64
    embed_dim: int = 64
    batch_size: int = 16
    cml_epochs: int = 30
    recon_epochs: int = 20
    cml_lr: float = 0.005
    recon_lr: float = 0.4
    lambda_d: float = 4.0
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    cml: CmlConfig = field(default_factory=CmlConfig)
    data_seed: int = 1000


@dataclass
class SeedOutcome:
    seed: int
    accuracy: dict[str, float]
    pair_cross: dict[str, float]
    pair_accuracy: dict[str, float]


@dataclass
class OrderingResult:
    outcomes: list[SeedOutcome]

    def median_accuracy(self, mode: str) -> float:
        return float(np.median([o.accuracy[mode] for o in self.outcomes]))

    def median_pair_cross(self, mode: str) -> float:
        return float(np.median([o.pair_cross[mode] for o in self.outcomes]))

    def median_pair_accuracy(self, mode: str) -> float:
        return float(np.median([o.pair_accuracy[mode] for o in self.outcomes]))

    def summary_rows(self) -> list[str]:
        rows = ["mode,median_accuracy,median_pair_cross,median_pair_accuracy"]
        for mode in ORDERING_MODES:
            rows.append(
                f"{mode},{self.median_accuracy(mode)!r},"
                f"{self.median_pair_cross(mode)!r},{self.median_pair_accuracy(mode)!r}"
            )
        return rows


def make_synthetic_split(cfg: OrderingConfig) -> tuple[DatasetManifest, DatasetManifest]:
    """The experiment's fixed dataset; seeds vary only the training runs."""
    scfg = SynthConfig(
        classes=cfg.classes,
        samples_per_class=cfg.train_per_class,
        test_samples_per_class=cfg.test_per_class,
        T=cfg.T,
        J=cfg.J,
        noise_sigma=cfg.noise_sigma,
        include_reversal_pair=True,
        seed=cfg.data_seed,
    )
    train_m, test_m = synth_generate(scfg)
    return preprocess_manifest(train_m, cfg.T), preprocess_manifest(test_m, cfg.T)


def _train_cfg(cfg: OrderingConfig, mode: str, seed: int, **overrides) -> TrainConfig:
    base = dict(
        mode=mode,
        seed=seed,
        batch_size=cfg.batch_size,
        hidden_size=cfg.hidden_size,
        embed_dim=cfg.embed_dim,
        cml=cfg.cml,
    )
    if mode in ("cml", "ser-pretrain-cml", "ser-distill-cml", "cml-ser-joint"):
        base.update(epochs=cfg.cml_epochs, lr=cfg.cml_lr)
    else:
        base.update(epochs=cfg.recon_epochs, lr=cfg.recon_lr)
    base.update(overrides)
    return TrainConfig(**base)


def _pair_stats(report: EvalReport) -> tuple[float, float]:
    c = report.confusion
    support = c[0].sum() + c[1].sum()
    cross = (c[0, 1] + c[1, 0]) / max(support, 1)
    pair_acc = (c[0, 0] + c[1, 1]) / max(support, 1)
    return float(cross), float(pair_acc)


def run_seed(cfg: OrderingConfig, seed: int, split=None) -> SeedOutcome:
    """Train every ordering-study mode with one seed and probe it."""
    train_m, test_m = split if split is not None else make_synthetic_split(cfg)
    input_size = cfg.J * 3

    encoders = {"rand": random_encoder(input_size, cfg.hidden_size, seed)}

    cml_record, _ = train_cml(train_m, _train_cfg(cfg, "cml", seed))
    encoders["cml"] = encoder_from_checkpoint(cml_record)

    for name, direction in (("ser", "both"), ("ser_forward", "forward"), ("ser_reverse", "reverse")):
        record, _ = train_variant(train_m, _train_cfg(cfg, "ser", seed, recon_direction=direction))
        encoders[name] = encoder_from_checkpoint(record)

    from .fuser import DistillConfig

    crrl_record, _ = train_crrl(
        train_m,
        _train_cfg(cfg, "crrl", seed, distill=DistillConfig(lambda_d=cfg.lambda_d)),
        teacher=cml_record,
    )
    encoders["crrl"] = encoder_from_checkpoint(crrl_record)

    accuracy, pair_cross, pair_accuracy = {}, {}, {}
    probe = ProbeConfig(
        lr=cfg.probe.lr,
        epochs=cfg.probe.epochs,
        momentum=cfg.probe.momentum,
        weight_decay=cfg.probe.weight_decay,
        batch_size=cfg.probe.batch_size,
        seed=seed,
    )
    for name, encoder in encoders.items():
        report = linear_probe(
            embed_manifest(encoder, train_m), embed_manifest(encoder, test_m), probe
        )
        accuracy[name] = report.accuracy
        pair_cross[name], pair_accuracy[name] = _pair_stats(report)
    return SeedOutcome(seed=seed, accuracy=accuracy, pair_cross=pair_cross, pair_accuracy=pair_accuracy)


def run_ordering_experiment(cfg: OrderingConfig | None = None) -> OrderingResult:
    cfg = cfg or OrderingConfig()
    split = make_synthetic_split(cfg)
    return OrderingResult(outcomes=[run_seed(cfg, s, split) for s in cfg.seeds])


# ---------------------------------------------------------------------------
# hyper-parameter sweeps

SWEEP_HEADER = "param,value,accuracy,rand_accuracy"


def run_cml_sweep(
    cfg: OrderingConfig, param: str, values, seed: int = 0
) -> list[dict]:
    """Train the contrastive learner across one hyper-parameter axis.

    `param` is one of K, tau, m_mlp, m_enc. Returns one report row per
    value with the linear-probe accuracy and the untrained baseline on the
    same split.
    """
    if param not in ("K", "tau", "m_mlp", "m_enc"):
        raise ValueError(f"unsupported sweep parameter {param!r}")
    train_m, test_m = make_synthetic_split(cfg)
    input_size = cfg.J * 3
    probe = ProbeConfig(seed=seed, epochs=cfg.probe.epochs)

    rand_report = linear_probe(
        embed_manifest(random_encoder(input_size, cfg.hidden_size, seed), train_m),
        embed_manifest(random_encoder(input_size, cfg.hidden_size, seed), test_m),
        probe,
    )
    rows = []
    for value in values:
        cml = CmlConfig(
            tau=float(value) if param == "tau" else cfg.cml.tau,
            m_enc=float(value) if param == "m_enc" else cfg.cml.m_enc,
            m_mlp=float(value) if param == "m_mlp" else cfg.cml.m_mlp,
            K=int(value) if param == "K" else cfg.cml.K,
            normalize_embeddings=cfg.cml.normalize_embeddings,
        )
        record, _ = train_cml(train_m, _train_cfg(cfg, "cml", seed, cml=cml))
        encoder = encoder_from_checkpoint(record)
        report = linear_probe(embed_manifest(encoder, train_m), embed_manifest(encoder, test_m), probe)
        rows.append(
            {
                "param": param,
                "value": value,
                "accuracy": report.accuracy,
                "rand_accuracy": rand_report.accuracy,
            }
        )
    return rows


def write_sweep_csv(rows: list[dict], path: str | Path) -> None:
    lines = [SWEEP_HEADER]
    for r in rows:
        lines.append(f"{r['param']},{r['value']},{r['accuracy']!r},{r['rand_accuracy']!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
