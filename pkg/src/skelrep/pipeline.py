"""Training orchestration: two-step pretraining, fusion variants, fine-tuning.

Step 1 trains the contrastive motion learner; step 2 trains the sequence
reconstructor together with the distillation projector against the frozen
step-1 query encoder. Further modes cover the fusion-strategy ablations
(shared-encoder joint training, pre-training hand-offs, reverse
distillation), the velocity-generation ablations, and supervised
fine-tuning of a pretrained encoder.

Runs are deterministic: every random draw comes from a substream keyed on
(seed, purpose, epoch, step), so two runs with an identical config produce
identical metrics and checkpoints, and resuming from an epoch-e checkpoint
replays epochs e+1.. exactly.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import numeric as nm
from .checkpoint import CheckpointRecord
from .contrast import (
    CmlConfig,
    CmlModel,
    NegativeQueue,
    encode_key,
    encode_query,
    info_nce,
    init_cml_model,
    momentum_update,
)
from .data import DatasetManifest, velocity
from .errors import ArgumentError, ConfigError, DataError, NumericError, StateError
from .fuser import (
    DistillConfig,
    StudentProjector,
    distill_loss,
    init_student_projector,
    joint_loss,
    student_project,
    teacher_repr,
)
from .numeric import Parameter, RngStream, Tensor, sgd_step
from .reconstructor import (
    SerModel,
    decode_from_state,
    init_ser_model,
    recon_loss,
    sequence_mse,
    ser_forward,
)
from .seqmodel import (
    GruStack,
    gru_stack_forward,
    init_gru_stack,
    mlp_head_forward,
    tap,
)

MODES = (
    "cml",
    "ser",
    "crrl",
    "cml-ser-joint",
    "cml-pretrain-ser",
    "ser-pretrain-cml",
    "ser-distill-cml",
    "vg",
    "vgsr",
    "finetune",
)

_RECON_FAMILY = ("ser", "crrl", "cml-pretrain-ser", "vg", "vgsr")

METRICS_HEADER = "epoch,mode,loss_total,loss_recon,loss_contrastive,loss_distill,lr,seconds"


@dataclass
class TrainConfig:
    """One training run. `epochs` is the total target for this step."""

    mode: str = "crrl"
    epochs: int = 10
    lr: float = 0.05
    lr_milestones: tuple[int, ...] | None = None  # None: (20, 50) for recon-family modes
    batch_size: int = 16
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    hidden_size: int = 64
    embed_dim: int = 64
    mlp_hidden: int | None = None  # None: hidden_size
    depth: int = 2
    dropout: float = 0.2
    cml: CmlConfig = field(default_factory=CmlConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    recon_direction: str = "both"
    teacher_checkpoint: str | None = None
    log_walltime: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.recon_direction not in ("both", "forward", "reverse"):
            raise ConfigError(f"recon_direction must be both/forward/reverse, got {self.recon_direction!r}")
        if isinstance(self.cml, dict):
            self.cml = CmlConfig(**self.cml)
        if isinstance(self.distill, dict):
            self.distill = DistillConfig(**self.distill)
        if self.lr_milestones is not None:
            self.lr_milestones = tuple(int(m) for m in self.lr_milestones)

    @property
    def milestones(self) -> tuple[int, ...]:
        if self.lr_milestones is not None:
            return self.lr_milestones
        return (20, 50) if self.mode in _RECON_FAMILY else ()

    @property
    def head_hidden(self) -> int:
        return self.mlp_hidden or self.hidden_size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_milestones"] = list(self.milestones)
        return d


def paper_preset(mode: str = "crrl", **overrides) -> TrainConfig:
    """Full-scale settings: 256 hidden units, batch 32, 100/60 epoch steps."""
    base = dict(
        mode=mode,
        hidden_size=256,
        embed_dim=128,
        batch_size=32,
        dropout=0.2,
        cml=CmlConfig(tau=0.1, m_enc=0.999, m_mlp=1.0, K=64),
        distill=DistillConfig(lambda_d=1.0),
    )
    if mode in ("cml", "ser-pretrain-cml", "ser-distill-cml", "cml-ser-joint"):
        base.update(epochs=100, lr=0.01, lr_milestones=())
    else:
        base.update(epochs=60, lr=0.05, lr_milestones=(20, 50))
    base.update(overrides)
    return TrainConfig(**base)


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """base_lr * 0.5^(number of milestones <= epoch); epochs are 1-based."""
    drops = sum(1 for m in cfg.milestones if m <= epoch)
    return cfg.lr * (0.5 ** drops)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsRow:
    epoch: int
    mode: str
    loss_total: float
    loss_recon: float
    loss_contrastive: float
    loss_distill: float
    lr: float
    seconds: float


@dataclass
class MetricsLog:
    rows: list[MetricsRow] = field(default_factory=list)

    def append(self, row: MetricsRow) -> None:
        if self.rows and row.epoch <= self.rows[-1].epoch:
            raise ArgumentError(
                f"epoch {row.epoch} does not extend the log (last {self.rows[-1].epoch})"
            )
        self.rows.append(row)

    def to_csv(self, log_walltime: bool = False) -> str:
        lines = [METRICS_HEADER]
        for r in self.rows:
            seconds = r.seconds if log_walltime else 0.0
            lines.append(
                f"{r.epoch},{r.mode},{r.loss_total!r},{r.loss_recon!r},"
                f"{r.loss_contrastive!r},{r.loss_distill!r},{r.lr!r},{seconds!r}"
            )
        return "\n".join(lines) + "\n"

    def write_csv(self, path: str | Path, log_walltime: bool = False) -> None:
        Path(path).write_text(self.to_csv(log_walltime), encoding="utf-8")


# ---------------------------------------------------------------------------
# batching


def stack_flat(manifest: DatasetManifest) -> np.ndarray:
    """All sequences as one (N,T,I) array; training needs a uniform T."""
    if manifest.count == 0:
        raise DataError("dataset is empty")
    lengths = {s.num_frames for s in manifest.sequences}
    if len(lengths) != 1:
        raise DataError(
            f"sequences have mixed lengths {sorted(lengths)}; downsample to a uniform T first"
        )
    return np.stack([s.flat() for s in manifest.sequences], axis=0)


def _batch_slices(n: int, batch_size: int) -> list[slice]:
    return [slice(s, min(s + batch_size, n)) for s in range(0, n, batch_size)]


class _EpochAverager:
    """Sample-weighted means of per-batch loss components.

    `other` feeds only the total (used by losses that are none of the three
    named components, e.g. the fine-tuning cross-entropy).
    """

    def __init__(self):
        self.n = 0
        self.sums = np.zeros(4)  # recon, contrastive, distill, other

    def add(self, batch: int, recon=0.0, contrastive=0.0, distill=0.0, other=0.0):
        self.n += batch
        self.sums += batch * np.array([recon, contrastive, distill, other])

    def means(self) -> tuple[float, float, float, float]:
        return tuple(self.sums / max(self.n, 1))


# ---------------------------------------------------------------------------
# checkpoint plumbing


def _collect(named_iters, queue: NegativeQueue | None = None) -> dict[str, np.ndarray]:
    entries: dict[str, np.ndarray] = {}
    for name, p in named_iters:
        entries[name] = p.data.copy()
        entries[f"opt.{name}"] = p.momentum_buf.copy()
    if queue is not None:
        entries["queue.entries"] = queue.as_matrix().copy()
    return entries


def _restore(named_iters, entries: dict[str, np.ndarray]) -> None:
    for name, p in named_iters:
        if name not in entries:
            raise StateError(f"checkpoint is missing entry {name!r}")
        if entries[name].shape != p.data.shape:
            raise ConfigError(
                f"checkpoint entry {name!r} has shape {entries[name].shape}, expected {p.data.shape}"
            )
        p.data = entries[name].copy()
        p.momentum_buf = entries[f"opt.{name}"].copy()
        p.zero_grad()


def _meta(cfg: TrainConfig, input_size: int, epoch: int, eval_prefix: str) -> dict:
    return {
        "mode": cfg.mode,
        "epoch": epoch,
        "input_size": input_size,
        "eval_encoder_prefix": eval_prefix,
        "config": cfg.to_dict(),
    }


def _check_resume(record: CheckpointRecord, cfg: TrainConfig, input_size: int) -> int:
    meta = record.meta
    if meta.get("mode") != cfg.mode:
        raise ConfigError(f"resume mode {meta.get('mode')!r} does not match config {cfg.mode!r}")
    if meta.get("input_size") != input_size:
        raise ConfigError(
            f"resume input size {meta.get('input_size')} does not match dataset {input_size}"
        )
    saved = dict(meta.get("config", {}))
    current = cfg.to_dict()
    for skip in ("epochs",):
        saved.pop(skip, None)
        current.pop(skip, None)
    if saved != current:
        diff = {k for k in set(saved) | set(current) if saved.get(k) != current.get(k)}
        raise ConfigError(f"resume config differs in fields {sorted(diff)}")
    epoch = int(meta.get("epoch", 0))
    if epoch >= cfg.epochs:
        raise ConfigError(f"checkpoint already at epoch {epoch}, target is {cfg.epochs}")
    return epoch


def encoder_from_checkpoint(record: CheckpointRecord, prefix: str | None = None) -> GruStack:
    """Rebuild the evaluation encoder stored in a checkpoint."""
    meta = record.meta
    prefix = prefix or meta.get("eval_encoder_prefix")
    if not prefix:
        raise StateError("checkpoint does not name an evaluation encoder")
    cfg = meta.get("config", {})
    stack = init_gru_stack(
        input_size=int(meta["input_size"]),
        hidden_size=int(cfg.get("hidden_size", 64)),
        depth=int(cfg.get("depth", 2)),
        bidirectional=True,
        rng=RngStream(0),
        dropout_rate=float(cfg.get("dropout", 0.2)),
    )
    for name, p in stack.named_parameters():
        key = prefix + name
        if key not in record.entries:
            raise StateError(f"checkpoint is missing encoder entry {key!r}")
        if record.entries[key].shape != p.data.shape:
            raise ConfigError(
                f"encoder entry {key!r} has shape {record.entries[key].shape}, expected {p.data.shape}"
            )
        p.data = record.entries[key].copy()
    return stack


def load_teacher(source: str | Path | CheckpointRecord) -> tuple[GruStack, dict]:
    """Load the frozen teacher encoder from a step-1 checkpoint."""
    if isinstance(source, CheckpointRecord):
        record = source
    else:
        try:
            record = CheckpointRecord.load(source)
        except (OSError, StateError) as exc:
            raise StateError(f"missing teacher checkpoint: {exc}") from exc
    return encoder_from_checkpoint(record), record.meta


# ---------------------------------------------------------------------------
# training loops


def _epoch_loop(cfg: TrainConfig, n: int, start_epoch: int, body, metrics: MetricsLog):
    root = RngStream(cfg.seed)
    slices = _batch_slices(n, cfg.batch_size)
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        t0 = time.perf_counter()
        lr = lr_at_epoch(cfg, epoch)
        order = root.substream("shuffle", epoch).permutation(n)
        avg = _EpochAverager()
        for step, sl in enumerate(slices):
            idx = order[sl]
            step_rng = root.substream("step", epoch, step)
            body(idx, lr, step_rng, avg)
        recon, contrastive, distill, other = avg.means()
        total = recon + contrastive + distill + other
        if not np.isfinite(total):
            raise NumericError(
                f"loss diverged to {total} at epoch {epoch}; reduce the learning rate"
            )
        metrics.append(
            MetricsRow(
                epoch=epoch,
                mode=cfg.mode,
                loss_total=total,
                loss_recon=recon,
                loss_contrastive=contrastive,
                loss_distill=distill,
                lr=lr,
                seconds=time.perf_counter() - t0,
            )
        )


def _velocities(xs: np.ndarray) -> np.ndarray:
    """(N,T,I) coordinate stacks to same-shape velocity stacks."""
    v = np.empty_like(xs)
    v[:, :-1] = xs[:, 1:] - xs[:, :-1]
    v[:, -1] = v[:, -2]
    return v


def _init_cml(cfg: TrainConfig, input_size: int, root: RngStream) -> tuple[CmlModel, NegativeQueue]:
    model = init_cml_model(
        input_size, cfg.hidden_size, cfg.head_hidden, cfg.embed_dim,
        root.substream("init", "cml"), cfg.depth, cfg.dropout,
    )
    queue = NegativeQueue(cfg.cml.K, cfg.embed_dim)
    queue.fill_random(root.substream("queue"))
    return model, queue


def _cml_step(cfg, model, queue, xb, vb, step_rng):
    """One contrastive forward/backward; returns the loss and the detached keys."""
    q, _ = encode_query(
        Tensor(xb), model, step_rng.substream("q"), True, cfg.cml.normalize_embeddings
    )
    k, _ = encode_key(
        Tensor(vb), model, step_rng.substream("k"), True, cfg.cml.normalize_embeddings
    )
    loss_c = info_nce(q, k.data, queue, cfg.cml.tau)
    loss_c.backward()
    return loss_c, k


def train_cml(
    dataset: DatasetManifest,
    cfg: TrainConfig,
    resume: CheckpointRecord | None = None,
) -> tuple[CheckpointRecord, MetricsLog]:
    """Step 1: contrastive pretraining of the query encoder."""
    xs = stack_flat(dataset)
    vs = _velocities(xs)
    n, _, input_size = xs.shape
    if cfg.batch_size > cfg.cml.K:
        warnings.warn(
            f"batch size {cfg.batch_size} exceeds queue capacity {cfg.cml.K}; "
            "the queue holds less than one batch of history",
            stacklevel=2,
        )
    root = RngStream(cfg.seed)
    model, queue = _init_cml(cfg, input_size, root)
    start_epoch = 0
    if resume is not None:
        start_epoch = _check_resume(resume, cfg, input_size)
        _restore(model.named_parameters(), resume.entries)
        queue.restore(resume.entries["queue.entries"])

    params = model.query_parameters()
    metrics = MetricsLog()

    def body(idx, lr, step_rng, avg):
        xb = np.ascontiguousarray(xs[idx].transpose(1, 0, 2))
        vb = np.ascontiguousarray(vs[idx].transpose(1, 0, 2))
        loss_c, k = _cml_step(cfg, model, queue, xb, vb, step_rng)
        sgd_step(params, lr, cfg.momentum, cfg.weight_decay)
        momentum_update(model, cfg.cml.m_enc, cfg.cml.m_mlp)
        queue.push(k.data, enforce_unit=cfg.cml.normalize_embeddings)
        avg.add(len(idx), contrastive=loss_c.item())

    _epoch_loop(cfg, n, start_epoch, body, metrics)
    entries = _collect(model.named_parameters(), queue)
    record = CheckpointRecord(entries, _meta(cfg, input_size, cfg.epochs, "query_encoder."))
    return record, metrics


def _copy_stack(src: GruStack, dst: GruStack) -> None:
    src_params = dict(src.named_parameters())
    for name, p in dst.named_parameters():
        if name not in src_params or src_params[name].data.shape != p.data.shape:
            raise ConfigError(f"encoder parameter {name!r} does not match the pretrained shape")
        p.data = src_params[name].data.copy()


def train_crrl(
    dataset: DatasetManifest,
    cfg: TrainConfig,
    teacher: str | Path | CheckpointRecord | None = None,
    resume: CheckpointRecord | None = None,
) -> tuple[CheckpointRecord, MetricsLog]:
    """Step 2: reconstruction plus distillation against the frozen teacher."""
    xs = stack_flat(dataset)
    n, steps, input_size = xs.shape
    teacher_stack, teacher_meta = load_teacher(teacher if teacher is not None else _teacher_source(cfg))
    if teacher_stack.input_size != input_size:
        raise ConfigError(
            f"teacher expects input width {teacher_stack.input_size}, dataset provides {input_size}"
        )
    root = RngStream(cfg.seed)
    model = init_ser_model(input_size, cfg.hidden_size, root.substream("init", "ser"), cfg.depth, cfg.dropout)
    if model.encoder.output_size != teacher_stack.output_size:
        raise ConfigError(
            f"student representation width {model.encoder.output_size} "
            f"differs from teacher width {teacher_stack.output_size}"
        )
    projector = init_student_projector(
        model.encoder.output_size, teacher_stack.output_size, root.substream("init", "projector")
    )
    start_epoch = 0
    named = lambda: list(model.named_parameters("ser.")) + list(projector.named_parameters("projector."))
    if resume is not None:
        start_epoch = _check_resume(resume, cfg, input_size)
        _restore(named(), resume.entries)
    params = model.parameters() + projector.parameters()
    metrics = MetricsLog()
    # the teacher is frozen and runs without dropout, so its representation
    # of every training sequence can be computed once up front
    teacher_all = _teacher_table(teacher_stack, xs)

    def body(idx, lr, step_rng, avg):
        xb = np.ascontiguousarray(xs[idx].transpose(1, 0, 2))
        xt = Tensor(xb)
        out = ser_forward(xt, model, step_rng.substream("ser"), True, cfg.recon_direction)
        l_r = recon_loss(xb, out, cfg.recon_direction)
        h_s = student_project(out.h, projector)
        l_d = distill_loss(teacher_all[idx], h_s)
        total = joint_loss(l_r, l_d, cfg.distill.lambda_d)
        total.backward()
        sgd_step(params, lr, cfg.momentum, cfg.weight_decay)
        avg.add(len(idx), recon=l_r.item(), distill=cfg.distill.lambda_d * l_d.item())

    _epoch_loop(cfg, n, start_epoch, body, metrics)
    entries = _collect(named())
    for name, p in teacher_stack.named_parameters("teacher."):
        entries[name] = p.data.copy()
    record = CheckpointRecord(entries, _meta(cfg, input_size, cfg.epochs, "ser.encoder."))
    record.meta["teacher_mode"] = teacher_meta.get("mode")
    return record, metrics


def _teacher_source(cfg: TrainConfig):
    if cfg.teacher_checkpoint is None:
        raise ConfigError(f"mode {cfg.mode!r} requires teacher_checkpoint")
    return cfg.teacher_checkpoint


def _teacher_table(teacher_stack: GruStack, xs: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Frozen-teacher representations for all (N,T,I) sequences."""
    rows = []
    for start in range(0, xs.shape[0], chunk):
        xb = np.ascontiguousarray(xs[start : start + chunk].transpose(1, 0, 2))
        rows.append(teacher_repr(Tensor(xb), teacher_stack))
    return np.concatenate(rows, axis=0)


def _train_recon(
    dataset: DatasetManifest,
    cfg: TrainConfig,
    resume: CheckpointRecord | None = None,
) -> tuple[CheckpointRecord, MetricsLog]:
    """Reconstruction-family training: ser, cml-pretrain-ser, vg, vgsr."""
    xs = stack_flat(dataset)
    n, steps, input_size = xs.shape
    vs = _velocities(xs) if cfg.mode in ("vg", "vgsr") else None
    root = RngStream(cfg.seed)
    model = init_ser_model(input_size, cfg.hidden_size, root.substream("init", "ser"), cfg.depth, cfg.dropout)
    vel_model: SerModel | None = None
    if cfg.mode == "vgsr":
        # separate decoder and projection for the velocity target; encoder is shared
        vel_model = init_ser_model(
            input_size, cfg.hidden_size, root.substream("init", "vel"), cfg.depth, cfg.dropout
        )
        vel_model.encoder = model.encoder
    if cfg.mode == "cml-pretrain-ser":
        teacher, _ = load_teacher(_teacher_source(cfg))
        _copy_stack(teacher, model.encoder)

    def named():
        out = list(model.named_parameters("ser."))
        if vel_model is not None:
            out += list(vel_model.decoder.named_parameters("vel.decoder."))
            out += [("vel.out_w", vel_model.out_w), ("vel.out_b", vel_model.out_b)]
        return out

    start_epoch = 0
    if resume is not None:
        start_epoch = _check_resume(resume, cfg, input_size)
        _restore(named(), resume.entries)
    params = [p for _, p in named()]
    metrics = MetricsLog()

    def body(idx, lr, step_rng, avg):
        xb = np.ascontiguousarray(xs[idx].transpose(1, 0, 2))
        xt = Tensor(xb)
        if cfg.mode == "vg":
            vb = np.ascontiguousarray(vs[idx].transpose(1, 0, 2))
            out = ser_forward(xt, model, step_rng.substream("ser"), True, "forward")
            l_r = sequence_mse(vb, out.x_hat_fwd)
        elif cfg.mode == "vgsr":
            vb = np.ascontiguousarray(vs[idx].transpose(1, 0, 2))
            rng = step_rng.substream("ser")
            h = gru_stack_forward(xt, model.encoder, rng.substream("enc"), True)
            seed = nm.index_time(h, 0)
            x_hat = decode_from_state(model, seed, steps, rng.substream("dec_x"), True)
            v_hat = decode_from_state(vel_model, seed, steps, rng.substream("dec_v"), True)
            l_r = nm.add(sequence_mse(xb, x_hat), sequence_mse(vb, v_hat))
        else:
            out = ser_forward(xt, model, step_rng.substream("ser"), True, cfg.recon_direction)
            l_r = recon_loss(xb, out, cfg.recon_direction)
        l_r.backward()
        sgd_step(params, lr, cfg.momentum, cfg.weight_decay)
        avg.add(len(idx), recon=l_r.item())

    _epoch_loop(cfg, n, start_epoch, body, metrics)
    record = CheckpointRecord(_collect(named()), _meta(cfg, input_size, cfg.epochs, "ser.encoder."))
    return record, metrics


def _train_cml_ser_joint(
    dataset: DatasetManifest,
    cfg: TrainConfig,
    resume: CheckpointRecord | None = None,
) -> tuple[CheckpointRecord, MetricsLog]:
    """One shared encoder minimizes the contrastive and reconstruction losses jointly."""
    xs = stack_flat(dataset)
    vs = _velocities(xs)
    n, steps, input_size = xs.shape
    root = RngStream(cfg.seed)
    cml_model, queue = _init_cml(cfg, input_size, root)
    ser_model = init_ser_model(input_size, cfg.hidden_size, root.substream("init", "ser"), cfg.depth, cfg.dropout)
    ser_model.encoder = cml_model.query_encoder  # shared

    def named():
        out = list(cml_model.named_parameters("cml."))
        out += list(ser_model.decoder.named_parameters("ser.decoder."))
        out += [("ser.out_w", ser_model.out_w), ("ser.out_b", ser_model.out_b)]
        return out

    start_epoch = 0
    if resume is not None:
        start_epoch = _check_resume(resume, cfg, input_size)
        _restore(named(), resume.entries)
        queue.restore(resume.entries["queue.entries"])
    params = cml_model.query_parameters() + ser_model.decode_parameters()
    metrics = MetricsLog()

    def body(idx, lr, step_rng, avg):
        xb = np.ascontiguousarray(xs[idx].transpose(1, 0, 2))
        vb = np.ascontiguousarray(vs[idx].transpose(1, 0, 2))
        xt = Tensor(xb)
        rng = step_rng.substream("joint")
        h = gru_stack_forward(xt, cml_model.query_encoder, rng.substream("enc"), True)
        raw_q = mlp_head_forward(tap(h), cml_model.query_head)
        if cfg.cml.normalize_embeddings:
            q, _ = nm.l2_normalize_rows(raw_q)
        else:
            q = raw_q
        k, _ = encode_key(Tensor(vb), cml_model, rng.substream("k"), True, cfg.cml.normalize_embeddings)
        l_c = info_nce(q, k.data, queue, cfg.cml.tau)
        x_hat = decode_from_state(ser_model, nm.index_time(h, 0), steps, rng.substream("dec_f"), True)
        x_rev = decode_from_state(ser_model, nm.index_time(h, steps - 1), steps, rng.substream("dec_r"), True)
        l_r = nm.add(sequence_mse(xb, x_hat), sequence_mse(xb[::-1].copy(), x_rev))
        total = nm.add(l_c, l_r)
        total.backward()
        sgd_step(params, lr, cfg.momentum, cfg.weight_decay)
        momentum_update(cml_model, cfg.cml.m_enc, cfg.cml.m_mlp)
        queue.push(k.data, enforce_unit=cfg.cml.normalize_embeddings)
        avg.add(len(idx), recon=l_r.item(), contrastive=l_c.item())

    _epoch_loop(cfg, n, start_epoch, body, metrics)
    entries = _collect(named(), queue)
    record = CheckpointRecord(entries, _meta(cfg, input_size, cfg.epochs, "cml.query_encoder."))
    return record, metrics


def _train_ser_distill_cml(
    dataset: DatasetManifest,
    cfg: TrainConfig,
    resume: CheckpointRecord | None = None,
) -> tuple[CheckpointRecord, MetricsLog]:
    """Reverse distillation: a frozen reconstruction encoder teaches the contrastive learner."""
    xs = stack_flat(dataset)
    vs = _velocities(xs)
    n, _, input_size = xs.shape
    teacher_stack, teacher_meta = load_teacher(_teacher_source(cfg))
    if teacher_stack.input_size != input_size:
        raise ConfigError(
            f"teacher expects input width {teacher_stack.input_size}, dataset provides {input_size}"
        )
    root = RngStream(cfg.seed)
    model, queue = _init_cml(cfg, input_size, root)
    projector = init_student_projector(
        model.query_encoder.output_size, teacher_stack.output_size, root.substream("init", "projector")
    )

    def named():
        return list(model.named_parameters("cml.")) + list(projector.named_parameters("projector."))

    start_epoch = 0
    if resume is not None:
        start_epoch = _check_resume(resume, cfg, input_size)
        _restore(named(), resume.entries)
        queue.restore(resume.entries["queue.entries"])
    params = model.query_parameters() + projector.parameters()
    metrics = MetricsLog()
    teacher_all = _teacher_table(teacher_stack, xs)

    def body(idx, lr, step_rng, avg):
        xb = np.ascontiguousarray(xs[idx].transpose(1, 0, 2))
        vb = np.ascontiguousarray(vs[idx].transpose(1, 0, 2))
        xt = Tensor(xb)
        rng = step_rng.substream("sdc")
        h = gru_stack_forward(xt, model.query_encoder, rng.substream("q"), True)
        raw_q = mlp_head_forward(tap(h), model.query_head)
        if cfg.cml.normalize_embeddings:
            q, _ = nm.l2_normalize_rows(raw_q)
        else:
            q = raw_q
        k, _ = encode_key(Tensor(vb), model, rng.substream("k"), True, cfg.cml.normalize_embeddings)
        l_c = info_nce(q, k.data, queue, cfg.cml.tau)
        h_s = student_project(h, projector)
        l_d = distill_loss(teacher_all[idx], h_s)
        total = joint_loss(l_c, l_d, cfg.distill.lambda_d)
        total.backward()
        sgd_step(params, lr, cfg.momentum, cfg.weight_decay)
        momentum_update(model, cfg.cml.m_enc, cfg.cml.m_mlp)
        queue.push(k.data, enforce_unit=cfg.cml.normalize_embeddings)
        avg.add(len(idx), contrastive=l_c.item(), distill=cfg.distill.lambda_d * l_d.item())

    _epoch_loop(cfg, n, start_epoch, body, metrics)
    entries = _collect(named(), queue)
    for name, p in teacher_stack.named_parameters("teacher."):
        entries[name] = p.data.copy()
    record = CheckpointRecord(entries, _meta(cfg, input_size, cfg.epochs, "cml.query_encoder."))
    record.meta["teacher_mode"] = teacher_meta.get("mode")
    return record, metrics


def finetune(
    checkpoint: str | Path | CheckpointRecord,
    dataset: DatasetManifest,
    cfg: TrainConfig,
    resume: CheckpointRecord | None = None,
) -> tuple[CheckpointRecord, MetricsLog]:
    """Jointly train the pretrained encoder and a linear classifier on labels."""
    labels = dataset.labels()
    if np.any(labels < 0):
        raise DataError("fine-tuning requires labels on every sequence")
    if dataset.classes < 2:
        raise DataError(f"fine-tuning needs at least 2 classes, got {dataset.classes}")
    xs = stack_flat(dataset)
    n, _, input_size = xs.shape
    record_in = checkpoint if isinstance(checkpoint, CheckpointRecord) else CheckpointRecord.load(checkpoint)
    encoder = encoder_from_checkpoint(record_in)
    if encoder.input_size != input_size:
        raise ConfigError(
            f"encoder expects input width {encoder.input_size}, dataset provides {input_size}"
        )
    w = Parameter(np.zeros((encoder.output_size, dataset.classes)))
    b = Parameter(np.zeros(dataset.classes))

    def named():
        out = list(encoder.named_parameters("ser.encoder."))
        out += [("classifier.w", w), ("classifier.b", b)]
        return out

    start_epoch = 0
    if resume is not None:
        start_epoch = _check_resume(resume, cfg, input_size)
        _restore(named(), resume.entries)
    params = [p for _, p in named()]
    metrics = MetricsLog()

    def body(idx, lr, step_rng, avg):
        xb = np.ascontiguousarray(xs[idx].transpose(1, 0, 2))
        h = gru_stack_forward(Tensor(xb), encoder, step_rng.substream("enc"), True)
        logits = nm.affine(tap(h), w, b)
        loss = nm.softmax_xent(logits, labels[idx])
        loss.backward()
        sgd_step(params, lr, cfg.momentum, cfg.weight_decay)
        avg.add(len(idx), other=loss.item())

    _epoch_loop(cfg, n, start_epoch, body, metrics)
    record = CheckpointRecord(_collect(named()), _meta(cfg, input_size, cfg.epochs, "ser.encoder."))
    record.meta["classes"] = dataset.classes
    return record, metrics


def train_variant(
    dataset: DatasetManifest,
    cfg: TrainConfig,
    resume: CheckpointRecord | None = None,
) -> tuple[CheckpointRecord, MetricsLog]:
    """Dispatch the fusion-strategy and velocity-generation ablation modes."""
    if cfg.mode == "cml-ser-joint":
        return _train_cml_ser_joint(dataset, cfg, resume)
    if cfg.mode == "ser-distill-cml":
        return _train_ser_distill_cml(dataset, cfg, resume)
    if cfg.mode in ("cml-pretrain-ser", "vg", "vgsr", "ser"):
        return _train_recon(dataset, cfg, resume)
    if cfg.mode == "ser-pretrain-cml":
        return _train_ser_pretrain_cml(dataset, cfg, resume)
    raise ConfigError(f"unknown variant mode {cfg.mode!r}")


def _train_ser_pretrain_cml(dataset, cfg, resume=None):
    xs = stack_flat(dataset)
    vs = _velocities(xs)
    n, _, input_size = xs.shape
    teacher_stack, _ = load_teacher(_teacher_source(cfg))
    root = RngStream(cfg.seed)
    model, queue = _init_cml(cfg, input_size, root)
    _copy_stack(teacher_stack, model.query_encoder)
    _copy_stack(teacher_stack, model.key_encoder)
    start_epoch = 0
    if resume is not None:
        start_epoch = _check_resume(resume, cfg, input_size)
        _restore(model.named_parameters(), resume.entries)
        queue.restore(resume.entries["queue.entries"])
    params = model.query_parameters()
    metrics = MetricsLog()

    def body(idx, lr, step_rng, avg):
        xb = np.ascontiguousarray(xs[idx].transpose(1, 0, 2))
        vb = np.ascontiguousarray(vs[idx].transpose(1, 0, 2))
        loss_c, k = _cml_step(cfg, model, queue, xb, vb, step_rng)
        sgd_step(params, lr, cfg.momentum, cfg.weight_decay)
        momentum_update(model, cfg.cml.m_enc, cfg.cml.m_mlp)
        queue.push(k.data, enforce_unit=cfg.cml.normalize_embeddings)
        avg.add(len(idx), contrastive=loss_c.item())

    _epoch_loop(cfg, n, start_epoch, body, metrics)
    entries = _collect(model.named_parameters(), queue)
    record = CheckpointRecord(entries, _meta(cfg, input_size, cfg.epochs, "query_encoder."))
    return record, metrics


def train(
    dataset: DatasetManifest,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    resume: str | Path | CheckpointRecord | None = None,
    finetune_checkpoint: str | Path | CheckpointRecord | None = None,
) -> tuple[CheckpointRecord, MetricsLog]:
    """Train per cfg.mode and optionally persist checkpoint + metrics CSV."""
    resume_record = None
    if resume is not None:
        resume_record = resume if isinstance(resume, CheckpointRecord) else CheckpointRecord.load(resume)
    if cfg.mode == "cml":
        record, metrics = train_cml(dataset, cfg, resume_record)
    elif cfg.mode == "crrl":
        record, metrics = train_crrl(dataset, cfg, resume=resume_record)
    elif cfg.mode == "finetune":
        if finetune_checkpoint is None:
            finetune_checkpoint = _teacher_source(cfg)
        record, metrics = finetune(finetune_checkpoint, dataset, cfg, resume_record)
    else:
        record, metrics = train_variant(dataset, cfg, resume_record)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        record.save(out_dir / "checkpoint")
        metrics.write_csv(out_dir / "metrics.csv", cfg.log_walltime)
    return record, metrics
