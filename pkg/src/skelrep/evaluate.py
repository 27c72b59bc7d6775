"""Evaluation protocols over frozen representations: linear probe, KNN.

Representations are pooled encoder states taken in evaluation mode with no
normalization. The linear probe trains a single affine classifier with the
same SGD kernel as the rest of the package; the KNN protocol assigns each
test embedding the label of its cosine-nearest training embedding, ties
broken by the lowest training index.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numeric as nm
from .data import DatasetManifest
from .errors import ArgumentError, DataError
from .numeric import Parameter, RngStream, Tensor, sgd_step
from .pipeline import stack_flat
from .seqmodel import GruStack, gru_stack_forward, init_gru_stack, tap


@dataclass
class EmbeddingSet:
    matrix: np.ndarray  # (N, H)
    labels: np.ndarray  # (N,)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.matrix.shape[0] != self.labels.shape[0]:
            raise ArgumentError(
                f"embedding rows {self.matrix.shape[0]} vs labels {self.labels.shape[0]}"
            )


@dataclass
class ProbeConfig:
    lr: float = 0.1
    epochs: int = 100
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 64
    seed: int = 0


@dataclass
class EvalReport:
    protocol: str
    accuracy: float
    per_class: list[float]
    confusion: np.ndarray  # (C, C) counts, rows are true classes
    config_hash: str
    seed: int
    flags: list[str] = field(default_factory=list)

    @property
    def classes(self) -> int:
        return self.confusion.shape[0]

    @property
    def count(self) -> int:
        return int(self.confusion.sum())


def _config_hash(obj) -> str:
    payload = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.blake2b(payload, digest_size=8).hexdigest()


def random_encoder(
    input_size: int, hidden_size: int, seed: int, depth: int = 2, dropout: float = 0.2
) -> GruStack:
    """The untrained lower-bound baseline encoder."""
    return init_gru_stack(
        input_size, hidden_size, depth, bidirectional=True,
        rng=RngStream(seed).substream("rand-enc"), dropout_rate=dropout,
    )


def extract_representation(encoder: GruStack, x) -> np.ndarray:
    """Pooled encoder states for one sequence or batch, dropout off, no tape."""
    arr = x if isinstance(x, np.ndarray) else x.flat()
    t = Tensor(arr)
    with nm.no_grad():
        return tap(gru_stack_forward(t, encoder, rng=None, training=False)).data


def embed_manifest(
    encoder: GruStack, manifest: DatasetManifest, batch_size: int = 64
) -> EmbeddingSet:
    """Representations for a whole split, batched over the sample axis."""
    xs = stack_flat(manifest)  # (N,T,I)
    rows = []
    for start in range(0, xs.shape[0], batch_size):
        chunk = np.ascontiguousarray(xs[start : start + batch_size].transpose(1, 0, 2))
        rows.append(extract_representation(encoder, chunk))
    return EmbeddingSet(matrix=np.concatenate(rows, axis=0), labels=manifest.labels())


def confusion_matrix(predictions, labels, classes: int) -> np.ndarray:
    """Counts with entry (i, j) = true class i predicted as j."""
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise ArgumentError(f"predictions {predictions.shape} vs labels {labels.shape}")
    for name, arr in (("prediction", predictions), ("label", labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= classes):
            raise ArgumentError(f"{name} outside [0, {classes})")
    out = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(out, (labels, predictions), 1)
    return out


def row_normalize(confusion: np.ndarray) -> np.ndarray:
    support = confusion.sum(axis=1, keepdims=True)
    return confusion / np.maximum(support, 1)


def _report(protocol, predictions, labels, classes, config_hash, seed, flags):
    confusion = confusion_matrix(predictions, labels, classes)
    accuracy = float(np.trace(confusion)) / max(len(labels), 1)
    support = confusion.sum(axis=1)
    per_class = [
        float(confusion[c, c]) / support[c] if support[c] else 0.0 for c in range(classes)
    ]
    return EvalReport(
        protocol=protocol,
        accuracy=accuracy,
        per_class=per_class,
        confusion=confusion,
        config_hash=config_hash,
        seed=seed,
        flags=flags,
    )


def linear_probe(
    train: EmbeddingSet, test: EmbeddingSet, cfg: ProbeConfig | None = None
) -> EvalReport:
    """Train an affine classifier on frozen embeddings, report test accuracy."""
    cfg = cfg or ProbeConfig()
    if np.any(train.labels < 0) or np.any(test.labels < 0):
        raise DataError("linear probe requires labels on both splits")
    classes = int(max(train.labels.max(), test.labels.max())) + 1
    if np.unique(train.labels).size < 2:
        raise DataError("linear probe needs at least two classes in the training set")

    n, dim = train.matrix.shape
    w = Parameter(np.zeros((dim, classes)))
    b = Parameter(np.zeros(classes))
    root = RngStream(cfg.seed)
    for epoch in range(1, cfg.epochs + 1):
        order = root.substream("probe-shuffle", epoch).permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            logits = nm.affine(Tensor(train.matrix[idx]), w, b)
            loss = nm.softmax_xent(logits, train.labels[idx])
            loss.backward()
            sgd_step([w, b], cfg.lr, cfg.momentum, cfg.weight_decay)

    test_logits = test.matrix @ w.data + b.data
    predictions = np.argmax(test_logits, axis=1)
    chash = _config_hash({"probe": asdict(cfg), "dim": dim, "classes": classes})
    return _report("linear", predictions, test.labels, classes, chash, cfg.seed, [])


def knn_eval(train: EmbeddingSet, test: EmbeddingSet, k: int = 1, seed: int = 0) -> EvalReport:
    """Cosine nearest-neighbour classification over frozen embeddings.

    Zero-norm embeddings score cosine 0 against everything and are flagged
    in the report. With k > 1 the neighbours vote, ties going to the lower
    class index.
    """
    if train.matrix.shape[0] == 0:
        raise DataError("knn_eval requires a non-empty training set")
    if k < 1:
        raise ArgumentError(f"k must be >= 1, got {k}")
    if np.any(train.labels < 0) or np.any(test.labels < 0):
        raise DataError("knn_eval requires labels on both splits")
    classes = int(max(train.labels.max(), test.labels.max())) + 1

    flags = []

    def unit(matrix):
        norms = np.linalg.norm(matrix, axis=1, keepdims=True)
        zero = norms[:, 0] == 0.0
        if np.any(zero):
            flags.append("zero_norm_embeddings")
        return np.where(zero[:, None], 0.0, matrix / np.where(zero[:, None], 1.0, norms))

    sims = unit(test.matrix) @ unit(train.matrix).T  # (Nt, Ntr)
    if k == 1:
        nearest = np.argmax(sims, axis=1)  # argmax takes the lowest index on ties
        predictions = train.labels[nearest]
    else:
        kk = min(k, train.matrix.shape[0])
        top = np.argsort(-sims, axis=1, kind="stable")[:, :kk]
        predictions = np.empty(test.matrix.shape[0], dtype=np.int64)
        for i, row in enumerate(top):
            votes = np.bincount(train.labels[row], minlength=classes)
            predictions[i] = int(np.argmax(votes))
    chash = _config_hash({"knn_k": k, "dim": int(train.matrix.shape[1]), "classes": classes})
    return _report("knn", predictions, test.labels, classes, chash, seed, sorted(set(flags)))


# ---------------------------------------------------------------------------
# report files

REPORT_HEADER = "protocol,accuracy,classes,count,seed,config_hash,flags"


def report_row(report: EvalReport) -> str:
    flags = ";".join(report.flags)
    return (
        f"{report.protocol},{report.accuracy!r},{report.classes},"
        f"{report.count},{report.seed},{report.config_hash},{flags}"
    )


def write_report(report: EvalReport, out_dir: str | Path) -> None:
    """Emit report.csv, confusion.csv, confusion_norm.csv and summary.txt."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(REPORT_HEADER + "\n" + report_row(report) + "\n")
    rows = [",".join(str(v) for v in row) for row in report.confusion]
    (out / "confusion.csv").write_text("\n".join(rows) + "\n")
    norm = row_normalize(report.confusion)
    rows = [",".join(repr(float(v)) for v in row) for row in norm]
    (out / "confusion_norm.csv").write_text("\n".join(rows) + "\n")
    lines = [
        f"protocol: {report.protocol}",
        f"accuracy: {report.accuracy:.4f} ({int(np.trace(report.confusion))}/{report.count})",
        f"per-class accuracy: {', '.join(f'{a:.4f}' for a in report.per_class)}",
        f"seed: {report.seed}  config: {report.config_hash}",
    ]
    if report.flags:
        lines.append(f"flags: {', '.join(report.flags)}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
