"""Contrastive motion learner: two-tower encoders, momentum keys, FIFO queue.

The query tower embeds coordinate sequences, the key tower embeds the
matching velocity sequences; only the query tower is trained by
backpropagation. Key parameters follow the query parameters through an
exponential moving average with separate coefficients for the encoder and
the MLP head (the head coefficient defaults to 1.0, i.e. frozen). Past key
embeddings wait in a fixed-capacity FIFO queue and serve as negatives.

Embeddings are L2-normalized before the dot products by default; the raw
variant is available through `CmlConfig.normalize_embeddings` for
comparison. Degenerate all-zero embeddings normalize to zero and therefore
contribute zero logits.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import numeric as nm
from .errors import ArgumentError, StateError
from .numeric import RngStream, Tensor
from .seqmodel import (
    GruStack,
    MlpHead,
    gru_stack_forward,
    init_gru_stack,
    init_mlp_head,
    mlp_head_forward,
    tap,
)

_UNIT_TOL = 1e-9


@dataclass
class CmlConfig:
    """Contrastive hyper-parameters."""

    tau: float = 0.1
    m_enc: float = 0.999
    m_mlp: float = 1.0
    K: int = 64
    normalize_embeddings: bool = True

    def __post_init__(self):
        if self.tau <= 0:
            raise ArgumentError(f"temperature must be > 0, got {self.tau}")
        for name in ("m_enc", "m_mlp"):
            m = getattr(self, name)
            if not 0.0 <= m <= 1.0:
                raise ArgumentError(f"{name} must be in [0, 1], got {m}")
        if self.K < 1:
            raise ArgumentError(f"queue capacity must be >= 1, got {self.K}")


@dataclass
class CmlModel:
    query_encoder: GruStack
    query_head: MlpHead
    key_encoder: GruStack
    key_head: MlpHead

    def named_parameters(self, prefix: str = ""):
        yield from self.query_encoder.named_parameters(f"{prefix}query_encoder.")
        yield from self.query_head.named_parameters(f"{prefix}query_head.")
        yield from self.key_encoder.named_parameters(f"{prefix}key_encoder.")
        yield from self.key_head.named_parameters(f"{prefix}key_head.")

    def query_parameters(self):
        return self.query_encoder.parameters() + self.query_head.parameters()

    def key_parameters(self):
        return self.key_encoder.parameters() + self.key_head.parameters()


def init_cml_model(
    input_size: int,
    hidden_size: int,
    mlp_hidden: int,
    embed_dim: int,
    rng: RngStream,
    depth: int = 2,
    dropout_rate: float = 0.2,
) -> CmlModel:
    """Initialize the query tower and copy it parameter-for-parameter into the key tower."""
    query_encoder = init_gru_stack(
        input_size, hidden_size, depth, bidirectional=True,
        rng=rng.substream("encoder"), dropout_rate=dropout_rate,
    )
    query_head = init_mlp_head(
        query_encoder.output_size, mlp_hidden, embed_dim, rng.substream("head")
    )
    return CmlModel(
        query_encoder=query_encoder,
        query_head=query_head,
        key_encoder=copy.deepcopy(query_encoder),
        key_head=copy.deepcopy(query_head),
    )


def _encode(x, encoder, head, rng, training, normalize):
    states = gru_stack_forward(x, encoder, rng, training)
    emb = mlp_head_forward(tap(states), head)
    if not normalize:
        return emb, np.zeros(1 if emb.data.ndim == 1 else emb.shape[0], dtype=bool)
    if emb.data.ndim == 1:
        out, degenerate = nm.l2_normalize(emb)
        return out, np.array([degenerate])
    return nm.l2_normalize_rows(emb)


def encode_query(
    x: Tensor,
    model: CmlModel,
    rng: RngStream | None = None,
    training: bool = False,
    normalize: bool = True,
) -> tuple[Tensor, np.ndarray]:
    """Embed a (T,I) sequence or (T,B,I) batch through the query tower."""
    return _encode(x, model.query_encoder, model.query_head, rng, training, normalize)


def encode_key(
    v: Tensor,
    model: CmlModel,
    rng: RngStream | None = None,
    training: bool = False,
    normalize: bool = True,
) -> tuple[Tensor, np.ndarray]:
    """Embed velocities through the key tower; gradients never flow here."""
    with nm.no_grad():
        return _encode(v, model.key_encoder, model.key_head, rng, training, normalize)


class NegativeQueue:
    """Fixed-capacity FIFO of key embeddings, oldest first."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ArgumentError(f"queue capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.dim = dim
        self._entries: list[np.ndarray] = []

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def entries(self) -> list[np.ndarray]:
        return list(self._entries)

    def as_matrix(self) -> np.ndarray:
        if not self._entries:
            return np.zeros((0, self.dim))
        return np.stack(self._entries, axis=0)

    def fill_random(self, rng: RngStream) -> None:
        """Fill to capacity with unit-normalized Gaussian vectors."""
        vecs = rng.normal((self.capacity, self.dim))
        vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
        self._entries = [v.copy() for v in vecs]

    def push(self, keys: np.ndarray, enforce_unit: bool = True) -> None:
        """Append key rows; evict oldest entries beyond capacity.

        Rows must be unit norm, except all-zero rows (degenerate embeddings),
        which are accepted and contribute zero logits as negatives.
        """
        keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
        if keys.shape[1] != self.dim:
            raise ArgumentError(f"queue dim {self.dim} vs keys {keys.shape}")
        if enforce_unit:
            norms = np.linalg.norm(keys, axis=1)
            bad = (np.abs(norms - 1.0) > _UNIT_TOL) & (norms > _UNIT_TOL)
            if np.any(bad):
                raise ArgumentError(
                    f"queue_push: rows {np.nonzero(bad)[0].tolist()} are not unit norm"
                )
        for k in keys:
            self._entries.append(k.copy())
        if len(self._entries) > self.capacity:
            del self._entries[: len(self._entries) - self.capacity]

    def restore(self, matrix: np.ndarray) -> None:
        self._entries = [row.copy() for row in np.atleast_2d(matrix)] if matrix.size else []


def queue_push(queue: NegativeQueue, keys: np.ndarray, enforce_unit: bool = True) -> None:
    queue.push(keys, enforce_unit=enforce_unit)


def info_nce(q: Tensor, k_pos, queue: NegativeQueue, tau: float) -> Tensor:
    """Contrastive loss: the positive key against every queued negative.

    Logits are [q . k_pos, q . k_i for each queue entry] / tau and the
    positive sits at index 0. Accepts a single (D,) query with one key or a
    (B,D) batch with row-matched keys; the batch loss is the row mean.
    Gradients reach only q.
    """
    if tau <= 0:
        raise ArgumentError(f"temperature must be > 0, got {tau}")
    if len(queue) == 0:
        raise StateError("info_nce: negative queue is empty")
    k = np.asarray(k_pos.data if isinstance(k_pos, Tensor) else k_pos, dtype=np.float64)
    negatives = Tensor(queue.as_matrix().T)  # (D,K)
    if q.data.ndim == 1:
        qb = nm.reshape(q, (1, q.shape[0]))
        kb = k[None, :]
    else:
        qb, kb = q, k
    l_pos = nm.sum_last_keepdim(nm.mul(qb, Tensor(kb)))
    l_neg = nm.matmul(qb, negatives)
    logits = nm.scale(nm.concat_last([l_pos, l_neg]), 1.0 / tau)
    return nm.softmax_xent(logits, np.zeros(logits.shape[0], dtype=np.int64))


def momentum_update(model: CmlModel, m_enc: float, m_mlp: float) -> None:
    """EMA copy of query parameters into the key tower, split by component."""
    for name, m in (("m_enc", m_enc), ("m_mlp", m_mlp)):
        if not 0.0 <= m <= 1.0:
            raise ArgumentError(f"{name} must be in [0, 1], got {m}")
    for (qp, kp, m) in [
        *((q, k, m_enc) for q, k in zip(model.query_encoder.parameters(), model.key_encoder.parameters())),
        *((q, k, m_mlp) for q, k in zip(model.query_head.parameters(), model.key_head.parameters())),
    ]:
        kp.data *= m
        kp.data += (1.0 - m) * qp.data
