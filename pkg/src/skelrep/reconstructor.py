"""Sequence reconstructor: bidirectional encoder, unidirectional decoder.

The encoder maps a coordinate sequence to per-step hidden states. The
decoder replays the sequence twice: fed the first hidden state repeated T
times it reconstructs the input in original order, fed the last hidden
state repeated T times it reconstructs the input in reverse order. Decoder
states become coordinates through a single affine projection. The decoder
gets no teacher forcing and no autoregressive feedback; its initial state
is zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric as nm
from .errors import ShapeError
from .numeric import Parameter, RngStream, Tensor
from .seqmodel import GruStack, gru_stack_forward, init_gru_stack


@dataclass
class SerModel:
    encoder: GruStack  # bidirectional
    decoder: GruStack  # unidirectional, input width = encoder output width
    out_w: Parameter  # (decoder hidden, J*3)
    out_b: Parameter  # (J*3,)

    def named_parameters(self, prefix: str = ""):
        yield from self.encoder.named_parameters(f"{prefix}encoder.")
        yield from self.decoder.named_parameters(f"{prefix}decoder.")
        yield f"{prefix}out_w", self.out_w
        yield f"{prefix}out_b", self.out_b

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def decode_parameters(self) -> list[Parameter]:
        return self.decoder.parameters() + [self.out_w, self.out_b]


@dataclass
class ReconOutput:
    h: Tensor  # encoder states, (T,B,2H)
    x_hat_fwd: Tensor | None
    x_hat_rev: Tensor | None


def init_ser_model(
    input_size: int,
    hidden_size: int,
    rng: RngStream,
    depth: int = 2,
    dropout_rate: float = 0.2,
) -> SerModel:
    encoder = init_gru_stack(
        input_size, hidden_size, depth, bidirectional=True,
        rng=rng.substream("encoder"), dropout_rate=dropout_rate,
    )
    decoder = init_gru_stack(
        encoder.output_size, hidden_size, depth, bidirectional=False,
        rng=rng.substream("decoder"), dropout_rate=dropout_rate,
    )
    bound = 1.0 / np.sqrt(hidden_size)
    out_w = Parameter(rng.substream("out").uniform((hidden_size, input_size), -bound, bound))
    out_b = Parameter(np.zeros(input_size))
    return SerModel(encoder=encoder, decoder=decoder, out_w=out_w, out_b=out_b)


def decode_from_state(
    model: SerModel, state: Tensor, steps: int, rng: RngStream | None, training: bool
) -> Tensor:
    """Repeat one (B,2H) hidden state `steps` times, decode, project per step."""
    dec_in = nm.repeat_time(state, steps)
    dec_states = gru_stack_forward(dec_in, model.decoder, rng, training)
    t, b, h = dec_states.shape
    flat = nm.affine(nm.reshape(dec_states, (t * b, h)), model.out_w, model.out_b)
    return nm.reshape(flat, (t, b, model.out_w.shape[1]))


def ser_forward(
    x: Tensor,
    model: SerModel,
    rng: RngStream | None = None,
    training: bool = False,
    direction: str = "both",
) -> ReconOutput:
    """Encode a (T,B,J*3) batch and reconstruct it forwardly and/or reversely."""
    single = x.data.ndim == 2
    xb = nm.reshape(x, (x.shape[0], 1, x.shape[1])) if single else x
    steps, batch = xb.shape[0], xb.shape[1]
    h = gru_stack_forward(xb, model.encoder, rng.substream("enc") if rng else None, training)
    fwd = rev = None
    if direction == "both":
        # decode both targets in one pass over a doubled batch
        seeds = nm.concat_axis0([nm.index_time(h, 0), nm.index_time(h, steps - 1)])
        dec = decode_from_state(
            model, seeds, steps, rng.substream("dec") if rng else None, training
        )
        fwd = nm.slice_axis1(dec, 0, batch)
        rev = nm.slice_axis1(dec, batch, 2 * batch)
    elif direction == "forward":
        fwd = decode_from_state(
            model, nm.index_time(h, 0), steps, rng.substream("dec") if rng else None, training
        )
    elif direction == "reverse":
        rev = decode_from_state(
            model, nm.index_time(h, steps - 1), steps, rng.substream("dec") if rng else None, training
        )
    if single:
        h = nm.reshape(h, (h.shape[0], h.shape[2]))
        if fwd is not None:
            fwd = nm.reshape(fwd, (fwd.shape[0], fwd.shape[2]))
        if rev is not None:
            rev = nm.reshape(rev, (rev.shape[0], rev.shape[2]))
    return ReconOutput(h=h, x_hat_fwd=fwd, x_hat_rev=rev)


def sequence_mse(target: np.ndarray, pred: Tensor) -> Tensor:
    """Mean over all elements of the squared prediction error."""
    if tuple(target.shape) != tuple(pred.shape):
        raise ShapeError(f"sequence_mse: target {target.shape} vs prediction {pred.shape}")
    diff = nm.sub(pred, Tensor(target))
    return nm.mean_all(nm.mul(diff, diff))


def recon_loss(x: np.ndarray, out: ReconOutput, direction: str = "both") -> Tensor:
    """Reconstruction objective: forward MSE plus reversed-target MSE.

    Each active direction contributes the mean squared error between its
    reconstruction and the (possibly time-reversed) input.
    """
    terms = []
    if direction in ("both", "forward"):
        terms.append(sequence_mse(x, out.x_hat_fwd))
    if direction in ("both", "reverse"):
        terms.append(sequence_mse(x[::-1].copy(), out.x_hat_rev))
    if not terms:
        raise ShapeError(f"recon_loss: unknown direction {direction!r}")
    total = terms[0]
    for t in terms[1:]:
        total = nm.add(total, t)
    return total
