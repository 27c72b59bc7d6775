"""Recurrent model machinery: GRU cells and stacks, pooling, MLP heads.

All forward functions accept either a single sequence of shape (T, I) or a
lockstep minibatch of shape (T, B, I) and return hidden states with the
matching leading layout. The stack runs each layer and direction through a
fused kernel (`gru_layer`) whose backward pass is hand-written backprop
through time; the per-step `gru_cell` built from tape primitives is the
slow reference path the kernel is checked against.

Cell convention (fixed here, since more than one exists in the wild):

    z = sigmoid(x Wz + h Uz + bz)
    r = sigmoid(x Wr + h Ur + br)
    n = tanh(x Wn + r * (h Un) + bn)
    h' = (1 - z) * n + z * h

with zero initial hidden state for every layer and direction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numeric as nm
from .errors import ArgumentError, ShapeError
from .numeric import Parameter, RngStream, Tensor


@dataclass
class GruLayerParams:
    """Weights for one GRU layer in one direction."""

    w_z: Parameter
    w_r: Parameter
    w_n: Parameter
    u_z: Parameter
    u_r: Parameter
    u_n: Parameter
    b_z: Parameter
    b_r: Parameter
    b_n: Parameter

    @property
    def input_size(self) -> int:
        return self.w_z.shape[0]

    @property
    def hidden_size(self) -> int:
        return self.w_z.shape[1]

    def named_parameters(self, prefix: str = ""):
        for name in ("w_z", "w_r", "w_n", "u_z", "u_r", "u_n", "b_z", "b_r", "b_n"):
            yield f"{prefix}{name}", getattr(self, name)


def init_gru_layer(input_size: int, hidden_size: int, rng: RngStream) -> GruLayerParams:
    """Uniform +-1/sqrt(H) weights, zero biases."""
    bound = 1.0 / np.sqrt(hidden_size)

    def w(rows, cols):
        return Parameter(rng.uniform((rows, cols), -bound, bound))

    return GruLayerParams(
        w_z=w(input_size, hidden_size),
        w_r=w(input_size, hidden_size),
        w_n=w(input_size, hidden_size),
        u_z=w(hidden_size, hidden_size),
        u_r=w(hidden_size, hidden_size),
        u_n=w(hidden_size, hidden_size),
        b_z=Parameter(np.zeros(hidden_size)),
        b_r=Parameter(np.zeros(hidden_size)),
        b_n=Parameter(np.zeros(hidden_size)),
    )


@dataclass
class GruStack:
    """Stacked (optionally bidirectional) GRU layers with inter-layer dropout.

    `layers[d]` holds one `GruLayerParams` per direction (forward first).
    Layer d > 0 consumes hidden_size * directions inputs.
    """

    layers: list[list[GruLayerParams]]
    hidden_size: int
    bidirectional: bool
    dropout_rate: float = 0.0

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def directions(self) -> int:
        return 2 if self.bidirectional else 1

    @property
    def output_size(self) -> int:
        return self.hidden_size * self.directions

    @property
    def input_size(self) -> int:
        return self.layers[0][0].input_size

    def named_parameters(self, prefix: str = ""):
        for d, dirs in enumerate(self.layers):
            for k, p in enumerate(dirs):
                tag = "fwd" if k == 0 else "bwd"
                yield from p.named_parameters(f"{prefix}layer{d}.{tag}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]


def init_gru_stack(
    input_size: int,
    hidden_size: int,
    depth: int,
    bidirectional: bool,
    rng: RngStream,
    dropout_rate: float = 0.0,
) -> GruStack:
    if depth < 1:
        raise ArgumentError(f"stack depth must be >= 1, got {depth}")
    if not 0.0 <= dropout_rate < 1.0:
        raise ArgumentError(f"dropout rate must be in [0,1), got {dropout_rate}")
    dirs = 2 if bidirectional else 1
    layers = []
    for d in range(depth):
        width = input_size if d == 0 else hidden_size * dirs
        layers.append(
            [init_gru_layer(width, hidden_size, rng.substream("layer", d, k)) for k in range(dirs)]
        )
    return GruStack(layers=layers, hidden_size=hidden_size, bidirectional=bidirectional, dropout_rate=dropout_rate)


# ---------------------------------------------------------------------------
# cell and fused layer kernels


def gru_cell(x_t: Tensor, h_prev: Tensor, p: GruLayerParams) -> Tensor:
    """One GRU step from tape primitives (reference path)."""
    if x_t.shape[-1] != p.input_size or h_prev.shape[-1] != p.hidden_size:
        raise ShapeError(
            f"gru_cell: x {x_t.shape} / h {h_prev.shape} vs layer ({p.input_size}, {p.hidden_size})"
        )
    z = nm.sigmoid(nm.add(nm.add(nm.matmul(x_t, p.w_z), nm.matmul(h_prev, p.u_z)), p.b_z))
    r = nm.sigmoid(nm.add(nm.add(nm.matmul(x_t, p.w_r), nm.matmul(h_prev, p.u_r)), p.b_r))
    n = nm.tanh(nm.add(nm.add(nm.matmul(x_t, p.w_n), nm.mul(r, nm.matmul(h_prev, p.u_n))), p.b_n))
    one_minus_z = nm.scale(z, -1.0) + Tensor(np.ones_like(z.data))
    return nm.add(nm.mul(one_minus_z, n), nm.mul(z, h_prev))


def gru_layer(xs: Tensor, p: GruLayerParams) -> Tensor:
    """Run one direction of one layer over a (T,B,I) input; returns (T,B,H).

    Fused kernel: the input-side projections for all steps happen in one
    matmul, the time loop touches only the recurrent path (one matmul per
    step against the concatenated recurrent weights), and the backward pass
    replays the loop in reverse before batching the weight-gradient matmuls.
    """
    T, B, I = xs.data.shape
    H = p.hidden_size
    if I != p.input_size:
        raise ShapeError(f"gru_layer: input width {I} vs layer {p.input_size}")

    w_all = np.concatenate([p.w_z.data, p.w_r.data, p.w_n.data], axis=1)  # (I,3H)
    b_all = np.concatenate([p.b_z.data, p.b_r.data, p.b_n.data])
    u_all = np.concatenate([p.u_z.data, p.u_r.data, p.u_n.data], axis=1)  # (H,3H)

    x2 = xs.data.reshape(T * B, I)
    xproj = (x2 @ w_all + b_all).reshape(T, B, 3 * H)

    states = np.empty((T, B, H))
    zs = np.empty((T, B, H))
    rs = np.empty((T, B, H))
    ns = np.empty((T, B, H))
    hns = np.empty((T, B, H))  # h_prev @ u_n, reused in backward
    h = np.zeros((B, H))
    scratch = np.empty((B, 3 * H))
    with np.errstate(over="ignore"):  # exp overflow saturates the sigmoid correctly
        for t in range(T):
            np.matmul(h, u_all, out=scratch)
            gates = scratch[:, : 2 * H]
            gates += xproj[t, :, : 2 * H]
            np.negative(gates, out=gates)
            np.exp(gates, out=gates)
            gates += 1.0
            np.divide(1.0, gates, out=gates)
            z = zs[t]
            r = rs[t]
            np.copyto(z, gates[:, :H])
            np.copyto(r, gates[:, H:])
            hn = hns[t]
            np.copyto(hn, scratch[:, 2 * H :])
            n = ns[t]
            np.multiply(r, hn, out=n)
            n += xproj[t, :, 2 * H :]
            np.tanh(n, out=n)
            h = (1.0 - z) * n + z * h
            states[t] = h

    def bw(g):
        hprev_stack = np.empty((T, B, H))
        hprev_stack[0] = 0.0
        hprev_stack[1:] = states[:-1]
        # per-step chain factors, vectorized over the whole sequence:
        #   dn_pre = dh * dn_fac, dz_pre = dh * dz_fac, dr_pre = dn_pre * dr_fac
        dn_fac = (1.0 - zs) * (1.0 - ns * ns)
        dz_fac = (hprev_stack - ns) * zs * (1.0 - zs)
        dr_fac = hns * rs * (1.0 - rs)

        drec = np.empty((T, B, 3 * H))  # [dz_pre, dr_pre, dn_pre * r] feeds U grads
        dns = np.empty((T, B, H))  # dn_pre feeds W/b grads
        u_all_t = u_all.T
        dh = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            dh_t = g[t] + dh
            dn_pre = dh_t * dn_fac[t]
            step = drec[t]
            step[:, :H] = dh_t * dz_fac[t]
            step[:, H : 2 * H] = dn_pre * dr_fac[t]
            step[:, 2 * H :] = dn_pre * rs[t]
            dns[t] = dn_pre
            dh = dh_t * zs[t] + step @ u_all_t

        d2 = drec.reshape(T * B, 3 * H).copy()
        d2[:, 2 * H :] = dns.reshape(T * B, H)
        dw_all = x2.T @ d2
        db_all = d2.sum(axis=0)
        du_all = hprev_stack.reshape(T * B, H).T @ drec.reshape(T * B, 3 * H)

        nm._accumulate(p.w_z, dw_all[:, :H])
        nm._accumulate(p.w_r, dw_all[:, H : 2 * H])
        nm._accumulate(p.w_n, dw_all[:, 2 * H :])
        nm._accumulate(p.b_z, db_all[:H])
        nm._accumulate(p.b_r, db_all[H : 2 * H])
        nm._accumulate(p.b_n, db_all[2 * H :])
        nm._accumulate(p.u_z, du_all[:, :H])
        nm._accumulate(p.u_r, du_all[:, H : 2 * H])
        nm._accumulate(p.u_n, du_all[:, 2 * H :])
        if xs.requires_grad:
            nm._accumulate(xs, (d2 @ w_all.T).reshape(T, B, I))

    parents = (xs, p.w_z, p.w_r, p.w_n, p.u_z, p.u_r, p.u_n, p.b_z, p.b_r, p.b_n)
    return nm.make_node(states, parents, bw)


def gru_layer_pair(xs: Tensor, p_fwd: GruLayerParams, p_bwd: GruLayerParams) -> Tensor:
    """One bidirectional layer: both directions in a single time loop.

    The backward direction runs on the time-reversed input; the two
    recurrences share each loop iteration on a concatenated batch (forward
    rows first), which halves the per-step Python overhead relative to two
    `gru_layer` passes. Returns per-step states (T,B,2H) with the backward
    half re-reversed to input time order.
    """
    T, B, I = xs.data.shape
    H = p_fwd.hidden_size
    if I != p_fwd.input_size or I != p_bwd.input_size or H != p_bwd.hidden_size:
        raise ShapeError(
            f"gru_layer_pair: input {xs.shape} vs layers "
            f"({p_fwd.input_size},{p_fwd.hidden_size})/({p_bwd.input_size},{p_bwd.hidden_size})"
        )
    B2 = 2 * B

    def _wall(p):
        return (
            np.concatenate([p.w_z.data, p.w_r.data, p.w_n.data], axis=1),
            np.concatenate([p.b_z.data, p.b_r.data, p.b_n.data]),
            np.concatenate([p.u_z.data, p.u_r.data, p.u_n.data], axis=1),
        )

    w_f, b_f, u_f = _wall(p_fwd)
    w_b, b_b, u_b = _wall(p_bwd)

    x2 = xs.data.reshape(T * B, I)
    xcat = np.empty((T, B2, 3 * H))
    xcat[:, :B] = (x2 @ w_f + b_f).reshape(T, B, 3 * H)
    xcat[:, B:] = (x2 @ w_b + b_b).reshape(T, B, 3 * H)[::-1]

    states = np.empty((T, B2, H))
    zs = np.empty((T, B2, H))
    rs = np.empty((T, B2, H))
    ns = np.empty((T, B2, H))
    hns = np.empty((T, B2, H))
    h = np.zeros((B2, H))
    scratch = np.empty((B2, 3 * H))
    with np.errstate(over="ignore"):
        for t in range(T):
            np.matmul(h[:B], u_f, out=scratch[:B])
            np.matmul(h[B:], u_b, out=scratch[B:])
            gates = scratch[:, : 2 * H]
            gates += xcat[t, :, : 2 * H]
            np.negative(gates, out=gates)
            np.exp(gates, out=gates)
            gates += 1.0
            np.divide(1.0, gates, out=gates)
            z = zs[t]
            r = rs[t]
            np.copyto(z, gates[:, :H])
            np.copyto(r, gates[:, H:])
            hn = hns[t]
            np.copyto(hn, scratch[:, 2 * H :])
            n = ns[t]
            np.multiply(r, hn, out=n)
            n += xcat[t, :, 2 * H :]
            np.tanh(n, out=n)
            h = (1.0 - z) * n + z * h
            states[t] = h

    out = np.empty((T, B, 2 * H))
    out[:, :, :H] = states[:, :B]
    out[:, :, H:] = states[:, B:][::-1]

    def bw(g):
        gcat = np.empty((T, B2, H))
        gcat[:, :B] = g[:, :, :H]
        gcat[:, B:] = g[::-1, :, H:]

        hprev = np.empty((T, B2, H))
        hprev[0] = 0.0
        hprev[1:] = states[:-1]
        dn_fac = (1.0 - zs) * (1.0 - ns * ns)
        dz_fac = (hprev - ns) * zs * (1.0 - zs)
        dr_fac = hns * rs * (1.0 - rs)

        drec = np.empty((T, B2, 3 * H))
        dns = np.empty((T, B2, H))
        u_f_t = u_f.T
        u_b_t = u_b.T
        dh = np.zeros((B2, H))
        for t in range(T - 1, -1, -1):
            dh_t = gcat[t] + dh
            dn_pre = dh_t * dn_fac[t]
            step = drec[t]
            step[:, :H] = dh_t * dz_fac[t]
            step[:, H : 2 * H] = dn_pre * dr_fac[t]
            step[:, 2 * H :] = dn_pre * rs[t]
            dns[t] = dn_pre
            dh = dh_t * zs[t]
            dh[:B] += step[:B] @ u_f_t
            dh[B:] += step[B:] @ u_b_t

        def accumulate(p, half, rev):
            d2 = np.ascontiguousarray(drec[:, half]).reshape(T * B, 3 * H)
            d2[:, 2 * H :] = np.ascontiguousarray(dns[:, half]).reshape(T * B, H)
            xs_dir = x2 if not rev else xs.data[::-1].reshape(T * B, I)
            dw = xs_dir.T @ d2
            db = d2.sum(axis=0)
            du = np.ascontiguousarray(hprev[:, half]).reshape(T * B, H).T @ np.ascontiguousarray(
                drec[:, half]
            ).reshape(T * B, 3 * H)
            nm._accumulate(p.w_z, dw[:, :H])
            nm._accumulate(p.w_r, dw[:, H : 2 * H])
            nm._accumulate(p.w_n, dw[:, 2 * H :])
            nm._accumulate(p.b_z, db[:H])
            nm._accumulate(p.b_r, db[H : 2 * H])
            nm._accumulate(p.b_n, db[2 * H :])
            nm._accumulate(p.u_z, du[:, :H])
            nm._accumulate(p.u_r, du[:, H : 2 * H])
            nm._accumulate(p.u_n, du[:, 2 * H :])
            return d2

        d2_f = accumulate(p_fwd, slice(None, B), rev=False)
        d2_b = accumulate(p_bwd, slice(B, None), rev=True)
        if xs.requires_grad:
            dxs = (d2_f @ w_f.T).reshape(T, B, I)
            dxs += (d2_b @ w_b.T).reshape(T, B, I)[::-1]
            nm._accumulate(xs, dxs)

    parents = (xs,) + tuple(p for _, p in p_fwd.named_parameters()) + tuple(
        p for _, p in p_bwd.named_parameters()
    )
    return nm.make_node(out, parents, bw)


def _dropout(x: Tensor, rate: float, rng: RngStream) -> Tensor:
    # inverted dropout: scale kept activations by 1/(1-rate) at train time
    mask = (rng.uniform(x.data.shape) >= rate) / (1.0 - rate)
    return nm.hadamard_const(x, mask)


def gru_stack_forward(
    seq: Tensor, stack: GruStack, rng: RngStream | None = None, training: bool = False
) -> Tensor:
    """Top-layer per-step hidden states for a (T,I) sequence or (T,B,I) batch.

    Bidirectional stacks concatenate forward and backward states per step.
    Dropout applies to inter-layer activations only, and only in training.
    """
    single = seq.data.ndim == 2
    if seq.data.ndim not in (2, 3):
        raise ShapeError(f"gru_stack_forward: expected (T,I) or (T,B,I), got {seq.shape}")
    if seq.data.shape[0] < 1:
        raise ArgumentError("gru_stack_forward: empty sequence")
    if training and stack.dropout_rate > 0.0 and rng is None:
        raise ArgumentError("gru_stack_forward: training with dropout requires an rng")

    x = nm.reshape(seq, (seq.shape[0], 1, seq.shape[1])) if single else seq
    for d, dirs in enumerate(stack.layers):
        if d > 0 and training and stack.dropout_rate > 0.0:
            x = _dropout(x, stack.dropout_rate, rng)
        x = gru_layer_pair(x, dirs[0], dirs[1]) if stack.bidirectional else gru_layer(x, dirs[0])
    return nm.reshape(x, (x.shape[0], x.shape[2])) if single else x


def reverse_time_states(h: Tensor) -> Tensor:
    return nm.reverse_time(h)


def tap(h: Tensor) -> Tensor:
    """Temporal average pooling: mean over the time axis."""
    if h.data.shape[0] < 1:
        raise ArgumentError("tap: empty state sequence")
    return nm.mean_axis0(h)


# ---------------------------------------------------------------------------
# projection heads


@dataclass
class MlpHead:
    """Two affine layers with a relu between."""

    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter

    @property
    def output_size(self) -> int:
        return self.w2.shape[1]

    def named_parameters(self, prefix: str = ""):
        for name in ("w1", "b1", "w2", "b2"):
            yield f"{prefix}{name}", getattr(self, name)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]


def init_mlp_head(input_size: int, hidden_size: int, output_size: int, rng: RngStream) -> MlpHead:
    b1 = 1.0 / np.sqrt(input_size)
    b2 = 1.0 / np.sqrt(hidden_size)
    return MlpHead(
        w1=Parameter(rng.uniform((input_size, hidden_size), -b1, b1)),
        b1=Parameter(np.zeros(hidden_size)),
        w2=Parameter(rng.uniform((hidden_size, output_size), -b2, b2)),
        b2=Parameter(np.zeros(output_size)),
    )


def mlp_head_forward(v: Tensor, head: MlpHead) -> Tensor:
    return nm.affine(nm.relu(nm.affine(v, head.w1, head.b1)), head.w2, head.b2)
