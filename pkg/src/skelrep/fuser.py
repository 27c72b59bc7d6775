"""Information fuser: distill a frozen teacher's pooled states into a student.

The teacher is a trained query encoder whose parameters stay fixed. Its
pooled representation of a coordinate sequence is the regression target
for a projection of the student encoder's pooled states; two affine layers
with a relu bridge the scale gap between the spaces. The distillation term
joins the reconstruction objective as L_r + lambda_d * L_d.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numeric as nm
from .errors import ArgumentError, ShapeError
from .numeric import RngStream, Tensor
from .seqmodel import (
    GruStack,
    MlpHead,
    gru_stack_forward,
    init_mlp_head,
    mlp_head_forward,
    tap,
)

StudentProjector = MlpHead


@dataclass
class DistillConfig:
    lambda_d: float = 1.0

    def __post_init__(self):
        if not math.isfinite(self.lambda_d) or self.lambda_d < 0:
            raise ArgumentError(f"lambda_d must be finite and >= 0, got {self.lambda_d}")


def init_student_projector(
    input_size: int, output_size: int, rng: RngStream, hidden_size: int | None = None
) -> StudentProjector:
    # hidden width defaults to the teacher representation width
    return init_mlp_head(input_size, hidden_size or output_size, output_size, rng)


def teacher_repr(x: Tensor, teacher: GruStack) -> np.ndarray:
    """Pooled teacher states, dropout off, no gradient."""
    with nm.no_grad():
        return tap(gru_stack_forward(x, teacher, rng=None, training=False)).data


def student_project(h: Tensor, projector: StudentProjector) -> Tensor:
    """Project pooled student states into the teacher representation space."""
    return mlp_head_forward(tap(h), projector)


def distill_loss(h_t, h_s: Tensor) -> Tensor:
    """Mean squared gap between teacher and student representations."""
    target = np.asarray(h_t.data if isinstance(h_t, Tensor) else h_t, dtype=np.float64)
    if tuple(target.shape) != tuple(h_s.shape):
        raise ShapeError(f"distill_loss: teacher {target.shape} vs student {h_s.shape}")
    diff = nm.sub(h_s, Tensor(target))
    return nm.mean_all(nm.mul(diff, diff))


def joint_loss(l_r: Tensor, l_d: Tensor, lambda_d: float) -> Tensor:
    """Reconstruction plus weighted distillation."""
    if not math.isfinite(lambda_d):
        raise ArgumentError(f"lambda_d must be finite, got {lambda_d}")
    return nm.add(l_r, nm.scale(l_d, lambda_d))
