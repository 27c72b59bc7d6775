import numpy as np
import pytest

from skelrep import numeric as nm
from skelrep.errors import ArgumentError, ShapeError
from skelrep.fuser import (
    DistillConfig,
    distill_loss,
    init_student_projector,
    joint_loss,
    student_project,
    teacher_repr,
)
from skelrep.numeric import RngStream, Tensor, finite_diff_grad, max_rel_error
from skelrep.seqmodel import gru_stack_forward, init_gru_stack, mlp_head_forward, tap


def make_teacher(seed=0, input_size=6, hidden=4):
    return init_gru_stack(input_size, hidden, 2, True, RngStream(seed), dropout_rate=0.2)


class TestTeacherRepr:
    def test_zero_teacher(self):
        teacher = make_teacher()
        for _, p in teacher.named_parameters():
            p.data[:] = 0.0
        rep = teacher_repr(Tensor(RngStream(1).normal((5, 6))), teacher)
        assert np.array_equal(rep, np.zeros(8))

    def test_output_dim_is_hidden_times_directions(self):
        teacher = make_teacher(hidden=5)
        rep = teacher_repr(Tensor(RngStream(1).normal((7, 6))), teacher)
        assert rep.shape == (10,)

    def test_matches_forward_tap_oracle(self):
        teacher = make_teacher(seed=2)
        x = Tensor(RngStream(3).normal((6, 6)))
        rep = teacher_repr(x, teacher)
        expected = tap(gru_stack_forward(x, teacher, training=False)).data
        assert np.allclose(rep, expected, atol=1e-15)

    def test_dropout_never_applied(self):
        teacher = make_teacher(seed=4)
        x = Tensor(RngStream(5).normal((6, 6)))
        assert np.array_equal(teacher_repr(x, teacher), teacher_repr(x, teacher))


class TestStudentProject:
    def test_zero_projector(self):
        proj = init_student_projector(8, 8, RngStream(0))
        for _, p in proj.named_parameters():
            p.data[:] = 0.0
        out = student_project(Tensor(RngStream(1).normal((5, 8))), proj)
        assert np.array_equal(out.data, np.zeros(8))

    def test_identity_composition_on_nonnegative_tap(self):
        proj = init_student_projector(3, 3, RngStream(0))
        proj.w1.data = np.eye(3)
        proj.b1.data[:] = 0.0
        proj.w2.data = np.eye(3)
        proj.b2.data[:] = 0.0
        states = np.abs(RngStream(2).normal((4, 3)))
        out = student_project(Tensor(states), proj)
        assert np.allclose(out.data, states.mean(axis=0), atol=1e-12)

    def test_matches_tap_then_head_oracle(self):
        rng = RngStream(3)
        proj = init_student_projector(6, 4, rng)
        states = Tensor(rng.normal((5, 6)))
        out = student_project(states, proj)
        expected = mlp_head_forward(tap(states), proj)
        assert np.allclose(out.data, expected.data, atol=1e-15)


class TestDistillLoss:
    def test_zero_at_equality(self):
        v = RngStream(4).normal((6,))
        assert distill_loss(v, Tensor(v)).item() == 0.0

    def test_unit_gap(self):
        v = RngStream(5).normal((6,))
        assert distill_loss(v, Tensor(v + 1.0)).item() == pytest.approx(1.0, abs=1e-12)

    def test_symmetric(self):
        rng = RngStream(6)
        a, b = rng.normal((6,)), rng.normal((6,))
        assert distill_loss(a, Tensor(b)).item() == pytest.approx(
            distill_loss(b, Tensor(a)).item(), abs=1e-15
        )

    def test_positive_unless_equal(self):
        rng = RngStream(7)
        a = rng.normal((6,))
        b = a.copy()
        b[2] += 1e-6
        assert distill_loss(a, Tensor(b)).item() > 0.0

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            distill_loss(np.zeros(4), Tensor(np.zeros(5)))

    def test_gradient(self):
        rng = RngStream(8)
        target = rng.normal((2, 5))

        def loss_of(t):
            return distill_loss(target, t)

        h = Tensor(rng.normal((2, 5)), requires_grad=True)
        loss_of(h).backward()
        fd = finite_diff_grad(lambda t: loss_of(t).item(), Tensor(h.data))
        assert max_rel_error(h.grad, fd) < 1e-4


class TestJointLoss:
    def test_lambda_zero(self):
        lr = Tensor(np.asarray(0.5))
        ld = Tensor(np.asarray(0.9))
        assert joint_loss(lr, ld, 0.0).item() == 0.5

    def test_weighted_sum(self):
        assert joint_loss(Tensor(np.asarray(0.5)), Tensor(np.asarray(0.2)), 1.0).item() == pytest.approx(0.7)
        assert joint_loss(Tensor(np.asarray(0.0)), Tensor(np.asarray(0.3)), 2.0).item() == pytest.approx(0.6)

    def test_nonfinite_lambda_rejected(self):
        with pytest.raises(ArgumentError):
            joint_loss(Tensor(np.asarray(0.0)), Tensor(np.asarray(0.0)), float("inf"))

    def test_config_validation(self):
        with pytest.raises(ArgumentError):
            DistillConfig(lambda_d=-1.0)
        with pytest.raises(ArgumentError):
            DistillConfig(lambda_d=float("nan"))

    def test_gradient_through_both_terms(self):
        rng = RngStream(9)
        target = rng.normal((4,))

        def loss_of(t):
            l_r = nm.mean_all(nm.mul(t, t))
            l_d = distill_loss(target, t)
            return joint_loss(l_r, l_d, 1.5)

        x = Tensor(rng.normal((4,)), requires_grad=True)
        loss_of(x).backward()
        fd = finite_diff_grad(lambda t: loss_of(t).item(), Tensor(x.data))
        assert max_rel_error(x.grad, fd) < 1e-4
