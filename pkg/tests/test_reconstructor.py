import numpy as np
import pytest

from skelrep import numeric as nm
from skelrep.data import SynthConfig, preprocess_manifest, synth_generate
from skelrep.numeric import RngStream, Tensor, finite_diff_grad, max_rel_error
from skelrep.pipeline import TrainConfig, train_variant
from skelrep.reconstructor import (
    ReconOutput,
    init_ser_model,
    recon_loss,
    ser_forward,
)
from skelrep.seqmodel import gru_stack_forward


class TestSerForward:
    def test_zero_model_zero_everything(self):
        model = init_ser_model(6, 4, RngStream(0))
        for _, p in model.named_parameters():
            p.data[:] = 0.0
        x = Tensor(RngStream(1).normal((5, 6)))
        out = ser_forward(x, model)
        assert np.array_equal(out.h.data, np.zeros((5, 8)))
        assert np.array_equal(out.x_hat_fwd.data, np.zeros((5, 6)))
        assert np.array_equal(out.x_hat_rev.data, np.zeros((5, 6)))

    def test_shape_contract(self):
        model = init_ser_model(24, 64, RngStream(0))
        out = ser_forward(Tensor(RngStream(1).normal((20, 24))), model)
        assert out.h.shape == (20, 128)
        assert out.x_hat_fwd.shape == (20, 24)
        assert out.x_hat_rev.shape == (20, 24)
        assert out.x_hat_fwd.data.reshape(20, 8, 3).shape == (20, 8, 3)

    def test_decoder_matches_composition_oracle(self):
        rng = RngStream(2)
        model = init_ser_model(6, 4, rng, dropout_rate=0.0)
        x = Tensor(rng.normal((5, 6)))
        out = ser_forward(x, model)
        h = gru_stack_forward(x, model.encoder)
        for state_idx, got in ((0, out.x_hat_fwd), (4, out.x_hat_rev)):
            seed_state = np.tile(h.data[state_idx], (5, 1, 1)).reshape(5, 1, 8)
            dec_states = gru_stack_forward(Tensor(seed_state), model.decoder)
            expected = dec_states.data.reshape(5, 4) @ model.out_w.data + model.out_b.data
            assert np.allclose(got.data, expected, atol=1e-12)

    def test_direction_selection(self):
        model = init_ser_model(6, 4, RngStream(3))
        x = Tensor(RngStream(4).normal((5, 6)))
        fwd_only = ser_forward(x, model, direction="forward")
        assert fwd_only.x_hat_rev is None and fwd_only.x_hat_fwd is not None
        rev_only = ser_forward(x, model, direction="reverse")
        assert rev_only.x_hat_fwd is None and rev_only.x_hat_rev is not None
        both = ser_forward(x, model, direction="both")
        assert np.allclose(both.x_hat_fwd.data, fwd_only.x_hat_fwd.data, atol=1e-12)
        assert np.allclose(both.x_hat_rev.data, rev_only.x_hat_rev.data, atol=1e-12)


class TestReconLoss:
    def test_perfect_reconstruction(self):
        x = RngStream(5).normal((4, 6))
        out = ReconOutput(h=Tensor(np.zeros((4, 8))), x_hat_fwd=Tensor(x), x_hat_rev=Tensor(x[::-1].copy()))
        assert recon_loss(x, out).item() == 0.0

    def test_unit_offset_forward(self):
        x = RngStream(6).normal((4, 6))
        out = ReconOutput(h=Tensor(np.zeros((4, 8))), x_hat_fwd=Tensor(x + 1.0), x_hat_rev=Tensor(x[::-1].copy()))
        assert recon_loss(x, out).item() == pytest.approx(1.0, abs=1e-12)

    def test_nonnegative(self):
        rng = RngStream(7)
        for _ in range(10):
            x = rng.normal((3, 6))
            out = ReconOutput(
                h=Tensor(np.zeros((3, 8))),
                x_hat_fwd=Tensor(rng.normal((3, 6))),
                x_hat_rev=Tensor(rng.normal((3, 6))),
            )
            assert recon_loss(x, out).item() >= 0.0

    def test_reversal_swap_symmetry(self):
        # reversing the target and swapping the two reconstructions keeps the loss
        rng = RngStream(8)
        x = rng.normal((5, 6))
        a = Tensor(rng.normal((5, 6)))
        b = Tensor(rng.normal((5, 6)))
        out = ReconOutput(h=Tensor(np.zeros((5, 8))), x_hat_fwd=a, x_hat_rev=b)
        swapped = ReconOutput(h=Tensor(np.zeros((5, 8))), x_hat_fwd=b, x_hat_rev=a)
        lhs = recon_loss(x, out).item()
        rhs = recon_loss(x[::-1].copy(), swapped).item()
        assert lhs == pytest.approx(rhs, abs=1e-12)


class TestReconGradients:
    def test_loss_gradient_matches_finite_differences(self):
        rng = RngStream(9)
        model = init_ser_model(4, 3, rng, dropout_rate=0.0)
        x = rng.normal((4, 1, 4))

        def loss_of():
            out = ser_forward(Tensor(x), model, None, False, "both")
            return recon_loss(x, out, "both")

        loss_of().backward()
        for name, p in model.named_parameters():
            grad = p.grad.copy()

            def with_param(t, p=p):
                old = p.data
                p.data = t.data
                try:
                    return loss_of().item()
                finally:
                    p.data = old

            fd = finite_diff_grad(with_param, Tensor(p.data))
            assert max_rel_error(grad, fd) < 1e-4, name


class TestTrainingReducesLoss:
    def test_200_epochs_cuts_loss_by_80_percent(self):
        cfg = SynthConfig(
            classes=2, samples_per_class=25, test_samples_per_class=1,
            T=10, J=4, noise_sigma=0.0, seed=42,
        )
        train_m, _ = synth_generate(cfg)
        train_m = preprocess_manifest(train_m, 10)
        tc = TrainConfig(
            mode="ser", epochs=200, lr=0.5, batch_size=8, seed=0,
            hidden_size=128, lr_milestones=(140, 180),
        )
        _, metrics = train_variant(train_m, tc)
        first = metrics.rows[0].loss_recon
        last = metrics.rows[-1].loss_recon
        assert last <= 0.2 * first, (first, last)
