import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skelrep import numeric as nm
from skelrep.contrast import (
    CmlConfig,
    NegativeQueue,
    encode_key,
    encode_query,
    info_nce,
    init_cml_model,
    momentum_update,
    queue_push,
)
from skelrep.errors import ArgumentError, StateError
from skelrep.numeric import RngStream, Tensor, finite_diff_grad, max_rel_error
from skelrep.seqmodel import gru_stack_forward, mlp_head_forward, tap


def unit(v):
    return v / np.linalg.norm(v)


def full_queue(k=64, dim=8, seed=0):
    q = NegativeQueue(k, dim)
    q.fill_random(RngStream(seed))
    return q


class TestCmlConfig:
    def test_defaults(self):
        cfg = CmlConfig()
        assert cfg.tau == 0.1 and cfg.m_enc == 0.999 and cfg.m_mlp == 1.0 and cfg.K == 64

    @pytest.mark.parametrize("bad", [{"tau": 0.0}, {"tau": -1.0}, {"m_enc": 1.5}, {"m_mlp": -0.1}, {"K": 0}])
    def test_validation(self, bad):
        with pytest.raises(ArgumentError):
            CmlConfig(**bad)


class TestEncoders:
    def test_zero_model_degenerate_embedding(self):
        model = init_cml_model(6, 4, 4, 5, RngStream(0))
        for _, p in model.named_parameters():
            p.data[:] = 0.0
        q, degenerate = encode_query(Tensor(RngStream(1).normal((5, 6))), model)
        assert degenerate.all()
        assert np.array_equal(q.data, np.zeros(5))

    def test_embedding_dim_independent_of_length(self):
        model = init_cml_model(6, 4, 4, 5, RngStream(0))
        for t in (3, 9, 17):
            q, _ = encode_query(Tensor(RngStream(1).normal((t, 6))), model)
            assert q.shape == (5,)

    def test_query_matches_oracle_chain(self):
        rng = RngStream(2)
        model = init_cml_model(6, 4, 4, 5, rng)
        x = Tensor(rng.normal((7, 6)))
        q, _ = encode_query(x, model)
        states = gru_stack_forward(x, model.query_encoder)
        raw = mlp_head_forward(tap(states), model.query_head)
        expected = raw.data / np.linalg.norm(raw.data)
        assert np.allclose(q.data, expected, atol=1e-12)

    def test_key_tower_initialized_as_copy(self):
        rng = RngStream(3)
        model = init_cml_model(6, 4, 4, 5, rng)
        x = Tensor(rng.normal((7, 6)))
        q, _ = encode_query(x, model, training=False)
        k, _ = encode_key(x, model, training=False)
        assert np.allclose(q.data, k.data, atol=1e-15)

    def test_no_gradient_reaches_key_parameters(self):
        rng = RngStream(4)
        model = init_cml_model(6, 4, 4, 5, rng)
        queue = full_queue(8, 5)
        x = Tensor(rng.normal((7, 6)))
        q, _ = encode_query(x, model)
        k, _ = encode_key(Tensor(rng.normal((7, 6))), model)
        loss = info_nce(q, k.data, queue, tau=0.1)
        loss.backward()
        for p in model.key_parameters():
            assert np.array_equal(p.grad, np.zeros_like(p.grad))
        assert any(np.any(p.grad != 0) for p in model.query_parameters())

    def test_unnormalized_variant(self):
        rng = RngStream(5)
        model = init_cml_model(6, 4, 4, 5, rng)
        x = Tensor(rng.normal((7, 6)))
        q, _ = encode_query(x, model, normalize=False)
        states = gru_stack_forward(x, model.query_encoder)
        raw = mlp_head_forward(tap(states), model.query_head)
        assert np.allclose(q.data, raw.data, atol=1e-15)


class TestInfoNce:
    def test_all_equal_logits_k64(self):
        queue = NegativeQueue(64, 4)
        base = unit(np.array([1.0, 1.0, 1.0, 1.0]))
        queue.push(np.tile(base, (64, 1)))
        loss = info_nce(Tensor(base), base, queue, tau=0.1)
        assert abs(loss.item() - math.log(65)) < 1e-9

    def test_orthogonal_negatives(self):
        # q = k_pos, 64 negatives orthogonal to q, tau 0.1
        dim = 66
        q = np.zeros(dim)
        q[0] = 1.0
        queue = NegativeQueue(64, dim)
        negatives = np.zeros((64, dim))
        for i in range(64):
            negatives[i, i + 1] = 1.0
        queue.push(negatives)
        loss = info_nce(Tensor(q), q, queue, tau=0.1)
        assert abs(loss.item() - math.log1p(64 * math.exp(-10.0))) < 1e-9

    def test_single_negative_case(self):
        # k=1, q.k_pos=1, q.k_neg=-1, tau=1 -> ln(1 + e^-2)
        queue = NegativeQueue(1, 2)
        queue.push(np.array([[-1.0, 0.0]]))
        q = np.array([1.0, 0.0])
        loss = info_nce(Tensor(q), q, queue, tau=1.0)
        assert abs(loss.item() - math.log1p(math.exp(-2.0))) < 1e-12

    def test_empty_queue_rejected(self):
        with pytest.raises(StateError):
            info_nce(Tensor([1.0, 0.0]), np.array([1.0, 0.0]), NegativeQueue(4, 2), tau=0.1)

    def test_bad_tau_rejected(self):
        with pytest.raises(ArgumentError):
            info_nce(Tensor([1.0, 0.0]), np.array([1.0, 0.0]), full_queue(4, 2), tau=0.0)

    def test_loss_at_least_log_needs_unequal_sims(self):
        rng = RngStream(6)
        queue = full_queue(16, 8, seed=7)
        for _ in range(20):
            q = unit(rng.normal((8,)))
            k = unit(rng.normal((8,)))
            loss = info_nce(Tensor(q), k, queue, tau=0.5)
            assert loss.item() >= 0.0

    def test_gradient_wrt_query_matches_finite_differences(self):
        rng = RngStream(8)
        queue = full_queue(12, 6, seed=9)
        k = unit(rng.normal((6,)))
        q0 = rng.normal((6,))

        def loss_of(t):
            return info_nce(t, k, queue, tau=0.1)

        q = Tensor(q0, requires_grad=True)
        loss_of(q).backward()
        fd = finite_diff_grad(lambda t: loss_of(t).item(), Tensor(q0))
        assert max_rel_error(q.grad, fd) < 1e-4

    def test_batched_matches_single_rows(self):
        rng = RngStream(10)
        queue = full_queue(8, 5, seed=11)
        qs = np.stack([unit(rng.normal((5,))) for _ in range(3)])
        ks = np.stack([unit(rng.normal((5,))) for _ in range(3)])
        batched = info_nce(Tensor(qs), ks, queue, tau=0.2).item()
        singles = [info_nce(Tensor(q), k, queue, tau=0.2).item() for q, k in zip(qs, ks)]
        assert batched == pytest.approx(float(np.mean(singles)), abs=1e-12)


class TestMomentumUpdate:
    def make_model(self, seed=0):
        return init_cml_model(4, 3, 3, 4, RngStream(seed))

    def test_m_one_is_fixed_point(self):
        model = self.make_model()
        before = {n: p.data.copy() for n, p in model.named_parameters()}
        for _ in range(5):
            momentum_update(model, 1.0, 1.0)
        for n, p in model.named_parameters():
            assert np.array_equal(p.data, before[n]), n

    def test_m_zero_copies_query(self):
        model = self.make_model()
        momentum_update(model, 0.0, 0.0)
        for qp, kp in zip(model.query_encoder.parameters(), model.key_encoder.parameters()):
            assert np.array_equal(qp.data, kp.data)
        for qp, kp in zip(model.query_head.parameters(), model.key_head.parameters()):
            assert np.array_equal(qp.data, kp.data)

    def test_scalar_arithmetic(self):
        model = self.make_model()
        qp = model.query_encoder.parameters()[0]
        kp = model.key_encoder.parameters()[0]
        qp.data[:] = 1.0
        kp.data[:] = 0.0
        momentum_update(model, 0.999, 1.0)
        assert np.allclose(kp.data, 0.001, atol=1e-15)

    def test_out_of_range_rejected(self):
        model = self.make_model()
        with pytest.raises(ArgumentError):
            momentum_update(model, 1.2, 1.0)
        with pytest.raises(ArgumentError):
            momentum_update(model, 0.9, -0.1)

    @given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
    @settings(max_examples=20, deadline=None)
    def test_convex_combination(self, m_enc, m_mlp):
        model = self.make_model(seed=3)
        pairs = list(zip(model.query_parameters(), model.key_parameters()))
        lo = [np.minimum(q.data, k.data).copy() for q, k in pairs]
        hi = [np.maximum(q.data, k.data).copy() for q, k in pairs]
        momentum_update(model, m_enc, m_mlp)
        for (q, k), lo_i, hi_i in zip(pairs, lo, hi):
            assert np.all(k.data >= lo_i - 1e-12) and np.all(k.data <= hi_i + 1e-12)

    def test_frozen_query_and_m_one_keeps_key_bit_identical(self):
        model = self.make_model(seed=4)
        before = {n: p.data.tobytes() for n, p in model.named_parameters() if n.startswith("key")}
        for _ in range(25):
            momentum_update(model, 1.0, 1.0)
        after = {n: p.data.tobytes() for n, p in model.named_parameters() if n.startswith("key")}
        assert before == after


class TestNegativeQueue:
    def test_fifo_eviction_with_sentinels(self):
        queue = NegativeQueue(4, 3)
        tagged = []
        for i in range(6):
            v = np.zeros(3)
            v[i % 3] = 1.0 if i < 3 else -1.0
            tagged.append(v)
            queue.push(v[None])
        expected = tagged[2:]
        got = queue.entries
        assert len(got) == 4
        for e, g in zip(expected, got):
            assert np.array_equal(e, g)

    def test_push_grows_by_batch(self):
        queue = NegativeQueue(8, 2)
        batch = np.tile(unit(np.array([1.0, 1.0])), (3, 1))
        queue.push(batch)
        assert len(queue) == 3
        queue.push(batch)
        assert len(queue) == 6

    def test_overfill_evicts_first_pushed(self):
        queue = NegativeQueue(4, 2)
        first = np.array([[1.0, 0.0]])
        queue.push(first)
        queue.push(np.tile(unit(np.array([1.0, 1.0])), (4, 1)))
        assert len(queue) == 4
        for entry in queue.entries:
            assert not np.array_equal(entry, first[0])

    def test_non_unit_keys_rejected(self):
        queue = NegativeQueue(4, 2)
        with pytest.raises(ArgumentError):
            queue.push(np.array([[2.0, 0.0]]))
        queue.push(np.array([[2.0, 0.0]]), enforce_unit=False)
        assert len(queue) == 1

    @given(st.lists(st.integers(1, 7), min_size=1, max_size=30))
    @settings(max_examples=40, deadline=None)
    def test_length_never_exceeds_capacity(self, batch_sizes):
        queue = NegativeQueue(16, 4)
        rng = RngStream(12)
        pushed = 0
        for b in batch_sizes:
            batch = rng.normal((b, 4))
            batch /= np.linalg.norm(batch, axis=1, keepdims=True)
            queue_push(queue, batch)
            pushed += b
            assert len(queue) <= 16
            assert len(queue) == min(pushed, 16)

    def test_fill_random_unit_entries(self):
        queue = full_queue(32, 6, seed=13)
        assert len(queue) == 32
        for entry in queue.entries:
            assert abs(np.linalg.norm(entry) - 1.0) < 1e-12
