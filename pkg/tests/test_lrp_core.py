import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from palrp.errors import UnsupportedOpError
from palrp.evaluation.fixtures import random_model, random_tokens
from palrp.lrp_core import (
    LRPConfig,
    backpropagate,
    init_relevance,
    propagate_node,
    rule_add_split,
    rule_epsilon_linear,
    rule_identity,
    rule_matmul_split,
    rule_softmax,
)
from palrp.model import forward
from palrp.tensor_tape import Tape, TapeNode, softmax_rows


def fd_softmax_jacobian(x, h=1e-5):
    c = x.size
    J = np.zeros((c, c))
    for j in range(c):
        step = np.zeros(c)
        step[j] = h
        J[:, j] = (softmax_rows((x + step)[None])[0] - softmax_rows((x - step)[None])[0]) / (2 * h)
    return J


def softmax_oracle(r_s, x):
    s = softmax_rows(x[None])[0]
    return x * (fd_softmax_jacobian(x).T @ (r_s / s))


class TestInit:
    def test_single_entry(self):
        np.testing.assert_array_equal(init_relevance([[1.0, 2.0]], 0, 1), [[0.0, 2.0]])

    def test_zero_logit(self):
        assert init_relevance([[0.0, 3.0]], 0, 0).sum() == 0

    def test_total_equals_logit(self):
        logits = np.random.default_rng(0).standard_normal((4, 5))
        assert init_relevance(logits, 2, 3).sum() == logits[2, 3]

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            init_relevance(np.zeros((2, 2)), 2, 0)


class TestAddSplit:
    def test_symmetric(self):
        ra, rb = rule_add_split(1.0, 1.0, 1.0)
        assert ra == pytest.approx(0.5) and rb == pytest.approx(0.5)

    def test_null_operand(self):
        ra, rb = rule_add_split(1.0, 0.0, 5.0)
        assert ra == 0 and rb == pytest.approx(1.0)

    @settings(max_examples=80, deadline=None)
    @given(arrays(np.float64, 6, elements=st.floats(-10, 10)), arrays(np.float64, 6, elements=st.floats(-10, 10)),
           arrays(np.float64, 6, elements=st.floats(-10, 10)))
    def test_conserves(self, a, b, r):
        den = np.abs(a + b)
        keep = den > 1e-3
        ra, rb = rule_add_split(r, a, b)
        eps = LRPConfig().epsilon
        assert np.all(np.abs((ra + rb - r)[keep]) <= np.abs(r[keep]) * eps / den[keep] * 1.0001 + 1e-15)

    def test_signed_stabilizer_keeps_sign(self):
        ra, rb = rule_add_split(1.0, -1e-7, -1e-7, LRPConfig(signed_stabilizer=True))
        assert ra > 0 and rb > 0
        ra, _ = rule_add_split(1.0, -1e-7, -1e-7, LRPConfig(signed_stabilizer=False))
        assert ra < 0


class TestMatmulSplit:
    def test_scalar_half_split(self):
        ra, rb = rule_matmul_split([[1.0]], [[2.0]], [[3.0]])
        assert ra[0, 0] == pytest.approx(0.5) and rb[0, 0] == pytest.approx(0.5)

    def test_zero_row(self):
        a = np.array([[0.0, 0.0], [1.0, 2.0]])
        ra, _ = rule_matmul_split(np.ones((2, 2)), a, np.array([[1.0, 2.0], [3.0, 4.0]]))
        assert not ra[0].any()

    def test_half_conservation(self):
        rng = np.random.default_rng(1)
        checked = 0
        while checked < 50:
            a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
            c = a @ b
            if np.abs(c).min() <= 1e-2:
                continue
            r = rng.standard_normal(c.shape)
            ra, rb = rule_matmul_split(r, a, b, LRPConfig(epsilon=1e-9))
            assert ra.sum() == pytest.approx(r.sum() / 2, abs=1e-6)
            assert rb.sum() == pytest.approx(r.sum() / 2, abs=1e-6)
            # with the default stabilizer the gap is bounded by eps / |c|
            ra, _ = rule_matmul_split(r, a, b)
            bound = 0.5 * LRPConfig().epsilon * np.sum(np.abs(r) / np.abs(c))
            assert abs(ra.sum() - r.sum() / 2) <= bound * 1.0001
            checked += 1

    def test_transpose_matches_explicit(self):
        rng = np.random.default_rng(2)
        a, b, r = rng.standard_normal((3, 4)), rng.standard_normal((5, 4)), rng.standard_normal((3, 5))
        ra, rb = rule_matmul_split(r, a, b, transpose_b=True)
        ra2, rbt = rule_matmul_split(r, a, b.T)
        np.testing.assert_allclose(ra, ra2, rtol=1e-14)
        np.testing.assert_allclose(rb, rbt.T, rtol=1e-14)


class TestSoftmaxRule:
    def test_zero_input(self):
        x = np.zeros((1, 4))
        r = rule_softmax(np.random.default_rng(3).standard_normal((1, 4)), x, softmax_rows(x))
        assert not r.any()

    def test_proportional_relevance_cancels(self):
        x = np.random.default_rng(4).standard_normal((2, 5))
        s = softmax_rows(x)
        np.testing.assert_allclose(rule_softmax(2.5 * s, x, s), 0.0, atol=1e-15)

    def test_matches_finite_difference(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            c = int(rng.integers(2, 17))
            x = rng.uniform(-3, 3, size=c)
            r_s = rng.standard_normal(c)
            got = rule_softmax(r_s[None], x[None], softmax_rows(x[None]))[0]
            ref = softmax_oracle(r_s, x)
            assert np.linalg.norm(got - ref) <= 1e-3 * np.linalg.norm(ref)

    def test_not_conservative_in_general(self):
        x = np.array([[1.0, -2.0, 0.5]])
        s = softmax_rows(x)
        r = rule_softmax(np.array([[1.0, 0.0, 0.0]]), x, s)
        assert abs(r.sum() - 1.0) > 0.1


class TestIdentityAndLinear:
    def test_identity(self):
        x = np.random.default_rng(6).standard_normal((3, 3))
        assert np.array_equal(rule_identity(rule_identity(x)), x)

    def test_zero_weight_bias_absorbs_all(self):
        r = rule_epsilon_linear(np.ones((1, 2)), np.ones((1, 2)), np.zeros((2, 2)), np.array([1.0, -1.0]))
        assert not r.any()

    def test_identity_weight(self):
        rng = np.random.default_rng(7)
        x = rng.uniform(1, 2, (2, 3))
        r = rng.standard_normal((2, 3))
        np.testing.assert_allclose(rule_epsilon_linear(r, x, np.eye(3)), r, rtol=1e-5)

    def test_bias_free_conservation(self):
        rng = np.random.default_rng(8)
        checked = 0
        while checked < 30:
            x, W = rng.standard_normal((2, 5)), rng.standard_normal((5, 4))
            if np.abs(x @ W).min() <= 1e-2:
                continue
            r = rng.standard_normal((2, 4))
            got = rule_epsilon_linear(r, x, W, cfg=LRPConfig(epsilon=1e-9)).sum()
            assert got == pytest.approx(r.sum(), abs=1e-6)
            checked += 1


class TestBackpropagate:
    def test_single_identity(self):
        tape = Tape()
        x = tape.leaf(np.array([[1.0, -2.0]]))
        y = tape.activation("relu", x)
        trace = tape.finish(y)
        seed = np.array([[0.3, 0.7]])
        rel = backpropagate(trace, {trace.output_id: seed})
        np.testing.assert_array_equal(rel[x.id], seed)

    def test_fan_out_accumulates(self):
        tape = Tape()
        x = tape.leaf(np.array([[2.0, 3.0]]))
        a = tape.scale(x, 1.0)
        b = tape.activation("relu", x)
        y = tape.add(a, b)
        trace = tape.finish(y)
        seed = np.array([[1.0, 1.0]])
        rel = backpropagate(trace, seed, LRPConfig(epsilon=1e-12))
        # each branch carries half; the leaf collects both halves
        np.testing.assert_allclose(rel[x.id], seed, rtol=1e-10)

    def test_unreached_leaf_gets_zeros(self):
        tape = Tape()
        x = tape.leaf(np.ones((1, 2)))
        unused = tape.leaf(np.ones((3,)))
        trace = tape.finish(tape.scale(x, 2.0))
        rel = backpropagate(trace, np.ones((1, 2)))
        assert rel[unused.id].shape == (3,) and not rel[unused.id].any()

    def test_hooks_see_final_relevance(self):
        tape = Tape()
        x = tape.leaf(np.array([[1.0, 1.0]]))
        y = tape.add(x, x)
        trace = tape.finish(y)
        seen = {}
        backpropagate(trace, np.ones((1, 2)), sink_hooks={x.id: lambda node, r: seen.setdefault(node.id, r)})
        np.testing.assert_allclose(seen[x.id], [[1.0, 1.0]], rtol=1e-6)

    def test_unknown_kind(self):
        node = TapeNode(0, "Mystery", (), np.zeros(1), {})
        with pytest.raises(UnsupportedOpError):
            propagate_node(node, np.zeros(1), [], LRPConfig())

    def test_bias_free_one_layer_conserves(self):
        model = random_model(21, "rope", num_layers=1, num_heads=1, bias_free=True, attention_softmax=False)
        tokens = random_tokens(21, model.config, 5)
        logits, trace = forward(*model, tokens)
        seed = init_relevance(logits, 4, int(np.argmax(logits[4])))
        rel = backpropagate(trace, seed, LRPConfig(epsilon=1e-9))
        total = sum(rel[i].sum() for i in trace.input_ids)
        assert abs(total - seed.sum()) <= 1e-4 * abs(seed.sum())

    def test_balance_accounts_for_softmax_loss(self):
        model = random_model(22, "learnable", num_layers=1, bias_free=True)
        logits, trace = forward(*model, random_tokens(22, model.config, 6))
        seed = init_relevance(logits, 5, 0)
        lost = {}
        rel = backpropagate(trace, seed, LRPConfig(epsilon=1e-9), balance=lost)
        total = sum(rel[i].sum() for i in trace.input_ids)
        assert abs(total + sum(lost.values()) - seed.sum()) <= 1e-8 * max(1.0, abs(seed.sum()))
        others = {k: v for k, v in lost.items() if k != "SoftmaxRows"}
        assert max(abs(v) for v in others.values()) <= 1e-6 * max(1.0, abs(seed.sum()))
