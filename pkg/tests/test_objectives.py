import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multigrain import tensor as T
from multigrain.gradcheck import grad_check
from multigrain.objectives import (
    ClassifierHead,
    MarginState,
    PairSet,
    cross_entropy,
    cross_entropy_logits,
    default_tau,
    gradient_fraction,
    joint_loss,
    margin_loss,
    negative_density,
    negative_probabilities,
    pair_distance,
    positive_pairs,
    sample_negatives,
    sample_pairs,
)
from multigrain.tensor import DomainError, Tape, Tensor, backward


def _unit(theta):
    return np.array([np.cos(theta), np.sin(theta)])


def _pair_at_distance(dist):
    """Two unit vectors in the plane at Euclidean distance ``dist``."""
    return _unit(0.0), _unit(2 * math.asin(dist / 2))


def _identity_head(n_classes, dim):
    w = np.zeros((n_classes, dim + 1))
    w[:, :dim] = np.eye(n_classes, dim)
    return ClassifierHead(Tensor(w))


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = cross_entropy_logits(Tensor(np.zeros((1, 10))), [3]).data
        np.testing.assert_allclose(loss, [math.log(10)], rtol=1e-14)

    def test_saturated(self):
        z = np.zeros((1, 5))
        z[0, 2] = 1000.0
        assert cross_entropy_logits(Tensor(z), [2]).data[0] < 1e-6

    def test_two_class_value(self):
        loss = cross_entropy_logits(Tensor([[1.0, 0.0]]), [0]).data[0]
        np.testing.assert_allclose(loss, math.log(1 + math.exp(-1)), rtol=1e-14)
        np.testing.assert_allclose(loss, 0.31326168751822286, rtol=1e-12)

    def test_bias_channel(self):
        head = ClassifierHead(Tensor([[0.0, 0.0, 2.0], [0.0, 0.0, 0.0]]))
        loss = cross_entropy(Tensor([0.3, -0.4]), head, 0).data
        np.testing.assert_allclose(loss, math.log(1 + math.exp(-2)), rtol=1e-13)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            cross_entropy_logits(Tensor(np.zeros((1, 3))), [3])

    def test_gradients(self):
        rng = np.random.default_rng(0)
        head = ClassifierHead(Tensor(rng.normal(size=(4, 6))))
        e = rng.normal(size=(3, 5))
        assert grad_check(lambda t: T.sum(cross_entropy(t, head, [0, 3, 1])), e) < 1e-7
        assert grad_check(lambda w: T.sum(cross_entropy(Tensor(e), ClassifierHead(w), [0, 3, 1])), head.W.data) < 1e-7

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-30, 30), min_size=2, max_size=6), st.integers(0, 5))
    def test_non_negative(self, logits, label):
        label %= len(logits)
        assert cross_entropy_logits(Tensor([logits]), [label]).data[0] >= 0.0


class TestMarginLoss:
    state = MarginState(dim=2)

    def _loss(self, dist, y):
        a, b = _pair_at_distance(dist)
        return float(margin_loss(Tensor(a[None]), Tensor(b[None]), self.state, [y]).data[0])

    def test_boundary(self):
        np.testing.assert_allclose(self._loss(1.2, +1), 0.2, atol=1e-12)

    def test_inactive_negative(self):
        assert self._loss(1.2 + 0.2 + 0.1, -1) == 0.0

    def test_positive_beyond_boundary(self):
        np.testing.assert_allclose(self._loss(1.5, +1), 0.5, atol=1e-12)

    def test_scale_invariant(self):
        a, b = _pair_at_distance(0.9)
        base = margin_loss(Tensor(a[None]), Tensor(b[None]), self.state, [1]).data
        scaled = margin_loss(Tensor(7 * a[None]), Tensor(0.1 * b[None]), self.state, [1]).data
        np.testing.assert_allclose(base, scaled, rtol=1e-12)

    def test_zero_embedding(self):
        with pytest.raises(DomainError):
            margin_loss(Tensor(np.zeros((1, 2))), Tensor(np.ones((1, 2))), self.state, [1])

    def test_beta_gradient_is_minus_y_over_active_terms(self):
        rng = np.random.default_rng(1)
        left, right = rng.normal(size=(8, 4)), rng.normal(size=(8, 4))
        y = np.array([1, -1, 1, -1, 1, 1, -1, -1], dtype=float)
        beta = Tensor(np.array(1.2), requires_grad=True)
        with Tape():
            loss = T.sum(margin_loss(Tensor(left), Tensor(right), MarginState(dim=4), y, beta))
        backward(loss)
        d = np.linalg.norm(left / np.linalg.norm(left, axis=1, keepdims=True)
                           - right / np.linalg.norm(right, axis=1, keepdims=True), axis=1)
        active = 0.2 + y * (d - 1.2) > 0
        np.testing.assert_allclose(float(beta.grad), -np.sum(y[active]), atol=1e-12)

    def test_gradients(self):
        rng = np.random.default_rng(2)
        left, right = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
        y = np.array([1, -1, 1, -1, 1, -1], dtype=float)
        state = MarginState(dim=4)
        assert grad_check(lambda t: T.sum(margin_loss(t, Tensor(right), state, y)), left) < 1e-6
        assert grad_check(lambda b: T.sum(margin_loss(Tensor(left), Tensor(right), state, y, b)), np.array(1.1)) < 1e-6


class TestDistance:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31))
    def test_range_symmetry_identity(self, seed):
        rng = np.random.default_rng(seed)
        a, b = Tensor(rng.normal(size=(3, 5))), Tensor(rng.normal(size=(3, 5)))
        d = pair_distance(a, b).data
        assert np.all((d >= 0) & (d <= 2 + 1e-12))
        np.testing.assert_allclose(d, pair_distance(b, a).data, rtol=1e-12)
        np.testing.assert_allclose(pair_distance(a, a).data, 0.0, atol=1e-12)


class TestNegativeDensity:
    def test_d3_is_linear(self):
        np.testing.assert_allclose(negative_density(1.0, 3) / negative_density(0.5, 3), 2.0, rtol=1e-14)

    def test_d2_value(self):
        np.testing.assert_allclose(negative_density(1.0, 2), 0.75**-0.5, rtol=1e-14)
        np.testing.assert_allclose(negative_density(1.0, 2), 1.1547005383792515, rtol=1e-12)

    def test_mode_near_sqrt2_in_high_dimension(self):
        z = np.linspace(1e-3, 2 - 1e-3, 200001)
        mode = z[np.argmax(negative_density(z, 128))]
        assert abs(mode - math.sqrt(2)) < 0.02

    def test_domain(self):
        with pytest.raises(ValueError):
            negative_density(2.0, 8)
        with pytest.raises(ValueError):
            negative_density(0.0, 8)
        with pytest.raises(ValueError):
            negative_density(1.0, 1)

    def test_default_tau(self):
        np.testing.assert_allclose(default_tau(16), 1.0 / negative_density(0.5, 16), rtol=1e-12)


class TestSamplePairs:
    def test_two_by_two_enumeration(self):
        rng = np.random.default_rng(0)
        e = rng.normal(size=(4, 8))
        ids = np.array([1, 1, 2, 2])
        pairs = sample_pairs(e, ids, MarginState(dim=8), rng)
        np.testing.assert_array_equal(pairs.positives, [[0, 1], [2, 3]])
        for i, j in pairs.negatives:
            assert ids[i] != ids[j]

    def test_equal_distances_give_uniform_choice(self):
        # regular simplex: all pairwise distances equal
        e = np.eye(6)
        ids = np.array([0, 0, 1, 2, 3, 4])
        picks = sample_negatives(e, ids, np.zeros(100_000, dtype=int), MarginState(dim=6), np.random.default_rng(1))
        counts = np.bincount(picks, minlength=6)[2:]
        expected = 100_000 / 4
        sigma = math.sqrt(100_000 * 0.25 * 0.75)
        assert np.all(np.abs(counts - expected) < 3 * sigma)
        assert np.bincount(picks, minlength=6)[:2].sum() == 0

    def test_frequencies_match_exact_law(self):
        rng = np.random.default_rng(2)
        e = rng.normal(size=(8, 16))
        ids = np.array([0, 0, 1, 1, 2, 2, 3, 3])
        state = MarginState(dim=16)
        picks = sample_negatives(e, ids, np.full(100_000, 2), state, np.random.default_rng(3))
        freq = np.bincount(picks, minlength=8) / len(picks)
        exact = negative_probabilities(e, ids, 2, state)
        assert 0.5 * np.abs(freq - exact).sum() < 0.02

    def test_exact_law_matches_clamped_inverse_density(self):
        rng = np.random.default_rng(4)
        e = rng.normal(size=(6, 5))
        ids = np.array([0, 0, 1, 2, 3, 4])
        state = MarginState(dim=5)
        en = e / np.linalg.norm(e, axis=1, keepdims=True)
        dist = np.linalg.norm(en - en[0], axis=1)
        w = np.array([min(state.tau_value, 1.0 / negative_density(d, 5)) if ids[j] != 0 else 0.0
                      for j, d in enumerate(np.clip(dist, 1e-4, 2 - 1e-4))])
        np.testing.assert_allclose(negative_probabilities(e, ids, 0, state), w / w.sum(), rtol=1e-12)

    def test_no_positive_pair(self):
        with pytest.raises(ValueError):
            sample_pairs(np.eye(3), [0, 1, 2], MarginState(dim=3), np.random.default_rng(0))

    def test_single_instance(self):
        with pytest.raises(ValueError):
            sample_pairs(np.eye(3), [0, 0, 0], MarginState(dim=3), np.random.default_rng(0))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31), st.integers(2, 5), st.integers(2, 4))
    def test_labels_consistent_with_instances(self, seed, n_inst, copies):
        rng = np.random.default_rng(seed)
        ids = np.repeat(np.arange(n_inst), copies)
        pairs = sample_pairs(rng.normal(size=(len(ids), 6)), ids, MarginState(dim=6), rng)
        assert len(pairs.positives) == len(pairs.negatives) == n_inst * copies * (copies - 1) // 2
        assert np.all(ids[pairs.positives[:, 0]] == ids[pairs.positives[:, 1]])
        assert np.all(pairs.positives[:, 0] < pairs.positives[:, 1])
        assert np.all(ids[pairs.negatives[:, 0]] != ids[pairs.negatives[:, 1]])

    def test_positive_pairs_canonical(self):
        np.testing.assert_array_equal(positive_pairs([5, 7, 5, 7, 5]), [[0, 2], [0, 4], [1, 3], [2, 4]])


class TestJointLoss:
    def _batch(self):
        rng = np.random.default_rng(5)
        e = rng.normal(size=(4, 3))
        head = ClassifierHead(Tensor(rng.normal(size=(2, 4))))
        labels = np.array([0, 0, 1, 1])
        pairs = PairSet(np.array([[0, 1], [2, 3]]), np.array([[0, 2], [2, 1]]), 4)
        return e, head, labels, pairs

    def test_manual_computation(self):
        e, head, labels, pairs = self._batch()
        state = MarginState(dim=3)
        logits = np.c_[e, np.ones(4)] @ head.W.data.T
        ce = [math.log(sum(math.exp(v) for v in row)) - row[c] for row, c in zip(logits, labels)]
        u = e / np.linalg.norm(e, axis=1, keepdims=True)
        terms = []
        for (i, j), y in zip([(0, 1), (2, 3), (0, 2), (2, 1)], [1, 1, -1, -1]):
            terms.append(max(0.0, 0.2 + y * (np.linalg.norm(u[i] - u[j]) - 1.2)))
        expected = 0.5 * sum(ce) / 4 + 0.5 * sum(terms) / 4
        got = joint_loss(Tensor(e), labels, head, state, 0.5, pairs).total.data
        np.testing.assert_allclose(got, expected, rtol=1e-12)

    def test_lambda_one_is_mean_cross_entropy(self):
        e, head, labels, _ = self._batch()
        got = joint_loss(Tensor(e), labels, head, MarginState(dim=3), 1.0).total.data
        np.testing.assert_allclose(got, cross_entropy(Tensor(e), head, labels).data.mean(), rtol=1e-14)

    def test_lambda_zero_is_mean_margin(self):
        e, head, labels, pairs = self._batch()
        state = MarginState(dim=3)
        left, right, y = pairs.as_arrays()
        expected = margin_loss(Tensor(e[left]), Tensor(e[right]), state, y).data.mean()
        np.testing.assert_allclose(joint_loss(Tensor(e), labels, head, state, 0.0, pairs).total.data, expected,
                                   rtol=1e-14)

    def test_missing_pairs(self):
        e, head, labels, _ = self._batch()
        with pytest.raises(ValueError):
            joint_loss(Tensor(e), labels, head, MarginState(dim=3), 0.5, None)

    def test_permutation_invariance(self):
        e, head, labels, pairs = self._batch()
        state = MarginState(dim=3)
        perm = np.array([2, 0, 3, 1])
        inv = np.argsort(perm)
        moved = PairSet(inv[pairs.positives], inv[pairs.negatives], 4)
        a = joint_loss(Tensor(e), labels, head, state, 0.3, pairs).total.data
        b = joint_loss(Tensor(e[perm]), labels[perm], head, state, 0.3, moved).total.data
        np.testing.assert_allclose(a, b, rtol=1e-12)


class TestGradientFraction:
    def test_inactive_retrieval_gives_one(self):
        e = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
        pairs = PairSet(np.array([[0, 1], [2, 3]]), np.array([[0, 2], [2, 0]]), 4)
        head = ClassifierHead(Tensor(np.random.default_rng(0).normal(size=(2, 3))))
        assert gradient_fraction(e, [0, 0, 1, 1], head, MarginState(dim=2), 0.5, pairs) == 1.0

    def test_saturated_classifier_gives_near_zero(self):
        e = np.array([[1.0, 0.1], [0.9, 0.3], [0.2, 1.0], [0.1, 0.8]])
        head = ClassifierHead(Tensor([[1e3, -1e3, 0.0], [-1e3, 1e3, 0.0]]))
        pairs = PairSet(np.array([[0, 1], [2, 3]]), np.array([[0, 2], [2, 0]]), 4)
        assert gradient_fraction(e, [0, 0, 1, 1], head, MarginState(dim=2, beta=0.05), 0.5, pairs) < 1e-6

    def test_matches_manual_two_pass(self):
        rng = np.random.default_rng(6)
        e = rng.normal(size=(6, 4))
        head = ClassifierHead(Tensor(rng.normal(size=(3, 5))))
        labels = np.array([0, 0, 1, 1, 2, 2])
        state = MarginState(dim=4)
        pairs = sample_pairs(e, [0, 0, 1, 1, 2, 2], state, rng)
        left, right, y = pairs.as_arrays()

        def norm(fn):
            leaf = Tensor(e, requires_grad=True)
            with Tape():
                out = fn(leaf)
            backward(out)
            return np.linalg.norm(leaf.grad)

        gc = norm(lambda t: T.scale(T.mean(cross_entropy(t, head, labels)), 0.5))
        gr = norm(lambda t: T.scale(T.sum(margin_loss(T.take_rows(t, left), T.take_rows(t, right), state, y)),
                                    0.5 / len(y)))
        frac = gradient_fraction(e, labels, head, state, 0.5, pairs)
        assert 0 < frac < 1
        np.testing.assert_allclose(frac, gc / (gc + gr), rtol=1e-12)

    def test_degenerate_lambda(self):
        e = np.eye(4)
        pairs = PairSet(np.array([[0, 1]]), np.array([[0, 2]]), 4)
        with pytest.raises(ValueError):
            gradient_fraction(e, [0, 0, 1, 1], _identity_head(2, 4), MarginState(dim=4), 1.0, pairs)
