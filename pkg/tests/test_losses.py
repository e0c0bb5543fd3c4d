import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import gradcases
from embedlab import losses as L
from embedlab import numerics as nx
from embedlab.errors import DegenerateBatchError, DomainError
from embedlab.model import Projection, ProjectionSide


def identity_psi(n):
    return Projection(np.eye(n), np.zeros(n))


def unit(x):
    x = np.asarray(x, dtype=np.float64)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def rotation(d, rng):
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def realise_cosines(C):
    """Unit queries x_j and documents y_i with cos(x_j, y_i) == C[j, i]."""
    B = C.shape[0]
    x = np.eye(B, 2 * B)
    y = np.zeros((B, 2 * B))
    y[:, :B] = C.T
    y[np.arange(B), B + np.arange(B)] = np.sqrt(1.0 - (C ** 2).sum(axis=0))
    return x, y


seeds = st.integers(0, 2**32 - 1)


class TestGradientSuite:
    @pytest.mark.parametrize("name", list(gradcases.CASES))
    def test_matches_finite_differences(self, name):
        rng = np.random.default_rng([17, len(name)])
        worst = max(gradcases.check(gradcases.CASES[name], rng) for _ in range(20))
        assert worst <= 1e-4

    def test_log_tau_gradient(self):
        rng = np.random.default_rng(4)
        q, d = unit(rng.standard_normal((4, 5))), unit(rng.standard_normal((4, 5)))

        def f(p):
            return L.info_nce(L.TripletBatch(q, d), L.tau_from_log(p[0]))

        lt = nx.Tensor(np.array(np.log(0.05)), requires_grad=True)
        (g,) = nx.grad(f([lt]), [lt])
        (n,) = nx.finite_diff(lambda p: f(p).item(), [np.array(np.log(0.05))])
        assert nx.relative_error([g], [n]) <= 1e-4


class TestDistill:
    def test_identical(self):
        x = unit(np.random.default_rng(0).standard_normal((3, 4)))
        assert L.distill_loss(L.PairBatch(x, x, x, x), identity_psi(4)).item() == pytest.approx(0.0, abs=1e-12)

    def test_antipodal(self):
        s = np.array([[1.0, 0.0]])
        assert L.distill_loss(L.PairBatch(s, s, -s, -s), identity_psi(2)).item() == pytest.approx(4.0)

    def test_hand_value(self):
        sx, tx = np.array([[1.0, 0.0]]), np.array([[0.5, math.sqrt(0.75)]])
        sy = ty = np.array([[0.0, 1.0]])
        assert L.distill_loss(L.PairBatch(sx, sy, tx, ty), identity_psi(2)).item() == pytest.approx(0.5, abs=1e-12)

    def test_zero_projection_is_domain_error(self):
        z = np.ones((1, 2))
        with pytest.raises(DomainError):
            L.distill_loss(L.PairBatch(z, z, z, z), Projection(np.zeros((2, 2)), np.zeros(2)))

    def test_teacher_side_projection(self):
        # teacher side maps m -> n, so the comparison happens in the student space
        rng = np.random.default_rng(1)
        t = rng.standard_normal((2, 3))
        W = rng.standard_normal((2, 3))
        s = t @ W.T
        psi = Projection(W, np.zeros(2), side=ProjectionSide.TEACHER)
        assert L.distill_loss(L.PairBatch(s, s, t, t), psi).item() == pytest.approx(0.0, abs=1e-12)

    def test_mean_reduction(self):
        rng = np.random.default_rng(2)
        a, b = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
        batch = L.PairBatch(a, b, b, a)
        total = L.distill_loss(batch, identity_psi(3)).item()
        assert L.distill_loss(batch, identity_psi(3), reduction="mean").item() == pytest.approx(total / 5)

    @given(seeds, st.integers(1, 6))
    def test_bounds(self, seed, B):
        rng = np.random.default_rng(seed)
        batch = L.PairBatch(*(rng.standard_normal((B, 4)) for _ in range(4)))
        v = L.distill_loss(batch, identity_psi(4)).item()
        assert -1e-12 <= v <= 4 * B + 1e-12


class TestInfoNCE:
    def test_single_pair(self):
        x = unit([[1.0, 2.0]])
        assert L.info_nce(L.TripletBatch(x, unit([[0.3, 1.0]])), 0.02).item() == pytest.approx(0.0, abs=1e-12)

    def test_uniform_similarity(self):
        x = np.array([[1.0, 0.0], [1.0, 0.0]])
        assert L.info_nce(L.TripletBatch(x, x), 0.02).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_uniform_with_mined_negatives(self):
        x = np.array([[1.0, 0.0]])
        batch = L.TripletBatch.from_lists(x, x, [[x[0], x[0], x[0]]])
        assert L.info_nce(batch, 0.1).item() == pytest.approx(math.log(4), abs=1e-12)

    def test_hand_value(self):
        x = np.eye(2)
        assert L.info_nce(L.TripletBatch(x, x), 1.0).item() == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
        assert L.info_nce(L.TripletBatch(x, x), 1.0).item() == pytest.approx(0.3133, abs=1e-4)

    def test_negatives_stay_with_their_query(self):
        # a negative identical to query 0 must not affect query 1's term
        x = np.eye(3)[:2]
        neg = [[np.eye(3)[0]], []]
        with_neg = L.info_nce(L.TripletBatch.from_lists(x, x, neg), 1.0).item()
        e = math.e
        expected = 0.5 * (math.log((e + 1 + e) / e) + math.log((e + 1) / e))
        assert with_neg == pytest.approx(expected, abs=1e-12)

    @settings(max_examples=50)
    @given(seeds, st.integers(2, 5), st.sampled_from([0.05, 0.5, 1.0]))
    def test_decreases_with_positive_similarity(self, seed, B, tau):
        rng = np.random.default_rng(seed)
        C = rng.uniform(-0.3, 0.3, size=(B, B))
        i = int(rng.integers(B))
        vals = []
        for delta in (-0.01, 0.0, 0.01):
            Cd = C.copy()
            Cd[i, i] += delta
            x, y = realise_cosines(Cd)
            np.testing.assert_allclose(unit(x) @ unit(y).T, Cd, atol=1e-12)
            vals.append(L.info_nce(L.TripletBatch(x, y), tau).item())
        assert vals[0] > vals[1] > vals[2]

    @given(seeds)
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        batch = L.TripletBatch.from_lists(rng.standard_normal((3, 4)), rng.standard_normal((3, 4)),
                                          [list(rng.standard_normal((2, 4))), [], list(rng.standard_normal((1, 4)))])
        assert L.info_nce(batch, 0.02).item() >= 0.0


class TestGOR:
    def test_orthonormal(self):
        e = np.eye(4)
        assert L.gor_loss(e, e).item() == 0.0

    def test_duplicates(self):
        q = np.tile(unit([1.0, 2.0, 3.0]), (5, 1))
        assert L.gor_loss(q, q).item() == pytest.approx(2.0, abs=1e-12)

    def test_too_small(self):
        with pytest.raises(DomainError):
            L.gor_loss(np.eye(2)[:1], np.eye(2)[:1])

    def test_monte_carlo_uniform_sphere(self):
        # E[(u.v)^2] = 1/d for independent uniform unit vectors
        rng = np.random.default_rng(0)
        vals = np.array([L.gor_loss(unit(rng.standard_normal((32, 64))), unit(rng.standard_normal((32, 64)))).item()
                         for _ in range(1000)])
        sigma = vals.std(ddof=1) / math.sqrt(len(vals))
        assert abs(vals.mean() - 2 / 64) <= 3 * sigma

    @given(seeds, st.integers(2, 6))
    def test_bounds(self, seed, B):
        rng = np.random.default_rng(seed)
        v = L.gor_loss(unit(rng.standard_normal((B, 3))), unit(rng.standard_normal((B, 3)))).item()
        assert -1e-12 <= v <= 2 + 1e-12


def _retrieval_inputs(seed=0, B=4, n=3, m=5):
    rng = np.random.default_rng(seed)
    q, d = unit(rng.standard_normal((B, n))), unit(rng.standard_normal((B, n)))
    trip = L.TripletBatch.from_lists(q, d, [list(unit(rng.standard_normal((2, n)))) for _ in range(B)])
    pairs = L.PairBatch(q, d, rng.standard_normal((B, m)), rng.standard_normal((B, m)))
    psi = Projection(rng.standard_normal((m, n)), np.zeros(m))
    return trip, pairs, psi


class TestRetrievalLoss:
    def test_zero_weights(self):
        w = L.LossWeights(lambda_nce=0, lambda_d=0, lambda_s=0)
        trip, pairs, psi = _retrieval_inputs()
        assert L.retrieval_loss(trip, pairs, w, psi).item() == 0.0

    def test_default_combination(self):
        trip, pairs, psi = _retrieval_inputs(1)
        w = L.LossWeights()
        a = L.info_nce(trip, w.tau).item()
        b = L.distill_loss(pairs, psi).item()
        c = L.gor_loss(trip.queries, trip.positives).item()
        assert L.retrieval_loss(trip, pairs, w, psi).item() == pytest.approx(a + 2 * b + c, abs=1e-12)

    def test_table_weights(self):
        w = L.LossWeights()
        assert (w.tau, w.tau_prime, w.lambda_nce, w.lambda_d, w.lambda_s, w.lambda_r) == (0.02, 0.05, 1, 2, 1, 20)

    def test_nonpositive_temperature_rejected(self):
        with pytest.raises(ValueError):
            L.LossWeights(tau=0.0)

    def test_log_tau_clamp(self):
        assert math.exp(L.clamp_log_tau(np.log(1e-4))) == pytest.approx(0.005)
        assert math.exp(L.clamp_log_tau(np.log(3.0))) == pytest.approx(1.0)


class TestCoSENT:
    def test_all_equal_scores(self):
        x = unit(np.random.default_rng(0).standard_normal((3, 2)))
        assert L.cosent_loss(L.ScoredPairBatch(x, x[::-1], [1.0, 1.0, 1.0]), 0.05).item() == 0.0

    def test_equal_similarity(self):
        x = np.eye(2)
        assert L.cosent_loss(L.ScoredPairBatch(x, x, [2.0, 1.0]), 0.05).item() == pytest.approx(math.log(2))

    def test_hand_value(self):
        x = np.array([[1.0, 0.0], [1.0, 0.0]])
        y = np.array([[0.9, math.sqrt(1 - 0.81)], [0.1, math.sqrt(1 - 0.01)]])
        v = L.cosent_loss(L.ScoredPairBatch(x, y, [5.0, 1.0]), 0.05).item()
        assert v == pytest.approx(math.log1p(math.exp(-16)), rel=1e-6)
        assert v == pytest.approx(1.125e-7, rel=1e-3)

    @given(seeds, st.integers(2, 6))
    def test_monotone_score_invariance(self, seed, B):
        rng = np.random.default_rng(seed)
        x, y = rng.standard_normal((B, 3)), rng.standard_normal((B, 3))
        s = rng.integers(0, 4, size=B).astype(float)
        a = L.cosent_loss(L.ScoredPairBatch(x, y, s), 0.05).item()
        b = L.cosent_loss(L.ScoredPairBatch(x, y, np.exp(s) * 3 - 7), 0.05).item()
        assert a >= 0
        assert a == pytest.approx(b, rel=1e-12, abs=1e-15)


class TestSTS:
    def test_scored_branch(self):
        rng = np.random.default_rng(0)
        sc = L.ScoredPairBatch(rng.standard_normal((4, 3)), rng.standard_normal((4, 3)), [0, 1, 2, 3])
        w = L.LossWeights()
        assert L.sts_loss(L.STSBatch(True, scored=sc), w, None).item() == L.cosent_loss(sc, w.tau_prime).item()

    def test_unscored_ratio(self):
        trip, pairs, psi = _retrieval_inputs(3)
        w = L.LossWeights()
        expected = L.info_nce(trip, w.tau).item() + 2 * L.distill_loss(pairs, psi).item()
        got = L.sts_loss(L.STSBatch(False, triplets=trip, pairs=pairs), w, psi).item()
        assert got == pytest.approx(expected, abs=1e-12)

    def test_in_batch_negatives(self):
        rng = np.random.default_rng(5)
        q, d = unit(rng.standard_normal((4, 3))), unit(rng.standard_normal((4, 3)))
        tau = 0.3
        # oracle: each query against its own positive and the B-1 other documents
        C = q @ d.T / tau
        oracle = np.mean([np.log(np.exp(C[i]).sum()) - C[i, i] for i in range(4)])
        pairs = L.PairBatch(q, d, q, d)
        w = L.LossWeights(tau=tau, lambda_d=0.0)
        got = L.sts_loss(L.STSBatch(False, triplets=L.TripletBatch(q, d), pairs=pairs), w, identity_psi(3)).item()
        assert got == pytest.approx(oracle, abs=1e-12)


class TestClassification:
    def test_hand_value(self):
        a = np.array([[1.0, 0, 0, 0, 0, 0, 0, 0]])
        negs = np.eye(8)[1:][None]
        v = L.classification_loss(L.ClassBatch(a, a, negs), 1.0).item()
        assert v == pytest.approx(math.log(1 + 7 * math.exp(-1)), abs=1e-12)
        assert v == pytest.approx(1.275, abs=1e-3)

    @given(seeds, st.integers(1, 4))
    def test_nonnegative(self, seed, B):
        rng = np.random.default_rng(seed)
        batch = L.ClassBatch(rng.standard_normal((B, 4)), rng.standard_normal((B, 4)), rng.standard_normal((B, 7, 4)))
        t = L.classification_terms(batch, 0.05)
        assert t["q2d"].item() >= 0 and t["d2q"].item() >= 0

    def test_swapped_direction(self):
        rng = np.random.default_rng(9)
        B = 3
        a, p, n = rng.standard_normal((B, 4)), rng.standard_normal((B, 4)), rng.standard_normal((B, 7, 4))
        d2q = L.classification_terms(L.ClassBatch(a, p, n), 0.5)["d2q"].item()
        # swapping roles and dropping the negatives leaves only in-batch candidates
        swapped = L.info_nce(L.TripletBatch(p, a), 0.5).item()
        assert d2q == pytest.approx(swapped, abs=1e-12)


class TestRelationalKD:
    def test_identical(self):
        x = np.random.default_rng(0).standard_normal((5, 4))
        assert L.relational_kd(x, x).item() == pytest.approx(0.0, abs=1e-12)

    def test_degenerate(self):
        x = np.ones((3, 2))
        with pytest.raises(DegenerateBatchError):
            L.relational_kd(x, np.random.default_rng(0).standard_normal((3, 4)))

    @given(seeds)
    def test_rotation_and_scaling(self, seed):
        rng = np.random.default_rng(seed)
        t = rng.standard_normal((6, 5))
        s = (t @ rotation(5, rng)) * rng.uniform(0.1, 10, size=(6, 1))
        assert L.relational_kd(s, t).item() <= 1e-9

    @given(seeds)
    def test_invariance_either_side(self, seed):
        rng = np.random.default_rng(seed)
        s, t = rng.standard_normal((5, 3)), rng.standard_normal((5, 6))
        base = L.relational_kd(s, t).item()
        s2 = (s @ rotation(3, rng)) * rng.uniform(0.5, 2, size=(5, 1))
        t2 = (t @ rotation(6, rng)) * rng.uniform(0.5, 2, size=(5, 1))
        assert L.relational_kd(s2, t).item() == pytest.approx(base, rel=1e-9, abs=1e-12)
        assert L.relational_kd(s, t2).item() == pytest.approx(base, rel=1e-9, abs=1e-12)


class TestScoreDistill:
    def test_equal_similarities(self):
        x = np.random.default_rng(0).standard_normal((4, 3))
        assert L.score_distill_loss(L.PairBatch(x, x, x, x), 0.02).item() == 0.0

    def test_hand_value(self):
        s = np.eye(2)                      # rows softmax to one-hot at tau=0.02
        t = np.array([[1.0, 0.0], [1.0, 0.0]])  # all-equal similarities: uniform rows
        v = L.score_distill_loss(L.PairBatch(s, s, t, t), 0.02).item()
        assert v == pytest.approx(1.0, abs=1e-9)

    def test_softmax_shift_invariance(self):
        m = np.random.default_rng(1).uniform(-1, 1, size=(3, 3))
        np.testing.assert_allclose(nx.softmax_row(m + 0.37, 0.02), nx.softmax_row(m, 0.02), atol=1e-9)

    def test_too_small(self):
        with pytest.raises(DomainError):
            L.score_distill_loss(L.PairBatch(*(np.ones((1, 2)),) * 4), 0.02)

    @given(seeds)
    def test_rotation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        sx, sy = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
        tx, ty = rng.standard_normal((4, 5)), rng.standard_normal((4, 5))
        R = rotation(3, rng)
        a = L.score_distill_loss(L.PairBatch(sx, sy, tx, ty), 0.05).item()
        b = L.score_distill_loss(L.PairBatch(sx @ R, sy @ R, tx, ty), 0.05).item()
        assert a >= 0
        assert a == pytest.approx(b, abs=1e-9)
