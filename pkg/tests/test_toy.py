import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from etdetect.data import LatentDist
from etdetect.toy import (REFERENCE_D1, ToyClassifier, et_closed_form_d1, et_monte_carlo,
                          optimal_perturbation, prototype_classify, quadratic_form,
                          random_latent_dist, simulate_transfer, transfer_condition, verify_table)


def et_by_quadrature(dist: LatentDist) -> float:
    """Independent d = 1 oracle: P(c' lies between 0 and c), integrated over c."""
    if dist.kind == "gaussian":
        law = stats.norm(dist.params["mean"][0], np.sqrt(dist.params["cov"][0, 0]))
        lo, hi = law.ppf(1e-12), law.ppf(1 - 1e-12)
    else:
        lo, hi = dist.params["lo"][0], dist.params["hi"][0]
        law = stats.uniform(lo, hi - lo)
    g0 = law.cdf(0.0)
    val, _ = integrate.quad(lambda c: law.pdf(c) * abs(law.cdf(c) - g0), lo, hi,
                            points=[0.0] if lo < 0 < hi else None, limit=200)
    return val


class TestClassifier:
    def test_class_subspaces(self):
        tc = ToyClassifier.random(5, 2, seed=0)
        c = np.array([0.3, -1.0])
        assert prototype_classify(tc, tc.A @ c) == 0
        assert prototype_classify(tc, tc.B @ np.ones(3)) == 1

    def test_boundary_goes_to_class_one(self):
        tc = ToyClassifier.random(4, 1, seed=1)
        x = tc.A[:, 0] + tc.B[:, 0]
        assert quadratic_form(tc, x) == pytest.approx(0.0, abs=1e-12)
        assert prototype_classify(tc, np.zeros(4)) == 1

    def test_quadratic_form_matches_matrix(self):
        tc = ToyClassifier.random(6, 2, seed=2)
        x = np.random.default_rng(0).normal(size=(10, 6))
        Q = tc.A @ tc.A.T - tc.B @ tc.B.T
        np.testing.assert_allclose(quadratic_form(tc, x), np.einsum("bi,ij,bj->b", x, Q, x), atol=1e-12)


class TestOptimalPerturbation:
    @given(seed=st.integers(0, 10 ** 6))
    @settings(max_examples=50)
    def test_lands_on_boundary_with_expected_norm(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 8))
        d = int(rng.integers(1, n))
        tc = ToyClassifier.random(n, d, seed)
        c = rng.normal(size=d)
        v = optimal_perturbation(tc, c, rng.normal(size=n - d))
        assert quadratic_form(tc, tc.A @ c + v) == pytest.approx(0.0, abs=1e-9 * (1 + c @ c))
        assert np.linalg.norm(v) == pytest.approx(np.linalg.norm(c) / np.sqrt(2), rel=1e-12)

    def test_no_shorter_perturbation_reaches_boundary(self):
        # minimize |v| s.t. q(Ac + v) <= 0 by random search: nothing beats |c|/sqrt(2)
        tc = ToyClassifier.random(3, 1, seed=0)
        c = np.array([1.3])
        rng = np.random.default_rng(0)
        V = rng.normal(size=(200000, 3))
        V *= (np.linalg.norm(c) / np.sqrt(2) * 0.999) / np.linalg.norm(V, axis=1, keepdims=True)
        assert np.all(quadratic_form(tc, tc.A @ c + V) > 0)

    def test_zero_latent_rejected(self):
        with pytest.raises(ValueError):
            optimal_perturbation(ToyClassifier.random(3, 1, 0), [0.0])


class TestTransferCondition:
    def test_d1_interval(self):
        # transfer iff c' lies between 0 and c
        assert transfer_condition(2.0, 1.0) and transfer_condition(2.0, 0.0) and transfer_condition(2.0, 2.0)
        assert not transfer_condition(2.0, 2.1) and not transfer_condition(2.0, -0.1)
        assert transfer_condition(-1.0, -0.5)

    def test_oracle_matches_simulation(self):
        rng = np.random.default_rng(0)
        total = 0
        for k in range(10):
            d = 1 + k % 3
            tc = ToyClassifier.random(d + 2 + k % 2, d, seed=k)
            c, cp = rng.normal(size=(10000, d)), rng.normal(size=(10000, d))
            total += np.sum(transfer_condition(c, cp) != simulate_transfer(tc, c, cp))
        assert total == 0


class TestEt:
    @pytest.mark.parametrize("g0,expected", [(0.0, 0.5), (0.25, 0.3125), (0.5, 0.25), (0.75, 0.3125),
                                             (1.0, 0.5)])
    def test_closed_form_values(self, g0, expected):
        assert et_closed_form_d1(g0) == expected

    @given(st.floats(0, 1))
    def test_closed_form_range(self, g0):
        assert 0.25 <= et_closed_form_d1(g0) <= 0.5

    @pytest.mark.parametrize("name,dist", REFERENCE_D1)
    def test_closed_form_matches_quadrature(self, name, dist):
        assert et_closed_form_d1(dist.cdf_at_zero) == pytest.approx(et_by_quadrature(dist), abs=1e-6)

    def test_reference_laws_span_g0(self):
        np.testing.assert_allclose([d.cdf_at_zero for _, d in REFERENCE_D1], [0, 0.25, 0.5, 0.75, 1])

    def test_monte_carlo_seeded(self):
        dist = REFERENCE_D1[2][1]
        assert et_monte_carlo(dist, 5000, 3) == et_monte_carlo(dist, 5000, 3)

    def test_monte_carlo_batches_consistent(self):
        dist = REFERENCE_D1[1][1]
        p, se = et_monte_carlo(dist, 20000, 1, batch=3000)
        assert abs(p - 0.3125) < 4 * se

    def test_monte_carlo_via_classifier(self):
        tc = ToyClassifier.random(4, 2, seed=5)
        dist = LatentDist.gaussian([0.5, -0.2])
        p_sim, _ = et_monte_carlo(dist, 5000, 7, tc=tc)
        p_cond, _ = et_monte_carlo(dist, 5000, 7)
        assert p_sim == p_cond

    def test_too_few_pairs(self):
        with pytest.raises(ValueError):
            et_monte_carlo(REFERENCE_D1[0][1], 10, 0)

    def test_random_latent_dist_dims(self):
        rng = np.random.default_rng(0)
        for d in (1, 3, 6):
            assert random_latent_dist(d, rng).dim == d

    def test_verify_table_small(self):
        rows = verify_table(n_pairs=20000, seed=0, tol=0.02)
        assert len(rows) == 5 and all(r["pass"] for r in rows)
