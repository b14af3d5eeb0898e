import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from etdetect.attacks import BackdoorPattern
from etdetect.detector import (THRESHOLD, ClassResult, DetectionReport, TransferMatrix,
                               attempt_seed, detect_multi_class, detect_two_class, estimate_et,
                               mad_anomaly)
from etdetect.nn import Classifier
from etdetect.reveng import ReConfig


def linear_two_class(w, beta):
    w = np.asarray(w, dtype=float)
    return Classifier([np.stack([np.zeros_like(w), w], axis=1)], [np.array([0.0, beta])], "relu")


def bool_matrices(n_min=2, n_max=12):
    return st.integers(n_min, n_max).flatmap(lambda n: arrays(bool, (n, n)))


class TestTransferMatrix:
    def test_hand_example(self):
        T = TransferMatrix([[1, 1, 0],
                            [1, 0, 1],
                            [0, 0, 0]])
        np.testing.assert_allclose(T.p(), [0.5, 1.0, 0.0])
        assert T.et() == pytest.approx(0.5)
        # pairs (0,1) mutual, (0,2) neither, (1,2) one-way
        assert T.pair_counts() == (1, 1, 1)
        assert T.pmt_pnt() == (1 / 3, 1 / 3)

    def test_diagonal_ignored(self):
        assert TransferMatrix(np.eye(4)).et() == 0.0

    @given(bool_matrices())
    def test_mean_p_identity(self, T):
        tm = TransferMatrix(T)
        pmt, pnt = tm.pmt_pnt()
        assert abs(tm.et() - (0.5 + (pmt - pnt) / 2)) <= 1e-12

    @given(bool_matrices())
    def test_pair_counts_partition(self, T):
        M, Nn, O = TransferMatrix(T).pair_counts()
        n = T.shape[0]
        assert M + Nn + O == n * (n - 1) // 2

    @given(bool_matrices())
    def test_symmetric_part_sets_sign(self, T):
        # more mutual than non-transferable pairs <=> ET above 1/2
        tm = TransferMatrix(T)
        M, Nn, _ = tm.pair_counts()
        assert (tm.et() > THRESHOLD) == (M > Nn)

    @pytest.mark.parametrize("bad", [np.zeros((2, 3)), np.zeros((1, 1)), np.zeros(4)])
    def test_shape_checks(self, bad):
        with pytest.raises(ValueError):
            TransferMatrix(bad)


class TestAttemptSeed:
    def test_distinct_and_stable(self):
        seeds = {attempt_seed(0, t, n, k) for t in range(3) for n in range(10) for k in range(10)}
        assert len(seeds) == 300
        assert attempt_seed(5, 1, 2, 3) == attempt_seed(5, 1, 2, 3)


class TestEstimateEt:
    def test_linear_model_sits_at_one_half(self):
        # on a linear model a pattern found for x reaches every x' at most as far from the
        # boundary, so transfers are one-way and ET is close to 1/2
        rng = np.random.default_rng(0)
        w = rng.normal(size=10)
        f = linear_two_class(w, -3.0 * np.linalg.norm(w))
        X = rng.normal(size=(15, 10))
        X = X[f.predict(X) == 0][:12]
        est = estimate_et(f, X, ReConfig(step_size=1e-3, max_iters=20000, init_sigma=0.0,
                                         normalized=True), tau=2)
        assert est.successes.min() > 0
        assert abs(est.et - 0.5) < 0.1
        M, Nn, _ = est.matrix.pair_counts()
        assert M <= 2 and Nn <= 2

    def test_planted_shortcut_gives_full_transfer(self):
        # class 1 is reached by pushing feature 0 past 5; every sample starts near 0 there
        w = np.zeros(4)
        w[0] = 1.0
        f = linear_two_class(w, -5.0)
        X = np.random.default_rng(1).uniform(-0.1, 0.1, size=(8, 4))
        center = np.array([6.0, 0.0, 0.0, 0.0])
        cfg = ReConfig(init_sigma=1e-3, init_center=center, max_iters=10)
        est = estimate_et(f, X, cfg, tau=3)
        assert est.et == 1.0
        assert np.all(est.attempts == 1)  # sets are full after one attempt

    def test_failing_reverse_engineering(self):
        f = linear_two_class([1.0, 0.0], -1e6)
        X = np.zeros((5, 2))
        est = estimate_et(f, X, ReConfig(step_size=1e-3, max_iters=3, normalized=True), tau=3)
        assert est.et == 0.0
        np.testing.assert_array_equal(est.attempts, 3)
        np.testing.assert_array_equal(est.flagged, np.arange(5))
        assert all(c == [0.0, 0.0, 0.0] for c in est.curves)

    def test_attempt_cap(self):
        f = linear_two_class([1.0, 0.0], -1e6)
        est = estimate_et(f, np.zeros((4, 2)), ReConfig(max_iters=2), tau=10, max_attempts=2)
        np.testing.assert_array_equal(est.attempts, 2)

    def test_curves_nondecreasing(self):
        rng = np.random.default_rng(3)
        f = linear_two_class(rng.normal(size=6), -2.0)
        X = rng.normal(size=(30, 6))
        X = X[f.predict(X) == 0][:10]
        est = estimate_et(f, X, ReConfig(step_size=0.01, max_iters=5000, init_sigma=0.5), tau=3)
        for c, n_attempts in zip(est.curves, est.attempts):
            assert len(c) == n_attempts
            assert np.all(np.diff(c) >= 0)
        np.testing.assert_allclose([c[-1] for c in est.curves], est.p)

    def test_seed_reproducible(self):
        rng = np.random.default_rng(4)
        f = linear_two_class(rng.normal(size=6), -2.0)
        X = rng.normal(size=(30, 6))
        X = X[f.predict(X) == 0][:8]
        cfg = ReConfig(step_size=0.01, max_iters=2000, init_sigma=0.5)
        a, b = estimate_et(f, X, cfg, seed=7), estimate_et(f, X, cfg, seed=7)
        np.testing.assert_array_equal(a.matrix.t, b.matrix.t)

    @pytest.mark.parametrize("kw,match", [(dict(tau=0), "tau"), (dict(re_kind="xx"), "kind")])
    def test_argument_checks(self, kw, match):
        f = linear_two_class([1.0], -1.0)
        with pytest.raises(ValueError, match=match):
            estimate_et(f, np.zeros((3, 1)), ReConfig(), **kw)

    def test_needs_two_samples(self):
        with pytest.raises(ValueError, match="two"):
            estimate_et(linear_two_class([1.0], -1.0), np.zeros((1, 1)), ReConfig())

    def test_patch_kind(self):
        w = np.zeros(6)
        w[2] = 10.0
        f = linear_two_class(w, -5.0)
        X = np.random.default_rng(0).uniform(0, 0.2, size=(5, 6))
        est = estimate_et(f, X, ReConfig(max_iters=500), tau=2, re_kind="pr")
        assert est.successes.min() > 0
        assert est.et > THRESHOLD  # the same one-pixel patch moves every sample


class TestDetect:
    def test_two_class_report(self):
        w = np.array([1.0, 0.0, 0.0])
        f = linear_two_class(w, -0.5)
        rng = np.random.default_rng(0)
        D0 = rng.uniform(0, 0.4, size=(6, 3))
        D1 = rng.uniform(0.6, 1.0, size=(6, 3))
        D1[0, 0] = 0.1  # misclassified: dropped from the pool for target 0
        rep = detect_two_class(f, D0, D1, ReConfig(step_size=0.01, max_iters=2000), tau=2, seed=3)
        assert [c.target for c in rep.classes] == [0, 1]
        assert rep.classes[0].n_used == 5 and rep.classes[0].n_dropped == 1
        assert rep.classes[1].n_used == 6 and rep.classes[1].n_dropped == 0
        doc = json.loads(rep.to_json())
        assert doc["attacked"] == rep.attacked and doc["seed"] == 3
        assert {"mutual", "non_transferable", "one_way"} == set(doc["classes"][0]["pair_counts"])

    def test_needs_two_classes(self):
        with pytest.raises(ValueError):
            detect_multi_class(linear_two_class([1.0], 0.0), {0: np.zeros((3, 1))}, ReConfig())

    def test_report_decision(self):
        rep = DetectionReport([ClassResult(0, 0.3, np.zeros(2), 2, 0), ClassResult(1, 0.5, np.zeros(2), 2, 0),
                               ClassResult(2, 0.8, np.zeros(2), 2, 0)])
        assert rep.ba_targets == [2] and rep.attacked and rep.max_et == 0.8
        assert rep.et_of(1) == 0.5  # exactly 1/2 is not flagged


class TestMad:
    def test_matches_scipy_scaled_mad(self):
        vals = {0: 5.0, 1: 5.2, 2: 4.9, 3: 5.1, 4: 1.0, 5: 5.05}
        x = np.array(list(vals.values()))
        score = np.abs(x - np.median(x)) / stats.median_abs_deviation(x, scale="normal")
        expected = {k for k, s, v in zip(vals, score, x) if s > 2 and v < np.median(x)}
        got, degenerate = mad_anomaly(vals, side="low")
        assert got == expected == {4} and not degenerate

    def test_side_matters(self):
        vals = {0: 1.0, 1: 1.1, 2: 0.95, 3: 1.05, 4: 9.0}
        assert mad_anomaly(vals, side="low")[0] == set()
        assert mad_anomaly(vals, side="high")[0] == {4}

    def test_degenerate(self):
        assert mad_anomaly({0: 1.0, 1: 1.0, 2: 1.0, 3: 7.0}) == (set(), True)

    def test_needs_three(self):
        with pytest.raises(ValueError):
            mad_anomaly({0: 1.0, 1: 2.0})

    @settings(max_examples=50)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=20))
    def test_median_class_never_flagged(self, xs):
        vals = dict(enumerate(xs))
        med = np.median(xs)
        for side in ("low", "high"):
            flagged, _ = mad_anomaly(vals, side=side)
            assert all(vals[k] != med for k in flagged)
