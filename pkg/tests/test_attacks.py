import numpy as np
import pytest
from hypothesis import given, strategies as st

from etdetect.attacks import (ADDITIVE_PATTERNS, CORNER_SLACK, MARGIN_SLACK, PATTERNS, AttackSpec,
                              BackdoorPattern, PgdConfig, check_dual_patterns, clean_label_poison,
                              embed, eval_acc, eval_asr, make_pattern, patch_side, pgd_untargeted,
                              poison_dataset, poison_multi)
from etdetect.data import LabeledDataset
from etdetect.nn import Classifier, init_classifier, posterior


def gray_domain(n_per_class=30, K=3, side=8, seed=0):
    rng = np.random.default_rng(seed)
    y = np.repeat(np.arange(K), n_per_class)
    return LabeledDataset(rng.uniform(0, 1, size=(len(y), side * side)), y, (side, side), True)


class TestEmbed:
    def test_additive_clamps(self):
        p = BackdoorPattern.additive([0.5, -0.5, 0.1])
        np.testing.assert_allclose(embed([0.8, 0.2, 0.5], p), [1.0, 0.0, 0.6])
        np.testing.assert_allclose(embed([0.8, 0.2, 0.5], p, bounded=False), [1.3, -0.3, 0.6])

    def test_patch_replaces_masked_entries(self):
        p = BackdoorPattern.patch([1, 0, 1], [0.3, 0.9, 0.7])
        np.testing.assert_array_equal(embed([0.1, 0.2, 0.4], p), [0.3, 0.2, 0.7])

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="pattern has"):
            embed(np.zeros(4), BackdoorPattern.additive(np.zeros(3)))

    @given(st.lists(st.floats(0, 1), min_size=6, max_size=6),
           st.lists(st.sampled_from([0.0, 1.0]), min_size=6, max_size=6),
           st.lists(st.floats(0, 1), min_size=6, max_size=6))
    def test_patch_embedding_is_idempotent(self, x, m, u):
        p = BackdoorPattern.patch(m, u)
        once = embed(x, p)
        np.testing.assert_array_equal(embed(once, p), once)

    @given(st.lists(st.floats(-2, 2), min_size=5, max_size=5),
           st.lists(st.floats(0, 1), min_size=5, max_size=5))
    def test_bounded_additive_stays_in_box(self, v, x):
        out = embed(x, BackdoorPattern.additive(v))
        assert out.min() >= 0.0 and out.max() <= 1.0

    @pytest.mark.parametrize("kw", [dict(kind="additive"), dict(kind="patch", m=[0.5], u=[0.1]),
                                    dict(kind="patch", m=[1], u=[1.5]), dict(kind="other")])
    def test_invalid_patterns(self, kw):
        with pytest.raises(ValueError):
            BackdoorPattern(**kw)

    def test_dict_round_trip(self):
        p = make_pattern("noisy_patch", (32, 32, 3), 4)
        q = BackdoorPattern.from_dict(p.to_dict())
        np.testing.assert_array_equal(q.m, p.m)
        np.testing.assert_array_equal(q.u, p.u)
        assert q.meta == p.meta


class TestPatternLibrary:
    @pytest.mark.parametrize("name,value,count", [
        ("chessboard", 3 / 255, 392), ("static", 3 / 255, 196), ("L", 50 / 255, 5),
        ("X", 50 / 255, 5), ("cross", 50 / 255, 5), ("square", 50 / 255, 9),
        ("pixel", 70 / 255, 1), ("chessboard_patch", 5 / 255, 8),
    ])
    def test_gray_magnitudes_and_support(self, name, value, count):
        v = make_pattern(name, (28, 28), 0).v
        np.testing.assert_allclose(v[v != 0], value)
        assert np.count_nonzero(v) == count

    def test_color_pixel_magnitude(self):
        v = make_pattern("pixel", (32, 32, 3), 0).v
        np.testing.assert_allclose(v[v != 0], 50 / 255)
        assert np.count_nonzero(v) == 3

    @pytest.mark.parametrize("name", ["X", "square"])
    def test_single_channel_on_color(self, name):
        p = make_pattern(name, (32, 32, 3), 5)
        img = p.v.reshape(32, 32, 3)
        assert np.count_nonzero(img.sum(axis=(0, 1))) == 1
        assert img[..., p.meta["channel"]].any()

    @pytest.mark.parametrize("name", ["L", "X", "cross", "square", "pixel", "chessboard_patch"])
    @pytest.mark.parametrize("seed", range(8))
    def test_gray_localized_near_corner(self, name, seed):
        img = make_pattern(name, (28, 28), seed).v.reshape(28, 28)
        rows, cols = np.nonzero(img)
        near_row = rows.min() <= CORNER_SLACK or rows.max() >= 27 - CORNER_SLACK
        near_col = cols.min() <= CORNER_SLACK or cols.max() >= 27 - CORNER_SLACK
        assert near_row and near_col

    @pytest.mark.parametrize("side,expected", [(28, 3), (32, 3), (64, 4), (96, 10), (80, 7)])
    def test_patch_side(self, side, expected):
        assert patch_side(side) == expected

    @pytest.mark.parametrize("seed", range(10))
    def test_patch_near_margin(self, seed):
        p = make_pattern("unicolor_patch", (32, 32, 3), seed)
        mask = p.m.reshape(32, 32, 3)[..., 0]
        rows, cols = np.nonzero(mask)
        assert mask.sum() == 9
        assert (rows.min() <= MARGIN_SLACK or rows.max() >= 31 - MARGIN_SLACK
                or cols.min() <= MARGIN_SLACK or cols.max() >= 31 - MARGIN_SLACK)
        np.testing.assert_allclose(p.u.reshape(32, 32, 3)[mask == 1], np.tile(p.meta["color"], (9, 1)))

    @pytest.mark.parametrize("name", PATTERNS)
    def test_seed_determinism(self, name):
        a, b = make_pattern(name, (28, 28), 3), make_pattern(name, (28, 28), 3)
        assert a.to_dict() == b.to_dict()

    def test_unknown_pattern(self):
        with pytest.raises(ValueError, match="unknown pattern"):
            make_pattern("triangle", (28, 28), 0)

    def test_too_small_image(self):
        with pytest.raises(ValueError, match="does not fit"):
            make_pattern("chessboard_patch", (3, 3), 0)


class TestDualCheck:
    def test_same_shape_rejected(self):
        with pytest.raises(ValueError, match="shape"):
            check_dual_patterns(make_pattern("L", (28, 28), 0), make_pattern("L", (28, 28), 1))

    def test_different_shapes_accepted(self):
        check_dual_patterns(make_pattern("L", (28, 28), 0), make_pattern("X", (28, 28), 1))

    def test_close_colors_rejected(self):
        a = make_pattern("unicolor_patch", (32, 32, 3), 0)
        b = BackdoorPattern.patch(a.m, a.u * 0.99, name="unicolor_patch",
                                  color=(np.asarray(a.meta["color"]) * 0.99).tolist())
        with pytest.raises(ValueError, match="apart"):
            check_dual_patterns(a, b)


class TestPoisoning:
    def spec(self, n_poison=12, target=2, **kw):
        return AttackSpec(target, make_pattern("square", (8, 8), 0), n_poison, **kw)

    def test_dirty_label_counts_and_rate(self):
        train = gray_domain()
        poisoned, rep = poison_dataset(train, self.spec(), seed=0)
        assert len(poisoned) == len(train) + 12
        assert rep.inserted_count == 12
        assert rep.poisoning_rate == pytest.approx(12 / 42)
        assert np.all(train.y[rep.source_indices] != 2)
        np.testing.assert_array_equal(poisoned.X[:len(train)], train.X)
        np.testing.assert_array_equal(poisoned.X[len(train):],
                                      embed(train.X[rep.source_indices], self.spec().pattern))
        assert np.all(poisoned.y[len(train):] == 2)

    def test_zero_poison_is_identity(self):
        train = gray_domain()
        poisoned, rep = poison_dataset(train, self.spec(0), seed=0)
        assert poisoned is train and rep.poisoning_rate == 0.0

    def test_source_class_restriction(self):
        _, rep = poison_dataset(gray_domain(), self.spec(source_classes=(0,)), seed=1)
        assert np.all(gray_domain().y[rep.source_indices] == 0)

    def test_not_enough_sources(self):
        with pytest.raises(ValueError, match="source samples"):
            poison_dataset(gray_domain(), self.spec(61), seed=0)

    def test_seeded(self):
        a = poison_dataset(gray_domain(), self.spec(), seed=5)[1].source_indices
        b = poison_dataset(gray_domain(), self.spec(), seed=5)[1].source_indices
        np.testing.assert_array_equal(a, b)

    def test_multi_uses_disjoint_originals(self):
        train = gray_domain()
        s1 = self.spec(20, target=2)
        s2 = AttackSpec(1, make_pattern("X", (8, 8), 1), 20)
        out, reps = poison_multi(train, [s1, s2], seed=0)
        assert len(out) == len(train) + 40
        assert not set(reps[0].source_indices) & set(reps[1].source_indices)
        assert reps[0].poisoning_rate == pytest.approx(20 / 50)
        assert reps[1].poisoning_rate == pytest.approx(20 / 50)

    def test_clean_label_keeps_labels_and_budget(self):
        train = gray_domain()
        f = init_classifier([64, 16, 3], "relu", 0)
        spec = self.spec(10, clean_label=True, pgd=PgdConfig(eps=0.05, steps=5, step_size=0.02))
        out, rep = clean_label_poison(train, spec, f, seed=0)
        new = out.X[len(train):]
        assert np.all(out.y[len(train):] == 2) and np.all(train.y[rep.source_indices] == 2)
        # away from the trigger, copies stay within eps of the original
        off = spec.pattern.v == 0
        assert np.abs(new[:, off] - train.X[rep.source_indices][:, off]).max() <= 0.05 + 1e-12

    def test_clean_label_requires_surrogate(self):
        with pytest.raises(ValueError, match="surrogate"):
            poison_multi(gray_domain(), [self.spec(clean_label=True)], seed=0)


class TestPgd:
    def test_pushes_linear_model_off_label(self):
        W = np.array([[1.0, -1.0]] * 4)
        f = Classifier([W], [np.array([-2.0, 2.0])], "relu")  # boundary at x = 0.5
        X = np.full((3, 4), 0.51)
        Xa = pgd_untargeted(f, X, 0, PgdConfig(eps=0.1, steps=20, step_size=0.01), bounded=False)
        assert np.all(f.predict(Xa) == 1)
        assert np.abs(Xa - X).max() <= 0.1 + 1e-12

    def test_lowers_true_label_posterior(self):
        f = init_classifier([10, 12, 2], "relu", 3)
        X = np.random.default_rng(0).uniform(0, 1, size=(20, 10))
        y = f.predict(X)
        Xa = pgd_untargeted(f, X, y, PgdConfig(eps=0.02, steps=3, step_size=0.005))
        before = posterior(f, X)[np.arange(20), y]
        after = posterior(f, Xa)[np.arange(20), y]
        assert np.all(after <= before + 1e-12)


class TestEval:
    def test_acc_and_asr_on_hand_model(self):
        # class 1 iff first feature > 0.5; the pattern adds 0.6 to it
        f = Classifier([np.array([[0.0, 10.0], [0.0, 0.0]])], [np.array([0.0, -5.0])], "relu")
        test = LabeledDataset([[0.1, 0.0], [0.2, 0.0], [0.9, 0.0], [0.3, 0.0]], [0, 0, 1, 0], (2,), True)
        assert eval_acc(f, test) == 1.0
        spec = AttackSpec(1, BackdoorPattern.additive([0.6, 0.0]), 0)
        assert eval_asr(f, test, spec) == 1.0
        spec = AttackSpec(1, BackdoorPattern.additive([0.25, 0.0]), 0)
        assert eval_asr(f, test, spec) == pytest.approx(1 / 3)

    def test_additive_patterns_listed(self):
        assert set(ADDITIVE_PATTERNS) <= set(PATTERNS)
