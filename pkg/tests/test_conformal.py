import numpy as np
import pytest

from stormtail.conformal import (
    ConformalCalibration,
    avg_set_size,
    calibrate,
    class_conditional_picp,
    conformity_scores,
    force_argmax,
    picp,
    predict_set,
)
from stormtail.errors import ValidationError


def softmax(z, axis=-1):
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


class TestConformityScores:
    def test_definitional_examples(self):
        probs = np.array([[1.0, 0.0, 0.0], [0.2, 0.5, 0.3]])
        labels = np.array([0, 1])
        grouped = conformity_scores(probs, labels, 3)
        assert grouped[0][0] == 0.0       # p_y = 1 -> s = 0
        assert grouped[1][0] == pytest.approx(0.5)
        assert len(grouped[2]) == 0

    def test_uniform_six_classes(self):
        probs = np.full((1, 6), 1 / 6)
        grouped = conformity_scores(probs, np.array([2]), 6)
        assert grouped[2][0] == pytest.approx(5 / 6)

    def test_score_plus_prob_is_one(self, rng):
        probs = softmax(rng.standard_normal((40, 6)))
        labels = rng.integers(0, 6, size=40)
        grouped = conformity_scores(probs, labels, 6)
        flat = np.concatenate([grouped[k] for k in range(6)])
        probs_true = np.concatenate(
            [probs[labels == k, k] for k in range(6)]
        )
        assert np.abs((flat + probs_true) - 1.0).max() < 1e-12

    def test_label_out_of_range(self):
        with pytest.raises(ValidationError):
            conformity_scores(np.full((1, 3), 1 / 3), np.array([3]), 3)

    def test_unnormalized_rejected(self):
        with pytest.raises(ValidationError):
            conformity_scores(np.array([[0.5, 0.2, 0.1]]), np.array([0]), 3)

    def test_grid_layout(self, rng):
        probs = softmax(rng.standard_normal((4, 5, 6)), axis=0)
        labels = rng.integers(0, 4, size=(5, 6))
        grouped = conformity_scores(probs, labels, 4)
        assert sum(len(v) for v in grouped.values()) == 30


class TestCalibrate:
    def test_n19_alpha05_takes_max(self, rng):
        scores = rng.random(19)
        calib = calibrate({0: scores}, 0.05, num_classes=1)
        assert calib.q[0] == scores.max()  # index ceil(0.95*20) = 19

    def test_n1_overflows_to_one(self):
        calib = calibrate({0: np.array([0.3])}, 0.05, num_classes=1)
        assert calib.q[0] == 1.0

    def test_all_equal_scores(self):
        calib = calibrate({0: np.full(50, 0.42)}, 0.1, num_classes=1)
        assert calib.q[0] == pytest.approx(0.42)

    def test_unrepresented_class_conservative(self):
        with pytest.warns(UserWarning, match="unrepresented"):
            calib = calibrate({0: np.array([0.1, 0.2, 0.3])}, 0.1, num_classes=2)
        assert calib.q[1] == 1.0
        assert calib.counts[1] == 0

    def test_order_statistic_index(self):
        # N=9, alpha=0.5 -> index ceil(0.5*10)=5 -> the 5th smallest
        scores = np.arange(1, 10) / 10.0
        calib = calibrate({0: scores}, 0.5, num_classes=1)
        assert calib.q[0] == pytest.approx(0.5)

    def test_threshold_monotone_in_alpha(self, rng):
        scores = {k: rng.random(200) for k in range(4)}
        alphas = (0.02, 0.05, 0.2)
        qs = [calibrate(scores, a, num_classes=4).q for a in alphas]
        assert (qs[0] >= qs[1]).all() and (qs[1] >= qs[2]).all()

    def test_adding_low_score_never_raises_threshold(self, rng):
        for _ in range(50):
            scores = rng.random(rng.integers(5, 60))
            q = calibrate({0: scores}, 0.1, num_classes=1).q[0]
            extra = rng.uniform(0, q)  # a score at or below the threshold
            q2 = calibrate({0: np.append(scores, extra)}, 0.1, num_classes=1).q[0]
            assert q2 <= q


class TestPredictSet:
    def test_q_one_includes_everything(self, rng):
        probs = softmax(rng.standard_normal((10, 6)))
        calib = ConformalCalibration(alpha=0.05, q=np.ones(6), counts=np.ones(6, dtype=int))
        sets = predict_set(probs, calib)
        assert sets.all()
        assert avg_set_size(sets) == 6.0

    def test_hand_case(self):
        probs = np.array([[0.7, 0.2, 0.1]])
        calib = ConformalCalibration(alpha=0.1, q=np.full(3, 0.5), counts=np.ones(3, dtype=int))
        sets = predict_set(probs, calib)
        assert sets.tolist() == [[True, False, False]]

    def test_q_zero_requires_certainty(self):
        probs = np.array([[1.0, 0.0], [0.9, 0.1]])
        calib = ConformalCalibration(alpha=0.1, q=np.zeros(2), counts=np.ones(2, dtype=int))
        sets = predict_set(probs, calib)
        assert sets.tolist() == [[True, False], [False, False]]  # empty sets allowed

    def test_sets_shrink_as_alpha_grows(self, rng):
        scores = {k: rng.random(300) for k in range(5)}
        probs = softmax(rng.standard_normal((200, 5)))
        prev = None
        for alpha in (0.02, 0.1, 0.3):
            sets = predict_set(probs, calibrate(scores, alpha, num_classes=5))
            if prev is not None:
                assert (sets <= prev).all()  # subset relation pixelwise
            prev = sets

    def test_force_argmax(self):
        probs = np.array([[0.9, 0.1]])
        calib = ConformalCalibration(alpha=0.1, q=np.zeros(2), counts=np.ones(2, dtype=int))
        sets = force_argmax(predict_set(probs, calib), probs)
        assert sets.tolist() == [[True, False]]


class TestCoverageMetrics:
    def test_full_sets_cover_everything(self):
        sets = np.ones((8, 4), dtype=bool)
        labels = np.arange(8) % 4
        assert picp(sets, labels) == 1.0
        assert avg_set_size(sets) == 4.0

    def test_argmax_sets(self, rng):
        probs = softmax(rng.standard_normal((30, 6)))
        labels = probs.argmax(axis=1)
        sets = np.zeros((30, 6), dtype=bool)
        sets[np.arange(30), labels] = True
        assert picp(sets, labels) == 1.0
        assert avg_set_size(sets) == 1.0

    def test_hand_built_half_coverage(self):
        sets = np.array([[1, 0], [1, 0], [0, 1], [0, 1]], dtype=bool)
        labels = np.array([0, 1, 0, 1])
        assert picp(sets, labels) == 0.5

    def test_loop_oracle(self, rng):
        probs = softmax(rng.standard_normal((50, 6)))
        labels = rng.integers(0, 6, size=50)
        calib = ConformalCalibration(
            alpha=0.05, q=rng.random(6), counts=np.full(6, 10, dtype=int)
        )
        sets = predict_set(probs, calib)
        hits = 0
        sizes = 0
        for i in range(50):
            members = [k for k in range(6) if 1 - probs[i, k] <= calib.q[k]]
            sizes += len(members)
            hits += labels[i] in members
            assert set(np.flatnonzero(sets[i])) == set(members)
        assert picp(sets, labels) == pytest.approx(hits / 50)
        assert avg_set_size(sets) == pytest.approx(sizes / 50)
        per_class = class_conditional_picp(sets, labels, 6)
        for k in range(6):
            mask = labels == k
            if mask.any():
                want = np.mean([labels[i] in np.flatnonzero(sets[i]) for i in np.flatnonzero(mask)])
                assert per_class[k] == pytest.approx(want)


class TestCoverageGuarantee:
    def test_class_conditional_coverage(self):
        """Exchangeable calibration/test -> coverage >= 1 - alpha - eps."""
        alpha = 0.05
        trials = 20
        coverages = []
        for trial in range(trials):
            rng = np.random.default_rng(100 + trial)
            n_per_class = 600
            logits = rng.standard_normal((6 * 2 * n_per_class, 6)) * 1.5
            labels = np.repeat(np.arange(6), 2 * n_per_class)
            logits[np.arange(labels.size), labels] += rng.gamma(2.0, 1.0, labels.size)
            probs = softmax(logits)
            cal_idx = np.concatenate(
                [np.flatnonzero(labels == k)[:n_per_class] for k in range(6)]
            )
            test_idx = np.setdiff1d(np.arange(labels.size), cal_idx)
            grouped = conformity_scores(probs[cal_idx], labels[cal_idx], 6)
            assert min(len(v) for v in grouped.values()) >= 500
            calib = calibrate(grouped, alpha, num_classes=6)
            sets = predict_set(probs[test_idx], calib)
            per_class = class_conditional_picp(sets, labels[test_idx], 6)
            coverages.append(np.mean([c for c in per_class if c is not None]))
        assert np.mean(coverages) >= 1 - alpha - 0.01
