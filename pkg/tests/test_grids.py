import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stormtail.errors import ValidationError
from stormtail.grids import RainGrid, ThresholdSchema, classify_values, event_mask

SCHEMA = ThresholdSchema()


def reference_classify_scalar(value, thresholds):
    """Independent oracle: count thresholds at or below the value."""
    label = 0
    for t in thresholds:
        if value >= t:
            label += 1
    return label


class TestClassify:
    def test_zero_is_class_zero(self):
        labels = classify_values(np.zeros((2, 2)), SCHEMA)
        assert (labels == 0).all()

    def test_75mm_is_top_class(self):
        labels = classify_values(np.full((1, 1), 75.0), SCHEMA)
        assert labels[0, 0] == 5

    def test_boundary_20mm_is_class_4(self):
        # boundary-inclusive upward, cross-checked against the scalar oracle
        assert reference_classify_scalar(20.0, SCHEMA.thresholds) == 4
        labels = classify_values(np.full((1, 1), 20.0), SCHEMA)
        assert labels[0, 0] == 4

    def test_matches_scalar_oracle_on_grid(self, rng):
        values = rng.gamma(0.5, 20.0, size=(9, 9))
        values[0, :5] = SCHEMA.thresholds  # hit every boundary exactly
        labels = classify_values(values, SCHEMA)
        for i in range(9):
            for j in range(9):
                assert labels[i, j] == reference_classify_scalar(values[i, j], SCHEMA.thresholds)

    def test_negative_value_rejected_with_pixel(self):
        values = np.zeros((3, 3))
        values[2, 1] = -0.5
        with pytest.raises(ValidationError, match=r"\(2, 1\)"):
            classify_values(values, SCHEMA)

    def test_non_finite_rejected_with_pixel(self):
        values = np.zeros((2, 2))
        values[0, 1] = np.nan
        with pytest.raises(ValidationError, match=r"\(0, 1\)"):
            RainGrid(values=values)


class TestEventMask:
    def test_all_zero_grid(self):
        assert (event_mask(np.zeros((4, 4)), 0.1) == 0).all()

    def test_inclusive_boundary(self):
        assert (event_mask(np.full((3, 3), 10.0), 10.0) == 1).all()

    def test_elementwise_oracle(self):
        grid = np.array([[0.05, 0.2], [10.0, 49.9]])
        expected = (grid >= 10.0).astype(int)  # [[0, 0], [1, 1]]
        assert (event_mask(grid, 10.0) == expected).all()

    def test_bad_threshold(self):
        with pytest.raises(ValidationError):
            event_mask(np.zeros((2, 2)), np.inf)
        with pytest.raises(ValidationError):
            event_mask(np.zeros((2, 2)), -1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_classify_event_mask_consistency(seed):
    """event_mask(rain, t_k) == (classify(rain) >= k+1) for every threshold."""
    values = np.random.default_rng(seed).gamma(0.3, 25.0, size=(8, 8))
    labels = classify_values(values, SCHEMA)
    for k, t in enumerate(SCHEMA.thresholds):
        assert (event_mask(values, t) == (labels >= k + 1)).all()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.0, 100.0))
def test_classify_monotone_in_rainfall(seed, bump):
    rng = np.random.default_rng(seed)
    values = rng.gamma(0.3, 25.0, size=(6, 6))
    base = classify_values(values, SCHEMA)
    i, j = rng.integers(0, 6, size=2)
    bumped = values.copy()
    bumped[i, j] += bump
    assert classify_values(bumped, SCHEMA)[i, j] >= base[i, j]


class TestSchema:
    def test_default_shape(self):
        assert SCHEMA.num_classes == 6
        assert SCHEMA.heavy_classes == frozenset({4, 5})

    def test_rejects_unsorted(self):
        with pytest.raises(ValidationError):
            ThresholdSchema(thresholds=(3.0, 0.1))

    def test_rejects_heavy_out_of_range(self):
        with pytest.raises(ValidationError):
            ThresholdSchema(heavy_classes=frozenset({7}))
