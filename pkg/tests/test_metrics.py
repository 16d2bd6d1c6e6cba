import numpy as np
import pytest

from evaluation.metrics import (
    auc,
    dice_score,
    is_localized,
    localization_hit,
    roc_points,
    select_youden_threshold,
    sens_spec,
    sensitivity_at_specificity,
)
from utils.errors import DataError, ShapeError, UndefinedMetric


def _pair_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


class TestAuc:
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_pair_counting(self, seed):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 2, size=40)
        labels[:2] = [0, 1]
        # rounding forces ties
        scores = np.round(rng.normal(size=40) + labels, 1)
        assert auc(scores, labels) == pytest.approx(_pair_auc(scores, labels))

    @pytest.mark.parametrize("seed", range(5))
    def test_invariant_under_monotone_transforms(self, seed):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 2, size=50)
        labels[:2] = [0, 1]
        scores = np.round(rng.normal(size=50) + labels, 1)
        base = auc(scores, labels)
        assert auc(np.exp(scores), labels) == base
        assert auc(3 * scores + 1, labels) == base
        assert auc(-scores, labels) == pytest.approx(1.0 - base)

    def test_perfect_and_inverted(self):
        assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
        assert auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0
        assert auc([0.5] * 4, [0, 1, 0, 1]) == 0.5

    def test_single_class_undefined(self):
        with pytest.raises(UndefinedMetric):
            auc([0.1, 0.2], [1, 1])

    @pytest.mark.parametrize("scores,labels", [
        ([0.1, 0.2], [0, 1, 1]),
        ([0.1, 0.2], [0, 2]),
        ([0.1, np.nan], [0, 1]),
    ])
    def test_bad_inputs(self, scores, labels):
        with pytest.raises(DataError):
            auc(scores, labels)


class TestOperatingPoint:
    def test_strict_threshold(self):
        sens, spec = sens_spec([0.2, 0.5, 0.5, 0.9], [0, 0, 1, 1], threshold=0.5)
        assert sens == 0.5
        assert spec == 1.0

    def test_missing_class_gives_none(self):
        assert sens_spec([0.2, 0.9], [0, 0], 0.5) == (None, 0.5)

    def test_youden_threshold(self):
        # 0.225 and 0.6 tie at sens + spec = 1.5
        assert select_youden_threshold([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.225)

    def test_sensitivity_at_specificity(self):
        scores = [0.1, 0.2, 0.3, 0.4, 0.35, 0.5, 0.6, 0.7]
        labels = [0, 0, 0, 0, 1, 1, 1, 1]
        sens, threshold = sensitivity_at_specificity(scores, labels, 1.0)
        assert sens == 0.75
        assert threshold == 0.4
        sens, _ = sensitivity_at_specificity(scores, labels, 0.75)
        assert sens == 1.0
        assert sensitivity_at_specificity([0.1, 0.2], [1, 1], 0.9) == (None, None)

    def test_roc_points_span_unit_square(self):
        fpr, tpr, _ = roc_points([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
        assert (fpr[0], tpr[0]) == (0.0, 0.0)
        assert (fpr[-1], tpr[-1]) == (1.0, 1.0)
        assert np.all(np.diff(fpr) >= 0)


class TestLocalization:
    def test_dice(self):
        a = np.zeros((4, 4, 4), dtype=bool)
        b = np.zeros((4, 4, 4), dtype=bool)
        a[0, 0, :2] = True
        b[0, 0, 1:3] = True
        assert dice_score(a, b) == pytest.approx(0.5)
        assert dice_score(np.zeros(3), np.zeros(3)) == 1.0

    def test_dice_shape_mismatch(self):
        with pytest.raises(ShapeError):
            dice_score(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_boundary_is_exclusive(self):
        assert not is_localized(0.01)
        assert is_localized(0.0100001)

    def test_one_voxel_overlap_of_large_masks(self):
        pred = np.zeros(10000, dtype=bool)
        target = np.zeros(10000, dtype=bool)
        pred[:100] = True
        target[99:199] = True
        dice, hit = localization_hit(pred, target)
        assert dice == pytest.approx(0.01)
        assert not hit

    def test_empty_masks(self):
        empty = np.zeros((2, 2, 2), dtype=bool)
        assert localization_hit(empty, empty, label=0) == (1.0, True)
        assert localization_hit(empty, empty, label=1) == (1.0, False)
        assert localization_hit(empty, empty) == (1.0, True)

    def test_missed_tumor(self):
        target = np.zeros((2, 2, 2), dtype=bool)
        target[0, 0, 0] = True
        assert localization_hit(np.zeros_like(target), target) == (0.0, False)
