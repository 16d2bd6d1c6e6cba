"""Patient-level ROC metrics and tumor-level localization."""
import logging
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata
from sklearn.metrics import roc_curve

from utils.errors import DataError, ShapeError, UndefinedMetric

logger = logging.getLogger(__name__)

LOCALIZATION_DICE = 0.01


def as_cases(scores: Sequence[float], labels: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise DataError(f"{scores.size} scores but {labels.size} labels")
    if labels.size and not np.isin(labels, (0, 1)).all():
        raise DataError("labels must be 0 or 1")
    if not np.all(np.isfinite(scores)):
        raise DataError("scores must be finite")
    return scores, labels.astype(np.int64)


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(positive outscores negative), ties counting half."""
    scores, labels = as_cases(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric(f"AUC is undefined with {n_pos} positive and {n_neg} negative cases")
    ranks = rankdata(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def sens_spec(scores, labels, threshold: float) -> Tuple[Optional[float], Optional[float]]:
    """(sensitivity, specificity) with positive iff score > threshold; None for an empty class."""
    scores, labels = as_cases(scores, labels)
    predicted = scores > threshold
    pos, neg = labels == 1, labels == 0
    sens = float(predicted[pos].mean()) if pos.any() else None
    spec = float((~predicted[neg]).mean()) if neg.any() else None
    return sens, spec


def sensitivity(scores, labels, threshold: float) -> Optional[float]:
    return sens_spec(scores, labels, threshold)[0]


def specificity(scores, labels, threshold: float) -> Optional[float]:
    return sens_spec(scores, labels, threshold)[1]


def roc_points(scores, labels) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Full (fpr, tpr, threshold) curve; the first threshold admits no case."""
    scores, labels = as_cases(scores, labels)
    if labels.min(initial=1) == labels.max(initial=0):
        raise UndefinedMetric("ROC curve needs both classes")
    fpr, tpr, thresholds = roc_curve(labels, scores, drop_intermediate=False)
    return fpr, tpr, thresholds


def youden_candidates(values: np.ndarray) -> np.ndarray:
    """Midpoints between sorted unique values plus one point above the maximum."""
    unique = np.unique(values)
    return np.concatenate([(unique[:-1] + unique[1:]) / 2.0, [unique[-1] + 0.5]])


def select_youden_threshold(values, labels) -> float:
    """Threshold maximizing sensitivity + specificity (positive iff value > threshold).

    Ties go to the lowest threshold.
    """
    values, labels = as_cases(values, labels)
    if labels.size == 0 or labels.min() == labels.max():
        raise UndefinedMetric("threshold selection needs both classes in the validation cases")
    pos, neg = values[labels == 1], values[labels == 0]
    candidates = youden_candidates(values)
    sens = (pos[None, :] > candidates[:, None]).mean(axis=1)
    spec = (neg[None, :] <= candidates[:, None]).mean(axis=1)
    j = sens + spec
    return float(candidates[int(np.argmax(j))])


def sensitivity_at_specificity(scores, labels, target_spec: float) -> Tuple[Optional[float], Optional[float]]:
    """Highest sensitivity over thresholds whose specificity reaches `target_spec`.

    Returns (sensitivity, threshold), or (None, None) when a class is missing.
    """
    scores, labels = as_cases(scores, labels)
    if labels.size == 0 or labels.min() == labels.max():
        return None, None
    unique = np.unique(scores)
    candidates = np.concatenate([[unique[0] - 1.0], unique])
    pos, neg = scores[labels == 1], scores[labels == 0]
    spec = (neg[None, :] <= candidates[:, None]).mean(axis=1)
    sens = (pos[None, :] > candidates[:, None]).mean(axis=1)
    feasible = np.flatnonzero(spec >= target_spec)
    best = feasible[np.argmax(sens[feasible])]
    return float(sens[best]), float(candidates[best])


def dice_score(pred: np.ndarray, target: np.ndarray) -> float:
    """2|A and B| / (|A| + |B|); two empty masks score 1."""
    if pred.shape != target.shape:
        raise ShapeError(f"mask extents differ: {pred.shape} vs {target.shape}")
    a, b = pred.astype(bool), target.astype(bool)
    size = int(a.sum()) + int(b.sum())
    if size == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / size


def is_localized(dice: float) -> bool:
    return dice > LOCALIZATION_DICE


def localization_hit(pred: np.ndarray, target: np.ndarray, label: Optional[int] = None) -> Tuple[float, bool]:
    """(dice, hit) of a predicted tumor mask against the ground truth.

    When both masks are empty the hit counts only for a normal case; `label`
    defaults to the ground truth (non-empty mask means positive).
    """
    dice = dice_score(pred, target)
    if not pred.any() and not target.any():
        label = int(target.any()) if label is None else int(label)
        return dice, label == 0
    return dice, is_localized(dice)
