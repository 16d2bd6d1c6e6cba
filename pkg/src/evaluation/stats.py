"""Confidence intervals and paired significance tests."""
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import norm, rankdata

from evaluation.metrics import as_cases
from utils.errors import DataError, StatisticsError, UndefinedMetric
from utils.rng import generator

logger = logging.getLogger(__name__)


@dataclass
class Interval:
    low: float
    point: float
    high: float
    redraws: int = 0

    def to_dict(self):
        return {"low": self.low, "point": self.point, "high": self.high, "redraws": self.redraws}


def _evaluate(metric: Callable, arrays: Sequence[np.ndarray], idx: np.ndarray) -> Optional[float]:
    try:
        value = metric(*(a[idx] for a in arrays))
    except UndefinedMetric:
        return None
    if value is None or not np.isfinite(value):
        return None
    return float(value)


def bootstrap_ci(metric: Callable[..., Optional[float]], cases: Sequence[Sequence], replicas: int = 1000,
                 alpha: float = 0.05, seed: int = 0, strata: Optional[Sequence[int]] = None,
                 max_redraws: Optional[int] = None) -> Interval:
    """Percentile bootstrap over cases.

    `cases` is a tuple of aligned per-case arrays handed to `metric`. Replicas
    on which the metric is undefined are redrawn, at most `max_redraws` times
    in total (default: `replicas`). With `strata`, resampling is done within
    each stratum so every replica keeps the stratum sizes.
    """
    if replicas < 100:
        raise StatisticsError("bootstrap needs at least 100 replicas")
    arrays = [np.asarray(a) for a in cases]
    n = len(arrays[0])
    point = _evaluate(metric, arrays, np.arange(n))
    if point is None:
        raise UndefinedMetric("metric is undefined on the full set of cases")
    cap = replicas if max_redraws is None else max_redraws
    rng = generator(seed, "bootstrap")
    groups = None
    if strata is not None:
        strata = np.asarray(strata)
        groups = [np.flatnonzero(strata == s) for s in np.unique(strata)]

    values = np.empty(replicas)
    redraws = 0
    filled = 0
    while filled < replicas:
        if groups is None:
            idx = rng.integers(0, n, size=n)
        else:
            idx = np.concatenate([g[rng.integers(0, g.size, size=g.size)] for g in groups])
        value = _evaluate(metric, arrays, idx)
        if value is None:
            redraws += 1
            if redraws > cap:
                raise StatisticsError(
                    f"metric undefined on more than {cap} bootstrap replicas; use the stratified bootstrap"
                )
            continue
        values[filled] = value
        filled += 1
    if redraws:
        logger.warning("redrew %d bootstrap replicas with an undefined metric", redraws)
    low, high = np.percentile(values, [100.0 * alpha / 2.0, 100.0 * (1.0 - alpha / 2.0)])
    return Interval(low=float(min(low, point)), point=point, high=float(max(high, point)), redraws=redraws)


# ---------------------------------------------------------------------------
# DeLong


def placement_values(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    """(V10 per positive, V01 per negative) placement values, ties counting half."""
    scores, labels = as_cases(scores, labels)
    pos, neg = scores[labels == 1], scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetric("placement values need both classes")
    all_ranks = rankdata(np.concatenate([pos, neg]))
    v10 = (all_ranks[:pos.size] - rankdata(pos)) / neg.size
    v01 = 1.0 - (all_ranks[pos.size:] - rankdata(neg)) / pos.size
    return v10, v01


@dataclass
class DeLongResult:
    auc_a: float
    auc_b: float
    z: float
    p: float
    zero_variance: bool = False

    def to_dict(self):
        return {"auc_a": self.auc_a, "auc_b": self.auc_b, "z": self.z, "p": self.p,
                "zero_variance": self.zero_variance}


def _cov(rows: np.ndarray) -> np.ndarray:
    if rows.shape[1] < 2:
        return np.zeros((rows.shape[0], rows.shape[0]))
    return np.cov(rows, ddof=1)


def delong_test(scores_a, scores_b, labels) -> DeLongResult:
    """Two-sided DeLong test for the difference of two paired AUCs."""
    scores_a, labels_a = as_cases(scores_a, labels)
    scores_b, _ = as_cases(scores_b, labels)
    if scores_a.shape != scores_b.shape:
        raise DataError("DeLong test needs paired scores on identical cases")
    v10_a, v01_a = placement_values(scores_a, labels_a)
    v10_b, v01_b = placement_values(scores_b, labels_a)
    auc_a, auc_b = float(v10_a.mean()), float(v10_b.mean())
    s10 = _cov(np.vstack([v10_a, v10_b]))
    s01 = _cov(np.vstack([v01_a, v01_b]))
    s = s10 / v10_a.size + s01 / v01_a.size
    var = s[0, 0] + s[1, 1] - 2.0 * s[0, 1]
    diff = auc_a - auc_b
    if var <= 0.0:
        if diff == 0.0:
            logger.warning("DeLong variance is zero and the AUCs are equal; reporting p = 1")
            return DeLongResult(auc_a, auc_b, 0.0, 1.0, zero_variance=True)
        logger.warning("DeLong variance is zero with unequal AUCs; reporting p = 0")
        return DeLongResult(auc_a, auc_b, float(np.copysign(np.inf, diff)), 0.0, zero_variance=True)
    z = diff / np.sqrt(var)
    p = float(2.0 * norm.sf(abs(z)))
    return DeLongResult(auc_a, auc_b, float(z), min(p, 1.0))


# ---------------------------------------------------------------------------
# permutation test


def _correct(preds: np.ndarray, labels: np.ndarray, metric: str) -> Tuple[np.ndarray, np.ndarray]:
    if metric == "sens":
        mask = labels == 1
        return mask, preds[mask] == 1
    if metric == "spec":
        mask = labels == 0
        return mask, preds[mask] == 0
    raise ValueError(f"unknown metric {metric!r}; use 'sens' or 'spec'")


def permutation_test(preds_a, preds_b, labels, metric: str = "sens", replicas: int = 10000,
                     seed: int = 0, chunk: int = 4096) -> float:
    """Paired permutation p-value for a difference in sensitivity or specificity.

    Each replicate swaps the two models' predictions on every case with
    probability 1/2; p = (#{|diff| >= |observed|} + 1) / (replicas + 1).
    """
    preds_a = np.asarray(preds_a).astype(np.int64).reshape(-1)
    preds_b = np.asarray(preds_b).astype(np.int64).reshape(-1)
    labels = np.asarray(labels).astype(np.int64).reshape(-1)
    if not preds_a.shape == preds_b.shape == labels.shape:
        raise DataError("permutation test needs paired predictions on identical cases")
    _, correct_a = _correct(preds_a, labels, metric)
    _, correct_b = _correct(preds_b, labels, metric)
    # per-case contribution to the count difference; a swap flips its sign
    diffs = correct_a.astype(np.int64) - correct_b.astype(np.int64)
    observed = abs(int(diffs.sum()))
    rng = generator(seed, "permutation", metric)
    extreme = 0
    done = 0
    while done < replicas:
        size = min(chunk, replicas - done)
        signs = rng.integers(0, 2, size=(size, diffs.size)) * 2 - 1
        extreme += int(np.count_nonzero(np.abs(signs @ diffs) >= observed))
        done += size
    return (extreme + 1) / (replicas + 1)
