"""Segmentation-for-classification: threshold the segmented tumor volume."""
import logging
from typing import Tuple

import numpy as np

from evaluation.metrics import select_youden_threshold
from phantoms.phantom import TUMOR

logger = logging.getLogger(__name__)


def tumor_volume(seg_mask: np.ndarray) -> int:
    return int(np.count_nonzero(seg_mask == TUMOR))


def s4c_select_threshold(val_volumes, val_labels) -> float:
    """Volume threshold maximizing sensitivity + specificity on validation cases."""
    threshold = select_youden_threshold(val_volumes, val_labels)
    logger.info("S4C volume threshold %.1f voxels", threshold)
    return threshold


def s4c_classify(seg_mask: np.ndarray, threshold: float) -> Tuple[int, int]:
    """(prediction, tumor voxel count); positive iff the count strictly exceeds `threshold`."""
    volume = tumor_volume(seg_mask)
    return int(volume > threshold), volume


def volume_score(volume: float, threshold: float) -> float:
    """Strictly increasing map of a tumor volume into [0, 1)."""
    return float(volume) / (float(volume) + max(float(threshold), 1.0))


def operating_score(threshold: float) -> float:
    """Score-space image of a volume threshold under `volume_score`."""
    return volume_score(threshold, threshold)
