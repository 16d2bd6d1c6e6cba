"""Network-ready cases: normalized, optionally cropped to the stomach ROI, padded to stride 8."""
import logging
from typing import Optional, Tuple

import numpy as np

from models.backbone import STRIDES, RoiBox, crop_roi, normalize_volume, pad_to_multiple, paste_roi, stomach_box
from models.presets import ModelPreset
from models.params import ModelParams
from phantoms.phantom import VolumeSample
from tensor.core import Tensor

logger = logging.getLogger(__name__)


def prepare(sample: VolumeSample, box: Optional[RoiBox] = None) -> VolumeSample:
    """Crop to `box` (if any), normalize, pad; meta['valid_extents'] keeps the unpadded size."""
    if box is not None:
        sample = crop_roi(sample, box)
    image, labels, extents = pad_to_multiple(normalize_volume(sample.image), sample.labels, STRIDES[0])
    meta = dict(sample.meta)
    meta["valid_extents"] = list(extents)
    return VolumeSample(image=image, labels=labels, label=sample.label, seed=sample.seed, id=sample.id, meta=meta)


def prepare_roi(sample: VolumeSample, margin) -> VolumeSample:
    """Case cropped to its ground-truth stomach box."""
    box, _ = stomach_box(sample.labels, margin)
    return prepare(sample, box)


def predict_case(model: ModelPreset, params: ModelParams, case: VolumeSample) -> Tuple[np.ndarray, Optional[float]]:
    """Label volume within the valid extents and P(GC) (None for unet-s4c)."""
    labels, prob = model.predict(Tensor(case.image), params)
    extents = case.meta.get("valid_extents", list(case.labels.shape))
    return np.ascontiguousarray(labels[tuple(slice(0, n) for n in extents)]), prob


def segment_case(model: ModelPreset, params: ModelParams, sample: VolumeSample,
                 box: Optional[RoiBox] = None) -> Tuple[np.ndarray, Optional[float]]:
    """Crop to `box`, predict, and paste the labels back at the box offset (background elsewhere)."""
    labels, prob = predict_case(model, params, prepare(sample, box))
    if box is not None:
        labels = paste_roi(labels, box, sample.extents)
    return labels, prob
