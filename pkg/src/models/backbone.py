"""Small 3D U-Net: pixel features for the decoder, stomach localizer and S4C segmenter."""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from models.params import ModelParams, he_normal
from phantoms.phantom import VolumeSample
from tensor import ops
from tensor.core import Tensor, no_grad
from utils.errors import ShapeError

logger = logging.getLogger(__name__)

NUM_CLASSES = 3
LEVELS = 4
STRIDES = (8, 4, 2, 1)


@dataclass
class FeaturePyramid:
    """Decoder inputs ordered coarse to fine."""

    levels: List[Tensor]
    strides: Tuple[int, ...] = STRIDES

    def __post_init__(self):
        if len(self.levels) != len(self.strides):
            raise ShapeError(f"pyramid has {len(self.levels)} levels but {len(self.strides)} strides")
        if any(a <= b for a, b in zip(self.strides, self.strides[1:])):
            raise ShapeError(f"pyramid strides must be strictly decreasing, got {self.strides}")

    @property
    def finest(self) -> Tensor:
        return self.levels[-1]

    @property
    def coarsest(self) -> Tensor:
        return self.levels[0]

    def __len__(self):
        return len(self.levels)


@dataclass
class RoiBox:
    """Axis-aligned voxel box; `low` inclusive, `high` exclusive, (D, H, W) order."""

    low: Tuple[int, int, int]
    high: Tuple[int, int, int]
    margin: Tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        self.low = tuple(int(v) for v in self.low)
        self.high = tuple(int(v) for v in self.high)
        self.margin = tuple(int(v) for v in self.margin)
        if any(h <= l for l, h in zip(self.low, self.high)):
            raise ShapeError(f"empty ROI box {self.low}..{self.high}")

    @classmethod
    def full(cls, extents: Sequence[int]) -> "RoiBox":
        return cls(low=(0, 0, 0), high=tuple(extents))

    @property
    def extents(self) -> Tuple[int, int, int]:
        return tuple(h - l for l, h in zip(self.low, self.high))

    @property
    def slices(self) -> Tuple[slice, slice, slice]:
        return tuple(slice(l, h) for l, h in zip(self.low, self.high))

    def contains_fraction(self, mask: np.ndarray) -> float:
        total = int(np.count_nonzero(mask))
        if total == 0:
            return 1.0
        return int(np.count_nonzero(mask[self.slices])) / total

    def to_dict(self) -> dict:
        return {"low": list(self.low), "high": list(self.high), "margin": list(self.margin)}


def roi_from_mask(mask: np.ndarray, margin: Sequence[int]) -> Optional[RoiBox]:
    """Bounding box of the nonzero voxels grown by `margin` and clamped; None if empty."""
    nz = np.argwhere(mask)
    if nz.size == 0:
        return None
    margin = tuple(int(m) for m in margin)
    low = np.maximum(nz.min(axis=0) - margin, 0)
    high = np.minimum(nz.max(axis=0) + 1 + np.asarray(margin), mask.shape)
    return RoiBox(low=tuple(low), high=tuple(high), margin=margin)


def stomach_box(labels: np.ndarray, margin: Sequence[int]) -> Tuple[RoiBox, bool]:
    """Ground-truth box of classes 1 and 2; falls back to the full volume (flag True) when empty."""
    box = roi_from_mask(labels > 0, margin)
    if box is None:
        logger.warning("empty stomach mask; using the full volume as ROI")
        return RoiBox.full(labels.shape), True
    return box, False


def crop_roi(sample: VolumeSample, box: RoiBox) -> VolumeSample:
    if any(h > n for h, n in zip(box.high, sample.extents)):
        raise ShapeError(f"ROI {box.low}..{box.high} exceeds volume extents {sample.extents}")
    meta = dict(sample.meta)
    meta["roi_offset"] = list(box.low)
    meta["roi_source_extents"] = list(sample.extents)
    return VolumeSample(
        image=np.ascontiguousarray(sample.image[(slice(None),) + box.slices]),
        labels=np.ascontiguousarray(sample.labels[box.slices]),
        label=sample.label,
        seed=sample.seed,
        id=sample.id,
        meta=meta,
    )


def paste_roi(pred: np.ndarray, box: RoiBox, extents: Sequence[int], fill=0) -> np.ndarray:
    """Place a prediction over the box back into a volume of `extents` (leading axes kept)."""
    lead = pred.shape[:-3]
    out = np.full(tuple(lead) + tuple(extents), fill, dtype=pred.dtype)
    out[(Ellipsis,) + box.slices] = pred[(Ellipsis,) + tuple(slice(0, e) for e in box.extents)]
    return out


def pad_to_multiple(image: np.ndarray, labels: Optional[np.ndarray] = None, multiple: int = 8):
    """Zero-pad the high end of each spatial axis up to a multiple of `multiple`.

    Returns (image, labels, original extents); labels may be None.
    """
    extents = image.shape[-3:]
    pad = [(-n) % multiple for n in extents]
    if not any(pad):
        return image, labels, tuple(extents)
    width = [(0, 0)] * (image.ndim - 3) + [(0, p) for p in pad]
    image = np.pad(image, width)
    if labels is not None:
        labels = np.pad(labels, [(0, p) for p in pad])
    return image, labels, tuple(extents)


def normalize_volume(x: Union[Tensor, np.ndarray]) -> Union[Tensor, np.ndarray]:
    """Zero mean, unit (population) variance; constant volumes map to zeros."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if data.size == 0:
        raise ShapeError("normalize_volume needs a non-empty volume")
    work = data.astype(np.float64)
    std = work.std()
    out = np.zeros_like(work) if std < 1e-8 else (work - work.mean()) / std
    out = out.astype(data.dtype if np.issubdtype(data.dtype, np.floating) else np.float32)
    return Tensor(out, dtype=out.dtype) if isinstance(x, Tensor) else out


# ---------------------------------------------------------------------------
# network


def _widths(base_width: int) -> List[int]:
    return [base_width * 2 ** level for level in range(LEVELS)]


def _add_conv(params: ModelParams, rng, name: str, c_in: int, c_out: int, k: int):
    params.add(f"{name}.w", he_normal(rng, (c_out, c_in, k, k, k), fan_in=c_in * k ** 3))
    params.add(f"{name}.b", np.zeros(c_out))


def _add_norm(params: ModelParams, name: str, channels: int):
    params.add(f"{name}.w", np.ones(channels))
    params.add(f"{name}.b", np.zeros(channels))


def init_unet(params: ModelParams, rng: np.random.Generator, prefix: str = "backbone",
              base_width: int = 8, in_channels: int = 1, classes: int = NUM_CLASSES) -> ModelParams:
    widths = _widths(base_width)
    c_in = in_channels
    for level, width in enumerate(widths):
        _add_conv(params, rng, f"{prefix}.enc{level}.conv1", c_in, width, 3)
        _add_norm(params, f"{prefix}.enc{level}.norm1", width)
        _add_conv(params, rng, f"{prefix}.enc{level}.conv2", width, width, 3)
        _add_norm(params, f"{prefix}.enc{level}.norm2", width)
        c_in = width
    for level in reversed(range(LEVELS - 1)):
        _add_conv(params, rng, f"{prefix}.dec{level}.conv1", widths[level + 1] + widths[level], widths[level], 3)
        _add_norm(params, f"{prefix}.dec{level}.norm1", widths[level])
    _add_conv(params, rng, f"{prefix}.head.conv", widths[0], classes, 1)
    return params


def unet_widths(params: ModelParams, prefix: str = "backbone") -> List[int]:
    return [params[f"{prefix}.enc{level}.conv1.w"].shape[0] for level in range(LEVELS)]


def _conv_block(x: Tensor, params: ModelParams, name: str, norm: str) -> Tensor:
    w, b = params[f"{name}.w"], params[f"{name}.b"]
    pad = w.shape[2] // 2
    y = ops.conv3(x, w, stride=1, pad=pad) + b.reshape(-1, 1, 1, 1)
    y = ops.layer_norm(y, params[f"{norm}.w"], params[f"{norm}.b"], axis=0)
    return ops.relu(y)


def check_extents(extents: Sequence[int]):
    coarsest = STRIDES[0]
    if any(n % coarsest for n in extents):
        raise ShapeError(
            f"input extents {tuple(extents)} must be divisible by {coarsest}; pad with pad_to_multiple() first"
        )


def unet_forward(x: Tensor, params: ModelParams, prefix: str = "backbone") -> Tuple[FeaturePyramid, Tensor]:
    """Encode/decode one 1 x D x H x W volume into a pyramid and K x D x H x W logits."""
    if x.ndim != 4:
        raise ShapeError(f"unet_forward expects a C x D x H x W volume, got {x.shape}")
    check_extents(x.shape[1:])

    skips = []
    h = x
    for level in range(LEVELS):
        if level:
            h = ops.pool(h, "max", window=2, stride=2)
        h = _conv_block(h, params, f"{prefix}.enc{level}.conv1", f"{prefix}.enc{level}.norm1")
        h = _conv_block(h, params, f"{prefix}.enc{level}.conv2", f"{prefix}.enc{level}.norm2")
        skips.append(h)

    levels = [skips[-1]]
    for level in reversed(range(LEVELS - 1)):
        skip = skips[level]
        up = ops.interpolate_nearest(h, skip.shape[1:])
        h = _conv_block(ops.concat([up, skip], axis=0), params,
                        f"{prefix}.dec{level}.conv1", f"{prefix}.dec{level}.norm1")
        levels.append(h)

    head_w, head_b = params[f"{prefix}.head.conv.w"], params[f"{prefix}.head.conv.b"]
    logits = ops.conv3(h, head_w) + head_b.reshape(-1, 1, 1, 1)
    return FeaturePyramid(levels=levels), logits


def segment_volume(image: np.ndarray, params: ModelParams, prefix: str = "backbone") -> np.ndarray:
    """Argmax labels of a normalized 1 x D x H x W image of any extents."""
    padded, _, extents = pad_to_multiple(image)
    with no_grad():
        _, logits = unet_forward(Tensor(padded), params, prefix=prefix)
    labels = logits.data.argmax(axis=0).astype(np.uint8)
    return np.ascontiguousarray(labels[tuple(slice(0, n) for n in extents)])


def locate_stomach(image: np.ndarray, params: Optional[ModelParams], margin: Sequence[int],
                   prefix: str = "localizer", oracle_labels: Optional[np.ndarray] = None) -> Tuple[RoiBox, bool]:
    """ROI of predicted stomach or tumor voxels plus `margin`.

    With `oracle_labels` the prediction is bypassed and the ground-truth box is
    returned. The flag is True when nothing was found and the full volume is used.
    """
    if oracle_labels is not None:
        return stomach_box(oracle_labels, margin)
    predicted = segment_volume(normalize_volume(image), params, prefix=prefix)
    box = roi_from_mask(predicted > 0, margin)
    if box is None:
        logger.warning("localizer found no stomach voxels; using the full volume as ROI")
        return RoiBox.full(image.shape[-3:]), True
    return box, False
