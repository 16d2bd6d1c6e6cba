"""Training-time augmentation: random axis flips and a global intensity scale."""
import logging

import numpy as np

from phantoms.phantom import VolumeSample

logger = logging.getLogger(__name__)

INTENSITY_RANGE = 0.1


def flip(sample: VolumeSample, axis: int) -> VolumeSample:
    """Mirror image and labels along spatial axis 0, 1 or 2."""
    return VolumeSample(
        image=np.ascontiguousarray(np.flip(sample.image, axis=axis + 1)),
        labels=np.ascontiguousarray(np.flip(sample.labels, axis=axis)),
        label=sample.label,
        seed=sample.seed,
        id=sample.id,
        meta=sample.meta,
    )


def augment(sample: VolumeSample, rng: np.random.Generator, flips: bool = True,
            intensity: bool = True) -> VolumeSample:
    """Each axis flips with probability 1/2; intensities scale by a factor in [0.9, 1.1].

    With both switches off the sample is returned untouched.
    """
    if not flips and not intensity:
        return sample
    out = sample
    # three flip draws then one scale draw, whatever the switches
    flip_draws = rng.uniform(size=3)
    factor = rng.uniform(1.0 - INTENSITY_RANGE, 1.0 + INTENSITY_RANGE)
    if flips:
        for axis in range(3):
            if flip_draws[axis] < 0.5:
                out = flip(out, axis)
    if intensity:
        out = VolumeSample(image=(out.image * np.float32(factor)).astype(out.image.dtype), labels=out.labels,
                           label=out.label, seed=out.seed, id=out.id, meta=out.meta)
    return out
