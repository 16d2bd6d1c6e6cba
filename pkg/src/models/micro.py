"""Float64 micro-models of every preset for end-to-end gradient checks."""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from models.maskformer import LossWeights
from models.params import ModelDims
from models.presets import PRESET_CLASSES, get_preset
from phantoms.phantom import STOMACH, TUMOR
from tensor.core import Tensor, backward, precision
from tensor.gradcheck import grad_check_params
from utils.errors import ConfigError
from utils.rng import generator

logger = logging.getLogger(__name__)

MICRO_EXTENTS = (8, 8, 8)
MICRO_DIMS = ModelDims(n_queries=3, channels=4, heads=2, mlp_hidden=4, base_width=2)
TOLERANCES = {"cimt": 1e-3, "unet-s4c": 1e-4, "unet-joint": 1e-4}
# finite-difference step and the gradient magnitude below which errors are absolute
FD_EPS = 1e-6
FD_FLOOR = 1e-6


@dataclass
class GradCheckReport:
    preset: str
    tolerance: float
    errors: Dict[str, float]
    stop_gradient: Dict[str, float] = field(default_factory=dict)
    deep_supervision: float = 0.0

    @property
    def label(self) -> str:
        return f"{self.preset} (ds {self.deep_supervision:g})" if self.deep_supervision else self.preset

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def failures(self) -> List[str]:
        bad = [n for n, e in self.errors.items() if not e < self.tolerance]
        bad += [n for n, g in self.stop_gradient.items() if g != 0.0]
        return sorted(bad)

    @property
    def passed(self) -> bool:
        return not self.failures


def _is_query_key(name: str) -> bool:
    return name.startswith("decoder.") and (".xattn.q." in name or ".xattn.k." in name)


def micro_case(seed: int):
    """Random float64 input with a small stomach and tumor label cube."""
    rng = generator(seed, "micro-case")
    x = rng.normal(size=(1,) + MICRO_EXTENTS)
    labels = np.zeros(MICRO_EXTENTS, dtype=np.uint8)
    labels[2:6, 2:6, 2:6] = STOMACH
    labels[3:5, 3:5, 2:4] = TUMOR
    return x, labels, 1


def check_preset(name: str, seed: int = 0, max_coords: int = 6, deep_supervision: float = 0.0) -> GradCheckReport:
    """Compare backward() against central differences on a float64 micro-model.

    Without deep supervision every path into the cimt cross-attention
    query/key projections goes through the hard argmax; those gradients must
    come out exactly zero and are left out of the comparison. With
    `deep_supervision` > 0 they are finite-difference checked like every
    other tensor.
    """
    if name not in PRESET_CLASSES:
        raise ConfigError(f"unknown model preset {name!r}; choose from {sorted(PRESET_CLASSES)}")
    if deep_supervision < 0:
        raise ConfigError(f"deep_supervision weight must be >= 0, got {deep_supervision}")
    with precision("float64"):
        model = get_preset(name, MICRO_DIMS)
        params = model.init_params(generator(seed, "micro-init")).astype(np.float64)
        x, labels, label = micro_case(seed)
        weights = LossWeights(deep_supervision=deep_supervision)

        def loss_fn():
            if model.has_classifier:
                return model.loss(Tensor(x), labels, label, params, weights)[0]
            return model.pretrain_loss(Tensor(x), labels, params)[0]

        stop_gradient = {}
        if name == "cimt" and not deep_supervision:
            params.zero_grad()
            backward(loss_fn())
            for pname in filter(_is_query_key, params.names("decoder.")):
                grad = params[pname].grad
                stop_gradient[pname] = 0.0 if grad is None else float(np.abs(grad).max())
            params.zero_grad()

        checked = [n for n in params.trainable_names() if n not in stop_gradient]
        errors = grad_check_params(loss_fn, params, eps=FD_EPS, max_coords=max_coords, seed=seed,
                                   names=checked, floor=FD_FLOOR)
    report = GradCheckReport(preset=name, tolerance=TOLERANCES[name], errors=errors, stop_gradient=stop_gradient,
                             deep_supervision=deep_supervision)
    logger.info("%s gradient check: max rel. err %.2e over %d tensors", report.label, report.max_error, len(errors))
    return report


def check_presets(names: Sequence[str], seed: int = 0, max_coords: int = 6) -> List[GradCheckReport]:
    """One report per preset; cimt gets a second one with deep supervision at its training weight."""
    reports = []
    for name in names:
        reports.append(check_preset(name, seed, max_coords))
        if name == "cimt":
            reports.append(check_preset(name, seed, max_coords, deep_supervision=LossWeights().deep_supervision))
    return reports
