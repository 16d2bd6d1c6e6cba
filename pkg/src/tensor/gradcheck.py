"""Central finite-difference gradient checks (run in float64)."""
import logging
from typing import Callable, Dict, Optional

import numpy as np

from tensor.core import Tensor, backward, no_grad
from utils.errors import NumericalError

logger = logging.getLogger(__name__)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def _evaluate(f: Callable[[Tensor], Tensor], x: Tensor) -> np.ndarray:
    with no_grad():
        out = f(x).data
    if not np.all(np.isfinite(out)):
        raise NumericalError("grad_check: function produced non-finite output")
    return out


def _central_difference(f, x: Tensor, flat_index: int, eps: float) -> float:
    flat = x.data.reshape(-1)
    original = flat[flat_index]
    flat[flat_index] = original + eps
    plus = _evaluate(f, x)
    flat[flat_index] = original - eps
    minus = _evaluate(f, x)
    flat[flat_index] = original
    # difference elementwise first so untouched outputs cancel exactly
    return float(np.sum(plus - minus) / (2.0 * eps))


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
               max_coords: Optional[int] = None, seed: int = 0) -> float:
    """Max relative error between backward() and central differences of sum(f(x)).

    `x` should be a float64 tensor; it is switched to requires_grad for the
    analytic pass. With `max_coords`, only a random subset of coordinates is
    compared.
    """
    if x.data.dtype != np.float64:
        logger.warning("grad_check on %s data; results are only meaningful in float64", x.data.dtype)
    x.requires_grad = True
    x.grad = None
    out = f(x)
    if not np.all(np.isfinite(out.data)):
        raise NumericalError("grad_check: function produced non-finite output")
    loss = out if out.size == 1 else out.sum()
    backward(loss)
    analytic = np.zeros(x.size) if x.grad is None else x.grad.reshape(-1).astype(np.float64)

    coords = np.arange(x.size)
    if max_coords is not None and x.size > max_coords:
        coords = np.sort(np.random.default_rng(seed).choice(x.size, size=max_coords, replace=False))
    numeric = np.array([_central_difference(f, x, int(i), eps) for i in coords])
    x.grad = None
    if coords.size == 0:
        return 0.0
    return float(relative_error(analytic[coords], numeric).max())


def grad_check_params(loss_fn: Callable[[], Tensor], params, eps: float = 1e-5,
                      max_coords: Optional[int] = 20, seed: int = 0,
                      names=None, floor: float = 1e-8) -> Dict[str, float]:
    """grad_check over every trainable tensor of a ModelParams store.

    `loss_fn` takes no arguments and reads the parameters it needs from
    `params`; returns {name: max relative error}. Analytic gradients are
    computed once for all tensors.
    """
    names = list(names) if names is not None else params.trainable_names()
    params.zero_grad()
    backward(loss_fn())
    errors = {}
    for offset, name in enumerate(names):
        tensor = params[name]
        analytic = (np.zeros(tensor.size) if tensor.grad is None
                    else tensor.grad.reshape(-1).astype(np.float64))
        coords = np.arange(tensor.size)
        if max_coords is not None and tensor.size > max_coords:
            coords = np.sort(np.random.default_rng(seed + offset).choice(tensor.size, max_coords, replace=False))
        numeric = np.array([
            _central_difference(lambda _t: loss_fn(), tensor, int(i), eps) for i in coords
        ])
        errors[name] = float(relative_error(analytic[coords], numeric, floor).max()) if coords.size else 0.0
        logger.debug("grad check %s: %.3e", name, errors[name])
    params.zero_grad()
    return errors
