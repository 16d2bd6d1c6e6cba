"""Rectified Adam with per-prefix learning-rate multipliers."""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from models.params import ModelParams

logger = logging.getLogger(__name__)

RECTIFY_MIN_RHO = 4.0


def rho_inf(beta2: float) -> float:
    return 2.0 / (1.0 - beta2) - 1.0


def rho_t(t: int, beta2: float) -> float:
    bt = beta2 ** t
    return rho_inf(beta2) - 2.0 * t * bt / (1.0 - bt)


def rectification(t: int, beta2: float) -> Optional[float]:
    """Variance rectification factor r_t, or None while rho_t <= 4 (momentum-only step)."""
    rho, r_inf = rho_t(t, beta2), rho_inf(beta2)
    if rho <= RECTIFY_MIN_RHO:
        return None
    return math.sqrt((rho - 4.0) * (rho - 2.0) * r_inf / ((r_inf - 4.0) * (r_inf - 2.0) * rho))


def radam_update(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int, lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One RAdam step at step number `t` (1-based); updates param, m and v in place."""
    dtype = param.dtype.type
    m *= dtype(beta1)
    m += dtype(1.0 - beta1) * grad
    v *= dtype(beta2)
    v += dtype(1.0 - beta2) * grad * grad
    m_hat = m / dtype(1.0 - beta1 ** t)
    r = rectification(t, beta2)
    if r is None:
        param -= dtype(lr) * m_hat
    else:
        v_hat = np.sqrt(v / dtype(1.0 - beta2 ** t))
        param -= dtype(lr * r) * m_hat / (v_hat + dtype(eps))


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: Dict[str, int] = field(default_factory=dict)
    skipped: int = 0


class RAdam:
    """Steps every trainable tensor that has a gradient.

    `multipliers` maps name prefixes to learning-rate multipliers; the longest
    matching prefix wins, everything else uses multiplier 1.
    """

    def __init__(self, params: ModelParams, lr: float = 1e-4, betas: Tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, multipliers: Optional[Mapping[str, float]] = None):
        self.params = params
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.multipliers = dict(multipliers or {})
        self.state = OptimizerState()

    def lr_for(self, name: str) -> float:
        best = ""
        for prefix in self.multipliers:
            if name.startswith(prefix) and len(prefix) > len(best):
                best = prefix
        return self.lr * self.multipliers.get(best, 1.0)

    def step(self) -> bool:
        """Apply one update; returns False (and counts a skip) on non-finite gradients."""
        pending = [(n, self.params[n]) for n in self.params.trainable_names() if self.params[n].grad is not None]
        for name, tensor in pending:
            if not np.all(np.isfinite(tensor.grad)):
                self.state.skipped += 1
                logger.warning("non-finite gradient in %s; skipping optimizer step (%d skipped so far)",
                               name, self.state.skipped)
                return False
        for name, tensor in pending:
            if name not in self.state.m:
                self.state.m[name] = np.zeros_like(tensor.data)
                self.state.v[name] = np.zeros_like(tensor.data)
                self.state.t[name] = 0
            self.state.t[name] += 1
            radam_update(tensor.data, tensor.grad.astype(tensor.data.dtype, copy=False),
                         self.state.m[name], self.state.v[name], self.state.t[name],
                         self.lr_for(name), self.beta1, self.beta2, self.eps)
        return True

    def zero_grad(self):
        self.params.zero_grad()

    def state_arrays(self) -> Dict[str, np.ndarray]:
        out = {}
        for name in self.state.m:
            out[f"optim.m.{name}"] = self.state.m[name]
            out[f"optim.v.{name}"] = self.state.v[name]
        return out

    def state_meta(self) -> Dict[str, object]:
        return {"t": dict(self.state.t), "skipped": self.state.skipped}

    def load_state(self, arrays: Mapping[str, np.ndarray], meta: Mapping[str, object]):
        for name, t in dict(meta.get("t", {})).items():
            dtype = self.params[name].data.dtype if name in self.params else np.float32
            self.state.m[name] = np.array(arrays[f"optim.m.{name}"], dtype=dtype)
            self.state.v[name] = np.array(arrays[f"optim.v.{name}"], dtype=dtype)
            self.state.t[name] = int(t)
        self.state.skipped = int(meta.get("skipped", 0))
