"""Named tensor store shared by every model preset."""
import logging
from dataclasses import dataclass
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from tensor.core import Tensor, default_dtype

logger = logging.getLogger(__name__)


class ModelParams:
    """Ordered {dotted name: Tensor} mapping.

    Names follow `<component>.<block>.<layer>.<w|b>` so prefixes select groups
    (`backbone`, `decoder`, `head`, `localizer`).
    """

    def __init__(self, tensors: Optional[Mapping[str, Tensor]] = None):
        self._tensors: Dict[str, Tensor] = {}
        for name, tensor in (tensors or {}).items():
            self[name] = tensor

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._tensors[name]
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __setitem__(self, name: str, tensor: Tensor):
        if not isinstance(tensor, Tensor):
            tensor = Tensor(tensor, requires_grad=True)
        self._tensors[name] = tensor

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self, prefix: str = "") -> List[str]:
        return [n for n in self._tensors if n.startswith(prefix)]

    def items(self) -> List[Tuple[str, Tensor]]:
        return list(self._tensors.items())

    def has_prefix(self, prefix: str) -> bool:
        return any(n.startswith(prefix) for n in self._tensors)

    def add(self, name: str, data: np.ndarray, trainable: bool = True) -> Tensor:
        tensor = Tensor(data, requires_grad=trainable)
        self._tensors[name] = tensor
        return tensor

    def group(self, prefix: str) -> "ModelParams":
        """View holding the same tensor objects under `prefix`."""
        return ModelParams({n: t for n, t in self._tensors.items() if n.startswith(prefix)})

    def freeze(self, prefix: str = ""):
        for name in self.names(prefix):
            self._tensors[name].requires_grad = False
            self._tensors[name].grad = None

    def unfreeze(self, prefix: str = ""):
        for name in self.names(prefix):
            self._tensors[name].requires_grad = True

    def trainable_names(self) -> List[str]:
        return [n for n, t in self._tensors.items() if t.requires_grad]

    def zero_grad(self):
        for tensor in self._tensors.values():
            tensor.grad = None

    def count(self, prefix: str = "") -> int:
        return int(sum(self._tensors[n].size for n in self.names(prefix)))

    def copy(self) -> "ModelParams":
        return ModelParams({
            n: Tensor(t.data.copy(), requires_grad=t.requires_grad, dtype=t.data.dtype)
            for n, t in self._tensors.items()
        })

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({
            n: Tensor(t.data, requires_grad=t.requires_grad, dtype=dtype) for n, t in self._tensors.items()
        })

    def to_arrays(self, prefix: str = "") -> Dict[str, np.ndarray]:
        return {n: self._tensors[n].data.astype(np.float32) for n in self.names(prefix)}

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], dtype=None) -> "ModelParams":
        dtype = dtype or default_dtype()
        return cls({n: Tensor(np.array(a), requires_grad=True, dtype=dtype) for n, a in arrays.items()})

    def load_arrays(self, arrays: Mapping[str, np.ndarray], prefix: str = ""):
        """Overwrite existing tensors in place; shapes must match."""
        for name in self.names(prefix):
            if name not in arrays:
                raise KeyError(f"missing tensor {name!r}")
            if arrays[name].shape != self._tensors[name].shape:
                raise ValueError(f"{name}: shape {arrays[name].shape} != {self._tensors[name].shape}")
            self._tensors[name].data[...] = arrays[name]

    def rename_prefix(self, old: str, new: str, names: Sequence[str] = None) -> "ModelParams":
        """Copies of tensors under `old` re-keyed to `new`, frozen."""
        out = ModelParams()
        for name in names or self.names(old):
            t = self._tensors[name]
            out[new + name[len(old):]] = Tensor(t.data.copy(), requires_grad=False, dtype=t.data.dtype)
        return out

    def update(self, other: "ModelParams"):
        for name, tensor in other.items():
            self._tensors[name] = tensor


def he_normal(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


@dataclass
class ModelDims:
    n_queries: int = 8
    channels: int = 32
    heads: int = 4
    mlp_hidden: int = 32
    base_width: int = 8
    query_init_std: float = 0.02
    scale_attention_logits: bool = True

    @classmethod
    def from_config(cls, model_cfg) -> "ModelDims":
        return cls(
            n_queries=model_cfg.n_queries,
            channels=model_cfg.channels,
            heads=model_cfg.heads,
            mlp_hidden=model_cfg.mlp_hidden,
            base_width=model_cfg.base_width,
            query_init_std=model_cfg.query_init_std,
            scale_attention_logits=model_cfg.scale_attention_logits,
        )
