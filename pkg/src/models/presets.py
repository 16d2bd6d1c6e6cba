"""The three trainable model presets: cimt, unet-s4c and unet-joint."""
import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from models.backbone import NUM_CLASSES, init_unet, unet_forward
from models.maskformer import (
    ClusterState,
    JointPrediction,
    LossWeights,
    cimt_forward,
    cluster_classes,
    init_cimt,
    joint_loss,
    segmentation_loss,
)
from models.params import ModelDims, ModelParams, xavier_uniform
from tensor import ops
from tensor.core import Tensor, no_grad
from utils.errors import CheckpointMismatch, ConfigError

logger = logging.getLogger(__name__)


@dataclass
class ForwardResult:
    pred: JointPrediction
    state: Optional[ClusterState] = None
    ck: Optional[Tensor] = None


class ModelPreset:
    """Shared surface used by the trainer, evaluation and gradient checks."""

    name = ""
    has_classifier = True
    # tensor prefixes that must be present in a checkpoint of this preset
    required_prefixes: Tuple[str, ...] = ("backbone.",)

    def __init__(self, dims: ModelDims):
        self.dims = dims

    def init_params(self, rng: np.random.Generator) -> ModelParams:
        raise NotImplementedError

    def forward(self, x: Tensor, params: ModelParams) -> ForwardResult:
        raise NotImplementedError

    def loss(self, x: Tensor, labels: np.ndarray, label: int, params: ModelParams,
             weights: LossWeights) -> Tuple[Tensor, Dict[str, float]]:
        out = self.forward(x, params)
        return joint_loss(out.pred, out.state, labels, label, weights, ck=out.ck)

    def pretrain_loss(self, x: Tensor, labels: np.ndarray, params: ModelParams,
                      prefix: str = "backbone") -> Tuple[Tensor, Dict[str, float]]:
        """Segmentation-only loss of the plain UNet under `prefix`."""
        _, logits = unet_forward(x, params, prefix=prefix)
        terms = segmentation_loss(logits.reshape(NUM_CLASSES, -1), labels)
        total = terms["ce"] + terms["dice"]
        return total, {"seg_ce": terms["ce"].item(), "seg_dice": terms["dice"].item(), "total": total.item()}

    def predict(self, x: Tensor, params: ModelParams) -> Tuple[np.ndarray, Optional[float]]:
        """Argmax label volume and, for classifying presets, P(GC)."""
        with no_grad():
            out = self.forward(x, params)
        labels = out.pred.seg_volume().data.argmax(axis=0).astype(np.uint8)
        if out.pred.cls_logits is None:
            return labels, None
        with no_grad():
            prob = ops.softmax_axis(out.pred.cls_logits, axis=0).data[1]
        return labels, float(prob)

    def check_checkpoint(self, names):
        for prefix in self.required_prefixes:
            if not any(n.startswith(prefix) for n in names):
                raise CheckpointMismatch(f"checkpoint has no {prefix}* tensors required by preset {self.name!r}")


class CimtModel(ModelPreset):
    name = "cimt"
    required_prefixes = ("backbone.", "decoder.", "head.ck.", "head.cls.", "localizer.")

    def __init__(self, dims: ModelDims, stages: int = 4):
        super().__init__(dims)
        self.stages = stages

    def init_params(self, rng):
        return init_cimt(rng, self.dims, stages=self.stages)

    def forward(self, x, params):
        pred, state, _ = cimt_forward(x, params, self.dims)
        return ForwardResult(pred=pred, state=state, ck=cluster_classes(state.centers, params))


class S4CModel(ModelPreset):
    """Plain UNet; a case is positive when its segmented tumor volume exceeds a threshold."""

    name = "unet-s4c"
    has_classifier = False

    def init_params(self, rng):
        return init_unet(ModelParams(), rng, prefix="backbone", base_width=self.dims.base_width)

    def forward(self, x, params):
        _, logits = unet_forward(x, params, prefix="backbone")
        pred = JointPrediction(seg_logits=logits.reshape(NUM_CLASSES, -1), cls_logits=None,
                               extents=tuple(x.shape[1:]))
        return ForwardResult(pred=pred)

    def check_checkpoint(self, names):
        super().check_checkpoint(names)
        if any(n.startswith("decoder.") for n in names):
            raise CheckpointMismatch("checkpoint carries decoder tensors; it is not a unet-s4c checkpoint")


class JointModel(ModelPreset):
    """UNet with a CNN classification head on the globally averaged bottleneck."""

    name = "unet-joint"
    required_prefixes = ("backbone.", "head.joint.", "localizer.")

    def init_params(self, rng):
        params = init_unet(ModelParams(), rng, prefix="backbone", base_width=self.dims.base_width)
        bottleneck = params["backbone.enc3.conv2.w"].shape[0]
        params.add("head.joint.fc1.w", xavier_uniform(rng, bottleneck, self.dims.mlp_hidden))
        params.add("head.joint.fc1.b", np.zeros(self.dims.mlp_hidden))
        params.add("head.joint.fc2.w", xavier_uniform(rng, self.dims.mlp_hidden, 2))
        params.add("head.joint.fc2.b", np.zeros(2))
        return params

    def forward(self, x, params):
        pyramid, logits = unet_forward(x, params, prefix="backbone")
        pooled = ops.pool(pyramid.coarsest, "avg").reshape(1, -1)
        hidden = ops.relu(ops.linear(pooled, params["head.joint.fc1.w"], params["head.joint.fc1.b"]))
        cls_logits = ops.linear(hidden, params["head.joint.fc2.w"], params["head.joint.fc2.b"]).reshape(2)
        pred = JointPrediction(seg_logits=logits.reshape(NUM_CLASSES, -1), cls_logits=cls_logits,
                               extents=tuple(x.shape[1:]))
        return ForwardResult(pred=pred)


PRESET_CLASSES = {cls.name: cls for cls in (CimtModel, S4CModel, JointModel)}


def get_preset(name: str, dims: ModelDims) -> ModelPreset:
    try:
        return PRESET_CLASSES[name](dims)
    except KeyError:
        raise ConfigError(f"unknown model preset {name!r}; choose from {sorted(PRESET_CLASSES)}") from None
