"""Cluster-induced mask transformer decoder and its segmentation/classification heads.

Object queries act as cluster centers. Each decoder stage assigns every voxel
of one pyramid level to its highest-scoring center (hard argmax over the
cluster axis, treated as a constant in backward) and adds the summed value
projections of the assigned voxels to the centers, followed by multi-head
self-attention and a feed-forward block, both post-norm. The final centers
produce a soft cluster assignment M over the pixel features; segmentation is
C_K^T M and classification reads the mean center and the per-cluster maximum
assignment logit.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from models.backbone import FeaturePyramid, NUM_CLASSES, init_unet, unet_forward, unet_widths
from models.params import ModelDims, ModelParams, xavier_uniform
from tensor import ops
from tensor.core import Tensor
from utils.errors import ConfigError, DataError, ShapeError

logger = logging.getLogger(__name__)

LOGIT_CLAMP = 10.0
DICE_SMOOTH = 1e-5


@dataclass
class ClusterState:
    centers: Tensor
    per_stage_logits: List[Tensor] = field(default_factory=list)
    stage_extents: List[Tuple[int, int, int]] = field(default_factory=list)


@dataclass
class ClusterAssignment:
    logits: Tensor
    probs: Tensor


@dataclass
class JointPrediction:
    seg_logits: Tensor
    cls_logits: Optional[Tensor]
    extents: Tuple[int, int, int]
    cluster_path: Optional[Tensor] = None
    pixel_path: Optional[Tensor] = None

    def seg_volume(self) -> Tensor:
        return self.seg_logits.reshape((self.seg_logits.shape[0],) + tuple(self.extents))


@dataclass
class LossWeights:
    seg: float = 1.0
    cls: float = 1.0
    deep_supervision: float = 0.25
    final: float = 1.0


# ---------------------------------------------------------------------------
# parameters


def _add_linear(params: ModelParams, rng, name: str, fan_in: int, fan_out: int):
    params.add(f"{name}.w", xavier_uniform(rng, fan_in, fan_out))
    params.add(f"{name}.b", np.zeros(fan_out))


def _add_norm(params: ModelParams, name: str, width: int):
    params.add(f"{name}.w", np.ones(width))
    params.add(f"{name}.b", np.zeros(width))


def init_decoder(params: ModelParams, rng: np.random.Generator, dims: ModelDims,
                 level_channels: Sequence[int]) -> ModelParams:
    """Decoder stages (one per pyramid level), pixel projection and both heads."""
    if dims.n_queries < 2:
        raise ConfigError("n_queries must be >= 2 (cluster-wise argmax is degenerate otherwise)")
    if dims.channels % dims.heads:
        raise ConfigError(f"channels ({dims.channels}) must be divisible by heads ({dims.heads})")
    C, N = dims.channels, dims.n_queries
    params.add("decoder.queries", rng.standard_normal((N, C)) * dims.query_init_std)

    params.add("decoder.pixel.proj.w", xavier_uniform(rng, level_channels[-1], C).T.copy())
    params.add("decoder.pixel.proj.b", np.zeros(C))
    _add_norm(params, "decoder.pixel.norm", C)

    for stage, c_level in enumerate(level_channels):
        base = f"decoder.stage{stage}"
        _add_linear(params, rng, f"{base}.xattn.q", C, C)
        _add_linear(params, rng, f"{base}.xattn.k", c_level, C)
        _add_linear(params, rng, f"{base}.xattn.v", c_level, C)
        _add_linear(params, rng, f"{base}.sattn.qkv", C, 3 * C)
        _add_linear(params, rng, f"{base}.sattn.out", C, C)
        _add_norm(params, f"{base}.sattn.norm", C)
        _add_linear(params, rng, f"{base}.ffn.fc1", C, 2 * C)
        _add_linear(params, rng, f"{base}.ffn.fc2", 2 * C, C)
        _add_norm(params, f"{base}.ffn.norm", C)

    _add_linear(params, rng, "head.ck.fc1", C, C)
    _add_linear(params, rng, "head.ck.fc2", C, NUM_CLASSES)
    _add_norm(params, "head.cls.norm_c", C)
    _add_norm(params, "head.cls.norm_r", N)
    _add_linear(params, rng, "head.cls.fc1", C + N, dims.mlp_hidden)
    _add_linear(params, rng, "head.cls.fc2", dims.mlp_hidden, 2)
    return params


def init_cimt(rng: np.random.Generator, dims: ModelDims, stages: int = 4) -> ModelParams:
    params = init_unet(ModelParams(), rng, prefix="backbone", base_width=dims.base_width)
    widths = unet_widths(params)
    # pyramid channels coarse to fine: bottleneck, then decoder outputs
    level_channels = [widths[3], widths[2], widths[1], widths[0]][-stages:]
    return init_decoder(params, rng, dims, level_channels)


def decoder_stages(params: ModelParams) -> int:
    count = 0
    while f"decoder.stage{count}.xattn.q.w" in params:
        count += 1
    return count


def _linear(x: Tensor, params: ModelParams, name: str) -> Tensor:
    return ops.linear(x, params[f"{name}.w"], params[f"{name}.b"])


def _flatten(level: Tensor) -> Tensor:
    """c x D x H x W -> c x V."""
    return level.reshape(level.shape[0], -1)


# ---------------------------------------------------------------------------
# decoder


def _self_attention(centers: Tensor, params: ModelParams, base: str, heads: int) -> Tensor:
    n, c = centers.shape
    d = c // heads
    qkv = _linear(centers, params, f"{base}.sattn.qkv")
    outputs = []
    for h in range(heads):
        q = qkv[:, h * d:(h + 1) * d]
        k = qkv[:, c + h * d:c + (h + 1) * d]
        v = qkv[:, 2 * c + h * d:2 * c + (h + 1) * d]
        weights = ops.softmax_axis(ops.scale(q @ k.T, 1.0 / math.sqrt(d)), axis=1)
        outputs.append(weights @ v)
    attended = _linear(ops.concat(outputs, axis=1), params, f"{base}.sattn.out")
    return ops.layer_norm(centers + attended, params[f"{base}.sattn.norm.w"], params[f"{base}.sattn.norm.b"], axis=1)


def _feed_forward(centers: Tensor, params: ModelParams, base: str) -> Tensor:
    hidden = ops.gelu(_linear(centers, params, f"{base}.ffn.fc1"))
    out = _linear(hidden, params, f"{base}.ffn.fc2")
    return ops.layer_norm(centers + out, params[f"{base}.ffn.norm.w"], params[f"{base}.ffn.norm.b"], axis=1)


def cross_attention_logits(centers: Tensor, feat: Tensor, params: ModelParams, stage: int,
                           scale: bool = True) -> Tuple[Tensor, Tensor]:
    """Q^c (K^p)^T over the voxels of one level (N x V), and the value projection V^p (V x C)."""
    base = f"decoder.stage{stage}.xattn"
    pixels = _flatten(feat).T
    if pixels.shape[1] != params[f"{base}.k.w"].shape[0]:
        raise ShapeError(f"stage {stage}: feature has {pixels.shape[1]} channels, "
                         f"projection expects {params[f'{base}.k.w'].shape[0]}")
    q = _linear(centers, params, f"{base}.q")
    k = _linear(pixels, params, f"{base}.k")
    v = _linear(pixels, params, f"{base}.v")
    logits = q @ k.T
    if scale:
        logits = ops.scale(logits, 1.0 / math.sqrt(centers.shape[1]))
    return logits, v


def decoder_stage(centers: Tensor, feat: Tensor, params: ModelParams, stage: int,
                  dims: ModelDims) -> Tuple[Tensor, Tensor]:
    """One k-means cross-attention block; returns (updated centers, R_l)."""
    if centers.shape[0] < 2:
        raise ConfigError("decoder_stage needs at least 2 cluster centers")
    base = f"decoder.stage{stage}"
    logits, values = cross_attention_logits(centers, feat, params, stage, dims.scale_attention_logits)
    assignment = ops.hard_assign(logits, axis=0)
    centers = centers + assignment @ values
    centers = _self_attention(centers, params, base, dims.heads)
    centers = _feed_forward(centers, params, base)
    return centers, logits


def run_decoder(pyramid: FeaturePyramid, params: ModelParams, dims: ModelDims) -> ClusterState:
    stages = decoder_stages(params)
    if len(pyramid) != stages:
        raise ConfigError(f"pyramid has {len(pyramid)} levels but the decoder has {stages} stages")
    centers = params["decoder.queries"]
    per_stage = []
    for stage, feat in enumerate(pyramid.levels):
        centers, logits = decoder_stage(centers, feat, params, stage, dims)
        per_stage.append(logits)
    return ClusterState(centers=centers, per_stage_logits=per_stage,
                        stage_extents=[tuple(level.shape[1:]) for level in pyramid.levels])


def pixel_features(finest: Tensor, params: ModelParams) -> Tensor:
    """Project the finest pyramid level to the decoder width: F (C x V)."""
    flat = _flatten(finest)
    feats = params["decoder.pixel.proj.w"] @ flat + params["decoder.pixel.proj.b"].reshape(-1, 1)
    return ops.layer_norm(feats, params["decoder.pixel.norm.w"], params["decoder.pixel.norm.b"], axis=0)


# ---------------------------------------------------------------------------
# heads


def assign(centers: Tensor, features: Tensor) -> ClusterAssignment:
    if centers.ndim != 2 or features.ndim != 2 or centers.shape[1] != features.shape[0]:
        raise ShapeError(f"assign: centers {centers.shape} and features {features.shape} do not match")
    logits = centers @ features
    return ClusterAssignment(logits=logits, probs=ops.softmax_axis(logits, axis=0))


def cluster_classes(centers: Tensor, params: ModelParams) -> Tensor:
    """C_K: N x K class logits per cluster."""
    hidden = ops.gelu(_linear(centers, params, "head.ck.fc1"))
    return _linear(hidden, params, "head.ck.fc2")


def segment(assignment: ClusterAssignment, centers: Tensor, params: ModelParams,
            ck: Optional[Tensor] = None) -> Tensor:
    ck = cluster_classes(centers, params) if ck is None else ck
    return ck.T @ assignment.probs


def classify(state: ClusterState, assignment: ClusterAssignment, params: ModelParams):
    """Two logits from the mean cluster center and the per-cluster max of R.

    Returns (cls_logits, cluster_path, pixel_path).
    """
    cluster_path = ops.mean(state.centers, axis=0)
    pixel_path = ops.pool(assignment.logits, "max", axes=(1,))
    c_norm = ops.layer_norm(cluster_path, params["head.cls.norm_c.w"], params["head.cls.norm_c.b"])
    r_norm = ops.layer_norm(pixel_path, params["head.cls.norm_r.w"], params["head.cls.norm_r.b"])
    joined = ops.concat([c_norm, r_norm], axis=0).reshape(1, -1)
    hidden = ops.relu(_linear(joined, params, "head.cls.fc1"))
    logits = _linear(hidden, params, "head.cls.fc2").reshape(2)
    return logits, cluster_path, pixel_path


def cimt_forward(x: Tensor, params: ModelParams, dims: ModelDims):
    """Full forward pass of one volume; returns (JointPrediction, ClusterState, ClusterAssignment)."""
    pyramid, _ = unet_forward(x, params, prefix="backbone")
    state = run_decoder(pyramid, params, dims)
    assignment = assign(state.centers, pixel_features(pyramid.finest, params))
    seg_logits = segment(assignment, state.centers, params)
    cls_logits, cluster_path, pixel_path = classify(state, assignment, params)
    pred = JointPrediction(
        seg_logits=seg_logits,
        cls_logits=cls_logits,
        extents=tuple(x.shape[1:]),
        cluster_path=cluster_path,
        pixel_path=pixel_path,
    )
    return pred, state, assignment


def permute_clusters(params: ModelParams, perm: Sequence[int]) -> ModelParams:
    """Copy of `params` with cluster indices reordered by `perm`.

    The queries, the pixel-path norm and the pixel-path block of the first
    classifier layer are the only tensors indexed by cluster.
    """
    perm = np.asarray(perm)
    n = params["decoder.queries"].shape[0]
    if sorted(perm.tolist()) != list(range(n)):
        raise ValueError(f"not a permutation of {n} clusters: {perm.tolist()}")
    out = params.copy()
    c = out["head.cls.norm_c.w"].shape[0]
    out["decoder.queries"].data[...] = params["decoder.queries"].data[perm]
    out["head.cls.norm_r.w"].data[...] = params["head.cls.norm_r.w"].data[perm]
    out["head.cls.norm_r.b"].data[...] = params["head.cls.norm_r.b"].data[perm]
    out["head.cls.fc1.w"].data[c:] = params["head.cls.fc1.w"].data[c + perm]
    return out


# ---------------------------------------------------------------------------
# losses


def check_labels(labels: np.ndarray, classes: int = NUM_CLASSES):
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise DataError(f"voxel labels must lie in [0, {classes - 1}], got range "
                        f"[{int(labels.min())}, {int(labels.max())}]")


def one_hot(labels: np.ndarray, classes: int, dtype) -> np.ndarray:
    flat = labels.reshape(-1).astype(np.int64)
    out = np.zeros((classes, flat.size), dtype=dtype)
    out[flat, np.arange(flat.size)] = 1.0
    return out


def soft_dice_loss(probs: Tensor, target: np.ndarray, classes: Optional[Sequence[int]] = None,
                   smooth: float = DICE_SMOOTH) -> Tensor:
    """1 - mean soft Dice over foreground classes; probs and target are K x V."""
    k = probs.shape[0]
    classes = list(range(1, k)) if classes is None else list(classes)
    scores = []
    for c in classes:
        p = probs[c]
        t = target[c]
        inter = ops.sum(p * t)
        denom = ops.sum(p) + float(t.sum())
        scores.append((ops.scale(inter, 2.0) + smooth) / (denom + smooth))
    return 1.0 - ops.scale(ops.concat([s.reshape(1) for s in scores], axis=0).sum(), 1.0 / len(scores))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean CE of K x V logits against V integer labels."""
    logp = ops.log_softmax_axis(logits, axis=0)
    flat = labels.reshape(-1).astype(np.int64)
    picked = logp[flat, np.arange(flat.size)]
    return -ops.mean(picked)


def segmentation_loss(logits: Tensor, labels: np.ndarray) -> Dict[str, Tensor]:
    """CE + soft Dice of K x V logits (clamped to +-10) against a label volume."""
    check_labels(labels, logits.shape[0])
    clamped = ops.clamp(logits, -LOGIT_CLAMP, LOGIT_CLAMP)
    target = one_hot(labels, logits.shape[0], clamped.data.dtype)
    ce = cross_entropy(clamped, labels)
    dice = soft_dice_loss(ops.softmax_axis(clamped, axis=0), target)
    return {"ce": ce, "dice": dice}


def classification_loss(cls_logits: Tensor, label: int) -> Tensor:
    if label not in (0, 1):
        raise DataError(f"patient label must be 0 or 1, got {label!r}")
    clamped = ops.clamp(cls_logits.reshape(2, 1), -LOGIT_CLAMP, LOGIT_CLAMP)
    return cross_entropy(clamped, np.array([label]))


def deep_supervision_logits(state: ClusterState, ck: Tensor) -> List[Tensor]:
    """Per-stage K x V_l maps C_K^T softmax_N(R_l)."""
    return [ck.T @ ops.softmax_axis(r, axis=0) for r in state.per_stage_logits]


def joint_loss(pred: JointPrediction, state: Optional[ClusterState], labels: np.ndarray, label: int,
               weights: LossWeights, ck: Optional[Tensor] = None):
    """Total loss and its components (floats) for one sample.

    Deep supervision runs when both `state` and the final C_K are given.
    """
    check_labels(labels)
    seg = segmentation_loss(pred.seg_logits, labels)
    total = ops.scale(seg["ce"] + seg["dice"], weights.seg * weights.final)
    components = {"seg_ce": seg["ce"].item(), "seg_dice": seg["dice"].item()}

    deep = 0.0
    if state is not None and ck is not None and weights.deep_supervision > 0:
        for maps, extents in zip(deep_supervision_logits(state, ck), state.stage_extents):
            stage_labels = ops.resize_labels(labels, extents)
            terms = segmentation_loss(maps, stage_labels)
            stage_loss = ops.scale(terms["ce"] + terms["dice"], weights.seg * weights.deep_supervision)
            total = total + stage_loss
            deep += stage_loss.item()
    components["deep_supervision"] = deep

    if pred.cls_logits is not None:
        cls = classification_loss(pred.cls_logits, label)
        components["cls_ce"] = cls.item()
        if weights.cls:
            total = total + ops.scale(cls, weights.cls)
    components["total"] = total.item()
    return total, components
