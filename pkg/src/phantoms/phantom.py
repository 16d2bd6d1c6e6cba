"""Procedural stomach phantoms with optional low-contrast wall tumors.

Each phantom is an ellipsoidal stomach shell (random pose, wall thickness and
smooth deformation) around a lumen of random intensity, optionally holding a
bright content blob that mimics the tumor. Positive phantoms carry a tumor:
a patch of wall plus a localized wall thickening, shifted in intensity by
`contrast_delta` wall standard deviations.

Every random draw comes from a counter-based stream keyed by the sample seed
and a purpose tag, so identical (seed, config) pairs give identical samples and
changing one knob (e.g. contrast) leaves all other draws unchanged.
"""
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from utils.errors import ConfigError
from utils.rng import generator

logger = logging.getLogger(__name__)

BACKGROUND, STOMACH, TUMOR = 0, 1, 2
MIN_EXTENT = 16
WALL_LEVEL = 1.0


@dataclass
class DifficultyConfig:
    contrast_delta: float = 3.0
    deform_amp: float = 0.1
    noise_std: float = 0.05
    lumen_content_prob: float = 0.2
    tumor_prob: float = 0.5
    wall_std: float = 0.25
    tumor_fraction: Tuple[float, float] = (0.02, 0.15)
    anisotropy: float = 1.0
    name: str = "custom"

    def validate(self) -> "DifficultyConfig":
        if self.contrast_delta < 0:
            raise ConfigError("difficulty.contrast_delta must be >= 0")
        for key in ("lumen_content_prob", "tumor_prob"):
            if not 0.0 <= getattr(self, key) <= 1.0:
                raise ConfigError(f"difficulty.{key} must lie in [0, 1]")
        if self.deform_amp < 0 or self.noise_std < 0 or self.wall_std <= 0:
            raise ConfigError("difficulty.deform_amp/noise_std must be >= 0 and wall_std > 0")
        low, high = self.tumor_fraction
        if not 0.0 < low <= high <= 1.0:
            raise ConfigError("difficulty.tumor_fraction must satisfy 0 < low <= high <= 1")
        if self.anisotropy <= 0:
            raise ConfigError("difficulty.anisotropy must be > 0")
        return self

    def to_dict(self) -> Dict[str, Any]:
        out = dataclasses.asdict(self)
        out["tumor_fraction"] = list(self.tumor_fraction)
        return out

    @classmethod
    def resolve(cls, spec: Union[str, Dict[str, Any], "DifficultyConfig"]) -> "DifficultyConfig":
        """Build from a preset name, or an object of overrides (optionally on top of `preset`)."""
        if isinstance(spec, DifficultyConfig):
            return spec.validate()
        if isinstance(spec, str):
            if spec not in DIFFICULTY_PRESETS:
                raise ConfigError(f"unknown difficulty preset {spec!r}; choose from {sorted(DIFFICULTY_PRESETS)}")
            return dataclasses.replace(DIFFICULTY_PRESETS[spec]).validate()
        overrides = dict(spec)
        base = overrides.pop("preset", None)
        cfg = cls.resolve(base) if base is not None else cls()
        known = {f.name for f in dataclasses.fields(cls)}
        for key, value in overrides.items():
            if key not in known:
                raise ConfigError(f"unknown config key: data.difficulty.{key}")
            if key == "tumor_fraction":
                value = tuple(float(v) for v in value)
            setattr(cfg, key, value)
        if base is None and "name" not in overrides:
            cfg.name = "custom"
        return cfg.validate()


DIFFICULTY_PRESETS = {
    "easy": DifficultyConfig(contrast_delta=3.0, deform_amp=0.1, noise_std=0.05, lumen_content_prob=0.2, name="easy"),
    "hard": DifficultyConfig(contrast_delta=0.75, deform_amp=0.2, noise_std=0.1, lumen_content_prob=0.4, name="hard"),
}


@dataclass
class VolumeSample:
    """One case: image X (1 x D x H x W), labels Y (D x H x W) and patient label P."""

    image: np.ndarray
    labels: np.ndarray
    label: int
    seed: int = 0
    id: str = ""
    meta: Dict[str, Any] = field(default_factory=dict)

    @property
    def extents(self) -> Tuple[int, int, int]:
        return tuple(self.labels.shape)

    @property
    def tumor_voxels(self) -> int:
        return int(np.count_nonzero(self.labels == TUMOR))


@dataclass
class PhantomGeometry:
    wall: np.ndarray
    lumen: np.ndarray
    tumor: np.ndarray
    content: np.ndarray

    @property
    def stomach(self) -> np.ndarray:
        return self.wall | self.lumen | self.tumor


def _check_extents(extents: Sequence[int]) -> Tuple[int, int, int]:
    extents = tuple(int(e) for e in extents)
    if len(extents) != 3 or min(extents) < MIN_EXTENT:
        raise ConfigError(f"phantom extents must be three values >= {MIN_EXTENT} to fit a stomach shell, got {extents}")
    return extents


def _smooth_field(rng: np.random.Generator, extents, sigma: float) -> np.ndarray:
    noise = ndimage.gaussian_filter(rng.standard_normal(extents), sigma=sigma, mode="wrap")
    peak = np.abs(noise).max()
    return noise / peak if peak > 0 else noise


def _unit_texture(rng: np.random.Generator, extents) -> np.ndarray:
    tex = ndimage.gaussian_filter(rng.standard_normal(extents), sigma=0.7)
    return (tex - tex.mean()) / (tex.std() + 1e-12)


def phantom_geometry(seed: int, cfg: DifficultyConfig, extents: Sequence[int],
                     positive: Optional[bool] = None) -> Tuple[PhantomGeometry, Dict[str, Any]]:
    """Masks of one phantom; `positive=None` draws the tumor with cfg.tumor_prob."""
    extents = _check_extents(extents)
    shape_rng = generator(seed, "shape")
    ext = np.asarray(extents, dtype=np.float64)

    center = ext / 2.0 + shape_rng.uniform(-0.08, 0.08, size=3) * ext
    radii = shape_rng.uniform(0.22, 0.32, size=3) * ext
    thickness = shape_rng.uniform(1.5, 2.5)
    rotation = Rotation.from_euler("zyx", shape_rng.uniform(-math.pi / 6, math.pi / 6, size=3)).as_matrix()

    grid = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in extents], indexing="ij"), axis=-1)
    offset = grid - center
    offset[..., 0] *= cfg.anisotropy
    local = offset @ rotation
    rho = np.sqrt(((local / radii) ** 2).sum(axis=-1))
    rho = rho * (1.0 + cfg.deform_amp * _smooth_field(shape_rng, extents, sigma=min(extents) / 6.0))

    inner = 1.0 - thickness / radii.mean()
    stomach = rho <= 1.0
    lumen = rho <= inner
    wall = stomach & ~lumen

    content = np.zeros(extents, dtype=bool)
    if cfg.lumen_content_prob > 0 and shape_rng.uniform() < cfg.lumen_content_prob and lumen.any():
        spot = np.argwhere(lumen)[shape_rng.integers(len(np.argwhere(lumen)))]
        blob_radius = shape_rng.uniform(1.5, 3.0)
        content = lumen & (np.linalg.norm(grid - spot, axis=-1) <= blob_radius)

    tumor_rng = generator(seed, "tumor")
    if positive is None:
        positive = bool(generator(seed, "label").uniform() < cfg.tumor_prob)
    tumor = np.zeros(extents, dtype=bool)
    meta: Dict[str, Any] = {"tumor_radius_equiv": 0.0, "tumor_wall_fraction": 0.0}
    if positive and wall.any():
        wall_idx = np.argwhere(wall)
        origin = wall_idx[tumor_rng.integers(len(wall_idx))]
        low, high = cfg.tumor_fraction
        fraction = math.exp(tumor_rng.uniform(math.log(low), math.log(high)))
        n_wall = max(4, int(round(fraction * len(wall_idx))))
        dist_wall = np.linalg.norm(wall_idx - origin, axis=1)
        chosen = wall_idx[np.argsort(dist_wall, kind="stable")[:n_wall]]
        tumor[tuple(chosen.T)] = True
        reach = float(np.sort(dist_wall, kind="stable")[n_wall - 1])
        # localized thickening into the lumen, at most two voxels from the wall
        near_wall = ndimage.distance_transform_edt(~wall) <= 2.0
        bump = lumen & near_wall & (np.linalg.norm(grid - origin, axis=-1) <= tumor_rng.uniform(0.6, 0.9) * reach)
        tumor |= bump
        n_tumor = int(tumor.sum())
        meta["tumor_radius_equiv"] = float((3.0 * n_tumor / (4.0 * math.pi)) ** (1.0 / 3.0))
        meta["tumor_wall_fraction"] = float(n_wall / len(wall_idx))

    geometry = PhantomGeometry(wall=wall, lumen=lumen & ~tumor, tumor=tumor, content=content & ~tumor)
    return geometry, meta


def generate_sample(seed: int, cfg: DifficultyConfig, extents: Sequence[int] = (32, 32, 32),
                    positive: Optional[bool] = None, sample_id: str = "") -> VolumeSample:
    """Render one phantom volume and its labels."""
    cfg = DifficultyConfig.resolve(cfg)
    extents = _check_extents(extents)
    geometry, meta = phantom_geometry(seed, cfg, extents, positive=positive)
    tex_rng = generator(seed, "texture")

    image = 0.1 * _smooth_field(tex_rng, extents, sigma=2.0)
    lumen_level = tex_rng.uniform(0.2, 0.6)
    image[geometry.lumen] = lumen_level
    content_level = WALL_LEVEL + cfg.wall_std * cfg.contrast_delta * tex_rng.uniform(0.5, 1.2)
    image[geometry.content] = content_level
    wall_texture = WALL_LEVEL + cfg.wall_std * _unit_texture(tex_rng, extents)
    tissue = geometry.wall | geometry.tumor
    image[tissue] = wall_texture[tissue]
    image[geometry.tumor] += cfg.contrast_delta * cfg.wall_std
    image += cfg.noise_std * tex_rng.standard_normal(extents)

    labels = np.zeros(extents, dtype=np.uint8)
    labels[geometry.stomach] = STOMACH
    labels[geometry.tumor] = TUMOR
    label = int(geometry.tumor.any())
    meta.update({
        "difficulty": cfg.name,
        "spacing": "iso-1.0" if cfg.anisotropy == 1.0 else f"aniso-{cfg.anisotropy:g}",
        "tumor_voxels": int(geometry.tumor.sum()),
    })
    return VolumeSample(
        image=image.astype(np.float32)[None],
        labels=labels,
        label=label,
        seed=int(seed),
        id=sample_id,
        meta=meta,
    )
