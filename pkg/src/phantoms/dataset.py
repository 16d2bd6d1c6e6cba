"""Train/val/test phantom splits and their on-disk layout."""
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
from tqdm import tqdm

from phantoms.phantom import DifficultyConfig, VolumeSample, generate_sample
from utils.errors import ConfigError, StorageError
from utils.rng import derive_seed, generator

logger = logging.getLogger(__name__)

DATASET_VERSION = 1
SPLITS = ("train", "val", "test")
BYTE_LAYOUT = {
    "X": "little-endian IEEE-754 float32, C-order, shape [1, D, H, W], no header",
    "Y": "uint8 class ids (0 background, 1 stomach, 2 tumor), C-order, shape [D, H, W], no header",
}


@dataclass
class IndexEntry:
    id: str
    seed: int
    split: str
    label: int
    index: int

    def to_dict(self) -> Dict[str, Any]:
        return {"id": self.id, "seed": self.seed, "split": self.split, "label": self.label, "index": self.index}


@dataclass
class DatasetIndex:
    entries: List[IndexEntry]
    difficulty: DifficultyConfig
    extents: List[int]
    base_seed: int = 0
    prevalence: float = 0.5

    def split(self, name: str) -> List[IndexEntry]:
        return [e for e in self.entries if e.split == name]

    def counts(self) -> Dict[str, Dict[str, int]]:
        out = {}
        for name in SPLITS:
            entries = self.split(name)
            out[name] = {"n": len(entries), "positive": sum(e.label for e in entries)}
        return out

    def materialize(self, entry: IndexEntry) -> VolumeSample:
        return generate_sample(entry.seed, self.difficulty, self.extents, positive=bool(entry.label),
                               sample_id=entry.id)


def _positives(n: int, prevalence: float) -> int:
    return int(math.floor(n * prevalence + 0.5))


def make_splits(n_train: int, n_val: int, n_test: int, prevalence: float, base_seed: int,
                cfg: Union[str, Dict[str, Any], DifficultyConfig], extents: Sequence[int] = (32, 32, 32)) -> DatasetIndex:
    """Index of all cases; seeds are keyed by (base_seed, running case number) so splits never share one."""
    if not 0.0 < prevalence < 1.0:
        raise ConfigError(f"prevalence must lie in (0, 1), got {prevalence}")
    difficulty = DifficultyConfig.resolve(cfg)
    entries: List[IndexEntry] = []
    running = 0
    for split, n in zip(SPLITS, (n_train, n_val, n_test)):
        if n < 0:
            raise ConfigError(f"{split} split size must be >= 0")
        n_pos = _positives(n, prevalence)
        if n and (n_pos == 0 or n_pos == n):
            raise ConfigError(
                f"{split} split of {n} cases is too small for prevalence {prevalence}: "
                f"it would hold {n_pos} positive cases"
            )
        labels = np.zeros(n, dtype=int)
        labels[:n_pos] = 1
        labels = generator(base_seed, "labels", split).permutation(labels)
        for i in range(n):
            entries.append(IndexEntry(
                id=f"{split}-{i:04d}",
                seed=derive_seed(base_seed, running),
                split=split,
                label=int(labels[i]),
                index=running,
            ))
            running += 1
    return DatasetIndex(entries=entries, difficulty=difficulty, extents=list(extents),
                        base_seed=int(base_seed), prevalence=float(prevalence))


def _manifest(index: DatasetIndex, samples: Dict[str, VolumeSample], config_hash: str) -> Dict[str, Any]:
    rows = []
    for entry in index.entries:
        sample = samples[entry.id]
        row = entry.to_dict()
        row.update({
            "shapes": {"X": list(sample.image.shape), "Y": list(sample.labels.shape)},
            "files": {"X": f"X_{entry.id}.bin", "Y": f"Y_{entry.id}.bin"},
            "meta": sample.meta,
        })
        rows.append(row)
    return {
        "version": DATASET_VERSION,
        "byte_layout": BYTE_LAYOUT,
        "config_hash": config_hash,
        "difficulty": index.difficulty.to_dict(),
        "extents": list(index.extents),
        "base_seed": index.base_seed,
        "prevalence": index.prevalence,
        "counts": index.counts(),
        "samples": rows,
    }


class Dataset:
    """An index plus its samples, generated on demand or read from a dataset directory."""

    def __init__(self, index: DatasetIndex, root: Optional[Path] = None, config_hash: str = ""):
        self.index = index
        self.root = Path(root) if root is not None else None
        self.config_hash = config_hash
        self._cache: Dict[str, VolumeSample] = {}
        self._meta: Dict[str, Dict[str, Any]] = {}
        self._shapes: Dict[str, Dict[str, List[int]]] = {}

    def entries(self, split: str) -> List[IndexEntry]:
        return self.index.split(split)

    def sample(self, entry: IndexEntry) -> VolumeSample:
        if entry.id not in self._cache:
            self._cache[entry.id] = self._read(entry) if self.root is not None else self.index.materialize(entry)
        return self._cache[entry.id]

    def samples(self, split: str) -> List[VolumeSample]:
        return [self.sample(e) for e in self.entries(split)]

    def _read(self, entry: IndexEntry) -> VolumeSample:
        shapes = self._shapes[entry.id]
        image = _read_array(self.root / f"X_{entry.id}.bin", "<f4", shapes["X"]).astype(np.float32)
        labels = _read_array(self.root / f"Y_{entry.id}.bin", "u1", shapes["Y"]).copy()
        return VolumeSample(image=image, labels=labels, label=entry.label, seed=entry.seed, id=entry.id,
                            meta=dict(self._meta.get(entry.id, {})))


def _read_array(path: Path, dtype: str, shape: Sequence[int]) -> np.ndarray:
    try:
        payload = path.read_bytes()
    except FileNotFoundError:
        raise StorageError(f"dataset file referenced by manifest is missing: {path}") from None
    except OSError as e:
        raise StorageError(f"cannot read {path}: {e}") from None
    expected = int(np.prod(shape)) * np.dtype(dtype).itemsize
    if len(payload) != expected:
        raise StorageError(f"{path} holds {len(payload)} bytes, manifest shape {list(shape)} needs {expected}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape)


def generate_all(index: DatasetIndex, entries: Optional[Iterable[IndexEntry]] = None, jobs: int = 1,
                 progress: bool = False) -> Dict[str, VolumeSample]:
    """Materialize entries; results do not depend on `jobs`."""
    entries = list(index.entries if entries is None else entries)
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        samples = list(tqdm(pool.map(index.materialize, entries), total=len(entries),
                            desc="Generating phantoms", disable=not progress, leave=False))
    return {e.id: s for e, s in zip(entries, samples)}


def save_dataset(index: DatasetIndex, directory: Path, config_hash: str = "", jobs: int = 1,
                 samples: Optional[Dict[str, VolumeSample]] = None, progress: bool = False) -> Path:
    directory = Path(directory)
    if samples is None:
        samples = generate_all(index, jobs=jobs, progress=progress)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        for entry in index.entries:
            sample = samples[entry.id]
            (directory / f"X_{entry.id}.bin").write_bytes(np.ascontiguousarray(sample.image, dtype="<f4").tobytes())
            (directory / f"Y_{entry.id}.bin").write_bytes(np.ascontiguousarray(sample.labels, dtype="u1").tobytes())
        manifest = _manifest(index, samples, config_hash)
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                                 encoding="utf-8")
    except OSError as e:
        raise StorageError(f"cannot write dataset to {directory}: {e}") from None
    logger.info("wrote %d phantoms to %s", len(index.entries), directory)
    return directory


def load_dataset(directory: Path) -> Dataset:
    directory = Path(directory)
    path = directory / "manifest.json"
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise StorageError(f"dataset manifest not found: {path}") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise StorageError(f"corrupt dataset manifest {path}: {e}") from None
    if manifest.get("version") != DATASET_VERSION:
        raise StorageError(f"unsupported dataset version {manifest.get('version')!r} in {path}")
    try:
        entries = [IndexEntry(id=r["id"], seed=int(r["seed"]), split=r["split"], label=int(r["label"]),
                              index=int(r["index"])) for r in manifest["samples"]]
        index = DatasetIndex(
            entries=entries,
            difficulty=DifficultyConfig.resolve({k: v for k, v in manifest["difficulty"].items()}),
            extents=list(manifest["extents"]),
            base_seed=int(manifest["base_seed"]),
            prevalence=float(manifest["prevalence"]),
        )
    except (KeyError, TypeError, ValueError, ConfigError) as e:
        raise StorageError(f"corrupt dataset manifest {path}: {e}") from None
    dataset = Dataset(index, root=directory, config_hash=manifest.get("config_hash", ""))
    for row in manifest["samples"]:
        dataset._shapes[row["id"]] = row["shapes"]
        dataset._meta[row["id"]] = row.get("meta", {})
    return dataset


def dataset_from_samples(index: DatasetIndex, samples: Dict[str, VolumeSample]) -> Dataset:
    dataset = Dataset(index)
    dataset._cache.update(samples)
    return dataset

