"""Portable checkpoints: a JSON manifest plus one raw little-endian f32 file per tensor."""
import json
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping

import numpy as np

from utils.errors import StorageError

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
PAYLOAD_FORMAT = "little-endian IEEE-754 float32, C-order, no header"


@dataclass
class Checkpoint:
    preset: str
    config_hash: str
    tensors: Dict[str, np.ndarray]
    config: Dict[str, Any] = field(default_factory=dict)
    extra: Dict[str, Any] = field(default_factory=dict)

    def names(self, prefix: str = ""):
        return sorted(n for n in self.tensors if n.startswith(prefix))


def crc32(payload: bytes) -> int:
    return zlib.crc32(payload) & 0xFFFFFFFF


def save_checkpoint(ckpt: Checkpoint, directory: Path) -> Path:
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        table = {}
        for name in sorted(ckpt.tensors):
            array = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
            payload = array.tobytes(order="C")
            file_name = f"{name}.bin"
            (directory / file_name).write_bytes(payload)
            table[name] = {
                "dtype": "f32le",
                "shape": list(array.shape),
                "file": file_name,
                "nbytes": len(payload),
                "crc32": crc32(payload),
            }
        manifest = {
            "version": CHECKPOINT_VERSION,
            "format": PAYLOAD_FORMAT,
            "preset": ckpt.preset,
            "config_hash": ckpt.config_hash,
            "config": ckpt.config,
            "extra": ckpt.extra,
            "tensors": table,
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        raise StorageError(f"cannot write checkpoint to {directory}: {e}") from None
    logger.info("wrote checkpoint with %d tensors to %s", len(ckpt.tensors), directory)
    return directory


def load_checkpoint(directory: Path) -> Checkpoint:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise StorageError(f"checkpoint manifest not found: {manifest_path}") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise StorageError(f"corrupt checkpoint manifest {manifest_path}: {e}") from None

    if manifest.get("version") != CHECKPOINT_VERSION:
        raise StorageError(f"unsupported checkpoint version {manifest.get('version')!r} in {manifest_path}")

    tensors: Dict[str, np.ndarray] = {}
    for name, entry in manifest.get("tensors", {}).items():
        path = directory / entry["file"]
        try:
            payload = path.read_bytes()
        except FileNotFoundError:
            raise StorageError(f"checkpoint tensor file missing: {path}") from None
        if len(payload) != entry["nbytes"] or crc32(payload) != entry["crc32"]:
            raise StorageError(f"checksum mismatch for {path}")
        array = np.frombuffer(payload, dtype="<f4").astype(np.float32)
        tensors[name] = array.reshape(entry["shape"])
    return Checkpoint(
        preset=manifest["preset"],
        config_hash=manifest["config_hash"],
        tensors=tensors,
        config=manifest.get("config", {}),
        extra=manifest.get("extra", {}),
    )


def arrays_of(store: Mapping[str, Any]) -> Dict[str, np.ndarray]:
    """Plain numpy copies of a {name: Tensor} mapping."""
    return {name: np.array(t.data, dtype=np.float32) for name, t in store.items()}
