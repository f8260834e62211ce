"""
On-disk formats: DMT1 tensor files, key=value manifests and parameter checkpoints.

DMT1 layout: magic b"DMT1", one byte rank, `rank` little-endian uint32 dims,
then row-major little-endian float32 values. Storage is float32; everything is
widened back to float64 on load.
"""

import hashlib
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

import numpy as np

from utils.exceptions import CheckpointError, ShapeError

logger = logging.getLogger(__name__)

MAGIC = b"DMT1"
PathLike = Union[str, Path]


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.ndim > 255:
        raise ShapeError("DMT1 supports rank up to 255")
    header = MAGIC + bytes([array.ndim]) + np.asarray(array.shape, dtype="<u4").tobytes()
    return header + np.ascontiguousarray(array, dtype="<f4").tobytes()


def decode_tensor(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise ShapeError("not a DMT1 tensor (bad magic)")
    rank = blob[4]
    dims_end = 5 + 4 * rank
    shape = tuple(int(d) for d in np.frombuffer(blob[5:dims_end], dtype="<u4"))
    expected = int(np.prod(shape)) * 4 if shape else 4
    payload = blob[dims_end:]
    if len(payload) != expected:
        raise ShapeError(f"DMT1 payload has {len(payload)} bytes, shape {shape} needs {expected}")
    return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(shape)


def save_tensor(path: PathLike, array: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensor(array))
    return path


def load_tensor(path: PathLike) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def write_manifest(path: PathLike, entries: Iterable[Tuple[str, str]]) -> Path:
    """Write ordered key=value lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for key, value in entries:
        if "=" in key or "\n" in key or "\n" in str(value):
            raise ValueError(f"manifest entry '{key}' is not representable")
        lines.append(f"{key}={value}")
    path.write_text("\n".join(lines) + "\n")
    return path


def read_manifest(path: PathLike) -> List[Tuple[str, str]]:
    entries = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        entries.append((key.strip(), value.strip()))
    return entries


def file_sha256(path: PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def directory_digest(root: PathLike) -> str:
    """Stable hash over every file below root (relative path + content)."""
    root = Path(root)
    digest = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        digest.update(str(path.relative_to(root)).encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()


def _shape_text(shape: Tuple[int, ...]) -> str:
    return "x".join(str(d) for d in shape) if shape else "scalar"


def _parse_shape(text: str) -> Tuple[int, ...]:
    return () if text == "scalar" else tuple(int(d) for d in text.split("x"))


def save_checkpoint(directory: PathLike, groups: Dict[str, Dict[str, np.ndarray]],
                    metadata: Optional[Dict[str, str]] = None) -> Path:
    """
    Save named parameter groups (e.g. theta, phi, momentum buffers).

    Each tensor lands in `<group>__<param id>.dmt`; the manifest lists
    `param.<group>.<param id>=<shape>` plus free-form `meta.*` entries.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = [(f"meta.{k}", str(v)) for k, v in (metadata or {}).items()]
    for group, params in groups.items():
        for name in sorted(params):
            save_tensor(directory / f"{group}__{name}.dmt", params[name])
            entries.append((f"param.{group}.{name}", _shape_text(np.shape(params[name]))))
    write_manifest(directory / "manifest.txt", entries)
    logger.debug(f"Saved checkpoint with {len(entries)} entries to {directory}")
    return directory


def load_checkpoint(directory: PathLike) -> Tuple[Dict[str, Dict[str, np.ndarray]], Dict[str, str]]:
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.exists():
        raise CheckpointError(f"no manifest in {directory}")
    groups: Dict[str, Dict[str, np.ndarray]] = {}
    metadata: Dict[str, str] = {}
    for key, value in read_manifest(manifest):
        if key.startswith("meta."):
            metadata[key[len("meta."):]] = value
            continue
        if not key.startswith("param."):
            raise CheckpointError(f"unexpected manifest key '{key}'")
        group, _, name = key[len("param."):].partition(".")
        path = directory / f"{group}__{name}.dmt"
        if not path.exists():
            raise CheckpointError(f"manifest lists {key} but {path.name} is missing")
        array = load_tensor(path)
        if array.shape != _parse_shape(value):
            raise CheckpointError(f"{path.name} has shape {array.shape}, manifest says {value}")
        groups.setdefault(group, {})[name] = array
    return groups, metadata
