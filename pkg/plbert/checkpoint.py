"""Checkpoint file format, loading, validation and retention.

Layout::

    PLBERT-CKPT v1\\n
    <one-line JSON block: kind, model config, tensor names, training state>\\n
    per tensor, in the documented order:
        uint16 name length | name (UTF-8) | uint8 ndim | uint32 dims... |
        uint32 crc32 of data | data (little-endian float32, or float64 in float64 precision)

Tensor order is `model.tensor_shapes(config)` order, followed in `full`
checkpoints by the optimizer moments `optimizer.m.<name>` and
`optimizer.v.<name>` in the same order.
"""

import json
import logging
import os
import re
import struct
import sys
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .config import ModelConfig
from .errors import DataError, FormatError, NumericError
from .model import EncoderParams, tensor_shapes

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"PLBERT-CKPT"
CKPT_VERSION = b"v1"
CKPT_HEADER = CKPT_MAGIC + b" " + CKPT_VERSION + b"\n"

KIND_FULL = "full"
KIND_ENCODER = "encoder"

CHECKPOINT_PATTERN = re.compile(r"^step_(\d+)\.ckpt$")


@dataclass
class Checkpoint:
    """Decoded checkpoint contents."""

    kind: str
    params: EncoderParams
    moments: Optional[Dict[str, Tuple[np.ndarray, np.ndarray]]] = None
    state: Dict = field(default_factory=dict)


def _tensor_dtype(config: ModelConfig) -> np.dtype:
    return np.dtype('<f4') if config.dtype == "float32" else np.dtype('<f8')


def _write_tensor(f, name: str, array: np.ndarray, dtype: np.dtype) -> None:
    data = np.ascontiguousarray(array, dtype=dtype).tobytes()
    encoded = name.encode('utf-8')
    f.write(struct.pack("<H", len(encoded)))
    f.write(encoded)
    f.write(struct.pack("<B", array.ndim))
    f.write(struct.pack(f"<{array.ndim}I", *array.shape))
    f.write(struct.pack("<I", zlib.crc32(data)))
    f.write(data)


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"checkpoint truncated while reading {what}")
    return data


def _read_tensor(f, expected_name: str, expected_shape: Tuple[int, ...], dtype: np.dtype) -> np.ndarray:
    (name_len,) = struct.unpack("<H", _read_exact(f, 2, "tensor name length"))
    name = _read_exact(f, name_len, "tensor name").decode('utf-8', 'replace')
    if name != expected_name:
        raise FormatError(f"expected tensor {expected_name!r}, found {name!r}")
    (ndim,) = struct.unpack("<B", _read_exact(f, 1, f"{name} rank"))
    shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, f"{name} shape"))
    if tuple(shape) != tuple(expected_shape):
        raise FormatError(f"{name} has shape {shape}, expected {expected_shape}")
    (checksum,) = struct.unpack("<I", _read_exact(f, 4, f"{name} checksum"))
    nbytes = int(np.prod(shape)) * dtype.itemsize
    data = _read_exact(f, nbytes, f"{name} data")
    if zlib.crc32(data) != checksum:
        raise FormatError(f"checksum mismatch in tensor {name}")
    return np.frombuffer(data, dtype=dtype).reshape(shape).astype(dtype.newbyteorder('='))


def save_checkpoint(
    path: Path,
    params: EncoderParams,
    moments: Optional[Dict[str, Tuple[np.ndarray, np.ndarray]]] = None,
    state: Optional[Dict] = None,
) -> Path:
    """Write a checkpoint atomically. Without heads the kind is `encoder`."""
    kind = KIND_FULL if params.has_heads else KIND_ENCODER
    if kind == KIND_ENCODER and moments is not None:
        raise DataError("encoder-only checkpoints carry no optimizer state")
    config = params.config
    header = {
        'kind': kind,
        'config': config.model_dump(mode="json"),
        'tensors': params.names(),
        'has_moments': moments is not None,
        'state': state or {},
    }
    dtype = _tensor_dtype(config)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_name(path.name + ".tmp")
    with open(tmp_path, 'wb') as f:
        f.write(CKPT_HEADER)
        f.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode('utf-8') + b"\n")
        for name in params.names():
            _write_tensor(f, name, params[name], dtype)
        if moments is not None:
            for name in params.names():
                _write_tensor(f, f"optimizer.m.{name}", moments[name][0], dtype)
            for name in params.names():
                _write_tensor(f, f"optimizer.v.{name}", moments[name][1], dtype)
    os.replace(tmp_path, path)
    logger.debug("Saved %s checkpoint to %s", kind, path)
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    """Read and verify a checkpoint written by `save_checkpoint`."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    with open(path, 'rb') as f:
        magic_line = f.readline()
        if not magic_line.startswith(CKPT_MAGIC + b" "):
            raise FormatError(f"not a checkpoint (bad magic): {path}")
        version = magic_line[len(CKPT_MAGIC) + 1:].rstrip(b"\n")
        if version != CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version.decode('utf-8', 'replace')!r}: {path}")
        try:
            header = json.loads(f.readline().decode('utf-8'))
            kind = header['kind']
            config = ModelConfig(**header['config'])
            has_moments = bool(header['has_moments'])
            state = header.get('state') or {}
        except (ValueError, KeyError, TypeError) as e:
            raise FormatError(f"corrupt checkpoint header in {path}: {e}") from e

        if kind not in (KIND_FULL, KIND_ENCODER):
            raise FormatError(f"unknown checkpoint kind {kind!r}: {path}")
        shapes = tensor_shapes(config, with_heads=(kind == KIND_FULL))
        if list(shapes) != header.get('tensors'):
            raise FormatError(f"tensor list does not match config: {path}")
        dtype = _tensor_dtype(config)
        tensors = OrderedDict((name, _read_tensor(f, name, shape, dtype)) for name, shape in shapes.items())
        moments = None
        if has_moments:
            m = {name: _read_tensor(f, f"optimizer.m.{name}", shape, dtype) for name, shape in shapes.items()}
            v = {name: _read_tensor(f, f"optimizer.v.{name}", shape, dtype) for name, shape in shapes.items()}
            moments = {name: (m[name], v[name]) for name in shapes}
        if f.read(1):
            raise FormatError(f"trailing data after last tensor: {path}")

    return Checkpoint(kind=kind, params=EncoderParams(config, tensors), moments=moments, state=state)


def validate_checkpoint(checkpoint_path: Path) -> Tuple[bool, Optional[str]]:
    """Validate that a checkpoint loads and holds only finite values."""
    try:
        checkpoint = load_checkpoint(checkpoint_path)
        checkpoint.params.check_finite()
    except (DataError, NumericError) as e:
        return False, str(e)
    return True, None


def checkpoint_name(step: int) -> str:
    return f"step_{step:07d}.ckpt"


def list_checkpoints(checkpoint_dir: Path) -> List[Path]:
    """Periodic checkpoints in a directory, oldest step first."""
    checkpoint_dir = Path(checkpoint_dir)
    if not checkpoint_dir.exists():
        return []
    found = []
    for path in checkpoint_dir.iterdir():
        match = CHECKPOINT_PATTERN.match(path.name)
        if match:
            found.append((int(match.group(1)), path))
    return [path for _, path in sorted(found)]


def _remove(paths: List[Path]) -> None:
    for checkpoint in paths:
        try:
            checkpoint.unlink()
        except OSError as e:
            print(f"WARNING: Failed to remove {checkpoint}: {e}", file=sys.stderr)


def cleanup_checkpoints(checkpoint_dir: Path, keep_last_n: int = 3) -> Tuple[List[Path], List[Path]]:
    """Clean up old periodic checkpoints, keeping only the last N."""
    checkpoints = list_checkpoints(checkpoint_dir)

    if len(checkpoints) <= keep_last_n:
        return checkpoints, []

    to_keep = checkpoints[-keep_last_n:]
    to_remove = checkpoints[:-keep_last_n]
    _remove(to_remove)
    return to_keep, to_remove


def discard_checkpoints_after(checkpoint_dir: Path, step: int) -> List[Path]:
    """Remove periodic checkpoints newer than `step` (all of them for step 0)."""
    stale = [
        path for path in list_checkpoints(checkpoint_dir)
        if int(CHECKPOINT_PATTERN.match(path.name).group(1)) > step
    ]
    if stale:
        logger.info("Removing %d checkpoint(s) left from an earlier run", len(stale))
    _remove(stale)
    return stale
