"""
Checkpoint module for the SLAB transformer toolkit.

Binary layout of a checkpoint file:

    b"SLABCKPT1"                  magic
    uint64 little-endian          length of the header in bytes
    header                        UTF-8 JSON, keys sorted
    payload                       raw little-endian float blobs in header order

The header holds the model configuration, the compute precision, the
non-tensor state of every normalization slot (PRepBN schedule position
included) and, for every tensor, its name, shape, byte offset into the
payload and byte length. It is self-describing: a model can be rebuilt from
the file alone. Files are written to a temporary path and moved into place.
"""

import json
import struct
import logging
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from config import ConfigError
from model import ModelConfig, SlabModel

logger = logging.getLogger(__name__)

MAGIC = b"SLABCKPT1"
FORMAT_VERSION = 1
_LENGTH = struct.Struct("<Q")
_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8")}


class CorruptCheckpoint(ValueError):
    """Raised when a checkpoint's magic, header or payload is inconsistent."""
    pass


class CheckpointIOError(OSError):
    """Raised when a checkpoint cannot be read or written."""
    pass


def _header_bytes(model: SlabModel, extra: Optional[Dict[str, Any]]) -> bytes:
    precision = model.config.precision
    dtype = _DTYPES[precision]
    entries, offset = [], 0
    for name, tensor in model.named_tensors().items():
        nbytes = int(tensor.size * dtype.itemsize)
        entries.append({"name": name, "shape": list(tensor.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {
        "format_version": FORMAT_VERSION,
        "config": asdict(model.config),
        "precision": precision,
        "norm_states": model.norm_states(),
        "tensors": entries,
        "extra": extra or {},
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(model: SlabModel, path: Union[str, Path], extra: Optional[Dict[str, Any]] = None) -> Path:
    """
    Write ``model`` to ``path``.

    Args:
        model: Model to serialize
        path: Destination file; parent directories are created
        extra: Additional JSON-serializable metadata stored in the header

    Returns:
        Path of the written checkpoint

    Raises:
        CheckpointIOError: If the file cannot be written
    """
    path = Path(path)
    dtype = _DTYPES[model.config.precision]
    header = _header_bytes(model, extra)
    temp_file = path.with_name(path.name + ".tmp")

    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(temp_file, "wb") as f:
            f.write(MAGIC)
            f.write(_LENGTH.pack(len(header)))
            f.write(header)
            for tensor in model.named_tensors().values():
                f.write(np.ascontiguousarray(tensor.data, dtype=dtype).tobytes())
        temp_file.replace(path)
    except OSError as e:
        logger.error(f"Failed to save checkpoint {path}: {e}")
        raise CheckpointIOError(f"Failed to write checkpoint {path}: {e}") from e

    logger.info(f"Checkpoint saved: {path} ({path.stat().st_size} bytes)")
    return path


def read_header(path: Union[str, Path]) -> Dict[str, Any]:
    """Parse and return only the header of a checkpoint."""
    header, _ = _read(Path(path))
    return header


def _read(path: Path):
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointIOError(f"Cannot read checkpoint {path}: {e}") from e

    if not raw.startswith(MAGIC):
        raise CorruptCheckpoint(f"{path}: bad magic (not a SLAB checkpoint)")
    start = len(MAGIC) + _LENGTH.size
    if len(raw) < start:
        raise CorruptCheckpoint(f"{path}: truncated before header length")
    (header_len,) = _LENGTH.unpack_from(raw, len(MAGIC))
    if len(raw) < start + header_len:
        raise CorruptCheckpoint(f"{path}: truncated header ({len(raw) - start} of {header_len} bytes)")
    try:
        header = json.loads(raw[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpoint(f"{path}: unreadable header: {e}") from e

    for key in ("config", "precision", "norm_states", "tensors"):
        if key not in header:
            raise CorruptCheckpoint(f"{path}: header is missing '{key}'")
    return header, raw[start + header_len:]


def load_checkpoint(path: Union[str, Path]) -> SlabModel:
    """
    Rebuild a model from a checkpoint file.

    Returns:
        Model with bit-exact tensors and restored normalization state

    Raises:
        CheckpointIOError: If the file cannot be read
        CorruptCheckpoint: On bad magic, malformed header, or payload spans that
            disagree with shapes and precision
    """
    path = Path(path)
    header, payload = _read(path)

    precision = header["precision"]
    if precision not in _DTYPES:
        raise CorruptCheckpoint(f"{path}: unknown precision '{precision}'")
    dtype = _DTYPES[precision]

    try:
        config = ModelConfig(**header["config"])
        model = SlabModel(config)
    except (TypeError, ValueError, ConfigError) as e:
        raise CorruptCheckpoint(f"{path}: invalid model configuration: {e}") from e
    if config.precision != precision:
        raise CorruptCheckpoint(f"{path}: precision {precision} disagrees with config {config.precision}")

    state: Dict[str, np.ndarray] = {}
    expected_offset = 0
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
        if offset != expected_offset:
            raise CorruptCheckpoint(f"{path}: tensor {name} starts at {offset}, expected {expected_offset}")
        needed = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if nbytes != needed:
            raise CorruptCheckpoint(f"{path}: tensor {name} spans {nbytes} bytes, shape {shape} needs {needed}")
        if offset + nbytes > len(payload):
            raise CorruptCheckpoint(f"{path}: payload truncated inside tensor {name}")
        blob = np.frombuffer(payload, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset)
        state[name] = blob.reshape(shape).astype(config.dtype)
        expected_offset += nbytes
    if expected_offset != len(payload):
        raise CorruptCheckpoint(f"{path}: {len(payload) - expected_offset} trailing payload bytes")

    try:
        model.load_state_dict(state)
        model.restore_norm_states(header["norm_states"])
    except (KeyError, ValueError) as e:
        raise CorruptCheckpoint(f"{path}: header does not match the model layout: {e}") from e

    logger.info(f"Checkpoint loaded: {path} (norm_kind={config.norm_kind}, fused={config.fused})")
    return model
