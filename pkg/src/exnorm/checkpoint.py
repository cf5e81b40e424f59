"""Self-describing binary checkpoints of a `Network`.

Layout, all integers unsigned 64-bit little-endian:

- magic ``EXNORMCK``
- length-prefixed UTF-8 format version (semantic version)
- length-prefixed UTF-8 JSON network descriptor
- blob count, then per blob: length-prefixed name, length-prefixed numpy
  dtype string, rank, extents, length-prefixed little-endian data

Blobs hold every parameter and running statistic in declaration order.
"""

__all__ = [
    "FORMAT_VERSION",
    "MAGIC",
    "load_checkpoint",
    "read_checkpoint",
    "save_checkpoint",
]

import json
import struct
from pathlib import Path
from typing import Any, BinaryIO, Dict, Tuple

import numpy as np
import structlog
from semver import VersionInfo

from exnorm.network import Network
from exnorm.types import CheckpointError, ExportError

MAGIC = b"EXNORMCK"
FORMAT_VERSION = VersionInfo(1, 0, 0)

_U64 = struct.Struct("<Q")

logger = structlog.get_logger(__name__)


def _write_bytes(f: BinaryIO, data: bytes) -> None:
    f.write(_U64.pack(len(data)))
    f.write(data)


def _read_u64(f: BinaryIO, path: Path) -> int:
    raw = f.read(_U64.size)
    if len(raw) != _U64.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    return int(_U64.unpack(raw)[0])


def _read_bytes(f: BinaryIO, path: Path) -> bytes:
    size = _read_u64(f, path)
    data = f.read(size)
    if len(data) != size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    return data


def save_checkpoint(model: Network, path: Path) -> None:
    """Write ``model``'s descriptor, parameters and buffers to ``path``."""
    state = model.state()
    try:
        with path.open("wb") as f:
            f.write(MAGIC)
            _write_bytes(f, str(FORMAT_VERSION).encode())
            _write_bytes(f, json.dumps(model.descriptor()).encode())
            f.write(_U64.pack(len(state)))
            for name, value in state.items():
                array = np.ascontiguousarray(
                    value, dtype=value.dtype.newbyteorder("<")
                )
                _write_bytes(f, name.encode())
                _write_bytes(f, array.dtype.str.encode())
                f.write(_U64.pack(array.ndim))
                for extent in array.shape:
                    f.write(_U64.pack(extent))
                _write_bytes(f, array.tobytes())
    except OSError as e:
        raise ExportError(f"Cannot write {path}: {e}") from e
    logger.info("Wrote checkpoint", path=str(path), blobs=len(state))


def read_checkpoint(
    path: Path,
) -> Tuple[VersionInfo, Dict[str, Any], Dict[str, np.ndarray]]:
    """Return the format version, descriptor and named blobs of a file.

    Raises
    ------
    CheckpointError: Bad magic, truncation, or a major version other than
      this reader's.
    """
    with path.open("rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not an exnorm checkpoint")
        try:
            version = VersionInfo.parse(_read_bytes(f, path).decode())
        except ValueError as e:
            raise CheckpointError(f"{path}: bad format version: {e}") from e
        if version.major != FORMAT_VERSION.major:
            raise CheckpointError(
                f"{path}: format {version} cannot be read by {FORMAT_VERSION}"
            )
        descriptor = json.loads(_read_bytes(f, path).decode())
        blobs: Dict[str, np.ndarray] = {}
        for _ in range(_read_u64(f, path)):
            name = _read_bytes(f, path).decode()
            dtype = np.dtype(_read_bytes(f, path).decode())
            rank = _read_u64(f, path)
            shape = tuple(_read_u64(f, path) for _ in range(rank))
            data = _read_bytes(f, path)
            if len(data) != dtype.itemsize * int(np.prod(shape)):
                raise CheckpointError(
                    f"{path}: blob {name} holds {len(data)} bytes for "
                    f"shape {shape}"
                )
            blobs[name] = np.frombuffer(data, dtype=dtype).reshape(shape)
        if f.read(1):
            raise CheckpointError(f"{path}: trailing bytes after last blob")
    return version, descriptor, blobs


def load_checkpoint(path: Path) -> Network:
    """Rebuild the network stored in ``path`` and load its state."""
    _, descriptor, blobs = read_checkpoint(path)
    model = Network.from_descriptor(descriptor)
    model.load_state(blobs)
    logger.info("Loaded checkpoint", path=str(path), blobs=len(blobs))
    return model
