"""The HGV1 checkpoint container.

Layout, all integers little-endian::

    b"HGV1"
    u32 config length, config JSON (discriminated by its ``kind`` field)
    u32 tensor count
    per tensor: u16 name length, UTF-8 name, u8 ndim, ndim x u32 dims, float64 values

Parameters and buffers (names prefixed ``buffer.``) are stored together, so a
model written and read back is bit-identical in float64.
"""

import logging
import os
import struct
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from .baseline import BaselineVAE
from .config import BaselineConfig, ModelConfig, model_config_adapter
from .constants import CHECKPOINT_MAGIC
from .errors import CheckpointError
from .model import HGVAE, MotionModel

logger = logging.getLogger(__name__)

_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")


def build_model(config: ModelConfig | BaselineConfig) -> HGVAE | BaselineVAE:
    """A freshly initialised model of the kind named by ``config``."""
    if isinstance(config, BaselineConfig):
        return BaselineVAE(config)
    return HGVAE(config)


def checkpoint_bytes(model: MotionModel) -> bytes:
    config = model.config.model_dump_json().encode("utf-8")
    tensors = model.named_tensors()
    chunks = [CHECKPOINT_MAGIC, _U32.pack(len(config)), config, _U32.pack(len(tensors))]
    for name, array in tensors.items():
        encoded = name.encode("utf-8")
        chunks.append(_U16.pack(len(encoded)))
        chunks.append(encoded)
        chunks.append(_U8.pack(array.ndim))
        chunks.extend(_U32.pack(d) for d in array.shape)
        chunks.append(np.ascontiguousarray(array, dtype="<f8").tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, blob: bytes, source: str) -> None:
        self.blob = blob
        self.source = source
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.blob):
            raise CheckpointError(f"{self.source}: truncated while reading {what}")
        chunk = self.blob[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, fmt: struct.Struct, what: str) -> int:
        return int(fmt.unpack(self.take(fmt.size, what))[0])


def model_from_bytes(blob: bytes, source: str = "<bytes>") -> HGVAE | BaselineVAE:
    reader = _Reader(blob, source)
    magic = reader.take(len(CHECKPOINT_MAGIC), "magic")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{source}: not an HGV1 checkpoint (magic {magic!r})")
    config_len = reader.unpack(_U32, "config length")
    try:
        config = model_config_adapter.validate_json(reader.take(config_len, "config"))
    except ValidationError as exc:
        raise CheckpointError(f"{source}: invalid model configuration: {exc}") from None
    arrays: dict[str, np.ndarray] = {}
    for _ in range(reader.unpack(_U32, "tensor count")):
        name = reader.take(reader.unpack(_U16, "name length"), "name").decode("utf-8")
        ndim = reader.unpack(_U8, f"rank of '{name}'")
        shape = tuple(reader.unpack(_U32, f"shape of '{name}'") for _ in range(ndim))
        count = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(reader.take(8 * count, f"values of '{name}'"), dtype="<f8")
        arrays[name] = values.astype(np.float64).reshape(shape)
    if reader.offset != len(blob):
        raise CheckpointError(f"{source}: {len(blob) - reader.offset} unexpected trailing bytes")
    model = build_model(config)
    try:
        model.load_named(arrays)
    except ValueError as exc:
        raise CheckpointError(f"{source}: {exc}") from None
    return model


def save_checkpoint(model: MotionModel, path: str | Path) -> None:
    """Write ``model`` to ``path``, replacing any existing file only once the write succeeded."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(model))
    os.replace(tmp, path)
    logger.info("Saved checkpoint with %d parameters to %s", model.parameter_count(), path)


def load_checkpoint(path: str | Path) -> HGVAE | BaselineVAE:
    model = model_from_bytes(Path(path).read_bytes(), str(path))
    model.training = False
    logger.info("Loaded %s from %s", type(model).__name__, path)
    return model
