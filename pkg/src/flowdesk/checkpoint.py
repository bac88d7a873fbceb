"""
Parameter checkpoints.

File layout, all integers little-endian::

    b"FFCK"                      magic
    u32                          format version
    u32                          header length
    bytes                        header, UTF-8 JSON
    u32                          tensor count
    per tensor:
        u16 name length, name (UTF-8), u8 ndim, u32 * ndim dims,
        u64 blob offset, u64 blob size in bytes
    blobs                        float32, little-endian, back to back

The header is kept as text so that loading and re-saving a checkpoint
reproduces the file byte for byte.
"""

import json
import logging
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import torch

from .exceptions import (
    CheckpointVersionError,
    ConfigMismatchError,
    CorruptCheckpointError,
    TruncatedCheckpointError,
)
from .net import ModelConfig, param_shapes

__all__ = [
    "FORMAT_VERSION",
    "MAGIC",
    "Checkpoint",
    "check_config",
    "load_checkpoint",
    "save_checkpoint",
]

logger = logging.getLogger(__name__)

MAGIC = b"FFCK"
FORMAT_VERSION = 1
_BLOB_DTYPE = np.dtype("<f4")


def encode_header(header):
    return json.dumps(header, sort_keys=True, separators=(",", ":"))


@dataclass
class Checkpoint:
    """
    A loaded or to-be-saved checkpoint.

    Parameters
    ----------
    header : str
        Header JSON text.  Holds at least ``{"model": ModelConfig.to_dict()}``.
    tensors : OrderedDict of str to numpy.ndarray
        Little-endian float32 arrays, in file order.
    """

    header: str
    tensors: OrderedDict = field(default_factory=OrderedDict)

    @classmethod
    def from_params(cls, params, config, **meta):
        header = dict(meta)
        header["model"] = config.to_dict()
        tensors = OrderedDict(
            (name, np.ascontiguousarray(p.detach().cpu().numpy(), dtype=_BLOB_DTYPE))
            for name, p in params.items()
        )
        return cls(encode_header(header), tensors)

    @property
    def metadata(self):
        return json.loads(self.header)

    @property
    def config(self):
        return ModelConfig.from_dict(self.metadata["model"])

    def to_params(self, dtype=torch.float32):
        return OrderedDict(
            (name, torch.from_numpy(array.astype(np.float32)).to(dtype))
            for name, array in self.tensors.items()
        )

    def to_bytes(self):
        header = self.header.encode("utf-8")
        names = [name.encode("utf-8") for name in self.tensors]

        table_size = 4 + sum(
            2 + len(name) + 1 + 4 * array.ndim + 16
            for name, array in zip(names, self.tensors.values())
        )
        offset = len(MAGIC) + 8 + len(header) + table_size

        parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(header)), header]
        parts.append(struct.pack("<I", len(self.tensors)))
        blobs = []
        for name, array in zip(names, self.tensors.values()):
            blob = np.ascontiguousarray(array, dtype=_BLOB_DTYPE).tobytes()
            parts.append(struct.pack("<H", len(name)))
            parts.append(name)
            parts.append(struct.pack(f"<B{array.ndim}I", array.ndim, *array.shape))
            parts.append(struct.pack("<QQ", offset, len(blob)))
            blobs.append(blob)
            offset += len(blob)
        return b"".join(parts + blobs)

    def save(self, path):
        with open(path, "wb") as fd:
            fd.write(self.to_bytes())


def save_checkpoint(path, params, config, **meta):
    """
    Write parameters and their model config to ``path``.

    Extra keyword arguments go into the header next to ``model``; they must
    be JSON-serializable and should not carry timestamps if the file is to
    be reproducible.
    """
    checkpoint = Checkpoint.from_params(params, config, **meta)
    checkpoint.save(path)
    logger.info("Saved checkpoint with %d tensors to %s", len(checkpoint.tensors), path)
    return checkpoint


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        end = self.pos + n
        if end > len(self.data):
            raise TruncatedCheckpointError(
                f"file ends inside {what} (needs {end} bytes, has {len(self.data)})"
            )
        chunk = self.data[self.pos : end]
        self.pos = end
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def parse_checkpoint(data):
    """
    Parse checkpoint bytes.  Everything is validated before anything is
    returned.
    """
    reader = _Reader(data)
    if len(data) < len(MAGIC):
        raise TruncatedCheckpointError("file is shorter than the magic bytes")
    if reader.take(len(MAGIC), "magic") != MAGIC:
        raise CorruptCheckpointError("bad magic bytes; not a flowdesk checkpoint")
    version, header_len = reader.unpack("<II", "preamble")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"unsupported checkpoint format version {version} "
            f"(this build reads {FORMAT_VERSION})"
        )
    try:
        header = reader.take(header_len, "header").decode("utf-8")
        meta = json.loads(header)
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CorruptCheckpointError(f"unreadable checkpoint header: {err}") from err
    if not isinstance(meta, dict) or not isinstance(meta.get("model"), dict):
        raise CorruptCheckpointError("checkpoint header has no model config")

    (count,) = reader.unpack("<I", "tensor table")
    entries = []
    for _ in range(count):
        (name_len,) = reader.unpack("<H", "tensor table")
        try:
            name = reader.take(name_len, "tensor table").decode("utf-8")
        except UnicodeDecodeError as err:
            raise CorruptCheckpointError(f"bad tensor name: {err}") from err
        (ndim,) = reader.unpack("<B", "tensor table")
        shape = reader.unpack(f"<{ndim}I", "tensor table")
        offset, nbytes = reader.unpack("<QQ", "tensor table")
        entries.append((name, shape, offset, nbytes))

    tensors = OrderedDict()
    expected_offset = reader.pos
    for name, shape, offset, nbytes in entries:
        if name in tensors:
            raise CorruptCheckpointError(f"duplicate tensor name {name!r}")
        if nbytes != _BLOB_DTYPE.itemsize * math.prod(shape):
            raise CorruptCheckpointError(
                f"tensor {name!r}: {nbytes} bytes do not hold shape {shape}"
            )
        if offset != expected_offset:
            raise CorruptCheckpointError(
                f"tensor {name!r}: blob offset {offset}, expected {expected_offset}"
            )
        if offset + nbytes > len(data):
            raise TruncatedCheckpointError(
                f"tensor {name!r}: blob ends at byte {offset + nbytes}, "
                f"file has {len(data)}"
            )
        array = np.frombuffer(data, dtype=_BLOB_DTYPE, count=nbytes // 4, offset=offset)
        tensors[name] = array.reshape(shape).copy()
        expected_offset = offset + nbytes
    if expected_offset != len(data):
        raise CorruptCheckpointError(
            f"{len(data) - expected_offset} trailing bytes after the last blob"
        )
    return Checkpoint(header, tensors)


def _flatten(d, prefix=""):
    for key in sorted(d):
        value = d[key]
        if isinstance(value, dict):
            yield from _flatten(value, f"{prefix}{key}.")
        else:
            yield f"{prefix}{key}", value


def check_config(checkpoint, expected):
    """
    Raise `ConfigMismatchError` naming the first model field where the
    checkpoint disagrees with ``expected``.
    """
    found = dict(_flatten(checkpoint.metadata["model"]))
    for key, value in _flatten(expected.to_dict()):
        have = found.get(key)
        if isinstance(value, list):
            have = list(have) if isinstance(have, list) else have
        if have != value:
            raise ConfigMismatchError(f"model.{key}", value, have)
    shapes = param_shapes(expected)
    if list(shapes) != list(checkpoint.tensors):
        raise CorruptCheckpointError(
            "checkpoint tensor names do not match the model's parameters"
        )
    for name, shape in shapes.items():
        if checkpoint.tensors[name].shape != shape:
            raise CorruptCheckpointError(
                f"tensor {name!r} has shape {checkpoint.tensors[name].shape}, "
                f"the model expects {shape}"
            )


def load_checkpoint(path, expected_config=None):
    """
    Load a checkpoint.

    Parameters
    ----------
    path : str or path-like
    expected_config : ModelConfig, optional
        When given, the header's model config must match it field by field.

    Returns
    -------
    Checkpoint

    Raises
    ------
    CorruptCheckpointError, TruncatedCheckpointError, CheckpointVersionError
    """
    with open(path, "rb") as fd:
        data = fd.read()
    checkpoint = parse_checkpoint(data)
    if expected_config is not None:
        check_config(checkpoint, expected_config)
    logger.debug("Loaded checkpoint %s with %d tensors", path, len(checkpoint.tensors))
    return checkpoint
