"""
The tensor container: the one binary format used for dataset shards, checkpoints and sampled arrays.

Layout (all integers little-endian)::

    magic    8 bytes   b"ILDMTNSR"
    version  u32       FORMAT_VERSION
    count    u32       number of entries
    entry*   u16 name length, UTF-8 name, u8 dtype tag (1=f32, 2=u8), u8 rank, u32 dims[rank], raw row-major data

Checkpoints are containers with an extra ``__header__`` u8 entry holding UTF-8 JSON (the kind of checkpoint and
the configuration needed to rebuild the module without the training config).
"""
import json
import os
import struct
import tempfile
from collections import OrderedDict

import numpy as np
import torch

from ildm.errors import ContainerIOError, ContractError

MAGIC = b"ILDMTNSR"
FORMAT_VERSION = 1
HEADER_SIZE = len(MAGIC) + 8
HEADER_ENTRY = "__header__"

DTYPE_TAGS = {1: np.dtype("<f4"), 2: np.dtype("u1")}
TAG_FOR_DTYPE = {np.dtype("float32"): 1, np.dtype("uint8"): 2}


class TensorContainer:
    """
    An ordered mapping of names to float32 or uint8 arrays, with save/load to the container format
    (in the spirit of a snapshot file: everything a run needs, in one file).
    """

    def __init__(self, entries=None):
        self.entries = OrderedDict()
        for name, array in (entries or {}).items():
            self[name] = array

    def __setitem__(self, name, array):
        array = np.asarray(array)
        if array.dtype not in TAG_FOR_DTYPE:
            raise ContractError(f"Entry '{name}' has dtype {array.dtype}; only float32 and uint8 can be stored",
                                key=name)
        if len(name.encode("utf-8")) > 0xFFFF:
            raise ContractError("Entry name too long", key=name)
        if array.ndim > 0xFF:
            raise ContractError(f"Entry '{name}' has too many dimensions", key=name)
        self.entries[name] = array

    def __getitem__(self, name):
        try:
            return self.entries[name]
        except KeyError:
            raise ContractError(f"Container has no entry '{name}' (has {list(self.entries)})", key=name) from None

    def __contains__(self, name):
        return name in self.entries

    def __len__(self):
        return len(self.entries)

    def names(self):
        return list(self.entries)

    def to_bytes(self):
        parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(self.entries))]
        for name, array in self.entries.items():
            encoded = name.encode("utf-8")
            parts.append(struct.pack("<H", len(encoded)))
            parts.append(encoded)
            parts.append(struct.pack("<BB", TAG_FOR_DTYPE[array.dtype], array.ndim))
            parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
            parts.append(np.ascontiguousarray(array, dtype=DTYPE_TAGS[TAG_FOR_DTYPE[array.dtype]]).tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data, path="<bytes>"):
        reader = _Reader(data, path)
        if reader.take(len(MAGIC), "magic") != MAGIC:
            raise ContainerIOError("Not a tensor container (bad magic)", key=path, offset=0)
        version, count = reader.unpack("<II", "header")
        if version != FORMAT_VERSION:
            raise ContainerIOError(f"Unsupported container version {version}", key=path, offset=len(MAGIC))
        entries = OrderedDict()
        for _ in range(count):
            start = reader.offset
            (name_len,) = reader.unpack("<H", "name length")
            try:
                name = reader.take(name_len, "name").decode("utf-8")
            except UnicodeDecodeError:
                raise ContainerIOError("Entry name is not valid UTF-8", key=path, offset=start) from None
            if name in entries:
                raise ContainerIOError(f"Duplicate entry name '{name}'", key=path, offset=start)
            tag, rank = reader.unpack("<BB", "dtype/rank")
            if tag not in DTYPE_TAGS:
                raise ContainerIOError(f"Unknown dtype tag {tag} for entry '{name}'", key=path,
                                       offset=reader.offset - 2)
            dims = reader.unpack(f"<{rank}I", "dims") if rank else ()
            dtype = DTYPE_TAGS[tag]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            payload = reader.take(nbytes, f"data of '{name}'")
            entries[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
        if reader.offset != len(data):
            raise ContainerIOError(f"{len(data) - reader.offset} trailing bytes after the last entry", key=path,
                                   offset=reader.offset)
        container = cls()
        container.entries = entries
        return container

    def save(self, path):
        """Atomic write: the payload goes to a temporary file in the same directory which is then renamed."""
        path = str(path)
        directory = os.path.dirname(os.path.abspath(path))
        try:
            os.makedirs(directory, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".ildm")
        except OSError as e:
            raise ContainerIOError(f"Cannot write container: {e.strerror}", key=path) from e
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(self.to_bytes())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.remove(tmp)
            raise

    @classmethod
    def load(cls, path):
        path = str(path)
        try:
            with open(path, "rb") as f:
                data = f.read()
        except OSError as e:
            raise ContainerIOError(f"Cannot read container: {e.strerror}", key=path) from e
        return cls.from_bytes(data, path)

    # ********
    # Headers (checkpoints)
    # ********

    def set_header(self, header):
        self[HEADER_ENTRY] = np.frombuffer(json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8)

    def header(self):
        if HEADER_ENTRY not in self.entries:
            return {}
        return json.loads(self.entries[HEADER_ENTRY].tobytes().decode("utf-8"))


class _Reader:
    """Sequential reader that reports the byte offset of any truncation."""

    def __init__(self, data, path):
        self.data = data
        self.path = path
        self.offset = 0

    def take(self, n, what):
        if self.offset + n > len(self.data):
            raise ContainerIOError(f"Truncated container while reading {what}", key=self.path, offset=self.offset)
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def save_checkpoint(path, kind, module, header=None, state=None):
    """
    Write a module's parameters (or an explicit ``state`` dict of tensors) with a JSON header recording ``kind``.
    Tensors are stored as float32.
    """
    container = TensorContainer()
    state = module.state_dict() if state is None else state
    for name, tensor in state.items():
        container[name] = tensor.detach().cpu().numpy().astype(np.float32)
    full_header = {"kind": kind}
    full_header.update(header or {})
    container.set_header(full_header)
    container.save(path)
    return container


def load_checkpoint(path, kind=None):
    """Read a checkpoint; returns (header, state dict of float32 tensors). Rejects a different ``kind``."""
    container = TensorContainer.load(path)
    header = container.header()
    if kind is not None and header.get("kind") != kind:
        raise ContainerIOError(f"Expected a '{kind}' checkpoint but found '{header.get('kind')}'", key=str(path))
    state = OrderedDict((name, torch.from_numpy(np.array(array)))
                        for name, array in container.entries.items() if name != HEADER_ENTRY)
    return header, state
