"""
Named parameter tensors and the flat binary checkpoint format.

Checkpoint layout (little-endian):
    header  : magic b"RTSD", u32 version, u32 tensor count
    records : u32 name length, name bytes (utf-8), u32 rank, u32 dims[rank],
              u8 dtype tag (0 = float32, 1 = float64), raw row-major data
"""
import struct

import numpy as np

MAGIC = b"RTSD"
VERSION = 1
DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
TAG_OF = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    """Raised for unreadable checkpoints or checkpoints that do not fit a config"""


class ParameterStore:
    """Ordered mapping from unique parameter names to numpy arrays."""

    def __init__(self, tensors=None):
        self._tensors = {}
        for name, array in (tensors or {}).items():
            self.add(name, array)

    def add(self, name, array):
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name '{name}'")
        self._tensors[name] = np.asarray(array)

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def __iter__(self):
        return iter(self._tensors)

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def shapes(self):
        return {name: array.shape for name, array in self._tensors.items()}

    def count(self):
        """Number of learnable scalars"""
        return int(sum(array.size for array in self._tensors.values()))

    @property
    def dtype(self):
        dtypes = {array.dtype for array in self._tensors.values()}
        return dtypes.pop() if len(dtypes) == 1 else None

    def replace(self, name, array):
        if name not in self._tensors:
            raise KeyError(f"unknown parameter '{name}'")
        return self.updated({name: array})

    def updated(self, arrays):
        tensors = dict(self._tensors)
        tensors.update({name: np.asarray(array) for name, array in arrays.items()})
        store = ParameterStore()
        store._tensors = tensors
        return store

    def astype(self, dtype):
        return ParameterStore({name: array.astype(dtype) for name, array in self._tensors.items()})

    def copy(self):
        return ParameterStore({name: array.copy() for name, array in self._tensors.items()})

    def check_finite(self):
        for name, array in self._tensors.items():
            if not np.all(np.isfinite(array)):
                raise ValueError(f"parameter '{name}' contains NaN or Inf")

    def matches(self, other):
        """True when both stores have the same names and shapes"""
        return self.shapes() == other.shapes()

    def save(self, path):
        with open(path, "wb") as handle:
            handle.write(struct.pack("<4sII", MAGIC, VERSION, len(self._tensors)))
            for name, array in self._tensors.items():
                tag = TAG_OF.get(array.dtype)
                if tag is None:
                    raise CheckpointError(f"parameter '{name}' has unsupported dtype {array.dtype}")
                encoded = name.encode("utf-8")
                handle.write(struct.pack("<I", len(encoded)))
                handle.write(encoded)
                handle.write(struct.pack("<I", array.ndim))
                handle.write(struct.pack(f"<{array.ndim}I", *array.shape))
                handle.write(struct.pack("<B", tag))
                handle.write(np.ascontiguousarray(array, dtype=DTYPE_TAGS[tag]).tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as handle:
            payload = handle.read()
        try:
            magic, version, count = struct.unpack_from("<4sII", payload, 0)
        except struct.error:
            raise CheckpointError(f"{path}: truncated checkpoint header") from None
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        offset = 12
        store = cls()
        try:
            for _ in range(count):
                (name_len,) = struct.unpack_from("<I", payload, offset)
                offset += 4
                name = payload[offset:offset + name_len].decode("utf-8")
                offset += name_len
                (rank,) = struct.unpack_from("<I", payload, offset)
                offset += 4
                dims = struct.unpack_from(f"<{rank}I", payload, offset)
                offset += 4 * rank
                (tag,) = struct.unpack_from("<B", payload, offset)
                offset += 1
                dtype = DTYPE_TAGS.get(tag)
                if dtype is None:
                    raise CheckpointError(f"{path}: unknown dtype tag {tag} for '{name}'")
                size = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
                if offset + size > len(payload):
                    raise CheckpointError(f"{path}: truncated data for '{name}'")
                array = np.frombuffer(payload, dtype=dtype, count=size // dtype.itemsize, offset=offset)
                offset += size
                store.add(name, array.reshape(dims).astype(dtype.newbyteorder("=")))
        except struct.error:
            raise CheckpointError(f"{path}: truncated checkpoint record") from None
        return store
