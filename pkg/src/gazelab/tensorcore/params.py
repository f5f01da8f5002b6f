"""Named parameter collections and the ``GZLB-P1`` checkpoint format.

Layout (little endian)::

    b"GZLB-P1"
    repeated until EOF:
        u32 name length, UTF-8 name, u32 rank, u32 dims[rank], f64 data[prod(dims)]
"""

from __future__ import annotations

import hashlib
import io
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"GZLB-P1"


class CheckpointError(ValueError):
    pass


class ParamSet:
    """Mapping of unique names to trainable tensors, iterated in sorted order."""

    def __init__(self, params: dict | None = None, rng_seed: int = 0):
        self._params: dict[str, Tensor] = {}
        self.rng_seed = int(rng_seed)
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(sorted(self._params))

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        return [(k, self._params[k]) for k in self.names()]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.items()}

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        """Gradients by name; parameters untouched by backward get zeros."""
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in self.items()}

    def subset(self, prefix: str) -> "ParamSet":
        """View of the parameters whose names start with ``prefix`` (shares tensors)."""
        sub = ParamSet(rng_seed=self.rng_seed)
        for k, t in self.items():
            if k.startswith(prefix):
                sub._params[k] = t
        return sub

    def copy(self) -> "ParamSet":
        return ParamSet({k: t.data.copy() for k, t in self.items()}, rng_seed=self.rng_seed)

    def num_values(self) -> int:
        return sum(t.size for t in self._params.values())

    # serialization

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        for name, t in self.items():
            raw = name.encode("utf-8")
            buf.write(struct.pack("<I", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<I", t.ndim))
            buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
            buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes, rng_seed: int = 0) -> "ParamSet":
        if not blob.startswith(MAGIC):
            raise CheckpointError("not a GZLB-P1 parameter checkpoint (bad magic)")
        pos = len(MAGIC)
        params = {}
        try:
            while pos < len(blob):
                (nlen,) = struct.unpack_from("<I", blob, pos)
                pos += 4
                name = blob[pos:pos + nlen].decode("utf-8")
                pos += nlen
                (rank,) = struct.unpack_from("<I", blob, pos)
                pos += 4
                dims = struct.unpack_from(f"<{rank}I", blob, pos)
                pos += 4 * rank
                count = int(np.prod(dims)) if rank else 1
                data = np.frombuffer(blob, dtype="<f8", count=count, offset=pos)
                pos += 8 * count
                params[name] = data.astype(np.float64).reshape(dims)
        except (struct.error, ValueError, UnicodeDecodeError) as exc:
            raise CheckpointError(f"truncated or corrupt checkpoint: {exc}") from None
        return cls(params, rng_seed=rng_seed)

    def save(self, path) -> None:
        write_atomic(path, self.to_bytes())

    @classmethod
    def load(cls, path, rng_seed: int = 0) -> "ParamSet":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        return cls.from_bytes(path.read_bytes(), rng_seed=rng_seed)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def write_atomic(path, blob: bytes | str) -> None:
    """Write via a temp file in the same directory followed by rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(blob, str):
        blob = blob.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
