"""In-memory checkpoints and the ``.ulrn`` binary format.

Layout (all integers little-endian u32)::

    b"ULRN1\\n"
    repeated: name_len, name (utf-8), rank, dims[rank], payload (f32 LE, row-major)
    crc32 of every preceding byte

Network architecture is implied by ``fc{i}.weight`` shapes.  Scalars such as
accuracies are stored as one-element ``meta.<key>`` tensors; a generator is
recognised by its ``meta.range`` tensor holding ``[lo, hi]``.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .models import ClassifierSpec, GeneratorSpec, classifier_logits, predict_proba, spec_from_params
from .nncore import ParameterSet

MAGIC = b"ULRN1\n"


@dataclass
class Checkpoint:
    spec: ClassifierSpec | GeneratorSpec
    params: ParameterSet
    meta: dict[str, float] = field(default_factory=dict)

    @property
    def is_generator(self) -> bool:
        return isinstance(self.spec, GeneratorSpec)

    def copy(self) -> "Checkpoint":
        return Checkpoint(self.spec, self.params.copy(), dict(self.meta))

    def logits(self, x: np.ndarray) -> np.ndarray:
        return classifier_logits(self.params, self.spec, x, frozen=True).data

    def proba(self, x: np.ndarray) -> np.ndarray:
        return predict_proba(self.params, self.spec, x)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)


def _tensors(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    out = [(name, t.data) for name, t in ckpt.params.items()]
    if ckpt.is_generator:
        out.append(("meta.range", np.array([ckpt.spec.lo, ckpt.spec.hi])))
    out.extend((f"meta.{k}", np.array([v], dtype=np.float64)) for k, v in ckpt.meta.items())
    return out


def to_bytes(ckpt: Checkpoint) -> bytes:
    buf = bytearray(MAGIC)
    for name, arr in _tensors(ckpt):
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    return bytes(buf)


def from_bytes(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(raw) < len(MAGIC) + 4:
        raise FormatError(f"{source}: truncated at offset {len(raw)}")
    if raw[:len(MAGIC)] != MAGIC:
        raise FormatError(f"{source}: bad magic at offset 0")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError(f"{source}: CRC mismatch at offset {len(body)}")

    pos = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(body):
            raise FormatError(f"{source}: truncated at offset {pos}, need {n} more bytes")
        chunk = body[pos:pos + n]
        pos += n
        return chunk

    params = ParameterSet()
    meta: dict[str, float] = {}
    value_range = None
    while pos < len(body):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(take(4 * count), dtype="<f4").astype(np.float64).reshape(dims)
        if name == "meta.range":
            value_range = (float(arr[0]), float(arr[1]))
        elif name.startswith("meta."):
            meta[name[5:]] = float(arr.reshape(-1)[0])
        else:
            params.add(name, arr)

    dims = spec_from_params(params)
    if value_range is not None:
        spec = GeneratorSpec(dims[0], dims[1:-1], dims[-1], *value_range)
    else:
        spec = ClassifierSpec(dims[0], dims[1:-1], dims[-1])
    return Checkpoint(spec, params, meta)


def save(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)
    return path


def load(path) -> Checkpoint:
    path = Path(path)
    return from_bytes(path.read_bytes(), str(path))
