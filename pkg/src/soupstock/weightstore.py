"""Named tensor collections and the bit-exact checkpoint codec.

A :class:`WeightMap` is an ordered (lexicographic by name) collection of
float32 tensors plus optional string metadata. It is the universal currency of
the package: a model, a pivot, a pseudogradient, or a batch of image tensors
are all WeightMaps. Maps are immutable after construction and safe to share
across threads; every elementwise operation returns a fresh map and is
deterministic (fixed per-element evaluation, no reduction reordering within a
tensor).

Checkpoint file layout (little-endian throughout):

    8-byte unsigned header length H
    H bytes of UTF-8 JSON: {name: {"dtype": "F32"|"F16"|"BF16",
                                   "shape": [ints],
                                   "data_offsets": [begin, end]}, ...,
                            "__metadata__": {str: str}}   (optional)
    raw tensor buffer; offsets are relative to the buffer start

Narrow float tensors (F16/BF16) are widened to float32 on load and written
back as F32; float32 round-trips are byte-exact.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from typing import Iterator, Mapping

import numpy as np

__all__ = [
    "CheckpointError",
    "SchemaMismatch",
    "TensorView",
    "Schema",
    "WeightMap",
    "load_checkpoint",
    "save_checkpoint",
    "validate_compatible",
    "axpby",
    "zeros_like",
    "scale",
    "elementwise_square",
    "elementwise_sqrt_add_eps",
    "elementwise_div",
    "global_l2_norm",
    "l2_distance",
]

_F32 = np.dtype("<f4")
_MAX_HEADER_BYTES = 100 * 1024 * 1024


class CheckpointError(ValueError):
    """Raised for malformed, truncated, or otherwise invalid checkpoints."""


class SchemaMismatch(ValueError):
    """Raised when two weight maps do not share the same tensor layout."""


@dataclass(frozen=True)
class TensorView:
    """One named tensor: a flat row-major float buffer plus its shape."""

    name: str
    dtype: str
    shape: tuple[int, ...]
    data: np.ndarray

    def __post_init__(self) -> None:
        if math.prod(self.shape) != self.data.size:
            raise ValueError(
                f"tensor {self.name!r}: shape {self.shape} does not match "
                f"{self.data.size} elements"
            )


@dataclass(frozen=True)
class Schema:
    """The (name, dtype, shape) layout shared by compatible weight maps."""

    entries: tuple[tuple[str, str, tuple[int, ...]], ...]

    def __len__(self) -> int:
        return len(self.entries)


class WeightMap:
    """Immutable ordered mapping of tensor names to float32 arrays."""

    __slots__ = ("_arrays", "metadata")

    def __init__(
        self,
        arrays: Mapping[str, np.ndarray],
        metadata: Mapping[str, str] | None = None,
    ) -> None:
        out: dict[str, np.ndarray] = {}
        for name in sorted(arrays):
            arr = np.asarray(arrays[name], dtype=np.float32)
            arr = np.ascontiguousarray(arr)
            arr.setflags(write=False)
            out[name] = arr
        self._arrays = out
        self.metadata = dict(metadata) if metadata else {}

    @classmethod
    def _wrap(
        cls, sorted_arrays: dict[str, np.ndarray], metadata: dict[str, str] | None = None
    ) -> "WeightMap":
        # Fast path for internal ops: arrays already float32, read-only, and in
        # lexicographic key order.
        self = cls.__new__(cls)
        self._arrays = sorted_arrays
        self.metadata = metadata or {}
        return self

    def names(self) -> list[str]:
        return list(self._arrays)

    def arrays(self) -> dict[str, np.ndarray]:
        """The underlying read-only arrays, in iteration order."""
        return dict(self._arrays)

    def array(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def tensor(self, name: str) -> TensorView:
        arr = self._arrays[name]
        return TensorView(name, "F32", arr.shape, arr.reshape(-1))

    def tensors(self) -> dict[str, TensorView]:
        return {name: self.tensor(name) for name in self._arrays}

    def schema(self) -> Schema:
        return Schema(tuple((n, "F32", a.shape) for n, a in self._arrays.items()))

    def num_elements(self) -> int:
        return sum(a.size for a in self._arrays.values())

    def __len__(self) -> int:
        return len(self._arrays)

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __eq__(self, other: object) -> bool:
        # Bitwise equality: names, shapes, raw bytes (distinguishes -0.0, NaN
        # payloads), and metadata.
        if not isinstance(other, WeightMap):
            return NotImplemented
        if self.metadata != other.metadata:
            return False
        if list(self._arrays) != list(other._arrays):
            return False
        for name, arr in self._arrays.items():
            theirs = other._arrays[name]
            if arr.shape != theirs.shape or arr.tobytes() != theirs.tobytes():
                return False
        return True

    def __repr__(self) -> str:
        return f"WeightMap({len(self._arrays)} tensors, {self.num_elements()} elements)"


def _check_compatible(a: WeightMap, b: WeightMap) -> None:
    if list(a._arrays) != list(b._arrays):
        ours, theirs = set(a._arrays), set(b._arrays)
        diff = sorted(ours.symmetric_difference(theirs))
        raise SchemaMismatch(f"tensor name mismatch: first offender {diff[0]!r}")
    for name, arr in a._arrays.items():
        if arr.shape != b._arrays[name].shape:
            raise SchemaMismatch(
                f"shape mismatch for tensor {name!r}: "
                f"{arr.shape} vs {b._arrays[name].shape}"
            )


def validate_compatible(maps: list[WeightMap]) -> Schema:
    """Check that all maps share one schema and return it.

    Raises :class:`SchemaMismatch` naming the first offending tensor.
    """
    if not maps:
        raise ValueError("validate_compatible requires at least one weight map")
    first = maps[0]
    for other in maps[1:]:
        _check_compatible(first, other)
    return first.schema()


def _binary(a: WeightMap, b: WeightMap, fn) -> WeightMap:
    _check_compatible(a, b)
    out: dict[str, np.ndarray] = {}
    for name, arr in a._arrays.items():
        res = fn(arr, b._arrays[name])
        res.setflags(write=False)
        out[name] = res
    return WeightMap._wrap(out)


def _unary(m: WeightMap, fn) -> WeightMap:
    out: dict[str, np.ndarray] = {}
    for name, arr in m._arrays.items():
        res = fn(arr)
        res.setflags(write=False)
        out[name] = res
    return WeightMap._wrap(out)


def axpby(alpha: float, x: WeightMap, beta: float, y: WeightMap) -> WeightMap:
    """Elementwise alpha*x + beta*y, computed as fl(alpha*x_e) + fl(beta*y_e)."""
    a = np.float32(alpha)
    b = np.float32(beta)
    return _binary(x, y, lambda u, v: a * u + b * v)


def zeros_like(m: WeightMap) -> WeightMap:
    return _unary(m, lambda a: np.zeros_like(a))


def scale(c: float, m: WeightMap) -> WeightMap:
    f = np.float32(c)
    return _unary(m, lambda a: f * a)


def elementwise_square(m: WeightMap) -> WeightMap:
    return _unary(m, lambda a: a * a)


def elementwise_sqrt_add_eps(m: WeightMap, eps: float) -> WeightMap:
    """sqrt(v) + eps per element (the adaptive-denominator primitive)."""
    e = np.float32(eps)
    return _unary(m, lambda a: np.sqrt(a) + e)


def elementwise_div(a: WeightMap, b: WeightMap) -> WeightMap:
    return _binary(a, b, lambda u, v: u / v)


def global_l2_norm(m: WeightMap) -> float:
    """Euclidean norm over all elements of all tensors (float64 accumulation)."""
    total = 0.0
    for arr in m._arrays.values():
        flat = arr.reshape(-1).astype(np.float64)
        total += float(np.dot(flat, flat))
    return math.sqrt(total)


def l2_distance(a: WeightMap, b: WeightMap) -> float:
    _check_compatible(a, b)
    total = 0.0
    for name, arr in a._arrays.items():
        d = arr.reshape(-1).astype(np.float64) - b._arrays[name].reshape(-1).astype(np.float64)
        total += float(np.dot(d, d))
    return math.sqrt(total)


# --- checkpoint codec -------------------------------------------------------

_DTYPE_SIZES = {"F32": 4, "F16": 2, "BF16": 2}


def _reject_duplicate_names(pairs: list[tuple[str, object]]) -> dict:
    seen: dict[str, object] = {}
    for key, value in pairs:
        if key in seen:
            raise CheckpointError(f"duplicate tensor name in header: {key!r}")
        seen[key] = value
    return seen


def _widen(raw: bytes, dtype: str) -> np.ndarray:
    if dtype == "F32":
        return np.frombuffer(raw, dtype=_F32).astype(np.float32)
    if dtype == "F16":
        return np.frombuffer(raw, dtype=np.dtype("<f2")).astype(np.float32)
    # BF16 is the upper half of a float32; widen by shifting into place.
    bits = np.frombuffer(raw, dtype=np.dtype("<u2")).astype(np.uint32)
    return (bits << np.uint32(16)).view(np.float32).astype(np.float32)


def load_checkpoint(path: str, allow_nonfinite: bool = False) -> WeightMap:
    """Load a checkpoint file into a WeightMap.

    F16/BF16 tensors are widened to float32; metadata is preserved. NaN/Inf
    elements are rejected unless ``allow_nonfinite`` is set.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise CheckpointError(f"{path}: truncated buffer (no header length)")
    (header_len,) = struct.unpack("<Q", blob[:8])
    if header_len > _MAX_HEADER_BYTES:
        raise CheckpointError(f"{path}: malformed header (implausible length {header_len})")
    if 8 + header_len > len(blob):
        raise CheckpointError(f"{path}: truncated buffer (header extends past end of file)")
    try:
        header = json.loads(
            blob[8 : 8 + header_len].decode("utf-8"),
            object_pairs_hook=_reject_duplicate_names,
        )
    except CheckpointError:
        raise
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed header ({exc})") from exc
    if not isinstance(header, dict):
        raise CheckpointError(f"{path}: malformed header (not a JSON object)")

    buffer = blob[8 + header_len :]
    metadata: dict[str, str] = {}
    ranges: list[tuple[int, int, str]] = []
    arrays: dict[str, np.ndarray] = {}
    for name, entry in header.items():
        if name == "__metadata__":
            if not isinstance(entry, dict) or not all(
                isinstance(k, str) and isinstance(v, str) for k, v in entry.items()
            ):
                raise CheckpointError(f"{path}: malformed header (__metadata__ must map str to str)")
            metadata = dict(entry)
            continue
        if not isinstance(entry, dict):
            raise CheckpointError(f"{path}: malformed header (entry {name!r} not an object)")
        dtype = entry.get("dtype")
        shape = entry.get("shape")
        offsets = entry.get("data_offsets")
        if dtype not in _DTYPE_SIZES:
            raise CheckpointError(f"{path}: malformed header (unsupported dtype {dtype!r} for {name!r})")
        if (
            not isinstance(shape, list)
            or not all(isinstance(d, int) and not isinstance(d, bool) and d >= 0 for d in shape)
        ):
            raise CheckpointError(f"{path}: malformed header (bad shape for {name!r})")
        if (
            not isinstance(offsets, list)
            or len(offsets) != 2
            or not all(isinstance(o, int) and not isinstance(o, bool) for o in offsets)
        ):
            raise CheckpointError(f"{path}: malformed header (bad data_offsets for {name!r})")
        begin, end = offsets
        if begin < 0 or end < begin:
            raise CheckpointError(f"{path}: malformed header (inverted offsets for {name!r})")
        if end > len(buffer):
            raise CheckpointError(f"{path}: truncated buffer (tensor {name!r} ends past end of data)")
        expected = math.prod(shape) * _DTYPE_SIZES[dtype]
        if end - begin != expected:
            raise CheckpointError(
                f"{path}: malformed header (tensor {name!r} declares {end - begin} bytes, "
                f"shape needs {expected})"
            )
        ranges.append((begin, end, name))
        arr = _widen(buffer[begin:end], dtype).reshape(shape)
        if not allow_nonfinite and not np.isfinite(arr).all():
            raise CheckpointError(
                f"{path}: tensor {name!r} contains NaN/Inf "
                f"(pass allow_nonfinite=True to accept)"
            )
        arrays[name] = arr

    ranges.sort()
    for (b0, e0, n0), (b1, _e1, n1) in zip(ranges, ranges[1:]):
        if b1 < e0:
            raise CheckpointError(f"{path}: overlapping data ranges ({n0!r} and {n1!r})")

    return WeightMap(arrays, metadata)


def save_checkpoint(weightmap: WeightMap, path: str) -> None:
    """Write a WeightMap as a float32 checkpoint; load(save(m)) == m bit-exactly."""
    header: dict[str, object] = {}
    if weightmap.metadata:
        for key, value in weightmap.metadata.items():
            if not isinstance(key, str) or not isinstance(value, str):
                raise CheckpointError("metadata must map str to str")
        header["__metadata__"] = dict(sorted(weightmap.metadata.items()))
    offset = 0
    chunks: list[bytes] = []
    for name, arr in weightmap._arrays.items():
        raw = np.ascontiguousarray(arr, dtype=_F32).tobytes()
        header[name] = {
            "dtype": "F32",
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(raw)],
        }
        offset += len(raw)
        chunks.append(raw)
    header_bytes = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for chunk in chunks:
            fh.write(chunk)
