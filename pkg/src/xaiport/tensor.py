"""Dense float32 tensors, a portable SplitMix64 generator and the XTEN codec.

Tensors are plain row-major ``numpy.float32`` arrays.  Public operations never
modify their inputs and always return fresh arrays.
"""

from __future__ import annotations

import struct
from typing import Iterable, Sequence

import numpy as np

from .errors import ShapeError, XtenFormatError

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB

XTEN_MAGIC = b"XTEN1"


def as_tensor(values) -> np.ndarray:
    """Copy ``values`` into a contiguous float32 array (rank >= 1)."""
    arr = np.array(values, dtype=np.float32, copy=True, order="C")
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return arr


# ----------------------------------------------------------------------------
# Random numbers
# ----------------------------------------------------------------------------


def splitmix64_mix(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * MIX1) & MASK64
    z = ((z ^ (z >> 27)) * MIX2) & MASK64
    return z ^ (z >> 31)


class Rng:
    """SplitMix64 stream.

    Every draw advances the 64-bit state by the golden gamma and mixes it.
    ``next_f32`` keeps the top 24 bits, so values are exact float32 numbers
    in ``[0, 1)``.  Instances are single-owner; use :meth:`split` to hand an
    independent stream to another worker.
    """

    def __init__(self, seed: int = 0):
        self.state = int(seed) & MASK64

    def __repr__(self) -> str:
        return f"Rng(state=0x{self.state:016x})"

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return splitmix64_mix(self.state)

    def next_f32(self) -> float:
        return (self.next_u64() >> 40) / 16777216.0

    def uniform(self, n: int) -> np.ndarray:
        """Draw ``n`` values at once; identical to ``n`` calls of :meth:`next_f32`."""
        if n <= 0:
            return np.zeros(0, dtype=np.float32)
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(GOLDEN_GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * GOLDEN_GAMMA) & MASK64
        return ((z >> np.uint64(40)).astype(np.float64) / 16777216.0).astype(np.float32)

    def below(self, n: int) -> int:
        """Uniform integer in ``[0, n)``."""
        return min(int(self.next_f32() * n), n - 1)

    def permutation(self, n: int) -> np.ndarray:
        # Fisher-Yates driven by our own stream so the order is portable.
        order = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            order[i], order[j] = order[j], order[i]
        return order

    def split(self, stream: int) -> "Rng":
        return Rng(self.state ^ (int(stream) & MASK64))


def rng_next_f32(rng: Rng) -> tuple[Rng, float]:
    """Functional form of :meth:`Rng.next_f32`; returns a new generator."""
    nxt = Rng(rng.state)
    value = nxt.next_f32()
    return nxt, value


# ----------------------------------------------------------------------------
# Arithmetic
# ----------------------------------------------------------------------------

_BINARY = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def elementwise(op: str, a, b=None, scale: float | None = None) -> np.ndarray:
    """Apply ``add``, ``sub``, ``mul``, ``relu`` or ``scale`` elementwise."""
    a = np.asarray(a, dtype=np.float32)
    if op in _BINARY:
        if b is None:
            raise ValueError(f"{op} needs two operands")
        b = np.asarray(b, dtype=np.float32)
        if a.shape != b.shape:
            raise ShapeError(f"shape mismatch: {list(a.shape)} vs {list(b.shape)}")
        return _BINARY[op](a, b).astype(np.float32)
    if op == "relu":
        return np.maximum(a, np.float32(0.0))
    if op == "scale":
        if scale is None:
            raise ValueError("scale needs a constant")
        return (a * np.float32(scale)).astype(np.float32)
    raise ValueError(f"unknown elementwise op {op!r}")


def relu(a) -> np.ndarray:
    return elementwise("relu", a)


def reduce(op: str, a, axes: int | Sequence[int] | None = None) -> np.ndarray:
    """Sum, mean or max over ``axes`` (all axes when None).

    Sums and means accumulate in float64 and round to float32 once.  A full
    reduction returns shape ``(1,)``.
    """
    a = np.asarray(a, dtype=np.float32)
    if axes is None:
        axes_t = tuple(range(a.ndim))
    else:
        axes_t = (axes,) if isinstance(axes, int) else tuple(axes)
        for ax in axes_t:
            if not -a.ndim <= ax < a.ndim:
                raise ShapeError(f"invalid axis {ax} for dims {list(a.shape)}")
        axes_t = tuple(sorted({ax % a.ndim for ax in axes_t}))
    if op == "sum":
        out = np.sum(a, axis=axes_t, dtype=np.float64)
    elif op == "mean":
        out = np.mean(a, axis=axes_t, dtype=np.float64)
    elif op == "max":
        out = np.max(a, axis=axes_t)
    else:
        raise ValueError(f"unknown reduction {op!r}")
    out = np.asarray(out, dtype=np.float32)
    return out.reshape(1) if out.ndim == 0 else out


# ----------------------------------------------------------------------------
# XTEN
# ----------------------------------------------------------------------------


def to_xten(a) -> bytes:
    a = np.ascontiguousarray(a, dtype="<f4")
    if a.ndim == 0:
        a = a.reshape(1)
    head = XTEN_MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes()


def from_xten(blob: bytes) -> np.ndarray:
    if not blob.startswith(XTEN_MAGIC):
        raise XtenFormatError("missing XTEN1 magic")
    pos = len(XTEN_MAGIC)
    if len(blob) < pos + 4:
        raise XtenFormatError("truncated header")
    (rank,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if len(blob) < pos + 4 * rank:
        raise XtenFormatError("truncated extents")
    dims = struct.unpack_from(f"<{rank}I", blob, pos)
    pos += 4 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(blob) - pos != 4 * count:
        raise XtenFormatError(f"payload holds {len(blob) - pos} bytes, dims {list(dims)} need {4 * count}")
    data = np.frombuffer(blob, dtype="<f4", offset=pos, count=count)
    return data.astype(np.float32).reshape(dims)


def payload_bytes(a) -> bytes:
    """Raw little-endian float32 payload (no header)."""
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def from_payload(raw: bytes, dims: Iterable[int]) -> np.ndarray:
    dims = tuple(int(d) for d in dims)
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) != 4 * count:
        raise XtenFormatError(f"payload holds {len(raw)} bytes, dims {list(dims)} need {4 * count}")
    return np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)
