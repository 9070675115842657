"""Mask scores, top-k thresholding, mask combination and bit packing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

COMBINE_MODES = ("OR", "AND", "ADD")
SCORE_INIT_RANGE = 0.1


def _check_k(k) -> None:
    if not 0 < k <= 1:
        raise ValueError(f"sparsity k must lie in (0, 1], got {k}")


def k_fraction(k) -> Fraction:
    """Exact value of a sparsity ratio; floats are read as their shortest repr, so 0.3 is 3/10."""
    return Fraction(repr(float(k))) if isinstance(k, (float, np.floating)) else Fraction(k)


def num_ones(k, n: int) -> int:
    """round(k * n), half rounded up, computed exactly."""
    _check_k(k)
    return math.floor(k_fraction(k) * n + Fraction(1, 2))


def topk_bits(values: np.ndarray, k) -> np.ndarray:
    """Boolean array with ones at the round(k*n) largest |values|.

    Ties are broken by the lowest flat index.
    """
    v = np.asarray(values)
    n = v.size
    if n == 0:
        raise ValueError("threshold_topk: empty scores")
    ones = num_ones(k, n)
    out = np.zeros(n, dtype=bool)
    if ones == n:
        out[:] = True
    elif ones > 0:
        # stable sort on -|s| keeps equal magnitudes in index order
        order = np.argsort(-np.abs(v.reshape(-1)), kind="stable")
        out[order[:ones]] = True
    return out.reshape(v.shape)


def combine_bits(a: np.ndarray, b: np.ndarray, mode: str) -> np.ndarray:
    if a.shape != b.shape:
        raise ValueError(f"combine: shape mismatch {a.shape} vs {b.shape}")
    if mode == "OR":
        return np.logical_or(a, b)
    if mode == "AND":
        return np.logical_and(a, b)
    if mode == "ADD":
        return np.minimum(a.astype(np.uint8) + b.astype(np.uint8), 1).astype(bool)
    raise ValueError(f"unknown combine mode {mode!r}; expected one of {COMBINE_MODES}")


@dataclass
class MaskScores:
    """Real-valued scores behind one binary mask."""

    name: str
    values: np.ndarray
    k: float

    def __post_init__(self):
        _check_k(self.k)
        self.values = np.asarray(self.values, dtype=np.float32)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @classmethod
    def init(cls, name: str, shape, k: float, rng: np.random.Generator) -> "MaskScores":
        vals = rng.uniform(-SCORE_INIT_RANGE, SCORE_INIT_RANGE, size=shape).astype(np.float32)
        return cls(name, vals, k)


@dataclass(frozen=True)
class BinaryMask:
    name: str
    bits: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "bits", np.asarray(self.bits, dtype=bool))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.bits.shape

    @property
    def size(self) -> int:
        return self.bits.size

    def popcount(self) -> int:
        return int(self.bits.sum())

    def as_float(self) -> np.ndarray:
        return self.bits.astype(np.float32)

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.bits.shape == other.bits.shape and bool(np.array_equal(self.bits, other.bits))

    __hash__ = None


def threshold_topk(scores: MaskScores) -> BinaryMask:
    return BinaryMask(scores.name, topk_bits(scores.values, scores.k))


def combine(a: BinaryMask, b: BinaryMask, mode: str = "OR") -> BinaryMask:
    """Elementwise OR / AND / saturating ADD of two masks."""
    return BinaryMask(a.name, combine_bits(a.bits, b.bits, mode))


def density(mask: BinaryMask) -> float:
    if mask.size == 0:
        raise ValueError("density of an empty mask")
    return mask.popcount() / mask.size


def random_mask(name: str, shape, k: float, rng: np.random.Generator) -> BinaryMask:
    """Uniformly random mask with exactly round(k*n) ones."""
    return BinaryMask(name, topk_bits(rng.uniform(-1.0, 1.0, size=shape), k))


def packed_size(n: int) -> int:
    return (n + 7) // 8


def pack(mask: BinaryMask) -> bytes:
    """LSB-first within each byte, row-major, zero-padded final byte."""
    return np.packbits(mask.bits.reshape(-1), bitorder="little").tobytes()


def unpack(data: bytes, shape, name: str = "") -> BinaryMask:
    shape = tuple(int(s) for s in shape)
    n = math.prod(shape)
    if len(data) != packed_size(n):
        raise ValueError(f"unpack: expected {packed_size(n)} bytes for {n} bits, got {len(data)}")
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
    if bits[n:].any():
        raise ValueError("unpack: non-zero pad bits")
    return BinaryMask(name, bits[:n].astype(bool).reshape(shape))
