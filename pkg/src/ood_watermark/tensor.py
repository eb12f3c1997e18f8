"""Dense float32 tensors, a seeded generator and a finite-difference oracle.

Tensors are plain numpy arrays of dtype float32; reductions accumulate in float64.
Public operations return fresh arrays and never modify their inputs.
"""

from __future__ import annotations

import zlib
from collections.abc import Callable, Sequence
from typing import Any

import numpy as np
import numpy.typing as npt

from .const import FD_STEP
from .errors import OodWatermarkInvalidArgumentError


Tensor = npt.NDArray[np.float32]
FloatArray = npt.NDArray[np.floating[Any]]
Shape = int | Sequence[int]

_UINT64_MASK = 0xFFFF_FFFF_FFFF_FFFF


def stage_seed(seed: int, stage: str) -> int:
    """64-bit seed for one named stage, mixed from the run seed by SeedSequence."""
    sequence = np.random.SeedSequence([int(seed) & _UINT64_MASK, zlib.crc32(stage.encode("utf-8"))])
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


def as_tensor(values: npt.ArrayLike, name: str = "tensor") -> Tensor:
    """Convert to a float32 tensor, rejecting NaN and infinite elements."""
    tensor = np.asarray(values, dtype=np.float32)
    ensure_finite(tensor, name)
    return tensor


def ensure_finite(values: npt.NDArray[Any], name: str = "tensor") -> None:
    if not np.all(np.isfinite(values)):
        raise OodWatermarkInvalidArgumentError(f"{name} contains NaN or infinite values")


def extents(shape: Shape) -> tuple[int, ...]:
    """Normalize a shape argument, requiring every extent to be positive."""
    dims = (shape,) if isinstance(shape, int) else tuple(int(s) for s in shape)
    if not dims or any(d < 1 for d in dims):
        raise OodWatermarkInvalidArgumentError(f"shape extents must be positive, got {dims}")
    return dims


class SeededRng:
    """Single-owner random source built on numpy's PCG64 bit generator.

    Identical seeds produce identical streams on every platform numpy supports.
    """

    def __init__(self, seed: int) -> None:
        self.seed = int(seed) & _UINT64_MASK
        self._generator = np.random.Generator(np.random.PCG64(self.seed))

    @classmethod
    def derive(cls, seed: int, stage: str) -> SeededRng:
        """Independent generator for one pipeline stage of a seeded run."""
        return cls(stage_seed(seed, stage))

    def uniform(self, shape: Shape, low: float = 0.0, high: float = 1.0) -> npt.NDArray[np.float64]:
        return self._generator.uniform(low, high, size=extents(shape))

    def integers(self, high: int, size: int) -> npt.NDArray[np.int64]:
        return self._generator.integers(0, high, size=size, dtype=np.int64)

    def permutation(self, n: int) -> npt.NDArray[np.int64]:
        return self._generator.permutation(n).astype(np.int64)

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed})"


def sample_gaussian(rng: SeededRng, shape: Shape, mean: float = 0.0, std: float = 1.0) -> Tensor:
    """I.i.d. normal draws through the Box-Muller transform of the seeded uniform stream.

    Each pair of uniforms (u1, u2) yields r*cos(theta) and r*sin(theta), interleaved in
    row-major order; an odd element count discards the final sine.
    """
    if std < 0:
        raise OodWatermarkInvalidArgumentError(f"std must be >= 0, got {std}")
    dims = extents(shape)
    count = int(np.prod(dims, dtype=np.int64))
    pairs = (count + 1) // 2
    u1 = 1.0 - rng.uniform(pairs)  # (0, 1], keeps the log finite
    u2 = rng.uniform(pairs)
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    normals = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1).reshape(-1)[:count]
    return (mean + std * normals).astype(np.float32).reshape(dims)


def signum(t: npt.ArrayLike) -> Tensor:
    """Elementwise sign with sign(0) = 0."""
    return np.sign(as_tensor(t, "signum input")).astype(np.float32)


def fd_gradient(loss: Callable[[FloatArray], float], at: npt.ArrayLike, h: float = FD_STEP) -> npt.NDArray[np.float64]:
    """Central finite differences of a scalar loss, evaluated in float64."""
    if h <= 0:
        raise OodWatermarkInvalidArgumentError(f"step h must be > 0, got {h}")
    point = np.array(at, dtype=np.float64)
    grad = np.zeros_like(point)
    flat = point.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        upper = float(loss(point.copy()))
        flat[i] = original - h
        lower = float(loss(point.copy()))
        flat[i] = original
        grad.flat[i] = (upper - lower) / (2.0 * h)
    return grad


def gradient_relative_error(analytic: npt.ArrayLike, numeric: npt.ArrayLike) -> float:
    """Largest absolute deviation relative to the largest oracle component."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.max(np.abs(n), initial=0.0)), float(np.max(np.abs(a), initial=0.0)))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(a - n)) / scale)
