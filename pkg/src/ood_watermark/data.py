"""Datasets: IDX ingestion, normalization, synthetic ID/OOD sets and shifting augmentations."""

from __future__ import annotations

import gzip
import itertools
import logging
import struct
from collections.abc import Sequence
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import numpy.typing as npt

from .const import IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC, STATS_MAGIC, STD_FLOOR, SYNTHETIC_BOX_BOUND
from .errors import OodWatermarkFormatError, OodWatermarkInvalidArgumentError
from .tensor import SeededRng, Tensor, sample_gaussian

_LOGGER = logging.getLogger(__name__)

SpatialShape = tuple[int, int]


class Shift(str, Enum):
    PERMUTE = "permute"
    ROTATE = "rotate"


# Quadrant orders other than the identity, in lexicographic order.
_QUADRANT_PERMUTATIONS = [p for p in itertools.permutations(range(4)) if p != (0, 1, 2, 3)]


@dataclass(frozen=True)
class NormalizationStats:
    """Mean and standard deviation of an ID training split, one entry per feature.

    Fitted stats are per-dataset scalars repeated over the d features.
    """

    mean: Tensor
    std: Tensor

    @classmethod
    def fit(cls, inputs: npt.ArrayLike) -> NormalizationStats:
        values = np.asarray(inputs, dtype=np.float64)
        if values.ndim != 2 or values.size == 0:
            raise OodWatermarkInvalidArgumentError(f"stats need a non-empty (N, d) array, got {values.shape}")
        mean = float(values.mean())
        std = float(values.std())
        # a constant dataset keeps its scale
        if std < STD_FLOOR:
            std = 1.0
        dim = values.shape[1]
        return cls(np.full(dim, mean, dtype=np.float32), np.full(dim, std, dtype=np.float32))

    @classmethod
    def identity(cls, input_dim: int) -> NormalizationStats:
        return cls(np.zeros(input_dim, dtype=np.float32), np.ones(input_dim, dtype=np.float32))

    @property
    def input_dim(self) -> int:
        return int(self.mean.shape[0])

    def normalize(self, x: npt.ArrayLike) -> Tensor:
        return ((np.asarray(x, dtype=np.float32) - self.mean) / self.std).astype(np.float32)

    def denormalize(self, x: npt.ArrayLike) -> Tensor:
        return (np.asarray(x, dtype=np.float32) * self.std + self.mean).astype(np.float32)

    def to_bytes(self) -> bytes:
        """WMKN sidecar: magic, u32 d, d f32 means, d f32 standard deviations."""
        return b"".join(
            [
                STATS_MAGIC,
                struct.pack("<I", self.input_dim),
                np.ascontiguousarray(self.mean, dtype="<f4").tobytes(),
                np.ascontiguousarray(self.std, dtype="<f4").tobytes(),
            ]
        )

    @classmethod
    def from_bytes(cls, buffer: bytes) -> NormalizationStats:
        if buffer[:4] != STATS_MAGIC:
            raise OodWatermarkFormatError("bad normalization stats magic", 0)
        if len(buffer) < 8:
            raise OodWatermarkFormatError("truncated normalization stats header", len(buffer))
        (dim,) = struct.unpack("<I", buffer[4:8])
        expected = 8 + 8 * dim
        if len(buffer) != expected:
            raise OodWatermarkFormatError(f"stats for d={dim} need {expected} bytes", min(len(buffer), expected))
        mean = np.frombuffer(buffer, dtype="<f4", count=dim, offset=8).astype(np.float32)
        std = np.frombuffer(buffer, dtype="<f4", count=dim, offset=8 + 4 * dim).astype(np.float32)
        return cls(mean, std)


@dataclass(frozen=True)
class LabeledDataset:
    """N inputs of dimension d with labels in [0, class_count)."""

    inputs: Tensor
    labels: npt.NDArray[np.int64]
    class_count: int
    spatial_shape: SpatialShape | None = None
    stats: NormalizationStats | None = None

    def __post_init__(self) -> None:
        if self.inputs.ndim != 2:
            raise OodWatermarkInvalidArgumentError(f"inputs must be (N, d), got {self.inputs.shape}")
        if self.labels.shape != (self.inputs.shape[0],):
            raise OodWatermarkInvalidArgumentError(
                f"{self.labels.shape[0]} labels for {self.inputs.shape[0]} input rows"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise OodWatermarkInvalidArgumentError(f"labels must lie in [0, {self.class_count})")
        if self.spatial_shape is not None and self.spatial_shape[0] * self.spatial_shape[1] != self.inputs.shape[1]:
            raise OodWatermarkInvalidArgumentError(
                f"spatial shape {self.spatial_shape} does not cover d={self.inputs.shape[1]}"
            )

    @property
    def size(self) -> int:
        return int(self.inputs.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.inputs.shape[1])

    def subset(self, index: npt.ArrayLike) -> LabeledDataset:
        rows = np.asarray(index, dtype=np.int64)
        return LabeledDataset(
            self.inputs[rows], self.labels[rows], self.class_count, self.spatial_shape, self.stats
        )


def decode_idx(buffer: bytes, magic: int, what: str = "IDX file") -> npt.NDArray[np.uint8]:
    """Parse a big-endian IDX buffer of unsigned bytes whose magic must equal `magic`."""
    if len(buffer) < 4:
        raise OodWatermarkFormatError(f"{what}: truncated magic", len(buffer))
    (found,) = struct.unpack(">I", buffer[:4])
    if found != magic:
        raise OodWatermarkFormatError(f"{what}: magic 0x{found:08x}, expected 0x{magic:08x}", 0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buffer) < header:
        raise OodWatermarkFormatError(f"{what}: truncated dimension header", len(buffer))
    dims = struct.unpack(f">{ndim}I", buffer[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    if len(buffer) < header + count:
        raise OodWatermarkFormatError(f"{what}: payload holds {len(buffer) - header} of {count} bytes", len(buffer))
    if len(buffer) > header + count:
        raise OodWatermarkFormatError(f"{what}: {len(buffer) - header - count} trailing bytes", header + count)
    return np.frombuffer(buffer, dtype=np.uint8, count=count, offset=header).reshape(dims)


def encode_idx(array: npt.ArrayLike) -> bytes:
    """Inverse of decode_idx for unsigned byte tensors of rank 1 or 3."""
    values = np.asarray(array)
    if values.dtype != np.uint8 or values.ndim not in (1, 3):
        raise OodWatermarkInvalidArgumentError("IDX encoding supports uint8 arrays of rank 1 or 3")
    magic = IDX_LABELS_MAGIC if values.ndim == 1 else IDX_IMAGES_MAGIC
    header = struct.pack(f">I{values.ndim}I", magic, *values.shape)
    return header + np.ascontiguousarray(values).tobytes()


def read_idx_bytes(path: str | Path) -> bytes:
    """Raw file contents, transparently gunzipped for `.gz` files."""
    file_path = Path(path)
    if file_path.suffix == ".gz":
        with gzip.open(file_path, "rb") as handle:
            return handle.read()
    return file_path.read_bytes()


def load_idx_images(
    images_path: str | Path, stats: NormalizationStats | None = None
) -> tuple[Tensor, SpatialShape, NormalizationStats]:
    """Images scaled to [0, 1], flattened, then standardized (fitting stats when none are given)."""
    images = decode_idx(read_idx_bytes(images_path), IDX_IMAGES_MAGIC, f"images {images_path}")
    count, height, width = images.shape
    pixels = images.reshape(count, height * width).astype(np.float32) / np.float32(255.0)
    if stats is None:
        stats = NormalizationStats.fit(pixels)
    elif stats.input_dim != height * width:
        raise OodWatermarkInvalidArgumentError(f"stats cover d={stats.input_dim}, images have d={height * width}")
    return stats.normalize(pixels), (height, width), stats


def load_idx(
    images_path: str | Path,
    labels_path: str | Path,
    stats: NormalizationStats | None = None,
    class_count: int | None = None,
) -> LabeledDataset:
    inputs, spatial_shape, stats = load_idx_images(images_path, stats)
    labels = decode_idx(read_idx_bytes(labels_path), IDX_LABELS_MAGIC, f"labels {labels_path}")
    if labels.shape[0] != inputs.shape[0]:
        raise OodWatermarkFormatError(
            f"labels {labels_path} hold {labels.shape[0]} items but images hold {inputs.shape[0]}", 4
        )
    labels64 = labels.astype(np.int64)
    classes = class_count if class_count is not None else int(labels64.max(initial=-1)) + 1
    _LOGGER.info("loaded %d images of %dx%d from %s", inputs.shape[0], *spatial_shape, images_path)
    return LabeledDataset(inputs, labels64, max(classes, 1), spatial_shape, stats)


@dataclass(frozen=True)
class GaussianBlobs:
    """Unit-variance classes centred on mutually equidistant points."""

    class_count: int
    input_dim: int
    separation: float


@dataclass(frozen=True)
class UniformBox:
    """Unlabeled points drawn uniformly from [-bound, bound]^d."""

    input_dim: int
    bound: float = SYNTHETIC_BOX_BOUND


def blob_centers(class_count: int, input_dim: int, separation: float) -> Tensor:
    """Vertices of a regular simplex with edge length `separation`."""
    if class_count < 1 or input_dim < max(class_count - 1, 1):
        raise OodWatermarkInvalidArgumentError(
            f"{class_count} equidistant centres need at least {max(class_count - 1, 1)} dimensions"
        )
    scale = separation / np.sqrt(2.0)
    if input_dim >= class_count:
        return (scale * np.eye(class_count, input_dim)).astype(np.float32)
    centred = np.eye(class_count) - 1.0 / class_count
    basis, _ = np.linalg.qr(centred[:, : class_count - 1])
    return (scale * centred @ basis).astype(np.float32)


def make_synthetic(kind: GaussianBlobs | UniformBox, n: int, rng: SeededRng) -> LabeledDataset | Tensor:
    if n < 1:
        raise OodWatermarkInvalidArgumentError(f"n must be >= 1, got {n}")
    if isinstance(kind, UniformBox):
        return rng.uniform((n, kind.input_dim), -kind.bound, kind.bound).astype(np.float32)
    centers = blob_centers(kind.class_count, kind.input_dim, kind.separation)
    labels = np.arange(n, dtype=np.int64) % kind.class_count
    inputs = centers[labels] + sample_gaussian(rng, (n, kind.input_dim))
    return LabeledDataset(inputs.astype(np.float32), labels, kind.class_count)


def _shift_image(image: Tensor, kind: Shift, choice: int) -> Tensor:
    height, width = image.shape
    if kind is Shift.ROTATE:
        if height != width:
            raise OodWatermarkInvalidArgumentError(f"rotation needs a square image, got {height}x{width}")
        return np.rot90(image, k=-1)
    if height % 2 or width % 2:
        raise OodWatermarkInvalidArgumentError(f"permute needs even spatial dims, got {height}x{width}")
    h, w = height // 2, width // 2
    blocks = [image[:h, :w], image[:h, w:], image[h:, :w], image[h:, w:]]
    order = _QUADRANT_PERMUTATIONS[choice]
    return np.block([[blocks[order[0]], blocks[order[1]]], [blocks[order[2]], blocks[order[3]]]])


def augment_shift(x: npt.ArrayLike, spatial_shape: SpatialShape, kind: Shift | str, rng: SeededRng) -> Tensor:
    """Quadrant permutation (random non-identity) or clockwise 90 degree rotation.

    Accepts one flattened image or a batch of them; each image draws its own permutation.
    """
    shift = Shift(kind)
    values = np.asarray(x, dtype=np.float32)
    batch = values.reshape(-1, spatial_shape[0] * spatial_shape[1])
    choices = rng.integers(len(_QUADRANT_PERMUTATIONS), batch.shape[0]) if shift is Shift.PERMUTE else None
    shifted = np.empty_like(batch)
    for row in range(batch.shape[0]):
        image = batch[row].reshape(spatial_shape)
        choice = int(choices[row]) if choices is not None else 0
        shifted[row] = _shift_image(image, shift, choice).reshape(-1)
    return shifted.reshape(values.shape)


def augment_batch(
    x: npt.ArrayLike, spatial_shape: SpatialShape, kinds: Sequence[Shift | str], rng: SeededRng
) -> Tensor:
    """Shift every row with a kind picked uniformly from `kinds`."""
    if not kinds:
        raise OodWatermarkInvalidArgumentError("at least one shifting augmentation is required")
    shifts = [Shift(k) for k in kinds]
    values = np.asarray(x, dtype=np.float32).reshape(-1, spatial_shape[0] * spatial_shape[1])
    picks = rng.integers(len(shifts), values.shape[0])
    shifted = np.empty_like(values)
    for position, shift in enumerate(shifts):
        rows = np.flatnonzero(picks == position)
        if rows.size:
            shifted[rows] = augment_shift(values[rows], spatial_shape, shift, rng)
    return shifted


def shift_normalized(
    x: npt.ArrayLike,
    spatial_shape: SpatialShape,
    kinds: Sequence[Shift | str],
    rng: SeededRng,
    stats: NormalizationStats | None,
) -> Tensor:
    """Apply shifting augmentations in pixel space to standardized inputs."""
    if stats is None:
        return augment_batch(x, spatial_shape, kinds, rng)
    return stats.normalize(augment_batch(stats.denormalize(x), spatial_shape, kinds, rng))
