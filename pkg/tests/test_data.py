import gzip
import struct

import numpy as np
import pytest

from ood_watermark.const import IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC
from ood_watermark.data import (
    GaussianBlobs,
    LabeledDataset,
    NormalizationStats,
    Shift,
    UniformBox,
    augment_batch,
    augment_shift,
    blob_centers,
    decode_idx,
    encode_idx,
    load_idx,
    make_synthetic,
    shift_normalized,
)
from ood_watermark.errors import OodWatermarkFormatError, OodWatermarkInvalidArgumentError
from ood_watermark.tensor import SeededRng

PIXELS = np.array([[[0, 255], [255, 0]], [[255, 255], [0, 0]]], dtype=np.uint8)


@pytest.fixture
def idx_files(tmp_path):
    images = tmp_path / "images.idx"
    labels = tmp_path / "labels.idx"
    images.write_bytes(encode_idx(PIXELS))
    labels.write_bytes(encode_idx(np.array([1, 0], dtype=np.uint8)))
    return images, labels


def test_idx_header_layout():
    buffer = encode_idx(PIXELS)
    assert struct.unpack(">IIII", buffer[:16]) == (IDX_IMAGES_MAGIC, 2, 2, 2)
    assert len(buffer) == 16 + 8
    assert np.array_equal(decode_idx(buffer, IDX_IMAGES_MAGIC), PIXELS)
    assert encode_idx(decode_idx(buffer, IDX_IMAGES_MAGIC)) == buffer


def test_load_idx(idx_files):
    images, labels = idx_files
    data = load_idx(images, labels)
    assert data.size == 2
    assert data.input_dim == 4
    assert data.spatial_shape == (2, 2)
    assert data.labels.tolist() == [1, 0]
    assert data.class_count == 2
    restored = data.stats.denormalize(data.inputs)
    assert np.allclose(restored, PIXELS.reshape(2, 4) / 255.0, atol=1e-6)


def test_load_gzipped_idx(tmp_path, idx_files):
    images, labels = idx_files
    packed = tmp_path / "images.idx.gz"
    with gzip.open(packed, "wb") as handle:
        handle.write(images.read_bytes())
    assert np.array_equal(load_idx(packed, labels).inputs, load_idx(images, labels).inputs)


def test_labels_file_with_image_magic(idx_files):
    images, _ = idx_files
    with pytest.raises(OodWatermarkFormatError) as err:
        load_idx(images, images)
    assert err.value.offset == 0


def test_label_count_mismatch(tmp_path, idx_files):
    images, _ = idx_files
    labels = tmp_path / "three.idx"
    labels.write_bytes(encode_idx(np.array([0, 1, 1], dtype=np.uint8)))
    with pytest.raises(OodWatermarkFormatError) as err:
        load_idx(images, labels)
    assert err.value.offset == 4


def test_truncated_idx_payload():
    with pytest.raises(OodWatermarkFormatError):
        decode_idx(encode_idx(PIXELS)[:-1], IDX_IMAGES_MAGIC)
    with pytest.raises(OodWatermarkFormatError):
        decode_idx(b"\x00\x00", IDX_LABELS_MAGIC)


def test_normalization_stats():
    values = np.random.default_rng(0).normal(5.0, 3.0, size=(500, 4))
    stats = NormalizationStats.fit(values)
    assert np.all(stats.mean == stats.mean[0])
    assert np.all(stats.std == stats.std[0])
    normalized = stats.normalize(values).astype(np.float64)
    assert normalized.mean() == pytest.approx(0.0, abs=1e-4)
    assert normalized.std() == pytest.approx(1.0, abs=1e-4)


def test_idx_with_constant_pixels_is_standardized(tmp_path):
    pixels = np.random.default_rng(4).integers(0, 256, size=(50, 6, 6)).astype(np.uint8)
    pixels[:, :, 0] = 0
    pixels[:, 0, :] = 255
    images = tmp_path / "images.idx"
    labels = tmp_path / "labels.idx"
    images.write_bytes(encode_idx(pixels))
    labels.write_bytes(encode_idx(np.zeros(50, dtype=np.uint8)))
    normalized = load_idx(images, labels).inputs.astype(np.float64)
    assert normalized.mean() == pytest.approx(0.0, abs=1e-3)
    assert normalized.std() == pytest.approx(1.0, abs=1e-3)
    # a constant border pixel is not pinned to zero
    assert not np.allclose(normalized[:, 1], 0.0)


def test_stats_need_data():
    with pytest.raises(OodWatermarkInvalidArgumentError):
        NormalizationStats.fit(np.zeros((0, 3)))


def test_constant_feature_keeps_unit_scale():
    stats = NormalizationStats.fit(np.full((10, 2), 3.0))
    assert stats.std.tolist() == [1.0, 1.0]


def test_stats_bytes():
    stats = NormalizationStats(np.array([1.0, 2.0], np.float32), np.array([0.5, 4.0], np.float32))
    buffer = stats.to_bytes()
    assert len(buffer) == 8 + 16
    restored = NormalizationStats.from_bytes(buffer)
    assert np.array_equal(restored.mean, stats.mean)
    assert np.array_equal(restored.std, stats.std)
    with pytest.raises(OodWatermarkFormatError):
        NormalizationStats.from_bytes(b"JUNK" + buffer[4:])
    with pytest.raises(OodWatermarkFormatError):
        NormalizationStats.from_bytes(buffer[:-2])


def test_blobs_with_zero_separation_share_a_centre():
    assert np.all(blob_centers(3, 5, 0.0) == 0.0)


def test_blob_centres_are_equidistant():
    for classes, dim in ((2, 2), (3, 2), (4, 16)):
        centres = blob_centers(classes, dim, 10.0).astype(np.float64)
        gaps = [np.linalg.norm(centres[i] - centres[j]) for i in range(classes) for j in range(i + 1, classes)]
        assert gaps == pytest.approx([10.0] * len(gaps), rel=1e-5)


def test_blobs_are_balanced_and_reproducible():
    task = GaussianBlobs(class_count=3, input_dim=4, separation=6.0)
    first = make_synthetic(task, 30, SeededRng(0))
    second = make_synthetic(task, 30, SeededRng(0))
    assert np.bincount(first.labels).tolist() == [10, 10, 10]
    assert np.array_equal(first.inputs, second.inputs)


def test_uniform_box_bounds():
    points = make_synthetic(UniformBox(3, bound=2.0), 1000, SeededRng(0))
    assert points.shape == (1000, 3)
    assert np.all(np.abs(points) <= 2.0)


def test_dataset_validation():
    with pytest.raises(OodWatermarkInvalidArgumentError):
        LabeledDataset(np.zeros((2, 3), np.float32), np.array([0, 5]), 2)
    with pytest.raises(OodWatermarkInvalidArgumentError):
        LabeledDataset(np.zeros((2, 3), np.float32), np.array([0, 1]), 2, spatial_shape=(2, 2))


def test_rotation_is_clockwise():
    rotated = augment_shift([1.0, 2.0, 3.0, 4.0], (2, 2), Shift.ROTATE, SeededRng(0))
    assert rotated.tolist() == [3.0, 1.0, 4.0, 2.0]


def test_four_rotations_are_the_identity():
    image = np.arange(16, dtype=np.float32)
    rotated = image
    for _ in range(4):
        rotated = augment_shift(rotated, (4, 4), "rotate", SeededRng(0))
    assert np.array_equal(rotated, image)


def test_permutation_moves_quadrants():
    image = np.arange(16, dtype=np.float32)
    rng = SeededRng(3)
    for _ in range(50):
        shifted = augment_shift(image, (4, 4), Shift.PERMUTE, rng)
        assert not np.array_equal(shifted, image)
        assert sorted(shifted.tolist()) == image.tolist()


def test_shifts_need_compatible_shapes():
    with pytest.raises(OodWatermarkInvalidArgumentError):
        augment_shift(np.zeros(9), (3, 3), Shift.PERMUTE, SeededRng(0))
    with pytest.raises(OodWatermarkInvalidArgumentError):
        augment_shift(np.zeros(8), (2, 4), Shift.ROTATE, SeededRng(0))
    with pytest.raises(OodWatermarkInvalidArgumentError):
        augment_batch(np.zeros((2, 4)), (2, 2), [], SeededRng(0))


def test_shift_normalized_without_stats_matches_pixel_shifts():
    batch = np.arange(32, dtype=np.float32).reshape(2, 16)
    plain = augment_batch(batch, (4, 4), ["permute", "rotate"], SeededRng(8))
    normalized = shift_normalized(batch, (4, 4), ["permute", "rotate"], SeededRng(8), None)
    assert np.array_equal(plain, normalized)
