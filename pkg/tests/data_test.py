"""Tests for the synthetic and CIFAR-10 data sources."""

from pathlib import Path

import numpy as np
import pytest

from exnorm.data import (
    CIFAR_RECORD_BYTES,
    Cifar10Source,
    LabeledSet,
    SyntheticSource,
    gen_synthetic,
    load_cifar10,
    load_source,
)
from exnorm.types import DatasetFormatError, EmptyDatasetError


def _write_records(path: Path, labels: list, fill: list) -> None:
    records = []
    for label, value in zip(labels, fill):
        record = np.full(CIFAR_RECORD_BYTES, value, dtype=np.uint8)
        record[0] = label
        records.append(record)
    np.concatenate(records).tofile(path)


def test_synthetic_is_deterministic() -> None:
    source = SyntheticSource(classes=3, per_class=5, image_size=8, seed=4)
    a = gen_synthetic(source)
    b = gen_synthetic(source)
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(a.labels, b.labels)
    assert a.images.shape == (15, 3, 8, 8)
    assert a.images.dtype == np.float32
    assert np.bincount(a.labels).tolist() == [5, 5, 5]

    other = gen_synthetic(
        SyntheticSource(classes=3, per_class=5, image_size=8, seed=5)
    )
    assert not np.array_equal(a.images, other.images)


def test_synthetic_is_standardized() -> None:
    data = gen_synthetic(SyntheticSource(per_class=20), dtype=np.float64)
    assert np.abs(data.images.mean(axis=(0, 2, 3))).max() < 1e-9
    assert np.abs(data.images.std(axis=(0, 2, 3)) - 1.0).max() < 1e-9


def test_synthetic_needs_two_classes() -> None:
    with pytest.raises(DatasetFormatError):
        gen_synthetic(SyntheticSource(classes=1))


def test_cifar_records(tmp_path: Path) -> None:
    path = tmp_path / "batch.bin"
    _write_records(path, [3, 7], [0, 255])
    data = load_cifar10(path, dtype=np.float64)
    assert data.labels.tolist() == [3, 7]
    assert data.classes == 10
    assert data.images.shape == (2, 3, 32, 32)
    # Per channel: half the pixels at 0, half at 1, so mean 0.5 and std 0.5
    assert np.all(data.images[0] == -1.0)
    assert np.all(data.images[1] == 1.0)


def test_cifar_plane_order(tmp_path: Path) -> None:
    record = np.zeros(CIFAR_RECORD_BYTES, dtype=np.uint8)
    record[1 + 1024 : 1 + 2048] = 255
    path = tmp_path / "one.bin"
    np.concatenate([record, record]).tofile(path)
    raw = load_cifar10(path, dtype=np.float64)
    # Constant channels standardize to zero
    assert not raw.images.any()

    second = record.copy()
    second[1 + 1024] = 0
    np.concatenate([record, second]).tofile(path)
    data = load_cifar10(path, dtype=np.float64)
    assert data.images[0, 1, 0, 0] > 0
    assert data.images[1, 1, 0, 0] < 0
    assert not data.images[:, 0].any()


def test_cifar_rejects_partial_record(tmp_path: Path) -> None:
    path = tmp_path / "short.bin"
    np.zeros(3072, dtype=np.uint8).tofile(path)
    with pytest.raises(DatasetFormatError):
        load_cifar10(path)


def test_cifar_rejects_bad_label(tmp_path: Path) -> None:
    path = tmp_path / "bad.bin"
    _write_records(path, [1, 10], [0, 0])
    with pytest.raises(DatasetFormatError):
        load_cifar10(path)


def test_cifar_directory_and_subset(tmp_path: Path) -> None:
    _write_records(tmp_path / "data_batch_2.bin", [2, 3], [10, 20])
    _write_records(tmp_path / "data_batch_1.bin", [0, 1], [30, 40])
    (tmp_path / "test_batch.bin").write_bytes(b"ignored")
    data = load_cifar10(tmp_path)
    assert data.labels.tolist() == [0, 1, 2, 3]

    subset = load_source(Cifar10Source(tmp_path, subset=3))
    assert subset.labels.tolist() == [0, 1, 2]

    with pytest.raises(EmptyDatasetError):
        load_cifar10(tmp_path, subset=0)


def test_cifar_empty_directory(tmp_path: Path) -> None:
    with pytest.raises(DatasetFormatError):
        load_cifar10(tmp_path)


def test_batches() -> None:
    data = LabeledSet(
        np.zeros((5, 3, 2, 2)), np.array([0, 1, 0, 1, 0]), classes=2
    )
    sizes = [len(ids) for ids, _, _ in data.batches(2)]
    assert sizes == [2, 2, 1]
    sizes = [len(ids) for ids, _, _ in data.batches(2, drop_single=True)]
    assert sizes == [2, 2]

    order = np.array([4, 3, 2, 1, 0])
    ids, _, labels = next(data.batches(3, order=order))
    assert ids.tolist() == [4, 3, 2]
    assert labels.tolist() == [0, 1, 0]

    single = LabeledSet(np.zeros((1, 3, 2, 2)), np.array([1]), classes=2)
    assert len(list(single.batches(4, drop_single=True))) == 1


def test_labeled_set_validation() -> None:
    with pytest.raises(DatasetFormatError):
        LabeledSet(np.zeros((2, 3, 2, 2)), np.array([0]), classes=2)
    with pytest.raises(DatasetFormatError):
        LabeledSet(np.zeros((1, 3, 2, 2)), np.array([2]), classes=2)
    empty = LabeledSet(np.zeros((0, 3, 2, 2)), np.zeros(0, int), classes=2)
    with pytest.raises(EmptyDatasetError):
        list(empty.batches(2))
