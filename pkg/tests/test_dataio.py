import gzip
import struct

import numpy as np
import pytest

from src.maxprune.dataio import (
    DatasetHandle,
    EmbeddingPairs,
    batches,
    chunks,
    class_histogram,
    load_embeddings,
    load_idx,
    load_mnist,
    split_validation,
    write_embeddings,
    write_idx,
)
from src.maxprune.errors import ArgumentError, DataError, FormatError


def _idx_files(tmp_path, n=12, seed=0):
    rng = np.random.default_rng(seed)
    pixels = rng.integers(0, 256, size=(n, 28, 28), dtype=np.uint8)
    labels = rng.integers(0, 10, size=n).astype(np.uint8)
    images_path, labels_path = tmp_path / "images", tmp_path / "labels"
    write_idx(pixels, labels, images_path, labels_path)
    return pixels, labels, images_path, labels_path


def test_load_idx_roundtrip_and_scaling(tmp_path):
    pixels, labels, images_path, labels_path = _idx_files(tmp_path)
    data = load_idx(images_path, labels_path, "test")
    assert len(data) == 12 and data.split == "test"
    assert data.images.shape == (12, 1, 28, 28) and data.images.dtype == np.float32
    assert 0.0 <= data.images.min() and data.images.max() <= 1.0
    np.testing.assert_array_equal(np.round(data.images[:, 0] * 255), pixels)
    np.testing.assert_array_equal(data.labels, labels)
    with pytest.raises(ValueError):
        data.images[0, 0, 0, 0] = 1.0


def test_load_idx_rejects_swapped_magic(tmp_path):
    _, _, images_path, labels_path = _idx_files(tmp_path)
    with pytest.raises(FormatError) as excinfo:
        load_idx(labels_path, images_path)
    assert excinfo.value.offset == 0


def test_load_idx_rejects_truncated_payload(tmp_path):
    _, _, images_path, labels_path = _idx_files(tmp_path)
    images_path.write_bytes(images_path.read_bytes()[:-5])
    with pytest.raises(FormatError, match="payload"):
        load_idx(images_path, labels_path)


def test_load_idx_rejects_count_mismatch(tmp_path):
    _, _, images_path, labels_path = _idx_files(tmp_path)
    raw = labels_path.read_bytes()
    labels_path.write_bytes(struct.pack(">2I", 0x00000801, 11) + raw[8:-1])
    with pytest.raises(FormatError) as excinfo:
        load_idx(images_path, labels_path)
    assert excinfo.value.offset == 4


def test_load_idx_rejects_bad_label(tmp_path):
    pixels = np.zeros((2, 28, 28), np.uint8)
    write_idx(pixels, [1, 12], tmp_path / "i", tmp_path / "l")
    with pytest.raises(FormatError) as excinfo:
        load_idx(tmp_path / "i", tmp_path / "l")
    assert excinfo.value.offset == 9


def test_load_mnist_reads_gzip_and_reports_missing(tmp_path):
    pixels, labels, images_path, labels_path = _idx_files(tmp_path)
    root = tmp_path / "mnist"
    root.mkdir()
    for src, stem in ((images_path, "t10k-images-idx3-ubyte"), (labels_path, "t10k-labels-idx1-ubyte")):
        with gzip.open(root / f"{stem}.gz", "wb") as f:
            f.write(src.read_bytes())
    data = load_mnist(root, "test")
    np.testing.assert_array_equal(data.labels, labels)
    with pytest.raises(FileNotFoundError):
        load_mnist(root, "train")
    with pytest.raises(ArgumentError):
        load_mnist(root, "validation")


def test_dataset_handle_validation():
    with pytest.raises(DataError):
        DatasetHandle(np.zeros((2, 1, 28, 28), np.float32), np.zeros(3, np.int64))
    with pytest.raises(DataError):
        DatasetHandle(np.zeros((1, 1, 28, 28), np.float32), np.array([10]))


def _indexed(n):
    """Dataset whose single pixel holds the sample index."""

    return DatasetHandle(np.arange(n, dtype=np.float32).reshape(n, 1, 1, 1), np.arange(n) % 10)


def test_split_validation_partitions():
    data = _indexed(60)
    train, val = split_validation(data, 5)
    assert (len(train), len(val)) == (55, 5)
    seen = np.concatenate([train.images.ravel(), val.images.ravel()])
    np.testing.assert_array_equal(seen, np.arange(60))
    np.testing.assert_array_equal(val.images.ravel(), np.arange(55, 60))
    for holdout in (0, 60, 61):
        with pytest.raises(ArgumentError):
            split_validation(data, holdout)


def test_batches_sizes_and_coverage():
    data = _indexed(10)
    sizes = [len(labels) for _, labels in batches(data, 3, seed=1, epoch=0)]
    assert sizes == [3, 3, 3, 1]
    seen = np.concatenate([images.ravel() for images, _ in batches(data, 3, seed=1, epoch=0)])
    np.testing.assert_array_equal(np.sort(seen), np.arange(10))
    with pytest.raises(ArgumentError):
        next(batches(data, 0, seed=1, epoch=0))


def test_batches_are_seeded_per_epoch():
    data = _indexed(10 ** 4)

    def order(seed, epoch):
        return np.concatenate([images.ravel() for images, _ in batches(data, 64, seed, epoch)])

    np.testing.assert_array_equal(order(3, 0), order(3, 0))
    assert not np.array_equal(order(3, 0), order(3, 1))
    assert not np.array_equal(order(3, 0), order(4, 0))


def test_chunks_keep_file_order():
    data = _indexed(25)
    pieces = list(chunks(data, 10))
    assert [len(labels) for _, labels in pieces] == [10, 10, 5]
    np.testing.assert_array_equal(np.concatenate([p[0].ravel() for p in pieces]), np.arange(25))


def test_class_histogram():
    assert class_histogram(_indexed(25)).tolist() == [3, 3, 3, 3, 3, 2, 2, 2, 2, 2]


EMBEDDINGS = """\
# two of each
d 4
m 0.1 0.2 0.3 0.4 0.1 0.2 0.3 0.5
m 1 0 0 0 1 0 0 0
n 0 0 1 1 1 1 0 0
n 0.5 0.5 0.5 0.5 0 0 0 1e-3
"""


def test_load_embeddings(tmp_path):
    path = tmp_path / "pairs.txt"
    path.write_text(EMBEDDINGS)
    pairs = load_embeddings(path)
    assert (len(pairs.matched), len(pairs.nonmatched), pairs.dim) == (2, 2, 4)
    np.testing.assert_array_equal(pairs.matched[0][1], [0.1, 0.2, 0.3, 0.5])


@pytest.mark.parametrize(
    "text",
    [
        "d 2\nn 1 2 3 4\n",
        "d 2\nm 1 2 3\nn 1 2 3 4\n",
        "d 2\nm 1 2 3 nan\nn 1 2 3 4\n",
        "m 1 2 3 4\n",
        "d 2\nm 1 2 3 4\nx 1 2 3 4\n",
    ],
)
def test_load_embeddings_rejects_malformed(tmp_path, text):
    path = tmp_path / "pairs.txt"
    path.write_text(text)
    with pytest.raises(FormatError):
        load_embeddings(path)


def test_load_embeddings_rejects_invalid_utf8(tmp_path):
    path = tmp_path / "pairs.txt"
    path.write_bytes(b"d 1\nm 1 1\nn 1 \xff\n")
    with pytest.raises(FormatError) as excinfo:
        load_embeddings(path)
    assert excinfo.value.offset == 3


def test_embeddings_write_then_read(tmp_path, rng):
    pairs = EmbeddingPairs(
        matched=[(rng.random(3), rng.random(3)) for _ in range(3)],
        nonmatched=[(rng.random(3), rng.random(3)) for _ in range(2)],
        dim=3,
    )
    write_embeddings(pairs, tmp_path / "pairs.txt")
    again = load_embeddings(tmp_path / "pairs.txt")
    assert again.dim == 3
    for original, parsed in zip(pairs.matched + pairs.nonmatched, again.matched + again.nonmatched):
        np.testing.assert_array_equal(original[0], parsed[0])
        np.testing.assert_array_equal(original[1], parsed[1])
