"""MNIST IDX ingestion, batching and the embeddings pair file."""

from __future__ import annotations

import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Sequence, Tuple

import numpy as np

from .errors import ArgumentError, DataError, FormatError

logger = logging.getLogger("maxprune.dataio")

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
IMAGE_SIDE = 28
NUM_CLASSES = 10

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass(frozen=True)
class DatasetHandle:
    """Images N×1×28×28 in [0, 1] and integer labels in [0, 10)."""

    images: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self) -> None:
        if len(self.images) != len(self.labels):
            raise DataError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= NUM_CLASSES):
            raise DataError(f"labels must lie in [0, {NUM_CLASSES})")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices: Sequence[int] | np.ndarray, split: str | None = None) -> "DatasetHandle":
        idx = np.asarray(indices, dtype=np.int64)
        return DatasetHandle(self.images[idx].copy(), self.labels[idx].copy(), split or self.split)

    def take(self, n: int) -> "DatasetHandle":
        return self.subset(np.arange(min(n, len(self))))


def _read_bytes(path: str | Path) -> bytes:
    path = Path(path)
    try:
        if path.suffix == ".gz":
            with gzip.open(path, "rb") as f:
                return f.read()
        return path.read_bytes()
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc


def _header(raw: bytes, count: int, path: str | Path) -> Tuple[int, ...]:
    needed = 4 * count
    if len(raw) < needed:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)", offset=len(raw))
    return struct.unpack(f">{count}I", raw[:needed])


def load_idx(images_path: str | Path, labels_path: str | Path, split: str = "train") -> DatasetHandle:
    """Parse an IDX image file and its label file into a dataset."""

    raw_images = _read_bytes(images_path)
    raw_labels = _read_bytes(labels_path)

    magic, count, rows, cols = _header(raw_images, 4, images_path)
    if magic != IMAGES_MAGIC:
        raise FormatError(f"{images_path}: bad images magic 0x{magic:08x}", offset=0)
    if rows != IMAGE_SIDE or cols != IMAGE_SIDE:
        raise FormatError(f"{images_path}: expected 28x28 images, got {rows}x{cols}", offset=8)
    expected = 16 + count * rows * cols
    if len(raw_images) != expected:
        raise FormatError(
            f"{images_path}: payload has {len(raw_images) - 16} bytes, header promises "
            f"{count * rows * cols}",
            offset=min(len(raw_images), expected),
        )

    magic, n_labels = _header(raw_labels, 2, labels_path)
    if magic != LABELS_MAGIC:
        raise FormatError(f"{labels_path}: bad labels magic 0x{magic:08x}", offset=0)
    if n_labels != count:
        raise FormatError(
            f"{labels_path}: {n_labels} labels for {count} images", offset=4
        )
    if len(raw_labels) != 8 + n_labels:
        raise FormatError(
            f"{labels_path}: payload has {len(raw_labels) - 8} bytes, header promises {n_labels}",
            offset=min(len(raw_labels), 8 + n_labels),
        )

    pixels = np.frombuffer(raw_images, dtype=np.uint8, offset=16)
    labels = np.frombuffer(raw_labels, dtype=np.uint8, offset=8).astype(np.int64)
    bad = np.flatnonzero(labels >= NUM_CLASSES)
    if bad.size:
        raise FormatError(f"{labels_path}: label {labels[bad[0]]} out of range", offset=8 + int(bad[0]))
    images = (pixels.astype(np.float32) / 255.0).reshape(count, 1, rows, cols)
    logger.info(f"Loaded {count} samples from {images_path}")
    return DatasetHandle(images, labels, split)


def write_idx(
    images: np.ndarray, labels: np.ndarray, images_path: str | Path, labels_path: str | Path
) -> None:
    """Write uint8 images (N×28×28 or N×1×28×28) and labels as IDX files."""

    pixels = np.asarray(images, dtype=np.uint8).reshape(len(images), IMAGE_SIDE, IMAGE_SIDE)
    labels = np.asarray(labels, dtype=np.uint8)
    Path(images_path).write_bytes(
        struct.pack(">4I", IMAGES_MAGIC, len(pixels), IMAGE_SIDE, IMAGE_SIDE) + pixels.tobytes()
    )
    Path(labels_path).write_bytes(struct.pack(">2I", LABELS_MAGIC, len(labels)) + labels.tobytes())


def load_mnist(root: str | Path, split: str = "train") -> DatasetHandle:
    """Load the standard MNIST files for ``split`` from ``root`` (plain or .gz)."""

    if split not in MNIST_FILES:
        raise ArgumentError(f"split must be 'train' or 'test', got {split!r}")
    root = Path(root)
    found: List[Path] = []
    for stem in MNIST_FILES[split]:
        for candidate in (root / stem, root / f"{stem}.gz", root / stem.replace("-idx", ".idx")):
            if candidate.exists():
                found.append(candidate)
                break
        else:
            raise FileNotFoundError(f"MNIST file {stem} not found under {root}")
    return load_idx(found[0], found[1], split)


def split_validation(data: DatasetHandle, holdout: int) -> Tuple[DatasetHandle, DatasetHandle]:
    """The last ``holdout`` samples (file order) become the validation set."""

    n = len(data)
    if not 0 < holdout < n:
        raise ArgumentError(f"holdout must lie in (0, {n}), got {holdout}")
    cut = n - holdout
    return data.subset(np.arange(cut), "train"), data.subset(np.arange(cut, n), "val")


def batches(
    data: DatasetHandle, batch_size: int, seed: int, epoch: int
) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """One epoch of shuffled batches; the order depends only on (seed, epoch)."""

    if batch_size < 1:
        raise ArgumentError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng([int(seed), int(epoch)]).permutation(len(data))
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        yield data.images[idx], data.labels[idx]


def chunks(data: DatasetHandle, size: int) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Consecutive unshuffled slices of ``size`` samples."""

    for start in range(0, len(data), size):
        yield data.images[start : start + size], data.labels[start : start + size]


@dataclass
class EmbeddingPairs:
    """Matched and non-matched descriptor pairs of dimension ``dim``."""

    matched: List[Tuple[np.ndarray, np.ndarray]]
    nonmatched: List[Tuple[np.ndarray, np.ndarray]]
    dim: int


def load_embeddings(path: str | Path) -> EmbeddingPairs:
    """Parse the text pair format: ``d <dim>`` then ``m ...`` / ``n ...`` lines."""

    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    try:
        lines = raw.decode("utf-8").splitlines()
    except UnicodeDecodeError as exc:
        raise FormatError(
            f"{path}: not UTF-8 text", offset=raw.count(b"\n", 0, exc.start) + 1
        ) from exc

    dim = None
    matched: List[Tuple[np.ndarray, np.ndarray]] = []
    nonmatched: List[Tuple[np.ndarray, np.ndarray]] = []
    for lineno, line in enumerate(lines, start=1):
        tokens = line.split()
        if not tokens or tokens[0].startswith("#"):
            continue
        if dim is None:
            if tokens[0] != "d" or len(tokens) != 2:
                raise FormatError(f"{path}: first line must be 'd <dimension>'", offset=lineno)
            try:
                dim = int(tokens[1])
            except ValueError as exc:
                raise FormatError(f"{path}: bad dimension {tokens[1]!r}", offset=lineno) from exc
            if dim < 1:
                raise FormatError(f"{path}: dimension must be >= 1", offset=lineno)
            continue
        tag, values = tokens[0], tokens[1:]
        if tag not in ("m", "n"):
            raise FormatError(f"{path}: unknown record tag {tag!r}", offset=lineno)
        if len(values) != 2 * dim:
            raise FormatError(
                f"{path}: expected {2 * dim} values, got {len(values)}", offset=lineno
            )
        try:
            vec = np.array([float(v) for v in values], dtype=np.float64)
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}", offset=lineno) from exc
        if not np.all(np.isfinite(vec)):
            raise FormatError(f"{path}: non-finite value", offset=lineno)
        pair = (vec[:dim], vec[dim:])
        (matched if tag == "m" else nonmatched).append(pair)

    if dim is None:
        raise FormatError(f"{path}: missing 'd <dimension>' header", offset=1)
    if not matched or not nonmatched:
        raise FormatError(f"{path}: need at least one matched and one non-matched pair")
    return EmbeddingPairs(matched, nonmatched, dim)


def write_embeddings(pairs: EmbeddingPairs, path: str | Path) -> None:
    """Inverse of :func:`load_embeddings` (values written with ``repr``)."""

    lines = [f"d {pairs.dim}"]
    for tag, group in (("m", pairs.matched), ("n", pairs.nonmatched)):
        for u, v in group:
            values = " ".join(repr(float(x)) for x in np.concatenate([u, v]))
            lines.append(f"{tag} {values}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def class_histogram(data: DatasetHandle) -> np.ndarray:
    return np.bincount(data.labels, minlength=NUM_CLASSES)
