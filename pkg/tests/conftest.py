import numpy as np
import pytest

from src.maxprune.dataio import DatasetHandle, write_idx
from src.maxprune.network import LayerSpec, Network, NetworkSpec, lenet_spec
from src.maxprune.tensor import make_rng


def bar_images(labels, seed=0, noise=0.1):
    """28×28 images with a bright horizontal bar whose row encodes the label."""

    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    images = rng.uniform(0.0, noise, size=(len(labels), 1, 28, 28)).astype(np.float32)
    for i, label in enumerate(labels):
        row = 3 + 2 * int(label)
        images[i, 0, row : row + 2, 4:24] = 1.0
    return images


def make_dataset(n, seed=0, split="train"):
    labels = np.arange(n) % 10
    return DatasetHandle(bar_images(labels, seed), labels.astype(np.int64), split)


def write_mnist_dir(root, n_train=120, n_test=100, seed=0):
    """Write train/test IDX files of the bar dataset under ``root``."""

    root.mkdir(parents=True, exist_ok=True)
    for split, n, stems in (
        ("train", n_train, ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")),
        ("test", n_test, ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")),
    ):
        labels = (np.arange(n) * 7 + seed) % 10
        pixels = np.round(bar_images(labels, seed + len(split)) * 255).astype(np.uint8)
        write_idx(pixels, labels, root / stems[0], root / stems[1])
    return root


def tiny_spec(variant="mfc", k=4):
    """LeNet layout with very few filters, fast enough for unit tests."""

    conv2 = 8 if variant == "mc" else 4
    return lenet_spec(variant, fc_size=8, k=k, conv1_filters=2, conv2_filters=conv2)


def tiny_net(variant="mfc", seed=0, k=4):
    return Network.initialize(tiny_spec(variant, k), make_rng(seed))


def toy_spec(layers, input_shape=(1, 1, 2), num_classes=10, variant="toy", fc_size=0):
    return NetworkSpec(
        layers=tuple(layers) + (LayerSpec("softmax", "softmax"),),
        variant=variant,
        fc_size=fc_size,
        input_shape=input_shape,
        num_classes=num_classes,
    )


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def data():
    return make_dataset(200, seed=1)


@pytest.fixture
def mnist_dir(tmp_path):
    return write_mnist_dir(tmp_path / "mnist")
