"""Layers, reference architectures and hand-written backpropagation.

A :class:`Network` is a :class:`NetworkSpec` plus a flat parameter dict
(``"<layer>.weight"`` / ``"<layer>.bias"``), an optional
:class:`MaxoutState` and optional prune masks. Layer widths come from the
parameter arrays, not from the NetworkSpec, so structurally pruned networks run
through the same code.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from . import tensor
from .errors import DataError, DimensionError, StructureError

logger = logging.getLogger("maxprune.network")

LAYER_KINDS = ("conv2d", "maxpool2", "dense", "relu", "maxout", "softmax")
PARAM_KINDS = ("conv2d", "dense")


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a sequential architecture.

    ``size`` is the filter count (conv2d) or output width (dense),
    ``kernel`` the square kernel side (conv2d) and ``group`` the original
    maxout group size k.
    """

    kind: str
    name: str
    size: int = 0
    kernel: int = 0
    group: int = 0

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise StructureError(f"unknown layer kind {self.kind!r}")

    @property
    def has_params(self) -> bool:
        return self.kind in PARAM_KINDS


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture description: ordered layers plus the variant tag."""

    layers: Tuple[LayerSpec, ...]
    variant: str
    fc_size: int
    input_shape: Tuple[int, int, int] = (1, 28, 28)
    num_classes: int = 10

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        infer_shapes(self)

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise StructureError(f"no layer named {name!r}")

    def index(self, name: str) -> int:
        for i, layer in enumerate(self.layers):
            if layer.name == name:
                return i
        raise StructureError(f"no layer named {name!r}")

    @property
    def maxout_layer(self) -> Optional[LayerSpec]:
        found = [layer for layer in self.layers if layer.kind == "maxout"]
        return found[0] if found else None

    @property
    def param_layers(self) -> List[LayerSpec]:
        return [layer for layer in self.layers if layer.has_params]

    def conv_sizes(self) -> List[int]:
        return [layer.size for layer in self.layers if layer.kind == "conv2d"]

    def weight_shapes(self) -> Dict[str, Tuple[int, ...]]:
        """Shapes of every multiplicative weight tensor before any pruning."""

        shapes = infer_shapes(self)
        result: Dict[str, Tuple[int, ...]] = {}
        in_shape: Tuple[int, ...] = self.input_shape
        for layer, out_shape in zip(self.layers, shapes):
            if layer.kind == "conv2d":
                result[f"{layer.name}.weight"] = (
                    layer.size,
                    in_shape[0],
                    layer.kernel,
                    layer.kernel,
                )
            elif layer.kind == "dense":
                result[f"{layer.name}.weight"] = (layer.size, math.prod(in_shape))
            in_shape = out_shape
        return result

    def to_dict(self) -> Dict[str, Any]:
        return {
            "variant": self.variant,
            "fc_size": self.fc_size,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [
                {
                    "kind": layer.kind,
                    "name": layer.name,
                    "size": layer.size,
                    "kernel": layer.kernel,
                    "group": layer.group,
                }
                for layer in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "NetworkSpec":
        try:
            return cls(
                layers=tuple(LayerSpec(**layer) for layer in data["layers"]),
                variant=data["variant"],
                fc_size=int(data["fc_size"]),
                input_shape=tuple(data.get("input_shape", (1, 28, 28))),
                num_classes=int(data.get("num_classes", 10)),
            )
        except (KeyError, TypeError) as exc:
            raise StructureError(f"malformed network spec: {exc}") from exc


def infer_shapes(spec: NetworkSpec) -> List[Tuple[int, ...]]:
    """Per-layer output shapes (without batch) at full maxout width.

    Raises :class:`StructureError` when adjacent layers do not fit.
    """

    shape: Tuple[int, ...] = tuple(spec.input_shape)
    shapes: List[Tuple[int, ...]] = []
    maxouts = 0
    for i, layer in enumerate(spec.layers):
        if layer.kind == "conv2d":
            if len(shape) != 3:
                raise StructureError(f"{layer.name}: conv2d needs a C×H×W input, got {shape}")
            c, h, w = shape
            if layer.size < 1 or layer.kernel < 1 or layer.kernel > min(h, w):
                raise StructureError(f"{layer.name}: kernel {layer.kernel} does not fit {shape}")
            shape = (layer.size, h - layer.kernel + 1, w - layer.kernel + 1)
        elif layer.kind == "maxpool2":
            if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                raise StructureError(f"{layer.name}: pooling needs even H and W, got {shape}")
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif layer.kind == "dense":
            if layer.size < 1:
                raise StructureError(f"{layer.name}: dense size must be positive")
            shape = (layer.size,)
        elif layer.kind == "maxout":
            maxouts += 1
            if i == 0 or not spec.layers[i - 1].has_params:
                raise StructureError(
                    f"{layer.name}: maxout must directly follow a conv2d or dense layer"
                )
            if layer.group < 1 or shape[0] % layer.group:
                raise StructureError(
                    f"{layer.name}: width {shape[0]} not divisible by group size {layer.group}"
                )
            shape = (shape[0] // layer.group,) + shape[1:]
        elif layer.kind == "softmax":
            if i != len(spec.layers) - 1 or shape != (spec.num_classes,):
                raise StructureError(
                    f"{layer.name}: softmax must be last and see {spec.num_classes} logits"
                )
        shapes.append(shape)
    if maxouts > 1:
        raise StructureError("at most one maxout layer is supported")
    if not spec.layers or spec.layers[-1].kind != "softmax":
        raise StructureError("architecture must end in a softmax layer")
    return shapes


def lenet_spec(
    variant: str,
    fc_size: int,
    k: int = 4,
    conv1_filters: int = 20,
    conv2_filters: Optional[int] = None,
) -> NetworkSpec:
    """Reference LeNet-5 style architecture for ``baseline``, ``mfc`` or ``mc``.

    conv1 5×5 → pool → conv2 5×5 → pool → dense ``fc_size`` → dense 10.
    ``mfc`` puts maxout right after the fully connected layer, ``mc`` right
    after conv2; maxout replaces the ReLU at its position.
    """

    if conv2_filters is None:
        conv2_filters = 64 if variant == "mc" else 50
    conv1 = LayerSpec("conv2d", "conv1", size=conv1_filters, kernel=5)
    conv2 = LayerSpec("conv2d", "conv2", size=conv2_filters, kernel=5)
    fc = LayerSpec("dense", "fc", size=fc_size)
    out = LayerSpec("dense", "out", size=10)
    head = [conv1, LayerSpec("relu", "relu1"), LayerSpec("maxpool2", "pool1"), conv2]
    if variant == "baseline":
        layers = head + [
            LayerSpec("relu", "relu2"),
            LayerSpec("maxpool2", "pool2"),
            fc,
            LayerSpec("relu", "relu3"),
        ]
    elif variant == "mfc":
        layers = head + [
            LayerSpec("relu", "relu2"),
            LayerSpec("maxpool2", "pool2"),
            fc,
            LayerSpec("maxout", "maxout", group=k),
        ]
    elif variant == "mc":
        layers = head + [
            LayerSpec("maxout", "maxout", group=k),
            LayerSpec("maxpool2", "pool2"),
            fc,
            LayerSpec("relu", "relu3"),
        ]
    else:
        raise StructureError(f"unknown variant {variant!r}")
    return NetworkSpec(
        layers=tuple(layers + [out, LayerSpec("softmax", "softmax")]),
        variant=variant,
        fc_size=fc_size,
    )


def baseline_of(spec: NetworkSpec) -> NetworkSpec:
    """The no-maxout architecture with the same conv widths and fc size."""

    conv1, conv2 = spec.conv_sizes()
    return lenet_spec("baseline", spec.fc_size, conv1_filters=conv1, conv2_filters=conv2)


@dataclass
class MaxoutState:
    """Group size, surviving original indices and winner counters."""

    layer: str
    source: str
    k_original: int
    k_current: int
    survivors: np.ndarray
    win_counts: np.ndarray

    @classmethod
    def fresh(cls, layer: str, source: str, width: int, k: int) -> "MaxoutState":
        units = width // k
        return cls(
            layer=layer,
            source=source,
            k_original=k,
            k_current=k,
            survivors=np.arange(width, dtype=np.int64).reshape(units, k),
            win_counts=np.zeros((units, k), dtype=np.uint64),
        )

    @property
    def unit_count(self) -> int:
        return int(self.survivors.shape[0])

    @property
    def width(self) -> int:
        """Current input width (units × k_current)."""

        return self.unit_count * self.k_current

    def reset_counts(self) -> None:
        self.win_counts = np.zeros((self.unit_count, self.k_current), dtype=np.uint64)

    def validate(self) -> None:
        if self.k_current < 1 or self.survivors.shape != (self.unit_count, self.k_current):
            raise StructureError(
                f"maxout state has survivors {self.survivors.shape} for k={self.k_current}"
            )
        original_width = self.unit_count * self.k_original
        for row in self.survivors:
            if len(set(row.tolist())) != len(row) or row.min() < 0 or row.max() >= original_width:
                raise StructureError(f"invalid survivor indices {row.tolist()}")
            if np.any(np.diff(row) <= 0):
                raise StructureError(f"survivor indices must be ascending, got {row.tolist()}")

    def copy(self) -> "MaxoutState":
        return MaxoutState(
            layer=self.layer,
            source=self.source,
            k_original=self.k_original,
            k_current=self.k_current,
            survivors=self.survivors.copy(),
            win_counts=self.win_counts.copy(),
        )


@dataclass
class WinnerMap:
    """Winning slot per unit (and per spatial position for channel maxout)."""

    slots: np.ndarray
    k: int
    input_shape: Tuple[int, ...]


def tally_winners(winners: WinnerMap) -> np.ndarray:
    """Per-unit, per-slot win counts (units × k) for one winner map."""

    units = winners.slots.shape[1]
    positions = np.moveaxis(winners.slots, 1, -1).reshape(-1, units)
    counts = np.zeros((units, winners.k), dtype=np.uint64)
    for slot in range(winners.k):
        counts[:, slot] = (positions == slot).sum(axis=0)
    return counts


def maxout_forward(
    x: np.ndarray, state: MaxoutState, count: bool = False
) -> Tuple[np.ndarray, WinnerMap]:
    """Max over each unit's survivors along axis 1.

    Works on B×N (dense) and B×C×H×W (channel) inputs. Ties go to the lowest
    slot, which is the lowest original index because survivors are kept in
    ascending order.
    """

    k = state.k_current
    if k < 1 or x.ndim < 2 or x.shape[1] != state.width:
        raise StructureError(
            f"maxout input {x.shape} does not match {state.unit_count} units of k={k}"
        )
    grouped = x.reshape((x.shape[0], state.unit_count, k) + x.shape[2:])
    slots = np.argmax(grouped, axis=2)
    y = np.take_along_axis(grouped, np.expand_dims(slots, 2), axis=2).squeeze(2)
    winners = WinnerMap(slots=slots, k=k, input_shape=tuple(x.shape))
    if count:
        state.win_counts += tally_winners(winners)
    return y, winners


def maxout_backward(
    grad_y: np.ndarray, winners: WinnerMap, state: MaxoutState
) -> np.ndarray:
    """Route each unit's gradient to its winning slot."""

    if (
        winners.k != state.k_current
        or winners.input_shape[1] != state.width
        or grad_y.shape != winners.slots.shape
    ):
        raise StructureError(
            f"stale winners map (k={winners.k}, shape {winners.slots.shape}) "
            f"for state k={state.k_current} and gradient {grad_y.shape}"
        )
    grouped_shape = (grad_y.shape[0], state.unit_count, winners.k) + grad_y.shape[2:]
    grad = np.zeros(grouped_shape, dtype=grad_y.dtype)
    np.put_along_axis(
        grad, np.expand_dims(winners.slots, 2), np.expand_dims(grad_y, 2), axis=2
    )
    return grad.reshape(winners.input_shape)


@dataclass
class Network:
    """A parameterized instance of a :class:`NetworkSpec`."""

    spec: NetworkSpec
    params: Dict[str, np.ndarray]
    maxout: Optional[MaxoutState] = None
    masks: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def initialize(cls, spec: NetworkSpec, rng: tensor.Rng) -> "Network":
        """Glorot-uniform weights, zero biases, fresh maxout state."""

        params: Dict[str, np.ndarray] = {}
        for name, shape in spec.weight_shapes().items():
            layer = name.split(".")[0]
            if len(shape) == 4:
                fan_in = shape[1] * shape[2] * shape[3]
                fan_out = shape[0] * shape[2] * shape[3]
            else:
                fan_in, fan_out = shape[1], shape[0]
            params[name] = tensor.glorot_init(shape, fan_in, fan_out, rng)
            params[f"{layer}.bias"] = np.zeros(shape[0], dtype=tensor.DTYPE)

        maxout = None
        mlayer = spec.maxout_layer
        if mlayer is not None:
            source = spec.layers[spec.index(mlayer.name) - 1]
            maxout = MaxoutState.fresh(mlayer.name, source.name, source.size, mlayer.group)
        return cls(spec=spec, params=params, maxout=maxout)

    def weight_names(self) -> List[str]:
        """Names of multiplicative weight tensors in layer order."""

        return [f"{layer.name}.weight" for layer in self.spec.param_layers]

    def apply_masks(self) -> None:
        for name, mask in self.masks.items():
            self.params[name][mask] = 0.0

    def copy(self) -> "Network":
        return Network(
            spec=self.spec,
            params={k: v.copy() for k, v in self.params.items()},
            maxout=self.maxout.copy() if self.maxout is not None else None,
            masks={k: v.copy() for k, v in self.masks.items()},
        )

    def validate(self) -> None:
        """Check parameter shapes against the architecture and the maxout state."""

        expected = self.spec.weight_shapes()
        for name, shape in expected.items():
            if name not in self.params:
                raise StructureError(f"missing parameter {name}")
            actual = self.params[name].shape
            rows = shape[0]
            if self.maxout is not None and name == f"{self.maxout.source}.weight":
                rows = self.maxout.width
            if actual != (rows,) + shape[1:]:
                raise StructureError(f"{name} has shape {actual}, expected {(rows,) + shape[1:]}")
            bias = self.params.get(name.replace(".weight", ".bias"))
            if bias is None or bias.shape != (rows,):
                raise StructureError(f"bias of {name} missing or misshapen")
        for name, mask in self.masks.items():
            if mask.shape != self.params[name].shape:
                raise StructureError(f"mask {name} shape {mask.shape} != {self.params[name].shape}")
        if self.maxout is not None:
            self.maxout.validate()


@dataclass
class ForwardCache:
    """Per-layer values kept by :func:`forward` for :func:`backward`."""

    entries: List[Any]


def _dense_forward(net: Network, layer: LayerSpec, x: np.ndarray, count: bool):
    flat = x.reshape(x.shape[0], -1)
    w = net.params[f"{layer.name}.weight"]
    if flat.shape[1] != w.shape[1]:
        raise DimensionError(f"{layer.name}: input width {flat.shape[1]} vs weights {w.shape}")
    out = tensor.matmul(flat, w.T) + net.params[f"{layer.name}.bias"]
    return out, (flat, x.shape)


def _conv_forward(net: Network, layer: LayerSpec, x: np.ndarray, count: bool):
    out = tensor.conv2d(
        x, net.params[f"{layer.name}.weight"], net.params[f"{layer.name}.bias"]
    )
    return out, x


def _relu_forward(net: Network, layer: LayerSpec, x: np.ndarray, count: bool):
    active = x > 0
    return np.where(active, x, 0).astype(x.dtype, copy=False), active


def _pool_forward(net: Network, layer: LayerSpec, x: np.ndarray, count: bool):
    out, argmax = tensor.maxpool2d(x)
    return out, (argmax, x.shape)


def _maxout_forward(net: Network, layer: LayerSpec, x: np.ndarray, count: bool):
    if net.maxout is None:
        raise StructureError(f"{layer.name}: network has no maxout state")
    return maxout_forward(x, net.maxout, count)


_FORWARD: Dict[str, Callable] = {
    "dense": _dense_forward,
    "conv2d": _conv_forward,
    "relu": _relu_forward,
    "maxpool2": _pool_forward,
    "maxout": _maxout_forward,
}


def forward(
    net: Network, batch: np.ndarray, count: bool = False
) -> Tuple[np.ndarray, ForwardCache]:
    """Run ``batch`` (B×1×28×28) through every layer; return logits and cache.

    The softmax layer is left to :func:`softmax_xent`, so the returned
    values are the pre-softmax logits.
    """

    if batch.ndim != 4 or tuple(batch.shape[1:]) != net.spec.input_shape:
        raise DimensionError(
            f"batch shape {batch.shape} does not match input {net.spec.input_shape}"
        )
    x = batch
    entries: List[Any] = []
    for layer in net.spec.layers:
        if layer.kind == "softmax":
            entries.append(None)
            continue
        x, entry = _FORWARD[layer.kind](net, layer, x, count)
        entries.append(entry)
    return x, ForwardCache(entries)


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy of softmax(logits) and its gradient w.r.t. logits."""

    labels = np.asarray(labels)
    b, classes = logits.shape
    if labels.shape != (b,):
        raise DataError(f"expected {b} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise DataError(f"labels must lie in [0, {classes}), got {labels.min()}..{labels.max()}")
    labels = labels.astype(np.int64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - lse
    rows = np.arange(b)
    loss = float(-log_probs[rows, labels].mean())
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1
    grad /= b
    return loss, grad.astype(logits.dtype, copy=False)


def backward(
    net: Network, cache: Optional[ForwardCache], grad_logits: np.ndarray
) -> Dict[str, np.ndarray]:
    """Gradients of the loss w.r.t. every parameter; masked entries are 0."""

    if cache is None or len(cache.entries) != len(net.spec.layers):
        raise StructureError("backward needs the cache of a matching forward call")
    grads: Dict[str, np.ndarray] = {}
    g = grad_logits
    for layer, entry in zip(reversed(net.spec.layers), reversed(cache.entries)):
        if layer.kind == "softmax":
            continue
        if entry is None:
            raise StructureError(f"missing cache entry for {layer.name}")
        if layer.kind == "dense":
            flat, in_shape = entry
            w = net.params[f"{layer.name}.weight"]
            grads[f"{layer.name}.weight"] = tensor.gemm(g.T, flat)
            grads[f"{layer.name}.bias"] = g.sum(axis=0)
            g = tensor.gemm(g, w).reshape(in_shape)
        elif layer.kind == "conv2d":
            g, gw, gb = tensor.conv2d_backward(g, entry, net.params[f"{layer.name}.weight"])
            grads[f"{layer.name}.weight"] = gw
            grads[f"{layer.name}.bias"] = gb
        elif layer.kind == "relu":
            g = g * entry
        elif layer.kind == "maxpool2":
            argmax, in_shape = entry
            g = tensor.maxpool2d_backward(g, argmax, in_shape)
        elif layer.kind == "maxout":
            g = maxout_backward(g, entry, net.maxout)
    for name, mask in net.masks.items():
        grads[name][mask] = 0.0
    return grads

