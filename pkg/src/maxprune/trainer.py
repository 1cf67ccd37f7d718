"""SGD with momentum, weight decay and an inverse-decay learning rate."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .config import TrainConfig
from .dataio import DatasetHandle, batches, chunks
from .errors import DataError, StructureError
from .network import Network, backward, forward, softmax_xent
from .parallel import ShardScheduler

logger = logging.getLogger("maxprune.trainer")


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """base_lr · (1 + lr_gamma · iteration) ^ (−lr_power)."""

    return cfg.base_lr * (1.0 + cfg.lr_gamma * iteration) ** (-cfg.lr_power)


@dataclass
class OptimState:
    """Momentum buffers (one per parameter) and the iteration counter."""

    velocity: Dict[str, np.ndarray]
    iteration: int = 0

    @classmethod
    def zeros_like(cls, net: Network) -> "OptimState":
        return cls({name: np.zeros_like(p) for name, p in net.params.items()})


@dataclass
class HistoryEntry:
    iteration: int
    loss: float
    lr: float
    accuracy: Optional[float] = None


@dataclass
class History:
    """Per-iteration loss and learning rate, plus periodic evaluations."""

    entries: List[HistoryEntry] = field(default_factory=list)

    def append(self, entry: HistoryEntry) -> None:
        if self.entries and entry.iteration <= self.entries[-1].iteration:
            raise StructureError("history iterations must be strictly increasing")
        self.entries.append(entry)

    def running_loss(self, window: int = 50) -> float:
        tail = self.entries[-window:]
        if not tail:
            return float("nan")
        return float(np.mean([e.loss for e in tail]))

    def __len__(self) -> int:
        return len(self.entries)


def sgd_step(
    net: Network, grads: Dict[str, np.ndarray], state: OptimState, cfg: TrainConfig
) -> float:
    """One momentum update; returns the learning rate used.

    v ← momentum·v − lr·(g + weight_decay·w);  w ← w + v; masked w and v
    are forced back to zero.
    """

    lr = lr_at(state.iteration, cfg)
    for name, w in net.params.items():
        g = grads.get(name)
        v = state.velocity.get(name)
        if g is None or v is None or g.shape != w.shape or v.shape != w.shape:
            raise StructureError(
                f"gradient/velocity for {name} do not match parameter shape {w.shape}"
            )
        v *= cfg.momentum
        v -= lr * (g + cfg.weight_decay * w)
        w += v
        mask = net.masks.get(name)
        if mask is not None:
            w[mask] = 0.0
            v[mask] = 0.0
    state.iteration += 1
    return lr


def _batch_stream(data: DatasetHandle, cfg: TrainConfig) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    epoch = 0
    while True:
        yield from batches(data, cfg.batch_size, cfg.seed, epoch)
        epoch += 1


def train(
    net: Network,
    data: DatasetHandle,
    cfg: TrainConfig,
    eval_data: Optional[DatasetHandle] = None,
) -> History:
    """Train ``net`` in place for ``cfg.iterations`` steps with fresh velocities."""

    cfg.validate()
    history = History()
    if cfg.iterations == 0:
        return history
    if len(data) == 0:
        raise DataError("cannot train on an empty dataset")

    state = OptimState.zeros_like(net)
    stream = _batch_stream(data, cfg)
    for it in range(cfg.iterations):
        images, labels = next(stream)
        logits, cache = forward(net, images)
        loss, grad_logits = softmax_xent(logits, labels)
        grads = backward(net, cache, grad_logits)
        lr = sgd_step(net, grads, state, cfg)
        entry = HistoryEntry(iteration=it, loss=loss, lr=lr)
        if eval_data is not None and cfg.eval_every and (it + 1) % cfg.eval_every == 0:
            entry.accuracy = evaluate(net, eval_data)
            logger.info(f"iteration {it + 1}: eval accuracy {entry.accuracy:.4f}")
        history.append(entry)
        if cfg.log_every and (it + 1) % cfg.log_every == 0:
            logger.info(
                f"iteration {it + 1}/{cfg.iterations}: loss {history.running_loss(cfg.log_every):.4f} lr {lr:.6f}"
            )
    return history


def predict(net: Network, images: np.ndarray) -> np.ndarray:
    """Arg-max class per sample (no winner counting)."""

    logits, _ = forward(net, images)
    return np.argmax(logits, axis=1)


def prediction_errors(
    net: Network, data: DatasetHandle, threads: int = 1, chunk_size: int = 1000
) -> np.ndarray:
    """Boolean vector, True where the prediction misses the label.

    The data is cut into fixed chunks independent of ``threads``, so the
    result does not depend on the worker count.
    """

    if len(data) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    pieces = list(chunks(data, chunk_size))
    scheduler = ShardScheduler(threads)
    preds = scheduler.map(lambda piece: predict(net, piece[0]), pieces)
    return np.concatenate(preds) != data.labels


def evaluate(
    net: Network, data: DatasetHandle, threads: int = 1, chunk_size: int = 1000
) -> float:
    """Fraction of samples whose arg-max logit equals the label."""

    errors = prediction_errors(net, data, threads, chunk_size)
    return float(1.0 - errors.mean())
