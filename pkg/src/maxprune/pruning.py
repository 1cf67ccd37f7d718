"""Maxout neuron pruning, magnitude weight pruning and weight accounting.

Neuron pruning counts, over a dataset, how often each input of a maxout
unit is the unit's maximum and deletes the least frequent one from every
unit (the incoming weight row of a dense neuron or the filter bank of a
conv channel). Weight pruning zeroes every multiplicative weight at or
below a global magnitude threshold and freezes it with a mask.

All transformations are copy-on-write: the input network is left as is.
"""

from __future__ import annotations

import logging
import math
from contextlib import nullcontext
from dataclasses import dataclass
from functools import reduce
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import TrainConfig
from .dataio import DatasetHandle, chunks
from .errors import ArgumentError, StructureError
from .monitor import StageMonitor
from .network import Network, NetworkSpec, WinnerMap, baseline_of, forward, tally_winners
from .parallel import ShardScheduler
from .persist import ExperimentRecord
from .trainer import evaluate, train

logger = logging.getLogger("maxprune.pruning")


# --- winner counting -----------------------------------------------------


@dataclass
class WinnerCounts:
    """Per-unit win tallies aligned with the maxout survivors."""

    survivors: np.ndarray
    counts: np.ndarray
    total: int

    def merge(self, other: "WinnerCounts") -> "WinnerCounts":
        if not np.array_equal(self.survivors, other.survivors):
            raise StructureError("cannot merge counts taken on different survivor sets")
        return WinnerCounts(self.survivors, self.counts + other.counts, self.total + other.total)

    def per_unit(self, unit: int) -> List[Tuple[int, int]]:
        """(original index, count) pairs of one unit in survivor order."""

        return [
            (int(index), int(count))
            for index, count in zip(self.survivors[unit], self.counts[unit])
        ]

    def validate(self) -> None:
        if self.counts.shape != self.survivors.shape:
            raise StructureError(
                f"counts {self.counts.shape} do not cover survivors {self.survivors.shape}"
            )
        sums = self.counts.sum(axis=1)
        if np.any(sums != self.total):
            raise StructureError(f"unit counts sum to {sums.min()}..{sums.max()}, expected {self.total}")


def _maxout_entry(net: Network, images: np.ndarray) -> WinnerMap:
    _, cache = forward(net, images)
    return cache.entries[net.spec.index(net.maxout.layer)]


def count_winners(
    net: Network, data: DatasetHandle, threads: int = 1, chunk_size: int = 1000
) -> WinnerCounts:
    """Tally maxout winners over ``data``; parameters are not touched.

    The net's counters are reset and then hold the result. Chunks are
    fixed-size and merged in order, so any ``threads`` gives the same counts.
    """

    state = net.maxout
    if state is None:
        raise StructureError("network has no maxout layer to count")
    if state.k_current < 2:
        raise StructureError("maxout layer has k=1; nothing left to count")
    state.reset_counts()

    def tally(piece: Tuple[np.ndarray, np.ndarray]) -> WinnerCounts:
        winners = _maxout_entry(net, piece[0])
        counts = tally_winners(winners)
        positions = winners.slots.size // state.unit_count
        return WinnerCounts(state.survivors, counts, positions)

    empty = WinnerCounts(state.survivors, np.zeros_like(state.win_counts), 0)
    parts = ShardScheduler(threads).map(tally, list(chunks(data, chunk_size)))
    result = reduce(WinnerCounts.merge, parts, empty)
    state.win_counts = result.counts.copy()
    logger.info(
        f"Counted winners of {state.unit_count} units (k={state.k_current}) over {result.total} positions"
    )
    return result


def prune_least_active(net: Network, counts: WinnerCounts) -> Network:
    """Remove the least frequent winner of every unit and return the smaller net.

    Ties go to the lowest original index. The source layer loses one row
    (dense) or filter (conv) per unit; the maxout output width is unchanged.
    """

    state = net.maxout
    if state is None:
        raise StructureError("network has no maxout layer to prune")
    if state.k_current < 2:
        raise StructureError("maxout layer has k=1; cannot prune further")
    if not np.array_equal(counts.survivors, state.survivors) or counts.counts.shape != state.survivors.shape:
        raise StructureError("winner counts do not match the network's maxout units")

    units, k = state.survivors.shape
    losers = np.argmin(counts.counts, axis=1)
    keep = np.ones((units, k), dtype=bool)
    keep[np.arange(units), losers] = False
    rows = keep.ravel()

    pruned = net.copy()
    weight, bias = f"{state.source}.weight", f"{state.source}.bias"
    pruned.params[weight] = np.ascontiguousarray(net.params[weight][rows])
    pruned.params[bias] = np.ascontiguousarray(net.params[bias][rows])
    if weight in pruned.masks:
        pruned.masks[weight] = pruned.masks[weight][rows]
    new_state = pruned.maxout
    new_state.survivors = state.survivors[keep].reshape(units, k - 1)
    new_state.k_current = k - 1
    new_state.reset_counts()
    pruned.validate()
    logger.info(f"Removed {units} neurons from {state.source}; maxout k {k} -> {k - 1}")
    return pruned


# --- accounting ----------------------------------------------------------


@dataclass(frozen=True)
class LayerCount:
    name: str
    original: int
    remaining: int
    masked: int


@dataclass(frozen=True)
class ParamAccount:
    """Multiplicative weight counts of a network against its original."""

    layers: Tuple[LayerCount, ...]

    @property
    def original_total(self) -> int:
        return sum(layer.original for layer in self.layers)

    @property
    def remaining_total(self) -> int:
        return sum(layer.remaining for layer in self.layers)

    @property
    def masked_total(self) -> int:
        return sum(layer.masked for layer in self.layers)

    @property
    def pw_percent(self) -> float:
        """Structurally removed share of the original weights, in percent."""

        return 100.0 * (1.0 - self.remaining_total / self.original_total)

    @property
    def combined_percent(self) -> float:
        """Removed plus masked share of the original weights, in percent."""

        return 100.0 * (1.0 - (self.remaining_total - self.masked_total) / self.original_total)

    def shares(self) -> Dict[str, float]:
        """Fraction of the remaining weights held by each layer."""

        total = self.remaining_total
        return {layer.name: (layer.remaining / total if total else 0.0) for layer in self.layers}


def reference_spec(spec: NetworkSpec) -> NetworkSpec:
    """The architecture p.w.% is measured against: no maxout, same widths."""

    return baseline_of(spec) if spec.maxout_layer is not None else spec


def param_account(original: NetworkSpec, current: Network) -> ParamAccount:
    """Count original, remaining and masked weights per layer."""

    lineage = [current.spec]
    if current.spec.maxout_layer is not None:
        try:
            lineage.append(baseline_of(current.spec))
        except (StructureError, ValueError):
            pass
    if original not in lineage:
        raise StructureError(
            f"network ({current.spec.variant}) does not derive from the given original "
            f"({original.variant})"
        )

    shapes = original.weight_shapes()
    names = current.weight_names()
    if sorted(shapes) != sorted(names):
        raise StructureError("original and current nets have different weight layers")
    layers = []
    for name in names:
        mask = current.masks.get(name)
        layers.append(
            LayerCount(
                name=name.split(".")[0],
                original=math.prod(shapes[name]),
                remaining=int(current.params[name].size),
                masked=int(mask.sum()) if mask is not None else 0,
            )
        )
    return ParamAccount(tuple(layers))


def dead_neuron_fraction(net: Network) -> float:
    """Share of neurons (dense rows, conv filters) whose incoming weights are all 0."""

    dead = total = 0
    for name in net.weight_names():
        w = net.params[name]
        rows = w.reshape(w.shape[0], -1)
        dead += int(np.count_nonzero(~rows.any(axis=1)))
        total += rows.shape[0]
    return dead / total if total else 0.0


def neurons_remaining_percent(net: Network) -> float:
    return 100.0 * (1.0 - dead_neuron_fraction(net))


# --- weight pruning ------------------------------------------------------


def _magnitudes(net: Network) -> np.ndarray:
    return np.concatenate([np.abs(net.params[name]).ravel() for name in net.weight_names()])


def threshold_for_fraction(net: Network, p: float) -> float:
    """Magnitude of the ⌊p·N⌋-th smallest weight over all weight tensors.

    For p with ⌊p·N⌋ = 0 the result is the next value below the smallest
    magnitude that the weights' dtype can represent.
    """

    if not 0.0 <= p < 1.0:
        raise ArgumentError(f"fraction must lie in [0, 1), got {p}")
    mags = _magnitudes(net)
    if mags.size == 0:
        raise StructureError("network has no weights to prune")
    m = math.floor(p * mags.size)
    if m == 0:
        return float(np.nextafter(mags.min(), mags.dtype.type(-np.inf)))
    return float(np.sort(mags, kind="stable")[m - 1])


def prune_weights(
    net: Network,
    tau: float,
    max_count: Optional[int] = None,
    original: Optional[NetworkSpec] = None,
) -> Tuple[Network, ParamAccount]:
    """Mask every weight with |w| <= tau (biases exempt).

    With ``max_count`` only the first ``max_count`` qualifying weights in
    (magnitude, global index) order are masked. A negative ``tau`` masks
    nothing. New masks are OR-ed into existing ones.
    """

    if math.isnan(tau):
        raise ArgumentError("threshold must not be NaN")
    names = net.weight_names()
    mags = _magnitudes(net)
    chosen = mags.astype(np.float64) <= tau
    if max_count is not None and chosen.sum() > max_count:
        order = np.argsort(mags, kind="stable")[: max(0, int(max_count))]
        chosen = np.zeros_like(chosen)
        chosen[order] = True

    pruned = net.copy()
    start = 0
    for name in names:
        w = pruned.params[name]
        mask = chosen[start : start + w.size].reshape(w.shape)
        start += w.size
        if name in pruned.masks:
            mask = mask | pruned.masks[name]
        if mask.any():
            pruned.masks[name] = mask
    pruned.apply_masks()

    account = param_account(original or reference_spec(net.spec), pruned)
    logger.info(
        f"Masked {account.masked_total}/{account.remaining_total} weights at tau={tau:.6g} "
        f"(combined {account.combined_percent:.2f}%)"
    )
    return pruned, account


def prune_fraction(
    net: Network, p: float, original: Optional[NetworkSpec] = None
) -> Tuple[Network, ParamAccount]:
    """Mask exactly ⌊p·N⌋ weights, smallest magnitudes first."""

    tau = threshold_for_fraction(net, p)
    count = math.floor(p * sum(net.params[n].size for n in net.weight_names()))
    return prune_weights(net, tau, max_count=count, original=original)


# --- drivers -------------------------------------------------------------


def _stage(monitor: Optional[StageMonitor], name: str, budget: str):
    return monitor.monitor(name, budget_key=budget) if monitor is not None else nullcontext({})


def iterative_neuron_prune(
    net: Network,
    data: DatasetHandle,
    cfg: TrainConfig,
    steps: int,
    eval_data: Optional[DatasetHandle] = None,
    threads: int = 1,
    chunk_size: int = 1000,
    monitor: Optional[StageMonitor] = None,
) -> Tuple[Network, List[ExperimentRecord]]:
    """Repeat count → prune → retrain → evaluate ``steps`` times.

    Winners are re-counted on the retrained net before every step.
    """

    if net.maxout is None:
        raise StructureError("network has no maxout layer to prune")
    if not 0 <= steps <= net.maxout.k_current - 1:
        raise ArgumentError(
            f"steps must lie in [0, {net.maxout.k_current - 1}] for k={net.maxout.k_current}, got {steps}"
        )
    original = reference_spec(net.spec)
    evaluation = eval_data if eval_data is not None else data
    current = net.copy()
    records: List[ExperimentRecord] = []
    for step in range(1, steps + 1):
        stage = f"neuron-prune-{step}"
        with _stage(monitor, stage, "retrain") as metrics:
            counts = count_winners(current, data, threads, chunk_size)
            current = prune_least_active(current, counts)
            train(current, data, cfg)
            accuracy = evaluate(current, evaluation, threads, chunk_size)
        account = param_account(original, current)
        records.append(
            ExperimentRecord.from_account(
                stage=stage,
                k=current.maxout.k_current,
                iteration=step,
                accuracy=accuracy,
                account=account,
                dead_fraction=dead_neuron_fraction(current),
                seconds=float(metrics.get("seconds", 0.0)),
            )
        )
        logger.info(
            f"Step {step}/{steps}: k={current.maxout.k_current} accuracy {accuracy:.4f} "
            f"p.w. {account.pw_percent:.2f}%"
        )
    return current, records


def _check_fractions(fractions: Sequence[float]) -> List[float]:
    fractions = [float(p) for p in fractions]
    if any(not 0.0 <= p < 1.0 for p in fractions):
        raise ArgumentError("fractions must lie in [0, 1)")
    if fractions != sorted(fractions):
        raise ArgumentError("fractions must be sorted ascending")
    return fractions


def sweep_weight_pruning(
    net: Network,
    fractions: Sequence[float],
    data: DatasetHandle,
    cfg: TrainConfig,
    eval_data: Optional[DatasetHandle] = None,
    threads: int = 1,
    chunk_size: int = 1000,
    monitor: Optional[StageMonitor] = None,
) -> List[ExperimentRecord]:
    """Mask, retrain and evaluate a fresh copy of ``net`` at every fraction.

    Fraction 0 is evaluated without retraining.
    """

    fractions = _check_fractions(fractions)
    original = reference_spec(net.spec)
    evaluation = eval_data if eval_data is not None else data
    k = net.maxout.k_current if net.maxout is not None else 0
    records: List[ExperimentRecord] = []
    for i, p in enumerate(fractions):
        stage = f"weight-prune-{p:g}"
        with _stage(monitor, stage, "retrain") as metrics:
            candidate = net.copy()
            if p > 0:
                candidate, _ = prune_fraction(candidate, p, original)
                train(candidate, data, cfg)
            accuracy = evaluate(candidate, evaluation, threads, chunk_size)
        account = param_account(original, candidate)
        dead = dead_neuron_fraction(candidate)
        records.append(
            ExperimentRecord.from_account(
                stage=stage,
                k=k,
                iteration=i,
                accuracy=accuracy,
                account=account,
                dead_fraction=dead,
                seconds=float(metrics.get("seconds", 0.0)),
            )
        )
        logger.info(
            f"Fraction {p:g}: accuracy {accuracy:.4f}, combined {account.combined_percent:.2f}%, "
            f"neurons remaining {neurons_remaining_percent(candidate):.2f}%"
        )
    return records


@dataclass
class PruneSelection:
    fraction: float
    val_accuracy: float
    reference_accuracy: float
    net: Network


def select_prune_fraction(
    net: Network,
    fractions: Sequence[float],
    train_data: DatasetHandle,
    val_data: DatasetHandle,
    cfg: TrainConfig,
    tolerance: float,
    threads: int = 1,
    chunk_size: int = 1000,
) -> PruneSelection:
    """Largest fraction whose retrained validation accuracy stays within
    ``tolerance`` of the unpruned net's."""

    if tolerance < 0:
        raise ArgumentError(f"tolerance must be >= 0, got {tolerance}")
    fractions = _check_fractions(fractions)
    reference = evaluate(net, val_data, threads, chunk_size)
    best = PruneSelection(0.0, reference, reference, net.copy())
    for p in fractions:
        if p == 0:
            continue
        candidate, _ = prune_fraction(net, p)
        train(candidate, train_data, cfg)
        accuracy = evaluate(candidate, val_data, threads, chunk_size)
        logger.info(f"Fraction {p:g}: validation accuracy {accuracy:.4f} (reference {reference:.4f})")
        if accuracy >= reference - tolerance:
            best = PruneSelection(p, accuracy, reference, candidate)
    logger.info(f"Selected fraction {best.fraction:g}")
    return best
