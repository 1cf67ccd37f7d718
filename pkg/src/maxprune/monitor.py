"""Stage timing and budget checks for experiment runs."""

from __future__ import annotations

import json
import logging
import os
import resource
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional

import yaml

logger = logging.getLogger("maxprune.monitor")

BUDGET_FILE = Path(__file__).resolve().parents[2] / "execution-budget.yaml"


def load_budget(path: str | Path | None = None) -> Dict[str, Any]:
    """Read the execution budget; a missing file means no limits."""

    path = Path(path) if path is not None else BUDGET_FILE
    try:
        with open(path, "r", encoding="utf-8") as f:
            return yaml.safe_load(f) or {}
    except OSError:
        logger.debug(f"No execution budget at {path}")
        return {}


class StageMonitor:
    """Record runtime and memory per pipeline stage."""

    def __init__(
        self,
        metrics_dir: str | Path | None = None,
        budget_path: str | Path | None = None,
    ) -> None:
        self.metrics_dir = Path(metrics_dir) if metrics_dir is not None else None
        if self.metrics_dir is not None:
            os.makedirs(self.metrics_dir, exist_ok=True)
        self.budgets = load_budget(budget_path).get("performance_budgets", {})
        self.stages: Dict[str, Dict[str, Any]] = {}

    def check_budget_compliance(self, stage: str, metrics: Dict[str, Any]) -> Dict[str, Any]:
        """Compare ``metrics`` against the budget for ``stage`` (or ``default``)."""

        violations: List[Dict[str, str]] = []
        budget = self.budgets.get(stage, self.budgets.get("default", {}))

        limit = budget.get("max_runtime_seconds", float("inf"))
        if metrics["seconds"] > limit:
            violations.append(
                {"metric": "seconds", "message": f"{stage} ran {metrics['seconds']:.1f}s > {limit}s"}
            )
        limit = budget.get("max_memory_mb", float("inf"))
        if metrics["memory_mb"] > limit:
            violations.append(
                {"metric": "memory_mb", "message": f"{stage} grew {metrics['memory_mb']:.0f}MB > {limit}MB"}
            )
        return {"compliant": not violations, "violations": violations}

    @contextmanager
    def monitor(self, stage: str, budget_key: Optional[str] = None) -> Iterator[Dict[str, Any]]:
        """Time the enclosed block; the yielded dict receives the metrics."""

        metrics: Dict[str, Any] = {"stage": stage}
        start_time = time.perf_counter()
        start_mem = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024
        try:
            yield metrics
        finally:
            end_mem = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024
            metrics["seconds"] = time.perf_counter() - start_time
            metrics["memory_mb"] = max(0.0, end_mem - start_mem)
            metrics.update(self.check_budget_compliance(budget_key or stage, metrics))
            for violation in metrics["violations"]:
                logger.warning(violation["message"])
            self.stages[stage] = dict(metrics)
            if self.metrics_dir is not None:
                path = self.metrics_dir / f"{stage}.json"
                with open(path, "w", encoding="utf-8") as f:
                    json.dump(metrics, f, indent=2)

    def seconds(self, stage: str) -> float:
        return float(self.stages.get(stage, {}).get("seconds", 0.0))
