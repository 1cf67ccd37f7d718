import json
import time

from src.maxprune.monitor import StageMonitor, load_budget
from src.maxprune.parallel import ShardScheduler, worker_cap


def test_scheduler_keeps_shard_order():
    def slow_square(x):
        time.sleep(0.002 * (10 - x))
        return x * x

    assert ShardScheduler(max_workers=4).map(slow_square, range(10)) == [x * x for x in range(10)]
    assert ShardScheduler(max_workers=1).map(slow_square, range(3)) == [0, 1, 4]
    assert ShardScheduler(max_workers=3).map(slow_square, []) == []


def test_worker_cap_reads_budget():
    assert worker_cap() == load_budget()["task_limits"]["max_parallel_tasks"]


def test_load_budget_missing_file(tmp_path):
    assert load_budget(tmp_path / "absent.yaml") == {}


def test_stage_monitor_writes_metrics(tmp_path):
    monitor = StageMonitor(metrics_dir=tmp_path / "perf", budget_path=tmp_path / "absent.yaml")
    with monitor.monitor("count") as metrics:
        pass
    saved = json.loads((tmp_path / "perf" / "count.json").read_text())
    assert saved["stage"] == "count" and saved["compliant"] is True
    assert metrics["seconds"] >= 0.0
    assert monitor.seconds("count") == saved["seconds"]
    assert monitor.seconds("never") == 0.0


def test_stage_monitor_flags_budget_violation(tmp_path):
    budget = tmp_path / "budget.yaml"
    budget.write_text("performance_budgets:\n  retrain:\n    max_runtime_seconds: 0\n")
    monitor = StageMonitor(budget_path=budget)
    with monitor.monitor("weight-prune-0.5", budget_key="retrain") as metrics:
        time.sleep(0.01)
    assert metrics["compliant"] is False
    assert metrics["violations"][0]["metric"] == "seconds"
