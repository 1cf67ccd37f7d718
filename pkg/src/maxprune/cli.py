"""Command-line front end.

Every subcommand resolves a :class:`RunConfig` (defaults < ``--config`` file <
flags), writes ``run.json`` with the resolved values into the output
directory and then runs. Exit status is 0 on success, 2 for usage,
configuration and missing-file errors and 1 for any other failure, with a
single ``error: <Class>: <message>`` line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

from . import __version__
from .config import FC_SIZES, VARIANTS, RunConfig, load_run_config
from .dataio import DatasetHandle, load_embeddings, load_mnist, split_validation
from .errors import ConfigError, FormatError, MaxPruneError, UsageError
from .metrics import det_curve, eer, randomization_test, verification_scores
from .monitor import StageMonitor
from .network import Network, lenet_spec
from .parallel import worker_cap
from .persist import (
    ExperimentRecord,
    load_checkpoint,
    read_report,
    save_checkpoint,
    write_history,
    write_report,
)
from .pruning import (
    count_winners,
    dead_neuron_fraction,
    iterative_neuron_prune,
    param_account,
    prune_fraction,
    reference_spec,
    select_prune_fraction,
    sweep_weight_pruning,
)
from .tensor import make_rng
from .trainer import evaluate, prediction_errors, train

logger = logging.getLogger("maxprune.cli")

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(message)


def _fraction(text: str) -> float:
    try:
        value = float(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"invalid fraction {text!r}") from exc
    if not 0.0 <= value < 1.0:
        raise argparse.ArgumentTypeError(f"fraction must lie in [0, 1), got {text}")
    return value


def _fractions(text: str) -> List[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"invalid fraction list {text!r}") from exc


def _common_options() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON or YAML file with flat RunConfig keys")
    common.add_argument("--output-dir", dest="output_dir", help="Directory for all outputs")
    common.add_argument("--data", dest="data_dir", help="MNIST root (default: $MAXPRUNE_DATA)")
    common.add_argument("--threads", type=int, help="Worker threads for evaluation and counting")
    common.add_argument("--seed", type=int, help="Seed for initialization, shuffling and tests")
    common.add_argument("--limit", type=int, help="Use only the first N samples of each split")
    common.add_argument("--eval-chunk", dest="eval_chunk", type=int, help="Samples per evaluation chunk")
    common.add_argument(
        "--deterministic",
        action="store_const",
        const=True,
        help="Write 0 seconds into reports so reruns are byte-identical",
    )
    common.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Logging level",
    )
    return common


def _training_options(parser: argparse.ArgumentParser, retrain: bool) -> None:
    parser.add_argument("--iterations", type=int, help="SGD iterations")
    parser.add_argument("--base-lr", dest="base_lr", type=float, help="Base learning rate")
    parser.add_argument("--batch-size", dest="batch_size", type=int, help="Mini-batch size")
    if retrain:
        parser.add_argument(
            "--retrain-iterations", dest="retrain_iterations", type=int, help="Iterations after pruning"
        )
        parser.add_argument(
            "--retrain-lr", dest="retrain_base_lr", type=float, help="Base learning rate after pruning"
        )


def _checkpoint_option(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--checkpoint", required=True, help="Input checkpoint (.mxpn)")


def _output_option(parser: argparse.ArgumentParser, default: str) -> None:
    parser.add_argument("--out", help=f"Output checkpoint (default: <output-dir>/{default})")


def build_parser() -> argparse.ArgumentParser:
    common = _common_options()
    parser = _Parser(prog="maxprune", description="Maxout neuron pruning and weight pruning toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True, help="Command to execute")

    train_parser = subparsers.add_parser("train", parents=[common], help="Train a reference network")
    train_parser.add_argument("--variant", choices=VARIANTS, help="baseline, mfc or mc")
    train_parser.add_argument("--fc-size", dest="fc_size", type=int, help=f"Dense width {FC_SIZES}")
    train_parser.add_argument("--k", type=int, help="Maxout group size")
    train_parser.add_argument("--conv1-filters", dest="conv1_filters", type=int)
    train_parser.add_argument("--conv2-filters", dest="conv2_filters", type=int)
    train_parser.add_argument(
        "--allow-custom-sizes", dest="allow_custom_sizes", action="store_const", const=True
    )
    _training_options(train_parser, retrain=False)
    _output_option(train_parser, "model.mxpn")

    count_parser = subparsers.add_parser("count", parents=[common], help="Count maxout winners")
    _checkpoint_option(count_parser)

    neurons_parser = subparsers.add_parser(
        "prune-neurons", parents=[common], help="Iteratively remove least active maxout inputs"
    )
    _checkpoint_option(neurons_parser)
    neurons_parser.add_argument("--steps", dest="prune_steps", type=int, help="Pruning iterations")
    _training_options(neurons_parser, retrain=True)
    _output_option(neurons_parser, "pruned.mxpn")

    weights_parser = subparsers.add_parser(
        "prune-weights", parents=[common], help="Mask small weights and retrain"
    )
    _checkpoint_option(weights_parser)
    how = weights_parser.add_mutually_exclusive_group(required=True)
    how.add_argument("--fraction", type=_fraction, help="Fraction of weights to mask")
    how.add_argument("--auto", action="store_true", help="Pick the fraction on a validation split")
    weights_parser.add_argument("--fractions", dest="prune_fractions", type=_fractions)
    weights_parser.add_argument("--holdout", type=int, help="Validation samples for --auto")
    weights_parser.add_argument("--tolerance", type=float, help="Allowed validation accuracy drop")
    weights_parser.add_argument("--dense", dest="sparse", action="store_const", const=False)
    _training_options(weights_parser, retrain=True)
    _output_option(weights_parser, "masked.mxpn")

    sweep_parser = subparsers.add_parser(
        "sweep", parents=[common], help="Accuracy and dead neurons across prune fractions"
    )
    _checkpoint_option(sweep_parser)
    sweep_parser.add_argument("--fractions", dest="prune_fractions", type=_fractions)
    _training_options(sweep_parser, retrain=True)

    eval_parser = subparsers.add_parser("eval", parents=[common], help="Test accuracy of a checkpoint")
    _checkpoint_option(eval_parser)
    eval_parser.add_argument("--split", default="test", choices=["train", "test"])

    verify_parser = subparsers.add_parser(
        "verify", parents=[common], help="EER of Bray-Curtis distances on an embeddings file"
    )
    verify_parser.add_argument("--embeddings", required=True, help="Pair file (d/m/n lines)")

    compare_parser = subparsers.add_parser(
        "compare", parents=[common], help="Randomization test between two eval.json files"
    )
    compare_parser.add_argument("first", help="eval.json of network A")
    compare_parser.add_argument("second", help="eval.json of network B")
    compare_parser.add_argument("--permutations", type=int)

    report_parser = subparsers.add_parser(
        "report", parents=[common], help="Accounting records for checkpoints and merged CSVs"
    )
    report_parser.add_argument("--checkpoints", nargs="*", default=[], help="Checkpoints to account")
    report_parser.add_argument("--merge", nargs="*", default=[], help="Report CSVs to append")
    report_parser.add_argument("--evaluate", action="store_true", help="Evaluate checkpoints on the test split")
    report_parser.add_argument("--out", help="Report path (default: <output-dir>/report.csv)")

    return parser


# --- helpers -------------------------------------------------------------


def _arguments(args: argparse.Namespace) -> Dict[str, Any]:
    """Command arguments that are not RunConfig fields."""

    keys = {f.name for f in fields(RunConfig)}
    return {key: value for key, value in sorted(vars(args).items()) if key not in keys}


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    keys = {f.name for f in fields(RunConfig)}
    overrides = {key: value for key, value in vars(args).items() if key in keys}
    cfg = load_run_config(args.config, overrides)
    cap = worker_cap()
    if cfg.threads > cap:
        logger.warning(f"Clamping --threads {cfg.threads} to the budget cap {cap}")
        cfg.threads = cap
    return cfg


def _load_split(cfg: RunConfig, split: str) -> DatasetHandle:
    data = load_mnist(cfg.data_dir, split)
    return data.take(cfg.limit) if cfg.limit else data


def _finish_records(records: List[ExperimentRecord], cfg: RunConfig) -> List[ExperimentRecord]:
    if cfg.deterministic:
        for record in records:
            record.seconds = 0.0
    return records


def _write_json(path: Path, payload: Dict[str, Any]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _record(stage: str, net: Network, iteration: int, accuracy: float, seconds: float) -> ExperimentRecord:
    return ExperimentRecord.from_account(
        stage=stage,
        k=net.maxout.k_current if net.maxout is not None else 0,
        iteration=iteration,
        accuracy=accuracy,
        account=param_account(reference_spec(net.spec), net),
        dead_fraction=dead_neuron_fraction(net),
        seconds=seconds,
    )


def _out_path(args: argparse.Namespace, out_dir: Path, default: str) -> Path:
    return Path(args.out) if getattr(args, "out", None) else out_dir / default


# --- commands ------------------------------------------------------------


def cmd_train(args: argparse.Namespace, cfg: RunConfig, out_dir: Path, monitor: StageMonitor) -> int:
    spec = lenet_spec(cfg.variant, cfg.fc_size, cfg.k, cfg.conv1_filters, cfg.conv2_filters)
    net = Network.initialize(spec, make_rng(cfg.seed))
    train_data = _load_split(cfg, "train")
    test_data = _load_split(cfg, "test")
    with monitor.monitor("train") as metrics:
        history = train(net, train_data, cfg.to_train_config(), eval_data=test_data)
        accuracy = evaluate(net, test_data, cfg.threads, cfg.eval_chunk)

    path = _out_path(args, out_dir, "model.mxpn")
    save_checkpoint(net, path)
    write_history(history, out_dir / "history.csv")
    record = _record("train", net, cfg.iterations, accuracy, metrics["seconds"])
    write_report(_finish_records([record], cfg), out_dir / "report.csv")
    print(f"accuracy {accuracy:.6f}")
    print(f"checkpoint {path}")
    return 0


def cmd_count(args: argparse.Namespace, cfg: RunConfig, out_dir: Path, monitor: StageMonitor) -> int:
    net = load_checkpoint(args.checkpoint)
    data = _load_split(cfg, "train")
    with monitor.monitor("count"):
        counts = count_winners(net, data, cfg.threads, cfg.eval_chunk)

    with open(out_dir / "counts.csv", "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(("unit", "slot", "original_index", "count"))
        for unit in range(counts.survivors.shape[0]):
            for slot, (index, count) in enumerate(counts.per_unit(unit)):
                writer.writerow((unit, slot, index, count))
    print(f"positions {counts.total} units {counts.survivors.shape[0]} k {counts.survivors.shape[1]}")
    return 0


def cmd_prune_neurons(
    args: argparse.Namespace, cfg: RunConfig, out_dir: Path, monitor: StageMonitor
) -> int:
    net = load_checkpoint(args.checkpoint)
    steps = cfg.steps_for(net.maxout.k_current) if net.maxout is not None else 0
    train_data = _load_split(cfg, "train")
    test_data = _load_split(cfg, "test")
    pruned, records = iterative_neuron_prune(
        net,
        train_data,
        cfg.to_retrain_config(),
        steps,
        eval_data=test_data,
        threads=cfg.threads,
        chunk_size=cfg.eval_chunk,
        monitor=monitor,
    )
    path = _out_path(args, out_dir, "pruned.mxpn")
    save_checkpoint(pruned, path)
    write_report(_finish_records(records, cfg), out_dir / "report.csv")
    for record in records:
        print(f"{record.stage} k={record.k} accuracy {record.accuracy:.6f} pw {record.pw_percent:.2f}%")
    return 0


def cmd_prune_weights(
    args: argparse.Namespace, cfg: RunConfig, out_dir: Path, monitor: StageMonitor
) -> int:
    net = load_checkpoint(args.checkpoint)
    train_data = _load_split(cfg, "train")
    test_data = _load_split(cfg, "test")
    retrain_cfg = cfg.to_retrain_config()
    with monitor.monitor("prune-weights", budget_key="retrain") as metrics:
        if args.auto:
            fit, val = split_validation(train_data, cfg.holdout)
            selection = select_prune_fraction(
                net, cfg.prune_fractions, fit, val, retrain_cfg, cfg.tolerance, cfg.threads, cfg.eval_chunk
            )
            fraction, pruned = selection.fraction, selection.net
        else:
            fraction = args.fraction
            pruned, _ = prune_fraction(net, fraction)
            train(pruned, train_data, retrain_cfg)
        accuracy = evaluate(pruned, test_data, cfg.threads, cfg.eval_chunk)

    path = _out_path(args, out_dir, "masked.mxpn")
    save_checkpoint(pruned, path, sparse_storage=cfg.sparse)
    record = _record(f"weight-prune-{fraction:g}", pruned, 0, accuracy, metrics["seconds"])
    write_report(_finish_records([record], cfg), out_dir / "report.csv")
    print(f"fraction {fraction:g} accuracy {accuracy:.6f} combined {record.combined_percent:.2f}%")
    return 0


def cmd_sweep(args: argparse.Namespace, cfg: RunConfig, out_dir: Path, monitor: StageMonitor) -> int:
    net = load_checkpoint(args.checkpoint)
    records = sweep_weight_pruning(
        net,
        cfg.prune_fractions,
        _load_split(cfg, "train"),
        cfg.to_retrain_config(),
        eval_data=_load_split(cfg, "test"),
        threads=cfg.threads,
        chunk_size=cfg.eval_chunk,
        monitor=monitor,
    )
    write_report(_finish_records(records, cfg), out_dir / "sweep.csv")
    for record in records:
        print(
            f"{record.stage} accuracy {record.accuracy:.6f} combined {record.combined_percent:.2f}% "
            f"neurons remaining {100.0 * (1.0 - record.dead_fraction):.2f}%"
        )
    return 0


def cmd_eval(args: argparse.Namespace, cfg: RunConfig, out_dir: Path, monitor: StageMonitor) -> int:
    net = load_checkpoint(args.checkpoint)
    data = _load_split(cfg, args.split)
    errors = prediction_errors(net, data, cfg.threads, cfg.eval_chunk)
    accuracy = float(1.0 - errors.mean())
    _write_json(
        out_dir / "eval.json",
        {
            "checkpoint": str(args.checkpoint),
            "split": args.split,
            "accuracy": accuracy,
            "n": int(errors.size),
            "errors": errors.astype(int).tolist(),
        },
    )
    print(f"accuracy {accuracy:.6f}")
    return 0


def cmd_verify(args: argparse.Namespace, cfg: RunConfig, out_dir: Path, monitor: StageMonitor) -> int:
    pairs = load_embeddings(args.embeddings)
    scores = verification_scores(pairs)
    result = eer(scores)
    with open(out_dir / "roc.csv", "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(("threshold", "far", "frr"))
        for tau, far, frr in det_curve(scores):
            writer.writerow((f"{tau:.6g}", f"{far:.6g}", f"{frr:.6g}"))
    _write_json(
        out_dir / "verify.json",
        {
            "eer": result.eer,
            "threshold": result.threshold,
            "matched": len(pairs.matched),
            "nonmatched": len(pairs.nonmatched),
            "dimension": pairs.dim,
        },
    )
    print(f"eer {result.eer:.6f} threshold {result.threshold:.6g}")
    return 0


def _read_eval(path: str) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
        payload["errors"] = [bool(e) for e in payload["errors"]]
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc.msg}", offset=exc.pos) from exc
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: not an eval.json file") from exc
    return payload


def cmd_compare(args: argparse.Namespace, cfg: RunConfig, out_dir: Path, monitor: StageMonitor) -> int:
    first, second = _read_eval(args.first), _read_eval(args.second)
    p_value = randomization_test(
        first["errors"], second["errors"], cfg.permutations, make_rng(cfg.seed)
    )
    _write_json(
        out_dir / "compare.json",
        {
            "first": args.first,
            "second": args.second,
            "accuracy_first": first.get("accuracy"),
            "accuracy_second": second.get("accuracy"),
            "permutations": cfg.permutations,
            "p_value": p_value,
        },
    )
    print(f"p_value {p_value:.6g}")
    return 0


def cmd_report(args: argparse.Namespace, cfg: RunConfig, out_dir: Path, monitor: StageMonitor) -> int:
    if not args.checkpoints and not args.merge:
        raise UsageError("report needs --checkpoints and/or --merge")
    records: List[ExperimentRecord] = []
    test_data = _load_split(cfg, "test") if args.evaluate and args.checkpoints else None
    for checkpoint in args.checkpoints:
        net = load_checkpoint(checkpoint)
        accuracy = (
            evaluate(net, test_data, cfg.threads, cfg.eval_chunk) if test_data is not None else float("nan")
        )
        records.append(_record(Path(checkpoint).stem, net, 0, accuracy, 0.0))
    for path in args.merge:
        records.extend(read_report(path))
    path = Path(args.out) if args.out else out_dir / "report.csv"
    write_report(_finish_records(records, cfg), path)
    print(f"report {path} ({len(records)} records)")
    return 0


COMMANDS: Dict[str, Callable[..., int]] = {
    "train": cmd_train,
    "count": cmd_count,
    "prune-neurons": cmd_prune_neurons,
    "prune-weights": cmd_prune_weights,
    "sweep": cmd_sweep,
    "eval": cmd_eval,
    "verify": cmd_verify,
    "compare": cmd_compare,
    "report": cmd_report,
}


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand and return its exit code."""

    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        logging.getLogger("maxprune").setLevel(args.log_level)
        cfg = _resolve_config(args)
        out_dir = Path(cfg.output_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_json(
            out_dir / "run.json",
            {
                "command": args.command,
                "argv": argv,
                "version": __version__,
                "arguments": _arguments(args),
                "config": cfg.to_dict(),
            },
        )
        monitor = StageMonitor(metrics_dir=out_dir / "performance")
        return COMMANDS[args.command](args, cfg, out_dir, monitor)
    except SystemExit as exc:
        # --help / --version
        return int(exc.code or 0)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (MaxPruneError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    logging.basicConfig(level=logging.INFO, format=LOG_FORMAT)
    sys.exit(dispatch())
