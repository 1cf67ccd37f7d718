import json
from pathlib import Path

import numpy as np
import pytest

from src.maxprune.cli import dispatch
from src.maxprune.dataio import load_mnist
from src.maxprune.persist import load_checkpoint, read_report, save_checkpoint
from src.maxprune.trainer import evaluate
from tests.conftest import tiny_net

FAST = ["--retrain-iterations", "2", "--batch-size", "16"]
GOLDEN = Path(__file__).parent / "fixtures" / "golden"


@pytest.fixture
def checkpoint(tmp_path):
    path = tmp_path / "tiny.mxpn"
    save_checkpoint(tiny_net("mfc", seed=7), path)
    return path


def run(mnist_dir, out_dir, *argv):
    return dispatch([*argv, "--data", str(mnist_dir), "--output-dir", str(out_dir)])


def test_eval_matches_library_evaluation(tmp_path, mnist_dir, checkpoint):
    assert run(mnist_dir, tmp_path / "out", "eval", "--checkpoint", str(checkpoint)) == 0
    payload = json.loads((tmp_path / "out" / "eval.json").read_text())
    expected = evaluate(load_checkpoint(checkpoint), load_mnist(mnist_dir, "test"))
    assert payload["n"] == 100 and len(payload["errors"]) == 100
    assert payload["accuracy"] == pytest.approx(expected)
    assert set(payload["errors"]) <= {0, 1}


def test_eval_golden_checkpoint_prints_frozen_accuracy(tmp_path, capsys):
    # Bright samples score class 7, dark ones class 3; 28 of 100 labels agree.
    argv = ["eval", "--checkpoint", str(GOLDEN / "golden.mxpn"), "--data", str(GOLDEN), "--output-dir", str(tmp_path)]
    assert dispatch(argv) == 0
    assert capsys.readouterr().out.strip().splitlines()[-1] == "accuracy 0.280000"
    payload = json.loads((tmp_path / "eval.json").read_text())
    assert payload["n"] == 100
    assert payload["errors"][:8] == [0, 1, 1, 1, 1, 0, 1, 1]


def test_eval_independent_of_threads(tmp_path, mnist_dir, checkpoint):
    for threads in ("1", "3"):
        out = tmp_path / f"t{threads}"
        assert run(mnist_dir, out, "eval", "--checkpoint", str(checkpoint), "--threads", threads, "--eval-chunk", "16") == 0
    one = json.loads((tmp_path / "t1" / "eval.json").read_text())
    three = json.loads((tmp_path / "t3" / "eval.json").read_text())
    assert one["errors"] == three["errors"] and one["accuracy"] == three["accuracy"]


def test_train_writes_outputs(tmp_path, mnist_dir):
    out = tmp_path / "train"
    code = run(
        mnist_dir,
        out,
        "train",
        "--variant", "mfc",
        "--allow-custom-sizes",
        "--conv1-filters", "2",
        "--conv2-filters", "4",
        "--fc-size", "8",
        "--iterations", "5",
        "--batch-size", "8",
    )
    assert code == 0
    net = load_checkpoint(out / "model.mxpn")
    assert net.spec.fc_size == 8 and net.maxout.k_current == 4
    assert len((out / "history.csv").read_text().splitlines()) == 6
    [record] = read_report(out / "report.csv")
    assert record.stage == "train" and record.iteration == 5
    run_json = json.loads((out / "run.json").read_text())
    assert run_json["command"] == "train"
    assert run_json["config"]["fc_size"] == 8
    assert run_json["config"]["momentum"] == 0.9
    assert (out / "performance" / "train.json").exists()


def test_count_writes_one_row_per_slot(tmp_path, mnist_dir, checkpoint):
    out = tmp_path / "count"
    assert run(mnist_dir, out, "count", "--checkpoint", str(checkpoint)) == 0
    lines = (out / "counts.csv").read_text().splitlines()
    assert lines[0] == "unit,slot,original_index,count"
    units = load_checkpoint(checkpoint).maxout.unit_count
    assert units == 2
    assert len(lines) == 1 + units * 4
    wins = sum(int(line.split(",")[3]) for line in lines[1:])
    assert wins == 120 * units


def test_prune_neurons_three_steps(tmp_path, mnist_dir, checkpoint):
    before = checkpoint.read_bytes()
    out = tmp_path / "neurons"
    assert run(mnist_dir, out, "prune-neurons", "--checkpoint", str(checkpoint), "--steps", "3", *FAST) == 0
    records = read_report(out / "report.csv")
    assert [r.k for r in records] == [3, 2, 1]
    assert [r.iteration for r in records] == [1, 2, 3]
    pw = [r.pw_percent for r in records]
    assert pw == sorted(pw)
    assert load_checkpoint(out / "pruned.mxpn").maxout.k_current == 1
    assert checkpoint.read_bytes() == before


def test_prune_neurons_deterministic_reports(tmp_path, mnist_dir, checkpoint):
    for name in ("a", "b"):
        argv = ["prune-neurons", "--checkpoint", str(checkpoint), "--steps", "2", "--deterministic", *FAST]
        assert run(mnist_dir, tmp_path / name, *argv) == 0
    first = (tmp_path / "a" / "report.csv").read_bytes()
    assert first == (tmp_path / "b" / "report.csv").read_bytes()
    assert (tmp_path / "a" / "pruned.mxpn").read_bytes() == (tmp_path / "b" / "pruned.mxpn").read_bytes()


def test_prune_weights_fixed_fraction(tmp_path, mnist_dir, checkpoint):
    out = tmp_path / "weights"
    assert run(mnist_dir, out, "prune-weights", "--checkpoint", str(checkpoint), "--fraction", "0.5", *FAST) == 0
    [record] = read_report(out / "report.csv")
    assert record.stage == "weight-prune-0.5"
    assert record.masked_weights >= record.remaining_weights // 2
    net = load_checkpoint(out / "masked.mxpn")
    for name, mask in net.masks.items():
        assert np.all(net.params[name][mask] == 0.0)


def test_prune_weights_auto_selection(tmp_path, mnist_dir, checkpoint):
    out = tmp_path / "auto"
    argv = ["prune-weights", "--checkpoint", str(checkpoint), "--auto", "--fractions", "0,0.3", "--holdout", "20", *FAST]
    assert run(mnist_dir, out, *argv) == 0
    [record] = read_report(out / "report.csv")
    assert record.stage in ("weight-prune-0", "weight-prune-0.3")


def test_sweep_writes_one_row_per_fraction(tmp_path, mnist_dir, checkpoint):
    out = tmp_path / "sweep"
    assert run(mnist_dir, out, "sweep", "--checkpoint", str(checkpoint), "--fractions", "0,0.5,0.9", *FAST) == 0
    records = read_report(out / "sweep.csv")
    assert [r.stage for r in records] == ["weight-prune-0", "weight-prune-0.5", "weight-prune-0.9"]
    combined = [r.combined_percent for r in records]
    assert combined == sorted(combined)


def test_verify_writes_eer(tmp_path, mnist_dir):
    pairs = tmp_path / "pairs.txt"
    pairs.write_text("d 2\nm 1 0 1 0\nm 0 1 0 1\nn 1 0 0 1\nn 0 1 1 0\n")
    out = tmp_path / "verify"
    assert run(mnist_dir, out, "verify", "--embeddings", str(pairs)) == 0
    payload = json.loads((out / "verify.json").read_text())
    assert payload["eer"] == 0.0
    assert (payload["matched"], payload["nonmatched"], payload["dimension"]) == (2, 2, 2)
    assert (out / "roc.csv").read_text().startswith("threshold,far,frr\n")


def test_compare_same_network_is_not_significant(tmp_path, mnist_dir, checkpoint):
    assert run(mnist_dir, tmp_path / "e", "eval", "--checkpoint", str(checkpoint)) == 0
    evaluation = str(tmp_path / "e" / "eval.json")
    out = tmp_path / "cmp"
    assert run(mnist_dir, out, "compare", evaluation, evaluation, "--permutations", "50") == 0
    assert json.loads((out / "compare.json").read_text())["p_value"] == 1.0


def test_report_accounts_and_merges(tmp_path, mnist_dir, checkpoint):
    assert run(mnist_dir, tmp_path / "n", "prune-neurons", "--checkpoint", str(checkpoint), "--steps", "1", *FAST) == 0
    out = tmp_path / "report"
    argv = ["report", "--checkpoints", str(checkpoint), "--merge", str(tmp_path / "n" / "report.csv"), "--evaluate"]
    assert run(mnist_dir, out, *argv) == 0
    records = read_report(out / "report.csv")
    assert [r.stage for r in records] == ["tiny", "neuron-prune-1"]
    assert records[0].pw_percent < records[1].pw_percent
    assert 0.0 <= records[0].accuracy <= 1.0


def test_unknown_flag_is_usage_error(tmp_path, mnist_dir, capsys):
    assert run(mnist_dir, tmp_path, "train", "--bogus") == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: UsageError:")


def test_invalid_config_exits_2(tmp_path, mnist_dir, capsys):
    assert run(mnist_dir, tmp_path, "train", "--fc-size", "100") == 2
    assert capsys.readouterr().err.startswith("error: ConfigError:")


def test_missing_checkpoint_exits_2(tmp_path, mnist_dir, capsys):
    assert run(mnist_dir, tmp_path / "o", "eval", "--checkpoint", str(tmp_path / "absent.mxpn")) == 2
    assert capsys.readouterr().err.startswith("error: FileNotFoundError:")


def test_runtime_failure_exits_1(tmp_path, mnist_dir, capsys):
    broken = tmp_path / "broken.mxpn"
    broken.write_bytes(b"not a checkpoint at all")
    assert run(mnist_dir, tmp_path / "o", "eval", "--checkpoint", str(broken)) == 1
    assert capsys.readouterr().err.startswith("error: FormatError:")


def test_version_flag(capsys):
    assert dispatch(["--version"]) == 0
    assert "maxprune" in capsys.readouterr().out


def test_train_with_small_k_needs_no_steps(tmp_path, mnist_dir):
    argv = ["train", "--allow-custom-sizes", "--conv1-filters", "2", "--conv2-filters", "4", "--fc-size", "8"]
    assert run(mnist_dir, tmp_path / "k2", *argv, "--k", "2", "--iterations", "1") == 0
    assert load_checkpoint(tmp_path / "k2" / "model.mxpn").maxout.k_current == 2


def test_too_many_steps_for_checkpoint_exits_2(tmp_path, mnist_dir, checkpoint, capsys):
    assert run(mnist_dir, tmp_path / "o", "prune-neurons", "--checkpoint", str(checkpoint), "--steps", "4", *FAST) == 2
    assert capsys.readouterr().err.startswith("error: ConfigError:")


@pytest.mark.parametrize("fraction", ["1.5", "-0.1", "1", "half"])
def test_out_of_range_fraction_is_usage_error(tmp_path, mnist_dir, checkpoint, capsys, fraction):
    argv = ["prune-weights", "--checkpoint", str(checkpoint), "--fraction", fraction]
    assert run(mnist_dir, tmp_path / "o", *argv) == 2
    assert capsys.readouterr().err.startswith("error: UsageError:")


def test_mistyped_config_file_exits_2(tmp_path, mnist_dir, capsys):
    config = tmp_path / "run.json"
    config.write_text('{"iterations": "5"}')
    assert run(mnist_dir, tmp_path / "o", "train", "--config", str(config)) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: ConfigError: iterations")


def test_run_json_records_command_arguments(tmp_path, mnist_dir, checkpoint):
    out = tmp_path / "weights"
    assert run(mnist_dir, out, "prune-weights", "--checkpoint", str(checkpoint), "--fraction", "0.5", *FAST) == 0
    arguments = json.loads((out / "run.json").read_text())["arguments"]
    assert arguments["fraction"] == 0.5 and arguments["auto"] is False
    assert arguments["checkpoint"] == str(checkpoint)


def test_verify_rejects_binary_embeddings(tmp_path, mnist_dir, capsys):
    pairs = tmp_path / "pairs.txt"
    pairs.write_bytes(b"d 1\nm 1 1\nn 1 \xff\n")
    assert run(mnist_dir, tmp_path / "o", "verify", "--embeddings", str(pairs)) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: FormatError:")


def test_malformed_checkpoint_header_exits_1(tmp_path, mnist_dir, checkpoint, capsys):
    raw = checkpoint.read_bytes()
    length = int.from_bytes(raw[8:12], "little")
    header = json.loads(raw[12 : 12 + length])
    del header["tensors"][0]["nbytes"]
    encoded = json.dumps(header).encode("utf-8")
    broken = tmp_path / "broken.mxpn"
    broken.write_bytes(raw[:8] + len(encoded).to_bytes(4, "little") + encoded + raw[12 + length :])
    assert run(mnist_dir, tmp_path / "o", "eval", "--checkpoint", str(broken)) == 1
    assert capsys.readouterr().err.startswith("error: FormatError:")
