import csv
import json
from pathlib import Path

import pytest

from congrad.cli import main
from congrad.config import load_config, parse_config_text
from congrad.errors import ConfigError

QUICK_CFG = """
# quick synthetic run
stream.type = synthetic
stream.vocab = 8
stream.context_len = 2
stream.initial_users = 4
stream.batch_size = 5
stream.steps = 25
stream.holdout_per_user = 2
optimizer.mode = congrad
learner.kind = mixed-replay
optim.rule = sgd
optim.lr = 0.1
optim.warmup = 0
optim.clip = none
optim.k = 3
buffers.replay_capacity = 30
buffers.vbuf_capacity = 10
eval.period = 10
eval.retention = true
seed = 3
"""


@pytest.fixture
def quick_cfg(tmp_path):
    path = tmp_path / "quick.cfg"
    path.write_text(QUICK_CFG)
    return path


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


# -- config parsing -------------------------------------------------------------

def test_unknown_key_rejected_with_line_number():
    with pytest.raises(ConfigError, match="<config>:3: unknown config key 'stream.bogus'"):
        parse_config_text("stream.type = synthetic\n\nstream.bogus = 1\n")


def test_malformed_line_rejected():
    with pytest.raises(ConfigError, match=":1: expected 'key = value'"):
        parse_config_text("this is not a config line")


def test_bad_value_diagnostics():
    with pytest.raises(ConfigError, match=":1: bad value for optim.lr"):
        parse_config_text("optim.lr = fast")
    with pytest.raises(ConfigError, match="expected one of"):
        parse_config_text("learner.kind = sublime")


def test_schedule_and_lists_parse():
    cfg = parse_config_text("stream.schedule = 0:2:0,5:1:3\nmodel.hidden = 50,40\n")
    assert cfg["stream.schedule"] == ((0, 2, 0), (5, 1, 3))
    assert cfg["model.hidden"] == (50, 40)


def test_canonical_echo_round_trips():
    cfg = parse_config_text(QUICK_CFG)
    echo = cfg.canonical_text()
    again = parse_config_text(echo)
    assert again.values == cfg.values
    assert again.config_hash() == cfg.config_hash()


def test_overrides_replace_file_values():
    cfg = parse_config_text(QUICK_CFG).with_overrides({"seed": "9", "optim.k": "5"})
    assert cfg["seed"] == 9 and cfg["optim.k"] == 5
    with pytest.raises(ConfigError, match="unknown config key"):
        parse_config_text(QUICK_CFG).with_overrides({"nope": "1"})


# -- run ------------------------------------------------------------------------

def test_run_writes_artifacts_and_reruns_identically(tmp_path, quick_cfg):
    dir_a, dir_b = tmp_path / "a", tmp_path / "b"
    assert main(["run", str(quick_cfg), "-o", f"run.dir={dir_a}"]) == 0
    assert main(["run", str(quick_cfg), "-o", f"run.dir={dir_b}"]) == 0
    for d in (dir_a, dir_b):
        assert (d / "metrics.csv").exists()
        assert (d / "summary.json").exists()
        assert (d / "config.cfg").exists()
    assert (dir_a / "metrics.csv").read_bytes() == (dir_b / "metrics.csv").read_bytes()

    summary = json.loads((dir_a / "summary.json").read_text())
    assert summary["steps"] == 25
    assert "final" in summary and "accuracy" in summary["final"]
    assert summary["retention"]["per_age"]
    assert summary["config_hash"] == load_config(dir_a / "config.cfg").config_hash()


def test_config_echo_reruns_to_identical_results(tmp_path, quick_cfg):
    dir_a = tmp_path / "a"
    main(["run", str(quick_cfg), "-o", f"run.dir={dir_a}"])
    echo_cfg = dir_a / "config.cfg"
    dir_c = tmp_path / "c"
    assert main(["run", str(echo_cfg), "-o", f"run.dir={dir_c}"]) == 0
    assert (dir_a / "metrics.csv").read_bytes() == (dir_c / "metrics.csv").read_bytes()


def test_missing_dataset_path_exits_2(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("stream.type = permuted-mnist\nstream.data_dir = /nope/missing\n")
    assert main(["run", str(cfg)]) == 2


def test_missing_config_file_exits_2(tmp_path):
    assert main(["run", str(tmp_path / "absent.cfg")]) == 2


def test_seed_changes_results(tmp_path, quick_cfg):
    dir_a, dir_b = tmp_path / "a", tmp_path / "b"
    main(["run", str(quick_cfg), "-o", f"run.dir={dir_a}"])
    main(["run", str(quick_cfg), "-o", f"run.dir={dir_b}", "-o", "seed=4"])
    assert (dir_a / "metrics.csv").read_bytes() != (dir_b / "metrics.csv").read_bytes()


# -- sweep ----------------------------------------------------------------------

def test_sweep_k_axis_produces_row_per_value(tmp_path, quick_cfg):
    sweep_dir = tmp_path / "sweep"
    code = main(["sweep", str(quick_cfg), "--axis", "k",
                 "-o", f"run.dir={sweep_dir}", "-o", "sweep.k=1,3,5",
                 "-o", "sweep.seeds=1,2"])
    assert code == 0
    rows = read_rows(sweep_dir / "sweep_runs.csv")
    assert len(rows) == 6
    assert {r["value"] for r in rows} == {"1", "3", "5"}
    agg = read_rows(sweep_dir / "sweep_summary.csv")
    assert len(agg) == 3
    assert all(float(r["accuracy_mean"]) >= 0 for r in agg)


def test_sweep_strategy_axis(tmp_path, quick_cfg):
    sweep_dir = tmp_path / "sweep"
    code = main(["sweep", str(quick_cfg), "--axis", "vbuf-strategy",
                 "-o", f"run.dir={sweep_dir}",
                 "-o", "sweep.vbuf_strategy=fifo,reservoir,stratified"])
    assert code == 0
    assert len(read_rows(sweep_dir / "sweep_summary.csv")) == 3


def test_sweep_empty_axis_is_config_error(tmp_path, quick_cfg):
    assert main(["sweep", str(quick_cfg), "--axis", "k",
                 "-o", f"run.dir={tmp_path / 's'}"]) == 2


def test_sweep_marks_failed_rows_and_continues(tmp_path, quick_cfg):
    sweep_dir = tmp_path / "sweep"
    # learner axis with one invalid learner: that row errors, others succeed
    code = main(["sweep", str(quick_cfg), "--axis", "learner",
                 "-o", f"run.dir={sweep_dir}",
                 "-o", "sweep.learner=online-only,bogus"])
    assert code == 1
    rows = read_rows(sweep_dir / "sweep_runs.csv")
    assert len(rows) == 2
    statuses = {r["value"]: r["status"] for r in rows}
    assert statuses["online-only"] == "ok"
    assert statuses["bogus"].startswith("error")


# -- report ---------------------------------------------------------------------

def test_report_prints_summary(tmp_path, quick_cfg, capsys):
    run_dir = tmp_path / "r"
    main(["run", str(quick_cfg), "-o", f"run.dir={run_dir}"])
    assert main(["report", str(run_dir)]) == 0
    out = capsys.readouterr().out
    assert "final metrics" in out and "chosen-k hist" in out and "retention" in out


def test_report_histogram_matches_csv(tmp_path, quick_cfg):
    run_dir = tmp_path / "r"
    main(["run", str(quick_cfg), "-o", f"run.dir={run_dir}"])
    summary = json.loads((run_dir / "summary.json").read_text())
    hist = {int(k): v for k, v in summary["chosen_k_histogram"].items()}
    rows = read_rows(run_dir / "metrics.csv")
    from collections import Counter
    csv_hist = Counter(int(r["chosen_k"]) for r in rows)
    assert hist == dict(csv_hist)
    assert sum(hist.values()) == len(rows)


def test_report_missing_and_corrupt(tmp_path, capsys):
    assert main(["report", str(tmp_path / "absent")]) == 1
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "summary.json").write_text("{not json")
    assert main(["report", str(bad)]) == 1
    err = capsys.readouterr().err
    assert "parse error" in err and "summary.json" in err
