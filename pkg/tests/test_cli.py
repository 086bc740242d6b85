"""Command-line behavior: verbs, config files, exit codes, artifacts."""

import json
import os

import numpy as np
import pytest

from loracl import harness as H
from loracl.cli import main, merged_config, parse_config_file
from loracl.errors import ConfigError

TINY_LINES = """\
# miniature domain-incremental setup
scenario = dil
num_classes = 4
num_domains = 2
train_per_class = 20
test_per_class = 10
rank = 2
clusters = 2
epochs = 4
learning_rate = 0.01
batch_size = 32
pool_classes = 4
pool_train_per_class = 60
pool_test_per_class = 20
pretrain_epochs = 40
pretrain_learning_rate = 0.005
repeats = 1
"""


@pytest.fixture()
def tiny_conf(tmp_path, monkeypatch):
    path = tmp_path / "tiny.conf"
    path.write_text(TINY_LINES)
    monkeypatch.setenv(H.OUTPUT_ROOT_ENV, str(tmp_path / "out"))
    return str(path)


def test_config_file_parsing(tmp_path):
    path = tmp_path / "c.conf"
    path.write_text("# comment\n\n rank = 4 \nscenario=cil\n")
    assert parse_config_file(path) == {"rank": "4", "scenario": "cil"}
    path.write_text("rank 4\n")
    with pytest.raises(ConfigError, match="key=value"):
        parse_config_file(path)


def test_flags_override_config_file(tiny_conf):
    from loracl.cli import build_parser
    args = build_parser().parse_args(["run", "--config", tiny_conf,
                                      "--rank", "3", "--method", "oracle"])
    cfg = merged_config(args)
    assert cfg.rank == 3
    assert cfg.method == "oracle"
    assert cfg.epochs == 4  # from the file


def test_run_writes_results_log_and_states(tiny_conf, tmp_path):
    assert main(["run", "--config", tiny_conf]) == 0
    run_dirs = os.listdir(tmp_path / "out")
    assert len(run_dirs) == 1
    run_dir = tmp_path / "out" / run_dirs[0]
    csv_lines = (run_dir / "results.csv").read_text().splitlines()
    assert csv_lines[0] == ",".join(H.CSV_COLUMNS)
    assert len(csv_lines) == 3  # header + two updates
    log = json.loads((run_dir / "run_log.json").read_text())
    assert log["config"]["scenario"] == "dil"
    assert log["records"][0]["rows"][0]["wall_ms"] > 0
    assert (run_dir / "state_r0.ckpt").exists()
    assert log["state_files"] == [str(run_dir / "state_r0.ckpt")]


def test_pretrained_backbone_reused_bit_for_bit(tiny_conf, tmp_path):
    backbone = str(tmp_path / "bb.ckpt")
    assert main(["pretrain", "--config", tiny_conf, "--out", backbone]) == 0
    assert main(["run", "--config", tiny_conf]) == 0
    fresh = next((tmp_path / "out").glob("run_*/results.csv"))
    baseline = fresh.read_bytes()
    fresh.unlink()
    assert main(["run", "--config", tiny_conf, "--backbone", backbone]) == 0
    assert next((tmp_path / "out").glob("run_*/results.csv")).read_bytes() \
        == baseline


def test_sweep_writes_long_csv(tiny_conf, tmp_path):
    assert main(["sweep", "--config", tiny_conf, "--axis", "clusters",
                 "--values", "1,2"]) == 0
    sweep_csv = next((tmp_path / "out").glob("sweep_*/sweep.csv"))
    rows = H.read_rows_csv(sweep_csv)
    assert [r["clusters"] for r in rows] == ["1", "1", "2", "2"]
    assert len({r["run_id"] for r in rows}) == 2


def test_sweep_failure_keeps_partial_csv(tiny_conf, tmp_path, capsys):
    rc = main(["sweep", "--config", tiny_conf, "--axis", "clusters",
               "--values", "2,500"])
    assert rc == 2
    assert "prototype fitting" in capsys.readouterr().err
    sweep_csv = next((tmp_path / "out").glob("sweep_*/sweep.csv"))
    rows = H.read_rows_csv(sweep_csv)
    assert {r["clusters"] for r in rows} == {"2"}


def test_report_merges_and_prints_parameter_table(tiny_conf, tmp_path, capsys):
    assert main(["run", "--config", tiny_conf]) == 0
    results = str(next((tmp_path / "out").glob("run_*/results.csv")))
    rc = main(["report", "--results", results, results,
               "--out", str(tmp_path / "rep")])
    assert rc == 0
    out = capsys.readouterr().out
    assert "38,402" in out
    merged = H.read_rows_csv(tmp_path / "rep" / "results.csv")
    assert len(merged) == 4  # the same file twice


def test_inspect_checkpoint_prints_manifest(tiny_conf, tmp_path, capsys):
    backbone = str(tmp_path / "bb.ckpt")
    assert main(["pretrain", "--config", tiny_conf, "--out", backbone]) == 0
    capsys.readouterr()
    assert main(["inspect-checkpoint", backbone]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["metadata"]["kind"] == "backbone"
    assert any(t["name"] == "backbone.patch_embed" for t in info["tensors"])


def test_exit_code_2_for_config_problems(tiny_conf, capsys):
    assert main(["run", "--config", tiny_conf, "--method", "nonsense"]) == 2
    assert main(["sweep", "--config", tiny_conf, "--axis", "rank",
                 "--values", "8,4"]) == 2
    assert main(["sweep", "--config", tiny_conf, "--axis", "rank",
                 "--values", "a,b"]) == 2
    capsys.readouterr()


def test_exit_code_3_for_data_problems(tiny_conf, capsys):
    # margin 0 makes classes indistinguishable; pretraining misses its gate
    rc = main(["run", "--config", tiny_conf, "--margin", "0.0",
               "--pretrain-epochs", "1"])
    assert rc == 3
    assert "held-out accuracy" in capsys.readouterr().err


def test_exit_code_4_for_numeric_problems(tiny_conf, capsys):
    with np.errstate(all="ignore"):
        rc = main(["run", "--config", tiny_conf, "--pool-classes", "5",
                   "--pretrain-learning-rate", "1e25"])
    assert rc == 4
    assert "non-finite" in capsys.readouterr().err


def test_exit_code_5_for_io_problems(tmp_path, capsys):
    missing = str(tmp_path / "nope.csv")
    assert main(["report", "--results", missing]) == 5
    assert main(["inspect-checkpoint", str(tmp_path / "nope.ckpt")]) == 5
    assert main(["run", "--config", str(tmp_path / "nope.conf")]) == 5
    capsys.readouterr()


def test_help_exits_cleanly():
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
