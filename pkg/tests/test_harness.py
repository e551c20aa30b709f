import csv
import subprocess
import sys

import numpy as np
import pytest

from tinymetafed.cli import main
from tinymetafed.harness import (
    EVAL_FIELDS,
    ROUND_FIELDS,
    bytes_to_reach,
    compare,
    format_summary,
    load_run,
    run_experiment,
)
from tinymetafed.transport import load_checkpoint


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_run_writes_traces(small_cfg, tmp_path):
    assert run_experiment(small_cfg, tmp_path / "a") == 0
    rounds = _read(tmp_path / "a" / "rounds.csv")
    evals = _read(tmp_path / "a" / "evals.csv")
    assert list(rounds[0]) == ROUND_FIELDS and list(evals[0]) == EVAL_FIELDS
    assert len(rounds) == 30 and [int(e["round"]) for e in evals] == [0, 10, 20, 30]
    ck = load_checkpoint(tmp_path / "a" / "final.tmfc")
    assert ck.round == 30 and ck.seed == 7


def test_same_seed_gives_byte_identical_csvs(small_cfg, tmp_path):
    run_experiment(small_cfg, tmp_path / "a")
    run_experiment(small_cfg, tmp_path / "b")
    for name in ("evals.csv", "config.resolved.ini"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    strip = lambda p: [{k: v for k, v in r.items() if k != "wall_ms"} for r in _read(p)]
    assert strip(tmp_path / "a" / "rounds.csv") == strip(tmp_path / "b" / "rounds.csv")


def test_zero_rounds(small_cfg, tmp_path):
    assert run_experiment(small_cfg.replace(rounds=0), tmp_path) == 0
    assert _read(tmp_path / "rounds.csv") == []
    assert [e["round"] for e in _read(tmp_path / "evals.csv")] == ["0"]


def test_cumulative_bytes_agree_across_files(small_cfg, tmp_path):
    run_experiment(small_cfg, tmp_path)
    rounds = _read(tmp_path / "rounds.csv")
    for e in _read(tmp_path / "evals.csv"):
        t = int(e["round"])
        total = sum(int(r["bytes_up"]) + int(r["bytes_down"]) for r in rounds if int(r["round"]) < t)
        assert int(e["cumulative_bytes"]) == total


def test_bad_config_exit_status(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[federated]\ntop_p = 150\n")
    assert run_experiment(bad, tmp_path / "out") == 2
    assert not (tmp_path / "out").exists()


def test_compare_against_itself(small_cfg, tmp_path):
    run_experiment(small_cfg, tmp_path / "a")
    cmp = compare([tmp_path / "a", tmp_path / "a"], tmp_path / "cmp")
    assert [r["relative_cost"] for r in cmp.summary] == [1.0, 1.0]
    assert (tmp_path / "cmp" / "summary.csv").exists() and (tmp_path / "cmp" / "curves.csv").exists()
    assert "rel. cost" in format_summary(cmp)


def test_compare_relative_to_tinyreptile(small_cfg, tmp_path):
    run_experiment(small_cfg, tmp_path / "tmf")
    run_experiment(small_cfg.replace(algorithm="tinyreptile"), tmp_path / "tr")
    cmp = compare([tmp_path / "tmf", tmp_path / "tr"])
    assert cmp.baseline == "tr"
    assert cmp.summary[0]["relative_cost"] == pytest.approx(4638 / 4770)


def test_compare_resamples_mismatched_grids(small_cfg, tmp_path):
    run_experiment(small_cfg, tmp_path / "a")
    run_experiment(small_cfg.replace(eval_every=5), tmp_path / "b")
    with pytest.warns(UserWarning, match="resampling"):
        cmp = compare([tmp_path / "a", tmp_path / "b"])
    assert list(cmp.grid) == [0, 10, 20, 30]


def test_compare_refuses_mixed_families(small_cfg, tmp_path):
    run_experiment(small_cfg, tmp_path / "a")
    cls = small_cfg.replace(family="synthetic_class", layers=(16, 8, 5), hidden_activation="relu", rounds=3)
    run_experiment(cls, tmp_path / "b")
    with pytest.raises(ValueError, match="families"):
        compare([tmp_path / "a", tmp_path / "b"])


def test_bytes_to_reach():
    assert bytes_to_reach([0, 10, 20], [3.0, 2.0, 1.0], 2.0) == 10
    assert bytes_to_reach([0, 10], [3.0, 2.5], 1.0) is None


# ---- CLI ------------------------------------------------------------------------


def test_cli_validate(tmp_path, capsys):
    assert main(["validate", "sine"]) == 0
    bad = tmp_path / "bad.ini"
    bad.write_text("[federated]\ntop_p = 150\nbeta = 0.05\n")
    assert main(["validate", "--config", str(bad)]) == 1
    out = capsys.readouterr().out
    assert "error: federated.top_p" in out


def test_cli_run_and_compare(small_cfg, tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    small_cfg.save(cfg)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "r"), "--seed", "3"]) == 0
    assert load_run(tmp_path / "r").config.seed == 3
    assert main(["compare", str(tmp_path / "r"), "--out", str(tmp_path / "cmp")]) == 0
    assert "algorithm" in capsys.readouterr().out


def test_cli_tcp_transport_matches_sim(small_cfg, tmp_path):
    cfg = tmp_path / "c.ini"
    small_cfg.replace(rounds=10).save(cfg)
    main(["run", "--config", str(cfg), "--out", str(tmp_path / "sim")])
    main(["run", "--config", str(cfg), "--out", str(tmp_path / "tcp"), "--transport", "tcp"])
    assert (tmp_path / "sim" / "evals.csv").read_bytes() == (tmp_path / "tcp" / "evals.csv").read_bytes()


def test_cli_rejects_bad_config(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[federated]\nquery_size = 40\n")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_cli_serve_and_client_processes(small_cfg, tmp_path):
    cfg = tmp_path / "c.ini"
    small_cfg.replace(clients=1, rounds=15).save(cfg)
    server = subprocess.Popen(
        [sys.executable, "-m", "tinymetafed", "serve", "--bind", "127.0.0.1:0", "--config", str(cfg),
         "--out", str(tmp_path / "srv"), "--checkpoint-dir", str(tmp_path / "ck"), "--wait-for", "1"],
        stdout=subprocess.PIPE, text=True,
    )
    line = server.stdout.readline()
    port = line.strip().rsplit(":", 1)[1]
    client = subprocess.run(
        [sys.executable, "-m", "tinymetafed", "client", "--server", f"127.0.0.1:{port}", "--config", str(cfg),
         "--client-id", "0"], capture_output=True, text=True, timeout=60,
    )
    assert server.wait(timeout=60) == 0
    assert "served 15 rounds" in client.stdout
    assert len(_read(tmp_path / "srv" / "rounds.csv")) == 15
    assert load_checkpoint(tmp_path / "ck" / "checkpoint.tmfc").round == 15
