import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from typer.testing import CliRunner

from cli import aggregate_seeds, app
from config import (
    GateConfig, RunConfig, SyntheticConfig, default_config_path, dump_config, load_run_config, output_dir,
)
from errors import ConfigError
from schema import read_records

runner = CliRunner()


def _json_lines(output: str):
    return [json.loads(line) for line in output.splitlines() if line.startswith("{")]


# ---- 설정 ----
def test_template_is_created_with_task_defaults(isolated_env):
    cfg = load_run_config()
    assert default_config_path() == isolated_env / "configs" / "run_config.yaml"
    assert default_config_path().exists()
    lp = cfg.resolved()
    assert (lp.task, lp.d_h, lp.protocol, lp.weighting) == ("lp", 128, "fixed_split", "none")
    nc = replace(cfg, task="nc").resolved()
    assert (nc.d_h, nc.protocol, nc.weighting) == (256, "nc_split", "balanced")


def test_flags_override_file_values(isolated_env):
    path = isolated_env / "run.yaml"
    path.write_text("d_h: 16\nepochs: 3\ngates:\n  alpha_intra: 0.0\n", encoding="utf-8")
    cfg = load_run_config(path, {"d_h": 32, "epochs": None, "gates.alpha_self": 0.5})
    assert cfg.d_h == 32
    assert cfg.epochs == 3
    assert cfg.backbone == "gcn_mean"
    assert (cfg.gates.alpha_intra, cfg.gates.alpha_cross, cfg.gates.alpha_self) == (0.0, 1.0, 0.5)


def test_missing_or_malformed_files(isolated_env):
    with pytest.raises(ConfigError):
        load_run_config(isolated_env / "nope.yaml")
    bad = isolated_env / "bad.yaml"
    bad.write_text("d_h: [1, 2\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_run_config(bad)
    unknown = isolated_env / "unknown.yaml"
    unknown.write_text("hidden_size: 8\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_run_config(unknown)
    nested = isolated_env / "nested.yaml"
    nested.write_text("gates:\n  alpha_time: 1.0\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_run_config(nested)


def test_dumped_config_loads_back_equal(tiny_config, isolated_env):
    cfg = load_run_config(tiny_config).validate()
    dumped = dump_config(cfg, isolated_env / "dumped.yaml")
    assert load_run_config(dumped) == cfg


def test_validation_errors():
    synthetic = SyntheticConfig(enabled=True)
    with pytest.raises(ConfigError):
        RunConfig().validate()
    with pytest.raises(ConfigError):
        RunConfig(task="nc", protocol="fixed_split", data="x.csv").validate()
    with pytest.raises(ConfigError):
        RunConfig(task="nc", symmetrize=True, data="x.csv").validate()
    with pytest.raises(ConfigError):
        RunConfig(task="nc", synthetic=synthetic).validate()
    with pytest.raises(ConfigError):
        RunConfig(task="graph", synthetic=synthetic).validate()
    with pytest.raises(ConfigError):
        RunConfig(synthetic=synthetic, gates=GateConfig(float("nan"), 1.0, 1.0)).validate()
    with pytest.raises(ConfigError):
        RunConfig(synthetic=synthetic, patience=0).validate()
    ok = RunConfig(protocol="live-update", synthetic=synthetic).validate()
    assert ok.protocol == "live_update"
    assert RunConfig(command="verify").validate().command == "verify"


def test_output_dir_precedence(isolated_env, monkeypatch):
    assert output_dir(RunConfig(out="somewhere")) == Path("somewhere")
    assert output_dir(RunConfig(command="sweep")) == isolated_env / "runs" / "sweep"
    monkeypatch.delenv("SIST_OUTPUT_DIR")
    assert output_dir(RunConfig()) == Path("runs") / "train"


# ---- CLI ----
def test_verify_witness_passes(isolated_env):
    result = runner.invoke(app, ["verify", "witness", "--out", str(isolated_env / "checks")])
    assert result.exit_code == 0, result.output
    reports = _json_lines(result.output)
    assert reports[0]["name"] == "strictness_witness" and reports[0]["passed"]
    assert read_records(isolated_env / "checks" / "checks.jsonl")[0]["name"] == "strictness_witness"


def test_verify_mutated_reductions_fail(isolated_env):
    result = runner.invoke(app, ["verify", "reductions", "--mutate"])
    assert result.exit_code == 1


def test_verify_unknown_suite_is_usage_error(isolated_env):
    assert runner.invoke(app, ["verify", "bogus"]).exit_code == 2


def test_train_without_data_is_usage_error(isolated_env):
    assert runner.invoke(app, ["train"]).exit_code == 2


def test_train_writes_metrics_checkpoint_and_config(tiny_config, isolated_env):
    out = isolated_env / "run"
    result = runner.invoke(app, ["train", "--config", str(tiny_config), "--out", str(out), "--no-timing"])
    assert result.exit_code == 0, result.output
    rows = read_records(out / "metrics.jsonl")
    assert [r["snapshot"] for r in rows if r["record"] == "snapshot"] == [10, 11]
    assert rows[-1]["record"] == "summary"
    assert sum(r["record"] == "summary" for r in rows) == 1
    assert (out / "checkpoint.sistckp").exists()
    assert (out / "config.yaml").exists()
    summary = [r for r in _json_lines(result.output) if r.get("record") == "summary"][0]
    assert summary["snapshots_evaluated"] == 2


def test_training_is_reproducible(tiny_config, isolated_env):
    out = isolated_env / "run"
    args = ["train", "--config", str(tiny_config), "--out", str(out), "--no-timing", "--seed", "3"]
    assert runner.invoke(app, args).exit_code == 0
    first = (out / "metrics.jsonl").read_bytes()
    assert runner.invoke(app, args).exit_code == 0
    assert (out / "metrics.jsonl").read_bytes() == first


def test_dumped_config_reproduces_run(tiny_config, isolated_env):
    dumped = isolated_env / "resolved.yaml"
    a, b = isolated_env / "a", isolated_env / "b"
    first = runner.invoke(app, ["train", "--config", str(tiny_config), "--out", str(a), "--no-timing",
                                "--dump-config", str(dumped)])
    assert first.exit_code == 0, first.output
    second = runner.invoke(app, ["train", "--config", str(dumped), "--out", str(b)])
    assert second.exit_code == 0, second.output

    def strip(rows):
        return [{k: v for k, v in r.items() if k != "config"} for r in rows]

    assert strip(read_records(a / "metrics.jsonl")) == strip(read_records(b / "metrics.jsonl"))


def test_sweep_writes_one_row_per_value(tiny_config, isolated_env):
    out = isolated_env / "sweep"
    result = runner.invoke(app, ["sweep", "d_h", "4", "8", "--config", str(tiny_config), "--out", str(out),
                                 "--no-timing"])
    assert result.exit_code == 0, result.output
    table = pd.read_csv(out / "sweep_summary.csv")
    assert table["value"].tolist() == [4, 8]
    assert (out / "d_h=4" / "metrics.jsonl").exists()
    assert (out / "d_h=8" / "checkpoint.sistckp").exists()


def test_sweep_rejects_unknown_axis(tiny_config):
    assert runner.invoke(app, ["sweep", "width", "1", "--config", str(tiny_config)]).exit_code == 2
    assert runner.invoke(app, ["sweep", "d_h", "wide", "--config", str(tiny_config)]).exit_code == 2


def test_ingest_writes_cache(isolated_env):
    data = isolated_env / "edges.csv"
    data.write_text("src,dst,timestamp\n0,1,0\n1,2,10\n2,0,700000\n", encoding="utf-8")
    out = isolated_env / "ingested"
    result = runner.invoke(app, ["ingest", "--data", str(data), "--out", str(out)])
    assert result.exit_code == 0, result.output
    stats = _json_lines(result.output)[-1]
    assert (stats["num_nodes"], stats["total_edges"], stats["num_snapshots"]) == (3, 3, 2)
    assert Path(stats["cache"]) == out / "edges.sistseq"
    assert (out / "edges.sistseq").exists()


def test_aggregate_seeds_reports_mean_and_sample_std():
    table = pd.DataFrame({
        "value": ["4", "4", "8"], "seed": [0, 1, 0],
        "mean_mrr": [0.2, 0.4, 0.5], "test_auc": [None, None, None],
    })
    agg = aggregate_seeds(table, ["value"])
    assert agg["value"].tolist() == ["4", "8"]
    assert agg["seeds"].tolist() == [2, 1]
    assert agg["mean_mrr_mean"].tolist() == pytest.approx([0.3, 0.5])
    assert agg["mean_mrr_std"].iloc[0] == pytest.approx(np.std([0.2, 0.4], ddof=1))
    assert np.isnan(agg["mean_mrr_std"].iloc[1])
    assert "test_auc_mean" not in agg.columns


def test_train_over_several_seeds(tiny_config, isolated_env):
    out = isolated_env / "seeds"
    result = runner.invoke(app, ["train", "--config", str(tiny_config), "--out", str(out), "--no-timing",
                                 "--seeds", "3"])
    assert result.exit_code == 0, result.output
    per_seed = pd.read_csv(out / "seed_summary.csv")
    assert per_seed["seed"].tolist() == [0, 1, 2]
    for s in (0, 1, 2):
        assert read_records(out / f"seed={s}" / "metrics.jsonl")[-1]["config"]["seed"] == s
    agg = pd.read_csv(out / "seed_aggregate.csv")
    assert agg["seeds"].tolist() == [3]
    assert agg["mean_mrr_mean"].iloc[0] == pytest.approx(per_seed["mean_mrr"].mean())
    assert agg["mean_mrr_std"].iloc[0] == pytest.approx(np.std(per_seed["mean_mrr"], ddof=1))
    printed = _json_lines(result.output)[-1]
    assert printed["seeds"] == 3


def test_sweep_with_seeds_aggregates_per_value(tiny_config, isolated_env):
    out = isolated_env / "sweep"
    result = runner.invoke(app, ["sweep", "d_h", "4", "8", "--seeds", "2", "--config", str(tiny_config),
                                 "--out", str(out), "--no-timing"])
    assert result.exit_code == 0, result.output
    runs = pd.read_csv(out / "sweep_summary.csv")
    assert list(zip(runs["value"], runs["seed"])) == [(4, 0), (4, 1), (8, 0), (8, 1)]
    agg = pd.read_csv(out / "sweep_aggregate.csv")
    assert agg["value"].tolist() == [4, 8]
    assert agg["seeds"].tolist() == [2, 2]
    assert {"mean_mrr_mean", "mean_mrr_std"} <= set(agg.columns)
    assert (out / "d_h=8" / "seed=1" / "metrics.jsonl").exists()


def test_seed_count_must_be_positive(tiny_config):
    assert runner.invoke(app, ["train", "--config", str(tiny_config), "--seeds", "0"]).exit_code == 2
