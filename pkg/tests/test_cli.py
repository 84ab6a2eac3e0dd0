import json

import numpy as np
import pytest

from icon_vil.cli import TABLE_COLUMNS, main
from icon_vil.config import load_config, parse_config
from icon_vil.errors import ConfigError

SMALL = """
dataset: {num_classes: 4, num_domains: 2, feature_dim: 8, per_cell: 12, seed: 5}
model: {backbone_layers: 2, hidden_dim: 12, adapter_rank: 2}
scenario: {kind: vil, classes_per_task: 2}
run: {seeds: [0, 1], emit_shift_pool: true}
"""


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "small.yaml"
    path.write_text(SMALL)
    return path


def test_defaults_and_derived_quantities():
    cfg = parse_config({"model": {"adapter_layer_count": 3}})
    assert cfg.trainer.lr == 0.0028125 and cfg.trainer.batch_size == 24
    assert cfg.trainer.ema_decay == cfg.model.ema_decay == 0.9999
    derived = cfg.derived()
    assert derived["tasks"] == 20 and derived["shift_length"] == 483
    assert derived["node_upper_bound"] == 40


@pytest.mark.parametrize("doc, path", [
    ({"dataset": {"colour": 1}}, "dataset.colour"),
    ({"extras": {}}, "extras"),
    ({"scenario": {"kind": "multi"}}, "scenario.kind"),
    ({"trainer": {"warmup_epochs": 5}}, "trainer.warmup_epochs"),
    ({"trainer": {"batch_size": 2.5}}, "trainer.batch_size"),
    ({"model": {"adapter_layer_count": 4}}, "model.adapter_layer_count"),
    ({"model": {"ema_decay": 0.9}, "trainer": {"ema_decay": 0.5}}, "trainer.ema_decay"),
    ({"scenario": {"classes_per_task": 3}}, "scenario.classes_per_task"),
    ({"dataset": {"source": "csv"}}, "dataset.csv_path"),
])
def test_schema_violations_name_the_field(doc, path):
    with pytest.raises(ConfigError) as exc:
        parse_config(doc)
    assert exc.value.path == path


def test_validate_prints_derived(capsys):
    assert main(["validate", "--config", "vil_small"]) == 0
    out = capsys.readouterr().out
    assert "tasks: 20" in out and "shift_length: 483" in out and "node_upper_bound: 40" in out


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("scenario: {kind: multi}\n")
    assert main(["validate", "--config", str(bad)]) == 2
    assert "scenario.kind" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "missing.yaml")]) == 2
    gap = tmp_path / "gap.csv"
    gap.write_text("0,0,train,1,2\n0,0,test,1,2\n")
    cfg = tmp_path / "csv.yaml"
    cfg.write_text(f"dataset: {{source: csv, csv_path: {gap}, feature_dim: 2, num_classes: 2, num_domains: 1}}\n"
                   "scenario: {classes_per_task: 2}\nmodel: {backbone_layers: 1}\n")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3
    assert main(["run", "--config", str(cfg), "--ablate", "no-magic"]) == 2


def test_run_outputs_are_byte_identical_and_aggregate_consistent(cfg_file, tmp_path):
    a, b = tmp_path / "a" / "nested", tmp_path / "b"
    assert main(["run", "--config", str(cfg_file), "--out", str(a)]) == 0
    assert main(["run", "--config", str(cfg_file), "--out", str(b)]) == 0
    for seed in (0, 1):
        for name in ("summary.json", "acc_matrix.csv", "node_report.csv", "shift_pool.json"):
            assert (a / f"seed_{seed}" / name).read_bytes() == (b / f"seed_{seed}" / name).read_bytes()
    agg = json.loads((a / "aggregate.json").read_text())
    accs = [json.loads((a / f"seed_{s}" / "summary.json").read_text())["avg_acc"] for s in (0, 1)]
    assert abs(agg["avg_acc_mean"] - np.mean(accs)) < 1e-12
    assert abs(agg["avg_acc_std"] - np.std(accs)) < 1e-12
    rows = (a / "seed_0" / "acc_matrix.csv").read_text().splitlines()
    assert [r.count(",") + 1 for r in rows] == list(range(1, len(rows) + 1))


def test_overrides(cfg_file, tmp_path):
    out = tmp_path / "o"
    assert main(["run", "--config", str(cfg_file), "--out", str(out), "--seed", "7",
                 "--ablate", "no-cast,no-ic", "--scenario", "cil"]) == 0
    doc = json.loads((out / "seed_7" / "summary.json").read_text())
    assert doc["flags"] == {"cast": False, "ic": False, "dynamic_threshold": True}
    assert doc["scenario"] == "cil" and doc["num_tasks"] == 2
    assert not (out / "seed_0").exists()


def test_parallel_workers_match_serial(cfg_file, tmp_path, monkeypatch):
    assert main(["run", "--config", str(cfg_file), "--out", str(tmp_path / "s")]) == 0
    monkeypatch.setenv("ICON_WORKERS", "2")
    assert main(["run", "--config", str(cfg_file), "--out", str(tmp_path / "p")]) == 0
    for seed in (0, 1):
        for name in ("summary.json", "acc_matrix.csv"):
            assert ((tmp_path / "s" / f"seed_{seed}" / name).read_bytes()
                    == (tmp_path / "p" / f"seed_{seed}" / name).read_bytes())
    monkeypatch.setenv("ICON_WORKERS", "zero")
    assert main(["run", "--config", str(cfg_file), "--out", str(tmp_path / "x")]) == 2


def test_ablation_table(cfg_file, tmp_path, capsys):
    out = tmp_path / "abl"
    assert main(["ablation", "--config", str(cfg_file), "--out", str(out), "--seed", "0"]) == 0
    lines = (out / "ablation.csv").read_text().splitlines()
    assert lines[0] == ",".join(TABLE_COLUMNS)
    assert [line.split(",")[0] for line in lines[1:]] == [
        "baseline", "cast-only", "ic-only", "full", "full-dt-off"]
    base = json.loads((out / "baseline" / "seed_0" / "summary.json").read_text())
    assert base["flags"] == {"cast": False, "ic": False, "dynamic_threshold": True}


def test_bundled_configs_load():
    for name in ("vil_small", "reference"):
        cfg = load_config(name)
        assert cfg.derived()["tasks"] == 20
