import csv
import json
from pathlib import Path

import numpy as np
import pytest

from fractalnode.cli import CliError, DEFAULTS, config_load, main, read_dataset
from fractalnode.graph import read_edge_list
from fractalnode.partition import read_partition

SNAPSHOTS = Path(__file__).parent / "snapshots"


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


# config --------------------------------------------------------------------------

def test_empty_config_gives_defaults(tmp_path):
    f = tmp_path / "empty.cfg"
    f.write_text("# nothing here\n\n")
    cfg = config_load(f)
    assert cfg.values == DEFAULTS
    assert cfg.model().backbone == "gcn" and cfg.train().epochs == 100


def test_precedence(tmp_path):
    f = tmp_path / "a.cfg"
    f.write_text("model.dim_h = 16\nmodel.num_layers = 3\ntrain.lr = 0.01\n")
    cfg = config_load(f, {"model.dim_h": "32"})
    assert cfg["model.dim_h"] == 32          # command line beats file
    assert cfg["model.num_layers"] == 3      # file beats default
    assert cfg["model.backbone"] == "gcn"    # default
    assert cfg.train().lr == 0.01


def test_unknown_key_named(tmp_path):
    f = tmp_path / "bad.cfg"
    f.write_text("model.dim_hh = 3\n")
    with pytest.raises(CliError, match="model.dim_hh"):
        config_load(f)
    with pytest.raises(CliError, match="train.nope"):
        config_load(None, {"train.nope": "1"})


def test_bad_values(tmp_path):
    with pytest.raises(CliError, match="model.dim_h"):
        config_load(None, {"model.dim_h": "wide"})
    with pytest.raises(CliError, match="model.use_hpf"):
        config_load(None, {"model.use_hpf": "maybe"})
    f = tmp_path / "c.cfg"
    f.write_text("model.backbone gcn\n")
    with pytest.raises(CliError, match=":1:"):
        config_load(f)


def test_type_coercion():
    cfg = config_load(None, {"model.use_hpf": "off", "model.fractal_pe_dim": "none", "train.lr": "1e-2"})
    assert cfg["model.use_hpf"] is False and cfg["model.fractal_pe_dim"] is None and cfg["train.lr"] == 0.01


# commands ------------------------------------------------------------------------

def test_generate_partition_analyze(tmp_path, capsys):
    g, p, r = tmp_path / "g.el", tmp_path / "p.txt", tmp_path / "r.csv"
    assert main(["generate", "er", "--n", "100", "--p", "0.05", "--seed", "7", "--out", str(g)]) == 0
    assert main(["partition", "--in", str(g), "--method", "multilevel", "--C", "8", "--out", str(p)]) == 0
    part = read_partition(p)
    assert part.num_blocks == 8 and np.all(part.block_sizes() > 0)
    assert main(["analyze", "resistance", "--in", str(g), "--partition", str(p), "--out", str(r)]) == 0
    rows = _rows(r)
    assert len(rows) == 100 * 99 // 2
    assert all(float(x["R_f"]) <= float(x["R"]) + 1e-9 for x in rows)
    assert list(rows[0]) == ["graph_id", "u", "v", "R", "R_f"]


def test_analyze_ks_and_dc(tmp_path):
    g = tmp_path / "pep.el"
    assert main(["generate", "peptide", "--n", "80", "--out", str(g)]) == 0
    out = tmp_path / "ks.csv"
    assert main(["analyze", "ks", "--in", str(g), "--out", str(out), "--set", "experiment.c_values=2,4"]) == 0
    rows = _rows(out)
    assert [r["C"] for r in rows] == ["2", "4"] and list(rows[0]) == ["graph_id", "C", "ks_score"]
    assert main(["analyze", "dc", "--in", str(g), "--out", str(tmp_path / "dc.csv")]) == 0


def test_generate_is_idempotent(tmp_path):
    a, b = tmp_path / "a.el", tmp_path / "b.el"
    main(["generate", "er", "--n", "30", "--p", "0.2", "--seed", "3", "--out", str(a)])
    main(["generate", "er", "--n", "30", "--p", "0.2", "--seed", "3", "--out", str(b)])
    assert a.read_text() == b.read_text()


def test_dataset_round_trip(tmp_path):
    assert main(["generate", "tree", "--depth", "2", "--samples", "12", "--out", str(tmp_path / "t"),
                 "--set", "data.test_samples=4"]) == 0
    ds = read_dataset(tmp_path / "t")
    assert len(ds.graphs) == 16 and ds.task == "node-classification"
    assert len(ds.split["test"]) == 4
    g0 = read_edge_list(tmp_path / "t" / "graph_00000.el")
    assert g0.node_labels[0] == g0.graph_label


def test_train_writes_report_and_checkpoint(tmp_path, capsys):
    out = tmp_path / "run"
    rc = main(["train", "--out", str(out), "--set", "data.kind=tree", "--set", "data.depth=2",
               "--set", "data.samples=40", "--set", "data.test_samples=10", "--set", "model.head=node-classification",
               "--set", "model.num_blocks=1", "--set", "model.dim_h=8", "--set", "train.epochs=2"])
    assert rc == 0
    manifest = json.loads((out / "train.json").read_text())
    assert manifest["config"]["model.dim_h"] == 8 and "test_accuracy" in manifest["final"]
    assert (out / "model.bin").exists() and (out / "model.json").exists()
    printed = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert printed["json"] == str(out / "train.json")


def test_experiment_csl_plain_is_chance(tmp_path):
    cfg = tmp_path / "csl.cfg"
    cfg.write_text("model.variant = plain\nexperiment.models = plain\nexperiment.seeds = 0\n"
                   "model.dim_h = 8\ntrain.epochs = 2\n")
    assert main(["experiment", "csl", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    final = json.loads((tmp_path / "o" / "csl.json").read_text())["final"]
    assert abs(final["plain_test_accuracy"] - 0.10) <= 0.03
    assert len(_rows(tmp_path / "o" / "csl.csv")) == 5


def test_experiment_resistance_small(tmp_path):
    rc = main(["experiment", "resistance", "--out", str(tmp_path), "--set", "data.count=4",
               "--set", "data.n=20"])
    assert rc == 0
    final = json.loads((tmp_path / "resistance.json").read_text())["final"]
    assert final["violations"] == 0


def test_experiment_signal_small(tmp_path):
    rc = main(["experiment", "signal", "--out", str(tmp_path), "--set", "data.count=6", "--set", "model.dim_h=4",
               "--set", "experiment.init_seeds=0", "--set", "experiment.sources=2", "--set", "model.num_blocks=2"])
    assert rc == 0
    final = json.loads((tmp_path / "signal.json").read_text())["final"]
    assert len(final["fn_tercile_h_signal"]) == 3


def test_bench(capsys):
    assert main(["bench", "--n", "300", "--set", "model.dim_h=4", "--set", "experiment.steps=1"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["n"] == 300 and out["seconds_per_step"] > 0


# errors -------------------------------------------------------------------------

@pytest.mark.parametrize("argv,code,kind", [
    (["train", "--set", "model.foo=1"], 2, "config"),
    (["partition", "--in", "missing.el"], 3, "input"),
    (["train", "--config", "missing.cfg"], 3, "input"),
    (["experiment", "nope"], 2, "config"),
    ([], 2, "config"),
    (["train", "--set", "data.kind=tree", "--set", "data.samples=4", "--set", "train.epochs=1"], 4, "incompatible"),
])
def test_errors_are_one_line(argv, code, kind, capsys):
    assert main(argv) == code
    err = capsys.readouterr().err
    assert err.count("\n") == 1 and err.startswith(f"error: {kind}: ")


# help snapshots ----------------------------------------------------------------

@pytest.mark.parametrize("command", ["main", "generate", "partition", "analyze", "train", "experiment", "bench"])
def test_help_snapshot(command, capsys, monkeypatch):
    monkeypatch.setenv("COLUMNS", "80")
    argv = ["--help"] if command == "main" else [command, "--help"]
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 0
    assert capsys.readouterr().out == (SNAPSHOTS / f"help_{command}.txt").read_text()


@pytest.mark.parametrize("path", sorted((Path(__file__).parent.parent / "configs").glob("*.cfg")), ids=lambda p: p.name)
def test_shipped_configs_load(path):
    cfg = config_load(path)
    cfg.model(), cfg.train()
    assert cfg.names("experiment.models")
