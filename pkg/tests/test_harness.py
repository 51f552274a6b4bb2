import json
import math

import pytest

from collabinfer import cli
from collabinfer.errors import ConfigError, SchemaError
from collabinfer.harness import (
    CSV_HEADER, Experiment, SweepSpec, emit_plot, load_config, read_results, run_seed, run_sweep,
)
from collabinfer.pipeline import PipelineCfg

SMALL = """
[training]
epochs = 1
rounds_per_epoch = 32

[eval]
rounds = 16

[sweep]
name = small
data_per = [0.0, 0.1, 0.3]
seeds = [0, 1]
rounds = 16
plot = per
"""

SMALL_RHO = """
[training]
epochs = 1
rounds_per_epoch = 32

[sweep]
name = tiny_rho
rho = [0, 0.01]
mode = [semantic, naive]
seeds = [0]
rounds = 8
plot = rho
"""


@pytest.fixture
def small_cfg(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(SMALL, encoding="utf-8")
    return path


def _experiment(config, backbone):
    # the session backbone is the one this config would pretrain (seed 0)
    assert config.scenario.seed == 0
    return Experiment(config, backbone)


def test_defaults_loaded():
    c = load_config(None)
    assert (c.scenario.n_devices, c.scenario.n_groups, c.scenario.p_patch) == (16, 4, 0.8)
    assert c.pipeline.data_channel.tbs == 40 and c.pipeline.data_channel.per == 0.1
    assert c.pipeline.query_channel.per == 0.0
    assert (c.pipeline.batch_size, c.pipeline.epochs) == (64, 60)
    assert c.pipeline.hidden == (256, 128) and c.eval_rounds == 2000


def test_shipped_configs_load():
    fig2, fig3, fig4 = (load_config(n) for n in ("fig2.cfg", "fig3.cfg", "fig4.cfg"))
    assert fig2.sweep.grid["split"] == [0, 1, 2, 3, 4, 5]
    assert fig2.sweep.grid["mode"] == ["semantic", "local", "naive"]
    assert fig3.sweep.grid["query_per"] == [0.0, 0.1, 0.3]
    assert fig4.sweep.grid["rho"] == [0, 0.001, 0.01, 0.05, 0.1, 0.2]


def test_rho_grid_contains_lowest_thresholds():
    assert {0, 0.001, 0.01} <= set(load_config("fig4.cfg").sweep.grid["rho"])


def test_missing_config_names_path(tmp_path):
    missing = tmp_path / "nope.cfg"
    with pytest.raises(ConfigError, match="nope.cfg"):
        load_config(missing)


@pytest.mark.parametrize("text", ["[training]\nbogus = 1\n", "[extras]\na = 1\n",
                                  "[sweep]\nmode = [semantic, telepathy]\n",
                                  "[sweep]\nseeds = []\n", "[sweep]\nrho = []\n"])
def test_bad_config_rejected(tmp_path, text):
    path = tmp_path / "bad.cfg"
    path.write_text(text, encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(path)


def test_seed_override_and_overlay(small_cfg):
    c = load_config(small_cfg, seed=7)
    assert c.scenario.seed == 7
    assert c.pipeline.epochs == 1 and c.pipeline.lr == 1e-3
    assert c.sweep.grid == {"data_per": [0.0, 0.1, 0.3]}


def test_run_seed_is_stable_and_distinct():
    assert run_seed(0, 1) == run_seed(0, 1)
    assert len({run_seed(m, s) for m in range(3) for s in range(3)}) == 9
    assert 0 <= run_seed(2**64 - 1, 5) < 2**64


def test_cells_cardinality_and_order():
    spec = SweepSpec(grid={"rho": [0.0, 0.1], "data_per": [0.0, 0.3]})
    cells = spec.cells(PipelineCfg())
    assert len(cells) == 4
    assert [(c["data_per"], c["rho"]) for c in cells] == [(0.0, 0.0), (0.0, 0.1), (0.3, 0.0),
                                                          (0.3, 0.1)]
    assert all(c["split"] == 2 and c["mode"] == "semantic" for c in cells)


def test_sweep_rows_header_and_rerun(small_cfg, backbone, tmp_path):
    config = load_config(small_cfg)
    a = run_sweep(config, tmp_path / "a.csv", _experiment(config, backbone))
    b = run_sweep(config, tmp_path / "b.csv", _experiment(config, backbone))
    lines = a.read_text().splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    assert len(lines) == 1 + 6
    assert a.read_bytes() == b.read_bytes()
    rows = read_results(a)
    assert [(r["data_per"], r["seed"]) for r in rows] == [
        (p, s) for p in (0.0, 0.1, 0.3) for s in (0, 1)]
    assert all(0 <= r["accuracy"] <= 1 and r["avg_connections"] <= 15 for r in rows)
    assert all(r["wall_time_s"] == 0.0 for r in rows)


def test_failed_cell_writes_marker_row(small_cfg, backbone, tmp_path, monkeypatch):
    config = load_config(small_cfg)
    exp = _experiment(config, backbone)
    real = exp.run_cell

    def flaky(cell, seed, rounds):
        if cell["data_per"] == 0.1 and seed == 1:
            raise ConfigError("simulated failure")
        return real(cell, seed, rounds)

    monkeypatch.setattr(exp, "run_cell", flaky)
    rows = read_results(run_sweep(config, tmp_path / "f.csv", exp))
    assert len(rows) == 6
    failed = [r for r in rows if math.isnan(r["accuracy"])]
    assert [(r["data_per"], r["seed"]) for r in failed] == [(0.1, 1)]


def test_read_results_schema_errors(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text(",".join(CSV_HEADER) + "\n")
    with pytest.raises(SchemaError, match="no result rows"):
        read_results(empty)
    bad = tmp_path / "bad.csv"
    bad.write_text(",".join(CSV_HEADER).replace("rho", "threshold") + "\n")
    with pytest.raises(SchemaError, match="threshold"):
        read_results(bad)


def _row(**kw):
    base = dict(split=2, data_per=0.1, query_per=0.0, rho=0.0, mode="semantic", seed=0,
                accuracy=0.7, avg_connections=15.0, query_tbs=480.0, feature_tbs=1680.0,
                wall_time_s=0.0)
    base.update(kw)
    return ",".join(str(base[k]) for k in CSV_HEADER)


def test_plot_empty_body_writes_nothing(tmp_path):
    path = tmp_path / "r.csv"
    path.write_text(",".join(CSV_HEADER) + "\n")
    with pytest.raises(SchemaError):
        emit_plot(path, "per", tmp_path / "plots")
    assert not (tmp_path / "plots").exists() or not any((tmp_path / "plots").iterdir())


def test_plot_single_row(tmp_path):
    path = tmp_path / "one.csv"
    path.write_text(",".join(CSV_HEADER) + "\n" + _row() + "\n")
    (svg,) = emit_plot(path, "split")
    text = svg.read_text()
    assert svg.name == "one_accuracy.svg" and "<svg" in text
    # self-contained: no external images or linked resources
    assert "<image" not in text and 'href="http' not in text


def test_plot_rho_gives_two_charts(tmp_path):
    path = tmp_path / "rho.csv"
    body = [_row(rho=r, avg_connections=c) for r, c in ((0.0, 15.0), (0.001, 9.0), (0.01, 6.0))]
    path.write_text(",".join(CSV_HEADER) + "\n" + "\n".join(body) + "\n")
    written = emit_plot(path, "rho", tmp_path)
    assert sorted(p.name for p in written) == ["rho_accuracy.svg", "rho_connections.svg"]


def test_plot_is_deterministic(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text(",".join(CSV_HEADER) + "\n" + _row() + "\n")
    (a,) = emit_plot(path, "per", tmp_path / "a")
    (b,) = emit_plot(path, "per", tmp_path / "b")
    assert a.read_bytes() == b.read_bytes()


def test_plot_unknown_kind(tmp_path):
    with pytest.raises(ConfigError):
        emit_plot(tmp_path / "x.csv", "pie")


# command line


def test_cli_usage_errors(capsys):
    for argv in ([], ["launch"], ["sweep", "--frobnicate"], ["sweep", "--seed", "-1"]):
        with pytest.raises(SystemExit) as exc:
            cli.main(argv)
        assert exc.value.code != 0
    assert "usage" in capsys.readouterr().err


def test_cli_missing_config(tmp_path, capsys):
    missing = tmp_path / "absent.cfg"
    code = cli.main(["eval", "--config", str(missing), "--out", str(tmp_path)])
    err = capsys.readouterr().err.strip()
    assert code != 0
    assert len(err.splitlines()) == 1
    kind, _, message = err.partition(" message=")
    assert kind == "error kind=config"
    assert str(missing) in json.loads(message)


def test_cli_plot_error_is_machine_readable(tmp_path, capsys):
    path = tmp_path / "r.csv"
    path.write_text("a,b\n1,2\n")
    assert cli.main(["plot", "--csv", str(path), "--kind", "per"]) == 1
    assert capsys.readouterr().err.startswith("error kind=schema message=")


@pytest.mark.slow
def test_cli_sweep_writes_csv_and_plots(tmp_path, capsys):
    cfg = tmp_path / "tiny_rho.cfg"
    cfg.write_text(SMALL_RHO, encoding="utf-8")
    out = tmp_path / "results"
    assert cli.main(["sweep", "--config", str(cfg), "--seed", "7", "--out", str(out)]) == 0
    records = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
    assert records[0]["csv"].endswith("tiny_rho.csv")
    assert len([r for r in records if "plot" in r]) == 2
    assert (out / "backbone.npz").exists()
    rows = read_results(out / "tiny_rho.csv")
    assert len(rows) == 4 and {r["mode"] for r in rows} == {"semantic", "naive"}


@pytest.mark.slow
def test_cli_pretrain_train_eval(small_cfg, tmp_path, capsys):
    out = str(tmp_path / "run")
    assert cli.main(["--config", str(small_cfg), "--out", out, "pretrain"]) == 0
    rec = json.loads(capsys.readouterr().out)
    assert rec["clean_val_accuracy"] >= 0.95 and rec["dims"][0] == 1024
    assert cli.main(["train", "--config", str(small_cfg), "--out", out]) == 0
    assert json.loads(capsys.readouterr().out)["comm"].endswith("comm.npz")
    assert cli.main(["eval", "--config", str(small_cfg), "--out", out, "--rounds", "8",
                     "--modes", "semantic", "local"]) == 0
    recs = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
    assert [r["mode"] for r in recs] == ["semantic", "local"]
    assert recs[1]["avg_connections"] == 0 and recs[0]["avg_connections"] == 15
