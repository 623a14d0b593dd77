import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

import csoba.cli as cli
from csoba.algorithms import AlgoConfig, run
from csoba.exceptions import ConfigError, SearchFailure
from csoba.metrics import read_csv
from csoba.problems import scalar_problem
from csoba.simnet import load_log, replay_uplink

BASE = {
    "problem": {"kind": "quadratic", "n": 3, "d_x": 8, "d_y": 4, "sigma": 0.05, "seed": 1},
    "algos": [
        {"label": "nc", "algo": "NcSoba", "alpha": 0.1, "beta": 0.3, "gamma": 0.3},
        {"label": "c", "algo": "CSoba", "alpha": 0.1, "beta": 0.3, "gamma": 0.3, "budget_fraction": 0.25},
    ],
    "rounds": 40,
    "seeds": [0, 1],
    "output_dir": "out",
}


def write_config(tmp_path, data, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data))
    return str(path)


def with_changes(**changes):
    data = json.loads(json.dumps(BASE))
    data.update(changes)
    return data


@pytest.fixture
def in_tmp(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv(cli.OUTPUT_ROOT_ENV, raising=False)
    return tmp_path


def test_run_writes_one_csv_per_label_and_seed(in_tmp):
    assert cli.main(["run", write_config(in_tmp, BASE)]) == 0
    out = in_tmp / "out"
    assert sorted(p.name for p in out.glob("*.csv")) == [
        "c_seed0.csv", "c_seed1.csv", "nc_seed0.csv", "nc_seed1.csv"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest["runs"]) == 4
    c_run = next(r for r in manifest["runs"] if r["label"] == "c")
    assert c_run["config"]["upper_comp"]["kind"] == "RandKScaled"
    trace = read_csv(out / "nc_seed0.csv")
    assert len(trace.rows) == 41 and trace.header["label"] == "nc"


def test_rerun_is_byte_identical(in_tmp):
    cfg = write_config(in_tmp, BASE)
    cli.main(["run", cfg])
    first = {p.name: p.read_bytes() for p in (in_tmp / "out").iterdir()}
    cli.main(["run", cfg])
    second = {p.name: p.read_bytes() for p in (in_tmp / "out").iterdir()}
    assert first == second


def test_message_log_replays_to_trace_bits(in_tmp):
    assert cli.main(["run", write_config(in_tmp, with_changes(rounds=6, seeds=[0], message_log=True))]) == 0
    out = in_tmp / "out"
    for label in ("nc", "c"):
        log = load_log(out / f"{label}_seed0.msg.bin")
        assert replay_uplink(log) == read_csv(out / f"{label}_seed0.csv").rows[-1].uplink_bits
    bad = with_changes(message_log="yes")
    assert cli.main(["run", write_config(in_tmp, bad)]) == 2


def test_worker_sweep_multiplies_files(in_tmp):
    data = with_changes(sweep={"axis": "workers", "values": [1, 2, 4, 8]}, seeds=[0], rounds=5)
    assert cli.main(["run", write_config(in_tmp, data)]) == 0
    names = sorted(p.name for p in (in_tmp / "out").glob("*.csv"))
    assert len(names) == 2 * 4
    assert "c_seed0_workers8.csv" in names


def test_output_root_override(in_tmp, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(in_tmp / "elsewhere"))
    assert cli.main(["run", write_config(in_tmp, with_changes(rounds=3))]) == 0
    assert len(list((in_tmp / "elsewhere" / "out").glob("*.csv"))) == 4
    assert not (in_tmp / "out").exists()


@pytest.mark.parametrize("mutate,field", [
    (lambda d: d["algos"][1].update(alpha=-1), "algos[1].alpha"),
    (lambda d: d["algos"][1].update(label="nc"), "algos[1].label"),
    (lambda d: d["problem"].update(L_g=0.1), "problem"),
    (lambda d: d["problem"].update(colour="red"), "problem.colour"),
    (lambda d: d.update(seeds=[]), "seeds"),
    (lambda d: d.update(sweep={"axis": "time", "values": [1]}), "sweep.axis"),
    (lambda d: d["algos"][1].update(upper_comp={"kind": "RandKScaled", "k": 2}), "algos[1].upper_comp"),
    (lambda d: (d["algos"][1].pop("budget_fraction"),
                d["algos"][1].update(upper_comp={"kind": "RandKScaled", "k": 99})), "algos[1]"),
    (lambda d: d.pop("rounds"), "rounds"),
])
def test_invalid_config_exits_2_naming_field(in_tmp, capsys, mutate, field):
    data = json.loads(json.dumps(BASE))
    mutate(data)
    assert cli.main(["run", write_config(in_tmp, data)]) == 2
    assert field in capsys.readouterr().err


def test_unreadable_config_exits_2(in_tmp):
    assert cli.main(["run", str(in_tmp / "nope.yaml")]) == 2
    (in_tmp / "bad.yaml").write_text("problem: [unclosed")
    assert cli.main(["run", str(in_tmp / "bad.yaml")]) == 2


def test_divergence_exits_3_and_keeps_partial_output(in_tmp):
    data = with_changes(algos=[{"label": "wild", "algo": "NcSoba", "alpha": 80.0, "beta": 0.3,
                                "gamma": 0.3}], seeds=[0], rounds=200)
    data["problem"]["x0_scale"] = 1.0
    assert cli.main(["run", write_config(in_tmp, data)]) == 3
    trace = read_csv(in_tmp / "out" / "wild_seed0.csv")
    assert 0 < len(trace.rows) < 201
    manifest = json.loads((in_tmp / "out" / "manifest.json").read_text())
    assert manifest["runs"][0]["status"].startswith("diverged")


def test_grid_single_point(in_tmp):
    data = with_changes(grid={"alpha": [0.05], "beta": [0.2], "gamma": [0.4], "rounds": 10})
    exp = cli.parse_config(data)
    chosen = cli.grid_search(exp)
    assert (chosen["nc"].alpha, chosen["nc"].beta, chosen["nc"].gamma) == (0.05, 0.2, 0.4)
    report = json.loads((in_tmp / "out" / "grid_manifest.json").read_text())
    assert report["selection"]["c"]["points"] == 1


def test_grid_scalar_suite_selection_converges():
    problem = scalar_problem(x0=1.0)
    axis = [0.01, 0.1, 1.0]
    best, _, table = cli.search_stepsizes(AlgoConfig("NcSoba", 1, 1, 1), problem,
                                          {"alpha": axis, "beta": axis, "gamma": axis}, rounds=1000)
    assert len(table) == 27
    assert run(best, problem, 10_000, seed=0).rows[-1].grad_norm_sq <= 1e-10


def test_grid_ties_break_lexicographically(monkeypatch):
    monkeypatch.setattr(cli, "averaged_stationarity", lambda trace: 1.0)
    grid = {"alpha": [0.5, 0.1], "beta": [0.3, 0.2], "gamma": [0.9, 0.4]}
    best, score, _ = cli.search_stepsizes(AlgoConfig("NcSoba", 1, 1, 1), scalar_problem(), grid, 2)
    assert (best.alpha, best.beta, best.gamma, score) == (0.1, 0.2, 0.4, 1.0)


def test_grid_all_diverge(in_tmp, capsys):
    problem = scalar_problem(x0=1.0)
    with pytest.raises(SearchFailure):
        cli.search_stepsizes(AlgoConfig("NcSoba", 1, 1, 1), problem,
                             {"alpha": [50.0], "beta": [50.0], "gamma": [50.0]}, 200)
    data = with_changes(grid={"alpha": [90.0], "beta": [90.0], "gamma": [90.0], "rounds": 200})
    data["problem"]["x0_scale"] = 1.0
    assert cli.main(["grid", write_config(in_tmp, data)]) == 4


def test_grid_command_prints_choice(in_tmp, capsys):
    data = with_changes(grid={"alpha": [0.05, 0.1], "beta": [0.3], "gamma": [0.3], "rounds": 10,
                              "labels": ["nc"]})
    assert cli.main(["grid", write_config(in_tmp, data)]) == 0
    out = capsys.readouterr().out
    assert out.startswith("nc: alpha=") and "c:" not in out.replace("nc:", "")


def test_grid_search_budget_defaults_to_tenth(in_tmp):
    exp = cli.parse_config(with_changes(rounds=50, grid={"alpha": [0.1], "beta": [0.3], "gamma": [0.3]}))
    cli.grid_search(exp)
    assert json.loads((in_tmp / "out" / "grid_manifest.json").read_text())["k_search"] == 5


def test_compare_identical_runs(in_tmp, capsys):
    cli.main(["run", write_config(in_tmp, with_changes(rounds=200, seeds=[0]))])
    f = str(in_tmp / "out" / "nc_seed0.csv")
    target = min(read_csv(f).column("grad_norm_sq")) * 1.5
    assert cli.main(["compare", f, f, "--target", str(target)]) == 0
    assert "ratio A/B: 1" in capsys.readouterr().out
    report = cli.compare_bits(f, f, target)
    assert report["ratio"] == 1.0


def test_compare_directories_and_unreached(in_tmp, capsys):
    cli.main(["run", write_config(in_tmp, with_changes(rounds=100, seeds=[0, 1]))])
    out = in_tmp / "out"
    report = cli.compare_bits(out, out, 1e-300, pattern="nc_*.csv")
    assert not report["a"]["reached"] and report["ratio"] is None
    assert np.isfinite(report["a"]["best"])
    assert cli.main(["compare", str(out), str(out), "--target", "1e-300", "--pattern", "c_*.csv"]) == 0
    assert "unreached" in capsys.readouterr().out


def test_compare_missing_inputs_exit_2(in_tmp):
    assert cli.main(["compare", str(in_tmp / "a"), str(in_tmp / "b"), "--target", "1"]) == 2


def test_parse_rejects_non_mapping():
    with pytest.raises(ConfigError):
        cli.parse_config([1, 2])


def test_module_entry_point(in_tmp):
    cfg = write_config(in_tmp, with_changes(rounds=2, seeds=[0]))
    done = subprocess.run([sys.executable, "-m", "csoba", "run", cfg], capture_output=True, text=True)
    assert done.returncode == 0 and "wrote" in done.stdout
