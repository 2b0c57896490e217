import json
import os
import subprocess
import sys

import numpy as np
import pytest

from mgdp import cli
from mgdp.errors import IoFailure
from mgdp.experiment import ExperimentConfig, emit_tables, prepare, run_experiment


def tiny_cfg(**over):
    cfg = ExperimentConfig.load("tiny_config")
    for k, v in over.items():
        setattr(cfg, k, v)
    return cfg


def test_config_validation():
    base = ExperimentConfig.load("tiny_config").to_dict()
    for bad in ({"horizon": 0}, {"epsilons": [0.2, 0.0]},
                {"d_init": {"mode": "bernoulli", "p": 1.5}},
                {"s_init": {"mode": "uniform", "lo_frac": 0.9, "hi_frac": 0.7}},
                {"sensitivity": {"mode": "guess"}}):
        with pytest.raises(ValueError):
            ExperimentConfig.from_dict({**base, **bad})


def test_empty_epsilon_list(tmp_path):
    rep, _ = run_experiment(tiny_cfg(epsilons=[]), tmp_path)
    assert rep.variants == []
    rows = (tmp_path / "pickups.csv").read_text().splitlines()
    assert len(rows) == 1 + 2 * 2


def test_tables_consistent(tmp_path):
    rep, _ = run_experiment(tiny_cfg(), tmp_path)
    assert len(rep.variants) == 2
    modes = (tmp_path / "modes.csv").read_text().splitlines()[1:]
    for v in rep.variants:
        eps = format(v["epsilon"], ".10g")
        col = [int(r.split(",")[5]) for r in modes if r.split(",")[2] == eps]
        assert sum(col) == v["mismatch"]
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["delta_estimate"] == rep.delta_estimate
    for name in rep.manifest:
        assert os.path.exists(name)


def test_same_config_same_bytes(tmp_path):
    run_experiment(tiny_cfg(), tmp_path / "a")
    run_experiment(tiny_cfg(), tmp_path / "b")
    for name in ("pickups.csv", "voltages.csv", "modes.csv", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_changes_draws():
    a = prepare(ExperimentConfig.load("case33_config"))
    cfg = ExperimentConfig.load("case33_config")
    cfg.seed = 1
    b = prepare(cfg)
    assert not np.array_equal(a.s_init, b.s_init)
    assert np.all(a.s_init >= 0.7 * 3.594) and np.all(a.s_init <= 0.9 * 3.594)


def test_explicit_draws():
    cfg = tiny_cfg(d_init={"mode": "explicit", "bits": [1, 0, 0, 1]})
    setup = prepare(cfg)
    assert setup.d.tolist() == [[1, 0], [0, 1]]
    np.testing.assert_allclose(setup.s_init, [0.7, 0.7])


def test_emit_failure_cleans_up(tmp_path):
    rep, art = run_experiment(tiny_cfg(), write=False)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(IoFailure):
        emit_tables(rep, art, blocker / "sub")


def test_cli_parse(capsys):
    assert cli.main(["parse", "--case", "case33bw", "--ess", "2", "7", "12", "17", "23", "27", "31"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["n_buses"] == 33 and doc["n_branches"] == 32 and doc["n_loads"] == 26 and doc["radial"]


def test_cli_subcommands(tmp_path, capsys):
    assert cli.main(["lr", "--config", "tiny_config"]) == 0
    lr = json.loads(capsys.readouterr().out)
    assert lr["status"] == "Optimal" and max(lr["audit"].values()) <= 1e-6

    assert cli.main(["sens", "--config", "tiny_config", "--max-iter", "5"]) == 0
    sens = json.loads(capsys.readouterr().out)
    assert sens["termination"] in ("ToleranceMet", "CycleDetected", "IterationCap")

    out = tmp_path / "noisy.json"
    assert cli.main(["--out", str(out), "dp", "--config", "tiny_config", "--epsilon", "0.5",
                     "--delta", "1.0"]) == 0
    noisy = json.loads(out.read_text())
    assert noisy["scale"] == 2.0 and len(noisy["noisy"]) == 2

    assert cli.main(["fr", "--config", "tiny_config", "--noisy-pickup", str(out)]) == 0
    fr = json.loads(capsys.readouterr().out)
    assert fr["status"] == "Optimal"

    csv_path = tmp_path / "noisy.csv"
    csv_path.write_text("2,2\n2,2\n")
    assert cli.main(["oracle", "--config", "tiny_config", "--noisy-pickup", str(csv_path)]) == 0
    orc = json.loads(capsys.readouterr().out)
    assert orc["exact_delta"] > 0 and orc["fr"]["nodes_explored"] == 16


def test_cli_errors_exit_nonzero(capsys):
    assert cli.main(["parse", "--case", "no-such-case"]) == 2


def test_console_script_run_is_deterministic(tmp_path):
    for name in ("a", "b"):
        subprocess.run([sys.executable, "-m", "mgdp.cli", "--seed", "3", "--out", str(tmp_path / name),
                        "run", "--config", "tiny_config"], check=True, capture_output=True)
    for f in ("pickups.csv", "voltages.csv", "modes.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_case33_tables(tmp_path):
    import csv

    violations = 0
    for seed in range(5):
        cfg = ExperimentConfig.load("case33_config")
        cfg.seed = seed
        cfg.sensitivity = {"mode": "fixed", "value": 1.2863}
        out = tmp_path / str(seed)
        run_experiment(cfg, out)
        with open(out / "pickups.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2 * 156
        noisy = np.array([float(r["r_noisy"]) for r in rows if r["epsilon"] == "0.2"]).reshape(6, 26)
        post = np.array([float(r["r_post"]) for r in rows if r["epsilon"] == "0.2"]).reshape(6, 26)
        violations += int((np.diff(noisy, axis=0) < 0).any())
        assert np.all(np.diff(post, axis=0) >= 0) and post.min() >= 0 and post.max() <= 1
        with open(out / "voltages.csv") as fh:
            vm = np.array([float(r["vmag"]) for r in csv.DictReader(fh)])
        assert vm.min() >= 0.9 - 1e-8 and vm.max() <= 1.1 + 1e-8
    assert violations == 5
