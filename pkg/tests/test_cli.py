import json
import math
import shutil

import numpy as np
import pytest

from clnscl import runner, verify
from clnscl.cli import main
from clnscl.config import ConfigError, ExperimentConfig, parse_config

SIM = """schema_version = 1
mode = coupled-sim
C = 4
n = 6
m = 8
B = 8
T = 10
seeds = 2
"""


def write(tmp_path, text, name="c.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_parse_roundtrip_and_hash():
    cfg = parse_config(SIM + "objectives = CL, NSCL, SCL\naxis.tau = 0.1, 0.5\n")
    assert cfg.objectives == ("CL", "NSCL", "SCL") and cfg.axes == {"tau": (0.1, 0.5)}
    again = parse_config(cfg.canonical())
    assert again == cfg and again.config_hash() == cfg.config_hash()
    assert parse_config(SIM + "# comment\n\n").config_hash() == parse_config(SIM).config_hash()


@pytest.mark.parametrize(
    "text, key",
    [
        (SIM + "bogus = 1\n", "bogus"),
        (SIM + "axis.nope = 1, 2\n", "axis.nope"),
        (SIM + "C = x\n", "C"),
        (SIM + "B = 4\nB = 8\n", "B"),
        ("mode = coupled-sim\n", "mode"),
        ("schema_version = 9\n", "schema_version"),
        (SIM + "eta_scaling = B^2\n", "eta_scaling"),
        (SIM + "axis.objectives = CL\n", "axis.objectives"),
        (SIM + "axis.tau = \n", "axis.tau"),
        (SIM + "embedding = backbone\n", "embedding"),
        (SIM + "hidden = none\nembedding = hidden\n", "embedding"),
    ],
)
def test_config_errors_name_the_key(text, key):
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    assert str(err.value).startswith(key)


def test_eta_scaling():
    cfg = ExperimentConfig(eta=0.1, B=128, eta_ref_B=32)
    assert math.isclose(cfg.with_values(eta_scaling="B").effective_eta, 0.4)
    assert math.isclose(cfg.with_values(eta_scaling="sqrtB").effective_eta, 0.2)
    assert math.isclose(cfg.with_values(eta_scaling="B^1/4").effective_eta, 0.1 * 2**0.5)
    assert cfg.effective_eta == 0.1


def test_run_is_byte_identical(tmp_path):
    cfg = write(tmp_path, SIM)
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    h = parse_config(SIM).config_hash()
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "manifest.json" in files
    for name in files:
        if name != "manifest.json":
            assert name.startswith(h[:12])
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["config_hash"] == h and "created" in manifest


def test_seed_flag_changes_output(tmp_path):
    cfg = write(tmp_path, SIM)
    main(["run", "--config", cfg, "--out", str(tmp_path / "a")])
    main(["run", "--config", cfg, "--seed", "5", "--out", str(tmp_path / "b")])
    assert {p.name for p in (tmp_path / "a").iterdir()} != {p.name for p in (tmp_path / "b").iterdir()}


def test_unknown_key_is_usage_error(tmp_path, capsys):
    assert main(["run", "--config", write(tmp_path, SIM + "bogus = 1\n"), "--out", str(tmp_path / "o")]) == 2
    assert "bogus" in capsys.readouterr().err


def test_encoder_run(tmp_path):
    text = SIM.replace("coupled-sim", "coupled-encoder") + "objectives = CL, NSCL, CE\nprobe_size = 8\nhidden = 4\nout_dim = 4\n"
    cfg = parse_config(text)
    runner.run(cfg, tmp_path / "o")
    rows = (tmp_path / "o" / f"{runner.short_hash(cfg)}_summary.csv").read_text().splitlines()
    assert rows[0].split(",") == list(runner.ENCODER_SUMMARY_COLUMNS)
    assert len(rows) == 1 + 2 * 3


def test_degenerate_sweep_equals_direct_run(tmp_path):
    sweep = parse_config(SIM.replace("coupled-sim", "sweep").replace("seeds = 2", "seeds = 1") + "axis.tau = 0.5\n")
    children = runner.sweep_children(sweep)
    assert len(children) == 1
    direct = parse_config(SIM.replace("seeds = 2", "seeds = 1"))
    assert children[0][2] == direct
    runner.sweep(sweep, tmp_path / "s")
    runner.run(direct, tmp_path / "d")
    h = runner.short_hash(direct)
    child_dir = tmp_path / "s" / "children" / h
    for name in (f"{h}_summary.csv", f"{h}_trace_seed0.csv"):
        assert (child_dir / name).read_bytes() == (tmp_path / "d" / name).read_bytes()


def test_tau_sweep_sorted_and_idempotent(tmp_path):
    text = SIM.replace("coupled-sim", "sweep") + "axis.tau = 1.0, 0.1, 0.5\n"
    cfg = write(tmp_path, text)
    out = tmp_path / "s"
    assert main(["sweep", "--config", cfg, "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    agg = out / f"{manifest['config_hash'][:12]}_aggregate.csv"
    rows = runner.read_aggregate(agg)
    assert [(float(r["tau"]), int(r["seed"])) for r in rows] == [(t, s) for t in (0.1, 0.5, 1.0) for s in (0, 1)]
    first = agg.read_bytes()

    _, computed = runner.sweep(parse_config(text), out)
    assert computed == []
    victim = sorted((out / "children").iterdir())[2]
    shutil.rmtree(victim)
    _, computed = runner.sweep(parse_config(text), out)
    assert computed == [victim.name]
    assert agg.read_bytes() == first


def test_sweep_needs_axes():
    with pytest.raises(ConfigError):
        runner.sweep_children(parse_config(SIM.replace("coupled-sim", "sweep")))


def test_bounds_subcommand(tmp_path):
    out = tmp_path / "b"
    text = "schema_version = 1\nmode = bounds\nC = 10\nB = 128\nT = 100\ntau = 0.5\neta = 0.1\ndelta = 0.1\n"
    assert main(["bounds", "--config", write(tmp_path, text), "--out", str(out)]) == 0
    report = json.loads(next(out.glob("*_bounds.json")).read_text())
    assert 100 < report["sim_drift_bound"] < 106
    assert report["config_hash"] == parse_config(text).config_hash()


def test_verify_exit_status(tmp_path, monkeypatch):
    ok = verify.CheckReport("a", 1, 0, 1.0, True)
    bad = verify.CheckReport("b", 1, 1, -1.0, False)
    monkeypatch.setattr(verify, "run_suite", lambda *a, **k: [ok])
    assert main(["verify", "--trials", "5", "--out", str(tmp_path / "v1")]) == 0
    monkeypatch.setattr(verify, "run_suite", lambda *a, **k: [ok, bad])
    assert main(["verify", "--trials", "5", "--out", str(tmp_path / "v2")]) == 1


def test_metrics_subcommand(tmp_path, capsys):
    rng = np.random.default_rng(0)
    Z = rng.standard_normal((10, 4))
    np.savetxt(tmp_path / "a.csv", Z, delimiter=",", header="z0,z1,z2,z3", comments="")
    np.save(tmp_path / "b.npy", Z)
    assert main(["metrics", str(tmp_path / "a.csv"), str(tmp_path / "b.npy")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert math.isclose(out["cka"], 1.0) and math.isclose(out["rsa"], 1.0) and out["drift"] < 1e-12


def test_metrics_row_mismatch(tmp_path):
    np.save(tmp_path / "a.npy", np.ones((3, 2)))
    np.save(tmp_path / "b.npy", np.ones((4, 2)))
    assert main(["metrics", str(tmp_path / "a.npy"), str(tmp_path / "b.npy")]) == 2
