import csv
import hashlib
import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ldglab.cli import ConfigError, RunConfig, cmd_analyze, cmd_run, cmd_selftest, cmd_sweep, main
from ldglab.domain import BoundarySpec, Grid2D
from ldglab.flow import FlowConfig, FlowState, save_checkpoint
from ldglab.sym3core import canonical_flat, coords

QUICK = {"N": 129, "epsilon": 0.04, "radii": [0.13, 0.16, 0.2], "r_report": 0.2}


def _write_config(path, **kw):
    path.write_text(json.dumps({**QUICK, **kw}))
    return path


def test_default_config_values():
    c = RunConfig()
    assert (c.N, c.epsilon, c.beta) == (513, 0.01, 2.0)
    assert (c.boundary.delta1, c.boundary.delta2) == (0.3, 0.2)


@settings(max_examples=20)
@given(st.integers(33, 1025), st.floats(0.005, 0.1), st.floats(1.0, 2.99), st.floats(-0.5, 0.5),
       st.floats(-0.7, 0.7), st.sampled_from(["explicit", "semi-implicit", "lbfgs"]))
def test_config_round_trip(N, eps, beta, d1, d2, scheme):
    c = RunConfig(N=N, epsilon=eps, beta=beta, boundary=BoundarySpec(d1, d2),
                  flow=FlowConfig(scheme=scheme))
    assert RunConfig.from_json(c.to_json()) == c


def test_config_rejects_unknown_keys_and_bad_values():
    with pytest.raises(ConfigError, match="epsilom"):
        RunConfig.from_dict({"epsilom": 0.01})
    with pytest.raises(ConfigError, match="boundary.*delta3"):
        RunConfig.from_dict({"boundary": {"delta3": 0.1}})
    with pytest.raises(ConfigError, match="beta"):
        RunConfig.from_dict({"beta": 3.5})
    with pytest.raises(ConfigError, match="radii"):
        RunConfig.from_dict({"radii": []})
    with pytest.raises(ConfigError, match="line 3"):
        RunConfig.from_json('{\n "N": 129,\n "epsilon": ,\n}')


def test_run_writes_manifest_last(tmp_path):
    cfg = RunConfig.from_dict({**QUICK, "output_dir": str(tmp_path / "run")})
    man = cmd_run(cfg)
    names = {f["file"] for f in man["files"]}
    assert names == {"state.ckpt", "energy.json", "energy_history.csv", "config.json"}
    on_disk = json.loads((tmp_path / "run" / "manifest.json").read_text())
    for f in on_disk["files"]:
        data = (tmp_path / "run" / f["file"]).read_bytes()
        assert hashlib.sha256(data).hexdigest() == f["sha256"]
    # every file was written before the manifest
    mtime = (tmp_path / "run" / "manifest.json").stat().st_mtime_ns
    assert all((tmp_path / "run" / n).stat().st_mtime_ns <= mtime for n in names)


def test_run_is_deterministic(tmp_path):
    a = cmd_run(RunConfig.from_dict({**QUICK, "output_dir": str(tmp_path / "a")}))
    b = cmd_run(RunConfig.from_dict({**QUICK, "output_dir": str(tmp_path / "b")}))
    assert a["energy_series_sha256"] == b["energy_series_sha256"]


def test_main_run_exit_codes(tmp_path, capsys):
    cfg = _write_config(tmp_path / "c.json", output_dir=str(tmp_path / "out"))
    assert main(["run", "--config", str(cfg)]) == 0
    assert (tmp_path / "out" / "manifest.json").exists()
    bad = _write_config(tmp_path / "bad.json", epsilon=0.005, output_dir=str(tmp_path / "x"))
    assert main(["run", "--config", str(bad)]) == 2
    err = capsys.readouterr().err
    assert "0.005" in err and "0.015625" in err
    typo = tmp_path / "typo.json"
    typo.write_text('{"N": 129, "epsilonn": 0.04}')
    assert main(["run", "--config", str(typo)]) == 2
    assert "epsilonn" in capsys.readouterr().err


def test_analyze_missing_checkpoint(tmp_path, capsys):
    missing = tmp_path / "nope.ckpt"
    assert main(["analyze", str(missing), "--output-dir", str(tmp_path / "a")]) == 2
    assert str(missing) in capsys.readouterr().err


def test_analyze_rejects_foreign_file(tmp_path):
    f = tmp_path / "x.ckpt"
    f.write_bytes(b"hello")
    assert main(["analyze", str(f), "--output-dir", str(tmp_path / "a")]) == 2


def _read_field(path):
    with open(path) as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["x", "y", "value"]
    return np.array(rows[1:], float)


def test_analyze_canonical_flat_checkpoint(tmp_path):
    grid = Grid2D(257)
    a = np.array([0.5, 0.5]) + grid.h * np.array([0.37, 0.21])
    # mollify the core a little so the eigenvalues cross at a
    pts = grid.points()
    rho = np.hypot(*(pts - a).transpose(2, 0, 1))
    u0 = canonical_flat(pts, a)
    eta = np.tanh(rho / 0.01)[..., None, None]
    mid = np.diag([0.5, 0.5, 0.0])
    u = eta * u0 + (1 - eta) * mid
    state = FlowState(grid, coords(u), 0.01, 2.0, 1e-6)
    ck = save_checkpoint(tmp_path / "flat.ckpt", state)
    man = cmd_analyze(ck, tmp_path / "an", radii=(0.05, 0.1, 0.15), with_green=False)
    names = {f["file"] for f in man["files"]}
    for need in ("lambda1.csv", "lambda3.csv", "e1_quiver.csv", "zmu.csv", "inv_mu.csv",
                 "report.json", "length_profile.csv", "fig_zmu.gp"):
        assert need in names
    zmu = _read_field(tmp_path / "an" / "zmu.csv")
    r = np.hypot(zmu[:, 0] - a[0], zmu[:, 1] - a[1])
    sel = (r > 0.1) & (r < 0.2)
    assert np.allclose(zmu[sel, 2], 0.25, rtol=0.01)
    with open(tmp_path / "an" / "length_profile.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["r", "value"]
    assert np.allclose(np.array(rows[1:], float)[:, 1], np.sqrt(2) * np.pi, rtol=0.005)


def test_analyze_is_reproducible(tmp_path):
    cfg = RunConfig.from_dict({**QUICK, "output_dir": str(tmp_path / "run")})
    cmd_run(cfg)
    ck = tmp_path / "run" / "state.ckpt"
    m1 = cmd_analyze(ck, tmp_path / "a1", radii=cfg.radii, r_report=0.2)
    m2 = cmd_analyze(ck, tmp_path / "a2", radii=cfg.radii, r_report=0.2)
    h1 = {f["file"]: f["sha256"] for f in m1["files"]}
    h2 = {f["file"]: f["sha256"] for f in m2["files"]}
    assert h1 == h2
    report = json.loads((tmp_path / "a1" / "report.json").read_text())
    assert report["expansion"]["green"] is not None


def test_sweep_validation_and_partial_failure(tmp_path):
    cfg = RunConfig.from_dict({**QUICK, "output_dir": str(tmp_path / "s")})
    with pytest.raises(ConfigError):
        cmd_sweep(cfg, epsilons=[])
    with pytest.raises(ConfigError):
        cmd_sweep(cfg)
    man = cmd_sweep(cfg, epsilons=[0.04, 0.005])
    assert len(man["failed"]) == 1 and man["failed"][0]["epsilon"] == 0.005
    with open(tmp_path / "s" / "sweep_epsilon.csv") as f:
        rows = list(csv.DictReader(f))
    assert [r["status"] for r in rows] == ["ok", "failed"]


def test_sweep_over_radii(tmp_path):
    cfg = RunConfig.from_dict({**QUICK, "output_dir": str(tmp_path / "s")})
    man = cmd_sweep(cfg, radii=[0.13, 0.2])
    assert not man["failed"]
    with open(tmp_path / "s" / "sweep_radius.csv") as f:
        rows = list(csv.DictReader(f))
    assert [float(r["r"]) for r in rows] == [0.13, 0.2]
    assert all(abs(float(r["length"]) / (np.sqrt(2) * np.pi) - 1) < 0.05 for r in rows)


def test_main_sweep_empty_list(tmp_path):
    cfg = _write_config(tmp_path / "c.json", output_dir=str(tmp_path / "s"))
    assert main(["sweep", "--config", str(cfg), "--epsilons", ""]) == 2


def test_selftest_passes(capsys):
    assert all(ok for _, ok, _ in cmd_selftest(2000))
    assert main(["selftest", "--samples", "2000"]) == 0
    assert "FAIL" not in capsys.readouterr().out


def test_dump_config(tmp_path, capsys):
    assert main(["run", "--dump-config"]) == 0
    assert RunConfig.from_json(capsys.readouterr().out) == RunConfig()
