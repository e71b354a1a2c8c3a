from __future__ import annotations

import json
import math
import subprocess
import sys
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from flowharnack import cli, io, presets
from flowharnack import geometry as geo
from flowharnack.errors import ConfigError

finite = st.floats(1e-6, 1e3, allow_nan=False, allow_infinity=False)


@st.composite
def scenarios(draw):
    n = draw(st.sampled_from([16, 32, 48, 64]))
    model = draw(st.sampled_from(io.MODELS))
    phi = draw(st.sampled_from(["cos-sum", "sin-sum"])) if model == "extended-ricci" else draw(
        st.sampled_from(io.PHI_PROFILES))
    checks = tuple(draw(st.lists(st.sampled_from(io.CHECKS), min_size=1, max_size=4, unique=True)))
    tols = tuple((c, draw(finite)) for c in draw(st.lists(st.sampled_from(io.CHECKS), max_size=3, unique=True)))
    return io.Scenario(
        name=draw(st.from_regex(r"[a-z][a-z0-9\-]{0,12}", fullmatch=True)),
        nx=n, ny=n, lx=draw(finite), ly=draw(finite), scheme=draw(st.sampled_from(geo.SCHEMES)),
        model=model, a=draw(finite), schedule=draw(st.sampled_from(io.SCHEDULES)),
        lam=draw(st.floats(-2, 2, allow_nan=False)),
        u_profile=draw(st.sampled_from(io.U_PROFILES)), u_amplitude=draw(st.floats(0, 0.5)),
        phi_profile=phi, phi_amplitude=draw(st.floats(0, 1)),
        T=draw(finite), dt_policy="cfl", safety=draw(st.floats(0.01, 1.0)), seed=draw(st.integers(0, 2**31)),
        basepoint_i=draw(st.integers(0, n - 1)), basepoint_j=draw(st.integers(0, n - 1)),
        checks=checks, tolerances=tols,
    )


@settings(max_examples=60, deadline=None)
@given(scenarios())
def test_scenario_text_round_trip(sc):
    back = io.from_text(io.to_text(sc))
    assert back == sc
    assert io.config_hash(back) == io.config_hash(sc)


def test_presets_are_valid_and_round_trip():
    for name in presets.PRESETS:
        sc = presets.preset(name)
        assert io.validate(sc) is sc
        assert io.from_text(io.to_text(sc)) == sc


def test_hash_changes_with_any_field():
    sc = presets.preset("flat-static")
    assert io.config_hash(sc) != io.config_hash(replace(sc, seed=1))
    assert io.config_hash(sc) != io.config_hash(replace(sc, T=sc.T * (1 + 1e-15)))


@pytest.mark.parametrize("text,line,fragment", [
    ("[grid]\nnx = 15\n", 2, "nx must be"),
    ("[grid]\nnx = 32\nny = abc\n", 3, "bad value"),
    ("[run]\nT = 0.1\nbogus = 3\n", 3, "unknown key"),
    ("[model]\nmodel = ricci\n[checks]\ntol.nothing = 1e-3\n", 4, "unknown check"),
    ("[run]\nT = nan\n", 2, "not finite"),
    ("[model]\nmodel = extended-ricci\n", 2, "phi profile"),
])
def test_config_errors_carry_line_numbers(text, line, fragment):
    with pytest.raises(ConfigError) as info:
        io.from_text(text)
    assert f"line {line}" in str(info.value)
    assert fragment in str(info.value)


def test_unknown_section_rejected():
    with pytest.raises(ConfigError):
        io.from_text("[extras]\nx = 1\n")


@settings(max_examples=30, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6)),
       st.floats(-1e6, 1e6, allow_nan=False))
def test_checkpoint_round_trip(tmp_path, arr, t):
    chart = geo.GridChart(16, 16, scheme="fd4")
    path = tmp_path / "x.ckpt"
    io.write_checkpoint(path, chart, t, "Ricci", {"a": arr, "b": np.arange(3.0)}, {"note": "x"})
    ck = io.read_checkpoint(path)
    assert ck.fields["a"].tobytes() == np.ascontiguousarray(arr, dtype="<f8").tobytes()
    assert ck.header["time"] == t and ck.header["extra"] == {"note": "x"}
    assert io.chart_from_header(ck.header) == chart


def test_checkpoint_rejects_bad_files(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"hello\n")
    with pytest.raises(ValueError):
        io.read_checkpoint(bad)
    good = tmp_path / "good.ckpt"
    io.write_checkpoint(good, geo.GridChart(16, 16), 0.0, "Static", {"u": np.ones((16, 16))})
    good.write_bytes(good.read_bytes()[:-8])
    with pytest.raises(ValueError, match="truncated"):
        io.read_checkpoint(good)


def test_summary_is_deterministic_json(tmp_path):
    sc = presets.preset("flat-static")
    recs = [io.CheckRecord("rho", 1e-3, 0.01, "pass", {"x": np.float64(2.0), "flag": np.bool_(True)}),
            io.CheckRecord("harnack", math.nan, math.nan, "skipped", {})]
    io.write_summary(tmp_path / "a.json", sc, recs)
    io.write_summary(tmp_path / "b.json", sc, recs)
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    doc = json.loads((tmp_path / "a.json").read_text())
    assert doc["checks"][1]["value"] == "nan"
    assert doc["checks"][0]["detail"] == {"flag": True, "x": 2.0}


def test_series_csv_header(tmp_path):
    sc = presets.preset("flat-static")
    io.write_series_csv(tmp_path / "s.csv", sc, ["t", "v"], [(0.0, 1.5), (0.1, 2.5)])
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == f"# flowharnack-csv 1 config_hash={io.config_hash(sc)}"
    assert lines[1] == "t,v" and lines[3] == "0.1,2.5"


# command line ----------------------------------------------------------------

def test_cli_negative_control_skips_dependent_checks(tmp_path, capsys):
    code = cli.main(["run", "negative-control", "--grid", "32", "--out", str(tmp_path)])
    assert code == cli.EXIT_OK
    doc = json.loads((tmp_path / "summary.json").read_text())
    verdicts = {r["name"]: r["verdict"] for r in doc["checks"]}
    assert verdicts.pop("dalpha") == "warning"
    assert set(verdicts.values()) == {"skipped"}
    assert "warning: dalpha" in capsys.readouterr().out
    assert cli.main(["report", str(tmp_path)]) == cli.EXIT_OK


def test_cli_config_error_exit(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[grid]\nnx = 17\n")
    assert cli.main(["run", str(bad)]) == cli.EXIT_CONFIG
    assert "line 2" in capsys.readouterr().err
    assert cli.main(["run", "no-such-preset"]) == cli.EXIT_CONFIG


def test_cli_numerical_abort_exit(tmp_path):
    sc = presets.preset("ricci-perturbed", nx=32, ny=32, dt_policy="fixed", dt=0.05, checks=("dalpha",))
    path = tmp_path / "big_step.ini"
    io.write_scenario(sc, path)
    assert cli.main(["run", str(path), "--out", str(tmp_path / "out")]) == cli.EXIT_NUMERIC


def test_cli_scenario_file_and_single_check(tmp_path, capsys):
    sc = presets.preset("flat-static", nx=32, ny=32, basepoint_i=16, basepoint_j=16, T=0.05,
                        checks=("dalpha", "equality", "kernel_oracle"))
    path = tmp_path / "flat.ini"
    io.write_scenario(sc, path)
    out = tmp_path / "run"
    assert cli.main(["run", str(path), "--out", str(out)]) == cli.EXIT_OK
    assert io.read_scenario(out / "scenario.ini") == sc
    capsys.readouterr()
    assert cli.main(["check", "kernel_oracle", str(out)]) == cli.EXIT_OK
    assert "kernel_oracle  pass" in capsys.readouterr().out
    assert cli.main(["check", "nonsense", str(out)]) == cli.EXIT_CONFIG


def test_cli_flow_then_kernel(tmp_path, capsys):
    out = tmp_path / "flow"
    assert cli.main(["flow", "flat-static", "--grid", "32", "--out", str(out)]) == cli.EXIT_OK
    traj = cli.load_trajectory(out / "trajectory.ckpt")
    assert traj.model.tag == "Static" and traj.chart.nx == 32
    capsys.readouterr()
    assert cli.main(["kernel", str(out / "trajectory.ckpt"), "--at", "3.14159,3.14159"]) == cli.EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert doc["basepoint"] == [16, 16]
    assert doc["mass_drift"] < 1e-6
    assert abs(doc["diagonal_at_start"] - 1.0) < 0.05
    assert cli.main(["kernel", str(out / "trajectory.ckpt"), "--at", "1"]) == cli.EXIT_CONFIG


def test_cli_refine(tmp_path, capsys):
    out = tmp_path / "refine"
    assert cli.main(["run", "ricci-perturbed", "--refine", "2", "--out", str(out)]) == cli.EXIT_OK
    doc = json.loads((out / "refine.json").read_text())
    assert len(doc["h"]) == 2 and doc["identity_order"] > 1.8
    assert "identity residual orders" in capsys.readouterr().out


def test_module_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "flowharnack", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for sub in ("run", "flow", "kernel", "check", "report"):
        assert sub in res.stdout
