import json
import subprocess
import sys

import pytest
from hypothesis import given, settings, strategies as st

from truncprod.cli import COMMANDS, EXIT_CONFIG, EXIT_CONVERGENCE, EXIT_DOMAIN, RunConfig, build_parser, main
from truncprod.errors import ConfigError
from truncprod.io import read_csv

finite = st.floats(-1e6, 1e6, allow_nan=False)
ints = st.integers(1, 50)


@st.composite
def configs(draw):
    lo = draw(st.floats(-4, 3.9))
    vals = dict(
        command=draw(st.sampled_from(COMMANDS)),
        n=draw(st.none() | ints), M=draw(st.none() | ints),
        v=tuple(draw(st.lists(st.integers(0, 9), max_size=4))),
        m=tuple(draw(st.lists(ints, max_size=4))),
        a=draw(st.none() | st.floats(0.01, 10)),
        regime=draw(st.none() | st.sampled_from(["normality", "crit_bulk", "gue_edge"])),
        k=draw(st.none() | ints), u=draw(st.none() | st.floats(0.01, 0.99)),
        theta=draw(st.none() | finite), gamma=draw(st.none() | st.floats(0.01, 9)),
        limit=draw(st.none() | st.sampled_from(["airy", "sine", "crit_edge"])),
        grid_min=lo, grid_max=draw(st.floats(lo + 0.01, 4)), grid_points=draw(ints),
        quadrature=tuple(sorted(draw(st.dictionaries(
            st.sampled_from(["base_nodes", "rel_tol", "vertex_mode"]), st.just(None))).keys())),
        seed=draw(st.integers(0, 2**64 - 1)), draws=draw(ints), bins=draw(ints),
        threads=draw(st.none() | ints), out=draw(st.none() | st.from_regex(r"[a-z][a-z0-9_/]{0,12}", fullmatch=True)),
        sweep_M=tuple(draw(st.lists(ints, min_size=1, max_size=4))),
        sweep_kind=draw(st.sampled_from(["crit_edge", "crit_bulk"])),
    )
    quad = {"base_nodes": draw(st.integers(8, 400)), "rel_tol": draw(st.floats(1e-14, 1e-3)),
            "vertex_mode": "fixed"}
    vals["quadrature"] = tuple((k, quad[k]) for k in vals["quadrature"])
    return RunConfig(**vals)


@settings(max_examples=80)
@given(configs())
def test_ini_round_trip(cfg):
    assert RunConfig.from_ini(cfg.to_ini()) == cfg


def test_unknown_keys_and_bad_values():
    with pytest.raises(ConfigError):
        RunConfig.from_ini("[model]\nfoo = 1\n")
    with pytest.raises(ConfigError):
        RunConfig.from_ini("[model]\nn = two\n")
    with pytest.raises(ConfigError):
        RunConfig.from_ini("[quadrature]\nbase_nodes = 9.5\n")
    with pytest.raises(ConfigError):
        RunConfig.from_ini("not an ini")
    with pytest.raises(ConfigError):
        RunConfig(grid_min=1, grid_max=0).validate()


def test_help_lists_commands(capsys):
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(["--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    assert all(c in text for c in COMMANDS)


def test_unknown_flag_exit_code():
    r = subprocess.run([sys.executable, "-m", "truncprod", "params", "--bogus"], capture_output=True)
    assert r.returncode == EXIT_CONFIG
    with pytest.raises(SystemExit) as exc:
        main(["nosuchcommand"])
    assert exc.value.code == EXIT_CONFIG


def test_exit_codes(tmp_path, capsys):
    out = str(tmp_path)
    assert main(["params", "--set", "model.n=1"]) == EXIT_CONFIG
    assert main(["params", "--config", str(tmp_path / "missing.ini")]) == EXIT_CONFIG
    # no root of the edge equation
    assert main(["params", "--set", "model.n=3", "--set", "model.M=1", "--set", "model.m=3"]) == EXIT_DOMAIN
    assert main(["kernel", "--out", out, "--set", "model.n=1", "--set", "model.M=1", "--set", "model.m=3",
                 "--set", "grid.min=0.2", "--set", "grid.max=1.5"]) == EXIT_DOMAIN
    assert main(["kernel", "--out", out, "--set", "model.n=2", "--set", "model.M=1", "--set", "model.m=6",
                 "--set", "grid.min=0.2", "--set", "grid.max=0.5", "--set", "grid.points=2",
                 "--set", "quadrature.max_doublings=1", "--set", "quadrature.base_nodes=8",
                 "--set", "quadrature.method=contour", "--tol", "1e-15"]) == EXIT_CONVERGENCE


def test_params_examples(capsys):
    assert main(["params", "--set", "model.n=1", "--set", "model.M=1", "--set", "model.m=3"]) == 0
    line = capsys.readouterr().out.strip().splitlines()[-1]
    p = json.loads(line)["parameters"]
    assert p["z0"] == pytest.approx(3, abs=1e-12)
    assert p["lambda_M"] == pytest.approx(8 / 9, abs=1e-12)
    assert p["rho_edge"] == pytest.approx(144 ** (1 / 3), abs=1e-10)


def test_config_file_and_override(tmp_path, capsys):
    ini = tmp_path / "run.ini"
    ini.write_text(RunConfig(n=1, M=1, m=(3,), limit="airy", grid_min=-2, grid_max=2, grid_points=5).to_ini())
    out = tmp_path / "o"
    assert main(["limit", "--config", str(ini), "--out", str(out)]) == 0
    header, rows = read_csv(out / "limit.csv")
    assert header == ["xi", "eta", "value"] and len(rows) == 25
    centre = [r for r in rows if float(r[0]) == 0 and float(r[1]) == 0][0]
    assert float(centre[2]) == pytest.approx(0.0669875, abs=1e-6)
    sidecar = json.loads((out / "limit.json").read_text())
    assert RunConfig.from_ini(sidecar["config_ini"]).grid_points == 5
    # command line wins over the file
    assert main(["limit", "--config", str(ini), "--out", str(out), "--set", "grid.points=2"]) == 0
    assert len(read_csv(out / "limit.csv")[1]) == 4


def _run_twice(tmp_path, argv, name):
    blobs = []
    for tag in ("a", "b"):
        assert main(argv + ["--out", str(tmp_path / tag)]) == 0
        blobs.append((tmp_path / tag / name).read_bytes())
    return blobs


def test_sample_reproducible(tmp_path):
    argv = ["sample", "--seed", "7", "--set", "model.n=3", "--set", "model.M=2", "--set", "model.m=6",
            "--set", "run.draws=40"]
    a, b = _run_twice(tmp_path, argv, "sample.csv")
    assert a == b
    assert a.splitlines()[0] == b"draw,index,value"
    assert len(a.splitlines()) == 1 + 40 * 3
    assert b"\r" not in a
    assert main(argv + ["--threads", "1", "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c" / "sample.csv").read_bytes() == a


def test_compare_schema_and_reproducible(tmp_path, capsys):
    argv = ["compare", "--set", "model.n=2", "--set", "model.M=2", "--set", "model.m=6",
            "--set", "regime.kind=crit_edge", "--set", "grid.min=-0.5", "--set", "grid.max=0",
            "--set", "grid.points=2"]
    a, b = _run_twice(tmp_path, argv, "compare.csv")
    assert a == b
    header, rows = read_csv(tmp_path / "a" / "compare.csv")
    assert header == ["xi", "eta", "finite", "limit"] and len(rows) == 4
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert set(summary) == {"sup_distance", "diag_rel_distance", "det_rel_distance"}


def test_kernel_command(tmp_path):
    argv = ["kernel", "--set", "model.n=1", "--set", "model.M=1", "--set", "model.m=3",
            "--set", "grid.min=0.25", "--set", "grid.max=0.75", "--set", "grid.points=2", "--tol", "1e-10"]
    a, b = _run_twice(tmp_path, argv, "kernel.csv")
    assert a == b
    header, rows = read_csv(tmp_path / "a" / "kernel.csv")
    assert header == ["xi", "eta", "value", "est_error", "method"]
    assert float(rows[0][2]) == pytest.approx(2 * 0.75, abs=1e-8)
