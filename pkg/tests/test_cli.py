import json
import os

import numpy as np
import pytest

from thinfb.cli import EXIT_FAIL, EXIT_NONCONV, EXIT_OK, EXIT_USAGE, main
from thinfb.config import ConfigError, RunConfig, parse_override, parse_point
from thinfb.presets import preset_names
from thinfb.solver import read_snapshot, residual_check


def run(tmp_path, *argv):
    return main(list(argv) + ["--out", str(tmp_path)])


def read_csv(path):
    rows = [ln for ln in open(path).read().splitlines() if not ln.startswith("#")]
    header = rows[0].split(",")
    return [dict(zip(header, r.split(","))) for r in rows[1:]]


def records(path):
    out = []
    for ln in open(path).read().splitlines():
        if ln and not ln.startswith("#"):
            out.append(dict(kv.split("=", 1) for kv in ln.split(" ")))
    return out


@pytest.fixture(scope="module")
def p2_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("p2")
    assert run(d, "solve", "--preset", "p2-singular") == EXIT_OK
    return d


@pytest.fixture(scope="module")
def regular_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("regular")
    assert run(d, "solve", "--preset", "regular-a0") == EXIT_OK
    return d


class TestConfig:
    def test_layers(self, tmp_path):
        cfgfile = tmp_path / "c.ini"
        cfgfile.write_text("[run]\npreset = p2-singular\n[grid]\nnx = 17\n")
        cfg = RunConfig.resolve(str(cfgfile), None, ["grid.nx=9"])
        assert cfg.preset == "p2-singular" and cfg.grid.nx == 9
        assert cfg.grid.nt == 256  # preset default survives
        assert cfg.name == "p2-singular"

    def test_echo_has_every_key(self):
        text = RunConfig.resolve(None, "zero", []).echo()
        for section in ("run", "grid", "solver", "functional", "classify", "reduce", "selftest"):
            assert f"[{section}]" in text
        assert "psor_tol = 1e-10" in text

    @pytest.mark.parametrize("ovr", ["grid.nz=3", "mesh.nx=3", "run.a=1.5", "solver.psor_tol=0", "nodot"])
    def test_rejections(self, ovr):
        with pytest.raises(ConfigError):
            RunConfig.resolve(None, "zero", [ovr])

    def test_parse_helpers(self):
        assert parse_override("grid.nx = 17") == ("grid", "nx", "17")
        assert parse_point("0.25:-0.5", 1) == ((0.25,), -0.5)
        assert parse_point("0,0.5:0", 2) == ((0.0, 0.5), 0.0)

    def test_presets_registered(self):
        assert {"zero", "p2-singular", "time-like", "regular-a0", "manufactured", "sine-obstacle"} <= set(preset_names())


class TestSelftest:
    def test_default_passes(self, tmp_path, capsys):
        assert run(tmp_path, "selftest") == EXIT_OK
        out = capsys.readouterr().out
        strip = [ln for ln in out.splitlines() if "strip_mass:" in ln][0]
        assert float(strip.split("defect=")[1].split()[0]) < 1e-4
        assert "FAIL" not in out

    def test_starved_quadrature_fails(self, tmp_path, capsys):
        code = run(tmp_path, "selftest", "--override", "functional.hermite_nodes=2",
                   "--override", "functional.laguerre_nodes=2")
        assert code == EXIT_FAIL
        assert "FAIL" in capsys.readouterr().out

    def test_bad_weight_rejected(self, tmp_path, capsys):
        assert run(tmp_path, "selftest", "--override", "run.a=1.5") == EXIT_USAGE
        assert not os.listdir(tmp_path)

    def test_usage_errors(self, tmp_path):
        assert main(["frobnicate"]) == EXIT_USAGE
        assert run(tmp_path, "solve", "--preset", "nope") == EXIT_USAGE


class TestSolve:
    def test_p2_snapshot(self, p2_dir):
        U = read_snapshot(str(p2_dir / "p2-singular.snap"))
        rc = residual_check(U, None, lambda x, t: np.zeros(np.shape(x)[:-1]))
        assert rc.passed(1e-8)
        assert float(U.meta["exact.max_error"]) < 1e-9
        assert U.meta["config.run.preset"] == "p2-singular"

    def test_regular_contact_fraction(self, regular_dir):
        U = read_snapshot(str(regular_dir / "regular-a0.snap"))
        assert abs(float(U.meta["contact_fraction"]) - 0.5) < 0.01

    def test_zero(self, tmp_path):
        assert run(tmp_path, "solve", "--preset", "zero") == EXIT_OK
        U = read_snapshot(str(tmp_path / "zero.snap"))
        assert np.all(U.values == 0)

    def test_nonconvergence(self, tmp_path, capsys):
        code = run(tmp_path, "solve", "--preset", "sine-obstacle", "--override", "solver.psor_max_iters=1",
                   "--override", "grid.nt=4")
        assert code == EXIT_NONCONV
        dump = (tmp_path / "sine-obstacle.nonconvergence.txt").read_text()
        assert "residual = " in dump and "[solver]" in dump


class TestFunctionals:
    def test_p2(self, p2_dir):
        snap = str(p2_dir / "p2-singular.snap")
        assert run(p2_dir, "functionals", "--preset", "p2-singular", "--snapshot", snap) == EXIT_OK
        path = p2_dir / "p2-singular.functionals.csv"
        text = path.read_text()
        assert "r,H,D,I,N,Ntilde,Phi,W,M,trunc_err" in text and "# [grid]" in text
        rows = read_csv(path)
        assert len(rows) == 9
        assert all(abs(float(r["N"]) - 2) < 1e-3 for r in rows)
        assert all(r["trunc_err"] != "" for r in rows)

    def test_regular(self, regular_dir):
        snap = str(regular_dir / "regular-a0.snap")
        assert run(regular_dir, "functionals", "--preset", "regular-a0", "--snapshot", snap) == EXIT_OK
        rows = read_csv(regular_dir / "regular-a0.functionals.csv")
        N = [float(r["N"]) for r in rows]
        assert abs(N[-1] - 1.5) < 0.02

    def test_zero_has_empty_frequencies(self, tmp_path):
        assert run(tmp_path, "functionals", "--preset", "zero") == EXIT_OK
        rows = read_csv(tmp_path / "zero.functionals.csv")
        assert rows and all(r["N"] == "" and r["Ntilde"] == "" for r in rows)

    def test_snapshot_grid_mismatch(self, p2_dir):
        snap = str(p2_dir / "p2-singular.snap")
        assert run(p2_dir, "functionals", "--preset", "p2-singular", "--snapshot", snap,
                   "--override", "grid.nx=33") == EXIT_USAGE

    def test_deterministic(self, p2_dir, tmp_path):
        snap = str(p2_dir / "p2-singular.snap")
        outs = []
        for _ in range(2):
            assert run(tmp_path, "functionals", "--preset", "p2-singular", "--snapshot", snap) == EXIT_OK
            outs.append((tmp_path / "p2-singular.functionals.csv").read_bytes())
        assert outs[0] == outs[1]


class TestClassify:
    def test_p2(self, p2_dir):
        snap = str(p2_dir / "p2-singular.snap")
        assert run(p2_dir, "classify", "--preset", "p2-singular", "--snapshot", snap) == EXIT_OK
        recs = records(p2_dir / "p2-singular.records.txt")
        assert len(recs) == 1
        r = recs[0]
        assert r["label"] == "singular" and r["kappa_class"] == "2" and r["d_kappa"] == "0"
        strata = json.loads((p2_dir / "p2-singular.strata.json").read_text())
        assert strata == [{"count": 1, "d": 0, "kappa": 2, "kind": "space-like", "points": [[[0.0], 0.0]]}]

    def test_regular_at_origin(self, regular_dir):
        snap = str(regular_dir / "regular-a0.snap")
        code = run(regular_dir, "classify", "--preset", "regular-a0", "--snapshot", snap,
                   "--override", "classify.points=0:0")
        assert code == EXIT_OK
        (r,) = records(regular_dir / "regular-a0.records.txt")
        assert r["label"] == "regular" and abs(float(r["kappa_hat"]) - 1.5) < 0.05

    def test_no_free_boundary(self, tmp_path):
        assert run(tmp_path, "classify", "--preset", "zero", "--override", "classify.points=final") == EXIT_OK
        text = (tmp_path / "zero.records.txt").read_text()
        assert records(tmp_path / "zero.records.txt") == []
        assert text.startswith("# thinfb classify")


class TestReduce:
    def test_sine(self, tmp_path):
        assert run(tmp_path, "reduce", "--preset", "sine-obstacle") == EXIT_OK
        kv = dict(ln.split(" = ", 1) for ln in (tmp_path / "sine-obstacle.reduce.txt").read_text().splitlines()
                  if " = " in ln and not ln.startswith("["))
        assert kv["k"] == "3" and kv["gamma_mismatch"] == "0"
        assert np.isfinite(float(kv["M_value"])) and np.isfinite(float(kv["M_gradient"]))
        assert (tmp_path / "sine-obstacle.reduced.snap").exists()

    def test_auto_k_needs_order(self, tmp_path):
        code = run(tmp_path, "reduce", "--preset", "sine-obstacle", "--override", "run.obstacle=quadratic",
                   "--override", "grid.nt=8")
        assert code == EXIT_USAGE
