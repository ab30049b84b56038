import csv
import io
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from calib_lab import __version__
from calib_lab.cli import main


def run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


# --- verify -----------------------------------------------------------------

def test_verify_hyperbolic_passes(tmp_path, capsys):
    out = tmp_path / "verify.json"
    code, _, _ = run(["verify", "--profile", "hyperbolic", "--k", "2", "--rho0", "1.0",
                      "--out", str(out)], capsys)
    assert code == 0
    rep = json.loads(out.read_text())
    assert rep["version"] == __version__
    assert rep["config"]["k"] == 2 and rep["config"]["seed"] == 0
    assert all(rep[f"condition_{i}"]["pass"] for i in (1, 2, 3))
    assert rep["n_frames"] == 10_000


def test_verify_spherical_out_of_domain(capsys):
    code, _, err = run(["verify", "--profile", "spherical", "--rho0", "2.0"], capsys)
    assert code == 2
    assert "phi' >= 0" in err


def test_verify_table_with_negative_slope(tmp_path, capsys):
    r = np.linspace(0, 3, 30)
    table = tmp_path / "custom.txt"
    np.savetxt(table, np.column_stack([r, np.sin(r)]), header="r phi")
    code, _, err = run(["verify", "--profile", f"table:{table}", "--rho0", "1.0"], capsys)
    assert code == 2
    assert "phi' < 0" in err


def test_verify_table_profile_passes(tmp_path, capsys):
    r = np.linspace(0, 2, 400)
    table = tmp_path / "sinh.txt"
    np.savetxt(table, np.column_stack([r, np.sinh(r)]))
    code, _, _ = run(["verify", "--profile", f"table:{table}", "--frames", "500", "--grid", "50",
                      "--out", str(tmp_path / "v.json")], capsys)
    assert code == 0


def test_verify_failure_exit_code(tmp_path, capsys):
    code, _, err = run(["verify", "--tol-asymptotic", "1e-15", "--frames", "100",
                        "--out", str(tmp_path / "v.json")], capsys)
    assert code == 1
    assert "condition 2" in err and "FAIL" in err


def test_verify_is_reproducible(tmp_path, capsys):
    out = tmp_path / "a.json"
    argv = ["verify", "--k", "3", "--frames", "2000", "--seed", "7", "--out", str(out)]
    run(argv, capsys)
    first = out.read_bytes()
    run(argv, capsys)
    assert out.read_bytes() == first


def test_unknown_profile(capsys):
    code, _, err = run(["verify", "--profile", "toroidal"], capsys)
    assert code == 2 and "toroidal" in err


def test_usage_error_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["verify", "--k", "two"])
    assert exc.value.code == 2


# --- area -------------------------------------------------------------------

def test_area_table(capsys):
    code, out, _ = run(["area", "--profile", "hyperbolic,euclidean", "--k", "1,2",
                        "--rho0", "0.5,1,2"], capsys)
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert list(rows[0]) == ["profile", "k", "rho0", "omega"]
    assert len(rows) == 12
    got = {(r["profile"], int(r["k"]), float(r["rho0"])): float(r["omega"]) for r in rows}
    for rho0 in (0.5, 1.0, 2.0):
        assert got["hyperbolic", 2, rho0] == pytest.approx(2 * math.pi * (math.cosh(rho0) - 1),
                                                           rel=1e-13)
        assert got["euclidean", 2, rho0] == pytest.approx(math.pi * rho0**2, rel=1e-14)
        assert got["hyperbolic", 1, rho0] == pytest.approx(2 * rho0, rel=1e-14)


def test_area_invalid_grid(capsys):
    assert run(["area", "--k", "0"], capsys)[0] == 2
    assert run(["area", "--rho0", "-1"], capsys)[0] == 2


# --- flux -------------------------------------------------------------------

def test_flux_perturbed(tmp_path, capsys):
    out = tmp_path / "flux.json"
    code, _, _ = run(["flux", "--rho0", "1", "--depth", "6", "--perturb", "0.05",
                      "--out", str(out)], capsys)
    assert code == 0
    rep = json.loads(out.read_text())
    assert rep["relative_residual"] < 1e-2
    assert rep["checks"] == {"outer_flux": True, "inner_flux": True, "residual": True}
    assert rep["config"]["epsilon_ladder"] == [1e-2, 5e-3, 2.5e-3]


def test_flux_ladder_too_coarse(capsys):
    code, _, err = run(["flux", "--depth", "4", "--epsilon-ladder", "0.5,0.25"], capsys)
    assert code == 2
    assert "cut radius" in err
    assert run(["flux", "--depth", "4", "--epsilon-ladder", "0.5"], capsys)[0] == 2


def test_flux_failure_names_quantity(capsys):
    code, _, err = run(["flux", "--depth", "3", "--perturb", "0.05", "--tol-residual", "1e-12"],
                       capsys)
    assert code == 1
    assert "residual" in err


def test_flux_euclidean(capsys):
    code, out, _ = run(["flux", "--profile", "euclidean", "--depth", "5", "--perturb", "0.05"],
                       capsys)
    assert code == 0
    assert json.loads(out)["omega"] == pytest.approx(math.pi)


def test_flux_rejects_spherical(capsys):
    assert run(["flux", "--profile", "spherical"], capsys)[0] == 2


# --- minimize ---------------------------------------------------------------

def test_minimize_writes_artifacts(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("CALIB_LAB_THREADS", "1")
    out = tmp_path / "run" / "report.json"
    argv = ["minimize", "--rho0", "1", "--depth", "4", "--perturb", "0.1", "--seeds", "3",
            "--out", str(out)]
    code, _, _ = run(argv, capsys)
    assert code == 0
    rep = json.loads(out.read_text())
    assert len(rep["runs"]) == 3
    for entry in rep["runs"]:
        assert entry["final_area"] >= entry["omega"] * (1 - 5e-3)
        seed = entry["seed"]
        assert (tmp_path / "run" / f"report_seed{seed}_trace.csv").exists()
        assert (tmp_path / "run" / f"report_seed{seed}_mesh.json").exists()
    first = out.read_bytes()
    monkeypatch.setenv("CALIB_LAB_THREADS", "3")
    run(argv, capsys)
    assert out.read_bytes() == first


def test_minimize_sliding_fails_bound(capsys):
    code, out, _ = run(["minimize", "--depth", "4", "--seeds", "1", "--boundary", "slide",
                        "--max-iter", "60"], capsys)
    assert code == 1
    assert json.loads(out)["runs"][0]["area_ok"] is False


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "calib_lab", "--version"], capture_output=True,
                         text=True, check=True)
    assert __version__ in res.stdout
