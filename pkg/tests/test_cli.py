import copy
import csv
import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from streamfields import GridSpec, config as cfgmod, synthesize
from streamfields.cli import main


def run_cfg(tmp_path, cfg_dict, command="synth", extra=()):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg_dict))
    out = tmp_path / "out"
    code = main([command, "--config", str(path), "--out", str(out), *extra])
    return code, out


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def test_exit_code_on_config_errors(tmp_path, capsys):
    bad_section = {"drv": {"kind": "builtin", "name": "radial_log"}}
    code, _ = run_cfg(tmp_path, bad_section)
    assert code == 2

    bad_key = copy.deepcopy(cfgmod.EXAMPLES["shallow-vortex"])
    bad_key["grid"]["cellz"] = 8
    code, _ = run_cfg(tmp_path, bad_key)
    assert code == 2

    # exactly one of --config / --example
    assert main(["synth", "--out", str(tmp_path / "o")]) == 2
    assert main(["synth", "--config", "a.json", "--example", "shallow-vortex",
                 "--out", str(tmp_path / "o")]) == 2
    assert main(["synth", "--example", "no-such-example",
                 "--out", str(tmp_path / "o")]) == 2
    capsys.readouterr()


def test_exit_code_on_empty_image(tmp_path, capsys):
    cfg = {
        "density": {"kind": "extremal"},
        "drive": {"kind": "builtin", "name": "radial_log"},
        "grid": {"lo": [3.0, 3.0], "hi": [4.0, 4.0], "cells": [8, 8]},
        "policy": {"mode": "single_branch", "branch": 2},
    }
    code, out = run_cfg(tmp_path, cfg)
    assert code == 3
    err = capsys.readouterr().err
    assert "Sigma_f" in err and "Im(phi)" in err
    assert not (out / "field.csv").exists()


def test_field_csv_schema_and_exact_roundtrip(tmp_path):
    out = tmp_path / "out"
    assert main(["synth", "--example", "unit-density", "--out", str(out)]) == 0
    header, rows = read_csv(out / "field.csv")
    assert header == ["x1", "x2", "w1", "w2", "Q", "regime", "branch", "flags"]

    cfg = cfgmod.example_config("unit-density")
    grid = cfgmod.build_grid(cfg)
    sol = synthesize(cfgmod.build_model(cfg), cfgmod.build_drive(cfg),
                     cfgmod.build_policy(cfg, grid.dim), grid,
                     tol=cfgmod.build_tol(cfg))
    assert len(rows) == grid.npoints()
    got_pts = np.array([[float(r[0]), float(r[1])] for r in rows])
    got_w = np.array([[float(r[2]), float(r[3])] for r in rows])
    # %.17g round-trips float64 exactly
    assert np.array_equal(got_pts, sol.points)
    assert np.array_equal(got_w, sol.w)
    assert {r[5] for r in rows} <= {"undefined", "elliptic", "hyperbolic", "sonic"}
    assert all(r[6].lstrip("-").isdigit() and r[7].isdigit() for r in rows)


def test_summary_json_when_enabled(tmp_path):
    cfg = copy.deepcopy(cfgmod.EXAMPLES["unit-density"])
    cfg.setdefault("output", {})["json"] = True
    code, out = run_cfg(tmp_path, cfg)
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["points"] == 17 * 17
    assert summary["defined"] == summary["points"]
    assert summary["regimes"]["elliptic"] == summary["points"]


def test_rerun_and_threads_are_byte_identical(tmp_path):
    outs = []
    for sub, extra in (("a", ()), ("b", ()), ("c", ("--threads", "4"))):
        out = tmp_path / sub
        assert main(["synth", "--example", "shallow-vortex", "--out", str(out),
                     *extra]) == 0
        outs.append((out / "field.csv").read_bytes())
    assert outs[0] == outs[1] == outs[2]


def test_every_builtin_example_synthesizes(tmp_path):
    for name in cfgmod.EXAMPLES:
        out = tmp_path / name
        assert main(["synth", "--example", name, "--out", str(out)]) == 0, name
        header, rows = read_csv(out / "field.csv")
        assert len(rows) > 0, name


def test_singular_artifacts(tmp_path):
    # widen the sonic tolerance so the band around the fold picks up nodes
    cfg = copy.deepcopy(cfgmod.EXAMPLES["shallow-vortex"])
    cfg.setdefault("tol", {})["eps_phi_prime"] = 0.05
    code, out = run_cfg(tmp_path, cfg, command="singular")
    assert code == 0
    header, rows = read_csv(out / "masks.csv")
    assert header == ["x1", "x2", "outside", "gamma0", "gammas", "gammainf", "gammag"]
    vals = np.array([[int(v) for v in r[2:]] for r in rows])
    assert set(np.unique(vals)) <= {0, 1}
    assert vals[:, 2].sum() > 0  # sonic band near the fold circle

    header, rows = read_csv(out / "sonic.csv")
    assert header == ["segment", "x", "y"]
    assert len(rows) > 10
    xy = np.array([[float(r[1]), float(r[2])] for r in rows])
    assert np.abs(xy).max() <= 1.1 + 1e-9


def test_frobenius_artifacts_with_eta(tmp_path):
    cfg = copy.deepcopy(cfgmod.EXAMPLES["shallow-annulus-eta"])
    cfg["grid"]["cells"] = [96, 96]
    code, out = run_cfg(tmp_path, cfg, command="frobenius")
    assert code == 0
    header, rows = read_csv(out / "witness.csv")
    assert header == ["x1", "x2", "G1", "G2", "defect", "curl_defect"]

    header, rows = read_csv(out / "eta.csv")
    assert header == ["x1", "x2", "eta"]
    data = np.array([[float(v) for v in r] for r in rows])
    keep = np.isfinite(data[:, 2])
    # eta = log(x^2 + y^2) up to the anchor constant on the annulus
    t = data[keep, 0] ** 2 + data[keep, 1] ** 2
    dev = data[keep, 2] - np.log(t)
    assert dev.max() - dev.min() < 1e-6

    summary = json.loads((out / "frobenius.json").read_text())
    assert summary["kind"] == "minor"
    # the unmasked grid-wide curl maximum blows up near the singular circles;
    # the gated (annulus-masked) value is the meaningful one
    assert summary["max_curl_residual"] > 1.0
    eta = summary["eta"]
    assert eta["curl_gate"] < 1e-6
    assert eta["loop_max"] < 1e-5
    assert eta["post_residual"] < 1e-4


def test_forms_artifacts(tmp_path):
    out = tmp_path / "out"
    assert main(["forms", "--example", "form-21", "--out", str(out)]) == 0
    header, rows = read_csv(out / "forms.csv")
    assert header == ["x1", "x2", "omega_1", "omega_2", "Q", "regime", "branch", "flags"]

    header, rows = read_csv(out / "gamma.csv")
    assert header == ["x1", "x2", "Gamma1", "Gamma2", "defect", "frobenius_defect"]
    defect = np.array([float(r[4]) for r in rows])
    fdef = np.array([float(r[5]) for r in rows])
    assert np.nanmax(defect) < 1e-8
    assert np.nanmax(fdef) < 1e-8


def test_verify_report_pass_and_threshold_fail(tmp_path):
    out = tmp_path / "ok"
    assert main(["verify", "--example", "unit-density", "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["passed"] is True
    assert abs(report["energy"] - 0.5) < 1e-12
    assert report["reports"][0]["kind"] == "MinorSystemOfRhoW"
    assert report["reports"][0]["max_norm"] == 0.0

    cfg = copy.deepcopy(cfgmod.EXAMPLES["shallow-vortex"])
    cfg.setdefault("verify", {})["threshold"] = 1e-20
    code, out = run_cfg(tmp_path, cfg, command="verify")
    assert code == 4
    report = json.loads((out / "report.json").read_text())
    assert report["passed"] is False


def test_verify_convergence_levels(tmp_path):
    out = tmp_path / "out"
    assert main(["verify", "--example", "extremal-patching-study", "--out", str(out),
                 "--levels", "3"]) == 0
    report = json.loads((out / "report.json").read_text())
    assert 1.7 < report["reports"][0]["order"] < 2.2


def test_command_line_entry_points(tmp_path):
    out = tmp_path / "out"
    proc = subprocess.run(
        [sys.executable, "-m", "streamfields.cli", "synth",
         "--example", "unit-density", "--out", str(out)],
        capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (out / "field.csv").exists()

    exe = shutil.which("streamfields")
    if exe:
        proc = subprocess.run([exe, "--help"], capture_output=True, text=True)
        assert proc.returncode == 0
        assert "synth" in proc.stdout
