"""Command line front end.

Subcommands: synth, singular, frobenius, forms, verify.  Every run is driven
by a JSON config (--config PATH) or a built-in example (--example NAME) and
writes plot-ready CSV / JSON artifacts into --out.  All numeric output uses 17
significant digits and fixed row/column order, so reruns are byte-identical.

Exit codes: 0 success, 2 config error, 3 synthesis found no admissible
points, 4 a verification threshold or conservative gate was breached.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import Optional

import numpy as np

from . import config as cfgmod
from . import drive as drivemod
from . import forms as formsmod
from . import frobenius as frobmod
from . import singular as singmod
from . import verify as verifymod
from .config import ConfigError, RunConfig
from .density import DensityError
from .drive import DriveError, coord_names
from .expr import ExpressionError
from .forms import FormError, KForm, multi_indices
from .frobenius import FrobeniusError
from .synth import (
    FieldSolution,
    GridSpec,
    REGIME_NAMES,
    SynthError,
    synthesize,
    synthesize_at_points,
)
from .verify import VerifyError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_EMPTY = 3
EXIT_THRESHOLD = 4

_CONFIG_ERRORS = (ConfigError, DensityError, DriveError, SynthError, ExpressionError, FormError)


def _fmt(x) -> str:
    return "%.17g" % float(x)


def _write_csv(path: str, header: list, columns: list) -> None:
    """Columns are (kind, array) with kind in {float, int, str}."""
    n = len(columns[0][1])
    out = [",".join(header)]
    for i in range(n):
        parts = []
        for kind, col in columns:
            v = col[i]
            if kind == "float":
                parts.append(_fmt(v))
            elif kind == "int":
                parts.append(str(int(v)))
            else:
                parts.append(str(v))
        out.append(",".join(parts))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(out) + "\n")


def _write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _float_cols(arr2d: np.ndarray, names: list) -> list:
    return [("float", arr2d[:, i]) for i in range(len(names))]


# ---------------------------------------------------------------------------
# shared build steps


def _load_config(args) -> RunConfig:
    if args.config and args.example:
        raise ConfigError("pass either --config or --example, not both")
    if args.config:
        return cfgmod.load_config(args.config)
    if args.example:
        return cfgmod.example_config(args.example)
    raise ConfigError("one of --config PATH or --example NAME is required")


def _outdir(args, cfg: RunConfig) -> str:
    out = args.out or cfg.output.get("dir", "out")
    os.makedirs(out, exist_ok=True)
    return out


def _mask_predicate(expr_text: Optional[str], dim: int):
    """Config mask expressions keep points where the value is positive."""
    if not expr_text:
        return None
    from . import expr as exprmod

    e = exprmod.parse(expr_text, coord_names(dim))

    def predicate(points: np.ndarray) -> np.ndarray:
        jets = exprmod.eval_jets(e, points)
        return ~jets.bad & (jets.val > 0.0)

    return predicate


def _synth_solution(cfg: RunConfig, grid: GridSpec, threads: int) -> FieldSolution:
    model = cfgmod.build_model(cfg)
    d = cfgmod.build_drive(cfg)
    if grid.dim != d.dim:
        raise ConfigError(f"grid dimension {grid.dim} != drive dimension {d.dim}")
    policy = cfgmod.build_policy(cfg, grid.dim)
    tol = cfgmod.build_tol(cfg)
    if threads <= 1:
        return synthesize(model, d, policy, grid, tol=tol)
    pts = grid.points()
    blocks = np.array_split(np.arange(pts.shape[0]), threads)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(
            lambda idx: synthesize_at_points(model, d, policy, pts[idx], tol=tol), blocks))
    return FieldSolution(
        grid=grid, model=model, drive=d, policy=policy, tol=tol, points=pts,
        w=np.concatenate([p.w for p in parts], axis=0),
        Q=np.concatenate([p.Q for p in parts]),
        xi=np.concatenate([p.xi for p in parts]),
        regime=np.concatenate([p.regime for p in parts]),
        branch_id=np.concatenate([p.branch_id for p in parts]),
        flags=np.concatenate([p.flags for p in parts]),
    )


def _empty_message(sol: FieldSolution) -> str:
    try:
        rng = drivemod.range_sigma(sol.drive, sol.grid)
        sampled = f"[{rng.lo:.6g}, {rng.hi:.6g}]"
    except DriveError:
        sampled = "(drive undefined at every grid point)"
    images = "; ".join(
        f"branch {b.index} ({b.label}): {b.image}" for b in sol.model.branches())
    return (
        "synthesis produced no admissible points: sampled drive range "
        f"Sigma_f = {sampled} misses every admitted branch image Im(phi): {images}"
    )


def _field_columns(sol: FieldSolution) -> tuple:
    n = sol.points.shape[1]
    names = list(coord_names(n)) + [f"w{i+1}" for i in range(n)] + ["Q", "regime", "branch", "flags"]
    cols = _float_cols(sol.points, coord_names(n))
    cols += [("float", sol.w[:, i]) for i in range(n)]
    cols += [
        ("float", sol.Q),
        ("str", [REGIME_NAMES[r] for r in sol.regime]),
        ("int", sol.branch_id),
        ("int", sol.flags),
    ]
    return names, cols


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    out = _outdir(args, cfg)
    grid = cfgmod.build_grid(cfg)
    sol = _synth_solution(cfg, grid, args.threads)
    if not (sol.branch_id != 0).any():
        print(_empty_message(sol), file=sys.stderr)
        return EXIT_EMPTY
    names, cols = _field_columns(sol)
    _write_csv(os.path.join(out, "field.csv"), names, cols)
    if cfg.output.get("json", False):
        counts = {REGIME_NAMES[k]: int((sol.regime == k).sum()) for k in range(4)}
        _write_json(os.path.join(out, "summary.json"), {
            "points": int(sol.points.shape[0]),
            "defined": int(sol.defined.sum()),
            "regimes": counts,
        })
    return EXIT_OK


def cmd_singular(args) -> int:
    cfg = _load_config(args)
    out = _outdir(args, cfg)
    grid = cfgmod.build_grid(cfg)
    sol = _synth_solution(cfg, grid, args.threads)
    if not (sol.branch_id != 0).any():
        print(_empty_message(sol), file=sys.stderr)
        return EXIT_EMPTY
    report = singmod.classify_solution(sol)
    n = grid.dim
    names = list(coord_names(n)) + ["outside", "gamma0", "gammas", "gammainf", "gammag"]
    cols = _float_cols(sol.points, coord_names(n))
    for mask in (report.omega_f_complement, report.gamma_0, report.gamma_s,
                 report.gamma_inf, report.gamma_g):
        cols.append(("int", mask.reshape(-1).astype(int)))
    _write_csv(os.path.join(out, "masks.csv"), names, cols)
    if n == 2:
        seg_col, x_col, y_col = [], [], []
        for sid, poly in enumerate(report.sonic_contour):
            for x, y in poly:
                seg_col.append(sid)
                x_col.append(x)
                y_col.append(y)
        _write_csv(os.path.join(out, "sonic.csv"),
                   ["segment", "x", "y"],
                   [("int", seg_col), ("float", x_col), ("float", y_col)])
    return EXIT_OK


def _witness_for(cfg: RunConfig, sol: FieldSolution):
    choice = cfg.frobenius.get("witness", "auto")
    d = sol.drive
    if choice == "auto":
        if isinstance(d, drivemod.Scalar2D):
            choice = "2d"
        elif isinstance(d, drivemod.GradientDrive):
            choice = "gradient"
        elif isinstance(d, drivemod.RawField):
            if d.closure_mode == "curl_free":
                choice = "gradient"
            else:
                choice = "2d" if d.dim == 2 else "nd"
        else:
            choice = "nd"
    if choice == "2d":
        return frobmod.witness_2d(sol.model, d, sol)
    if choice == "nd":
        return frobmod.witness_nd(sol.model, d, sol)
    if choice == "gradient":
        return frobmod.witness_gradient(sol.model, d, sol)
    raise ConfigError(f"unknown frobenius.witness {choice!r}")


def cmd_frobenius(args) -> int:
    cfg = _load_config(args)
    out = _outdir(args, cfg)
    grid = cfgmod.build_grid(cfg)
    sol = _synth_solution(cfg, grid, args.threads)
    if not (sol.branch_id != 0).any():
        print(_empty_message(sol), file=sys.stderr)
        return EXIT_EMPTY
    wit = _witness_for(cfg, sol)
    curl = frobmod.curl_residual_grid(wit)
    n = grid.dim
    names = (list(coord_names(n)) + [f"G{i+1}" for i in range(n)]
             + ["defect", "curl_defect"])
    cols = _float_cols(sol.points, coord_names(n))
    cols += [("float", wit.G[:, i]) for i in range(n)]
    cols += [("float", wit.defining_residual), ("float", curl.reshape(-1))]
    _write_csv(os.path.join(out, "witness.csv"), names, cols)

    summary = {
        "kind": wit.kind,
        "max_defining_residual": _nanmax(wit.defining_residual),
        "max_solvability_residual": _nanmax(wit.solvability_residual),
        "max_curl_residual": _nanmax(curl),
    }
    if cfg.frobenius.get("recover_eta", False):
        mask_pred = _mask_predicate(cfg.frobenius.get("mask"), n)
        mask = mask_pred(sol.points).reshape(grid.shape()) if mask_pred else None
        anchor = cfg.frobenius.get("anchor")
        try:
            rec = frobmod.recover_eta(
                wit, anchor=tuple(anchor) if anchor else None, mask=mask,
                tol_conservative=float(cfg.frobenius.get("tol_conservative", 1e-6)))
        except FrobeniusError as exc:
            _write_json(os.path.join(out, "frobenius.json"), summary)
            print(f"eta recovery failed: {exc}", file=sys.stderr)
            return EXIT_THRESHOLD
        eta_names = list(coord_names(n)) + ["eta"]
        eta_cols = _float_cols(sol.points, coord_names(n))
        eta_cols.append(("float", rec.eta.reshape(-1)))
        _write_csv(os.path.join(out, "eta.csv"), eta_names, eta_cols)
        summary["eta"] = {
            "anchor": [float(v) for v in rec.anchor],
            "curl_gate": float(rec.curl_gate),
            "loop_max": float(rec.loop_max),
            "post_residual": float(rec.post_residual),
        }
    _write_json(os.path.join(out, "frobenius.json"), summary)
    return EXIT_OK


def _nanmax(arr) -> Optional[float]:
    arr = np.asarray(arr, dtype=float)
    finite = arr[np.isfinite(arr)]
    return float(finite.max()) if finite.size else None


def _build_form(cfg: RunConfig, dim_hint: Optional[int] = None) -> tuple:
    sec = cfg.forms
    if "n" not in sec or "k" not in sec:
        raise ConfigError("forms.n and forms.k are required")
    n, k = int(sec["n"]), int(sec["k"])
    if dim_hint is not None and n != dim_hint:
        raise ConfigError(f"forms.n = {n} does not match the grid dimension {dim_hint}")
    coeffs = sec.get("coeffs")
    if not isinstance(coeffs, dict) or not coeffs:
        raise ConfigError("forms.coeffs must be a non-empty object of multi-index keys")
    deg = n - k - 1
    parsed = {}
    for key, val in coeffs.items():
        digits = str(key)
        if digits in ("", "0"):
            idx = ()
        else:
            if not digits.isdigit():
                raise ConfigError(f"forms.coeffs key must be digits like '13', got {key!r}")
            idx = tuple(int(c) for c in digits)
        parsed[idx] = val
    try:
        f = KForm(n=n, k=deg, coeffs={
            idx: _parse_coeff(val, n, sec.get("params") or {}) for idx, val in parsed.items()})
    except (FormError, ExpressionError, ValueError) as exc:
        raise ConfigError(f"forms: {exc}") from exc
    return f, k, dict(sec.get("params") or {})


def _parse_coeff(val, n, params):
    from . import expr as exprmod

    if isinstance(val, str):
        return exprmod.parse(val, coord_names(n), tuple(params))
    return exprmod.parse(repr(float(val)), coord_names(n), tuple(params))


def cmd_forms(args) -> int:
    cfg = _load_config(args)
    out = _outdir(args, cfg)
    grid = cfgmod.build_grid(cfg)
    model = cfgmod.build_model(cfg)
    policy = cfgmod.build_policy(cfg, grid.dim)
    tol = cfgmod.build_tol(cfg)
    f, k, params = _build_form(cfg, grid.dim)
    pts = grid.points()
    if cfg.forms.get("closed", False):
        box = cfg.forms.get("box") or (grid.lo, grid.hi)
        fsol = formsmod.synthesize_form_closed(model, f, policy, pts, box, tol=tol, params=params)
    else:
        fsol = formsmod.synthesize_form(model, f, policy, pts, tol=tol, params=params)
    if not (fsol.branch_id != 0).any():
        print("form synthesis produced no admissible points: sampled |df|^2 misses "
              "every admitted branch image Im(phi)", file=sys.stderr)
        return EXIT_EMPTY
    n = grid.dim
    idxs = multi_indices(n, fsol.k)
    names = list(coord_names(n))
    cols = _float_cols(pts, coord_names(n))
    for idx in idxs:
        label = "".join(str(i) for i in idx) or "0"
        names.append(f"omega_{label}")
        cols.append(("float", fsol.omega.coeffs.get(idx, np.zeros(pts.shape[0]))))
    names += ["Q", "regime", "branch", "flags"]
    cols += [
        ("float", fsol.Q),
        ("str", [REGIME_NAMES[r] for r in fsol.regime]),
        ("int", fsol.branch_id),
        ("int", fsol.flags),
    ]
    _write_csv(os.path.join(out, "forms.csv"), names, cols)

    if cfg.forms.get("gamma", False):
        gw = formsmod.gamma_witness(model, f, fsol)
        gnames = list(coord_names(n)) + [f"Gamma{i+1}" for i in range(n)] + [
            "defect", "frobenius_defect"]
        gcols = _float_cols(pts, coord_names(n))
        gcols += [("float", gw.Gamma[:, i]) for i in range(n)]
        gcols += [("float", gw.defect), ("float", gw.frobenius_defect)]
        _write_csv(os.path.join(out, "gamma.csv"), gnames, gcols)
    return EXIT_OK


def _refined(grid: GridSpec, factor: int) -> GridSpec:
    return GridSpec(lo=grid.lo, hi=grid.hi, cells=tuple(c * factor for c in grid.cells))


def cmd_verify(args) -> int:
    cfg = _load_config(args)
    out = _outdir(args, cfg)
    base = cfgmod.build_grid(cfg)
    vs = cfgmod.verify_section(cfg)
    levels = max(1, args.levels)
    grids = [_refined(base, 2 ** i) for i in range(levels)]
    mask_pred = _mask_predicate(vs.get("mask"), base.dim)

    reports = []
    energy_value = None
    sol_cache: dict = {}

    def sol_on(grid: GridSpec) -> FieldSolution:
        if grid.cells not in sol_cache:
            sol_cache[grid.cells] = _synth_solution(cfg, grid, args.threads)
        return sol_cache[grid.cells]

    def extra_bad_on(grid: GridSpec):
        if mask_pred is None:
            return None
        return ~mask_pred(grid.points())

    def make_maker(kind: str):
        def make(grid: GridSpec):
            sol = sol_on(grid)
            if kind == "divergence":
                return verifymod.divergence_residual(sol, extra_bad=extra_bad_on(grid))
            if kind == "minor":
                return verifymod.minor_residual(sol, extra_bad=extra_bad_on(grid))
            if kind == "frobenius":
                wit = _witness_for(cfg, sol)
                return verifymod.frobenius_residual(sol, wit)
            if kind == "exactness":
                wit = _witness_for(cfg, sol)
                mask = None
                fm = _mask_predicate(cfg.frobenius.get("mask"), grid.dim)
                if fm is not None:
                    mask = fm(sol.points).reshape(grid.shape())
                rec = frobmod.recover_eta(
                    wit, mask=mask,
                    tol_conservative=float(cfg.frobenius.get("tol_conservative", 1e-6)))
                return verifymod.exactness_residual(sol, rec.eta, system=wit.kind)
            if kind == "codifferential":
                model = cfgmod.build_model(cfg)
                policy = cfgmod.build_policy(cfg, grid.dim)
                tol = cfgmod.build_tol(cfg)
                f, _, params = _build_form(cfg, grid.dim)
                fsol = formsmod.synthesize_form(model, f, policy, grid.points(),
                                                tol=tol, params=params)
                return verifymod.codifferential_residual(fsol, grid)
            raise ConfigError(f"unknown residual kind {kind!r}")

        return make

    for kind in vs["residuals"]:
        make = make_maker(kind)
        if levels > 1:
            reports.append(verifymod.convergence_study(make, grids))
        else:
            reports.append(make(grids[0]))

    if vs["energy"]:
        sol = sol_on(grids[-1])
        energy_value = verifymod.energy(sol.model, sol, mask=mask_pred)

    threshold = vs["threshold"]
    passed = all(np.isfinite(r.max_norm) and r.max_norm < threshold for r in reports)
    _write_json(os.path.join(out, "report.json"), {
        "reports": [r.to_json_dict() for r in reports],
        "energy": energy_value,
        "threshold": threshold,
        "passed": bool(passed),
    })
    return EXIT_OK if passed else EXIT_THRESHOLD


# ---------------------------------------------------------------------------
# entry point


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="JSON run config")
    p.add_argument("--example", metavar="NAME",
                   help="built-in example name (see README for the list)")
    p.add_argument("--out", metavar="DIR", default=None, help="output directory")
    p.add_argument("--levels", metavar="K", type=int, default=1,
                   help="refinement levels for convergence studies")
    p.add_argument("--threads", metavar="N", type=int, default=1,
                   help="worker threads for point-parallel synthesis")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="streamfields",
        description="synthesize, classify, and verify density-weighted stream fields")
    sub = parser.add_subparsers(dest="command", required=True)
    handlers = {
        "synth": (cmd_synth, "synthesize w on a grid and write field.csv"),
        "singular": (cmd_singular, "write singular-set masks and the sonic contour"),
        "frobenius": (cmd_frobenius, "compute the integrability witness G (and eta)"),
        "forms": (cmd_forms, "synthesize a k-form field and write forms.csv"),
        "verify": (cmd_verify, "finite-difference residual reports and energy"),
    }
    for name, (fn, help_text) in handlers.items():
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        p.set_defaults(handler=fn)
    return parser


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except _CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except VerifyError as exc:
        print(f"verification could not run: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FrobeniusError as exc:
        print(f"integrability check failed: {exc}", file=sys.stderr)
        return EXIT_THRESHOLD


if __name__ == "__main__":
    sys.exit(main())
