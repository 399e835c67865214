"""Finite-difference residuals, convergence fits, and energy quadrature.

All residuals use second-order central differences on the uniform grid; nodes
without a full stencil of clean neighbors are masked, never one-sided.  The
mask is exactly the union of singular flags (nonphysical-branch markers are
informational, not singular) dilated by one stencil width, plus the boundary.
Reductions are numpy sums in fixed index order, so reports are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .density import DensityModel
from .forms import (FormSolution, FormValues, codifferential_sign, hodge_star,
                    insert_sign, multi_indices)
from .frobenius import FrobeniusWitness
from .synth import (FLAG_NONPHYSICAL_RHO, FieldSolution, GridSpec,
                    synthesize_at_points)


class VerifyError(ValueError):
    pass


MASK_BITS = ~FLAG_NONPHYSICAL_RHO  # every flag except the physicality marker


@dataclass
class ResidualReport:
    kind: str
    h: float
    max_norm: float
    l2_norm: float
    masked_fraction: float
    convergence: Optional[list] = None  # [(h, max_norm), ...] coarse to fine
    order: Optional[float] = None
    at_floor: bool = False

    def to_json_dict(self) -> dict:
        return {
            "kind": self.kind,
            "h": self.h,
            "max_norm": self.max_norm,
            "l2_norm": self.l2_norm,
            "masked_fraction": self.masked_fraction,
            "order": self.order,
        }


def _dilate(mask: np.ndarray, width: int = 1) -> np.ndarray:
    """Grow the excluded set by `width` nodes along each axis."""
    out = mask.copy()
    for axis in range(mask.ndim):
        for step in range(1, width + 1):
            for sgn in (1, -1):
                rolled = np.roll(mask, sgn * step, axis=axis)
                sl = [slice(None)] * mask.ndim
                sl[axis] = slice(0, step) if sgn > 0 else slice(-step, None)
                rolled[tuple(sl)] = False
                out |= rolled
    return out


def _border(shape, width: int = 1) -> np.ndarray:
    out = np.zeros(shape, dtype=bool)
    for axis in range(len(shape)):
        sl = [slice(None)] * len(shape)
        sl[axis] = slice(0, width)
        out[tuple(sl)] = True
        sl[axis] = slice(-width, None)
        out[tuple(sl)] = True
    return out


def _excluded(solution: FieldSolution, grid: GridSpec, extra_bad: Optional[np.ndarray] = None) -> np.ndarray:
    shape = grid.shape()
    flagged = (solution.flags & MASK_BITS) != 0
    bad = flagged | ~solution.defined
    if extra_bad is not None:
        bad = bad | extra_bad
    return _dilate(bad.reshape(shape), 1) | _border(shape, 1)


def _central(fieldvals: np.ndarray, axis: int, h: float) -> np.ndarray:
    out = np.full_like(fieldvals, np.nan)
    sl_p = [slice(None)] * fieldvals.ndim
    sl_m = [slice(None)] * fieldvals.ndim
    sl_c = [slice(None)] * fieldvals.ndim
    sl_p[axis] = slice(2, None)
    sl_m[axis] = slice(0, -2)
    sl_c[axis] = slice(1, -1)
    out[tuple(sl_c)] = (fieldvals[tuple(sl_p)] - fieldvals[tuple(sl_m)]) / (2.0 * h)
    return out


def _report(kind: str, grid: GridSpec, residual: np.ndarray, excluded: np.ndarray) -> ResidualReport:
    keep = ~excluded & np.isfinite(residual)
    n_keep = int(keep.sum())
    if n_keep < 3:
        raise VerifyError(f"{kind}: fewer than 3 unmasked interior points")
    vals = residual[keep]
    return ResidualReport(
        kind=kind,
        h=float(np.max(grid.spacing())),
        max_norm=float(np.abs(vals).max()),
        l2_norm=float(np.sqrt(np.mean(vals ** 2))),
        masked_fraction=float(1.0 - n_keep / residual.size),
    )


def _grid_of(solution: FieldSolution, grid: Optional[GridSpec]) -> GridSpec:
    grid = grid or solution.grid
    if grid is None:
        raise VerifyError("solution is not grid-backed")
    return grid


def divergence_residual(solution: FieldSolution, model: Optional[DensityModel] = None,
                        grid: Optional[GridSpec] = None,
                        extra_bad: Optional[np.ndarray] = None) -> ResidualReport:
    """Central-difference divergence of rho(Q) w."""
    model = model or solution.model
    grid = _grid_of(solution, grid)
    shape = grid.shape()
    h = grid.spacing()
    n = grid.dim
    with np.errstate(all="ignore"):
        u = model.rho(solution.Q)[:, None] * solution.w
    div = np.zeros(shape)
    for i in range(n):
        div = div + _central(u[:, i].reshape(shape), i, h[i])
    return _report("DivergenceOfRhoW", grid, div, _excluded(solution, grid, extra_bad))


def minor_residual(solution: FieldSolution, model: Optional[DensityModel] = None,
                   grid: Optional[GridSpec] = None,
                   extra_bad: Optional[np.ndarray] = None) -> ResidualReport:
    """Max 2x2 minor |d_i(rho w_j) - d_j(rho w_i)| by central differences."""
    model = model or solution.model
    grid = _grid_of(solution, grid)
    shape = grid.shape()
    h = grid.spacing()
    n = grid.dim
    with np.errstate(all="ignore"):
        u = model.rho(solution.Q)[:, None] * solution.w
    comps = [u[:, i].reshape(shape) for i in range(n)]
    worst = np.zeros(shape)
    for i in range(n):
        for j in range(i + 1, n):
            mij = _central(comps[j], i, h[i]) - _central(comps[i], j, h[j])
            worst = np.maximum(worst, np.abs(mij))
    return _report("MinorSystemOfRhoW", grid, worst, _excluded(solution, grid, extra_bad))


def frobenius_residual(solution: FieldSolution, witness: FrobeniusWitness,
                       grid: Optional[GridSpec] = None) -> ResidualReport:
    """Frobenius defect with finite-difference derivatives of w and the
    witness's G: minor systems compare curls, divergence systems divergences."""
    grid = _grid_of(solution, grid)
    shape = grid.shape()
    h = grid.spacing()
    n = grid.dim
    if witness.G.shape[0] != solution.points.shape[0]:
        raise VerifyError("witness and solution are not aligned on the same points")
    comps = [solution.w[:, i].reshape(shape) for i in range(n)]
    G = witness.G
    w = solution.w
    with np.errstate(all="ignore"):
        if witness.kind == "minor":
            worst = np.zeros(shape)
            for i in range(n):
                for j in range(i + 1, n):
                    lhs = _central(comps[j], i, h[i]) - _central(comps[i], j, h[j])
                    rhs = (G[:, i] * w[:, j] - G[:, j] * w[:, i]).reshape(shape)
                    worst = np.maximum(worst, np.abs(lhs - rhs))
        else:
            div = np.zeros(shape)
            for i in range(n):
                div = div + _central(comps[i], i, h[i])
            worst = np.abs(div - np.einsum("ni,ni->n", G, w).reshape(shape))
    excluded = _excluded(solution, grid, extra_bad=~witness.defined)
    return _report("FrobeniusDefect", grid, worst, excluded)


def exactness_residual(solution: FieldSolution, eta: np.ndarray,
                       system: str = "minor", grid: Optional[GridSpec] = None) -> ResidualReport:
    """Closure of the rescaled field: curl of e^(-eta) w for minor systems,
    divergence of e^(-eta) w for divergence systems."""
    grid = _grid_of(solution, grid)
    shape = grid.shape()
    h = grid.spacing()
    n = grid.dim
    eta = np.asarray(eta, dtype=float).reshape(shape)
    with np.errstate(all="ignore"):
        scale = np.exp(-eta)
        comps = [solution.w[:, i].reshape(shape) * scale for i in range(n)]
        if system == "minor":
            worst = np.zeros(shape)
            for i in range(n):
                for j in range(i + 1, n):
                    worst = np.maximum(worst, np.abs(
                        _central(comps[j], i, h[i]) - _central(comps[i], j, h[j])))
        elif system == "divergence":
            worst = np.zeros(shape)
            for i in range(n):
                worst = worst + _central(comps[i], i, h[i])
            worst = np.abs(worst)
        else:
            raise VerifyError(f"unknown system kind {system!r}")
    excluded = _excluded(solution, grid, extra_bad=~np.isfinite(eta).reshape(-1))
    return _report("ExactnessDefect", grid, worst, excluded)


def codifferential_residual(fsol: FormSolution, grid: GridSpec) -> ResidualReport:
    """Finite-difference codifferential of rho(Q) omega, coefficientwise."""
    shape = grid.shape()
    h = grid.spacing()
    n, k = fsol.n, fsol.k
    if k < 1:
        raise VerifyError("codifferential residual needs k >= 1")
    with np.errstate(all="ignore"):
        coeffs = {key: fsol.rho_c * vals for key, vals in fsol.omega.coeffs.items()}
    # delta = sign * (star d star); d by central differences on each coefficient
    starred = hodge_star(FormValues(n=n, k=k, coeffs=coeffs, grads=None, bad=fsol.omega.bad))
    d_coeffs = {key: np.zeros(shape) for key in multi_indices(n, n - k + 1)}
    for key, vals in starred.coeffs.items():
        v = vals.reshape(shape)
        for i in range(1, n + 1):
            new, sgn = insert_sign(i, key)
            if sgn:
                d_coeffs[new] = d_coeffs[new] + sgn * _central(v, i - 1, h[i - 1])
    dsf = FormValues(n=n, k=n - k + 1,
                     coeffs={key: vals.reshape(-1) for key, vals in d_coeffs.items()},
                     grads=None, bad=fsol.omega.bad)
    result = hodge_star(dsf)
    sgn = codifferential_sign(n, k)
    worst = np.zeros(shape)
    for key, vals in result.coeffs.items():
        worst = np.maximum(worst, np.abs(sgn * vals.reshape(shape)))
    flagged = (fsol.flags & MASK_BITS) != 0
    excluded = _dilate((flagged | ~fsol.defined).reshape(shape), 1) | _border(shape, 1)
    return _report("CodifferentialDefect", grid, worst, excluded)


# ---------------------------------------------------------------------------
# convergence studies

FLOOR = 1e-11  # below this the scheme error has hit rounding; no order is fit


def fit_order(levels: Sequence[tuple]) -> tuple:
    """Least-squares slope of log max_norm against log h; (order, at_floor)."""
    hs = np.array([lv[0] for lv in levels], dtype=float)
    ms = np.array([lv[1] for lv in levels], dtype=float)
    if len(levels) < 3:
        raise VerifyError("order fit needs at least 3 grid levels")
    if np.all(ms < FLOOR):
        return None, True
    if np.any(ms <= 0.0):
        return None, True
    slope = np.polyfit(np.log(hs), np.log(ms), 1)[0]
    return float(slope), False


def convergence_study(make_report: Callable[[GridSpec], ResidualReport],
                      grids: Sequence[GridSpec]) -> ResidualReport:
    """Run a residual over several grids (coarse to fine) and fit the order."""
    reports = [make_report(g) for g in grids]
    levels = [(r.h, r.max_norm) for r in reports]
    order, at_floor = fit_order(levels)
    final = reports[-1]
    final.convergence = levels
    final.order = order
    final.at_floor = at_floor
    return final


# ---------------------------------------------------------------------------
# energy


def _adaptive_simpson(fn, a: float, b: float, tol: float = 1e-10, depth: int = 48) -> float:
    if a == b:
        return 0.0
    fa, fb = fn(a), fn(b)
    m = 0.5 * (a + b)
    fm = fn(m)
    whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb)

    def recurse(a, fa, b, fb, m, fm, whole, tol, depth):
        lm = 0.5 * (a + m)
        rm = 0.5 * (m + b)
        flm, frm = fn(lm), fn(rm)
        left = (m - a) / 6.0 * (fa + 4.0 * flm + fm)
        right = (b - m) / 6.0 * (fm + 4.0 * frm + fb)
        if depth <= 0 or abs(left + right - whole) <= 15.0 * tol:
            return left + right + (left + right - whole) / 15.0
        return (recurse(a, fa, m, fm, lm, flm, left, tol / 2.0, depth - 1)
                + recurse(m, fm, b, fb, rm, frm, right, tol / 2.0, depth - 1))

    return recurse(a, fa, b, fb, m, fm, whole, tol, depth)


def energy_density(model: DensityModel, Q: np.ndarray) -> np.ndarray:
    """e(Q) = (1/2) * integral of rho from 0 to Q, analytic where available."""
    Q = np.asarray(Q, dtype=float)
    kind = model.kind
    with np.errstate(all="ignore"):
        if kind == "shallow_water":
            return (Q - Q ** 2 / 4.0) / 2.0
        if kind in ("extremal", "born_infeld"):
            return np.where(Q <= 1.0, 1.0 - np.sqrt(np.maximum(1.0 - Q, 0.0)),
                            1.0 + np.sqrt(np.maximum(Q - 1.0, 0.0)))
    if kind == "caustic":
        tau = float(model.params["tau"])

        def seg(u0, u1):
            if u1 <= u0:
                return 0.0
            return _adaptive_simpson(lambda u: np.sqrt(abs(u * u - tau * tau)), u0, u1)

        return _cumulative(np.sqrt(np.maximum(Q, 0.0)), seg, split=tau)
    # custom densities: integrate rho numerically from the domain floor
    lo = max(0.0, min(iv.lo for iv in model.q_domain))

    def seg_rho(q0, q1):
        if q1 <= q0:
            return 0.0
        return 0.5 * _adaptive_simpson(lambda s: float(model.rho(np.array([s]))[0]), q0, q1)

    return _cumulative(Q, seg_rho, base=lo)


def _cumulative(xs: np.ndarray, seg, base: float = 0.0, split: Optional[float] = None) -> np.ndarray:
    """Evaluate x -> integral(base..x) for many x by chaining sorted segments."""
    flat = xs.reshape(-1)
    out = np.full(flat.shape, np.nan)
    finite = np.isfinite(flat)
    if not finite.any():
        return out.reshape(xs.shape)
    order = np.argsort(flat[finite])
    idx = np.nonzero(finite)[0][order]
    acc = 0.0
    prev = base
    for i in idx:
        x = flat[i]
        if x < base:
            out[i] = -seg(x, base) if split is None or not (x < split < base) else \
                -(seg(x, split) + seg(split, base))
            continue
        if split is not None and prev < split < x:
            acc += seg(prev, split) + seg(split, x)
        else:
            acc += seg(prev, x)
        prev = x
        out[i] = acc
    return out.reshape(xs.shape)


def energy(model: DensityModel, solution: FieldSolution, grid: Optional[GridSpec] = None,
           mask: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> float:
    """Midpoint quadrature of e(Q) over cells; the field is re-synthesized at
    cell centers, and cells whose center is flagged or excluded contribute 0."""
    grid = _grid_of(solution, grid)
    h = grid.spacing()
    axes = [0.5 * (ax[1:] + ax[:-1]) for ax in grid.axes()]
    mesh = np.meshgrid(*axes, indexing="ij")
    centers = np.stack([m.reshape(-1) for m in mesh], axis=1)
    cs = synthesize_at_points(solution.model, solution.drive, solution.policy,
                              centers, tol=solution.tol)
    keep = ((cs.flags & MASK_BITS) == 0) & (cs.branch_id != 0) & np.isfinite(cs.Q)
    if mask is not None:
        keep &= np.asarray(mask(centers), dtype=bool)
    if not keep.any():
        raise VerifyError("no usable cells for the energy quadrature")
    qvals = cs.Q[keep]
    if not model.in_domain(qvals).all():
        raise VerifyError("quadrature hit Q outside the density domain")
    e = energy_density(model, qvals)
    return float(np.sum(e) * float(np.prod(h)))
