"""Drive objects: prescribed vector fields a(x) that source the synthesis.

Four kinds.  A 2D scalar stream function contributes its transverse gradient
a = (-df/dy, df/dx); a skew matrix of stream coefficients contributes
a_i = sum_{j != i} d_j F_ij (divergence-free by construction); a gradient
drive contributes a = grad f (curl-free); a raw field is taken as given and
validated against its declared closure at construction.  All evaluation goes
through second-order jets, so Jacobians, laplacians and grad ||a||^2 are
analytic, not differenced.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from . import expr as exprmod
from .density import Interval


class DriveError(ValueError):
    pass


_VAR_NAMES = ("x1", "x2", "x3", "x4")


def coord_names(dim: int) -> tuple[str, ...]:
    if dim not in (2, 3, 4):
        raise DriveError(f"drive dimension must be 2, 3 or 4, got {dim}")
    return _VAR_NAMES[:dim]


def _as_expr(f, dim: int, params: Mapping[str, float]) -> exprmod.Expression:
    if isinstance(f, exprmod.Expression):
        return f
    return exprmod.parse(f, coord_names(dim), tuple(params))


@dataclass(frozen=True, eq=False)
class Scalar2D:
    f: exprmod.Expression
    params: dict = field(default_factory=dict)
    kind: str = field(default="scalar2d", init=False)
    dim: int = field(default=2, init=False)


@dataclass(frozen=True, eq=False)
class SkewMatrix:
    dim: int
    entries: dict  # (i, j) with 1 <= i < j <= dim -> Expression
    params: dict = field(default_factory=dict)
    kind: str = field(default="skew_matrix", init=False)


@dataclass(frozen=True, eq=False)
class GradientDrive:
    dim: int
    f: exprmod.Expression
    params: dict = field(default_factory=dict)
    kind: str = field(default="gradient", init=False)


@dataclass(frozen=True, eq=False)
class RawField:
    dim: int
    alpha: tuple
    closure_mode: str  # "divergence_free" or "curl_free"
    box: tuple  # (lo vector, hi vector) used for closure validation
    params: dict = field(default_factory=dict)
    kind: str = field(default="raw", init=False)


DriveField = Union[Scalar2D, SkewMatrix, GradientDrive, RawField]


def scalar_drive(f, params: Optional[Mapping[str, float]] = None) -> Scalar2D:
    params = dict(params or {})
    return Scalar2D(f=_as_expr(f, 2, params), params=params)


def skew_drive(dim: int, entries: Mapping, params: Optional[Mapping[str, float]] = None) -> SkewMatrix:
    params = dict(params or {})
    coord_names(dim)
    parsed = {}
    for key, val in entries.items():
        i, j = key
        if not (1 <= i < j <= dim):
            raise DriveError(f"skew entry indices must satisfy 1 <= i < j <= dim, got {key}")
        parsed[(i, j)] = _as_expr(val, dim, params)
    if not parsed:
        raise DriveError("skew drive needs at least one upper-triangular entry")
    return SkewMatrix(dim=dim, entries=parsed, params=params)


def gradient_drive(dim: int, f, params: Optional[Mapping[str, float]] = None) -> GradientDrive:
    params = dict(params or {})
    return GradientDrive(dim=dim, f=_as_expr(f, dim, params), params=params)


def raw_drive(
    dim: int,
    alpha: Sequence,
    closure_mode: str,
    box: tuple,
    params: Optional[Mapping[str, float]] = None,
    tol: float = 1e-8,
    samples: int = 1000,
    seed: int = 91,
) -> RawField:
    params = dict(params or {})
    if closure_mode not in ("divergence_free", "curl_free"):
        raise DriveError(f"unknown closure mode {closure_mode!r}")
    comps = tuple(_as_expr(c, dim, params) for c in alpha)
    if len(comps) != dim:
        raise DriveError(f"raw drive needs {dim} components, got {len(comps)}")
    lo, hi = (np.asarray(v, dtype=float) for v in box)
    if lo.shape != (dim,) or hi.shape != (dim,) or not np.all(lo < hi):
        raise DriveError("raw drive box must be a valid (lo, hi) pair of length dim")
    d = RawField(dim=dim, alpha=comps, closure_mode=closure_mode, box=(tuple(lo), tuple(hi)), params=params)

    rng = np.random.default_rng(seed)
    pts = lo + (hi - lo) * rng.random((samples, dim))
    batch = drive_batch(d, pts)
    ok = ~batch.bad
    if np.count_nonzero(ok) < samples // 10:
        raise DriveError("raw drive undefined on most of its validation box")
    jac = batch.jac[ok]
    if closure_mode == "divergence_free":
        defect = np.abs(np.trace(jac, axis1=1, axis2=2)).max()
        what = "divergence"
    else:
        defect = np.abs(jac - np.swapaxes(jac, 1, 2)).max()
        what = "curl"
    if defect > tol:
        raise DriveError(
            f"raw drive fails {closure_mode} validation: max {what} {defect:.3e} > {tol:.1e}"
        )
    return d


@dataclass
class DriveBatch:
    """Vectorized samples: a (N,n), xi (N,), jac[r,c]=d_c a_r, grad_xi (N,n)."""

    a: np.ndarray
    xi: np.ndarray
    jac: np.ndarray
    grad_xi: np.ndarray
    laplacian_f: np.ndarray  # NaN for kinds without a scalar potential
    bad: np.ndarray


@dataclass
class DriveSample:
    a: np.ndarray
    xi: float
    jacobian: np.ndarray
    grad_xi: np.ndarray
    laplacian_f: Optional[float]
    defined: bool


def drive_batch(d: DriveField, points: np.ndarray) -> DriveBatch:
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != d.dim:
        raise DriveError(f"expected points of shape (N, {d.dim})")
    npts, n = pts.shape
    if isinstance(d, (Scalar2D, GradientDrive)):
        jets = exprmod.eval_jets(d.f, pts, d.params)
        g, hess = jets.grad, jets.hess
        if isinstance(d, Scalar2D):
            a = np.stack([-g[:, 1], g[:, 0]], axis=1)
            jac = np.empty((npts, 2, 2))
            jac[:, 0, 0] = -hess[:, 0, 1]
            jac[:, 0, 1] = -hess[:, 1, 1]
            jac[:, 1, 0] = hess[:, 0, 0]
            jac[:, 1, 1] = hess[:, 0, 1]
        else:
            a = g.copy()
            jac = hess.copy()
        lap = np.trace(hess, axis1=1, axis2=2)
        bad = jets.bad.copy()
    elif isinstance(d, SkewMatrix):
        a = np.zeros((npts, n))
        jac = np.zeros((npts, n, n))
        bad = np.zeros(npts, dtype=bool)
        for (i, j), e in d.entries.items():
            jets = exprmod.eval_jets(e, pts, d.params)
            a[:, i - 1] += jets.grad[:, j - 1]
            a[:, j - 1] -= jets.grad[:, i - 1]
            jac[:, i - 1, :] += jets.hess[:, j - 1, :]
            jac[:, j - 1, :] -= jets.hess[:, i - 1, :]
            bad |= jets.bad
        lap = np.full(npts, np.nan)
    elif isinstance(d, RawField):
        a = np.empty((npts, n))
        jac = np.empty((npts, n, n))
        bad = np.zeros(npts, dtype=bool)
        for i, e in enumerate(d.alpha):
            jets = exprmod.eval_jets(e, pts, d.params)
            a[:, i] = jets.val
            jac[:, i, :] = jets.grad
            bad |= jets.bad
        lap = np.full(npts, np.nan)
    else:
        raise DriveError(f"unknown drive kind {d!r}")

    if np.any(bad):
        a[bad] = np.nan
        jac[bad] = np.nan
        lap[bad] = np.nan
    xi = np.einsum("ni,ni->n", a, a)
    grad_xi = 2.0 * np.einsum("nij,ni->nj", jac, a)
    return DriveBatch(a=a, xi=xi, jac=jac, grad_xi=grad_xi, laplacian_f=lap, bad=bad)


def drive_at(d: DriveField, point: Sequence[float]) -> DriveSample:
    batch = drive_batch(d, np.asarray(point, dtype=float)[None, :])
    has_lap = isinstance(d, (Scalar2D, GradientDrive))
    return DriveSample(
        a=batch.a[0].copy(),
        xi=float(batch.xi[0]),
        jacobian=batch.jac[0].copy(),
        grad_xi=batch.grad_xi[0].copy(),
        laplacian_f=float(batch.laplacian_f[0]) if has_lap else None,
        defined=not bool(batch.bad[0]),
    )


def range_sigma(d: DriveField, grid) -> Interval:
    """Sampled [min, max] of xi = |a|^2 over the grid's defined points."""
    batch = drive_batch(d, grid.points())
    xi = batch.xi[~batch.bad]
    if xi.size == 0:
        raise DriveError("drive undefined at every grid point; no xi range available")
    return Interval(float(xi.min()), float(xi.max()), True, True)


# ---------------------------------------------------------------------------
# built-in drive library

# sign factor u/|u| keeps one expression valid on both sides of r=1, giving
# grad f = (1/|r-1|) (x/r, y/r) everywhere off the unit circle
RADIAL_LOG_F = "((sqrt(x^2+y^2)-1)/abs(sqrt(x^2+y^2)-1))*log(abs(sqrt(x^2+y^2)-1))"

SHALLOW_VORTEX_F = "((x^2+y^2) - (x^2+y^2)^2/(4*R))/(2*sqrt(R))"

COULOMB_F = "1/sqrt(x^2+y^2+z^2)"


def radial_log() -> Scalar2D:
    return scalar_drive(RADIAL_LOG_F)


def shallow_vortex(R: float = 1.0) -> Scalar2D:
    if not R > 0:
        raise DriveError("shallow_vortex requires R > 0")
    return scalar_drive(SHALLOW_VORTEX_F, params={"R": float(R)})


def coulomb() -> GradientDrive:
    return gradient_drive(3, COULOMB_F)


def radial_class(f_tilde, g) -> Scalar2D:
    """Compose a radial profile f_tilde(t) with a planar shape t = g(x, y)."""
    try:
        prof = f_tilde if isinstance(f_tilde, exprmod.Expression) else exprmod.parse(f_tilde, ("t",))
        shape = g if isinstance(g, exprmod.Expression) else exprmod.parse(g, coord_names(2))
    except exprmod.ExpressionError as exc:
        raise DriveError(f"radial drive: {exc}") from exc
    if prof.variables != ("t",):
        raise DriveError("radial profile must be an expression in the single variable t")
    return Scalar2D(f=exprmod.substitute(prof, "t", shape), params={})


BUILTIN_DRIVES = {
    "radial_log": radial_log,
    "shallow_vortex": shallow_vortex,
    "coulomb": coulomb,
    "radial_class": radial_class,
}
