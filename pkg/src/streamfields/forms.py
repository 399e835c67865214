"""Exterior calculus on boxes in R^n (n <= 4): k-form synthesis and witnesses.

A k-form is stored by its coefficients over strictly increasing multi-indices
(1-based).  The metric is Euclidean with orientation dx_1 ^ ... ^ dx_n, so the
Hodge star is pure sign bookkeeping.  Synthesis mirrors the vector module:
omega = *df / rho(psi(|df|^2)) with the same branch policies and flag bits.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import expr as exprmod
from .density import DensityModel
from .drive import coord_names
from .synth import BranchPolicy, Tolerances, _assemble


class FormError(ValueError):
    pass


def multi_indices(n: int, k: int) -> list:
    return list(itertools.combinations(range(1, n + 1), k))


def _perm_sign(seq) -> int:
    inv = 0
    for i in range(len(seq)):
        for j in range(i + 1, len(seq)):
            if seq[i] > seq[j]:
                inv += 1
    return -1 if inv % 2 else 1


def star_sign(idx: tuple, n: int) -> tuple:
    """Complement index and the sign with *(dx_I) = sign dx_{I^c}."""
    comp = tuple(i for i in range(1, n + 1) if i not in idx)
    return comp, _perm_sign(idx + comp)


def insert_sign(i: int, idx: tuple) -> tuple:
    """dx_i ^ dx_I = sign dx_J with J = sorted(I + {i}); 0 if i in I."""
    if i in idx:
        return idx, 0
    pos = sum(1 for j in idx if j < i)
    out = tuple(sorted(idx + (i,)))
    return out, (-1) ** pos


@dataclass(eq=False)
class KForm:
    n: int
    k: int
    coeffs: dict  # multi-index -> Expression

    def __post_init__(self):
        if not (1 <= self.n <= 4):
            raise FormError("supported ambient dimensions are 1..4")
        if not (0 <= self.k <= self.n):
            raise FormError(f"degree {self.k} out of range for n={self.n}")
        valid = set(multi_indices(self.n, self.k))
        names = coord_names(self.n)
        coeffs = {}
        for key, val in self.coeffs.items():
            key = tuple(int(i) for i in key)
            if key not in valid:
                raise FormError(f"bad multi-index {key} for (n,k)=({self.n},{self.k})")
            if not isinstance(val, exprmod.Expression):
                val = exprmod.parse(str(val), names)
            coeffs[key] = val
        self.coeffs = coeffs


def kform(n: int, k: int, coeffs) -> KForm:
    return KForm(n=n, k=k, coeffs=dict(coeffs))


@dataclass(eq=False)
class FormValues:
    """Numeric k-form samples; grads (when present) let one more d be applied."""
    n: int
    k: int
    coeffs: dict  # multi-index -> (N,) values
    grads: Optional[dict]  # multi-index -> (N, n) coefficient gradients
    bad: np.ndarray

    def norm_sq(self) -> np.ndarray:
        out = np.zeros(self.bad.shape)
        for vals in self.coeffs.values():
            out = out + vals ** 2
        return out

    def as_matrix(self) -> np.ndarray:
        """(N, C(n,k)) coefficient matrix, columns in lexicographic index order."""
        keys = multi_indices(self.n, self.k)
        cols = [self.coeffs.get(key, np.zeros(self.bad.shape)) for key in keys]
        return np.stack(cols, axis=1) if cols else np.zeros((self.bad.shape[0], 0))


def evaluate_form(form: KForm, points: np.ndarray, params: Optional[dict] = None,
                  with_grads: bool = True) -> FormValues:
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[None, :]
    if pts.shape[1] != form.n:
        raise FormError(f"points have dimension {pts.shape[1]}, form lives in n={form.n}")
    npts = pts.shape[0]
    bad = np.zeros(npts, dtype=bool)
    coeffs, grads = {}, {}
    for key in multi_indices(form.n, form.k):
        e = form.coeffs.get(key)
        if e is None:
            coeffs[key] = np.zeros(npts)
            grads[key] = np.zeros((npts, form.n))
            continue
        jet = exprmod.eval_jets(e, pts, params or {})
        bad |= jet.bad
        coeffs[key] = np.where(jet.bad, np.nan, jet.val)
        g = jet.grad.copy()
        g[jet.bad] = np.nan
        grads[key] = g
    return FormValues(n=form.n, k=form.k, coeffs=coeffs,
                      grads=grads if with_grads else None, bad=bad)


def _d_values(values: FormValues) -> FormValues:
    if values.grads is None:
        raise FormError("exterior derivative needs coefficient gradients")
    n, k = values.n, values.k
    if k >= n:
        return FormValues(n=n, k=k + 1, coeffs={}, grads=None, bad=values.bad)
    npts = values.bad.shape[0]
    out = {key: np.zeros(npts) for key in multi_indices(n, k + 1)}
    for key, grad in values.grads.items():
        for i in range(1, n + 1):
            new, sgn = insert_sign(i, key)
            if sgn:
                out[new] = out[new] + sgn * grad[:, i - 1]
    return FormValues(n=n, k=k + 1, coeffs=out, grads=None, bad=values.bad)


def exterior_d(form: Union[KForm, FormValues], points: Optional[np.ndarray] = None,
               params: Optional[dict] = None) -> FormValues:
    """d of a symbolic form at points, or of numeric values carrying gradients.

    Symbolic input keeps one derivative order in reserve (output gradients come
    from the coefficient Hessians), so d can be applied once more.
    """
    if isinstance(form, FormValues):
        return _d_values(form)
    if points is None:
        raise FormError("points required for a symbolic form")
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[None, :]
    n, k = form.n, form.k
    npts = pts.shape[0]
    if k >= n:
        return FormValues(n=n, k=k + 1, coeffs={}, grads=None, bad=np.zeros(npts, dtype=bool))
    bad = np.zeros(npts, dtype=bool)
    out = {key: np.zeros(npts) for key in multi_indices(n, k + 1)}
    outg = {key: np.zeros((npts, n)) for key in multi_indices(n, k + 1)}
    for key, e in form.coeffs.items():
        jet = exprmod.eval_jets(e, pts, params or {})
        bad |= jet.bad
        for i in range(1, n + 1):
            new, sgn = insert_sign(i, key)
            if sgn:
                out[new] = out[new] + sgn * jet.grad[:, i - 1]
                outg[new] = outg[new] + sgn * jet.hess[:, i - 1, :]
    for key in out:
        out[key][bad] = np.nan
        outg[key][bad] = np.nan
    return FormValues(n=n, k=k + 1, coeffs=out, grads=outg, bad=bad)


def hodge_star(values: FormValues) -> FormValues:
    """*(dx_I) = sign(I, I^c) dx_{I^c}; linear with constant signs, so any
    attached coefficient gradients transport unchanged."""
    n = values.n
    coeffs, grads = {}, {}
    for key in multi_indices(values.n, values.k):
        comp, sgn = star_sign(key, n)
        vals = values.coeffs.get(key)
        if vals is None:
            continue
        coeffs[comp] = sgn * vals
        if values.grads is not None:
            grads[comp] = sgn * values.grads[key]
    return FormValues(n=n, k=n - values.k, coeffs=coeffs,
                      grads=grads if values.grads is not None else None, bad=values.bad)


def codifferential_sign(n: int, k: int) -> int:
    return (-1) ** (n * (k + 1) + 1)


def codifferential(form: Union[KForm, FormValues], points: Optional[np.ndarray] = None,
                   params: Optional[dict] = None) -> FormValues:
    """delta = (-1)^(n(k+1)+1) * d * on k-forms (k >= 1)."""
    if isinstance(form, FormValues):
        k, n = form.k, form.n
        starred = hodge_star(form)
    else:
        k, n = form.k, form.n
        starred = hodge_star(evaluate_form(form, points, params))
    if k < 1:
        raise FormError("codifferential lowers degree; needs k >= 1")
    result = hodge_star(_d_values(starred))
    sgn = codifferential_sign(n, k)
    for key in result.coeffs:
        result.coeffs[key] = sgn * result.coeffs[key]
    return result


def wedge_1form(gamma: np.ndarray, beta: FormValues) -> FormValues:
    """(gamma ^ beta) for a numeric 1-form gamma given as (N, n) rows."""
    n, k = beta.n, beta.k
    if k >= n:
        return FormValues(n=n, k=k, coeffs={}, grads=None, bad=beta.bad)
    npts = beta.bad.shape[0]
    out = {key: np.zeros(npts) for key in multi_indices(n, k + 1)}
    for key, vals in beta.coeffs.items():
        for i in range(1, n + 1):
            new, sgn = insert_sign(i, key)
            if sgn:
                out[new] = out[new] + sgn * gamma[:, i - 1] * vals
    return FormValues(n=n, k=k + 1, coeffs=out, grads=None, bad=beta.bad)


# ---------------------------------------------------------------------------
# synthesis


@dataclass(eq=False)
class FormSolution:
    n: int
    k: int
    points: np.ndarray
    omega: FormValues
    star_df: FormValues  # with coefficient gradients
    d_star_df: FormValues
    xi: np.ndarray
    Q: np.ndarray
    rho_c: np.ndarray
    grad_xi: np.ndarray
    regime: np.ndarray
    branch_id: np.ndarray
    flags: np.ndarray
    model: DensityModel
    policy: BranchPolicy
    tol: Tolerances

    @property
    def defined(self) -> np.ndarray:
        return ~self.omega.bad & (self.branch_id != 0) & np.isfinite(
            self.omega.as_matrix()).all(axis=1)


def _synthesize_from_star(model, policy, tol, pts, star_a: FormValues) -> FormSolution:
    n = star_a.n
    mat = star_a.as_matrix()
    with np.errstate(all="ignore"):
        xi = np.einsum("nc,nc->n", mat, mat)
        grad_xi = np.zeros((pts.shape[0], n))
        for key, vals in star_a.coeffs.items():
            grad_xi += 2.0 * vals[:, None] * star_a.grads[key]
    lap = np.full(pts.shape[0], np.nan)
    w, Q, regime, sel, flags = _assemble(
        model, policy, tol, pts, mat, xi, star_a.bad, lap)
    keys = multi_indices(n, star_a.k)
    coeffs = {key: w[:, c] for c, key in enumerate(keys)}
    omega = FormValues(n=n, k=star_a.k, coeffs=coeffs, grads=None, bad=star_a.bad)
    rho_c = np.where(sel != 0, model.rho(Q), np.nan)
    return FormSolution(
        n=n, k=star_a.k, points=pts, omega=omega, star_df=star_a,
        d_star_df=_d_values(star_a), xi=xi, Q=Q, rho_c=rho_c, grad_xi=grad_xi,
        regime=regime, branch_id=sel, flags=flags, model=model, policy=policy, tol=tol,
    )


def synthesize_form(model: DensityModel, f: KForm, policy: BranchPolicy,
                    points: np.ndarray, tol: Optional[Tolerances] = None,
                    params: Optional[dict] = None) -> FormSolution:
    """omega = *df / rho(psi(|df|^2)) for an (n-k-1)-stream form f."""
    tol = tol or Tolerances()
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[None, :]
    if f.k > f.n - 1:
        raise FormError("stream form must have degree at most n-1")
    df = exterior_d(f, pts, params)
    return _synthesize_from_star(model, policy, tol, pts, hodge_star(df))


def synthesize_form_closed(model: DensityModel, alpha: KForm, policy: BranchPolicy,
                           points: np.ndarray, box, tol: Optional[Tolerances] = None,
                           params: Optional[dict] = None, closure_tol: float = 1e-8,
                           samples: int = 1000, seed: int = 91) -> FormSolution:
    """Same synthesis from a raw (n-k)-form alpha, after checking d(alpha) = 0."""
    tol = tol or Tolerances()
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[None, :]
    lo, hi = (np.asarray(v, dtype=float) for v in box)
    rng = np.random.default_rng(seed)
    probe = lo + (hi - lo) * rng.random((samples, alpha.n))
    da = exterior_d(alpha, probe, params)
    worst = 0.0
    for vals in da.coeffs.values():
        good = vals[~da.bad]
        if good.size:
            worst = max(worst, float(np.abs(good).max()))
    if (~da.bad).sum() < samples // 10:
        raise FormError("closure check: form undefined on most of the box")
    if worst > closure_tol:
        raise FormError(f"form is not closed: max |d alpha| = {worst:.3e} > {closure_tol:.1e}")
    av = evaluate_form(alpha, pts, params)
    return _synthesize_from_star(model, policy, tol, pts, hodge_star(av))


# ---------------------------------------------------------------------------
# Gamma witness


@dataclass(eq=False)
class GammaWitness:
    points: np.ndarray
    Gamma: np.ndarray  # (N, n) 1-form coefficients
    Gamma1: np.ndarray
    defect: np.ndarray  # wedge-system residual norm per point
    frobenius_defect: np.ndarray  # max coefficient of d(omega) - Gamma ^ omega
    rank_deficient: np.ndarray
    defined: np.ndarray


def gamma_witness(model: DensityModel, f: KForm, sol: FormSolution) -> GammaWitness:
    """Gamma = Gamma1 - d log rho with Gamma1 least-squares in d*df = Gamma1 ^ *df.

    The wedge system is solvable exactly for k in {1, n-1}; for intermediate k
    the residual norm is reported as the obstruction measure.
    """
    n, k = sol.n, sol.k
    star_df = sol.star_df
    d_star = sol.d_star_df
    pts = sol.points
    npts = pts.shape[0]
    rows = multi_indices(n, k + 1)
    nrows = len(rows)

    A = np.zeros((npts, nrows, n))
    for key, vals in star_df.coeffs.items():
        for i in range(1, n + 1):
            new, sgn = insert_sign(i, key)
            if sgn:
                A[:, rows.index(new), i - 1] += sgn * vals
    b = np.stack([d_star.coeffs[r] for r in rows], axis=1) if nrows else np.zeros((npts, 0))

    Gamma1 = np.full((npts, n), np.nan)
    defect = np.full(npts, np.nan)
    rank_def = np.zeros(npts, dtype=bool)
    tol = sol.tol
    usable = ~star_df.bad & (sol.xi > tol.eps_grad ** 2)
    for p in range(npts):
        if not usable[p]:
            continue
        sol_p, _, rank, _ = np.linalg.lstsq(A[p], b[p], rcond=None)
        Gamma1[p] = sol_p
        defect[p] = float(np.linalg.norm(A[p] @ sol_p - b[p]))
        rank_def[p] = rank < min(n, nrows)

    Q = sol.Q
    rho_c = sol.rho_c
    phi_p = model.phi_prime(Q)
    rho_p = model.rho_prime(Q)
    with np.errstate(all="ignore"):
        glr = (rho_p / (rho_c * phi_p))[:, None] * sol.grad_xi
        Gamma = Gamma1 - glr
        # d(omega) = [d*df - dlogrho ^ *df] / rho, then compare with Gamma ^ omega
        d_omega = {}
        wedge_glr = wedge_1form(glr, star_df)
        for key in d_star.coeffs:
            d_omega[key] = (d_star.coeffs[key] - wedge_glr.coeffs[key]) / rho_c
        wedge_gam = wedge_1form(Gamma, sol.omega)
        fro = np.zeros(npts)
        for key in d_omega:
            fro = np.maximum(fro, np.abs(d_omega[key] - wedge_gam.coeffs[key]))
    defined = (
        usable
        & np.isfinite(Gamma).all(axis=1)
        & np.isfinite(rho_c)
        & (np.abs(rho_c) >= tol.rho_zero)
        & np.isfinite(phi_p)
        & (np.abs(phi_p) >= tol.eps_phi_prime)
    )
    Gamma[~defined] = np.nan
    fro = np.where(defined, fro, np.nan)
    defect = np.where(usable, defect, np.nan)
    return GammaWitness(points=pts, Gamma=Gamma, Gamma1=Gamma1, defect=defect,
                        frobenius_defect=fro, rank_deficient=rank_def, defined=defined)
