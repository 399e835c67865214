"""Frobenius witnesses G, their residuals, and integrating-factor recovery.

For minor-type systems the witness satisfies d_i w_j - d_j w_i = G_i w_j -
G_j w_i; for divergence-type (gradient-drive) systems it satisfies div w =
G . w.  Both are assembled from the drive-level least-squares witness
g = M a / |a|^2 (M_ij = d_i a_j - d_j a_i) plus the chain-rule term
-grad log rho(psi(xi)).  Residuals here are analytic (jet-based); the verify
module redoes them with finite differences.

When G is conservative (small curl residual), eta with G = grad eta is
recovered by integrating G along grid edges (two-point Gauss per edge) over a
breadth-first spanning tree, after which e^(-eta) w is checked to be exact.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .density import DensityModel
from .drive import DriveField, GradientDrive, RawField, Scalar2D, SkewMatrix, drive_batch
from .synth import FieldSolution, GridSpec, Tolerances, synthesize_at_points


class FrobeniusError(ValueError):
    pass


@dataclass(eq=False)
class FrobeniusWitness:
    kind: str  # "minor" or "divergence"
    points: np.ndarray
    G: np.ndarray
    G1: np.ndarray
    defining_residual: np.ndarray  # analytic defect per point (NaN undefined)
    solvability_residual: np.ndarray  # drive-level wedge defect (0 where exact)
    defined: np.ndarray
    solution: FieldSolution
    evaluator: Callable[[np.ndarray], np.ndarray]  # points -> G rows
    grid: Optional[GridSpec] = None
    curl_residual: Optional[np.ndarray] = None  # filled by curl_residual_grid
    eta: Optional[np.ndarray] = None
    gauge_H: Optional[np.ndarray] = None  # never constructed, reported only


def _core(model: DensityModel, d: DriveField, sol: FieldSolution, pts: np.ndarray, kind: str):
    tol = sol.tol
    local = synthesize_at_points(model, d, sol.policy, pts, tol=tol)
    batch = drive_batch(d, pts)
    a, jac, xi = batch.a, batch.jac, batch.xi
    Q = local.Q
    rho_c = model.rho(Q)
    rho_p = model.rho_prime(Q)
    phi_p = model.phi_prime(Q)
    with np.errstate(all="ignore"):
        # grad log rho(psi(xi)) by the chain rule through the branch inverse
        glr = (rho_p / (rho_c * phi_p))[:, None] * batch.grad_xi
        w = a / rho_c[:, None]
        if kind == "minor":
            M = np.swapaxes(jac, 1, 2) - jac  # M[i][j] = d_i a_j - d_j a_i
            g = np.einsum("nij,nj->ni", M, a) / xi[:, None]
            wedge_g = g[:, :, None] * a[:, None, :] - g[:, None, :] * a[:, :, None]
            solvability = _max_minor(M - wedge_g)
        else:
            div_a = np.trace(jac, axis1=1, axis2=2)
            g = (div_a / xi)[:, None] * a
            solvability = np.zeros(xi.shape)
        G = g - glr
        G1 = -g
    defined = (
        ~batch.bad
        & (local.branch_id != 0)
        & np.isfinite(rho_c)
        & (np.abs(rho_c) >= tol.rho_zero)
        & np.isfinite(phi_p)
        & (np.abs(phi_p) >= tol.eps_phi_prime)
        & (np.sqrt(np.maximum(xi, 0.0)) > tol.eps_grad)
        & np.isfinite(glr).all(axis=1)
    )
    bad = ~defined
    for arr in (G, G1, glr, w):
        arr[bad] = np.nan
    solvability = np.where(defined, solvability, np.nan)
    return local, a, jac, xi, w, rho_c, glr, g, G, G1, solvability, defined


def _max_minor(mat: np.ndarray) -> np.ndarray:
    n = mat.shape[1]
    iu = np.triu_indices(n, k=1)
    return np.abs(mat[:, iu[0], iu[1]]).max(axis=1)


def _minor_curl_of_w(jac, rho_c, glr, w):
    with np.errstate(all="ignore"):
        M = np.swapaxes(jac, 1, 2) - jac
        curl_w = M / rho_c[:, None, None]
        wedge = glr[:, :, None] * w[:, None, :] - glr[:, None, :] * w[:, :, None]
        return curl_w - wedge  # (d_i w_j - d_j w_i) as an antisymmetric stack


def minor_defect_with(model: DensityModel, d: DriveField, sol: FieldSolution,
                      G_values: np.ndarray, points: Optional[np.ndarray] = None) -> np.ndarray:
    """Analytic minor defect of an externally supplied candidate witness."""
    pts = sol.points if points is None else np.asarray(points, dtype=float)
    _, a, jac, xi, w, rho_c, glr, g, G, G1, solv, defined = _core(model, d, sol, pts, "minor")
    C = _minor_curl_of_w(jac, rho_c, glr, w)
    Gv = np.asarray(G_values, dtype=float)
    wedge_G = Gv[:, :, None] * w[:, None, :] - Gv[:, None, :] * w[:, :, None]
    return np.where(defined, _max_minor(C - wedge_G), np.nan)


def divergence_defect_with(model: DensityModel, d: DriveField, sol: FieldSolution,
                           G_values: np.ndarray, points: Optional[np.ndarray] = None) -> np.ndarray:
    pts = sol.points if points is None else np.asarray(points, dtype=float)
    _, a, jac, xi, w, rho_c, glr, g, G, G1, solv, defined = _core(model, d, sol, pts, "divergence")
    with np.errstate(all="ignore"):
        div_w = (np.trace(jac, axis1=1, axis2=2) - np.einsum("ni,ni->n", a, glr)) / rho_c
        dot = np.einsum("ni,ni->n", np.asarray(G_values, dtype=float), w)
    return np.where(defined, np.abs(div_w - dot), np.nan)


def _build(model, d, sol, points, kind) -> FrobeniusWitness:
    if points is None:
        pts = sol.points
        grid = sol.grid
    else:
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[None, :]
        grid = None
    _, a, jac, xi, w, rho_c, glr, g, G, G1, solv, defined = _core(model, d, sol, pts, kind)
    if kind == "minor":
        C = _minor_curl_of_w(jac, rho_c, glr, w)
        wedge_G = G[:, :, None] * w[:, None, :] - G[:, None, :] * w[:, :, None]
        defect = np.where(defined, _max_minor(C - wedge_G), np.nan)
    else:
        with np.errstate(all="ignore"):
            div_w = (np.trace(jac, axis1=1, axis2=2) - np.einsum("ni,ni->n", a, glr)) / rho_c
            defect = np.where(defined, np.abs(div_w - np.einsum("ni,ni->n", G, w)), np.nan)

    def evaluator(qpts: np.ndarray) -> np.ndarray:
        qpts = np.asarray(qpts, dtype=float)
        out = _core(model, d, sol, qpts, kind)
        return out[8]  # G

    return FrobeniusWitness(
        kind=kind, points=pts, G=G, G1=G1,
        defining_residual=defect, solvability_residual=solv,
        defined=defined, solution=sol, evaluator=evaluator, grid=grid,
    )


def witness_2d(model: DensityModel, d: DriveField, sol: FieldSolution,
               points: Optional[np.ndarray] = None) -> FrobeniusWitness:
    """Minor-system witness in the plane (scalar stream or raw divergence-free)."""
    if not (isinstance(d, Scalar2D) or (isinstance(d, RawField) and d.closure_mode == "divergence_free")):
        raise FrobeniusError("witness_2d needs a scalar stream drive or a divergence-free raw drive")
    if d.dim != 2:
        raise FrobeniusError("witness_2d is 2D only; use witness_nd")
    return _build(model, d, sol, points, "minor")


def witness_nd(model: DensityModel, d: DriveField, sol: FieldSolution,
               points: Optional[np.ndarray] = None) -> FrobeniusWitness:
    """Minor-system witness in any dimension via the least-squares ansatz."""
    if isinstance(d, GradientDrive):
        raise FrobeniusError("gradient drives use witness_gradient (divergence-type system)")
    return _build(model, d, sol, points, "minor")


def witness_gradient(model: DensityModel, d: DriveField, sol: FieldSolution,
                     points: Optional[np.ndarray] = None) -> FrobeniusWitness:
    """Divergence-type witness for curl-free drives: div w = G . w."""
    if not (isinstance(d, GradientDrive) or (isinstance(d, RawField) and d.closure_mode == "curl_free")):
        raise FrobeniusError("witness_gradient needs a gradient drive or a curl-free raw drive")
    return _build(model, d, sol, points, "divergence")


# ---------------------------------------------------------------------------
# conservativity and integrating factor


def _stencil_4th(values: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Fourth-order central derivative; NaN where the 5-point stencil leaves the grid."""
    out = np.full_like(values, np.nan)
    sl = [slice(None)] * values.ndim

    def shifted(k):
        s = list(sl)
        s[axis] = slice(2 + k, values.shape[axis] - 2 + k or None)
        return values[tuple(s)]

    interior = list(sl)
    interior[axis] = slice(2, -2)
    out[tuple(interior)] = (
        -shifted(2) + 8.0 * shifted(1) - 8.0 * shifted(-1) + shifted(-2)
    ) / (12.0 * h)
    return out


def curl_residual_grid(witness: FrobeniusWitness) -> np.ndarray:
    """Max |d_i G_j - d_j G_i| per node by 4th-order differences (grid witnesses)."""
    if witness.grid is None:
        raise FrobeniusError("curl residual needs a grid-backed witness")
    grid = witness.grid
    shape = grid.shape()
    n = grid.dim
    h = grid.spacing()
    comps = [witness.G[:, k].reshape(shape) for k in range(n)]
    res = np.zeros(shape)
    for i in range(n):
        for j in range(i + 1, n):
            dGj_di = _stencil_4th(comps[j], i, h[i])
            dGi_dj = _stencil_4th(comps[i], j, h[j])
            with np.errstate(all="ignore"):
                res = np.maximum(res, np.abs(dGj_di - dGi_dj))
    witness.curl_residual = res
    return res


def _edge_integrals(evaluator, starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    """Two-point Gauss-Legendre quadrature of G . dl along segments, batched."""
    mid = 0.5 * (starts + ends)
    half = 0.5 * (ends - starts)
    off = half / np.sqrt(3.0)
    gpts = np.concatenate([mid - off, mid + off], axis=0)
    gv = evaluator(gpts)
    m = starts.shape[0]
    return np.einsum("ei,ei->e", gv[:m] + gv[m:], half)


@dataclass(eq=False)
class EtaRecovery:
    eta: np.ndarray  # grid-shaped, NaN off-mask
    anchor: tuple
    curl_gate: float
    loop_max: float
    post_residual: float
    mask: np.ndarray


def recover_eta(witness: FrobeniusWitness, grid: Optional[GridSpec] = None,
                anchor: Optional[tuple] = None, mask: Optional[np.ndarray] = None,
                tol_conservative: float = 1e-6, seed: int = 404) -> EtaRecovery:
    grid = grid or witness.grid
    if grid is None:
        raise FrobeniusError("recover_eta needs a grid")
    shape = grid.shape()
    n = grid.dim
    if mask is None:
        mask = witness.defined.reshape(shape)
    else:
        mask = np.asarray(mask, dtype=bool) & witness.defined.reshape(shape)
    if not mask.any():
        raise FrobeniusError("no usable nodes for eta recovery")

    if witness.curl_residual is None:
        curl_residual_grid(witness)
    gate_vals = np.where(_erode(mask, 2), witness.curl_residual, np.nan)
    if not np.isfinite(gate_vals).any():
        raise FrobeniusError("no interior nodes with a full curl stencil inside the mask")
    gate = float(np.nanmax(gate_vals))
    if gate > tol_conservative:
        loc = tuple(int(i) for i in np.unravel_index(np.nanargmax(gate_vals), shape))
        pos = tuple(float(ax[i]) for ax, i in zip(grid.axes(), loc))
        raise FrobeniusError(
            f"witness not conservative: max curl residual {gate:.3e} > {tol_conservative:.1e} "
            f"at grid node {loc} (x = {pos}); a gauge field H with H ^ w = 0 would be needed"
        )

    axes = grid.axes()
    nodes = grid.points().reshape(shape + (n,))

    if anchor is None:
        start = tuple(int(i) for i in np.argwhere(mask)[0])
    else:
        cand = np.argwhere(mask)
        target = np.asarray(anchor, dtype=float)
        pts = nodes[tuple(cand.T)]
        start = tuple(int(i) for i in cand[np.argmin(((pts - target) ** 2).sum(axis=1))])

    # breadth-first spanning tree over masked nodes, then one batched quadrature
    tree: list = []
    seen = np.zeros(shape, dtype=bool)
    seen[start] = True
    queue = deque([start])
    while queue:
        idx = queue.popleft()
        for axis in range(n):
            for step in (1, -1):
                jdx = list(idx)
                jdx[axis] += step
                if not (0 <= jdx[axis] < shape[axis]):
                    continue
                jdx = tuple(jdx)
                if seen[jdx] or not mask[jdx]:
                    continue
                seen[jdx] = True
                tree.append((idx, jdx))
                queue.append(jdx)

    eta = np.full(shape, np.nan)
    eta[start] = 0.0
    if tree:
        starts = np.array([nodes[p] for p, _ in tree])
        ends = np.array([nodes[q] for _, q in tree])
        increments = _edge_integrals(witness.evaluator, starts, ends)
        for (p, q), inc in zip(tree, increments):
            eta[q] = eta[p] + inc

    loop_max = _loop_check(witness.evaluator, grid, mask, nodes, seed=seed)
    if loop_max > 10.0 * tol_conservative:
        raise FrobeniusError(
            f"path dependence detected: rectangle loop integral {loop_max:.3e} "
            f"exceeds 10 x {tol_conservative:.1e}"
        )

    post = _post_exactness(witness, grid, mask, eta)
    result = EtaRecovery(eta=eta, anchor=start, curl_gate=gate, loop_max=loop_max,
                         post_residual=post, mask=mask)
    witness.eta = eta
    return result


def _erode(mask: np.ndarray, width: int) -> np.ndarray:
    out = mask.copy()
    for axis in range(mask.ndim):
        for step in range(1, width + 1):
            for sgn in (1, -1):
                out &= np.roll(mask, sgn * step, axis=axis)
    # roll wraps around; kill the borders it contaminates
    for axis in range(mask.ndim):
        sl = [slice(None)] * mask.ndim
        sl[axis] = slice(0, width)
        out[tuple(sl)] = False
        sl[axis] = slice(-width, None)
        out[tuple(sl)] = False
    return out


def _loop_check(evaluator, grid: GridSpec, mask: np.ndarray, nodes: np.ndarray,
                seed: int, n_loops: int = 20) -> float:
    rng = np.random.default_rng(seed)
    shape = grid.shape()
    n = grid.dim
    worst = 0.0
    found = 0
    for _ in range(600):
        if found >= n_loops:
            break
        i0 = tuple(int(rng.integers(0, s)) for s in shape)
        if not mask[i0]:
            continue
        ax1, ax2 = (0, 1) if n == 2 else tuple(sorted(rng.choice(n, size=2, replace=False)))
        d1 = int(rng.integers(1, max(2, shape[ax1] // 3)))
        d2 = int(rng.integers(1, max(2, shape[ax2] // 3)))
        i1 = list(i0)
        i1[ax1] += d1
        i2 = list(i1)
        i2[ax2] += d2
        i3 = list(i0)
        i3[ax2] += d2
        if i1[ax1] >= shape[ax1] or i2[ax2] >= shape[ax2]:
            continue
        corners = [i0, tuple(i1), tuple(i2), tuple(i3)]
        if not _rect_masked_ok(mask, corners, ax1, ax2):
            continue
        path = _rect_unit_edges(corners, ax1, ax2)
        starts = np.array([nodes[p] for p, _ in path])
        ends = np.array([nodes[q] for _, q in path])
        vals = _edge_integrals(evaluator, starts, ends)
        if not np.isfinite(vals).all():
            continue
        worst = max(worst, abs(float(vals.sum())))
        found += 1
    return worst


def _rect_unit_edges(corners, ax1, ax2):
    """Unit grid edges tracing the rectangle boundary once around."""
    i0, i1, i2, i3 = corners
    path = []

    def march(frm, axis, upto):
        idx = list(frm)
        while idx[axis] != upto:
            nxt = list(idx)
            nxt[axis] += 1 if upto > idx[axis] else -1
            path.append((tuple(idx), tuple(nxt)))
            idx = nxt

    march(i0, ax1, i1[ax1])
    march(i1, ax2, i2[ax2])
    march(i2, ax1, i3[ax1])
    march(i3, ax2, i0[ax2])
    return path


def _rect_masked_ok(mask, corners, ax1, ax2) -> bool:
    i0, i1, i2, i3 = corners
    idx = list(i0)
    for k in range(i0[ax1], i1[ax1] + 1):
        idx[ax1] = k
        idx[ax2] = i0[ax2]
        if not mask[tuple(idx)]:
            return False
        idx[ax2] = i3[ax2]
        if not mask[tuple(idx)]:
            return False
    for k in range(i0[ax2], i3[ax2] + 1):
        idx[ax2] = k
        idx[ax1] = i0[ax1]
        if not mask[tuple(idx)]:
            return False
        idx[ax1] = i1[ax1]
        if not mask[tuple(idx)]:
            return False
    return True


def _post_exactness(witness: FrobeniusWitness, grid: GridSpec, mask: np.ndarray,
                    eta: np.ndarray) -> float:
    """Max curl (minor kind) or divergence (divergence kind) of e^(-eta) w."""
    shape = grid.shape()
    n = grid.dim
    h = grid.spacing()
    sol = witness.solution
    if sol.grid is None or sol.grid != grid:
        raise FrobeniusError("post-check needs the witness solution on the same grid")
    scale = np.exp(-eta)
    comps = [(sol.w[:, k].reshape(shape)) * scale for k in range(n)]
    ok = _erode(mask & np.isfinite(eta), 2)
    worst = 0.0
    with np.errstate(all="ignore"):
        if witness.kind == "minor":
            for i in range(n):
                for j in range(i + 1, n):
                    d1 = _stencil_4th(comps[j], i, h[i])
                    d2 = _stencil_4th(comps[i], j, h[j])
                    vals = np.abs(d1 - d2)[ok]
                    if vals.size:
                        worst = max(worst, float(np.nanmax(vals)))
        else:
            div = np.zeros(shape)
            for i in range(n):
                div += np.where(np.isfinite(eta), _stencil_4th(comps[i], i, h[i]), np.nan)
            vals = np.abs(div)[ok]
            if vals.size:
                worst = max(worst, float(np.nanmax(vals)))
    return worst
