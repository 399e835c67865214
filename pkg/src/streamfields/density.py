"""Density laws rho(Q), the fold map phi(Q) = Q rho^2(Q), and branch inversion.

phi is monotone only piecewise; each monotonicity piece is a PhiBranch carrying
its Q-interval, its image, and an inverse psi.  Increasing pieces (type1) give
the elliptic regime, decreasing pieces (type2) the hyperbolic one.  Built-in
models ship exact analytic inverses; custom densities get branches detected by
sign-sampling phi' and inverted numerically (bisection plus Newton polish).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import expr as exprmod


class DensityError(ValueError):
    pass


class QDomainError(DensityError):
    """Q outside the admissible domain of rho."""


class ImageRangeError(DensityError):
    """xi outside the image of the selected branch."""


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float
    lo_closed: bool = True
    hi_closed: bool = True

    def contains_array(self, x, lo_snap: float = 0.0, hi_snap: float = 0.0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        lo_ok = (x >= self.lo) if self.lo_closed else (x > self.lo)
        hi_ok = (x <= self.hi) if self.hi_closed else (x < self.hi)
        # snap forgives an open/overshot endpoint within tolerance (fold values)
        if lo_snap > 0.0 and np.isfinite(self.lo):
            lo_ok = lo_ok | (np.abs(x - self.lo) <= lo_snap)
        if hi_snap > 0.0 and np.isfinite(self.hi):
            hi_ok = hi_ok | (np.abs(x - self.hi) <= hi_snap)
        return lo_ok & hi_ok & ~np.isnan(x)

    def contains(self, x: float, snap: float = 0.0) -> bool:
        return bool(self.contains_array(np.asarray([float(x)]), snap, snap)[0])

    def width(self) -> float:
        return self.hi - self.lo

    def __str__(self) -> str:
        return f"{'[' if self.lo_closed else '('}{self.lo:g}, {self.hi:g}{']' if self.hi_closed else ')'}"


@dataclass(frozen=True, eq=False)
class PhiBranch:
    """One monotone piece of phi with its inverse."""

    index: int  # 1-based position in the model's branch list
    label: str
    orientation: str  # "type1" (phi' > 0, elliptic) or "type2" (phi' < 0, hyperbolic)
    q_interval: Interval
    image: Interval
    inverse_kind: str
    nonphysical: bool = False
    # snapping is only sound where the matching Q endpoint is finite
    snap_lo: bool = False
    snap_hi: bool = False
    psi_fn: Optional[Callable[[np.ndarray], np.ndarray]] = field(repr=False, default=None)

    @property
    def elliptic(self) -> bool:
        return self.orientation == "type1"

    def admits(self, xi, snap: float = 0.0) -> np.ndarray:
        return self.image.contains_array(
            xi, snap if self.snap_lo else 0.0, snap if self.snap_hi else 0.0
        )

    def psi(self, xi, snap: float = 0.0) -> np.ndarray:
        """Invert phi on this branch; NaN where xi lies outside the (snapped) image."""
        xi = np.asarray(xi, dtype=float)
        ok = self.admits(xi, snap)
        out = np.full(xi.shape, np.nan)
        if np.any(ok):
            xin = np.clip(xi[ok], self.image.lo, self.image.hi)
            with np.errstate(all="ignore"):
                q = self.psi_fn(xin)
            out[ok] = np.clip(q, self.q_interval.lo, self.q_interval.hi)
        return out


@dataclass(frozen=True, eq=False)
class DensityModel:
    kind: str  # extremal | born_infeld | shallow_water | caustic | custom
    q_domain: tuple[Interval, ...]
    params: dict = field(default_factory=dict)
    rho_fn: Callable[[np.ndarray], np.ndarray] = field(repr=False, default=None)
    rho_prime_fn: Callable[[np.ndarray], np.ndarray] = field(repr=False, default=None)
    branch_list: tuple[PhiBranch, ...] = field(repr=False, default=())

    def in_domain(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        ok = np.zeros(q.shape, dtype=bool)
        for iv in self.q_domain:
            ok |= iv.contains_array(q)
        return ok

    def rho(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        with np.errstate(all="ignore"):
            r = self.rho_fn(q)
        return np.where(self.in_domain(q), r, np.nan)

    def rho_prime(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        with np.errstate(all="ignore"):
            rp = self.rho_prime_fn(q)
        return np.where(self.in_domain(q), rp, np.nan)

    def phi(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        with np.errstate(all="ignore"):
            return q * self.rho(q) ** 2

    def phi_prime(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        r = self.rho(q)
        rp = self.rho_prime(q)
        with np.errstate(all="ignore"):
            return r * (r + 2.0 * q * rp)

    def branches(self) -> list[PhiBranch]:
        return list(self.branch_list)


def phi(model: DensityModel, Q: float) -> float:
    """Q rho^2(Q) at a scalar Q; raises QDomainError outside the domain."""
    if not bool(model.in_domain(np.asarray([Q]))[0]):
        raise QDomainError(f"Q={Q!r} outside the density domain of {model.kind}")
    return float(model.phi(np.asarray([Q]))[0])


def phi_prime(model: DensityModel, Q: float) -> float:
    """phi'(Q) = rho(rho + 2 Q rho'); NaN where rho or rho' is undefined."""
    if not bool(model.in_domain(np.asarray([Q]))[0]):
        raise QDomainError(f"Q={Q!r} outside the density domain of {model.kind}")
    return float(model.phi_prime(np.asarray([Q]))[0])


def branches(model: DensityModel) -> list[PhiBranch]:
    return model.branches()


def invert_phi(branch: PhiBranch, xi: float) -> float:
    q = branch.psi(np.asarray([float(xi)]))
    if np.isnan(q[0]):
        raise ImageRangeError(
            f"xi={xi!r} outside image {branch.image} of branch {branch.index} ({branch.label})"
        )
    return float(q[0])


# ---------------------------------------------------------------------------
# built-in models

_INF = math.inf


def extremal(kind: str = "extremal") -> DensityModel:
    """rho(Q) = |1-Q|^(-1/2): two branches split at the pole Q=1."""

    def rho(q):
        return np.abs(1.0 - q) ** -0.5

    def rho_prime(q):
        return 0.5 * np.sign(1.0 - q) * np.abs(1.0 - q) ** -1.5

    b1 = PhiBranch(
        index=1,
        label="elliptic",
        orientation="type1",
        q_interval=Interval(0.0, 1.0, True, False),
        image=Interval(0.0, _INF, True, False),
        inverse_kind="analytic_extremal_space",
        psi_fn=lambda xi: xi / (xi + 1.0),
    )
    b2 = PhiBranch(
        index=2,
        label="hyperbolic",
        orientation="type2",
        q_interval=Interval(1.0, _INF, False, False),
        image=Interval(1.0, _INF, False, False),
        inverse_kind="analytic_extremal_time",
        psi_fn=lambda xi: xi / (xi - 1.0),
    )
    return DensityModel(
        kind=kind,
        q_domain=(Interval(0.0, 1.0, True, False), Interval(1.0, _INF, False, False)),
        rho_fn=rho,
        rho_prime_fn=rho_prime,
        branch_list=(b1, b2),
    )


def born_infeld() -> DensityModel:
    return extremal(kind="born_infeld")


SHALLOW_FOLD_XI = (2.0 / 3.0) ** 3  # phi(2/3), the shared fold value


def _shallow_trig_root(xi: np.ndarray, k: int) -> np.ndarray:
    # roots of Q^3 - 4Q^2 + 4Q - 4 xi = 0 for xi in [0, (2/3)^3]
    c = np.clip(6.75 * xi - 1.0, -1.0, 1.0)
    ang = np.arccos(c) / 3.0 - 2.0 * np.pi * k / 3.0
    return 4.0 / 3.0 + (4.0 / 3.0) * np.cos(ang)


def _shallow_root_upper(xi: np.ndarray) -> np.ndarray:
    # third branch: trig part up to the fold, single Cardano root beyond it
    xi = np.asarray(xi, dtype=float)
    out = np.empty_like(xi)
    low = xi <= SHALLOW_FOLD_XI
    if np.any(low):
        out[low] = _shallow_trig_root(xi[low], 0)
    if np.any(~low):
        x = xi[~low]
        half_q = 8.0 / 27.0 - 2.0 * x  # depressed cubic u^3 - (4/3)u + q
        disc = half_q**2 - 64.0 / 729.0
        s = np.sqrt(disc)
        # -half_q > 0 here, so t1 has no cancellation; the small cube root
        # follows from the product t1*t2 = 4/9 (cbrt(-half_q - s) cancels badly
        # once xi is large)
        t1 = np.cbrt(-half_q + s)
        out[~low] = t1 + (4.0 / 9.0) / t1 + 4.0 / 3.0
    return out


def shallow_water() -> DensityModel:
    """rho(Q) = 1 - Q/2: folds at Q=2/3 and Q=2 (rho<0 beyond, kept but flagged)."""

    def rho(q):
        return 1.0 - 0.5 * q

    def rho_prime(q):
        return np.full(np.shape(q), -0.5)

    b1 = PhiBranch(
        index=1,
        label="tranquil",
        orientation="type1",
        q_interval=Interval(0.0, 2.0 / 3.0, True, False),
        image=Interval(0.0, SHALLOW_FOLD_XI, True, False),
        inverse_kind="cubic_shallow_1",
        snap_hi=True,
        psi_fn=lambda xi: _shallow_trig_root(xi, 2),
    )
    b2 = PhiBranch(
        index=2,
        label="shooting",
        orientation="type2",
        q_interval=Interval(2.0 / 3.0, 2.0, False, False),
        image=Interval(0.0, SHALLOW_FOLD_XI, False, False),
        inverse_kind="cubic_shallow_2",
        snap_lo=True,
        snap_hi=True,
        psi_fn=lambda xi: _shallow_trig_root(xi, 1),
    )
    b3 = PhiBranch(
        index=3,
        label="nonphysical",
        orientation="type1",
        q_interval=Interval(2.0, _INF, False, False),
        image=Interval(0.0, _INF, False, False),
        inverse_kind="cubic_shallow_3",
        nonphysical=True,
        snap_lo=True,
        psi_fn=_shallow_root_upper,
    )
    return DensityModel(
        kind="shallow_water",
        q_domain=(Interval(0.0, _INF, True, False),),
        rho_fn=rho,
        rho_prime_fn=rho_prime,
        branch_list=(b1, b2, b3),
    )


def caustic(tau: float) -> DensityModel:
    """rho(Q) = sqrt(|1 - tau^2/Q|): kink at Q = tau^2, Q=0 excluded."""
    if not (tau > 0.0 and math.isfinite(tau)):
        raise DensityError(f"caustic requires tau > 0, got {tau!r}")
    t2 = tau * tau

    def rho(q):
        return np.sqrt(np.abs(q - t2) / q)

    def rho_prime(q):
        r = np.sqrt(np.abs(q - t2) / q)
        out = np.sign(q - t2) * t2 / (2.0 * r * q * q)
        return np.where(q == t2, np.nan, out)

    b1 = PhiBranch(
        index=1,
        label="shadow",
        orientation="type1",
        q_interval=Interval(t2, _INF, True, False),
        image=Interval(0.0, _INF, True, False),
        inverse_kind="analytic_caustic_shadow",
        psi_fn=lambda xi: xi + t2,
    )
    # the image is taken closed at tau^2: psi -> 0 there and w = 0 by the
    # alternate formula, even though Q=0 itself is outside the rho domain
    b2 = PhiBranch(
        index=2,
        label="illuminated",
        orientation="type2",
        q_interval=Interval(0.0, t2, False, True),
        image=Interval(0.0, t2, True, True),
        inverse_kind="analytic_caustic_light",
        psi_fn=lambda xi: t2 - xi,
    )
    return DensityModel(
        kind="caustic",
        q_domain=(Interval(0.0, _INF, False, False),),
        params={"tau": float(tau)},
        rho_fn=rho,
        rho_prime_fn=rho_prime,
        branch_list=(b1, b2),
    )


# ---------------------------------------------------------------------------
# custom densities: expression-backed rho with numeric branch machinery


def _bisect_scalar(fn, a: float, b: float, fa: float, fb: float) -> float:
    for _ in range(200):
        m = 0.5 * (a + b)
        if m == a or m == b:
            break
        fm = fn(m)
        if not np.isfinite(fm):
            break
        if (fm < 0.0) == (fa < 0.0):
            a, fa = m, fm
        else:
            b, fb = m, fm
    return 0.5 * (a + b)


def _bisect_defined(defined_fn, a: float, b: float) -> float:
    # a defined, b not: localize the definedness boundary
    for _ in range(120):
        m = 0.5 * (a + b)
        if m == a or m == b:
            break
        if defined_fn(m):
            a = m
        else:
            b = m
    return 0.5 * (a + b)


def _numeric_inverse(phi_fn, dphi_fn, qa: float, qb: float, increasing: bool):
    """Bracketed bisection + Newton polish on phi(Q) = xi over [qa, qb]."""

    def solve(xi: np.ndarray) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        scale = max(abs(qa), 1.0)
        lo = np.full(xi.shape, qa)
        flo = phi_fn(lo)
        if np.any(~np.isfinite(flo)):
            lo = np.where(np.isfinite(flo), lo, qa + 1e-14 * scale)
        if np.isfinite(qb):
            hi = np.full(xi.shape, qb)
            fhi = phi_fn(hi)
            if np.any(~np.isfinite(fhi)):
                hi = np.where(np.isfinite(fhi), hi, qb - 1e-14 * max(abs(qb), 1.0))
        else:
            hi = np.full(xi.shape, max(qa, 0.0) + scale)
            for _ in range(600):
                fhi = phi_fn(hi)
                short = (fhi < xi) if increasing else (fhi > xi)
                short &= np.isfinite(fhi)
                if not np.any(short):
                    break
                hi = np.where(short, hi * 2.0, hi)
        lo0, hi0 = lo.copy(), hi.copy()
        for _ in range(48):
            mid = 0.5 * (lo + hi)
            fm = phi_fn(mid)
            go_lo = (fm < xi) if increasing else (fm > xi)
            go_lo &= np.isfinite(fm)
            lo = np.where(go_lo, mid, lo)
            hi = np.where(go_lo, hi, mid)
        q = 0.5 * (lo + hi)
        for _ in range(3):
            f = phi_fn(q) - xi
            d = dphi_fn(q)
            with np.errstate(all="ignore"):
                step = f / d
            step = np.where(np.isfinite(step), step, 0.0)
            q = np.clip(q - step, lo0, hi0)
        return q

    return solve


def custom(
    rho_expr,
    q_min: float = 0.0,
    q_max: Optional[float] = None,
    name: str = "custom",
    samples_per_decade: int = 4096,
) -> DensityModel:
    """Density from an expression in Q; branches found by sampling phi' signs."""
    try:
        e = exprmod.parse(rho_expr, ("Q",)) if isinstance(rho_expr, str) else rho_expr
    except exprmod.ExpressionError as exc:
        raise DensityError(f"custom density expression: {exc}") from exc
    if e.variables != ("Q",):
        raise DensityError("custom density must be an expression in the single variable Q")

    def rho_and_prime(q: np.ndarray):
        jets = exprmod.eval_jets(e, q.reshape(-1, 1))
        r = np.where(jets.bad, np.nan, jets.val)
        rp = np.where(jets.bad, np.nan, jets.grad[:, 0])
        return r.reshape(q.shape), rp.reshape(q.shape)

    def rho(q):
        return rho_and_prime(np.asarray(q, dtype=float))[0]

    def rho_prime(q):
        return rho_and_prime(np.asarray(q, dtype=float))[1]

    def phi_arr(q):
        q = np.asarray(q, dtype=float)
        r, _ = rho_and_prime(q)
        with np.errstate(all="ignore"):
            return q * r * r

    def dphi_arr(q):
        q = np.asarray(q, dtype=float)
        r, rp = rho_and_prime(q)
        with np.errstate(all="ignore"):
            return r * (r + 2.0 * q * rp)

    if q_min < 0.0:
        raise DensityError("q_min must be >= 0")
    horizon = q_max if q_max is not None else 1e6
    if not horizon > q_min:
        raise DensityError("q_max must exceed q_min")

    _spot_check_c1(rho_and_prime, q_min, horizon, name)

    qs = _sample_grid(q_min, horizon, samples_per_decade)
    with np.errstate(all="ignore"):
        dphi = dphi_arr(qs)
        rvals, _ = rho_and_prime(qs)
    branch_list = _detect_branches(
        qs, dphi, rvals, phi_arr, dphi_arr,
        open_end=(q_max is None), name=name,
    )
    domain_hi = _INF if q_max is None else float(q_max)
    return DensityModel(
        kind="custom",
        q_domain=(Interval(float(q_min), domain_hi, True, q_max is not None),),
        params={"expr": exprmod.to_string(e), "q_min": float(q_min), "q_max": q_max},
        rho_fn=rho,
        rho_prime_fn=rho_prime,
        branch_list=tuple(branch_list),
    )


def _sample_grid(q_min: float, horizon: float, per_decade: int) -> np.ndarray:
    lo_pos = max(q_min, min(1e-6, horizon * 1e-6))
    decades = max(1, int(math.ceil(math.log10(horizon / lo_pos))))
    pts = [np.geomspace(lo_pos, horizon, decades * per_decade)]
    if q_min < lo_pos:
        pts.insert(0, np.linspace(q_min, lo_pos, per_decade, endpoint=False))
    return np.unique(np.concatenate(pts))


def _spot_check_c1(rho_and_prime, q_min: float, horizon: float, name: str) -> None:
    rng = np.random.default_rng(20260814)
    span_hi = min(horizon, max(10.0, q_min + 10.0))
    qs = q_min + (span_hi - q_min) * rng.random(48)
    r, rp = rho_and_prime(qs)
    h = 1e-6 * np.maximum(1.0, np.abs(qs))
    rp_fd = (rho_and_prime(qs + h)[0] - rho_and_prime(qs - h)[0]) / (2.0 * h)
    ok = np.isfinite(r) & np.isfinite(rp) & np.isfinite(rp_fd)
    if not np.any(ok):
        raise DensityError(f"custom density {name!r}: rho undefined at all spot-check points")
    err = np.abs(rp[ok] - rp_fd[ok]) / np.maximum(1.0, np.abs(rp[ok]))
    if np.mean(err > 1e-4) > 0.25:
        raise DensityError(
            f"custom density {name!r}: rho' disagrees with finite differences "
            f"(max rel err {err.max():.2e}); rho must be C^1 inside its domain"
        )


def _detect_branches(qs, dphi, rvals, phi_arr, dphi_arr, open_end: bool, name: str):
    defined = np.isfinite(dphi)
    if not np.any(defined):
        raise DensityError(f"custom density {name!r}: phi' undefined at every sample")

    def dphi_scalar(q):
        return float(dphi_arr(np.asarray([q]))[0])

    def defined_scalar(q):
        return bool(np.isfinite(dphi_arr(np.asarray([q]))[0]))

    # split sample indices into maximal runs of defined phi'
    runs = []
    start = None
    for i, d in enumerate(defined):
        if d and start is None:
            start = i
        elif not d and start is not None:
            runs.append((start, i - 1))
            start = None
    if start is not None:
        runs.append((start, len(qs) - 1))

    pieces = []  # (qa, qb, lo_closed, hi_closed, sign)
    for r0, r1 in runs:
        if r1 - r0 < 8:
            continue
        lo_q = qs[r0]
        lo_closed = r0 == 0
        if r0 > 0:
            lo_q = _bisect_defined(defined_scalar, qs[r0], qs[r0 - 1])
            lo_closed = False
        seg_start = lo_q
        seg_sign = math.copysign(1.0, dphi[r0]) if dphi[r0] != 0.0 else 0.0
        count = 0
        for i in range(r0, r1):
            s_next = math.copysign(1.0, dphi[i + 1]) if dphi[i + 1] != 0.0 else 0.0
            count += 1
            if s_next != 0.0 and seg_sign == 0.0:
                seg_sign = s_next
            elif s_next != 0.0 and s_next != seg_sign:
                root = _bisect_scalar(dphi_scalar, qs[i], qs[i + 1], dphi[i], dphi[i + 1])
                if count >= 8:
                    pieces.append((seg_start, root, lo_closed and seg_start == qs[r0], False, seg_sign))
                seg_start, seg_sign, lo_closed, count = root, s_next, False, 0
        hi_q = qs[r1]
        hi_closed = r1 == len(qs) - 1 and not open_end
        if r1 < len(qs) - 1:
            hi_q = _bisect_defined(defined_scalar, qs[r1], qs[r1 + 1])
            hi_closed = False
        if count >= 8:
            pieces.append((seg_start, hi_q if not (r1 == len(qs) - 1 and open_end) else _INF,
                           lo_closed, hi_closed if not (r1 == len(qs) - 1 and open_end) else False,
                           seg_sign))

    if not pieces:
        raise DensityError(
            f"custom density {name!r}: no sign-definite phi' interval found at "
            f"{len(qs)} samples; refine sampling or fix the density"
        )

    out = []
    for idx, (qa, qb, lo_c, hi_c, sign) in enumerate(pieces, start=1):
        increasing = sign > 0.0
        fa = float(phi_arr(np.asarray([qa]))[0])
        if not np.isfinite(fa):
            fa = float(phi_arr(np.asarray([qa + 1e-12 * max(1.0, abs(qa))]))[0])
        if np.isfinite(qb):
            fb = float(phi_arr(np.asarray([qb]))[0])
            if not np.isfinite(fb):
                fb = float(phi_arr(np.asarray([qb - 1e-12 * max(1.0, abs(qb))]))[0])
        else:
            fb = _INF if increasing else 0.0
        im_lo, im_hi = (fa, fb) if increasing else (fb, fa)
        image = Interval(
            im_lo, im_hi,
            lo_closed=(lo_c if increasing else hi_c) and np.isfinite(im_lo),
            hi_closed=(hi_c if increasing else lo_c) and np.isfinite(im_hi),
        )
        mid = qa + 0.5 * (min(qb, qa + 10.0) - qa)
        rho_mid = rvals[np.searchsorted(qs, mid).clip(0, len(qs) - 1)]
        out.append(
            PhiBranch(
                index=idx,
                label=f"numeric_{idx}",
                orientation="type1" if increasing else "type2",
                q_interval=Interval(qa, qb, lo_c, hi_c),
                image=image,
                inverse_kind="numeric",
                nonphysical=bool(np.isfinite(rho_mid) and rho_mid < 0.0),
                snap_lo=np.isfinite(image.lo) and np.isfinite(qb if not increasing else qa),
                snap_hi=np.isfinite(image.hi) and np.isfinite(qa if not increasing else qb),
                psi_fn=_numeric_inverse(phi_arr, dphi_arr, qa, qb, increasing),
            )
        )
    return out
