import numpy as np
import pytest

from streamfields import (
    FrobeniusError,
    GridSpec,
    Tolerances,
    born_infeld,
    coulomb,
    curl_residual_grid,
    extremal,
    gradient_drive,
    minor_defect_with,
    prefer_type1,
    prefer_type2,
    raw_drive,
    recover_eta,
    scalar_drive,
    shallow_vortex,
    shallow_water,
    single_branch,
    synthesize,
    synthesize_at_points,
    witness_2d,
    witness_gradient,
    witness_nd,
)

WTOL = Tolerances(eps_phi_prime=1e-3)


def annulus_points(rng, n, r_lo, r_hi):
    r = np.sqrt(rng.uniform(r_lo**2, r_hi**2, n))
    th = rng.uniform(0, 2 * np.pi, n)
    return np.stack([r * np.cos(th), r * np.sin(th)], axis=1)


def test_vortex_witness_matches_log_gradient(rng):
    """G = grad(log t) = (2x/t, 2y/t) for the rigid vortex, any R."""
    for R in (1.0, 4.0):
        m = shallow_water()
        d = shallow_vortex(R)
        pts = annulus_points(rng, 400, 0.35 * np.sqrt(R), 0.7 * np.sqrt(R))
        sol = synthesize_at_points(m, d, prefer_type1(), pts, tol=WTOL)
        wit = witness_2d(m, d, sol)
        t = (pts**2).sum(axis=1)
        want = 2.0 * pts / t[:, None]
        ok = wit.defined
        assert ok.sum() > 300
        assert np.abs(wit.G[ok] - want[ok]).max() < 1e-9
        assert np.nanmax(wit.defining_residual[ok]) < 1e-9


def test_vortex_witness_independent_of_R_and_branch(rng):
    """The same G works on the supercritical annulus through branch 2."""
    R = 4.0
    m = shallow_water()
    d = shallow_vortex(R)
    pts = annulus_points(rng, 300, 1.05 * np.sqrt(2 * R / 3), 0.95 * np.sqrt(2 * R))
    sol = synthesize_at_points(m, d, prefer_type2(), pts, tol=WTOL)
    wit = witness_2d(m, d, sol)
    t = (pts**2).sum(axis=1)
    ok = wit.defined
    assert ok.sum() > 200
    assert np.abs(wit.G[ok] - 2.0 * pts[ok] / t[ok, None]).max() < 1e-9


def test_rescaled_candidate_fails_by_a_computable_margin(rng):
    """A candidate G' = G / sqrt(R) is wrong for R != 1: at t = 1 the minor
    defect must be at least half of |2/sqrt(R) - 2/R| (measured: exactly 0.5
    at R = 4)."""
    R = 4.0
    m = shallow_water()
    d = shallow_vortex(R)
    th = np.linspace(0.0, 2 * np.pi, 64, endpoint=False)
    pts = np.stack([np.cos(th), np.sin(th)], axis=1)  # t = 1
    sol = synthesize_at_points(m, d, prefer_type1(), pts, tol=WTOL)
    t = (pts**2).sum(axis=1)
    G_bad = 2.0 * pts / (t * np.sqrt(R))[:, None]
    defect = minor_defect_with(m, d, sol, G_bad)
    bound = 0.5 * abs(2.0 / np.sqrt(R) - 2.0 / R)
    assert np.nanmax(defect) >= bound
    assert np.nanmax(defect) == pytest.approx(0.5, abs=1e-9)
    # while the true G passes at the same points
    G_good = 2.0 * pts / t[:, None]
    assert np.nanmax(minor_defect_with(m, d, sol, G_good)) < 1e-9


def test_2d_scalar_reduction_is_exact(rng):
    """In two dimensions the least-squares witness collapses to the closed
    form g = laplacian(f) * grad(f) / xi; both paths agree to rounding."""
    from streamfields import drive_batch

    d = scalar_drive("sin(x1)*x2^2 + exp(x1/2)")
    m = extremal()
    pts = rng.uniform(0.2, 1.0, (200, 2))
    sol = synthesize_at_points(m, d, single_branch(1), pts, tol=WTOL)
    wit = witness_2d(m, d, sol)
    batch = drive_batch(d, pts)
    grad_f = np.stack([batch.a[:, 1], -batch.a[:, 0]], axis=1)
    g = batch.laplacian_f[:, None] * grad_f / batch.xi[:, None]
    # G1 = -g is the drive-level piece before the density correction
    ok = wit.defined
    np.testing.assert_allclose(wit.G1[ok], -g[ok], rtol=0, atol=1e-12)


def test_born_infeld_fundamental_witness_closed_form(rng):
    """G = 2 x / (r^2 (1 +- r^4)) for the inverse-square gradient drive."""
    m = born_infeld()
    d = coulomb()
    rng_pts = rng.uniform(0.7, 1.5, (200, 3))
    sol = synthesize_at_points(m, d, single_branch(1), rng_pts, tol=WTOL)
    wit = witness_gradient(m, d, sol)
    r2 = (rng_pts**2).sum(axis=1)
    want = 2.0 * rng_pts / (r2 * (1.0 + r2**2))[:, None]
    ok = wit.defined
    assert ok.sum() > 150
    assert np.abs(wit.G[ok] - want[ok]).max() < 1e-8
    assert np.nanmax(wit.defining_residual[ok]) < 1e-8

    inner = rng.uniform(0.25, 0.45, (150, 3))
    sol2 = synthesize_at_points(m, d, single_branch(2), inner, tol=WTOL)
    wit2 = witness_gradient(m, d, sol2)
    r2 = (inner**2).sum(axis=1)
    want2 = 2.0 * inner / (r2 * (1.0 - r2**2))[:, None]
    ok2 = wit2.defined
    assert ok2.sum() > 100
    assert np.abs(wit2.G[ok2] - want2[ok2]).max() < 1e-8


def test_axisymmetric_3d_solvability_is_tiny(rng):
    """Gradient drives with radial symmetry admit an exact wedge solution."""
    m = born_infeld()
    d = gradient_drive(3, "1/sqrt(x1^2 + x2^2 + x3^2)")
    pts = rng.uniform(0.6, 1.4, (100, 3))
    sol = synthesize_at_points(m, d, single_branch(1), pts, tol=WTOL)
    wit = witness_gradient(m, d, sol)
    assert np.nanmax(wit.solvability_residual) < 1e-12


def test_abc_flow_has_genuine_obstruction(rng):
    """The ABC velocity field is divergence free but not integrable in the
    restricted sense: its wedge system has an O(1) residual."""
    box = ((0.0, 0.0, 0.0), (2 * np.pi, 2 * np.pi, 2 * np.pi))
    d = raw_drive(
        3,
        ("sin(x3) + cos(x2)", "sin(x1) + cos(x3)", "sin(x2) + cos(x1)"),
        "divergence_free",
        box,
    )
    m = extremal()
    pts = np.random.default_rng(11).uniform(0.5, 5.5, (300, 3))
    sol = synthesize_at_points(m, d, single_branch(1), pts, tol=WTOL)
    wit = witness_nd(m, d, sol)
    assert np.nanmax(wit.solvability_residual) > 1.0


def annulus_witness(cells=312, lim=1.35, tol=WTOL):
    m = shallow_water()
    d = shallow_vortex(1.0)
    g = GridSpec((-lim, -lim), (lim, lim), (cells, cells))
    sol = synthesize(m, d, prefer_type2(allow_nonphysical=True), g, tol=tol)
    wit = witness_2d(m, d, sol)
    pts = sol.points
    t = (pts**2).sum(axis=1).reshape(g.shape())
    mask = (t >= 1.0) & (t <= 1.8)
    return wit, g, mask


def test_recover_eta_on_the_shooting_annulus():
    wit, g, mask = annulus_witness()
    rec = recover_eta(wit, mask=mask)
    assert rec.curl_gate < 1e-6
    assert rec.loop_max < 1e-5
    assert rec.post_residual < 1e-5
    # eta is log(t) up to the anchor constant
    pts = g.points().reshape(g.shape() + (2,))
    t = (pts**2).sum(axis=-1)
    dev = rec.eta[rec.mask] - np.log(t[rec.mask])
    assert dev.max() - dev.min() < 1e-8


def test_recover_eta_deterministic():
    wit, g, mask = annulus_witness(cells=128)
    r1 = recover_eta(wit, mask=mask)
    r2 = recover_eta(wit, mask=mask)
    np.testing.assert_array_equal(r1.eta, r2.eta)
    assert r1.curl_gate == r2.curl_gate and r1.loop_max == r2.loop_max


def test_non_conservative_witness_is_rejected():
    """A manufactured swirl G fails the conservative gate with a located
    error instead of silently integrating."""
    wit, g, mask = annulus_witness(cells=96)
    swirl = 0.5 * np.stack([-wit.points[:, 1], wit.points[:, 0]], axis=1)
    wit.G = wit.G + swirl  # curl(swirl) = 1 everywhere
    wit.curl_residual = None
    with pytest.raises(FrobeniusError, match="conservative"):
        recover_eta(wit, mask=mask)


def test_multivalued_witness_shows_up_in_post_residual():
    """The point-vortex swirl is curl free away from the origin, so neither
    the stencil gate nor rectangle loops inside an annulus can reject it; the
    exactness post-check is what exposes the monodromy seam."""
    wit, g, mask = annulus_witness(cells=96)

    def swirl_at(pts):
        t = np.maximum((pts**2).sum(axis=1), 1e-12)
        return 0.5 * np.stack([-pts[:, 1], pts[:, 0]], axis=1) / t[:, None]

    base = wit.evaluator
    wit.G = wit.G + swirl_at(wit.points)
    wit.evaluator = lambda pts: base(pts) + swirl_at(pts)
    wit.curl_residual = None
    rec = recover_eta(wit, mask=mask)
    assert rec.curl_gate < 1e-6  # locally conservative: gate is blind
    assert rec.loop_max < 1e-5  # no rectangle in the annulus wraps the hole
    assert rec.post_residual > 1e-3  # but eta cannot be single valued


def test_curl_residual_has_stencil_margins():
    wit, g, mask = annulus_witness(cells=64)
    curl = curl_residual_grid(wit)
    assert curl.shape == g.shape()
    assert np.isnan(curl[0, :]).all() and np.isnan(curl[:, 1]).all()


def test_zero_witness_recovers_constant_eta():
    """A curl-free drive on the unit-density model gives G = 0 and eta = 0."""
    from streamfields import custom

    m = custom("1", q_max=25.0, name="unit")
    d = gradient_drive(2, "x1 + 2*x2")
    g = GridSpec((0.0, 0.0), (1.0, 1.0), (24, 24))
    sol = synthesize(m, d, prefer_type1(), g)
    wit = witness_gradient(m, d, sol)
    rec = recover_eta(wit)
    assert np.nanmax(np.abs(wit.G)) == 0.0
    assert np.nanmax(np.abs(rec.eta)) == 0.0
    assert rec.post_residual < 1e-12
