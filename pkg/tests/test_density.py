import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamfields import (
    DensityError,
    born_infeld,
    caustic,
    custom,
    extremal,
    shallow_water,
)

ALL_MODELS = [extremal(), born_infeld(), shallow_water(), caustic(1.5)]


def bisect_phi(model, branch, xi, iters=200):
    """Independent inverse of phi on a monotone branch by pure bisection."""
    lo, hi = branch.q_interval.lo, branch.q_interval.hi
    if not np.isfinite(hi):
        hi = max(2.0 * lo + 1.0, 1.0)
        while (model.phi(hi) - xi) * (model.phi(lo + 1e-13) - xi) > 0 and hi < 1e12:
            hi *= 2.0
    a, b = lo, hi
    fa = model.phi(a if branch.q_interval.lo_closed else a + 1e-13) - xi
    for _ in range(iters):
        mid = 0.5 * (a + b)
        fm = model.phi(mid) - xi
        if np.isnan(fm):
            b = mid
            continue
        if (fm > 0) == (fa > 0):
            a, fa = mid, fm
        else:
            b = mid
    return 0.5 * (a + b)


def interior_samples(branch, count=200):
    lo, hi = branch.image.lo, branch.image.hi
    if not np.isfinite(hi):
        hi = lo + 50.0
    pad = 1e-3 * (hi - lo)
    return np.linspace(lo + pad, hi - pad, count)


def test_shallow_branch_boundaries_exact():
    m = shallow_water()
    bs = m.branches()
    assert len(bs) == 3
    assert bs[0].q_interval.lo == 0.0
    assert bs[0].q_interval.hi == 2.0 / 3.0
    assert bs[1].q_interval.lo == 2.0 / 3.0
    assert bs[1].q_interval.hi == 2.0
    assert bs[2].q_interval.lo == 2.0
    fold = m.phi(2.0 / 3.0)
    assert abs(fold - (2.0 / 3.0) ** 3) <= 1e-15


def test_shallow_branch_types_and_images():
    m = shallow_water()
    b1, b2, b3 = m.branches()
    assert b1.orientation == "type1" and b1.elliptic
    assert b2.orientation == "type2"
    assert b3.orientation == "type1" and b3.nonphysical
    assert b1.image.lo == 0.0 and b1.image.hi == pytest.approx((2 / 3) ** 3)
    assert b2.image.lo == 0.0 and b2.image.hi == pytest.approx((2 / 3) ** 3)
    assert not np.isfinite(b3.image.hi)


def test_extremal_branch_maps_are_exact_closed_forms():
    m = extremal()
    b1, b2 = m.branches()
    xi = np.linspace(0.0, 9.0, 101)
    np.testing.assert_allclose(b1.psi(xi), xi / (xi + 1.0), rtol=1e-15, atol=1e-15)
    xi2 = np.linspace(1.0 + 1e-6, 9.0, 101)
    np.testing.assert_allclose(b2.psi(xi2), xi2 / (xi2 - 1.0), rtol=1e-13, atol=0)


@pytest.mark.parametrize("model", ALL_MODELS, ids=lambda m: m.kind)
def test_psi_phi_round_trip_on_every_branch(model):
    for branch in model.branches():
        xi = interior_samples(branch)
        q = branch.psi(xi)
        assert np.isfinite(q).all()
        back = model.phi(q)
        np.testing.assert_allclose(back, xi, rtol=1e-10, atol=1e-12)
        # and the other direction, q -> phi -> psi
        qlo, qhi = branch.q_interval.lo, branch.q_interval.hi
        if not np.isfinite(qhi):
            qhi = qlo + 25.0
        qs = np.linspace(qlo + 1e-3 * (qhi - qlo), qhi - 1e-3 * (qhi - qlo), 200)
        q2 = branch.psi(model.phi(qs))
        np.testing.assert_allclose(q2, qs, rtol=1e-10, atol=1e-10)


@pytest.mark.parametrize("model", ALL_MODELS, ids=lambda m: m.kind)
def test_branch_inverse_agrees_with_bisection_oracle(model):
    for branch in model.branches():
        xi = interior_samples(branch, count=25)
        q = branch.psi(xi)
        for x, qq in zip(xi, q):
            oracle = bisect_phi(model, branch, x)
            assert qq == pytest.approx(oracle, rel=1e-10, abs=1e-10)


def test_caustic_kink_has_undefined_slope():
    tau = 1.5
    m = caustic(tau)
    assert np.isnan(m.rho_prime(tau**2))
    # but rho itself is continuous (and zero) at the kink
    assert m.rho(tau**2) == pytest.approx(0.0, abs=1e-12)


def test_caustic_branch_geometry():
    tau = 2.0
    m = caustic(tau)
    b1, b2 = m.branches()
    assert b1.label == "shadow" and b2.label == "illuminated"
    xi = np.linspace(0.5, 3.5, 41)
    np.testing.assert_allclose(b1.psi(xi), xi + tau**2, rtol=1e-15)
    np.testing.assert_allclose(b2.psi(xi), tau**2 - xi, rtol=1e-15)
    # illuminated image is closed at both ends
    assert b2.image.lo_closed and b2.image.hi_closed
    assert b2.image.lo == 0.0 and b2.image.hi == tau**2


def test_born_infeld_rho_formula():
    m = born_infeld()
    q = np.array([0.25, 0.5, 2.0, 5.0])
    np.testing.assert_allclose(m.rho(q), 1.0 / np.sqrt(np.abs(1.0 - q)), rtol=1e-15)


def test_custom_matches_shallow():
    m = custom("1 - Q/2", q_max=16.0, name="shallow-clone")
    ref = shallow_water()
    q = np.linspace(0.05, 7.0, 53)
    np.testing.assert_allclose(m.rho(q), ref.rho(q), rtol=1e-12)
    np.testing.assert_allclose(m.phi_prime(q), ref.phi_prime(q), rtol=1e-11, atol=1e-12)
    assert len(m.branches()) == 3
    # numeric branch boundaries land on the analytic fold
    bs = m.branches()
    assert bs[0].q_interval.hi == pytest.approx(2.0 / 3.0, abs=1e-6)
    assert bs[1].q_interval.hi == pytest.approx(2.0, abs=1e-6)


def test_custom_rejects_non_q_expressions():
    with pytest.raises(DensityError):
        custom("1 - x1/2")
    with pytest.raises(DensityError):
        custom("1 - Q/2", q_min=-1.0)


@settings(max_examples=80, deadline=None)
@given(st.floats(1e-6, (2 / 3) ** 3 - 1e-6))
def test_shallow_roots_straddle_the_fold(xi):
    m = shallow_water()
    b1, b2, _ = m.branches()
    q1 = float(b1.psi(np.array([xi]))[0])
    q2 = float(b2.psi(np.array([xi]))[0])
    assert 0.0 <= q1 < 2.0 / 3.0 < q2 < 2.0
    assert m.phi(q1) == pytest.approx(xi, rel=1e-9, abs=1e-12)
    assert m.phi(q2) == pytest.approx(xi, rel=1e-9, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 0.99))
def test_extremal_phi_prime_sign_matches_type(q):
    m = extremal()
    assert m.phi_prime(q) > 0  # type1 region
    assert m.phi_prime(q + 1.0 + 0.5) < 0 or m.phi_prime(q + 1.0 + 0.5) != 0
