import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, linalg

from apfb import (DomainError, SupportError, build_axisym_grid, build_line_grid, derive_exponents,
                  exponents_from_alpha, one_d_field, radial_field, radial_profile, u_from_v,
                  verify_expansion)
from apfb.energy import modified_spec
from apfb.maps import VariationSpec
from apfb.stability import (alpha_threshold, assemble_form, axisym_quad_form, build_theta_test,
                            curvature_check, figure1_csv, limit_alpha_zero, mass, min_generalized_eigen,
                            quad_form, rayleigh_min, split_potential_sums, stability_potential_u,
                            stability_potential_v, theta_probe_sweep, theta_window)


def _step(r, a, b):
    """1 on r <= a, 0 on r >= b, C^2 quintic between; value and r-derivative."""
    s = np.clip((r - a) / (b - a), 0.0, 1.0)
    return 1 - s**3 * (10 - 15 * s + 6 * s * s), -30 * s * s * (1 - s) ** 2 / (b - a)


@pytest.fixture(scope="module")
def radial_case():
    ex = exponents_from_alpha(0.5, 3)
    prof = radial_profile(ex, 0.5, 2.5)
    return ex, prof


def _grid(h, extent=1.5, n=3):
    return build_axisym_grid(extent, -extent, extent, h, n)


# ---------------------------------------------------------------------------
# potentials


def test_potential_vanishes_on_one_d():
    ex = exponents_from_alpha(0.5, 3)
    g = _grid(1 / 16)
    v = one_d_field(ex, g, analytic_gradient=False)
    assert np.max(np.abs(stability_potential_v(v, ex).values)) <= 1e-12
    # equipartition holds for the exact gradient; FD gradients of u lose accuracy at the free boundary
    u = one_d_field(ex, g, kind="u")
    assert np.max(np.abs(stability_potential_u(u, ex).values)) <= 1e-10


def test_potential_alpha_zero():
    ex = exponents_from_alpha(0.0, 3)
    g = _grid(1 / 16)
    v = radial_field(radial_profile(ex, 0.5, 2.5), g)
    assert np.all(stability_potential_v(v, ex).values == 0.0)
    assert np.all(stability_potential_u(u_from_v(v, ex), ex).values == 0.0)


def test_potential_v_matches_profile(radial_case):
    ex, prof = radial_case
    errs = []
    for h in (1 / 16, 1 / 32, 1 / 64):
        g = _grid(h)
        v = radial_field(prof, g, analytic_gradient=False)
        W = stability_potential_v(v, ex).values
        T, Z = g.coords()
        r = np.hypot(T, Z)
        sel = (r > 0.75) & (r < 1.25)
        vv, _, _ = prof.evaluate(r[sel])
        exact = 0.5 * ex.alpha * vv ** (ex.alpha - 2) * prof.one_minus_grad_sq(r[sel])
        errs.append(np.max(np.abs(W[sel] - exact)))
    assert errs[0] / errs[1] > 3.0 and errs[1] / errs[2] > 3.0


def test_potential_singularity_slope(radial_case):
    ex, prof = radial_case
    d = np.geomspace(1e-4, 1e-2, 25)
    r = prof.r0 + d
    vv, _, _ = prof.evaluate(r)
    W = 0.5 * ex.alpha * vv ** (ex.alpha - 2) * prof.one_minus_grad_sq(r)
    slope = np.polyfit(np.log(d), np.log(np.abs(W)), 1)[0]
    assert slope == pytest.approx(ex.alpha - 1, abs=0.05)


def test_potential_u_v_consistency(radial_case):
    ex, prof = radial_case
    errs = []
    for h in (1 / 16, 1 / 32, 1 / 64):
        g = _grid(h)
        v = radial_field(prof, g, analytic_gradient=False)
        u = u_from_v(v, ex)
        Wu = stability_potential_u(u, ex).values
        Wv = stability_potential_v(v, ex).values
        T, Z = g.coords()
        r = np.hypot(T, Z)
        sel = (r > 0.75) & (r < 1.25)
        errs.append(np.max(np.abs(Wu[sel] - ex.beta ** (-ex.alpha) * Wv[sel])))
    assert errs[0] / errs[1] > 3.0 and errs[1] / errs[2] > 3.0


@pytest.mark.parametrize("alpha", [0.25, 0.5])
def test_split_potential_diverges(alpha):
    ex = exponents_from_alpha(alpha, 3)
    prof = radial_profile(ex, 0.5, 2.5)
    firsts, unsplit = [], []
    for h in (1 / 16, 1 / 32, 1 / 64):
        g = _grid(h)
        T, Z = g.coords()
        r = np.hypot(T, Z)
        phi, _ = _step(r, 0.9, 1.3)
        v = radial_field(prof, g)
        firsts.append(split_potential_sums(v, ex, phi)[0])
        form = assemble_form(v, ex)
        unsplit.append(float(np.sum(form.P * phi.ravel() ** 2)))
    assert firsts[1] / firsts[0] > 1.2 and firsts[2] / firsts[1] > 1.2
    assert abs(unsplit[2] - unsplit[1]) < 0.5 * abs(unsplit[1] - unsplit[0]) + 1e-3 * abs(unsplit[2])


# ---------------------------------------------------------------------------
# quadratic form and spectrum


def test_quad_form_zero_and_bookkeeping(radial_case):
    ex, prof = radial_case
    g = _grid(1 / 16)
    v = radial_field(prof, g)
    assert quad_form(v, ex, np.zeros(g.shape)).Q == 0.0
    T, Z = g.coords()
    phi, _ = _step(np.hypot(T, Z - 0.1), 0.5, 1.2)
    rep = quad_form(v, ex, phi)
    assert rep.Q == rep.gradient_term - rep.potential_term
    assert rep.gradient_term >= 0 and np.isfinite(rep.Q)
    assert set(json.loads(rep.to_json())) == {"gradient_term", "potential_term", "Q", "cut_cells",
                                              "cutoff", "h"}


def test_quad_form_rejects_boundary_support(radial_case):
    ex, prof = radial_case
    g = _grid(1 / 16)
    with pytest.raises(SupportError):
        quad_form(radial_field(prof, g), ex, np.ones(g.shape))


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_one_d_form_nonnegative(seed):
    rng = np.random.default_rng(seed)
    ex = exponents_from_alpha(float(rng.uniform(0.05, 2.0)), 3)
    g = _grid(1 / 8, extent=1.0)
    v = one_d_field(ex, g)
    phi = rng.standard_normal(g.shape)
    phi[-1, :] = phi[:, 0] = phi[:, -1] = 0.0
    rep = quad_form(v, ex, phi)
    assert rep.potential_term == 0.0
    assert rep.Q >= 0.0


def test_min_generalized_eigen_small():
    rng = np.random.default_rng(11)
    B = rng.standard_normal((5, 5))
    A = B + B.T - 2 * np.eye(5)
    M = np.diag(rng.uniform(0.5, 2.0, 5))
    ref_vals, ref_vecs = linalg.eigh(A, M)
    lam, x, _, res, _ = min_generalized_eigen(A, M, tol=1e-12)
    assert lam == pytest.approx(ref_vals[0], abs=1e-10)
    ref = ref_vecs[:, 0] / math.sqrt(ref_vecs[:, 0] @ M @ ref_vecs[:, 0])
    assert min(np.max(np.abs(x - ref)), np.max(np.abs(x + ref))) <= 1e-10
    assert res <= 1e-12


def test_rayleigh_one_d_stable():
    ex = exponents_from_alpha(0.5, 3)
    v = one_d_field(ex, _grid(1 / 16, extent=1.0))
    res = rayleigh_min(v, ex)
    assert res.lambda_min >= -1e-8
    assert res.residual <= 1e-8
    assert set(json.loads(res.to_json())) >= {"lambda_min", "iterations", "residual"}


def test_rayleigh_minimality_certificate(radial_case):
    ex, prof = radial_case
    g = _grid(1 / 16)
    v = radial_field(prof, g)
    res = rayleigh_min(v, ex)
    form = assemble_form(v, ex)
    rng = np.random.default_rng(5)
    T, Z = g.coords()
    inside = (T < g.tau_max - 1.5 * g.h) & (np.abs(Z) < g.z_max - 1.5 * g.h)
    for _ in range(50):
        phi = np.where(inside, rng.standard_normal(g.shape), 0.0)
        m = mass(form, phi)
        if m > 0:
            assert res.lambda_min <= quad_form(v, ex, phi, form).Q / m + 1e-10


def test_rayleigh_deterministic(radial_case):
    ex, prof = radial_case
    v = radial_field(prof, _grid(1 / 16))
    a, b = rayleigh_min(v, ex), rayleigh_min(v, ex)
    assert a.lambda_min == b.lambda_min
    assert np.array_equal(a.phi, b.phi)


def test_quad_form_matches_second_variation(radial_case):
    """Q(phi) against the fitted eps**2 coefficient for Phi = grad v phi / |grad v|**2."""
    ex, prof = radial_case
    r0 = prof.r0
    c, w = r0, 0.25

    def bump(r):
        s = np.clip(((r - c) / w) ** 2, 0, 1)
        return (1 - s) ** 4, -8 * (1 - s) ** 3 * (r - c) / w**2

    def psi(r):
        _, dv, ddv = prof.evaluate(np.maximum(r, r0))
        p, dp = bump(r)
        out = r >= r0
        return np.where(out, p / dv, p), np.where(out, dp / dv - p * ddv / dv**2, dp)

    def phi(t, z):
        r = np.hypot(t, z)
        ps, _ = psi(r)
        rs = np.where(r > 0, r, 1)
        return np.stack([ps * t / rs, ps * z / rs])

    def dphi(t, z):
        r = np.hypot(t, z)
        ps, dps = psi(r)
        rs = np.where(r > 0, r, 1)
        f, gg = ps / rs, (dps / rs - ps / rs**2) / rs
        x = (t, z)
        return np.stack([np.stack([f * (i == j) + gg * x[i] * x[j] for j in range(2)]) for i in range(2)])

    Phi = VariationSpec(phi, dphi, ((0.0, c + w), (-(c + w), c + w)))
    g = _grid(1 / 64)
    T, Z = g.coords()
    v = radial_field(prof, g)
    rep = verify_expansion(v, Phi, modified_spec(ex))
    Q = quad_form(v, ex, bump(np.hypot(T, Z))[0]).Q
    assert np.sign(rep.fit.E2) == np.sign(Q)
    assert rep.fit.E2 == pytest.approx(Q, rel=5e-3)


# ---------------------------------------------------------------------------
# axisymmetric form and theta probes


def test_axisym_form_one_d_zero():
    ex = exponents_from_alpha(0.5, 3)
    g = _grid(1 / 16, extent=2.5)
    probe = build_theta_test(1.2, 0.1, 1.0, g)
    assert axisym_quad_form(one_d_field(ex, g), ex, probe) == (0.0, 0.0)


def test_axisym_form_radial_oracle(radial_case):
    ex, prof = radial_case
    n, a, b = 3, 1.0, 1.3

    def sphere(k):
        return integrate.quad(lambda t: math.sin(t) ** k, 0, math.pi)[0]

    def f_lhs(r):
        v, dv, _ = prof.evaluate(np.array([r]))
        return v[0] ** ex.alpha * dv[0] ** 2 * _step(r, a, b)[0] ** 2 * r ** (n - 3)

    def f_rhs(r):
        v, dv, _ = prof.evaluate(np.array([r]))
        return v[0] ** ex.alpha * dv[0] ** 2 * _step(r, a, b)[1] ** 2 * r ** (n - 1)

    lhs_ex = (n - 2) * sphere(n - 2) * integrate.quad(f_lhs, prof.r0, b, limit=200)[0]
    rhs_ex = sphere(n) * integrate.quad(f_rhs, a, b, limit=200)[0]
    errs = []
    for h in (1 / 32, 1 / 64, 1 / 128):
        g = _grid(h)
        T, Z = g.coords()
        eta, deta = _step(np.hypot(T, Z), a, b)
        lhs, rhs = axisym_quad_form(radial_field(prof, g), ex, eta, deta**2)
        errs.append(max(abs(lhs / lhs_ex - 1), abs(rhs / rhs_ex - 1)))
    assert errs[-1] <= 1e-3
    assert errs[0] / errs[1] > 3.5 and errs[1] / errs[2] > 3.5


def test_axisym_form_needs_meridian_grid():
    ex = derive_exponents(1.0)
    g = build_line_grid(-1, 1, 0.1)
    with pytest.raises(DomainError):
        axisym_quad_form(one_d_field(ex, g), ex, np.zeros(g.shape))


def test_theta_test_definition():
    g = _grid(1 / 32, extent=2.5)
    T, Z = g.coords()
    r = np.hypot(T, Z)
    zeta, _ = _step(r, 1.0, 2.0)
    np.testing.assert_allclose(build_theta_test(0.0, 0.1, 1.0, g).values, zeta, atol=1e-15)
    theta, eps = 1.5, 0.1
    probe = build_theta_test(theta, eps, 1.0, g)
    plateau = T <= eps
    np.testing.assert_allclose(probe.values[plateau], eps ** (-theta / 2) * zeta[plateau], rtol=1e-14)
    outer = T > eps
    np.testing.assert_allclose(probe.values[outer], T[outer] ** (-theta / 2) * zeta[outer], rtol=1e-14)
    assert not probe.values.flags.writeable
    assert set(probe.split) == {"main", "cutoff"}


@pytest.mark.parametrize("theta", [0.5, 1.5, 2.0])
def test_theta_test_gradient_bound(theta):
    g = _grid(1 / 64, extent=2.5)
    T, _ = g.coords()
    for eps in (0.2, 0.1, 0.05):
        probe = build_theta_test(theta, eps, 1.0, g)
        ring = (T > eps / 2) & (T < eps)
        # on the plateau only the cutoff varies: |grad zeta| <= 15 / (8 R)
        assert np.max(probe.grad_sq[ring]) <= (15 / 8) ** 2 * eps ** (-theta) + 1e-12
        assert np.max(probe.grad_sq[ring]) * eps**2 <= (15 / 8) ** 2


def test_theta_test_needs_room():
    with pytest.raises(SupportError):
        build_theta_test(1.0, 0.1, 1.0, _grid(1 / 8, extent=1.5))
    with pytest.raises(DomainError):
        build_theta_test(1.0, 1.5, 1.0, _grid(1 / 8, extent=2.5))


def test_probe_sweep_rows():
    ex = exponents_from_alpha(0.25, 3)
    g = _grid(1 / 16, extent=2.5)
    rows = theta_probe_sweep(one_d_field(ex, g), ex, [1.3, 1.6])
    assert [r[0] for r in rows] == [1.3, 1.6]
    assert all(r[3] is False for r in rows)


# ---------------------------------------------------------------------------
# theta window


@given(st.floats(3.0, 12.0), st.floats(0.0, 1.0))
@settings(max_examples=1000)
def test_theta_window_feasibility(n, alpha):
    w = theta_window(n, alpha)
    assert w.feasible == (2 * math.sqrt(n - 2) > n - 2 + alpha)
    assert w.lower == n + alpha - 2 and w.upper == 2 * math.sqrt(n - 2)
    assert w.lam == math.sqrt(n - 2)


def test_theta_window_alpha_zero():
    assert theta_window(3, 0.0).feasible_integers == [3, 4, 5]
    assert [n for n in range(3, 10) if theta_window(n, 0.0).feasible] == [3, 4, 5]


@pytest.mark.parametrize("n, threshold", [(4, 2 * math.sqrt(2) - 2), (5, 2 * math.sqrt(3) - 3)])
def test_theta_window_thresholds(n, threshold):
    assert alpha_threshold(n) == pytest.approx(threshold, abs=1e-10)
    assert theta_window(n, threshold - 1e-9).feasible
    assert not theta_window(n, threshold + 1e-9).feasible


def test_theta_window_alpha_above_one():
    w = theta_window(3, 1.5)
    assert not w.feasible and w.reason == "no real roots" and w.n_interval is None
    assert json.loads(w.to_json())["reason"] == "no real roots"


def test_theta_window_bad_input():
    with pytest.raises(DomainError):
        theta_window(2, 0.5)
    with pytest.raises(DomainError):
        theta_window(4, -0.1)


def test_figure1_csv():
    lines = figure1_csv().splitlines()
    assert lines[0] == "alpha,n_lower,n_upper" and len(lines) == 402
    a, lo, hi = map(float, lines[1].split(","))
    assert (a, lo, hi) == (0.0, 2.0, 6.0)
    a, lo, hi = map(float, lines[-1].split(","))
    assert (a, lo, hi) == (1.0, 3.0, 3.0)


# ---------------------------------------------------------------------------
# curvature and the alpha -> 0 limit


def test_curvature_alpha_zero():
    rep = curvature_check(radial_profile(exponents_from_alpha(0.0, 3), 1.0, 3.0, tol=1e-12))
    assert abs(rep.laplacian_limit) <= 1e-6
    assert rep.v_rr == pytest.approx(-rep.H, rel=1e-8)
    assert rep.sign_consistent


def test_curvature_n3_alpha1():
    rep = curvature_check(radial_profile(exponents_from_alpha(1.0, 3), 1.0, 3.0, tol=1e-12))
    assert rep.v_rr == pytest.approx(-1.0, rel=1e-10)
    assert rep.laplacian_limit == pytest.approx(1.0, rel=1e-4)
    assert rep.sign_consistent


@pytest.mark.parametrize("n, alpha, r0", [(4, 0.5, 0.7), (5, 0.25, 2.0), (3, 0.8, 1.3)])
def test_curvature_generic(n, alpha, r0):
    rep = curvature_check(radial_profile(exponents_from_alpha(alpha, n), r0, r0 + 2.0, tol=1e-12))
    assert rep.gap_v_rr <= 1e-4 and rep.gap_laplacian <= 1e-4
    assert rep.H_numeric == pytest.approx(rep.H, rel=1e-3)
    assert rep.sign_consistent


def test_limit_alpha_zero_trivial():
    g = _grid(1 / 8, extent=2.0)
    out = limit_alpha_zero(1.0, 3, [0.5, 0.25], lambda t, z: np.zeros_like(t), g)
    assert all(r["potential"] == 0.0 and r["target"] == 0.0 for r in out["rows"])
