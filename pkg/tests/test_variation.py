import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from apfb import (FitError, InvertibilityError, ScalarField, build_axisym_grid, bump_variation,
                  det_expansion, energy_ladder, exponents_from_alpha, fit_expansion, inverse_map,
                  lemma_a_slopes, normsq_expansion, one_d_field, pullback, radial_field, radial_profile,
                  verify_expansion)
from apfb.energy import modified_spec
from apfb.maps import VariationSpec, default_ladder, zero_variation


@pytest.fixture(scope="module")
def radial_v():
    ex = exponents_from_alpha(0.5, 3)
    g = build_axisym_grid(1.5, -1.5, 1.5, 1 / 32, 3)
    return ex, radial_field(radial_profile(ex, 0.5, 2.2), g)


def test_default_ladder():
    lad = default_ladder()
    assert len(lad) == 8 and lad[0] == 1e-2
    np.testing.assert_allclose(np.array(lad[:-1]) / np.array(lad[1:]), 2.0)


def test_inverse_map_solves_equation():
    Phi = bump_variation((0.6, 0.2), 0.4, (0.5, -1.0))
    y = [np.linspace(0.3, 0.9, 13), np.linspace(-0.1, 0.5, 13)]
    x = inverse_map(Phi, y, 1e-2)
    phi = Phi.phi(*x)
    for i in range(2):
        np.testing.assert_allclose(x[i] + 1e-2 * phi[i], y[i], atol=1e-15)


def test_inverse_map_third_order_series():
    Phi = bump_variation((0.6, 0.2), 0.4, (0.5, -1.0))
    y = [np.array([0.55, 0.7, 0.45]), np.array([0.1, 0.3, 0.25])]
    phi = Phi.phi(*y)
    dphi = Phi.dphi(*y)
    errs = []
    for eps in (1e-2, 5e-3, 2.5e-3):
        x = inverse_map(Phi, y, eps)
        series = [y[i] - eps * phi[i] + eps**2 * np.einsum("j...,j...->...", dphi[i], phi) for i in range(2)]
        errs.append(max(np.max(np.abs(x[i] - series[i])) for i in range(2)))
    for a, b in zip(errs[:-1], errs[1:]):
        assert 8 * 0.8 <= a / b <= 8 * 1.2


def test_invertibility_checked():
    g = build_axisym_grid(1.5, -1.5, 1.5, 1 / 16, 3)
    Phi = bump_variation((0.6, 0.2), 0.3, (0.0, 1.0), amplitude=50.0)
    with pytest.raises(InvertibilityError):
        Phi.check_invertible(g)
    v = one_d_field(exponents_from_alpha(0.5, 3), g)
    with pytest.raises(InvertibilityError):
        pullback(v, Phi, 1e-2)


def test_inverse_map_non_contracting():
    spec = VariationSpec(lambda t, z: np.stack([np.zeros_like(t), 3.0 * z]),
                         lambda t, z: np.zeros((2, 2) + np.shape(t)), ((0.0, 1.0), (-1.0, 1.0)))
    with pytest.raises(InvertibilityError):
        inverse_map(spec, [np.array([0.5]), np.array([0.5])], 1.0)


def test_pullback_zero_is_identity(radial_v):
    _, v = radial_v
    Phi = zero_variation(2, ((0.2, 1.0), (-1.0, 1.0)))
    for eps in (0.0, 1e-2):
        out = pullback(v, Phi, eps)
        assert np.array_equal(out.values, v.values)
        assert np.array_equal(out.mask, v.mask)


def _plateau_translation(c, r1=0.5, r2=0.9):
    """Phi = c on the ball of radius r1 about the origin, C^2 cutoff to 0 at r2."""
    c = np.asarray(c, dtype=float)

    def cut(r):
        s = np.clip((r - r1) / (r2 - r1), 0.0, 1.0)
        return 1 - s**3 * (10 - 15 * s + 6 * s * s), -30 * s * s * (1 - s) ** 2 / (r2 - r1)

    def phi(t, z):
        k, _ = cut(np.hypot(t, z))
        return c.reshape(2, *([1] * np.ndim(t))) * k

    def dphi(t, z):
        r = np.hypot(t, z)
        _, dk = cut(r)
        rs = np.where(r > 0, r, 1.0)
        gk = np.stack([dk * t / rs, dk * z / rs])
        return c.reshape(2, 1, *([1] * np.ndim(t))) * gk[None]

    return VariationSpec(phi, dphi, ((0.0, r2), (-r2, r2)))


def test_pullback_translation():
    errs = []
    for h in (1 / 32, 1 / 64):
        g = build_axisym_grid(1.25, -1.25, 1.25, h, 3)
        T, Z = g.coords()

        def bump(t, z):
            return np.clip(0.09 - t * t - z * z, 0, None) ** 4 * 1e4

        u = bump(T, Z)
        lev = 0.09 - T * T - Z * Z
        field = ScalarField(g, u, lev > 0, level=lev)
        eps = 1e-2
        out = pullback(field, _plateau_translation((0.0, 1.0)), eps)
        errs.append(np.max(np.abs(out.values - bump(T, Z - eps))) / u.max())
    assert errs[-1] <= 1e-3
    assert errs[0] / errs[1] > 3.0


@given(ct=st.floats(0.4, 1.0), cz=st.floats(-0.6, 0.6), rad=st.floats(0.15, 0.4), dt=st.floats(-1, 1),
       dz=st.floats(-1, 1), eps=st.sampled_from(default_ladder()))
@settings(max_examples=25, deadline=None)
def test_pullback_preserves_range(ct, cz, rad, dt, dz, eps, radial_v):
    _, v = radial_v
    dt = dt if ct - rad > 0.05 else 0.0
    Phi = bump_variation((ct, cz), rad, (dt, dz))
    out = pullback(v, Phi, eps)
    assert out.values.min() >= v.values.min()
    assert out.values.max() <= v.values.max()
    # nodes outside the support box keep their values
    T, Z = v.grid.coords()
    far = (np.abs(T - ct) > rad + 1e-12) | (np.abs(Z - cz) > rad + 1e-12)
    assert np.array_equal(out.values[far], v.values[far])


def test_fit_exact_polynomial():
    e = np.array(default_ladder())
    f = fit_expansion(e, 3 + 2 * e + 5 * e**2)
    assert (f.E0, f.E1, f.E2) == pytest.approx((3, 2, 5), abs=1e-10)
    assert f.residual <= 1e-12


def test_fit_absorbs_cubic():
    e = np.array(default_ladder())
    f = fit_expansion(e, 3 + 2 * e + 5 * e**2 + 7 * e**3)
    assert (f.E0, f.E1, f.E2) == pytest.approx((3, 2, 5), abs=1e-10)
    assert f.residual > 0
    anchored = fit_expansion(e, 3 + 2 * e + 5 * e**2 + 7 * e**3, degree=5, e0=3.0)
    assert (anchored.E1, anchored.E2) == pytest.approx((2, 5), abs=1e-8)


def test_fit_errors():
    with pytest.raises(FitError):
        fit_expansion([1e-2, 5e-3, 2.5e-3, 1.25e-3], [1, 2, 3, 4])
    with pytest.raises(FitError):
        fit_expansion([1e-2] * 6, np.arange(6.0))


def test_ladder_shift_stability(radial_v):
    ex, v = radial_v
    spec = modified_spec(ex)
    Phi = bump_variation((0.6, 0.45), 0.3, (0.3, 1.0))
    fits = []
    for top in (1e-2, 8e-3):
        lad = default_ladder(8, top)
        energies = energy_ladder(v, Phi, spec, (0.0,) + lad)
        fits.append(fit_expansion(lad, energies[1:], degree=5, e0=energies[0]))
    assert np.isfinite([fits[0].E1, fits[0].E2]).all()
    assert abs(fits[0].E1 - fits[1].E1) <= 1e-4 * abs(fits[0].E1)
    assert abs(fits[0].E2 - fits[1].E2) <= 1e-4 * abs(fits[0].E2)


def test_verify_zero_variation(radial_v):
    ex, v = radial_v
    rep = verify_expansion(v, zero_variation(2, ((0.2, 1.0), (-1.0, 1.0))), modified_spec(ex))
    assert rep.rel_gap == {"E1": 0.0, "E2": 0.0}


def test_verify_report_json(radial_v):
    ex, v = radial_v
    rep = verify_expansion(v, bump_variation((0.6, 0.45), 0.3, (0.3, 1.0)), modified_spec(ex))
    d = json.loads(rep.to_json())
    assert {"fitted", "closed_form", "rel_gap", "ladder", "h"} <= set(d)
    assert set(d["fitted"]) == {"E0", "E1", "E2"}


def test_fitted_first_variation_vanishes_on_critical_profile():
    ex = exponents_from_alpha(0.5, 3)
    Phi = bump_variation((0.6, 0.45), 0.3, (0.3, 1.0))
    vals = []
    for h in (1 / 32, 1 / 64, 1 / 128):
        g = build_axisym_grid(1.5, -1.5, 1.5, h, 3)
        rep = verify_expansion(one_d_field(ex, g), Phi, modified_spec(ex))
        vals.append(abs(rep.fit.E1) / rep.fit.E0)
        # half-space solutions are stable
        assert rep.fit.E2 >= -1e-8 * rep.fit.E0
    assert vals[0] / vals[2] >= 16 * 0.8 or vals[-1] <= 1e-9


def test_det_examples():
    eps = 0.1
    exact, trunc, err = det_expansion(np.eye(2), eps)
    assert exact == pytest.approx((1 + eps) ** 2, rel=1e-15)
    assert trunc == 1 + 2 * eps + eps**2 and err == pytest.approx(0.0, abs=1e-15)
    assert det_expansion([[0.0, 1.0], [0.0, 0.0]], eps) == (1.0, 1.0, 0.0)


@pytest.mark.parametrize("size, kind", [(3, "det"), (4, "normsq")])
def test_expansion_error_ratio(size, kind):
    rng = np.random.default_rng(7)
    errs = np.zeros(2)
    for _ in range(100):
        A = rng.uniform(-1, 1, (size, size))
        B = rng.uniform(-1, 1, (size, size))
        q = rng.uniform(-1, 1, size)
        for j, eps in enumerate((1e-2, 5e-3)):
            err = det_expansion(A, eps)[2] if kind == "det" else normsq_expansion(A, B, q, eps)[2]
            errs[j] += abs(err)
    assert 8 * 0.8 <= errs[0] / errs[1] <= 8 * 1.2


def test_normsq_trivial():
    q = np.array([1.0, -2.0, 0.5])
    Z = np.zeros((3, 3))
    assert normsq_expansion(Z, Z, q, 0.1) == (q @ q, q @ q, 0.0)
    A = np.arange(9.0).reshape(3, 3)
    assert normsq_expansion(A, A, np.zeros(3), 0.1) == (0.0, 0.0, 0.0)


def test_lemma_a_slopes():
    res = lemma_a_slopes(samples=50, seed=3)
    assert res[2]["det"]["exact"]
    for size, entry in res.items():
        for name in ("det", "normsq"):
            if entry[name]["exact"]:
                continue
            assert 2.7 <= entry[name]["slope"] <= 3.3
