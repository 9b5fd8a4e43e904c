import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from apfb import (EvaluationError, GeneralEnergySpec, ScalarField, SupportError, build_axisym_grid,
                  build_line_grid, bump_variation, derive_exponents, energy_ap, energy_mod,
                  exponents_from_alpha, first_variation, general_energy, one_d_field, radial_field,
                  radial_profile, radial_variation, second_variation_closed_form, u_from_v, v_from_u,
                  verify_expansion)
from apfb.energy import modified_spec
from apfb.maps import VariationSpec, zero_variation


def _zero(grid):
    return ScalarField(grid, np.zeros(grid.shape), np.zeros(grid.shape, bool))


def test_zero_field_energies():
    ex = derive_exponents(0.5)
    for g in (build_line_grid(0, 1, 0.125), build_axisym_grid(1, -1, 1, 0.125, 3)):
        assert energy_ap(_zero(g), ex).total == 0.0
        assert energy_mod(_zero(g), ex).total == 0.0


def _one_d_ap_exact(ex, L):
    return 2 * (1 / ex.beta) ** ex.alpha * L ** (ex.alpha + 1) / (ex.alpha + 1)


@pytest.mark.parametrize("gamma", [0.5, 1.0, 1.5])
def test_one_d_ap_energy(gamma):
    ex = derive_exponents(gamma)
    exact = _one_d_ap_exact(ex, 1.0)
    errs = []
    for h in (1 / 32, 1 / 64, 1 / 128):
        rep = energy_ap(one_d_field(ex, build_line_grid(-0.25, 1.0, h), kind="u"), ex)
        assert rep.total == rep.gradient_part + rep.potential_part
        assert rep.gradient_part >= 0 and rep.potential_part >= 0
        errs.append(abs(rep.total - exact))
    if errs[-1] < 1e-12 * exact:
        return
    assert errs[-1] <= 1e-3 * exact
    assert errs[0] / errs[1] > 3.5 and errs[1] / errs[2] > 3.5


@pytest.mark.parametrize("alpha", [0.25, 1.0, 3.0])
def test_one_d_mod_energy(alpha):
    ex = exponents_from_alpha(alpha, 2)
    g = build_line_grid(-0.25, 1.0, 1 / 64)
    t = g.t
    v = ScalarField(g, np.maximum(t, 0), t > 0, gradient=np.where(t > 0, 1.0, 0.0)[None])
    rep = energy_mod(v, ex)
    assert rep.total == pytest.approx(2 / (alpha + 1), rel=1e-12)
    assert rep.gradient_part == pytest.approx(rep.potential_part, rel=1e-12)


@pytest.mark.parametrize("gamma", [0.8, 1.2])
def test_correspondence_one_d(gamma):
    ex = derive_exponents(gamma)
    gaps = []
    for h in (1 / 32, 1 / 64, 1 / 128):
        u = one_d_field(ex, build_line_grid(-0.25, 1.0, h), kind="u", analytic_gradient=False)
        eu = energy_ap(u, ex).total
        ev = energy_mod(v_from_u(u, ex), ex).total
        gaps.append(abs(eu - ex.beta ** (-ex.alpha) * ev) / eu)
    assert gaps[-1] <= 1e-3
    if gaps[-1] > 1e-12:
        assert gaps[0] / gaps[1] > 3.0 and gaps[1] / gaps[2] > 3.0


def test_correspondence_radial():
    ex = exponents_from_alpha(1.0, 3)
    prof = radial_profile(ex, 0.5, 2.2)
    gaps = []
    for h in (1 / 16, 1 / 32, 1 / 64):
        g = build_axisym_grid(1.5, -1.5, 1.5, h, 3)
        v = radial_field(prof, g, analytic_gradient=False)
        u = u_from_v(v, ex)
        gaps.append(abs(energy_ap(u, ex).total - ex.beta ** (-ex.alpha) * energy_mod(v, ex).total)
                    / energy_ap(u, ex).total)
    assert gaps[-1] <= 1e-3
    assert gaps[0] / gaps[1] > 3.0 and gaps[1] / gaps[2] > 3.0


def test_general_energy_reproduces_named():
    ex = derive_exponents(0.8, 3)
    g = build_axisym_grid(1.0, -1.0, 1.0, 1 / 16, 3)
    u = one_d_field(ex, g, kind="u")
    v = one_d_field(ex, g, kind="v")
    ap = GeneralEnergySpec(lambda w: np.ones_like(w), lambda w: w**ex.gamma, ex.alpha, ex)
    mod = GeneralEnergySpec(lambda w: w**ex.alpha, lambda w: np.ones_like(w), ex.alpha, ex)
    assert general_energy(u, ap).total == energy_ap(u, ex).total
    assert general_energy(v, mod).total == energy_mod(v, ex).total


def test_dirichlet_energy_of_identity():
    g = build_line_grid(0.0, 1.0, 1 / 16)
    w = ScalarField(g, g.t, g.t > 0, signed=True)
    spec = GeneralEnergySpec(lambda x: np.ones_like(x), lambda x: np.zeros_like(x))
    assert general_energy(w, spec).total == pytest.approx(1.0, rel=1e-12)


def test_non_finite_handle_rejected():
    g = build_line_grid(0.0, 1.0, 0.25)
    w = ScalarField(g, g.t, g.t > 0)
    spec = GeneralEnergySpec(lambda x: np.ones_like(x), lambda x: np.log(x - 0.5))
    with np.errstate(invalid="ignore", divide="ignore"), pytest.raises(EvaluationError):
        general_energy(w, spec)


def test_report_json_fields():
    ex = derive_exponents(1.0)
    rep = energy_ap(one_d_field(ex, build_line_grid(-0.25, 1.0, 1 / 16), kind="u"), ex)
    d = json.loads(rep.to_json())
    assert set(d) == {"total", "gradient_part", "potential_part", "h", "exponents"}


@pytest.mark.parametrize("gamma", [1.5, 1.9])
def test_underflowing_levels_are_boundary_nodes(gamma):
    # a level tilted by 1e-151 puts axis nodes at level ~1e-152, where level**alpha underflows
    ex = derive_exponents(gamma, 3)
    g = build_axisym_grid(1.0, -1.0, 1.0, 1 / 16, 3)
    T, Z = g.coords()
    parts = []
    for tilt in (0.0, 2.25e-151):
        lev = np.cos(tilt) * T + np.sin(tilt) * Z
        mask = lev > 0
        u = ScalarField(g, np.where(mask, (np.maximum(lev, 0) / ex.beta) ** ex.beta, 0.0), mask, level=lev,
                        meta={"kind": "u"})
        with np.errstate(all="raise"):
            parts.append(energy_ap(u, ex).potential_part)
    assert np.isfinite(parts).all() and parts[0] == pytest.approx(parts[1], rel=1e-12)


@given(st.floats(0.1, 1.9), st.floats(0.0, 2 * np.pi), st.floats(-0.5, 0.5), st.floats(0.01, 0.5),
       st.booleans())
@settings(max_examples=60, deadline=None)
def test_potential_part_monotone_in_support(gamma, angle, c, dc, exact_level):
    ex = derive_exponents(gamma, 3)
    g = build_axisym_grid(1.0, -1.0, 1.0, 1 / 16, 3)
    T, Z = g.coords()
    parts = []
    for off in (c, c + dc):
        lev = np.cos(angle) * T + np.sin(angle) * Z + off
        mask = lev > 0
        u = ScalarField(g, np.where(mask, (np.maximum(lev, 0) / ex.beta) ** ex.beta, 0.0), mask,
                        level=lev if exact_level else None, meta={"kind": "u"})
        parts.append(energy_ap(u, ex).potential_part)
    assert parts[1] >= parts[0]


def test_zero_variation_gives_zero():
    ex = exponents_from_alpha(0.5, 3)
    g = build_axisym_grid(1.5, -1.5, 1.5, 1 / 16, 3)
    v = radial_field(radial_profile(ex, 0.5, 2.2), g)
    Phi = zero_variation(2, ((0.0, 1.0), (-1.0, 1.0)))
    spec = modified_spec(ex)
    assert first_variation(v, spec, Phi) == 0.0
    assert second_variation_closed_form(v, spec, Phi) == 0.0


def test_support_touching_boundary():
    ex = exponents_from_alpha(0.5, 3)
    g = build_axisym_grid(1.0, -1.0, 1.0, 1 / 16, 3)
    v = one_d_field(ex, g)
    Phi = bump_variation((0.5, 0.6), 0.45, (0.0, 1.0))
    with pytest.raises(SupportError):
        first_variation(v, modified_spec(ex), Phi)


def test_first_variation_one_d_critical():
    ex = exponents_from_alpha(0.5, 3)
    Phi = bump_variation((0.6, 0.45), 0.3, (0.3, 1.0))
    spec = modified_spec(ex)
    vals = []
    for h in (1 / 32, 1 / 64, 1 / 128):
        g = build_axisym_grid(1.5, -1.5, 1.5, h, 3)
        v = one_d_field(ex, g)
        vals.append(abs(first_variation(v, spec, Phi)) / energy_mod(v, ex).total)
    assert vals[-1] <= 1e-5
    assert vals[0] / vals[2] > 10.0


def test_first_variation_radial_matches_ladder():
    ex = exponents_from_alpha(0.5, 3)
    g = build_axisym_grid(1.5, -1.5, 1.5, 1 / 64, 3)
    v = radial_field(radial_profile(ex, 0.5, 2.2), g)
    Phi = radial_variation(0.6, 1.2)
    rep = verify_expansion(v, Phi, modified_spec(ex))
    assert rep.rel_gap["E1"] <= 1e-4
    assert rep.rel_gap["E2"] <= 1e-3


def _quadratic_variation(box):
    # Phi = (tau z, tau^2 - z^2) / 2; DPhi is linear in the coordinates
    def phi(t, z):
        return 0.5 * np.stack([t * z, t * t - z * z])

    def dphi(t, z):
        return 0.5 * np.stack([np.stack([z, t]), np.stack([2 * t, -2 * z])])

    return VariationSpec(phi, dphi, box)


def _second_coefficient_oracle(grad, grid_box, k=24, delta=1e-2):
    """eps**2 coefficient of int |(I + eps D)^{-T} g|^2 det(I + eps D) by
    Gauss-Legendre quadrature and a 5-point second difference in eps."""
    (t0, t1), (z0, z1) = grid_box
    x, w = np.polynomial.legendre.leggauss(k)
    tq = t0 + (t1 - t0) * (x + 1) / 2
    zq = z0 + (z1 - z0) * (x + 1) / 2
    wt = w * (t1 - t0) / 2
    wz = w * (z1 - z0) / 2
    spec = _quadratic_variation(((0.1, 0.2), (0.1, 0.2)))

    def energy(eps):
        tt, zz = np.meshgrid(tq, zq, indexing="ij")
        D = spec.dphi(tt, zz)
        m = np.moveaxis(np.eye(2)[:, :, None, None] + eps * D, (0, 1), (-2, -1))
        q = np.linalg.solve(np.swapaxes(m, -1, -2), np.broadcast_to(grad, m.shape[:-1])[..., None])[..., 0]
        dens = np.sum(q**2, axis=-1) * np.linalg.det(m)
        return wt @ dens @ wz

    f = {j: energy(j * delta) for j in (-2, -1, 0, 1, 2)}
    d2 = (-f[2] + 16 * f[1] - 30 * f[0] + 16 * f[-1] - f[-2]) / (12 * delta**2)
    return d2 / 2


def test_second_variation_polynomial_oracle():
    grad = np.array([1.0, 0.5])
    box = ((0.0, 1.0), (-1.0, 1.0))
    exact = _second_coefficient_oracle(grad, box)
    spec = GeneralEnergySpec(lambda w: np.ones_like(w), lambda w: np.zeros_like(w))
    Phi = _quadratic_variation(((0.0, 0.5), (-0.5, 0.5)))
    errs = []
    for h in (1 / 8, 1 / 16, 1 / 32):
        g = build_axisym_grid(1.0, -1.0, 1.0, h, 2)
        T, Z = g.coords()
        # a tau slope is not even in tau, so the gradient is supplied
        full = np.stack([np.full(g.shape, grad[0]), np.full(g.shape, grad[1])])
        w = ScalarField(g, 3.0 + grad[0] * T + grad[1] * Z, np.ones(g.shape, bool), gradient=full)
        errs.append(abs(second_variation_closed_form(w, spec, Phi) - exact))
    assert errs[-1] <= 1e-3 * abs(exact)
    assert errs[0] / errs[1] > 3.5 and errs[1] / errs[2] > 3.5
