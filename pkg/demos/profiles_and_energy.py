"""One-dimensional and radial profiles, their energies and the u/v correspondence."""

from apfb import (build_axisym_grid, build_line_grid, derive_exponents, energy_ap, energy_mod,
                  exponents_from_alpha, one_d_field, radial_field, radial_profile, v_from_u)


def main():
    ex = derive_exponents(1.2)
    print(f"gamma={ex.gamma} beta={ex.beta:.6f} alpha={ex.alpha:.6f}")
    for h in (1 / 64, 1 / 128, 1 / 256):
        u = one_d_field(ex, build_line_grid(-0.25, 1.0, h), kind="u", analytic_gradient=False)
        eu = energy_ap(u, ex).total
        ev = ex.beta ** (-ex.alpha) * energy_mod(v_from_u(u, ex), ex).total
        print(f"h={h:.5f}  E_ap={eu:.10f}  scaled E_mod={ev:.10f}  rel gap={abs(eu - ev) / eu:.2e}")

    ex = exponents_from_alpha(0.5, 3)
    prof = radial_profile(ex, 0.5, 2.2)
    print(f"radial profile n=3 alpha=0.5: v(2.2)={prof.v[-1]:.6f} v'(2.2)={prof.dv[-1]:.6f}")
    grid = build_axisym_grid(1.5, -1.5, 1.5, 1 / 64, 3)
    rep = energy_mod(radial_field(prof, grid), ex)
    print(f"modified energy on the meridian grid: {rep.total:.8f} "
          f"(gradient {rep.gradient_part:.8f}, potential {rep.potential_part:.8f})")


if __name__ == "__main__":
    main()
