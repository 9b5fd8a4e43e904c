"""Fit the energy along a ladder of domain variations and compare with closed forms."""

from apfb import build_axisym_grid, bump_variation, exponents_from_alpha, one_d_field, radial_field
from apfb import radial_profile, verify_expansion
from apfb.energy import modified_spec


def main():
    ex = exponents_from_alpha(0.5, 3)
    Phi = bump_variation((0.6, 0.45), 0.3, (0.3, 1.0))
    spec = modified_spec(ex)
    prof = radial_profile(ex, 0.5, 2.2)
    for h in (1 / 32, 1 / 64):
        grid = build_axisym_grid(1.5, -1.5, 1.5, h, 3)
        for name, v in (("1D", one_d_field(ex, grid)), ("radial", radial_field(prof, grid))):
            rep = verify_expansion(v, Phi, spec)
            print(f"h={h:.5f} {name:6s} E1 fit={rep.fit.E1:+.6e} closed={rep.closed_form['E1']:+.6e}  "
                  f"E2 fit={rep.fit.E2:+.6e} closed={rep.closed_form['E2']:+.6e}")


if __name__ == "__main__":
    main()
