"""Thresholds, the theta window and the spectrum of the stability form."""

from apfb import (alpha_threshold, build_axisym_grid, exponents_from_alpha, one_d_field, rayleigh_min,
                  theta_window)


def main():
    print(f"alpha*(4) = {alpha_threshold(4):.11f}, alpha*(5) = {alpha_threshold(5):.11f}")
    for alpha in (0.0, 0.25, 0.5, 0.9):
        for n in (3, 4, 5, 6):
            w = theta_window(n, alpha)
            window = f"({w.lower:.4f}, {w.upper:.4f})" if w.feasible else "empty"
            print(f"alpha={alpha:<5} n={n}  window {window}")
    for alpha in (0.25, 0.5, 1.0):
        ex = exponents_from_alpha(alpha, 3)
        v = one_d_field(ex, build_axisym_grid(1.0, -1.0, 1.0, 1 / 32, 3))
        print(f"1D solution alpha={alpha}: lambda_min = {rayleigh_min(v, ex).lambda_min:.6f}")


if __name__ == "__main__":
    main()
