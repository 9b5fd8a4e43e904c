"""Compactly supported vector fields driving inner variations ``x + eps Phi(x)``.

On an :class:`~apfb.grids.AxisymGrid` a field ``Phi = (Phi_tau, Phi_z)`` is
the meridian section of an axially symmetric field in ``R^n``.  Its full
Jacobian is block diagonal: the 2x2 meridian block ``D2`` and the angular
block ``(Phi_tau / tau) Id_{n-2}``.  Gradients of axially symmetric
functions have no angular part, so only ``D2`` ever meets them; traces and
determinants see both blocks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence, Tuple

import numpy as np

from .errors import DomainError, InvertibilityError, SupportError
from .grids import AxisymGrid

__all__ = [
    "VariationSpec",
    "default_ladder",
    "bump_variation",
    "radial_variation",
    "zero_variation",
    "jacobian_blocks",
]


def default_ladder(count=8, top=1e-2):
    """Geometric ladder ``top, top/2, ...`` with ``count`` entries."""
    return tuple(top * 0.5**k for k in range(count))


@dataclass(frozen=True, eq=False)
class VariationSpec:
    """Analytic vector field ``Phi`` with its Jacobian and support box.

    Parameters
    ----------
    phi : callable
        ``phi(*coords)`` returns an array of shape ``(ndim,) + shape``.
    dphi : callable
        ``dphi(*coords)`` returns ``DPhi`` with ``DPhi[i, j] = d_j Phi^i``,
        shape ``(ndim, ndim) + shape``.
    support : sequence of (lo, hi)
        Closed box, one pair per grid axis, outside which ``Phi`` vanishes.
    ladder : tuple of float
        Values of ``eps`` used to sample the energy expansion.
    """

    phi: Callable
    dphi: Callable
    support: Tuple[Tuple[float, float], ...]
    ladder: Tuple[float, ...] = default_ladder()
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "support", tuple(tuple(map(float, s)) for s in self.support))
        object.__setattr__(self, "ladder", tuple(float(e) for e in self.ladder))
        if any(not e > 0 for e in self.ladder):
            raise DomainError("ladder entries must be positive")

    def check_support(self, grid):
        """Raise :class:`SupportError` unless the box sits strictly inside
        ``grid``.  The symmetry axis ``tau = 0`` is not a boundary."""
        if len(self.support) != grid.ndim:
            raise DomainError("support box dimension does not match the grid")
        h = grid.h
        for ax, ((lo, hi), axis) in enumerate(zip(self.support, grid.axes)):
            axis_edge = isinstance(grid, AxisymGrid) and ax == 0
            if not axis_edge and lo <= axis[0] + 0.5 * h:
                raise SupportError(f"support touches the lower grid edge on axis {ax}")
            if hi >= axis[-1] - 0.5 * h:
                raise SupportError(f"support touches the upper grid edge on axis {ax}")

    def evaluate(self, grid):
        """``(Phi, DPhi)`` on the nodes of ``grid``."""
        coords = grid.coords()
        return np.asarray(self.phi(*coords), dtype=float), np.asarray(self.dphi(*coords), dtype=float)

    def check_invertible(self, grid, eps=None):
        """Raise unless ``||eps DPhi|| < 1/2`` everywhere (largest ``eps``)."""
        eps = max(self.ladder) if eps is None else eps
        phi, dphi = self.evaluate(grid)
        d2, ang = jacobian_blocks(grid, phi, dphi)
        mat = np.moveaxis(d2, (0, 1), (-2, -1))
        norm = np.linalg.norm(mat, ord=2, axis=(-2, -1))
        if ang is not None:
            norm = np.maximum(norm, np.abs(ang))
        worst = float(eps * norm.max()) if norm.size else 0.0
        if not worst < 0.5:
            raise InvertibilityError(f"eps * |DPhi| reaches {worst:.3g}; the map may not be invertible")
        return worst


def jacobian_blocks(grid, phi, dphi):
    """Meridian block and angular eigenvalue ``Phi_tau / tau`` (or None).

    At the axis the angular eigenvalue is replaced by its limit
    ``d Phi_tau / d tau``.
    """
    if not isinstance(grid, AxisymGrid) or grid.n == 2:
        return dphi, None
    T, _ = grid.coords()
    with np.errstate(invalid="ignore", divide="ignore"):
        ang = np.where(T > 0, phi[0] / np.where(T > 0, T, 1.0), dphi[0, 0])
    return dphi, ang


def zero_variation(ndim, support, ladder=default_ladder()):
    def phi(*c):
        return np.zeros((ndim,) + np.shape(c[0]))

    def dphi(*c):
        return np.zeros((ndim, ndim) + np.shape(c[0]))

    return VariationSpec(phi, dphi, support, ladder, name="zero")


def _bump(s):
    """``(1 - s)**4`` on ``s < 1`` (s = squared normalized radius), C^3."""
    w = np.clip(1.0 - s, 0.0, None)
    return w**4, -4.0 * w**3


def bump_variation(center: Sequence[float], radius: float, direction: Sequence[float],
                   amplitude: float = 1.0, ladder=default_ladder()):
    """``Phi = amplitude * b(|x - c| / radius) * direction`` with a C^3 bump.

    On a meridian grid a nonzero ``tau`` component is only admissible if the
    ball stays off the axis.
    """
    c = np.asarray(center, dtype=float)
    d = np.asarray(direction, dtype=float)
    R = float(radius)
    nd = c.size
    if nd == 2 and d[0] != 0 and c[0] - R <= 0:
        raise DomainError("a tau component needs the bump to stay off the axis")

    def parts(*x):
        dx = [xi - ci for xi, ci in zip(x, c)]
        s = sum(di * di for di in dx) / R**2
        b, db = _bump(s)
        return dx, b, db

    def phi(*x):
        _, b, _ = parts(*x)
        return amplitude * d.reshape((nd,) + (1,) * b.ndim) * b

    def dphi(*x):
        dx, _, db = parts(*x)
        grad_b = np.stack([db * 2.0 * di / R**2 for di in dx])
        return amplitude * d.reshape((nd, 1) + (1,) * db.ndim) * grad_b[None]

    support = tuple((ci - R, ci + R) for ci in c)
    if nd == 2:
        support = ((max(support[0][0], 0.0), support[0][1]), support[1])
    return VariationSpec(phi, dphi, support, ladder, name="bump")


def radial_variation(r_in: float, r_out: float, amplitude: float = 1.0, center_z: float = 0.0,
                     ladder=default_ladder()):
    """Radial field ``Phi = amplitude * psi(r) * x / r`` about ``(0, center_z)``.

    ``psi(r) = ((r - r_in)(r_out - r))**4 / ((r_out - r_in)/2)**8`` on
    ``r_in < r < r_out`` (peak value one), so ``Phi`` is C^3 and vanishes
    near the origin.  Works on meridian grids; the tau component is odd
    about the axis as required.
    """
    a, b = float(r_in), float(r_out)
    if not 0 < a < b:
        raise DomainError("need 0 < r_in < r_out")
    norm = ((b - a) / 2.0) ** 8

    def psi(r):
        inside = (r > a) & (r < b)
        p = np.where(inside, (r - a) * (b - r), 0.0)
        dp = np.where(inside, (b - r) - (r - a), 0.0)
        return p**4 / norm, 4.0 * p**3 * dp / norm

    def phi(t, z):
        zz = z - center_z
        r = np.hypot(t, zz)
        ps, _ = psi(r)
        with np.errstate(invalid="ignore", divide="ignore"):
            f = np.where(r > 0, ps / np.where(r > 0, r, 1.0), 0.0)
        return amplitude * np.stack([f * t, f * zz])

    def dphi(t, z):
        zz = z - center_z
        r = np.hypot(t, zz)
        ps, dps = psi(r)
        with np.errstate(invalid="ignore", divide="ignore"):
            rs = np.where(r > 0, r, 1.0)
            f = np.where(r > 0, ps / rs, 0.0)
            # d/dr (psi / r) / r
            g = np.where(r > 0, (dps / rs - ps / rs**2) / rs, 0.0)
        x = (t, zz)
        out = np.empty((2, 2) + np.shape(t))
        for i in range(2):
            for j in range(2):
                out[i, j] = g * x[i] * x[j] + (f if i == j else 0.0)
        return amplitude * out

    support = ((0.0, b), (center_z - b, center_z + b))
    return VariationSpec(phi, dphi, support, ladder, name="radial")
