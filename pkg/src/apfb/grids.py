"""Uniform tensor grids, nodal fields and distance to the free boundary.

Two grids are provided.  :class:`LineGrid` is a plain 1D grid with unit
weight.  :class:`AxisymGrid` samples the meridian half-plane ``(tau, z)`` of
an axially symmetric problem in ``R^n``; its nodal measure density is
``tau**(n-2)`` (the angular factor ``|S^{n-2}|`` is dropped throughout).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field as dc_field
from typing import Optional, Union

import numpy as np
from scipy import ndimage

from .errors import DomainError

__all__ = [
    "LineGrid",
    "AxisymGrid",
    "build_line_grid",
    "build_axisym_grid",
    "ScalarField",
    "DistanceField",
    "distance_to_fb",
    "nodal_gradient",
    "default_level",
    "write_field_csv",
    "read_field_csv",
]


def _uniform_axis(lo, hi, h, name):
    if not h > 0:
        raise DomainError(f"grid spacing must be positive, got {h!r}")
    extent = hi - lo
    if not extent > 0:
        raise DomainError(f"{name} extent must be positive, got [{lo}, {hi}]")
    cells = int(round(extent / h))
    if cells < 1 or abs(cells * h - extent) > 1e-9 * max(1.0, abs(extent)):
        raise DomainError(f"{name} extent {extent} is not a multiple of h={h}")
    return np.linspace(lo, hi, cells + 1)


def _spacing(axis):
    d = np.diff(axis)
    h = float(d.mean())
    if np.max(np.abs(d - h)) > 1e-9 * max(h, 1.0):
        raise DomainError("grid axes must be uniformly spaced")
    return h


def _trapezoid_1d(axis):
    w = np.full(axis.shape, _spacing(axis))
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


@dataclass(frozen=True, eq=False)
class LineGrid:
    """Uniform 1D grid ``t_0 < ... < t_N`` with unit measure density."""

    t: np.ndarray
    n: int = 2

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        t.setflags(write=False)
        object.__setattr__(self, "t", t)
        _spacing(t)

    ndim = 1

    @property
    def axes(self):
        return (self.t,)

    @property
    def shape(self):
        return self.t.shape

    @property
    def h(self):
        return _spacing(self.t)

    def coords(self):
        return (self.t,)

    @property
    def weight(self):
        return np.ones(self.shape)

    @property
    def quad_weights(self):
        return _trapezoid_1d(self.t)


@dataclass(frozen=True, eq=False)
class AxisymGrid:
    """Meridian grid over ``[0, tau_max] x [z_min, z_max]`` for dimension ``n``.

    Arrays are indexed ``[i_tau, i_z]``.
    """

    tau: np.ndarray
    z: np.ndarray
    n: int

    def __post_init__(self):
        tau = np.asarray(self.tau, dtype=float)
        z = np.asarray(self.z, dtype=float)
        for a in (tau, z):
            a.setflags(write=False)
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "z", z)
        if tau[0] < 0:
            raise DomainError("tau must be nonnegative")
        if int(self.n) != self.n or self.n < 2:
            raise DomainError(f"axisymmetric grids need n >= 2, got {self.n!r}")
        ht, hz = _spacing(tau), _spacing(z)
        if abs(ht - hz) > 1e-9 * ht:
            raise DomainError("tau and z spacings must agree")

    ndim = 2

    @property
    def axes(self):
        return (self.tau, self.z)

    @property
    def shape(self):
        return (self.tau.size, self.z.size)

    @property
    def h(self):
        return _spacing(self.tau)

    @property
    def tau_max(self):
        return float(self.tau[-1])

    @property
    def z_min(self):
        return float(self.z[0])

    @property
    def z_max(self):
        return float(self.z[-1])

    def coords(self):
        return np.meshgrid(self.tau, self.z, indexing="ij")

    @property
    def weight(self):
        """Nodal density ``tau**(n-2)``; identically one when ``n == 2``."""
        T, _ = self.coords()
        if self.n == 2:
            return np.ones(self.shape)
        return T ** (self.n - 2)

    @property
    def quad_weights(self):
        """Tensor trapezoid weights including the ``tau**(n-2)`` density."""
        return np.outer(_trapezoid_1d(self.tau), _trapezoid_1d(self.z)) * self.weight


Grid = Union[LineGrid, AxisymGrid]


def build_line_grid(t_min, t_max, h, n=2):
    return LineGrid(_uniform_axis(float(t_min), float(t_max), float(h), "t"), n=n)


def build_axisym_grid(tau_max, z_min, z_max, h, n):
    """Uniform meridian grid; see :class:`AxisymGrid`.

    >>> build_axisym_grid(1, -1, 1, 0.1, 3).shape
    (11, 21)
    """
    h = float(h)
    tau = _uniform_axis(0.0, float(tau_max), h, "tau")
    z = _uniform_axis(float(z_min), float(z_max), h, "z")
    return AxisymGrid(tau, z, int(n))


def _readonly(a):
    if a is None:
        return None
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Nodal samples of a field on a grid plus its positivity mask.

    ``gradient`` (shape ``(ndim,) + grid.shape``) is optional; when absent
    :func:`nodal_gradient` falls back to finite differences.  ``level`` is an
    optional signed function that is positive exactly on the mask, vanishes
    linearly at the free boundary and is smooth across it; quadrature uses it
    to place the free boundary inside cut cells.  Fields that are not
    solutions (potentials, test functions) set ``signed=True``.
    """

    grid: Grid
    values: np.ndarray
    mask: np.ndarray
    gradient: Optional[np.ndarray] = None
    level: Optional[np.ndarray] = None
    signed: bool = False
    meta: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        values = _readonly(self.values)
        mask = np.array(self.mask, dtype=bool)
        mask.setflags(write=False)
        if values.shape != self.grid.shape or mask.shape != self.grid.shape:
            raise DomainError("values and mask must match the grid shape")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "gradient", _readonly(self.gradient))
        object.__setattr__(self, "level", _readonly(self.level))
        if self.gradient is not None and self.gradient.shape != (self.grid.ndim,) + self.grid.shape:
            raise DomainError("gradient must have shape (ndim,) + grid.shape")
        if not self.signed:
            if np.any(values[mask] < 0):
                raise DomainError("field must be nonnegative on its mask")
            if np.any(values[~mask] != 0):
                raise DomainError("field must vanish off its mask")
        if self.level is not None:
            if self.level.shape != self.grid.shape:
                raise DomainError("level must match the grid shape")
            if np.any((self.level > 0) != mask):
                raise DomainError("level must be positive exactly on the mask")

    @classmethod
    def from_values(cls, grid, values, **kw):
        """Mask from strict positivity; negative input is clipped to zero."""
        values = np.asarray(values, dtype=float)
        mask = values > 0
        return cls(grid, np.where(mask, values, 0.0), mask, **kw)

    def replace(self, **kw):
        args = dict(grid=self.grid, values=self.values, mask=self.mask, gradient=self.gradient,
                    level=self.level, signed=self.signed, meta=dict(self.meta))
        args.update(kw)
        return ScalarField(**args)


@dataclass(frozen=True, eq=False)
class DistanceField:
    """Nodal distance to the nearest zero node of a field."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _readonly(self.values))


def distance_to_fb(field: ScalarField) -> Optional[DistanceField]:
    """Euclidean distance from every node to the nearest node off the mask.

    Returns ``None`` when the mask covers the whole grid, i.e. when the field
    has no free boundary on this grid.
    """
    if field.mask.all():
        return None
    d = ndimage.distance_transform_edt(field.mask, sampling=field.grid.h)
    return DistanceField(field.grid, d)


def default_level(field: ScalarField) -> np.ndarray:
    """Signed level function: the field itself on the mask, minus the
    distance to the mask outside of it.

    Outside nodes next to the mask instead take the mean of the linear
    extrapolations ``2 w(a) - w(2a - j)`` along the grid axes, capped at
    zero, so the free boundary of a linear field is placed exactly.  Fields
    built from profiles carry an exact level and skip this fallback.
    """
    if field.level is not None:
        return np.asarray(field.level)
    lev = np.array(field.values, dtype=float)
    mask = np.asarray(field.mask)
    if mask.all():
        return lev
    if not mask.any():
        lev[:] = -1.0
        return lev
    out = ndimage.distance_transform_edt(~mask, sampling=field.grid.h)
    lev[~mask] = -out[~mask]
    w = np.where(mask, lev, 0.0)
    total = np.zeros(mask.shape)
    count = np.zeros(mask.shape)
    for axis in range(mask.ndim):
        n = mask.shape[axis]
        if n < 3:
            continue
        for step in (1, -1):
            # j outside, a = j + step and 2a - j = j + 2 step inside
            j = slice(0, n - 2) if step == 1 else slice(2, n)
            a = slice(1, n - 1)
            b = slice(2, n) if step == 1 else slice(0, n - 2)

            def sl(s):
                idx = [slice(None)] * mask.ndim
                idx[axis] = s
                return tuple(idx)

            ok = ~mask[sl(j)] & mask[sl(a)] & mask[sl(b)]
            total[sl(j)] += np.where(ok, 2.0 * w[sl(a)] - w[sl(b)], 0.0)
            count[sl(j)] += ok
    near = count > 0
    lev[near] = np.minimum(total[near] / count[near], 0.0)
    return lev


def _diff_axis(values, mask, h, axis, odd_at_start):
    """Derivative along one axis restricted to the mask.

    Centered where both neighbours are in the mask, second-order one-sided
    into the mask otherwise, first-order when only one neighbour exists.
    """
    v = np.moveaxis(values, axis, 0)
    m = np.moveaxis(mask, axis, 0)
    out = np.zeros_like(v)
    N = v.shape[0]

    def shifted(arr, k, fill):
        res = np.full_like(arr, fill)
        if k > 0:
            res[:-k] = arr[k:]
        elif k < 0:
            res[-k:] = arr[:k]
        else:
            res[:] = arr
        return res

    mp1, mm1 = shifted(m, 1, False), shifted(m, -1, False)
    mp2, mm2 = shifted(m, 2, False), shifted(m, -2, False)
    vp1, vm1 = shifted(v, 1, 0.0), shifted(v, -1, 0.0)
    vp2, vm2 = shifted(v, 2, 0.0), shifted(v, -2, 0.0)

    central = m & mp1 & mm1
    fwd2 = m & ~central & mp1 & mp2
    bwd2 = m & ~central & ~fwd2 & mm1 & mm2
    fwd1 = m & ~central & ~fwd2 & ~bwd2 & mp1
    bwd1 = m & ~central & ~fwd2 & ~bwd2 & ~fwd1 & mm1

    out[central] = ((vp1 - vm1) / (2 * h))[central]
    out[fwd2] = ((-3 * v + 4 * vp1 - vp2) / (2 * h))[fwd2]
    out[bwd2] = ((3 * v - 4 * vm1 + vm2) / (2 * h))[bwd2]
    out[fwd1] = ((vp1 - v) / h)[fwd1]
    out[bwd1] = ((v - vm1) / h)[bwd1]
    if odd_at_start and N > 0:
        out[0][m[0]] = 0.0
    return np.moveaxis(out, 0, axis)


def nodal_gradient(field: ScalarField) -> np.ndarray:
    """Gradient at every node, zero off the mask.

    On an :class:`AxisymGrid` the tau-derivative at the axis is zero by
    symmetry of the even extension.
    """
    if field.gradient is not None:
        return np.asarray(field.gradient)
    grid = field.grid
    h = grid.h
    comps = []
    for ax in range(grid.ndim):
        odd = isinstance(grid, AxisymGrid) and ax == 0
        comps.append(_diff_axis(np.asarray(field.values), field.mask, h, ax, odd))
    return np.stack(comps)


def _fmt(x):
    return format(float(x), ".17g")


def write_field_csv(field: ScalarField, path) -> None:
    """Dump a field as CSV with 17 significant digits (bit-exact round trip)."""
    grid = field.grid
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if isinstance(grid, AxisymGrid):
            w.writerow(["tau", "z", "value", "mask"])
            for i, t in enumerate(grid.tau):
                for j, z in enumerate(grid.z):
                    w.writerow([_fmt(t), _fmt(z), _fmt(field.values[i, j]), int(field.mask[i, j])])
        else:
            w.writerow(["t", "value", "mask"])
            for i, t in enumerate(grid.t):
                w.writerow([_fmt(t), _fmt(field.values[i]), int(field.mask[i])])


def read_field_csv(path, n=None) -> ScalarField:
    """Inverse of :func:`write_field_csv`.  ``n`` is required for meridian grids."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header == ["tau", "z", "value", "mask"]:
        if n is None:
            raise DomainError("dimension n is required to rebuild a meridian grid")
        tau = np.array(sorted({float(r[0]) for r in body}))
        z = np.array(sorted({float(r[1]) for r in body}))
        grid = AxisymGrid(tau, z, int(n))
        vals = np.array([float(r[2]) for r in body]).reshape(grid.shape)
        mask = np.array([r[3] == "1" for r in body]).reshape(grid.shape)
    elif header == ["t", "value", "mask"]:
        grid = LineGrid(np.array([float(r[0]) for r in body]), n=2 if n is None else int(n))
        vals = np.array([float(r[1]) for r in body])
        mask = np.array([r[2] == "1" for r in body])
    else:
        raise DomainError(f"unrecognised field CSV header {header!r}")
    return ScalarField(grid, vals, mask)
