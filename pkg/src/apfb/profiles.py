"""Exact and shot solutions: the 1D power profile, radial profiles of the
modified equation, homogeneous cones, and the u <-> v change of variables.

All profiles are expressed first through ``v`` (the variable in which the
free-boundary condition reads ``|grad v| = 1``); ``u = (v / beta)**beta``.
Sampling a profile on a grid produces a :class:`~apfb.grids.ScalarField`
carrying an exact signed level function, so that quadrature can locate the
free boundary inside cut cells, and (optionally) the analytic gradient.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicHermiteSpline, PchipInterpolator
from scipy.optimize import brentq

from .errors import BracketError, DomainError, ProfileDegenerateError, SolverError
from .exponents import Exponents
from .grids import AxisymGrid, LineGrid, ScalarField, _diff_axis

__all__ = [
    "OneDProfile",
    "RadialProfile",
    "ConeProfile",
    "NoFreeBoundary",
    "ConeScan",
    "one_d_profile",
    "radial_profile",
    "cone_shoot",
    "cone_solve",
    "cone_scan",
    "cone_rk4_mismatch",
    "v_from_u",
    "u_from_v",
    "v_tau_field",
    "one_d_field",
    "radial_field",
    "cone_field",
]


# ---------------------------------------------------------------------------
# 1D power profile


@dataclass(frozen=True, eq=False)
class OneDProfile:
    """``u(t) = (t_+ / beta)**beta`` sampled with analytic derivatives."""

    exponents: Exponents
    t: np.ndarray
    u: np.ndarray
    du: np.ndarray
    ddu: np.ndarray

    def ode_residual(self):
        """``|u'' - (gamma/2) u**(gamma-1)| / u**(gamma-1)`` at ``t > 0``."""
        g = self.exponents.gamma
        pos = self.t > 0
        scale = self.u[pos] ** (g - 1.0)
        return np.abs(self.ddu[pos] - 0.5 * g * scale) / scale

    def equipartition_gap(self):
        """Relative gap ``| |u'|**2 - u**gamma | / u**gamma`` at ``t > 0``."""
        pos = self.t > 0
        ug = self.u[pos] ** self.exponents.gamma
        return np.abs(self.du[pos] ** 2 - ug) / ug

    def table(self):
        return ["t", "u", "du", "ddu"], [self.t, self.u, self.du, self.ddu]

    def sidecar(self):
        return {"kind": "one_d", "exponents": self.exponents.to_dict()}


def one_d_profile(exponents: Exponents, grid_1d) -> OneDProfile:
    """Sample the one-dimensional solution on ``grid_1d`` (array or LineGrid)."""
    if not 0.0 < exponents.gamma < 2.0:
        raise DomainError("the 1D power profile needs gamma in (0, 2)")
    t = np.asarray(grid_1d.t if isinstance(grid_1d, LineGrid) else grid_1d, dtype=float)
    b = exponents.beta
    x = np.maximum(t, 0.0) / b
    u = x ** b
    du = x ** (b - 1.0)
    with np.errstate(divide="ignore"):
        ddu = np.where(x > 0, (b - 1.0) / b * x ** (b - 2.0), np.inf if b < 2 else (0.5 if b == 2 else 0.0))
    return OneDProfile(exponents, t, u, du, ddu)


# ---------------------------------------------------------------------------
# Radial profiles of the modified equation


def _radial_rhs(alpha, n):
    def rhs(r, y):
        v, dv = y
        return [dv, 0.5 * alpha * (1.0 - dv * dv) / v - (n - 1) * dv / r]

    return rhs


@dataclass(frozen=True, eq=False)
class RadialProfile:
    """Exterior radial solution ``v(r)`` with zero ball of radius ``r0``.

    Values below ``r0 + s0`` come from the three-term series at ``r0``, the
    rest from the dense output of the adaptive integrator.
    """

    exponents: Exponents
    r0: float
    r_max: float
    tol: float
    s0: float
    a: float
    b: float
    r: np.ndarray
    v: np.ndarray
    dv: np.ndarray
    ddv: np.ndarray
    _sol: object = dc_field(repr=False, default=None)

    def _series(self, s):
        v = s + self.a * s**2 + self.b * s**3
        dv = 1.0 + 2 * self.a * s + 3 * self.b * s**2
        ddv = 2 * self.a + 6 * self.b * s
        return v, dv, ddv

    def evaluate(self, r):
        """``(v, v', v'')`` at radii ``r`` (zero inside the ball)."""
        r = np.asarray(r, dtype=float)
        if np.any(r > self.r_max * (1 + 1e-12)):
            raise DomainError(f"radius beyond the profile range r_max={self.r_max}")
        v = np.zeros(r.shape)
        dv = np.zeros(r.shape)
        ddv = np.zeros(r.shape)
        s = r - self.r0
        near = (s >= 0) & (s <= self.s0)
        far = s > self.s0
        if near.any():
            v[near], dv[near], ddv[near] = self._series(s[near])
        if far.any():
            y = self._sol(r[far])
            v[far], dv[far] = y[0], y[1]
            al, n = self.exponents.alpha, self.exponents.n
            ddv[far] = 0.5 * al * (1 - y[1] ** 2) / y[0] - (n - 1) * y[1] / r[far]
        return v, dv, ddv

    def one_minus_grad_sq(self, r):
        """``1 - v'(r)**2`` evaluated directly (never as a difference of
        separately computed singular pieces)."""
        _, dv, _ = self.evaluate(r)
        return (1.0 - dv) * (1.0 + dv)

    def ode_residual(self, r, step=1e-3):
        """``v'' + (n-1) v'/r - (alpha/2)(1 - v'^2)/v`` with ``v''`` from a
        five-point difference of the interpolated ``v'``."""
        r = np.asarray(r, dtype=float)
        d = step * np.minimum(1.0, (r - self.r0) / 4.0)
        # shift the stencil left where it would leave the profile range
        back = r + 2 * d > self.r_max
        c = np.where(back, -2.0, 0.0)
        f = [self.evaluate(np.minimum(r + (k + c) * d, self.r_max))[1] for k in (-2, -1, 0, 1, 2)]
        central = (f[0] - 8 * f[1] + 8 * f[3] - f[4]) / (12 * d)
        # derivative at the right end of the stencil, fourth order
        right = (3 * f[0] - 16 * f[1] + 36 * f[2] - 48 * f[3] + 25 * f[4]) / (12 * d)
        ddv = np.where(back, right, central)
        v, dv, _ = self.evaluate(r)
        al, n = self.exponents.alpha, self.exponents.n
        return ddv + (n - 1) * dv / r - 0.5 * al * (1.0 - dv) * (1.0 + dv) / v

    def table(self):
        return ["r", "v", "dv", "ddv"], [self.r, self.v, self.dv, self.ddv]

    def sidecar(self):
        return {
            "kind": "radial",
            "exponents": self.exponents.to_dict(),
            "r0": self.r0,
            "r_max": self.r_max,
            "tol": self.tol,
            "series_radius": self.s0,
            "ddv_at_r0": 2 * self.a,
        }


def radial_profile(exponents: Exponents, r0: float, r_max: float, tol: float = 1e-10,
                   samples: int = 401) -> RadialProfile:
    """Shoot the radial modified equation outward from the free boundary.

    Solves ``v'' + (n-1) v'/r = (alpha/2)(1 - v'^2)/v`` with ``v(r0) = 0`` and
    ``v'(r0) = 1``.  The launch uses ``v = s + a s^2 + b s^3`` with
    ``s = r - r0``::

        a = -(n-1) / (2 (1+alpha) r0)
        b = -(n-1) (2a - 1/r0) / (3 (2+alpha) r0)

    Raises
    ------
    ProfileDegenerateError
        If ``v'`` vanishes before ``r_max``.
    SolverError
        If the integrator cannot meet ``tol``.
    """
    r0, r_max, tol = float(r0), float(r_max), float(tol)
    if not r0 > 0:
        raise DomainError("r0 must be positive")
    if not r_max > r0:
        raise DomainError("r_max must exceed r0")
    if not tol > 0:
        raise DomainError("tol must be positive")
    al, n = exponents.alpha, exponents.n
    a = -(n - 1) / (2.0 * (1.0 + al) * r0)
    b = -(n - 1) * (2.0 * a - 1.0 / r0) / (3.0 * (2.0 + al) * r0)
    # truncation of the series in v' is ~ s0**3; keep it far below tol
    s0 = min(1e-4, 0.01 * tol ** (1.0 / 3.0)) * r0
    s0 = min(s0, 0.01 * (r_max - r0))
    y0 = [s0 + a * s0**2 + b * s0**3, 1.0 + 2 * a * s0 + 3 * b * s0**2]

    def flat(r, y):
        return y[1]

    flat.terminal = True
    flat.direction = -1
    # the 1/v in the equation amplifies errors in v' near r0 by ~1/(r - r0)
    rtol = max(min(tol * 1e-4, 1e-12), 2.5e-14)
    sol = solve_ivp(_radial_rhs(al, n), (r0 + s0, r_max), y0, method="DOP853", rtol=rtol,
                    atol=rtol * 1e-2, dense_output=True, events=flat)
    if sol.status == 1:
        raise ProfileDegenerateError(f"v' vanished at r={sol.t_events[0][0]:.6g} before r_max",
                                     residual=float(sol.t_events[0][0]))
    if sol.status != 0:
        raise SolverError(f"radial integration failed: {sol.message}")
    prof = RadialProfile(exponents, r0, r_max, tol, s0, a, b, np.empty(0), np.empty(0), np.empty(0),
                         np.empty(0), sol.sol)
    r = np.linspace(r0, r_max, samples)
    v, dv, ddv = prof.evaluate(r)
    object.__setattr__(prof, "r", r)
    object.__setattr__(prof, "v", v)
    object.__setattr__(prof, "dv", dv)
    object.__setattr__(prof, "ddv", ddv)
    return prof


# ---------------------------------------------------------------------------
# Homogeneous cones v = r h(theta)


@dataclass(frozen=True, eq=False)
class NoFreeBoundary:
    """Outcome of a shot that never reaches ``h = 0``.

    ``mismatch`` is ``h_min**alpha`` when the descent turned around at a
    positive minimum ``h_min`` (the continuation of the crossing mismatch),
    and ``None`` when ``h`` stayed positive up to the far pole.
    """

    h0: float
    family: str
    mismatch: Optional[float]
    theta_min: Optional[float] = None


@dataclass(frozen=True, eq=False)
class ConeProfile:
    """Shot cone profile on the unit sphere.

    Attributes
    ----------
    theta0 : float
        Polar angle of the free boundary.  For the ``"equator"`` family the
        positive set is the band ``pi - theta0 < theta < theta0``.
    mismatch : float
        Value at the free boundary of ``C = (1 - h'^2) h**alpha``.  Zero
        exactly at a cone; negative when ``h`` hits zero too steeply.
    slope_mismatch : float or None
        ``h'(theta0) + 1``; ``None`` when the slope is infinite.
    theta, h, dh : ndarray
        Samples of the shot from its starting angle to ``theta0``.
    """

    exponents: Exponents
    h0: float
    family: str
    theta0: float
    mismatch: float
    slope_mismatch: Optional[float]
    theta: np.ndarray
    h: np.ndarray
    dh: np.ndarray
    tol: float
    _h_spline: object = dc_field(repr=False, default=None)
    _dh_spline: object = dc_field(repr=False, default=None)

    @property
    def is_flat(self):
        return self.family == "axis" and abs(self.theta0 - 0.5 * math.pi) < 1e-6 and abs(self.h0 - 1) < 1e-6

    def _half(self, th):
        inside = (th >= self.theta[0]) & (th < self.theta0)
        t = np.clip(th, self.theta[0], self.theta0)
        h = np.where(inside, self._h_spline(t), 0.0)
        dh = np.where(inside, self._dh_spline(t), 0.0)
        return np.maximum(h, 0.0), dh

    def evaluate(self, theta):
        """``(h, h')`` at polar angles in ``[0, pi]``; zero off the positive set."""
        th = np.asarray(theta, dtype=float)
        if self.family == "axis":
            return self._half(th)
        mirrored = th < 0.5 * math.pi
        h, dh = self._half(np.where(mirrored, math.pi - th, th))
        return h, np.where(mirrored, -dh, dh)

    def angular_level(self, theta):
        """Signed angular distance to the free boundary, positive inside."""
        th = np.asarray(theta, dtype=float)
        if self.family == "axis":
            return self.theta0 - th
        return np.minimum(self.theta0 - th, th - (math.pi - self.theta0))

    def table(self):
        return ["theta", "h", "dh"], [self.theta, self.h, self.dh]

    def sidecar(self):
        return {
            "kind": "cone",
            "family": self.family,
            "exponents": self.exponents.to_dict(),
            "h0": self.h0,
            "theta0": self.theta0,
            "mismatch": self.mismatch,
            "slope_mismatch": self.slope_mismatch,
            "tol": self.tol,
        }


def _cone_rhs(alpha, n):
    def rhs(th, y):
        h, dh = y
        return [dh, 0.5 * alpha * (1.0 - h * h - dh * dh) / h - (n - 2) * dh / math.tan(th) - (n - 1) * h]

    return rhs


def _hpow(h, alpha):
    if h > 0:
        return h**alpha
    return 1.0 if alpha == 0 else 0.0


def _normal_rhs(alpha, n):
    # independent variable h (decreasing), state (theta, C) with C = (1 - h'^2) h^alpha:
    #   dtheta/dh = 1/p,  dC/dh = alpha h^(alpha+1) + 2 h^alpha ((n-2) cot(theta) p + (n-1) h)
    # where p = h' = -sqrt(1 - C h^-alpha), written without negative powers of h
    def rhs(h, y):
        th, C = y
        ha = _hpow(h, alpha)
        sq = math.sqrt(ha)
        root = math.sqrt(max(ha - C, 0.0))
        inv_p = -sq / max(root, 1e-30)
        ha_p = -sq * root
        dC = alpha * ha * h + 2.0 * (n - 2) / math.tan(th) * ha_p + 2.0 * (n - 1) * ha * h
        return [inv_p, dC]

    return rhs


def _turn_curvature(alpha, n, p, y):
    th, h = y
    return 0.5 * alpha * (1.0 - h * h - p * p) / h - (n - 2) * p / math.tan(th) - (n - 1) * h


def _turn_rhs(alpha, n):
    # independent variable p = h' rising to 0, state (theta, h); valid while h'' > 0
    def rhs(p, y):
        k = _turn_curvature(alpha, n, p, y)
        return [1.0 / k, p / k]

    return rhs


def _axis_start(alpha, n, h0, delta):
    c2 = 0.5 * (0.5 * alpha * (1.0 - h0 * h0) / h0 - (n - 1) * h0) / (n - 1)
    return [h0 + c2 * delta * delta, 2.0 * c2 * delta]


_BLOWUP = 1e6
_ENTER_SLOPE = 0.7   # |h'| needed to switch to the normal form
_EXIT_SLOPE = 0.5    # |h'| at which the normal form hands back


def _event(fun, direction=0):
    fun.terminal = True
    fun.direction = direction
    return fun


def cone_shoot(exponents: Exponents, h0: float, tol: float = 1e-10, family: str = "axis",
               switch_ratio: float = 0.1):
    """Integrate the cone equation from ``h(start) = h0``, ``h'(start) = 0``.

    ``family="axis"`` starts at the pole ``theta = 0`` (axis regularity);
    ``family="equator"`` starts at ``theta = pi/2`` and produces profiles
    symmetric about the equator.  The equation on the sphere is::

        h'' + (n-2) cot(theta) h' + (n-1) h = (alpha/2)(1 - h^2 - h'^2)/h

    Once ``h`` is below ``switch_ratio * h0`` and falling steeply, the shot
    continues in the variables ``(theta, C)`` as functions of ``h``, with
    ``C = (1 - h'^2) h**alpha``.  This removes the ``0/0`` at the free
    boundary.  If the descent flattens out again the shot returns to the
    angle variable.  The mismatch is ``C`` at ``h = 0``, or ``C`` at the
    turning point (``h_min**alpha``) if ``h`` turns around before reaching
    zero, in which case a :class:`NoFreeBoundary` is returned.

    Returns
    -------
    ConeProfile or NoFreeBoundary
    """
    h0 = float(h0)
    if not h0 > 0:
        raise DomainError("h0 must be positive")
    n, al = exponents.n, exponents.alpha
    if n < 3:
        raise DomainError("cone shooting needs n >= 3")
    if family not in ("axis", "equator"):
        raise DomainError(f"unknown cone family {family!r}")
    rtol = max(float(tol), 1e-13)
    atol = rtol * 1e-2
    th_end = math.pi - 1e-6
    h_sw = switch_ratio * h0

    if family == "axis":
        delta = 1e-4
        th, (h, dh) = delta, _axis_start(al, n, h0, delta)
        samples = [(0.0, h0, 0.0)]
    else:
        th, h, dh = 0.5 * math.pi, h0, 0.0
        samples = []

    ev_low = _event(lambda t, y: y[0] - h_sw, -1)
    ev_steep = _event(lambda t, y: y[1] + _ENTER_SLOPE, -1)
    ev_min = _event(lambda t, y: y[1], 1)
    ev_zero = _event(lambda t, y: y[0], -1)
    ev_blow = _event(lambda t, y: _BLOWUP - abs(y[1]))
    ev_flat = _event(lambda t, y: (1.0 - _EXIT_SLOPE**2) * _hpow(t, al) - y[1], -1)
    ev_pole = _event(lambda t, y: th_end - y[0])
    ev_convex = _event(lambda p, y: _turn_curvature(al, n, p, y), -1)

    def record_theta(sol, t0, t1):
        k = max(int(2000 * (t1 - t0) / math.pi), 20)
        ts = np.linspace(t0, t1, k + 1)[1:]
        y = sol(ts)
        samples.extend(zip(ts, y[0], y[1]))

    crossing = None
    for _ in range(100):
        # events just fired sit on their thresholds up to root-finding error
        low = h <= h_sw * (1 + 1e-9)
        steep = dh <= -_ENTER_SLOPE * (1 - 1e-9)
        if not (low and steep):
            events = [ev_min, ev_zero, ev_blow]
            if not low:
                events.append(ev_low)
            if not steep:
                events.append(ev_steep)
            with np.errstate(all="ignore"):
                s1 = solve_ivp(_cone_rhs(al, n), (th, th_end), [h, dh], method="DOP853", rtol=rtol,
                               atol=atol, dense_output=True, events=events)
            if s1.status == -1:
                raise SolverError(f"cone integration failed at h0={h0}: {s1.message}")
            t_stop = float(s1.t[-1])
            record_theta(s1.sol, th, t_stop)
            fired = [e for e, te in zip(events, s1.t_events) if te.size]
            th, (h, dh) = t_stop, s1.y[:, -1]
            if not fired:
                return NoFreeBoundary(h0, family, None)
            if ev_blow in fired:
                raise SolverError(f"h' exceeded {_BLOWUP:g} at h0={h0}", residual=float(th))
            if ev_min in fired:
                return NoFreeBoundary(h0, family, max(h, 0.0) ** al, th)
            if ev_zero in fired:
                if al > 0:
                    raise SolverError(f"finite-slope crossing at h0={h0} with alpha > 0")
                crossing = (th, (1.0 - dh) * (1.0 + dh), dh + 1.0)
                break
            continue
        # normal form in h
        C = (1.0 - dh) * (1.0 + dh) * _hpow(h, al)
        with np.errstate(all="ignore"):
            s2 = solve_ivp(_normal_rhs(al, n), (h, 0.0), [th, C], method="DOP853", rtol=rtol, atol=atol,
                           dense_output=True, events=[ev_flat, ev_pole])
        if s2.status == -1:
            raise SolverError(f"normal-form integration failed at h0={h0}: {s2.message}")
        h_stop = float(s2.t[-1])
        hs = h_stop + (h - h_stop) * (1.0 - np.linspace(0.0, 1.0, 801)[1:]) ** 1.5
        Y = s2.sol(hs)
        with np.errstate(all="ignore"):
            ha = np.array([_hpow(x, al) for x in hs])
            p = -np.sqrt(np.maximum(1.0 - np.where(ha > 0, Y[1] / np.where(ha > 0, ha, 1.0), -np.inf), 0.0))
        samples.extend(zip(Y[0], hs, p))
        if s2.t_events[1].size:
            return NoFreeBoundary(h0, family, None)
        if s2.t_events[0].size:
            th, C = s2.y[:, -1]
            h = h_stop
            if h <= 1e-12 * h_sw:
                # turns around at a height below resolution; C is already final
                return NoFreeBoundary(h0, family, float(C), float(th))
            dh = -math.sqrt(max(1.0 - C / _hpow(h, al), 0.0))
            if al == 0:
                continue
            # the descent is flattening: finish it with the slope as the variable
            with np.errstate(all="ignore"):
                s3 = solve_ivp(_turn_rhs(al, n), (dh, 0.0), [th, h], method="DOP853", rtol=rtol,
                               atol=atol * h, events=[ev_convex])
            if s3.status == -1:
                raise SolverError(f"turnaround integration failed at h0={h0}: {s3.message}")
            th, h = s3.y[:, -1]
            if s3.t_events[0].size:
                dh = float(s3.t[-1])
                continue
            return NoFreeBoundary(h0, family, float(h) ** al, float(th))
        th0, m = float(s2.y[0, -1]), float(s2.y[1, -1])
        if al == 0:
            slope = 1.0 - math.sqrt(max(1.0 - m, 0.0))
        else:
            slope = 0.0 if m == 0 else None
        crossing = (th0, m, slope)
        break
    else:
        raise SolverError(f"cone shot at h0={h0} kept switching variables")

    th0, m, slope = crossing
    arr = np.array(sorted(samples))
    keep = np.concatenate([[True], np.diff(arr[:, 0]) > 1e-14])
    arr = arr[keep]
    arr = arr[arr[:, 0] <= th0]
    if arr[-1, 0] < th0:
        end_slope = slope - 1.0 if slope is not None else -_BLOWUP
        arr = np.vstack([arr, [th0, 0.0, end_slope]])
    arr[-1, 1] = 0.0
    if slope is None and abs(m) <= max(float(tol), 1e-8):
        # converged: C = 0 at h = 0 means |grad v| = 1, i.e. h' = -1
        arr[-1, 2] = -1.0
        bad = ~np.isfinite(arr[:, 2])
        bad[-1] = False
        if bad.any():
            arr = arr[~bad]
    t, hv, dv = arr.T
    dv_fin = np.where(np.isfinite(dv), dv, -_BLOWUP)
    h_spline = CubicHermiteSpline(t, hv, dv_fin)
    dh_spline = PchipInterpolator(t, dv_fin)
    return ConeProfile(exponents, h0, family, float(th0), float(m), slope, t, hv, dv_fin, float(tol),
                       _h_spline=h_spline, _dh_spline=dh_spline)


def _mismatch(exponents, h0, tol, family):
    res = cone_shoot(exponents, h0, tol, family)
    return res.mismatch if res.mismatch is not None else math.nan


def cone_solve(exponents, bracket, tol=1e-10, family="axis", mismatch=None):
    """Bisect (Brent) on ``h0`` until the cone mismatch vanishes.

    ``mismatch`` overrides the shooting map (a callable ``h0 -> m``); the
    return value is then the root itself rather than a :class:`ConeProfile`.

    Raises
    ------
    BracketError
        If the mismatch does not change sign over ``bracket``.
    """
    lo, hi = (float(b) for b in bracket)
    f = mismatch if mismatch is not None else (lambda h: _mismatch(exponents, h, tol, family))
    flo, fhi = f(lo), f(hi)
    if not (np.isfinite(flo) and np.isfinite(fhi)) or flo * fhi > 0:
        raise BracketError(f"mismatch has no sign change on [{lo}, {hi}]: m = ({flo}, {fhi})")
    if flo == 0:
        root = lo
    elif fhi == 0:
        root = hi
    else:
        try:
            root = brentq(f, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=200)
        except ValueError as exc:
            # a shot inside the bracket produced no mismatch
            raise SolverError(f"cone bisection failed on [{lo}, {hi}]: {exc}") from exc
    if mismatch is not None:
        return root
    # the root may sit on the turning side; step across it if needed
    m = None
    for x in (root, root * (1 + 1e-13), root * (1 - 1e-13), root * (1 + 1e-12), root * (1 - 1e-12)):
        prof = cone_shoot(exponents, x, tol, family)
        m = prof.mismatch
        if isinstance(prof, ConeProfile) and abs(prof.mismatch) <= max(tol, 1e-8):
            return prof
    raise SolverError(f"cone bisection did not converge: m={m}", residual=m)


@dataclass(frozen=True, eq=False)
class ConeScan:
    """Mismatch table over a set of ``h0`` values and the cones found."""

    exponents: Exponents
    family: str
    h0: np.ndarray
    mismatch: np.ndarray
    cones: list
    failures: list

    @property
    def nonflat(self):
        return [c for c in self.cones if not c.is_flat]

    def summary(self):
        found = [c.sidecar() for c in self.nonflat]
        return {
            "exponents": self.exponents.to_dict(),
            "family": self.family,
            "h0_range": [float(self.h0[0]), float(self.h0[-1])],
            "h0_count": int(self.h0.size),
            "outcome": "cone found" if found else "none found in scanned range",
            "cones": found,
            "flat_roots": int(len(self.cones) - len(found)),
            "failures": self.failures,
        }


def cone_scan(exponents, h0_values=None, tol=1e-10, family="axis", threads=1):
    """Tabulate the mismatch over ``h0`` and refine every sign change.

    Defaults to 200 logarithmically spaced ``h0`` in ``[1e-2, 10]``.  Shots
    are independent and may run on ``threads`` workers; results are merged
    in ``h0`` order.
    """
    h0s = np.logspace(-2, 1, 200) if h0_values is None else np.asarray(h0_values, dtype=float)
    h0s = np.sort(h0s)

    def one(h):
        try:
            return _mismatch(exponents, h, tol, family)
        except SolverError:
            return math.nan

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            ms = list(ex.map(one, h0s))
    else:
        ms = [one(h) for h in h0s]
    ms = np.array(ms)
    cones, failures = [], []
    for i in range(len(h0s) - 1):
        a, b = ms[i], ms[i + 1]
        if not (np.isfinite(a) and np.isfinite(b)):
            continue
        if a == 0 or a * b < 0:
            try:
                prof = cone_solve(exponents, (h0s[i], h0s[i + 1]) if a != 0 else (h0s[i], h0s[i]), tol,
                                  family) if a * b < 0 else cone_shoot(exponents, h0s[i], tol, family)
                if isinstance(prof, ConeProfile):
                    cones.append(prof)
            except (SolverError, BracketError) as exc:
                failures.append({"bracket": [float(h0s[i]), float(h0s[i + 1])], "error": str(exc)})
    return ConeScan(exponents, family, h0s, ms, cones, failures)


def cone_rk4_mismatch(exponents, h0, step=1e-5, family="axis", switch_ratio=0.1):
    """Brute-force fixed-step RK4 of the same staged shot, in plain floats.

    Independent of the adaptive integrator and its event location; used as
    an oracle for :func:`cone_shoot`.  Stage switches are located by a
    secant step onto the threshold.  Returns the mismatch, or ``None`` if no
    turn or crossing happens before the far pole.
    """
    n, al = exponents.n, exponents.alpha
    h_sw = switch_ratio * h0

    def rk4(f, x, y, dx):
        k1 = f(x, y)
        k2 = f(x + dx / 2, [y[0] + dx / 2 * k1[0], y[1] + dx / 2 * k1[1]])
        k3 = f(x + dx / 2, [y[0] + dx / 2 * k2[0], y[1] + dx / 2 * k2[1]])
        k4 = f(x + dx, [y[0] + dx * k3[0], y[1] + dx * k3[1]])
        return [y[i] + dx / 6 * (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i]) for i in range(2)]

    def march(f, x, y, dx, x_end, stops):
        # advance until one of the stop functions g(x, y) changes sign or x_end is reached
        while (x_end - x) * dx > 0:
            d = dx if abs(x_end - x) > abs(dx) else x_end - x
            y_new = rk4(f, x, y, d)
            for k, g in enumerate(stops):
                g0, g1 = g(x, y), g(x + d, y_new)
                if g0 > 0 >= g1:
                    frac = g0 / (g0 - g1)
                    for _ in range(3):
                        y_try = rk4(f, x, y, frac * d)
                        g_try = g(x + frac * d, y_try)
                        g_lo = g(x, y)
                        if g_try == g_lo:
                            break
                        frac = frac * g_lo / (g_lo - g_try)
                    return k, x + frac * d, rk4(f, x, y, frac * d)
            x, y = x + d, y_new
        return None, x, y

    if family == "axis":
        th = 1e-4
        y = _axis_start(al, n, h0, th)
    else:
        th, y = 0.5 * math.pi, [h0, 0.0]
    th_end = math.pi - 1e-6
    for _ in range(100):
        low = y[0] <= h_sw * (1 + 1e-9)
        steep = y[1] <= -_ENTER_SLOPE * (1 - 1e-9)
        if not (low and steep):
            stops = [lambda x, z: -z[1], lambda x, z: z[0]]
            if not low:
                stops.append(lambda x, z: z[0] - h_sw)
            if not steep:
                stops.append(lambda x, z: z[1] + _ENTER_SLOPE)
            k, th, y = march(_cone_rhs(al, n), th, y, step, th_end, stops)
            if k is None:
                return None
            if k == 0:
                return max(y[0], 0.0) ** al
            if k == 1:
                return (1.0 - y[1]) * (1.0 + y[1]) if al == 0 else 0.0
            continue
        h = y[0]
        z = [th, (1.0 - y[1]) * (1.0 + y[1]) * _hpow(h, al)]
        flat = lambda x, w: w[1] - (1.0 - _EXIT_SLOPE**2) * _hpow(x, al)
        k, h, z = march(_normal_rhs(al, n), h, z, -step * h_sw, 0.0, [lambda x, w: -flat(x, w)])
        if k is None:
            return z[1]
        th, C = z
        if h <= 1e-12 * h_sw:
            return C
        dh = -math.sqrt(max(1.0 - C / _hpow(h, al), 0.0))
        if al == 0:
            y = [h, dh]
            continue
        k, dh, w = march(_turn_rhs(al, n), dh, [th, h], step, 0.0,
                         [lambda x, q: _turn_curvature(al, n, x, q)])
        th, h = w
        if k is None:
            return h**al
        y = [h, dh]
    raise SolverError("RK4 shot kept switching variables")


# ---------------------------------------------------------------------------
# Change of variables


def v_from_u(field: ScalarField, exponents: Exponents) -> ScalarField:
    """``v = beta * u**(1/beta)``; the gradient, if present, maps as
    ``grad v = u**(-gamma/2) grad u``."""
    vals = np.asarray(field.values)
    if np.any(vals < 0):
        raise DomainError("v_from_u needs a nonnegative field")
    b, g = exponents.beta, exponents.gamma
    mask = field.mask
    v = np.zeros(vals.shape)
    v[mask] = b * vals[mask] ** (1.0 / b)
    grad = None
    if field.gradient is not None:
        grad = np.zeros(field.gradient.shape)
        grad[:, mask] = field.gradient[:, mask] * vals[mask] ** (-0.5 * g)
    meta = dict(field.meta, kind="v")
    return ScalarField(field.grid, v, mask, gradient=grad, level=field.level, meta=meta)


def u_from_v(field: ScalarField, exponents: Exponents) -> ScalarField:
    """``u = (v / beta)**beta``; ``grad u = (v/beta)**(beta-1) grad v``."""
    vals = np.asarray(field.values)
    if np.any(vals < 0):
        raise DomainError("u_from_v needs a nonnegative field")
    b = exponents.beta
    mask = field.mask
    u = np.zeros(vals.shape)
    u[mask] = (vals[mask] / b) ** b
    grad = None
    if field.gradient is not None:
        grad = np.zeros(field.gradient.shape)
        grad[:, mask] = field.gradient[:, mask] * (vals[mask] / b) ** (b - 1.0)
    meta = dict(field.meta, kind="u")
    return ScalarField(field.grid, u, mask, gradient=grad, level=field.level, meta=meta)


def v_tau_field(field_v: ScalarField, grid: Optional[AxisymGrid] = None) -> ScalarField:
    """Finite-difference ``d v / d tau`` on the mask, zero on the axis."""
    grid = field_v.grid if grid is None else grid
    if not isinstance(grid, AxisymGrid):
        raise DomainError("v_tau_field needs an AxisymGrid")
    vt = _diff_axis(np.asarray(field_v.values), field_v.mask, grid.h, 0, True)
    return ScalarField(grid, vt, field_v.mask, signed=True, meta={"kind": "v_tau"})


# ---------------------------------------------------------------------------
# Sampling profiles on grids


def _as_kind(v, grad_v, level, mask, grid, exponents, kind, meta):
    field = ScalarField(grid, np.where(mask, v, 0.0), mask, gradient=grad_v, level=level,
                        meta=dict(meta, kind="v"))
    if kind == "v":
        return field
    if kind == "u":
        return u_from_v(field, exponents)
    raise DomainError(f"kind must be 'u' or 'v', got {kind!r}")


def one_d_field(exponents, grid, kind="v", analytic_gradient=True, offset=0.0):
    """The 1D solution ``v = (x - offset)_+`` on a grid.

    ``x`` is ``t`` on a :class:`LineGrid` and ``z`` on an :class:`AxisymGrid`.
    """
    if isinstance(grid, LineGrid):
        x = grid.t - offset
        grad = np.where(x > 0, 1.0, 0.0)[None, :]
    else:
        _, Z = grid.coords()
        x = Z - offset
        grad = np.stack([np.zeros(grid.shape), np.where(x > 0, 1.0, 0.0)])
    mask = x > 0
    return _as_kind(np.maximum(x, 0.0), grad if analytic_gradient else None, x, mask, grid, exponents,
                    kind, {"profile": "one_d", "offset": float(offset)})


def radial_field(profile: RadialProfile, grid: AxisymGrid, kind="v", analytic_gradient=True,
                 center=0.0):
    """Sample ``v(|x - center e_z|)`` on a meridian grid."""
    T, Z = grid.coords()
    r = np.hypot(T, Z - center)
    v, dv, _ = profile.evaluate(r)
    mask = r > profile.r0
    with np.errstate(invalid="ignore", divide="ignore"):
        grad = np.stack([np.where(r > 0, dv * T / r, 0.0), np.where(r > 0, dv * (Z - center) / r, 0.0)])
    return _as_kind(v, grad if analytic_gradient else None, r - profile.r0, mask, grid, profile.exponents,
                    kind, {"profile": "radial", "r0": profile.r0, "center": float(center)})


def cone_field(cone: ConeProfile, grid: AxisymGrid, kind="v", analytic_gradient=True):
    """Sample ``v = r h(theta)`` with ``theta`` measured from the ``+z`` axis."""
    T, Z = grid.coords()
    r = np.hypot(T, Z)
    th = np.arctan2(T, Z)
    h, dh = cone.evaluate(th)
    lev_ang = cone.angular_level(th)
    mask = (lev_ang > 0) & (r > 0) & (h > 0)
    level = np.where(mask, r * h, np.minimum(-r * np.sin(np.minimum(np.abs(lev_ang), 0.5 * math.pi)), -0.0))
    level = np.where(mask, level, np.minimum(level, 0.0))
    v = np.where(mask, r * h, 0.0)
    st, ct = np.sin(th), np.cos(th)
    grad = np.stack([np.where(mask, h * st + dh * ct, 0.0), np.where(mask, h * ct - dh * st, 0.0)])
    return _as_kind(v, grad if analytic_gradient else None, level, mask, grid, cone.exponents, kind,
                    {"profile": "cone", "h0": cone.h0, "theta0": cone.theta0, "family": cone.family})
