"""Stability quadratic forms, spectra, curvature identities and the
dimension window.

The quadratic form in the ``v`` variable is

    Q(phi) = int v**alpha |grad phi|**2 - int W_v phi**2,
    W_v = (alpha/2) v**alpha (1 - |grad v|**2) / v**2,

integrated over ``{v > 0}`` with the meridian density.  ``W_v`` behaves like
``dist**(alpha-1)`` at the free boundary; it is assembled from the smooth
ratio ``k = (1 - |grad v|**2) / v`` so the difference ``1 - |grad v|**2`` is
never split into separately divergent pieces.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate, sparse
from scipy.sparse import linalg as splinalg

from .energy import field_level
from .errors import DomainError, SolverError, SupportError
from .exponents import Exponents
from .grids import AxisymGrid, LineGrid, ScalarField, distance_to_fb, nodal_gradient
from .profiles import RadialProfile, radial_field, v_tau_field
from .quadrature import ProductQuadrature

__all__ = [
    "QuadFormReport",
    "SpectrumResult",
    "ThetaWindow",
    "ThetaTestFunction",
    "CurvatureReport",
    "stability_potential_v",
    "stability_potential_u",
    "potential_ratio",
    "quad_form",
    "assemble_form",
    "min_generalized_eigen",
    "rayleigh_min",
    "axisym_quad_form",
    "theta_window",
    "figure1_table",
    "figure1_csv",
    "build_theta_test",
    "theta_probe_sweep",
    "probe_sweep_csv",
    "curvature_check",
    "limit_alpha_zero",
    "split_potential_sums",
    "cancellation_slope",
    "alpha_threshold",
    "mass",
]

CUTOFF_FACTOR = 2.0


# ---------------------------------------------------------------------------
# Potentials


def _fb_distance(field: ScalarField, level):
    """Distance proxy to the free boundary: the level where it is a
    distance, otherwise the Euclidean distance to the nearest zero node."""
    kind = field.meta.get("profile")
    if kind in ("one_d", "radial"):
        return np.where(field.mask, np.asarray(level), 0.0)
    d = distance_to_fb(field)
    return np.full(field.grid.shape, np.inf) if d is None else np.asarray(d.values)


def _extrapolate(values, good, targets, grid, radius=4):
    """Replace ``values`` at ``targets`` by a local least-squares plane fitted
    to ``good`` nodes within ``radius`` nodes (widened when too few)."""
    out = np.array(values, dtype=float)
    coords = grid.coords()
    shape = grid.shape
    nd = len(shape)
    for node in zip(*np.nonzero(targets)):
        for rad in (radius, 2 * radius, 4 * radius):
            sl = tuple(slice(max(i - rad, 0), min(i + rad + 1, s)) for i, s in zip(node, shape))
            ok = good[sl]
            if ok.sum() >= nd + 2:
                break
        else:
            continue
        x0 = [c[node] for c in coords]
        pts = [c[sl][ok] - x for c, x in zip(coords, x0)]
        design = np.column_stack([np.ones(pts[0].size)] + pts)
        coef, *_ = np.linalg.lstsq(design, values[sl][ok], rcond=None)
        out[node] = coef[0]
    return out


def potential_ratio(v: ScalarField, cutoff_factor: float = CUTOFF_FACTOR):
    """Smooth ratio ``k = (1 - |grad v|**2) / v`` on the mask.

    Nodes closer than ``cutoff_factor * h`` to the free boundary take the
    value of a local plane fitted to the nodes beyond the cutoff, since the
    raw quotient is 0/0 there.

    Returns
    -------
    k : ndarray
    near : ndarray of bool
        Nodes that received the extrapolated value.
    """
    grid = v.grid
    mask = v.mask
    g = nodal_gradient(v)
    vals = np.asarray(v.values)
    one_minus = 1.0 - np.sum(g**2, axis=0)
    k = np.zeros(grid.shape)
    k[mask] = one_minus[mask] / vals[mask]
    dist = _fb_distance(v, field_level(v))
    near = mask & (dist < cutoff_factor * grid.h)
    good = mask & ~near
    if near.any() and good.any():
        k = _extrapolate(k, good, near, grid)
    return k, near


def stability_potential_v(v: ScalarField, exponents: Exponents,
                          cutoff_factor: float = CUTOFF_FACTOR) -> ScalarField:
    """Nodal ``W_v = (alpha/2) v**(alpha-1) k`` with ``k`` from
    :func:`potential_ratio`.

    Examples
    --------
    >>> from apfb.exponents import exponents_from_alpha
    >>> from apfb.grids import build_line_grid
    >>> from apfb.profiles import one_d_field
    >>> ex = exponents_from_alpha(0.5)
    >>> w = stability_potential_v(one_d_field(ex, build_line_grid(-1, 1, 0.1)), ex)
    >>> float(abs(w.values).max())
    0.0
    """
    al = exponents.alpha
    mask = v.mask
    out = np.zeros(v.grid.shape)
    if al != 0 and mask.any():
        k, near = potential_ratio(v, cutoff_factor)
        vals = np.asarray(v.values)
        out[mask] = 0.5 * al * vals[mask] ** (al - 1.0) * k[mask]
    else:
        near = np.zeros(v.grid.shape, dtype=bool)
    return ScalarField(v.grid, out, mask, level=field_level(v), signed=True,
                       meta={"kind": "W_v", "alpha": al, "cutoff": cutoff_factor * v.grid.h,
                             "near_nodes": int(near.sum())})


def stability_potential_u(u: ScalarField, exponents: Exponents,
                          cutoff_factor: float = CUTOFF_FACTOR) -> ScalarField:
    """Nodal ``W_u = ((2-gamma)/2)(gamma/2) u**gamma (u**gamma - |grad u|**2) / u**2``.

    The difference is kept together as ``u**gamma (1 - |grad u|**2 / u**gamma)``;
    its smooth part ``(1 - |grad u|**2 / u**gamma) / v`` with
    ``v = beta u**(1/beta)`` is extrapolated near the free boundary exactly
    as in :func:`stability_potential_v`.
    """
    g, b = exponents.gamma, exponents.beta
    grid = u.grid
    mask = u.mask
    out = np.zeros(grid.shape)
    near = np.zeros(grid.shape, dtype=bool)
    if g != 0 and mask.any():
        vals = np.asarray(u.values)
        grad = nodal_gradient(u)
        ug = np.zeros(grid.shape)
        ug[mask] = vals[mask] ** g
        v = np.zeros(grid.shape)
        v[mask] = b * vals[mask] ** (1.0 / b)
        k = np.zeros(grid.shape)
        k[mask] = (1.0 - np.sum(grad**2, axis=0)[mask] / ug[mask]) / v[mask]
        vf = ScalarField(grid, v, mask, level=field_level(u, exponents), meta=dict(u.meta))
        dist = _fb_distance(vf, vf.level)
        near = mask & (dist < cutoff_factor * grid.h)
        good = mask & ~near
        if near.any() and good.any():
            k = _extrapolate(k, good, near, grid)
        c = 0.5 * (2.0 - g) * 0.5 * g
        out[mask] = c * ug[mask] ** 2 * v[mask] * k[mask] / vals[mask] ** 2
    return ScalarField(grid, out, mask, level=field_level(u, exponents), signed=True,
                       meta={"kind": "W_u", "gamma": g, "cutoff": cutoff_factor * grid.h,
                             "near_nodes": int(near.sum())})


# ---------------------------------------------------------------------------
# Discrete quadratic form


@dataclass(frozen=True)
class QuadFormReport:
    gradient_term: float
    potential_term: float
    Q: float
    cut_cells: int
    cutoff: float
    h: float

    def to_dict(self):
        return {"gradient_term": self.gradient_term, "potential_term": self.potential_term,
                "Q": self.Q, "cut_cells": self.cut_cells, "cutoff": self.cutoff, "h": self.h}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass(frozen=True, eq=False)
class DiscreteForm:
    """Sparse pieces of ``Q``: stiffness ``K``, lumped potential ``P`` and
    lumped mass ``M`` (vectors over all grid nodes, flattened)."""

    grid: object
    K: sparse.csr_matrix
    P: np.ndarray
    M: np.ndarray
    cut_cells: int
    cutoff: float


def _simplex_gradients(grid, simplices):
    """Gradients of the P1 basis on every simplex, shape ``(S, d+1, d)``."""
    if isinstance(grid, LineGrid):
        x = grid.t[simplices]
        L = x[:, 1] - x[:, 0]
        g = np.stack([-1.0 / L, 1.0 / L], axis=1)[:, :, None]
        return g
    T, Z = grid.coords()
    pts = np.stack([T.ravel(), Z.ravel()], axis=1)[simplices]  # (S, 3, 2)
    e1 = pts[:, 1] - pts[:, 0]
    e2 = pts[:, 2] - pts[:, 0]
    jac = np.stack([e1, e2], axis=2)  # columns are edges
    inv = np.linalg.inv(jac)  # rows: gradients of barycentric 1, 2
    g1, g2 = inv[:, 0, :], inv[:, 1, :]
    return np.stack([-(g1 + g2), g1, g2], axis=1)


def assemble_form(v: ScalarField, exponents: Exponents,
                  cutoff_factor: float = CUTOFF_FACTOR) -> DiscreteForm:
    """Assemble stiffness ``int v**alpha grad phi . grad psi``, lumped
    potential ``int W_v phi psi`` and lumped mass ``int v**alpha phi psi`` for
    P1 elements on the grid's simplices.

    The weights ``v**alpha`` and ``W_v`` are written as a power of the level
    times a smooth remainder and integrated with :class:`ProductQuadrature`.
    """
    grid = v.grid
    al = exponents.alpha
    level = field_level(v)
    mask = v.mask
    vals = np.asarray(v.values)
    ratio = np.zeros(grid.shape)
    ratio[mask] = (vals[mask] / level[mask]) ** al
    qa = ProductQuadrature(grid, level, al)
    w_s = qa.simplex_integrals(ratio)
    simp = qa.simplices
    grads = _simplex_gradients(grid, simp)
    local = np.einsum("s,sid,sjd->sij", w_s, grads, grads)
    nloc = simp.shape[1]
    rows = np.repeat(simp, nloc, axis=1).ravel()
    cols = np.tile(simp, (1, nloc)).ravel()
    N = level.size
    K = sparse.coo_matrix((local.ravel(), (rows, cols)), shape=(N, N)).tocsr()
    K.sum_duplicates()
    M = (qa.weights * ratio).ravel()
    P = np.zeros(N)
    if al != 0 and mask.any():
        W = stability_potential_v(v, exponents, cutoff_factor)
        qp = ProductQuadrature(grid, level, al - 1.0)
        P = (qp.weights * qp.power_ratio(W.values)).ravel()
    lv = level.ravel()[simp]
    npos = (lv > 0).sum(axis=1)
    cut = int(np.sum((npos > 0) & (npos < nloc)))
    return DiscreteForm(grid, K, P, M, cut, cutoff_factor * grid.h)


def _check_compact(phi_vals, grid):
    edges = []
    if isinstance(grid, LineGrid):
        edges = [phi_vals[0], phi_vals[-1]]
    else:
        edges = [phi_vals[-1, :], phi_vals[:, 0], phi_vals[:, -1]]
    if any(np.any(e != 0) for e in edges):
        raise SupportError("test function must vanish on the grid boundary")


def _phi_values(phi, grid):
    vals = phi.values if isinstance(phi, ScalarField) else phi
    vals = np.asarray(vals, dtype=float)
    if vals.shape != grid.shape:
        raise DomainError("test function must match the grid shape")
    return vals


def quad_form(v: ScalarField, exponents: Exponents, phi, form: Optional[DiscreteForm] = None,
              cutoff_factor: float = CUTOFF_FACTOR) -> QuadFormReport:
    """``Q(phi) = int v**alpha |grad phi|**2 - int W_v phi**2``.

    ``phi`` holds nodal values on every node (also off the mask, where they
    enter only through cut simplices) and must vanish on the outer grid
    boundary; the symmetry axis is not a boundary.

    Raises
    ------
    SupportError
        If ``phi`` is nonzero on the grid boundary.
    """
    vals = _phi_values(phi, v.grid)
    _check_compact(vals, v.grid)
    form = assemble_form(v, exponents, cutoff_factor) if form is None else form
    x = vals.ravel()
    grad_term = float(x @ (form.K @ x))
    pot_term = float(np.sum(form.P * x * x))
    return QuadFormReport(grad_term, pot_term, grad_term - pot_term, form.cut_cells, form.cutoff,
                          v.grid.h)


def mass(form: DiscreteForm, phi) -> float:
    x = _phi_values(phi, form.grid).ravel()
    return float(np.sum(form.M * x * x))


# ---------------------------------------------------------------------------
# Spectrum


@dataclass(frozen=True, eq=False)
class SpectrumResult:
    lambda_min: float
    phi: np.ndarray
    iterations: int
    residual: float
    shift: float
    dofs: int

    def to_dict(self):
        return {"lambda_min": self.lambda_min, "iterations": self.iterations,
                "residual": self.residual, "shift": self.shift, "dofs": self.dofs}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _seed():
    import os

    return int(os.environ.get("APFB_SEED", "0"))


def min_generalized_eigen(A, M, tol: float = 1e-8, maxiter: int = 500, shift: Optional[float] = None,
                          seed: Optional[int] = None):
    """Smallest ``lam`` with ``A x = lam M x`` for symmetric ``A`` and
    positive semi-definite ``M``.

    Shifted inverse iteration: ``(A - sigma M)`` is factorised once by sparse
    LU with ``sigma`` below the spectrum, and its inverse drives a Lanczos
    iteration in the ``M`` inner product, which accelerates plain inverse
    iteration toward the eigenvalue nearest ``sigma``.

    Parameters
    ----------
    A, M : sparse or dense (N, N)
    shift : float, optional
        ``sigma``; by default a lower bound of the spectrum from the
        lumped diagonal.
    seed : int, optional
        Seed of the deterministic starting vector (``APFB_SEED`` by default).

    Returns
    -------
    lam, x, iterations, residual, sigma

    Raises
    ------
    SolverError
        If the residual ``|A x - lam M x| / (|A x| + |lam| |M x|)`` stays
        above ``tol``.
    """
    A = sparse.csc_matrix(A, dtype=float)
    M = sparse.csc_matrix(M, dtype=float)
    N = A.shape[0]
    if A.shape != (N, N) or M.shape != (N, N):
        raise DomainError("A and M must be square of the same size")
    if shift is None:
        dA = A.diagonal()
        dM = M.diagonal()
        off = np.asarray(abs(A - sparse.diags(dA)).sum(axis=1)).ravel()
        pos = dM > 0
        if pos.any():
            low = np.min((dA[pos] - off[pos]) / dM[pos])
            spread = np.max(np.abs(dA[pos]) + off[pos]) / np.max(dM)
        else:
            low, spread = 0.0, 1.0
        shift = min(low, 0.0) - 1e-3 * max(spread, 1.0)
    op = A - shift * M
    lu = splinalg.splu(op.tocsc())
    count = [0]

    def solve(b):
        count[0] += 1
        return lu.solve(np.asarray(b, dtype=float))

    opinv = splinalg.LinearOperator((N, N), matvec=solve, dtype=float)
    rng = np.random.default_rng(_seed() if seed is None else seed)
    v0 = rng.standard_normal(N)
    if N < 3:
        evals, evecs = np.linalg.eig(np.linalg.solve(op.toarray(), M.toarray()))
        j = int(np.argmax(evals.real))
        x = np.real(evecs[:, j])
        lam = shift + 1.0 / evals[j].real
    else:
        try:
            evals, evecs = splinalg.eigsh(A, k=1, M=M, sigma=shift, which="LM", v0=v0,
                                          OPinv=opinv, tol=0.1 * tol, maxiter=maxiter,
                                          ncv=min(N, 20))
        except splinalg.ArpackNoConvergence as exc:
            raise SolverError("inverse iteration did not converge", residual=None) from exc
        lam = float(evals[0])
        x = evecs[:, 0]
    Ax = A @ x
    Mx = M @ x
    denom = np.linalg.norm(Ax) + abs(lam) * np.linalg.norm(Mx)
    res = float(np.linalg.norm(Ax - lam * Mx) / denom) if denom > 0 else 0.0
    if not res <= tol:
        raise SolverError(f"eigen-residual {res:.3g} above tolerance {tol:.3g}", residual=res)
    nm = math.sqrt(max(float(x @ Mx), 0.0))
    if nm > 0:
        x = x / nm
    j = int(np.argmax(np.abs(x)))
    if x[j] < 0:
        x = -x
    return float(lam), x, count[0], res, float(shift)


def _region_nodes(grid, region):
    coords = grid.coords()
    inside = np.ones(grid.shape, dtype=bool)
    for ax, (c, (lo, hi), axis) in enumerate(zip(coords, region, grid.axes)):
        axis_edge = isinstance(grid, AxisymGrid) and ax == 0 and lo <= axis[0]
        if not axis_edge and lo <= axis[0]:
            raise SupportError("region touches the lower grid edge")
        if hi >= axis[-1]:
            raise SupportError("region touches the upper grid edge")
        if axis_edge:
            inside &= c < hi
        else:
            inside &= (c > lo) & (c < hi)
    return inside


def rayleigh_min(v: ScalarField, exponents: Exponents, region=None, tol: float = 1e-8,
                 maxiter: int = 500, cutoff_factor: float = CUTOFF_FACTOR,
                 seed: Optional[int] = None) -> SpectrumResult:
    """Minimal Rayleigh quotient ``Q(phi) / int v**alpha phi**2`` over nodal
    functions supported in ``region``.

    Parameters
    ----------
    region : sequence of (lo, hi), optional
        Open box strictly inside the grid; on meridian grids ``lo = 0`` on
        the tau axis keeps the axis nodes free.  Defaults to the grid
        shrunk by two nodes.

    Raises
    ------
    SupportError
        If ``region`` touches the grid boundary.
    SolverError
        On non-convergence, with the residual attached.
    """
    grid = v.grid
    h = grid.h
    if region is None:
        region = []
        for ax, axis in enumerate(grid.axes):
            lo = axis[0] if isinstance(grid, AxisymGrid) and ax == 0 else axis[0] + 1.5 * h
            region.append((lo, axis[-1] - 1.5 * h))
    inside = _region_nodes(grid, region).ravel()
    form = assemble_form(v, exponents, cutoff_factor)
    A = form.K - sparse.diags(form.P)
    diagK = form.K.diagonal()
    dofs = np.nonzero(inside & (diagK > 0))[0]
    if dofs.size == 0:
        raise DomainError("region holds no degrees of freedom")
    A = A.tocsr()[dofs][:, dofs]
    M = sparse.diags(form.M[dofs])
    lam, x, its, res, shift = min_generalized_eigen(A, M, tol, maxiter, seed=seed)
    phi = np.zeros(grid.shape).ravel()
    phi[dofs] = x
    return SpectrumResult(lam, phi.reshape(grid.shape), its, res, shift, int(dofs.size))


# ---------------------------------------------------------------------------
# Axisymmetric form and theta probes


def _v_tau_over_tau(v: ScalarField):
    grid = v.grid
    if v.gradient is not None:
        vt = np.asarray(v.gradient)[0]
    else:
        vt = np.asarray(v_tau_field(v).values)
    T, _ = grid.coords()
    out = np.zeros(grid.shape)
    pos = T > 0
    out[pos] = vt[pos] / T[pos]
    # limit at the axis: d(v_tau)/d tau from the first off-axis column
    if grid.shape[0] > 2:
        out[0] = 2.0 * out[1] - out[2]
    return vt, np.where(v.mask, out, 0.0)


def axisym_quad_form(v: ScalarField, exponents: Exponents, eta, grad_eta_sq=None):
    """Both sides of ``(n-2) int v**a v_tau**2 eta**2 / tau**2 <= int v**a v_tau**2 |grad eta|**2``.

    Parameters
    ----------
    eta : ScalarField, ThetaTestFunction or ndarray
        Nodal test function; its squared gradient comes from ``grad_eta_sq``,
        the test function's own samples, a stored gradient, or finite
        differences, in that order.

    Returns
    -------
    lhs, rhs : float
    """
    grid = v.grid
    if not isinstance(grid, AxisymGrid):
        raise DomainError("axisym_quad_form needs an AxisymGrid")
    if isinstance(eta, ThetaTestFunction):
        grad_eta_sq = eta.grad_sq if grad_eta_sq is None else grad_eta_sq
        eta_vals = eta.values
    elif isinstance(eta, ScalarField):
        eta_vals = np.asarray(eta.values)
        if grad_eta_sq is None:
            g = eta.gradient
            if g is None:
                full = ScalarField(grid, eta_vals, np.ones(grid.shape, bool), signed=True)
                g = nodal_gradient(full)
            grad_eta_sq = np.sum(np.asarray(g) ** 2, axis=0)
    else:
        eta_vals = np.asarray(eta, dtype=float)
        if grad_eta_sq is None:
            full = ScalarField(grid, eta_vals, np.ones(grid.shape, bool), signed=True)
            grad_eta_sq = np.sum(nodal_gradient(full) ** 2, axis=0)
    _check_compact(eta_vals, grid)
    al = exponents.alpha
    level = field_level(v)
    mask = v.mask
    vals = np.asarray(v.values)
    ratio = np.zeros(grid.shape)
    ratio[mask] = (vals[mask] / level[mask]) ** al
    vt, vt_tau = _v_tau_over_tau(v)
    q = ProductQuadrature(grid, level, al)
    lhs = (grid.n - 2) * q.integrate(ratio * vt_tau**2 * eta_vals**2)
    rhs = q.integrate(ratio * vt**2 * np.asarray(grad_eta_sq))
    return float(lhs), float(rhs)


@dataclass(frozen=True)
class ThetaWindow:
    n: float
    alpha: float
    lower: float
    upper: float
    feasible: bool
    lam: float
    n_interval: Optional[tuple]
    reason: str = ""

    def to_dict(self):
        return {"n": self.n, "alpha": self.alpha, "lower": self.lower, "upper": self.upper,
                "feasible": self.feasible, "lambda": self.lam,
                "n_interval": None if self.n_interval is None else list(self.n_interval),
                "reason": self.reason}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @property
    def feasible_integers(self):
        if self.n_interval is None:
            return []
        lo, hi = self.n_interval
        return [k for k in range(max(3, math.floor(lo) + 1), math.ceil(hi)) if lo < k < hi]


def _n_interval(alpha):
    if alpha > 1:
        return None
    s = math.sqrt(1.0 - alpha)
    return (2.0 + (1.0 - s) ** 2, 2.0 + (1.0 + s) ** 2)


def theta_window(n: float, alpha: float) -> ThetaWindow:
    """Window ``(n + alpha - 2, 2 sqrt(n - 2))`` for the exponent of the
    axial test functions; feasible when it is nonempty.

    With ``lam = sqrt(n - 2)`` feasibility reads ``lam**2 - 2 lam + alpha < 0``,
    i.e. ``n`` strictly between ``2 + (1 -+ sqrt(1 - alpha))**2``.

    Examples
    --------
    >>> theta_window(4, 0.0).feasible
    True
    >>> theta_window(6, 0.0).feasible
    False
    """
    n = float(n)
    alpha = float(alpha)
    if n < 3:
        raise DomainError("theta_window needs n >= 3")
    if alpha < 0:
        raise DomainError("alpha must be nonnegative")
    lam = math.sqrt(n - 2.0)
    lower = n + alpha - 2.0
    upper = 2.0 * lam
    interval = _n_interval(alpha)
    if interval is None:
        return ThetaWindow(n, alpha, lower, upper, False, lam, None, "no real roots")
    feasible = lower < upper
    reason = "" if feasible else "empty window"
    return ThetaWindow(n, alpha, lower, upper, feasible, lam, interval, reason)


def alpha_threshold(n: float) -> float:
    """Largest ``alpha`` with a nonempty window in dimension ``n``:
    ``2 sqrt(n-2) - (n-2)``."""
    lam = math.sqrt(float(n) - 2.0)
    return 2.0 * lam - lam * lam


def figure1_table(points: int = 401):
    """Rows ``(alpha, n_lower, n_upper)`` over ``alpha`` in ``[0, 1]``."""
    rows = []
    for a in np.linspace(0.0, 1.0, points):
        lo, hi = _n_interval(float(a))
        rows.append((float(a), lo, hi))
    return rows


def _fmt(x):
    return format(float(x), ".17g")


def figure1_csv(points: int = 401) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["alpha", "n_lower", "n_upper"])
    for row in figure1_table(points):
        w.writerow([_fmt(x) for x in row])
    return buf.getvalue()


def _zeta(r, R):
    """Cutoff equal to 1 on ``r <= R``, 0 on ``r >= 2R``, C^2 quintic between."""
    s = np.clip((r - R) / R, 0.0, 1.0)
    step = s**3 * (10.0 - 15.0 * s + 6.0 * s * s)
    dstep = 30.0 * s * s * (1.0 - s) ** 2 / R
    return 1.0 - step, -dstep


@dataclass(frozen=True, eq=False)
class ThetaTestFunction:
    """``eta = tau**(-theta/2) zeta_R(|x|)`` for ``tau > eps`` and
    ``eps**(-theta/2) zeta_R`` for ``tau <= eps``, sampled on a grid.

    ``grad_sq`` holds the exact squared gradient at the nodes.  ``split``
    holds the two pieces of the bound
    ``|grad eta|**2 <= (1+delta) (theta/2)**2 tau**(-theta-2) zeta**2
    + (1 + 1/delta) tau**(-theta) |grad zeta|**2`` for ``tau > eps``.
    """

    theta: float
    eps: float
    R: float
    grid: AxisymGrid
    values: np.ndarray
    grad_sq: np.ndarray
    delta: float = 0.1
    split: dict = dc_field(default_factory=dict)

    def as_field(self):
        return ScalarField(self.grid, self.values, np.ones(self.grid.shape, bool), signed=True,
                           meta={"kind": "theta_test", "theta": self.theta, "eps": self.eps, "R": self.R})


def build_theta_test(theta: float, eps: float, R: float, grid: AxisymGrid,
                     delta: float = 0.1) -> ThetaTestFunction:
    """Sample the axial test function on a meridian grid.

    Raises
    ------
    DomainError
        Unless ``0 < eps < 1 <= R`` and the ball of radius ``2R`` lies inside
        the grid.
    """
    if not isinstance(grid, AxisymGrid):
        raise DomainError("theta test functions live on meridian grids")
    if not (0 < eps < 1 <= R):
        raise DomainError("need 0 < eps < 1 <= R")
    if 2 * R >= min(grid.tau_max, -grid.z_min, grid.z_max):
        raise SupportError("the cutoff ball of radius 2R must lie inside the grid")
    T, Z = grid.coords()
    r = np.hypot(T, Z)
    z, dz = _zeta(r, R)
    te = np.maximum(T, eps)
    power = te ** (-0.5 * theta)
    eta = power * z
    with np.errstate(invalid="ignore", divide="ignore"):
        er_t = np.where(r > 0, T / np.where(r > 0, r, 1.0), 0.0)
        er_z = np.where(r > 0, Z / np.where(r > 0, r, 1.0), 0.0)
    outer = T > eps
    d_tau = power * dz * er_t + np.where(outer, -0.5 * theta * te ** (-0.5 * theta - 1.0) * z, 0.0)
    d_z = power * dz * er_z
    gsq = d_tau**2 + d_z**2
    main = np.where(outer, (1 + delta) * (0.5 * theta) ** 2 * te ** (-theta - 2.0) * z**2, 0.0)
    cut = np.where(outer, (1 + 1 / delta) * te ** (-theta) * dz**2, 0.0)
    eta.setflags(write=False)
    gsq.setflags(write=False)
    return ThetaTestFunction(float(theta), float(eps), float(R), grid, eta, gsq, float(delta),
                             {"main": main, "cutoff": cut})


def theta_probe_sweep(v: ScalarField, exponents: Exponents, thetas: Sequence[float],
                      eps: float = 0.1, R: float = 1.0, tol: float = 0.0):
    """Rows ``(theta, lhs, rhs, violated)`` with ``violated = lhs > rhs + tol``."""
    rows = []
    for th in thetas:
        probe = build_theta_test(th, eps, R, v.grid)
        lhs, rhs = axisym_quad_form(v, exponents, probe)
        rows.append((float(th), lhs, rhs, bool(lhs > rhs + tol)))
    return rows


def probe_sweep_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["theta", "lhs", "rhs", "violated"])
    for th, lhs, rhs, bad in rows:
        w.writerow([_fmt(th), _fmt(lhs), _fmt(rhs), "true" if bad else "false"])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Curvature identities and the alpha -> 0 limit


@dataclass(frozen=True)
class CurvatureReport:
    n: int
    alpha: float
    r0: float
    laplacian_limit: float
    v_rr: float
    H: float
    H_numeric: float
    gap_v_rr: float
    gap_laplacian: float
    sign_consistent: bool
    extrapolation_error: float

    def to_dict(self):
        return dict(self.__dict__)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _laplacian_radial(profile: RadialProfile, r):
    v, dv, ddv = profile.evaluate(r)
    return ddv + (profile.exponents.n - 1) * dv / r


def _extrapolate_to_zero(d, f):
    """Polynomial extrapolation of ``f(d)`` to ``d = 0`` (degree 2, with
    degree 1 as error estimate)."""
    c2 = np.polyfit(d, f, 2)
    c1 = np.polyfit(d, f, 1)
    return float(c2[-1]), float(abs(c2[-1] - c1[-1]))


def curvature_check(profile: RadialProfile, d_min: float = 1e-4, d_max: float = 1e-2,
                    samples: int = 9) -> CurvatureReport:
    """Check ``Delta v -> -alpha v_nn`` and ``H = -(1+alpha) v_nn`` at the
    free boundary of a radial exterior profile.

    ``v_nn(r0)`` is the slope at ``d = 0`` of a quintic fit to ``v'`` sampled
    from the integrated solution at distances ``d`` in ``[d_min, d_max] r0``.
    ``H`` is the divergence of the unit normal ``grad v / |grad v|``,
    measured numerically by a central difference of the flux of the unit
    normal through spheres, and compared with ``(n-1)/r0``.

    Raises
    ------
    SolverError
        If the sampled ``Delta v`` tail is not monotone, so that the
        extrapolation cannot be trusted.
    """
    ex = profile.exponents
    n, al, r0 = ex.n, ex.alpha, profile.r0
    d = np.geomspace(d_min, d_max, samples) * r0
    lap = _laplacian_radial(profile, r0 + d)
    diffs = np.diff(lap)
    scale = np.max(np.abs(lap)) + 1.0
    if not (np.all(diffs >= -1e-9 * scale) or np.all(diffs <= 1e-9 * scale)):
        raise SolverError("Laplacian tail is not monotone; extrapolation failed",
                          residual=float(np.max(np.abs(diffs))))
    lim, err = _extrapolate_to_zero(d, lap)
    # v'' at r0 from the integrated solution, not the launch series:
    # fit v' = 1 + c1 d + ... + c5 d^5 on the sampled tail
    _, dv_tail, _ = profile.evaluate(r0 + d)
    A = np.stack([d**k for k in range(1, 6)], axis=1)
    coef = np.linalg.lstsq(A, dv_tail - 1.0, rcond=None)[0]
    vrr = float(coef[0])
    H = (n - 1) / r0
    # div of the unit normal e_r via the flux through spheres r0 +- s
    s = 1e-4 * r0
    _, dvp, _ = profile.evaluate(np.array([r0 + s, r0 + 2 * s]))
    nu = np.sign(dvp)
    area = lambda r: r ** (n - 1)
    H_num = float((nu[1] * area(r0 + 2 * s) - nu[0] * area(r0 + s)) / (s * area(r0 + 1.5 * s)))
    target = -H / (1.0 + al)
    gap_vrr = abs(vrr - target) / abs(target)
    if al == 0:
        gap_lap = abs(lim)
    else:
        gap_lap = abs(lim + al * vrr) / abs(al * vrr)
    sign_ok = bool(np.sign(H_num) == np.sign(-(1.0 + al) * vrr))
    return CurvatureReport(n, al, r0, lim, vrr, H, H_num, float(gap_vrr), float(gap_lap), sign_ok, err)


def _boundary_integral(H, r0, n, phi: Callable, center=0.0):
    """``int_{|x|=r0} H phi**2`` in the meridian measure ``tau**(n-2) ds``."""
    f = lambda th: H * float(phi(r0 * math.sin(th), center + r0 * math.cos(th))) ** 2 \
        * (r0 * math.sin(th)) ** (n - 2) * r0
    val, _ = integrate.quad(f, 0.0, math.pi, limit=200, epsabs=1e-13, epsrel=1e-12)
    return val


def limit_alpha_zero(r0: float, n: int, alphas: Sequence[float], phi: Callable, grid: AxisymGrid,
                     r_max: Optional[float] = None, tol: float = 1e-10):
    """Potential integrals ``int W_v phi**2`` on the radial family with fixed
    ``r0`` against ``H int_{FB} phi**2 / (1 + alpha)``.

    Parameters
    ----------
    phi : callable
        ``phi(tau, z)``, vectorised, vanishing on the grid boundary.

    Returns
    -------
    dict
        ``rows`` of ``{alpha, potential, target, gap}`` and ``monotone``,
        true when the gap decreases along the (decreasing) alphas.
    """
    from .exponents import exponents_from_alpha

    if r_max is None:
        T, Z = grid.coords()
        r_max = 1.05 * float(np.hypot(T, Z).max())
    H = (n - 1) / r0
    T, Z = grid.coords()
    phi_vals = np.asarray(phi(T, Z), dtype=float)
    _check_compact(phi_vals, grid)
    bnd = _boundary_integral(H, r0, n, phi)
    rows = []
    for a in alphas:
        ex = exponents_from_alpha(float(a), n)
        if not np.any(phi_vals):
            rows.append({"alpha": float(a), "potential": 0.0, "target": 0.0, "gap": 0.0})
            continue
        from .profiles import radial_profile

        prof = radial_profile(ex, r0, r_max, tol)
        v = radial_field(prof, grid)
        if a == 0:
            pot = 0.0
        else:
            W = stability_potential_v(v, ex)
            q = ProductQuadrature(grid, field_level(v), a - 1.0)
            pot = q.integrate(q.power_ratio(np.asarray(W.values) * phi_vals**2))
        target = bnd / (1.0 + a)
        rows.append({"alpha": float(a), "potential": float(pot), "target": float(target),
                     "gap": float(abs(pot - target))})
    gaps = [r["gap"] for r in rows]
    monotone = all(g1 < g0 for g0, g1 in zip(gaps, gaps[1:]))
    return {"r0": r0, "n": n, "H": H, "rows": rows, "monotone": bool(monotone)}


def split_potential_sums(v: ScalarField, exponents: Exponents, phi):
    """Nodal sums of the two pieces ``(alpha/2) int v**(alpha-2) phi**2`` and
    ``(alpha/2) int v**(alpha-2) |grad v|**2 phi**2`` with plain trapezoid
    weights.  Each piece alone diverges under refinement when ``alpha < 1``."""
    al = exponents.alpha
    vals = np.asarray(v.values)
    mask = v.mask
    g = nodal_gradient(v)
    p = _phi_values(phi, v.grid)
    w = v.grid.quad_weights
    base = np.zeros(v.grid.shape)
    base[mask] = 0.5 * al * vals[mask] ** (al - 2.0) * p[mask] ** 2
    first = float(np.sum(w * base))
    second = float(np.sum(w * base * np.sum(g**2, axis=0)))
    return first, second


def cancellation_slope(profile: RadialProfile, d_min: float = 1e-4, d_max: float = 1e-2,
                       samples: int = 25) -> float:
    """Log-log slope of ``1 - |grad v|**2`` against the distance to the free
    boundary on a radial profile."""
    d = np.geomspace(d_min, d_max, samples)
    y = profile.one_minus_grad_sq(profile.r0 + d)
    return float(np.polyfit(np.log(d), np.log(np.abs(y)), 1)[0])
