"""Inner-variation engine.

For ``T_eps = id + eps Phi`` the energy of ``w_eps = w o T_eps^{-1}`` is
sampled over a ladder of ``eps`` values and fitted by a polynomial in
``eps``.  Two routes produce the ladder:

``lagrangian``
    Change variables back to the reference configuration.  On the
    reference grid ``E[w_eps] = int G(w) (|M^T grad w|^2 + F(w)) J`` with
    ``M = (Id + eps DPhi)^{-1}`` and ``J`` the full Jacobian determinant,
    both evaluated exactly per node.  The ladder then differs from the
    closed forms only through the polynomial fit.
``eulerian``
    Build ``w_eps`` on the grid by inverting ``T_eps`` with a fixed-point
    iteration and sampling ``w`` by clamped cubic interpolation, then
    integrate with the same quadrature as any other field.

The module also holds the two matrix expansions behind the closed forms.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import linalg, ndimage

from .energy import GeneralEnergySpec, _Prepared, field_level, variation_densities
from .errors import DomainError, FitError, InvertibilityError
from .grids import ScalarField
from .maps import VariationSpec, jacobian_blocks

__all__ = [
    "VariationSpec",
    "ExpansionFit",
    "ExpansionReport",
    "inverse_map",
    "pullback",
    "energy_ladder",
    "fit_expansion",
    "verify_expansion",
    "det_expansion",
    "normsq_expansion",
    "lemma_a_slopes",
]

_FP_MAXITER = 200


# ---------------------------------------------------------------------------
# Inverse map and pullback


def _support_nodes(grid, Phi):
    """Boolean mask of the nodes inside the support box of ``Phi``."""
    coords = grid.coords()
    inside = np.ones(grid.shape, dtype=bool)
    for c, (lo, hi) in zip(coords, Phi.support):
        inside &= (c >= lo) & (c <= hi)
    return inside


def inverse_map(Phi: VariationSpec, points: Sequence[np.ndarray], eps: float):
    """Solve ``x + eps Phi(x) = y`` by the fixed-point iteration
    ``x <- y - eps Phi(x)``.

    Parameters
    ----------
    Phi : VariationSpec
    points : sequence of ndarray
        Coordinates of the targets ``y``, one array per axis.
    eps : float

    Returns
    -------
    list of ndarray
        Coordinates of ``x``, converged to machine precision.

    Raises
    ------
    InvertibilityError
        If the iteration stops contracting.
    """
    y = [np.asarray(c, dtype=float) for c in points]
    x = [c.copy() for c in y]
    scale = 1.0 + max((float(np.max(np.abs(c))) for c in y if c.size), default=0.0)
    tol = 4.0 * np.finfo(float).eps * scale
    prev = np.inf
    stalls = 0
    for _ in range(_FP_MAXITER):
        phi = np.asarray(Phi.phi(*x), dtype=float)
        new = [yc - eps * phi[i] for i, yc in enumerate(y)]
        step = max((float(np.max(np.abs(a - b))) for a, b in zip(new, x) if a.size), default=0.0)
        x = new
        if step <= tol:
            return x
        # rounding can hold the step just above tol; accept a stalled tail
        stalls = stalls + 1 if step >= 0.5 * prev else 0
        if stalls >= 3:
            if step <= 64.0 * tol:
                return x
            raise InvertibilityError(f"fixed-point inverse stopped contracting (step {step:.3g})")
        prev = step
    raise InvertibilityError("fixed-point inverse did not converge")


def _interp(coeffs, idx, mode):
    return ndimage.map_coordinates(coeffs, idx, order=3, mode=mode, prefilter=False)


def _limited(coeffs, values, mask, idx, mode):
    """Cubic interpolation at ``idx``, clamped to the enclosing cell's range
    in cells that touch the mask boundary and to the global range elsewhere."""
    out = _interp(coeffs, idx, mode)
    shape = values.shape
    base = [np.clip(np.floor(c).astype(int), 0, max(s - 2, 0)) for c, s in zip(idx, shape)]
    lo = np.full(out.shape, np.inf)
    hi = np.full(out.shape, -np.inf)
    cut = np.zeros(out.shape, dtype=bool)
    first = None
    for corner in np.ndindex(*(2,) * len(shape)):
        pick = tuple(np.minimum(b + k, s - 1) for b, k, s in zip(base, corner, shape))
        lo = np.minimum(lo, values[pick])
        hi = np.maximum(hi, values[pick])
        m = mask[pick]
        first = m if first is None else first
        cut |= m != first
    out = np.where(cut, np.clip(out, lo, hi), out)
    return np.clip(out, values.min(), values.max())


def _extend(values, mask, layers=4):
    """Continue ``values`` off ``mask`` by linear extrapolation, one layer
    of nodes at a time, then by nearest-node copies."""
    if mask.all() or not mask.any():
        return values
    out = np.where(mask, values, 0.0)
    known = mask.copy()
    nd = values.ndim
    for _ in range(layers):
        acc = np.zeros(values.shape)
        cnt = np.zeros(values.shape)
        for ax in range(nd):
            for sgn in (1, -1):
                # node i from i+sgn and i+2 sgn along ax
                k1 = np.roll(known, -sgn, axis=ax)
                k2 = np.roll(known, -2 * sgn, axis=ax)
                v1 = np.roll(out, -sgn, axis=ax)
                v2 = np.roll(out, -2 * sgn, axis=ax)
                ok = ~known & k1 & k2
                # rolled entries that wrapped around are invalid
                sl = [slice(None)] * nd
                sl[ax] = slice(-2, None) if sgn > 0 else slice(0, 2)
                ok[tuple(sl)] = False
                acc += np.where(ok, 2.0 * v1 - v2, 0.0)
                cnt += ok
        new = cnt > 0
        if not new.any():
            break
        out = np.where(new, acc / np.maximum(cnt, 1), out)
        known = known | new
    if known.all():
        return out
    idx = ndimage.distance_transform_edt(~known, return_distances=False, return_indices=True)
    return out[tuple(idx)]


def pullback(field: ScalarField, Phi: VariationSpec, eps: float) -> ScalarField:
    """``w_eps = w o T_eps^{-1}`` sampled on the grid of ``field``.

    ``T_eps^{-1}`` comes from :func:`inverse_map`; samples are read by cubic
    spline interpolation.  A nonnegative field is written as
    ``w = level * q`` and the two smooth factors are interpolated separately,
    ``q`` being continued off the mask by layered linear extrapolation.  This
    keeps the kink of ``w`` at the free boundary out of the spline.  Signed
    fields are interpolated directly with a zero extension.  In cells cut by
    the free boundary the result is clamped to the range of the cell's
    vertices, and everywhere to ``[min w, max w]``.  A stored gradient is
    continued the same way and mapped by ``(Id + eps DPhi(x))^{-T}``.  Nodes
    outside the support box of ``Phi`` keep their values exactly.

    Raises
    ------
    SupportError
        If the support box of ``Phi`` touches the grid boundary.
    InvertibilityError
        If ``eps |DPhi|`` reaches 1/2 or the inverse fails to converge.
    """
    grid = field.grid
    Phi.check_support(grid)
    eps = float(eps)
    if eps == 0.0:
        return field
    Phi.check_invertible(grid, eps)
    sel = _support_nodes(grid, Phi)
    if not sel.any():
        return field
    mode = "mirror"
    mask0 = np.asarray(field.mask)
    values = np.where(mask0, np.asarray(field.values, dtype=float), 0.0)
    level = np.array(field_level(field), dtype=float)
    ys = [c[sel] for c in grid.coords()]
    xs = inverse_map(Phi, ys, eps)
    # nodes the map leaves in place keep their values exactly
    moved = np.zeros(xs[0].shape, dtype=bool)
    for x, y in zip(xs, ys):
        moved |= x != y
    if not moved.any():
        return field
    sel[sel] = moved
    xs = [x[moved] for x in xs]
    idx = np.array([(x - ax[0]) / grid.h for x, ax in zip(xs, grid.axes)])

    def spline(a):
        return _interp(ndimage.spline_filter(a, order=3, mode=mode), idx, mode)

    lev = spline(level)
    new_level = level.copy()
    new_level[sel] = lev
    mask = new_level > 0
    if field.signed or not mask0.any():
        vals = _limited(ndimage.spline_filter(values, order=3, mode=mode), values, mask0, idx, mode)
    else:
        q = np.zeros(grid.shape)
        q[mask0] = values[mask0] / level[mask0]
        q = _extend(q, mask0)
        vals = np.maximum(lev, 0.0) * spline(q)
        vals = np.clip(vals, values.min(), values.max())
    new_values = values.copy()
    new_values[sel] = vals
    if not field.signed:
        new_values = np.where(mask, np.maximum(new_values, 0.0), 0.0)

    new_grad = None
    if field.gradient is not None:
        grad = np.array(field.gradient, dtype=float)
        gx = np.array([spline(_extend(np.where(mask0, comp, 0.0), mask0)) for comp in grad])
        dphi = np.asarray(Phi.dphi(*xs), dtype=float)
        m = np.moveaxis(np.eye(grid.ndim)[:, :, None] + eps * dphi, (0, 1), (-2, -1))
        # (Id + eps D)^{-T} g: solve (Id + eps D)^T q = g
        qg = np.linalg.solve(np.swapaxes(m, -1, -2), gx.T[..., None])[..., 0].T
        new_grad = grad.copy()
        new_grad[:, sel] = qg
        new_grad = np.where(mask, new_grad, 0.0)
    meta = dict(field.meta, pullback_eps=eps)
    return ScalarField(grid, new_values, mask, gradient=new_grad, level=new_level,
                       signed=field.signed, meta=meta)


# ---------------------------------------------------------------------------
# Energy ladders


def _lagrangian_energy(prep, d2, ang, n, eps):
    ndim = d2.shape[0]
    m = np.moveaxis(np.eye(ndim).reshape((ndim, ndim) + (1,) * (d2.ndim - 2)) + eps * d2,
                    (0, 1), (-2, -1))
    det = np.linalg.det(m)
    g = np.moveaxis(prep.grad, 0, -1)[..., None]
    q = np.linalg.solve(np.swapaxes(m, -1, -2), g)[..., 0]
    qsq = np.sum(q**2, axis=-1)
    jac = det
    if ang is not None:
        jac = jac * (1.0 + eps * ang) ** (n - 2)
    if np.any(jac[prep.mask] <= 0):
        raise InvertibilityError("Jacobian of id + eps Phi is not positive")
    grad_part = prep.integrate(prep.G * qsq * jac)
    pot_part = prep.integrate(prep.G * prep.F * jac)
    return grad_part + pot_part


def energy_ladder(field: ScalarField, Phi: VariationSpec, energy_spec: GeneralEnergySpec,
                  eps_values=None, method: str = "lagrangian", threads: int = 1) -> np.ndarray:
    """Energies of ``w o T_eps^{-1}`` for every ``eps`` in ``eps_values``
    (default: the ladder of ``Phi``).  ``eps = 0`` is allowed.

    Parameters
    ----------
    method : {"lagrangian", "eulerian"}
        See the module docstring.
    threads : int
        Ladder points are independent and may be evaluated concurrently.
    """
    eps_values = Phi.ladder if eps_values is None else tuple(float(e) for e in eps_values)
    grid = field.grid
    Phi.check_support(grid)
    nonzero = [e for e in eps_values if e != 0]
    if nonzero:
        Phi.check_invertible(grid, max(abs(e) for e in nonzero))
    if method == "lagrangian":
        prep = _Prepared(field, energy_spec)
        phi, dphi = Phi.evaluate(grid)
        d2, ang = jacobian_blocks(grid, phi, dphi)

        def one(e):
            return _lagrangian_energy(prep, d2, ang, grid.n, e)
    elif method == "eulerian":
        from .energy import general_energy

        def one(e):
            return general_energy(pullback(field, Phi, e), energy_spec).total
    else:
        raise DomainError(f"unknown ladder method {method!r}")
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            out = list(ex.map(one, eps_values))
    else:
        out = [one(e) for e in eps_values]
    return np.array(out, dtype=float)


# ---------------------------------------------------------------------------
# Polynomial fit


@dataclass(frozen=True)
class ExpansionFit:
    """Least-squares fit ``E(eps) ~ sum_k c_k eps**k``.

    Attributes
    ----------
    E0, E1, E2 : float
        Coefficients of ``1, eps, eps**2``.
    residual : float
        ``max |E - (E0 + E1 eps + E2 eps**2)|`` over the ladder; the cubic and
        higher fitted terms are absorbed here.
    condition : float
        2-norm condition number of the column-scaled design matrix.
    degree : int
    coefficients : tuple of float
        All fitted coefficients.
    anchored : bool
        True when ``E0`` was supplied rather than fitted.
    """

    E0: float
    E1: float
    E2: float
    residual: float
    condition: float
    degree: int
    coefficients: tuple
    anchored: bool = False

    def to_dict(self):
        return {"E0": self.E0, "E1": self.E1, "E2": self.E2, "residual": self.residual,
                "condition": self.condition, "degree": self.degree,
                "coefficients": list(self.coefficients), "anchored": self.anchored}


def fit_expansion(eps, energies, degree: int = 3, e0: Optional[float] = None) -> ExpansionFit:
    """Fit ``E(eps)`` by a polynomial of ``degree`` in ``eps``.

    Parameters
    ----------
    eps, energies : array_like
        Ladder and sampled energies; at least 5 points.
    degree : int
        Polynomial degree, at least 2.
    e0 : float, optional
        Known value at ``eps = 0``.  The fit is then anchored:
        ``(E - e0) / eps`` is fitted by a polynomial of degree ``degree - 1``.

    Raises
    ------
    FitError
        If the design matrix is rank deficient or too few points are given.

    Examples
    --------
    >>> import numpy as np
    >>> e = 1e-2 * 0.5 ** np.arange(8)
    >>> f = fit_expansion(e, 3 + 2 * e + 5 * e**2)
    >>> [round(c, 10) for c in (f.E0, f.E1, f.E2)]
    [3.0, 2.0, 5.0]
    """
    x = np.asarray(eps, dtype=float).ravel()
    y = np.asarray(energies, dtype=float).ravel()
    if x.shape != y.shape:
        raise DomainError("eps and energies must have the same length")
    if x.size < 5:
        raise FitError("need at least 5 ladder points")
    if degree < 2:
        raise DomainError("degree must be at least 2")
    if not np.all(np.isfinite(y)) or not np.all(np.isfinite(x)):
        raise FitError("non-finite ladder data")
    s = float(np.max(np.abs(x)))
    if s == 0:
        raise FitError("rank-deficient design: all eps are zero")
    if e0 is None:
        powers = np.arange(degree + 1)
        rhs = y
        basis = x
    else:
        if np.any(x == 0):
            raise FitError("an anchored fit needs nonzero eps")
        powers = np.arange(degree)
        rhs = (y - e0) / x
        basis = x
    design = (basis[:, None] / s) ** powers[None, :]
    if design.shape[0] < design.shape[1]:
        raise FitError("more coefficients than ladder points")
    c, _, rank, sv = linalg.lstsq(design, rhs, lapack_driver="gelsd")
    if rank < design.shape[1]:
        raise FitError(f"rank-deficient design (rank {rank} of {design.shape[1]})")
    cond = float(sv[0] / sv[-1])
    c = c / s**powers
    if e0 is None:
        coeffs = tuple(float(v) for v in c)
    else:
        coeffs = (float(e0),) + tuple(float(v) for v in c)
    E0, E1, E2 = coeffs[0], coeffs[1], coeffs[2]
    resid = float(np.max(np.abs(y - (E0 + E1 * x + E2 * x * x))))
    return ExpansionFit(E0, E1, E2, resid, cond, int(degree), coeffs, e0 is not None)


# ---------------------------------------------------------------------------
# Verification against the closed forms


@dataclass(frozen=True)
class ExpansionReport:
    fit: ExpansionFit
    closed_form: dict
    rel_gap: dict
    scale: dict
    ladder: tuple
    energies: tuple
    h: float
    method: str

    def to_dict(self):
        return {
            "fitted": {"E0": self.fit.E0, "E1": self.fit.E1, "E2": self.fit.E2},
            "closed_form": dict(self.closed_form),
            "rel_gap": dict(self.rel_gap),
            "scale": dict(self.scale),
            "ladder": list(self.ladder),
            "energies": list(self.energies),
            "h": self.h,
            "method": self.method,
            "fit": self.fit.to_dict(),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _gap(fitted, exact, scale):
    diff = abs(fitted - exact)
    if scale == 0:
        return 0.0 if diff == 0 else float("inf")
    return diff / scale


def verify_expansion(field: ScalarField, Phi: VariationSpec, energy_spec: GeneralEnergySpec,
                     method: str = "lagrangian", degree: Optional[int] = None,
                     threads: int = 1) -> ExpansionReport:
    """Compare the fitted ``(E1, E2)`` of the energy ladder with the
    closed-form coefficients.

    The fit is anchored at the exact ``E(0)``.  Relative gaps are measured
    against ``max(|closed form|, int |density|)``, so a vanishing first
    variation is compared with the size of its integrand rather than with
    zero.

    Parameters
    ----------
    method : {"lagrangian", "eulerian"}
    degree : int, optional
        Fit degree.  The Lagrangian ladder is smooth in ``eps`` and uses 5:
        a cubic fit would leave a bias of order ``eps_max**2 E4`` in ``E2``,
        about 1e-4 relative on the default ladder.  The Eulerian ladder
        carries interpolation noise that higher degrees amplify and uses 3.
    """
    if degree is None:
        degree = 5 if method == "lagrangian" else 3
    ladder = Phi.ladder
    energies = energy_ladder(field, Phi, energy_spec, (0.0,) + tuple(ladder), method, threads)
    fit = fit_expansion(ladder, energies[1:], degree=degree, e0=float(energies[0]))
    e1, e2, prep = variation_densities(field, energy_spec, Phi)
    cf1, cf2 = prep.integrate(e1), prep.integrate(e2)
    s1 = max(abs(cf1), prep.integrate(np.abs(e1)))
    s2 = max(abs(cf2), prep.integrate(np.abs(e2)))
    return ExpansionReport(
        fit,
        {"E1": cf1, "E2": cf2},
        {"E1": _gap(fit.E1, cf1, s1), "E2": _gap(fit.E2, cf2, s2)},
        {"E1": s1, "E2": s2},
        tuple(ladder),
        tuple(float(e) for e in energies[1:]),
        field.grid.h,
        method,
    )


# ---------------------------------------------------------------------------
# Matrix expansions


def _square(A):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DomainError("A must be a square matrix")
    return A


def det_expansion(A, eps: float):
    """``det(Id + eps A)`` exactly (LU) and to second order.

    The truncation is ``1 + eps tr A + eps**2 ((tr A)**2 - tr(A**2)) / 2``.

    Returns
    -------
    exact, truncated, error : float
        ``error = exact - truncated``.

    Examples
    --------
    >>> det_expansion([[0.0, 1.0], [0.0, 0.0]], 0.1)
    (1.0, 1.0, 0.0)
    """
    A = _square(A)
    if not 1 <= A.shape[0] <= 6:
        raise DomainError("matrix size must be between 1 and 6")
    exact = float(linalg.det(np.eye(A.shape[0]) + eps * A))
    tr = float(np.trace(A))
    tr2 = float(np.trace(A @ A))
    trunc = 1.0 + eps * tr + eps**2 * 0.5 * (tr * tr - tr2)
    return exact, trunc, exact - trunc


def normsq_expansion(A, B, q, eps: float):
    """``|M^T q|**2`` for ``M = Id + eps A + eps**2 B``, exactly and to
    second order ``|q|**2 + 2 eps q.Aq + eps**2 (|A^T q|**2 + 2 q.Bq)``.

    Returns
    -------
    exact, truncated, error : float
    """
    A = _square(A)
    B = _square(B)
    q = np.asarray(q, dtype=float).ravel()
    if A.shape != B.shape or q.size != A.shape[0]:
        raise DomainError("A, B and q have incompatible sizes")
    M = np.eye(q.size) + eps * A + eps**2 * B
    exact = float(np.sum((M.T @ q) ** 2))
    Atq = A.T @ q
    trunc = float(q @ q + 2.0 * eps * (q @ A @ q) + eps**2 * (Atq @ Atq + 2.0 * (q @ B @ q)))
    return exact, trunc, exact - trunc


def lemma_a_slopes(samples: int = 100, sizes=(2, 3, 4, 5), eps_values=None, seed: Optional[int] = None):
    """Convergence slopes of both matrix truncations over random matrices.

    For every size, ``samples`` matrices with entries uniform in ``[-1, 1]``
    are drawn and the mean absolute error of each truncation is regressed on
    ``eps`` in log-log scale.  A truncation whose error stays at rounding
    level for every sample is reported as exact with slope ``None``; this is
    the case of the determinant for 2x2 matrices, whose expansion has no
    cubic term.

    Returns
    -------
    dict
        ``{size: {"det": {...}, "normsq": {...}}}`` with ``slope``,
        ``exact``, ``mean_error`` per entry and ``ratio`` (error ratio when
        ``eps`` halves from the top of the ladder).
    """
    import os

    if eps_values is None:
        eps_values = tuple(1e-2 * 0.5**k for k in range(6))
    eps = np.asarray(eps_values, dtype=float)
    seed = int(os.environ.get("APFB_SEED", "0")) if seed is None else seed
    rng = np.random.default_rng(seed)
    out = {}
    for size in sizes:
        det_err = np.zeros((samples, eps.size))
        nrm_err = np.zeros((samples, eps.size))
        for s in range(samples):
            A = rng.uniform(-1, 1, (size, size))
            B = rng.uniform(-1, 1, (size, size))
            q = rng.uniform(-1, 1, size)
            for j, e in enumerate(eps):
                det_err[s, j] = abs(det_expansion(A, e)[2])
                nrm_err[s, j] = abs(normsq_expansion(A, B, q, e)[2])
        entry = {}
        for name, err in (("det", det_err), ("normsq", nrm_err)):
            mean = err.mean(axis=0)
            exact = bool(np.all(err <= 64 * np.finfo(float).eps))
            slope = None if exact else float(np.polyfit(np.log(eps), np.log(mean), 1)[0])
            ratio = None if exact else float(mean[0] / mean[1])
            entry[name] = {"slope": slope, "exact": exact, "ratio": ratio,
                           "mean_error": [float(x) for x in mean]}
        out[int(size)] = entry
    return out
