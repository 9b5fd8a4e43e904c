"""Product quadrature for integrands that vanish like a power of the distance
to the free boundary.

Integrals of the form ``int_{l > 0} l**s * p`` are evaluated with ``l`` and
``p`` replaced by their piecewise-linear interpolants on the simplices of the
grid (segments in 1D, two triangles per cell in 2D).  The singular factor
``l**s`` is integrated exactly against the linear ``p``, so the rule stays
second order for any ``s > -1`` even though ``l**s`` is not smooth at the
free boundary.  ``p = f / l**s`` is not defined where ``l <= 0``, so on
simplices cut by the free boundary its value at the outside vertices is
extrapolated linearly from nearby positive nodes.

The rule is linear in the nodal values of ``p``; :class:`ProductQuadrature`
precomputes the nodal weights once so that every integral becomes a dot
product.
"""

from __future__ import annotations

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

from .errors import DomainError
from .grids import AxisymGrid, LineGrid

__all__ = ["ProductQuadrature", "power_poly_integral", "segment_weights", "triangle_weights"]

_GL_ORDER = 12
_GJ_ORDER = 3
_SMOOTH_RATIO = 0.25


def _gauss_legendre_01(k):
    x, w = roots_legendre(k)
    return 0.5 * (x + 1.0), 0.5 * w


def _gauss_jacobi_01(k, s):
    # weight w**s on [0, 1]
    x, w = roots_jacobi(k, 0.0, s)
    return 0.5 * (x + 1.0), w * 0.5 ** (s + 1.0)


def _poly(c0, c1, c2, t):
    return c0 + t * (c1 + t * c2)


def power_poly_integral(x0, x1, c0, c1, c2, s):
    """``int_0^1 max(x0 + (x1 - x0) t, 0)**s * (c0 + c1 t + c2 t**2) dt``.

    Vectorised over array arguments; ``s > -1``.  Exact up to rounding
    except on segments that do not reach zero and whose endpoint ratio is
    above 0.25, where a 12-point Gauss-Legendre rule is used on an analytic
    integrand.
    """
    if not s > -1:
        raise DomainError(f"power must exceed -1 for integrability, got {s}")
    x0, x1, c0, c1, c2 = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (x0, x1, c0, c1, c2)))
    x0, x1, c0, c1, c2 = (a.copy() for a in (x0, x1, c0, c1, c2))

    # orient so that x1 >= x0; reflect the polynomial t -> 1 - t
    flip = x0 > x1
    if flip.any():
        a0, a1, a2 = c0[flip], c1[flip], c2[flip]
        c0[flip] = a0 + a1 + a2
        c1[flip] = -a1 - 2.0 * a2
        c2[flip] = a2
        x0[flip], x1[flip] = x1[flip].copy(), x0[flip].copy()

    out = np.zeros(x0.shape)
    tj, wj = _gauss_jacobi_01(_GJ_ORDER, s)

    def from_zero(tz, span, top, sel):
        # int over t in [tz, tz + span] where the linear factor rises from 0 to top
        t = tz[sel, None] + span[sel, None] * tj[None, :]
        q = _poly(c0[sel, None], c1[sel, None], c2[sel, None], t)
        return span[sel] * top[sel] ** s * (q @ wj)

    cross = (x0 <= 0) & (x1 > 0)
    if cross.any():
        tz = np.zeros(x0.shape)
        tz[cross] = x0[cross] / (x0[cross] - x1[cross])
        span = 1.0 - tz
        out[cross] = from_zero(tz, span, x1, cross)

    pos = x0 > 0
    smooth = pos & (x0 >= _SMOOTH_RATIO * x1)
    if smooth.any():
        tg, wg = _gauss_legendre_01(_GL_ORDER)
        lin = x0[smooth, None] + (x1[smooth, None] - x0[smooth, None]) * tg[None, :]
        q = _poly(c0[smooth, None], c1[smooth, None], c2[smooth, None], tg[None, :])
        out[smooth] = (lin ** s * q) @ wg

    steep = pos & ~smooth
    if steep.any():
        # extend the line back to its zero at tz < 0 and subtract
        tz = np.zeros(x0.shape)
        tz[steep] = x0[steep] / (x0[steep] - x1[steep])
        far = from_zero(tz, 1.0 - tz, x1, steep)
        near = from_zero(tz, -tz, x0, steep)
        out[steep] = far - near
    return out


def segment_weights(l0, l1, length, s):
    """Per-vertex weights of ``int l_+**s p`` over segments with linear ``l, p``."""
    w0 = length * power_poly_integral(l0, l1, 1.0, -1.0, 0.0, s)
    w1 = length * power_poly_integral(l0, l1, 0.0, 1.0, 0.0, s)
    return np.stack([w0, w1], axis=-1)


def _triangle_integral(lv, pv, area, s):
    """``int_T l_+**s P dA`` for linear ``l`` and ``P`` given at the vertices.

    Uses the distribution of ``l`` over the triangle: with sorted vertex
    values ``a <= b <= c`` the area density of ``l`` is piecewise linear
    (a hat peaked at ``b``) and the mean of ``P`` over a level segment is
    piecewise linear as well.
    """
    order = np.argsort(lv, axis=1)
    l_sorted = np.take_along_axis(lv, order, axis=1)
    p_sorted = np.take_along_axis(pv, order, axis=1)
    a, b, c = l_sorted.T
    pa, pb, pc = p_sorted.T
    span = c - a
    scale = np.maximum(np.abs(l_sorted).max(axis=1), 1e-300)
    flat = span <= 1e-14 * scale
    out = np.zeros(a.shape)
    good = ~flat
    if good.any():
        a_, b_, c_ = a[good], b[good], c[good]
        pa_, pb_, pc_ = pa[good], pb[good], pc[good]
        sp = span[good]
        kappa = (b_ - a_) / sp
        mu = (c_ - b_) / sp
        ar = area[good]
        c2a = 0.5 * ((pb_ - pa_) + (pc_ - pa_) * kappa)
        i1 = power_poly_integral(a_, b_, 0.0, pa_, c2a, s)
        c2b = 0.5 * ((pb_ - pc_) + (pa_ - pc_) * mu)
        i2 = power_poly_integral(c_, b_, 0.0, pc_, c2b, s)
        out[good] = 2.0 * ar * (kappa * i1 + mu * i2)
    if flat.any():
        m = l_sorted[flat].mean(axis=1)
        val = np.where(m > 0, np.abs(m) ** s, 0.0)
        out[flat] = area[flat] * val * pv[flat].mean(axis=1)
    return out


def triangle_weights(lv, area, s):
    """Per-vertex weights (shape ``(T, 3)``) of ``int_T l_+**s P dA``."""
    T = lv.shape[0]
    cols = []
    for k in range(3):
        e = np.zeros((T, 3))
        e[:, k] = 1.0
        cols.append(_triangle_integral(lv, e, area, s))
    return np.stack(cols, axis=1)


def _redistribute_cut(weights, lv, simplices, index, positive):
    """Replace ``p`` at non-positive vertices of cut simplices by a linear
    extrapolation from positive nodes, folding the weights accordingly.

    ``index`` maps integer grid coordinates to flat node numbers (``-1``
    outside the grid).  A vertex opposite an edge with two positive
    vertices ``a, b`` uses the parallelogram rule ``p(a) + p(b) - p(k)``
    with ``k = a + b - j``; a vertex next to a single positive vertex ``a``
    uses ``2 p(a) - p(2a - j)``.  When the needed node is missing or not
    positive the mean over the simplex's positive vertices is used.

    Returns the nodal weight vector and the per-simplex weights with the
    moved entries zeroed.
    """
    nodes = index.size
    shape = index.shape
    coords = np.stack(np.unravel_index(np.arange(nodes), shape), axis=1)
    pos = lv > 0
    npos = pos.sum(axis=1)
    nv = lv.shape[1]
    cut = (npos > 0) & (npos < nv)
    weights = weights.copy()
    weights[npos == 0] = 0.0
    extra_idx, extra_w = [], []

    def node_at(c):
        inside = np.all((c >= 0) & (c < np.array(shape)), axis=1)
        out = np.full(c.shape[0], -1)
        cc = np.where(inside[:, None], c, 0)
        out[inside] = index[tuple(cc[inside].T)]
        ok = out >= 0
        ok[ok] = positive[out[ok]]
        return out, ok

    rows = np.nonzero(cut)[0]
    if rows.size:
        S = simplices[rows]
        P = pos[rows]
        W = weights[rows].copy()
        for jslot in range(nv):
            out_rows = ~P[:, jslot]
            if not out_rows.any():
                continue
            r = np.nonzero(out_rows)[0]
            j = S[r, jslot]
            wj = W[r, jslot]
            others = [k for k in range(nv) if k != jslot]
            cj = coords[j]
            done = np.zeros(r.size, dtype=bool)
            if nv == 3:
                a_s, b_s = others
                both = P[r, a_s] & P[r, b_s]
                if both.any():
                    ca, cb = coords[S[r, a_s]], coords[S[r, b_s]]
                    k, ok = node_at(ca + cb - cj)
                    use = both & ok
                    for col, sign in ((S[r, a_s], 1.0), (S[r, b_s], 1.0), (k, -1.0)):
                        extra_idx.append(col[use])
                        extra_w.append(sign * wj[use])
                    done |= use
            # single positive neighbour (or fallback of the above): reflect through it
            for a_s in others:
                cand = ~done & P[r, a_s]
                if not cand.any():
                    continue
                if nv == 3:
                    # two positive vertices without a parallelogram node fall to the mean
                    cand &= ~P[r, [o for o in others if o != a_s][0]]
                    if not cand.any():
                        continue
                ca = coords[S[r, a_s]]
                k, ok = node_at(2 * ca - cj)
                use = cand & ok
                extra_idx.append(S[r, a_s][use])
                extra_w.append(2.0 * wj[use])
                extra_idx.append(k[use])
                extra_w.append(-wj[use])
                done |= use
            # mean over the positive vertices
            rest = ~done
            if rest.any():
                npv = P[r].sum(axis=1)
                for a_s in others:
                    sel = rest & P[r, a_s]
                    extra_idx.append(S[r, a_s][sel])
                    extra_w.append(wj[sel] / npv[sel])
            W[r, jslot] = 0.0
        weights[rows] = W
    w = np.zeros(nodes)
    np.add.at(w, simplices.ravel(), weights.ravel())
    if extra_idx:
        np.add.at(w, np.concatenate(extra_idx), np.concatenate(extra_w))
    return w, weights


def _local_cut_weights(weights, lv):
    """Per-simplex weights with non-positive vertices folded onto the
    positive ones equally (a rule local to each simplex)."""
    weights = weights.copy()
    pos = lv > 0
    npos = pos.sum(axis=1)
    cut = (npos > 0) & (npos < lv.shape[1])
    if cut.any():
        w = weights[cut]
        p = pos[cut]
        moved = np.where(p, 0.0, w).sum(axis=1)
        weights[cut] = np.where(p, w + (moved / p.sum(axis=1))[:, None], 0.0)
    weights[npos == 0] = 0.0
    return weights


def _triangulate(grid):
    """Two triangles per cell, split along the (i, j)-(i+1, j+1) diagonal."""
    nt, nz = grid.shape
    idx = np.arange(nt * nz).reshape(nt, nz)
    a = idx[:-1, :-1].ravel()
    b = idx[1:, :-1].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[:-1, 1:].ravel()
    tris = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    return tris


_TINY_POWER = 1e-200


class ProductQuadrature:
    """Nodal weights for ``int_{level > 0} level**s * p * density``.

    Parameters
    ----------
    grid : LineGrid or AxisymGrid
    level : ndarray
        Signed level function, positive on the integration region.
    s : float
        Power of the level carried by the integrand, ``s > -1``.
    density : bool
        Fold the grid's measure density (``tau**(n-2)``) into the weights.

    Notes
    -----
    Only the nodes with ``level > 0`` receive weight.  ``integrate(p)``
    returns ``sum(weights * p)`` with ``p`` read on those nodes only, so
    ``p`` may hold garbage (NaN, inf) elsewhere.  For ``s > 0`` a level
    with ``level**s < 1e-200`` is set to zero, since ``f / level**s`` would
    be an underflowed ratio there; its contribution is below roundoff.
    """

    def __init__(self, grid, level, s, density=True):
        self.grid = grid
        self.s = float(s)
        level = np.asarray(level, dtype=float)
        if level.shape != grid.shape:
            raise DomainError("level must match the grid shape")
        if self.s > 0:
            # levels whose power underflows sit on the free boundary for all
            # purposes; treat them as boundary nodes so p is extrapolated there
            with np.errstate(under="ignore"):
                tiny = (level > 0) & (np.maximum(level, 0.0) ** self.s < _TINY_POWER)
            level = np.where(tiny, 0.0, level)
        self.level = level
        self.positive = level > 0
        dens = grid.weight.ravel() if density else np.ones(level.size)
        flat = level.ravel()
        h = grid.h
        if isinstance(grid, LineGrid):
            segs = np.stack([np.arange(level.size - 1), np.arange(1, level.size)], 1)
            lv = flat[segs]
            length = np.diff(grid.t)
            sw = segment_weights(lv[:, 0], lv[:, 1], length, self.s)
            self.simplices = segs
            self.simplex_measure = length
        elif isinstance(grid, AxisymGrid):
            tris = _triangulate(grid)
            lv = flat[tris]
            area = np.full(tris.shape[0], 0.5 * h * h)
            sw = triangle_weights(lv, area, self.s)
            self.simplices = tris
            self.simplex_measure = area
        else:  # pragma: no cover
            raise DomainError(f"unsupported grid type {type(grid).__name__}")
        # the density is smooth; fold it into p vertex by vertex
        sw = sw * dens[self.simplices]
        index = np.arange(level.size).reshape(grid.shape)
        w, _ = _redistribute_cut(sw, lv, self.simplices, index, flat > 0)
        self.simplex_weights = _local_cut_weights(sw, lv)
        self.weights = w.reshape(grid.shape)

    def integrate(self, p):
        """Integral of ``level**s * p`` over the positive set."""
        p = np.asarray(p, dtype=float)
        return float(np.sum(self.weights[self.positive] * p[self.positive]))

    def simplex_integrals(self, p):
        """Per-simplex integrals of ``level**s * p`` (shape ``(S,)``).

        Cut simplices use the local rule (``p`` constant at the mean of the
        positive vertices), so these sum to :meth:`integrate` only up to the
        cut-cell correction.
        """
        pf = np.where(self.positive, np.asarray(p, dtype=float), 0.0).ravel()
        return np.sum(self.simplex_weights * pf[self.simplices], axis=1)

    def power_ratio(self, f):
        """``f / level**s`` on the positive nodes, zero elsewhere."""
        out = np.zeros(self.grid.shape)
        pos = self.positive
        out[pos] = np.asarray(f, dtype=float)[pos] / self.level[pos] ** self.s
        return out
