"""Discrete Alt-Phillips and modified energies and their inner-variation
coefficients.

All integrals run over the positivity set of the field, with the meridian
density ``tau**(n-2)`` on axisymmetric grids.  Integrands that vanish like a
power of the distance to the free boundary are evaluated with
:class:`~apfb.quadrature.ProductQuadrature`: the singular power of the
field's level function is integrated exactly and only the smooth remainder
is interpolated.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import EvaluationError
from .exponents import Exponents
from .grids import ScalarField, default_level, nodal_gradient
from .maps import VariationSpec, jacobian_blocks
from .profiles import v_from_u
from .quadrature import ProductQuadrature

__all__ = [
    "EnergyReport",
    "GeneralEnergySpec",
    "alt_phillips_spec",
    "modified_spec",
    "energy_ap",
    "energy_mod",
    "general_energy",
    "first_variation",
    "second_variation_closed_form",
    "variation_densities",
    "field_level",
]


@dataclass(frozen=True)
class EnergyReport:
    total: float
    gradient_part: float
    potential_part: float
    h: float
    exponents: Optional[dict] = None

    def to_dict(self):
        return {
            "total": self.total,
            "gradient_part": self.gradient_part,
            "potential_part": self.potential_part,
            "h": self.h,
            "exponents": self.exponents,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass(frozen=True, eq=False)
class GeneralEnergySpec:
    """``E[w] = int G(w) (|grad w|^2 + F(w))`` over ``{w > 0}``.

    Parameters
    ----------
    G, F : callable
        Vectorised maps of the field values on the positivity set.
    singular_exponent : float
        Power ``s`` of the field's level function carried by the integrand
        near the free boundary; the quadrature integrates ``level**s``
        exactly.  Zero for integrands bounded away from zero.
    exponents : Exponents, optional
        Needed only to build the level of a ``u``-field that carries none.
    """

    G: Callable
    F: Callable
    singular_exponent: float = 0.0
    exponents: Optional[Exponents] = None
    name: str = "general"


def alt_phillips_spec(exponents: Exponents) -> GeneralEnergySpec:
    """``G = 1``, ``F(u) = u**gamma``; ``u**gamma = (v/beta)**alpha`` so the
    singular power of the ``v``-level is ``alpha``."""
    g = exponents.gamma
    return GeneralEnergySpec(lambda w: np.ones_like(w), lambda w: w**g, exponents.alpha, exponents,
                             "alt_phillips")


def modified_spec(exponents: Exponents) -> GeneralEnergySpec:
    """``G(v) = v**alpha``, ``F = 1``."""
    a = exponents.alpha
    return GeneralEnergySpec(lambda w: w**a, lambda w: np.ones_like(w), a, exponents, "modified")


def field_level(field: ScalarField, exponents: Optional[Exponents] = None) -> np.ndarray:
    """Signed level of ``field``; ``u``-fields use the level of ``v``."""
    if field.level is not None:
        return np.asarray(field.level)
    if field.meta.get("kind") == "u" and exponents is not None:
        return default_level(v_from_u(field, exponents))
    return default_level(field)


def _checked(values, what):
    values = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(values)):
        raise EvaluationError(f"{what} returned non-finite values on the field's range")
    return values


class _Prepared:
    """Nodal pieces shared by energies and variation integrands."""

    def __init__(self, field: ScalarField, spec: GeneralEnergySpec):
        self.field = field
        self.grid = field.grid
        self.mask = field.mask
        self.level = field_level(field, spec.exponents)
        self.grad = nodal_gradient(field)
        w = np.asarray(field.values)[self.mask]
        self.G = np.zeros(self.grid.shape)
        self.F = np.zeros(self.grid.shape)
        self.G[self.mask] = _checked(np.broadcast_to(spec.G(w), w.shape), "G")
        self.F[self.mask] = _checked(np.broadcast_to(spec.F(w), w.shape), "F")
        self.gsq = np.where(self.mask, np.sum(self.grad**2, axis=0), 0.0)
        self.quad = ProductQuadrature(self.grid, self.level, spec.singular_exponent)

    def integrate(self, f):
        """Integral of a nodal density ``f`` that carries ``level**s``."""
        return self.quad.integrate(self.quad.power_ratio(f))


def general_energy(field: ScalarField, spec: GeneralEnergySpec) -> EnergyReport:
    """Quadrature of ``int G(w) (|grad w|^2 + F(w))`` over ``{w > 0}``."""
    prep = _Prepared(field, spec)
    grad_part = prep.integrate(prep.G * prep.gsq)
    pot_part = prep.integrate(prep.G * prep.F)
    exps = spec.exponents.to_dict() if spec.exponents is not None else None
    return EnergyReport(grad_part + pot_part, grad_part, pot_part, field.grid.h, exps)


def energy_ap(u: ScalarField, exponents: Exponents) -> EnergyReport:
    """Alt-Phillips energy ``int |grad u|^2 + u**gamma chi_{u>0}``.

    Examples
    --------
    >>> from apfb.exponents import derive_exponents
    >>> from apfb.grids import build_line_grid
    >>> from apfb.profiles import one_d_field
    >>> ex = derive_exponents(1.0)
    >>> u = one_d_field(ex, build_line_grid(-0.25, 1.0, 1 / 64), kind="u")
    >>> round(energy_ap(u, ex).total, 10)  # 2 (1/2)**2 / 3
    0.1666666667
    """
    return general_energy(u, alt_phillips_spec(exponents))


def energy_mod(v: ScalarField, exponents: Exponents) -> EnergyReport:
    """Modified energy ``int v**alpha chi_{v>0} (|grad v|^2 + 1)``."""
    return general_energy(v, modified_spec(exponents))


def variation_densities(field: ScalarField, spec: GeneralEnergySpec, Phi: VariationSpec):
    """Nodal integrands of the ``eps`` and ``eps**2`` coefficients.

    With ``a = |grad w|^2 + F`` and ``D = DPhi``::

        e1 = G a div(Phi) - 2 G grad w . D grad w
        e2 = G a (div(Phi)^2 - tr(D^2)) / 2 + G |D^T grad w|^2
             + G (2 grad w . D^2 grad w - 2 (grad w . D grad w) div(Phi))

    Divergence and trace include the angular block on meridian grids.

    Returns
    -------
    e1, e2 : ndarray
    prep : object with an ``integrate`` method for these densities
    """
    grid = field.grid
    Phi.check_support(grid)
    prep = _Prepared(field, spec)
    phi, dphi = Phi.evaluate(grid)
    d2, ang = jacobian_blocks(grid, phi, dphi)
    g = prep.grad
    div = np.trace(d2, axis1=0, axis2=1)
    trsq = np.einsum("ij...,ji...->...", d2, d2)
    if ang is not None:
        k = grid.n - 2
        div = div + k * ang
        trsq = trsq + k * ang**2
    gDg = np.einsum("i...,ij...,j...->...", g, d2, g)
    DTg = np.einsum("ij...,i...->j...", d2, g)
    gD2g = np.einsum("i...,ik...,kj...,j...->...", g, d2, d2, g)
    a = prep.gsq + prep.F
    G = prep.G
    e1 = G * a * div - 2.0 * G * gDg
    e2 = G * a * 0.5 * (div**2 - trsq) + G * np.sum(DTg**2, axis=0) + G * (2.0 * gD2g - 2.0 * gDg * div)
    e1 = np.where(field.mask, e1, 0.0)
    e2 = np.where(field.mask, e2, 0.0)
    return e1, e2, prep


def first_variation(field: ScalarField, spec: GeneralEnergySpec, Phi: VariationSpec) -> float:
    """Coefficient of ``eps`` in ``E[w o T_eps^{-1}]``, ``T_eps = id + eps Phi``.

    Raises
    ------
    SupportError
        If the support box of ``Phi`` touches the grid boundary.
    """
    e1, _, prep = variation_densities(field, spec, Phi)
    return prep.integrate(e1)


def second_variation_closed_form(field: ScalarField, spec: GeneralEnergySpec, Phi: VariationSpec) -> float:
    """Coefficient of ``eps**2`` in ``E[w o T_eps^{-1}]`` from the closed form."""
    _, e2, prep = variation_densities(field, spec, Phi)
    return prep.integrate(e2)
