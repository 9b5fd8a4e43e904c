"""Numerical lab for Alt-Phillips free boundaries.

Exponents and grids, explicit and shot profiles, product quadrature for the
two energies, domain-variation expansions, stability forms and the
axisymmetric window, plus a JSON/CSV command-line front end.
"""

from types import ModuleType as _ModuleType
from importlib.metadata import PackageNotFoundError as _NotFound, version as _version

from .energy import (EnergyReport, GeneralEnergySpec, alt_phillips_spec, energy_ap, energy_mod,
                     first_variation, general_energy, modified_spec, second_variation_closed_form)
from .errors import (APFBError, BracketError, DomainError, EvaluationError, FitError,
                     InvertibilityError, ProfileDegenerateError, SolverError, SupportError,
                     ValidationError)
from .exponents import Exponents, derive_exponents, exponents_from_alpha
from .grids import (AxisymGrid, LineGrid, ScalarField, build_axisym_grid, build_line_grid,
                    distance_to_fb, nodal_gradient, read_field_csv, write_field_csv)
from .maps import VariationSpec, bump_variation, radial_variation, zero_variation
from .profiles import (ConeProfile, ConeScan, NoFreeBoundary, OneDProfile, RadialProfile, cone_field,
                       cone_scan, cone_shoot, cone_solve, one_d_field, one_d_profile, radial_field,
                       radial_profile, u_from_v, v_from_u)
from .quadrature import ProductQuadrature
from .stability import (ThetaWindow, alpha_threshold, axisym_quad_form, build_theta_test,
                        curvature_check, figure1_table, limit_alpha_zero, quad_form, rayleigh_min,
                        stability_potential_u, stability_potential_v, theta_probe_sweep, theta_window)
from .variation import (det_expansion, energy_ladder, fit_expansion, inverse_map, lemma_a_slopes,
                        normsq_expansion, pullback, verify_expansion)

try:
    __version__ = _version("artifact")
except _NotFound:  # pragma: no cover
    __version__ = "0+unknown"

__all__ = sorted(name for name, obj in globals().items()
                 if not name.startswith("_") and not isinstance(obj, _ModuleType))
