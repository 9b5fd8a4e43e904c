"""Command-line front end.

Every subcommand reads a :class:`~apfb.io.RunConfig` (from ``--config``
and/or flags), runs one experiment family and writes its CSV/JSON outputs
plus ``manifest.json`` into ``--out``.

Exit codes: 0 success, 2 validation error, 3 solver error, 64 usage error.
"""

from __future__ import annotations

import argparse
import math
import sys
import time
from typing import Optional, Sequence

import numpy as np

from . import io as apio
from .errors import APFBError, DomainError, SolverError, ValidationError

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_SOLVER = 3
EXIT_USAGE = 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


# ---------------------------------------------------------------------------
# Helpers shared by handlers


def _table_csv(table):
    header, cols = table
    rows = zip(*[np.asarray(c, dtype=float) for c in cols])
    return apio.csv_text(header, rows)


def _axisym(cfg, extent, n=None):
    from .grids import build_axisym_grid

    return build_axisym_grid(extent, -extent, extent, cfg.h, cfg.n if n is None else n)


def _radial(cfg, ex, r0, extent):
    from .profiles import radial_field, radial_profile

    r_max = 1.01 * math.sqrt(2.0) * extent + cfg.h
    prof = radial_profile(ex, r0, r_max, cfg.tol)
    grid = _axisym(cfg, extent)
    return prof, grid, radial_field(prof, grid)


def _ball(center, radius):
    c = [float(x) for x in center]
    R = float(radius)

    def phi(t, z):
        s = ((t - c[0]) ** 2 + (z - c[1]) ** 2) / R**2
        return np.clip(1.0 - s, 0.0, None) ** 2

    return phi


def _variation(cfg, spec):
    from .maps import bump_variation, default_ladder, radial_variation

    ladder = tuple(cfg.ladder) if cfg.ladder else default_ladder()
    kind = spec.get("kind", "bump")
    amp = float(spec.get("amplitude", 1.0))
    if kind == "bump":
        return bump_variation(spec["center"], spec["radius"], spec["direction"], amp, ladder)
    if kind == "radial":
        return radial_variation(spec["r_in"], spec["r_out"], amp, spec.get("center_z", 0.0), ladder)
    raise ValidationError(f"unknown variation kind {kind!r}", ["params.phi.kind"])


# ---------------------------------------------------------------------------
# Handlers: each returns {filename: text}


def cmd_profile_1d(cfg):
    from .grids import build_line_grid
    from .profiles import one_d_profile

    ex = cfg.exponents()
    L = float(cfg.params["length"])
    prof = one_d_profile(ex, build_line_grid(0.0, L, cfg.h))
    side = dict(prof.sidecar(), length=L, h=cfg.h,
                max_ode_residual=float(np.max(prof.ode_residual(), initial=0.0)),
                max_equipartition_gap=float(np.max(prof.equipartition_gap(), initial=0.0)))
    return {"profile_1d.csv": _table_csv(prof.table()), "profile_1d.json": apio.dumps_json(side)}


def cmd_profile_radial(cfg):
    from .profiles import radial_profile

    p = cfg.params
    prof = radial_profile(cfg.exponents(), p["r0"], p["r_max"], cfg.tol, int(p["samples"]))
    side = prof.sidecar()
    r = prof.r[(prof.r > prof.r0 + 1e-3) & (prof.r < prof.r_max - 1e-3)]
    side["max_ode_residual"] = float(np.max(np.abs(prof.ode_residual(r)), initial=0.0))
    return {"profile_radial.csv": _table_csv(prof.table()), "profile_radial.json": apio.dumps_json(side)}


def _families(name):
    return ("axis", "equator") if name == "both" else (name,)


def cmd_cone_search(cfg):
    from .profiles import cone_scan

    p = cfg.params
    ex = cfg.exponents()
    h0 = np.logspace(math.log10(p["h0_min"]), math.log10(p["h0_max"]), int(p["count"]))
    files, summary = {}, {"exponents": ex.to_dict(), "families": {}}
    for fam in _families(p["family"]):
        scan = cone_scan(ex, h0, cfg.tol, fam, cfg.threads)
        summary["families"][fam] = scan.summary()
        files[f"cone_scan_{fam}.csv"] = apio.csv_text(["h0", "mismatch"], zip(scan.h0, scan.mismatch))
        for k, cone in enumerate(scan.nonflat):
            files[f"cone_{fam}_{k}.csv"] = _table_csv(cone.table())
    found = any(f["cones"] for f in summary["families"].values())
    summary["outcome"] = "cone found" if found else "none found in scanned range"
    files["cone_search.json"] = apio.dumps_json(summary)
    return files


def cmd_energy(cfg):
    from .energy import energy_ap, energy_mod
    from .grids import build_line_grid
    from .profiles import one_d_field, radial_field

    p = cfg.params
    ex = cfg.exponents()
    if p["profile"] == "one_d":
        L = float(p["length"])
        grid = build_line_grid(-0.25 * L, L, cfg.h)
        u = one_d_field(ex, grid, kind="u", analytic_gradient=False)
        v = one_d_field(ex, grid, kind="v", analytic_gradient=False)
    elif p["profile"] == "radial":
        prof, grid, _ = _radial(cfg, ex, p["r0"], p["extent"])
        u = radial_field(prof, grid, kind="u", analytic_gradient=False)
        v = radial_field(prof, grid, kind="v", analytic_gradient=False)
    else:
        raise ValidationError(f"unknown profile {p['profile']!r}", ["params.profile"])
    eap = energy_ap(u, ex)
    emod = energy_mod(v, ex)
    scaled = ex.beta ** (-ex.alpha) * emod.total
    out = {"E_ap": eap.to_dict(), "E_mod": emod.to_dict(), "scaled_E_mod": scaled,
           "rel_gap": abs(eap.total - scaled) / abs(eap.total) if eap.total else 0.0,
           "profile": p["profile"], "h": cfg.h}
    return {"energy.json": apio.dumps_json(out)}


def cmd_verify_expansion(cfg):
    from .energy import GeneralEnergySpec, alt_phillips_spec, modified_spec
    from .grids import ScalarField
    from .profiles import one_d_field, radial_field
    from .variation import verify_expansion

    p = cfg.params
    Phi = _variation(cfg, p["phi"])
    if p["profile"] == "polynomial":
        grid = _axisym(cfg, p["extent"], n=2)
        T, Z = grid.coords()
        u = 2.0 + T**2 + 0.5 * T * Z + Z**3 / 3.0
        grad = np.stack([2 * T + 0.5 * Z, 0.5 * T + Z**2])
        field = ScalarField(grid, u, u > 0, gradient=grad, meta={"profile": "polynomial"})
        spec = GeneralEnergySpec(lambda w: np.ones_like(w), lambda w: np.zeros_like(w), 0.0,
                                 name="dirichlet")
    else:
        ex = cfg.exponents()
        spec = modified_spec(ex) if p["energy"] == "modified" else alt_phillips_spec(ex)
        kind = "v" if p["energy"] == "modified" else "u"
        if p["profile"] == "radial":
            prof, grid, _ = _radial(cfg, ex, p["r0"], p["extent"])
            field = radial_field(prof, grid, kind=kind)
        elif p["profile"] == "one_d":
            field = one_d_field(ex, _axisym(cfg, p["extent"]), kind=kind)
        else:
            raise ValidationError(f"unknown profile {p['profile']!r}", ["params.profile"])
    rep = verify_expansion(field, Phi, spec, p["method"], threads=cfg.threads)
    return {"verify_expansion.json": apio.dumps_json(rep.to_dict())}


def cmd_lemma_a(cfg):
    from .variation import lemma_a_slopes

    p = cfg.params
    res = lemma_a_slopes(int(p["samples"]), tuple(int(s) for s in p["sizes"]))
    out = {"sizes": {str(k): v for k, v in res.items()}}
    return {"lemma_a.json": apio.dumps_json(out)}


def _stability_field(cfg, p):
    from .profiles import one_d_field

    ex = cfg.exponents()
    if p["profile"] == "one_d":
        return ex, one_d_field(ex, _axisym(cfg, p["extent"]))
    if p["profile"] == "radial":
        return ex, _radial(cfg, ex, p["r0"], p["extent"])[2]
    raise ValidationError(f"unknown profile {p['profile']!r}", ["params.profile"])


def cmd_quadform(cfg):
    from .stability import quad_form

    p = cfg.params
    ex, v = _stability_field(cfg, p)
    T, Z = v.grid.coords()
    phi = _ball(p["phi"]["center"], p["phi"]["radius"])(T, Z)
    rep = quad_form(v, ex, phi)
    return {"quadform.json": apio.dumps_json(rep.to_dict())}


def cmd_spectrum(cfg):
    from .stability import rayleigh_min

    p = cfg.params
    ex, v = _stability_field(cfg, p)
    res = rayleigh_min(v, ex, p["region"], tol=1e-8)
    return {"spectrum.json": apio.dumps_json(dict(res.to_dict(), profile=p["profile"]))}


def cmd_axisym_check(cfg):
    from .grids import build_axisym_grid
    from .profiles import cone_field, cone_scan
    from .stability import probe_sweep_csv, theta_probe_sweep, theta_window

    p = cfg.params
    ex = cfg.exponents()
    win = theta_window(ex.n, ex.alpha)
    summary = {"window": win.to_dict(), "cones": []}
    files = {}
    if not win.feasible:
        summary["outcome"] = "window empty; criterion not applicable"
        files["axisym_check.json"] = apio.dumps_json(summary)
        return files
    k = int(p["probes"])
    thetas = np.linspace(win.lower, win.upper, k + 2)[1:-1]
    radii = sorted(float(r) for r in np.atleast_1d(p["R"]))
    grids = {}
    for R in radii:
        extent = 2.0 * R + 0.25
        grids[R] = build_axisym_grid(extent, -extent, extent, cfg.h, ex.n)
    h0 = np.logspace(-2, 1, int(p["count"]))
    for fam in _families(p["family"]):
        scan = cone_scan(ex, h0, cfg.tol, fam, cfg.threads)
        for j, cone in enumerate(scan.nonflat):
            sweeps = []
            for R in radii:
                rows = theta_probe_sweep(cone_field(cone, grids[R]), ex, thetas, p["eps"], R)
                name = f"probe_sweep_{fam}_{j}_R{R:g}.csv"
                files[name] = probe_sweep_csv(rows)
                sweeps.append({"R": R, "file": name, "violated": any(r[3] for r in rows),
                               "max_ratio": max(r[1] / r[2] for r in rows if r[2] > 0)})
            summary["cones"].append(dict(cone.sidecar(), sweeps=sweeps,
                                         violated=any(w["violated"] for w in sweeps)))
    if not summary["cones"]:
        summary["outcome"] = "none found in scanned range"
    elif all(c["violated"] for c in summary["cones"]):
        summary["outcome"] = "every non-flat cone violates the inequality for some probe"
    else:
        summary["outcome"] = "some non-flat cone passed every probe"
    files["axisym_check.json"] = apio.dumps_json(summary)
    return files


def cmd_theta_window(cfg):
    from .stability import theta_window

    w = theta_window(cfg.n, cfg.exponents().alpha)
    return {"theta_window.json": apio.dumps_json(dict(w.to_dict(), feasible_n=w.feasible_integers))}


def cmd_figure1(cfg):
    from .stability import alpha_threshold, figure1_csv

    th = {"alpha_star_4": alpha_threshold(4), "alpha_star_5": alpha_threshold(5)}
    return {"figure1.csv": figure1_csv(int(cfg.params["points"])), "figure1.json": apio.dumps_json(th)}


def cmd_curvature_check(cfg):
    from .profiles import radial_profile
    from .stability import curvature_check

    p = cfg.params
    prof = radial_profile(cfg.exponents(), p["r0"], p["r_max"], cfg.tol)
    return {"curvature_check.json": apio.dumps_json(curvature_check(prof).to_dict())}


def cmd_alpha_limit(cfg):
    from .stability import limit_alpha_zero

    p = cfg.params
    grid = _axisym(cfg, p["extent"])
    phi = _ball(p["phi"]["center"], p["phi"]["radius"])
    res = limit_alpha_zero(p["r0"], cfg.n, p["alphas"], phi, grid, tol=cfg.tol)
    rows = [(r["alpha"], r["potential"], r["target"], r["gap"]) for r in res["rows"]]
    return {"alpha_limit.json": apio.dumps_json(res),
            "alpha_limit.csv": apio.csv_text(["alpha", "potential", "target", "gap"], rows)}


HANDLERS = {
    "profile-1d": cmd_profile_1d,
    "profile-radial": cmd_profile_radial,
    "cone-search": cmd_cone_search,
    "energy": cmd_energy,
    "verify-expansion": cmd_verify_expansion,
    "lemma-a-tests": cmd_lemma_a,
    "quadform": cmd_quadform,
    "spectrum": cmd_spectrum,
    "axisym-check": cmd_axisym_check,
    "theta-window": cmd_theta_window,
    "figure1": cmd_figure1,
    "curvature-check": cmd_curvature_check,
    "alpha-limit": cmd_alpha_limit,
}

# command-specific flags: flag -> params key
_EXTRA_FLAGS = {
    "--length": ("length", float),
    "--r0": ("r0", float),
    "--r-max": ("r_max", float),
    "--family": ("family", str),
    "--method": ("method", str),
    "--profile": ("profile", str),
}


_DESCRIPTIONS = {
    "profile-1d": "tabulate the one-dimensional profile",
    "profile-radial": "shoot the radial profile from a free-boundary radius",
    "cone-search": "scan cone heights h0 and refine converged cones",
    "energy": "Alt-Phillips and modified energies of a profile on a grid",
    "verify-expansion": "fit E0, E1, E2 along an epsilon ladder against closed forms",
    "lemma-a-tests": "truncation slopes of the determinant and norm expansions",
    "quadform": "stability quadratic form for one probe",
    "spectrum": "smallest generalized eigenvalue of the stability form",
    "axisym-check": "theta-window probes on every cone found by the scan",
    "theta-window": "feasible theta interval for (n, alpha)",
    "figure1": "stability thresholds alpha*(4), alpha*(5) and the window table",
    "curvature-check": "free-boundary curvature identities of a radial profile",
    "alpha-limit": "gap between potential and curvature terms as alpha -> 0",
}


# ---------------------------------------------------------------------------
# Entry point


def build_parser():
    common = _Parser(add_help=False)
    ex = common.add_mutually_exclusive_group()
    ex.add_argument("--gamma", type=float, help="Alt-Phillips exponent gamma in [0, 2)")
    ex.add_argument("--alpha", type=float, help="exponent alpha = 2 gamma / (2 - gamma)")
    common.add_argument("--n", type=int, help="space dimension")
    common.add_argument("--h", type=float, help="grid spacing")
    common.add_argument("--tol", type=float, help="solver tolerance")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="worker threads")
    common.add_argument("--config", help="JSON run configuration")
    for flag, (key, typ) in _EXTRA_FLAGS.items():
        common.add_argument(flag, type=typ, dest=f"param_{key}", help=f"sets params.{key}")

    parser = _Parser(prog="apfb", description="Alt-Phillips free-boundary numerical lab")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    for name in HANDLERS:
        sub.add_parser(name, parents=[common], help=_DESCRIPTIONS[name], description=_DESCRIPTIONS[name])
    return parser


def resolve_config(args):
    """Merge ``--config`` (if any) with flags; flags win."""
    if args.config:
        base = apio.load_config(args.config).to_dict()
        if base["command"] != args.command:
            raise ValidationError(f"config is for {base['command']!r}, not {args.command!r}", ["command"])
    else:
        base = {"command": args.command}
    data = dict(base)
    for key in ("n", "h", "tol", "out", "threads"):
        val = getattr(args, key)
        if val is not None:
            data[key] = val
    if args.gamma is not None:
        data["gamma"], data["alpha"] = args.gamma, None
    if args.alpha is not None:
        data["alpha"], data["gamma"] = args.alpha, None
    params = dict(data.get("params") or {})
    allowed = apio.COMMANDS[args.command]
    for _, (key, _) in _EXTRA_FLAGS.items():
        val = getattr(args, f"param_{key}")
        if val is not None:
            if key not in allowed:
                raise ValidationError(f"--{key.replace('_', '-')} does not apply to {args.command}",
                                      [f"params.{key}"])
            params[key] = val
    data["params"] = params
    return apio.config_from_dict(data)


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse ``argv``, run the subcommand and write its outputs.

    Returns the exit code instead of raising.
    """
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError(parser.format_usage())
    except UsageError as exc:
        sys.stderr.write(str(exc) + ("\n" if not str(exc).endswith("\n") else ""))
        return EXIT_USAGE
    start = time.perf_counter()
    try:
        cfg = resolve_config(args)
        files = HANDLERS[cfg.command](cfg)
        inputs = {"config": args.config} if args.config else None
        manifest = apio.write_outputs(files, cfg.out, cfg, time.perf_counter() - start, inputs)
    except (ValidationError, DomainError) as exc:
        keys = getattr(exc, "keys", ())
        sys.stderr.write(f"validation error: {exc}" + (f" [{', '.join(keys)}]" if keys else "") + "\n")
        return EXIT_VALIDATION
    except SolverError as exc:
        extra = f" (residual {exc.residual})" if exc.residual is not None else ""
        sys.stderr.write(f"solver error: {exc}{extra}\n")
        return EXIT_SOLVER
    except APFBError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_VALIDATION
    for name in sorted(manifest.outputs):
        print(f"wrote {cfg.out}/{name}")
    return EXIT_OK


def main() -> None:
    raise SystemExit(run())


if __name__ == "__main__":
    main()
