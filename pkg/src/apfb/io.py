"""Run configuration, persistence and manifests.

Configs are JSON objects validated strictly before any computation.
Results are written atomically (temporary file plus rename) with floats in
17 significant digits, and each output directory receives a single
``manifest.json`` listing the SHA-256 digest of every emitted file.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

from .errors import ValidationError

__all__ = [
    "SCHEMA_VERSION",
    "COMMANDS",
    "RunConfig",
    "RunManifest",
    "load_config",
    "config_from_dict",
    "dumps_json",
    "csv_text",
    "atomic_write",
    "write_outputs",
    "sha256_file",
]

SCHEMA_VERSION = 1

# command -> allowed params with defaults
COMMANDS: Dict[str, Dict[str, Any]] = {
    "profile-1d": {"length": 1.0},
    "profile-radial": {"r0": 1.0, "r_max": 3.0, "samples": 401},
    "cone-search": {"h0_min": 0.01, "h0_max": 10.0, "count": 200, "family": "both"},
    "energy": {"profile": "one_d", "length": 1.0, "r0": 0.5, "extent": 1.5},
    "verify-expansion": {"profile": "radial", "r0": 0.5, "extent": 1.5, "method": "lagrangian",
                         "energy": "modified", "phi": {"kind": "bump", "center": [0.5, 0.2],
                                                       "radius": 0.3, "direction": [1.0, 0.0]}},
    "lemma-a-tests": {"samples": 100, "sizes": [2, 3, 4, 5]},
    "quadform": {"profile": "radial", "r0": 0.5, "extent": 1.5,
                 "phi": {"center": [0.0, 0.1], "radius": 0.9}},
    "spectrum": {"profile": "one_d", "r0": 0.5, "extent": 1.0, "region": None},
    "axisym-check": {"family": "both", "eps": 0.1, "R": [1.0, 2.0, 4.0], "probes": 7, "count": 200},
    "theta-window": {},
    "figure1": {"points": 401},
    "curvature-check": {"r0": 1.0, "r_max": 3.0},
    "alpha-limit": {"r0": 0.5, "alphas": [0.5, 0.25, 0.125, 0.0625], "extent": 1.5,
                    "phi": {"center": [0.0, 0.1], "radius": 1.2}},
}

_TOP_KEYS = {"schema_version", "command", "gamma", "alpha", "n", "h", "tol", "ladder", "probes",
             "out", "threads", "params"}


@dataclass
class RunConfig:
    """Validated parameters of one run.

    ``gamma`` and ``alpha`` are mutually exclusive; ``params`` holds the
    command-specific options with defaults filled in.
    """

    command: str
    gamma: Optional[float] = None
    alpha: Optional[float] = None
    n: int = 2
    h: float = 1.0 / 128
    tol: float = 1e-10
    ladder: Optional[list] = None
    probes: Optional[dict] = None
    out: str = "out"
    threads: int = 1
    params: dict = dc_field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self):
        return {
            "schema_version": self.schema_version,
            "command": self.command,
            "gamma": self.gamma,
            "alpha": self.alpha,
            "n": self.n,
            "h": self.h,
            "tol": self.tol,
            "ladder": self.ladder,
            "probes": self.probes,
            "out": self.out,
            "threads": self.threads,
            "params": self.params,
        }

    def exponents(self):
        from .exponents import derive_exponents, exponents_from_alpha

        if self.gamma is not None:
            return derive_exponents(self.gamma, self.n)
        return exponents_from_alpha(0.0 if self.alpha is None else self.alpha, self.n)


def _is_number(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def config_from_dict(data: dict) -> RunConfig:
    """Validate a parsed config and fill defaults.

    Raises
    ------
    ValidationError
        Listing every offending key.
    """
    if not isinstance(data, dict):
        raise ValidationError("config must be a JSON object")
    unknown = sorted(set(data) - _TOP_KEYS)
    if unknown:
        raise ValidationError(f"unknown config keys: {', '.join(unknown)}", unknown)
    bad = []
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ValidationError(f"schema_version {version!r} does not match {SCHEMA_VERSION}",
                              ["schema_version"])
    command = data.get("command")
    if command not in COMMANDS:
        raise ValidationError(f"unknown command {command!r}", ["command"])
    for key in ("gamma", "alpha"):
        if data.get(key) is not None and not _is_number(data[key]):
            bad.append(key)
    if data.get("gamma") is not None and data.get("alpha") is not None:
        bad.extend(["gamma", "alpha"])
    n = data.get("n", 2)
    if not isinstance(n, int) or isinstance(n, bool) or n < 1:
        bad.append("n")
    for key in ("h", "tol"):
        if key in data and not (_is_number(data[key]) and data[key] > 0):
            bad.append(key)
    ladder = data.get("ladder")
    if ladder is not None and not (isinstance(ladder, list) and ladder
                                   and all(_is_number(e) and e > 0 for e in ladder)):
        bad.append("ladder")
    probes = data.get("probes")
    if probes is not None and not isinstance(probes, dict):
        bad.append("probes")
    threads = data.get("threads", 1)
    if not isinstance(threads, int) or isinstance(threads, bool) or threads < 1:
        bad.append("threads")
    out = data.get("out", "out")
    if not isinstance(out, str) or not out:
        bad.append("out")
    params_in = data.get("params", {}) or {}
    if not isinstance(params_in, dict):
        bad.append("params")
        params_in = {}
    defaults = COMMANDS[command]
    extra = sorted(set(params_in) - set(defaults))
    bad.extend(f"params.{k}" for k in extra)
    for k, v in params_in.items():
        if k in defaults and _is_number(defaults[k]) and not _is_number(v):
            bad.append(f"params.{k}")
        if k in ("tol",) and _is_number(v) and v <= 0:
            bad.append(f"params.{k}")
    if bad:
        bad = sorted(dict.fromkeys(bad))
        raise ValidationError(f"invalid config keys: {', '.join(bad)}", bad)
    params = json.loads(json.dumps(defaults))
    params.update(params_in)
    return RunConfig(
        command=command,
        gamma=None if data.get("gamma") is None else float(data["gamma"]),
        alpha=None if data.get("alpha") is None else float(data["alpha"]),
        n=int(n),
        h=float(data.get("h", 1.0 / 128)),
        tol=float(data.get("tol", 1e-10)),
        ladder=None if ladder is None else [float(e) for e in ladder],
        probes=probes,
        out=out,
        threads=int(threads),
        params=params,
    )


def load_config(path) -> RunConfig:
    """Read and validate a JSON config file."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(data)


# ---------------------------------------------------------------------------
# Serialisation


def _float(x: float) -> str:
    if math.isnan(x) or math.isinf(x):
        return "null"
    s = format(x, ".17g")
    if "e" not in s and "." not in s and "n" not in s:
        s += ".0"
    return s


def _to_builtin(obj):
    try:
        import numpy as np
    except ImportError:  # pragma: no cover
        np = None
    if np is not None:
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        if isinstance(obj, np.generic):
            return obj.item()
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    if isinstance(obj, (tuple, set)):
        return list(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _encode(obj, indent, level):
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if obj is None:
        return "null"
    if obj is True:
        return "true"
    if obj is False:
        return "false"
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        return _float(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_encode(obj[k], indent, level + 1)}"
                 for k in sorted(obj, key=str)]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, list):
        if not obj:
            return "[]"
        items = [pad + _encode(v, indent, level + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    return _encode(_to_builtin(obj), indent, level)


def dumps_json(obj, indent: int = 2) -> str:
    """JSON text with sorted keys and floats in 17 significant digits.

    Non-finite floats become ``null``.

    >>> dumps_json({"b": 0.1, "a": [1, True]})
    '{\\n  "a": [\\n    1,\\n    true\\n  ],\\n  "b": 0.10000000000000001\\n}\\n'
    """
    return _encode(obj, indent, 0) + "\n"


def csv_text(header: Iterable[str], rows: Iterable[Iterable]) -> str:
    """CSV text; floats in 17 significant digits, NaN as ``nan``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(header))
    for row in rows:
        out = []
        for x in row:
            if isinstance(x, bool):
                out.append("true" if x else "false")
            elif isinstance(x, float) or (hasattr(x, "dtype") and getattr(x.dtype, "kind", "") == "f"):
                out.append(format(float(x), ".17g"))
            else:
                out.append(x)
        w.writerow(out)
    return buf.getvalue()


def atomic_write(path, text: str) -> None:
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _version():
    try:
        from importlib.metadata import version

        return version("artifact")
    except Exception:  # pragma: no cover
        return "0+unknown"


@dataclass
class RunManifest:
    config: dict
    version: str
    wall_time: float
    threads: int
    outputs: dict
    inputs: dict
    seed: int = 0

    def to_dict(self):
        return {"config": self.config, "artifact_version": self.version, "wall_time": self.wall_time,
                "threads": self.threads, "seed": self.seed, "outputs": self.outputs, "inputs": self.inputs}


def write_outputs(files: Dict[str, str], out_dir, config: RunConfig, wall_time: float,
                  inputs: Optional[Dict[str, str]] = None) -> RunManifest:
    """Write every ``name -> text`` entry of ``files`` into ``out_dir`` and
    add ``manifest.json`` referencing them by SHA-256 digest.

    Parameters
    ----------
    inputs : dict, optional
        ``label -> path`` of input files (e.g. the config) to digest.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if "manifest.json" in files:
        raise ValidationError("manifest.json is reserved", ["manifest.json"])
    digests = {}
    for name in sorted(files):
        atomic_write(out / name, files[name])
        digests[name] = sha256_file(out / name)
    in_digests = {}
    for label, p in sorted((inputs or {}).items()):
        in_digests[label] = {"path": str(p), "sha256": sha256_file(p)}
    manifest = RunManifest(config.to_dict(), _version(), float(wall_time), config.threads, digests,
                           in_digests, int(os.environ.get("APFB_SEED", "0")))
    atomic_write(out / "manifest.json", dumps_json(manifest.to_dict()))
    return manifest
