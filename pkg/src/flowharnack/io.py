"""Scenario files, checkpoints and report writers.

Scenario files are INI-style ``key = value`` text in a fixed section layout.
Floats are written with ``repr`` so a file read back and written again is
byte-identical, and the sha256 of the canonical text is the config hash that
every report carries.

Checkpoints are a magic line, one JSON header line, then each field as raw
little-endian float64 in C order.
"""
from __future__ import annotations

import configparser
import csv
import hashlib
import json
import math
import re
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import geometry as geo
from .errors import ConfigError

MAGIC = b"FLOWHARNACK-CHECKPOINT\n"
CHECKPOINT_VERSION = 1
CSV_VERSION = "flowharnack-csv 1"

MODELS = ("ricci", "static", "extended-ricci", "custom")
SCHEDULES = ("lambda_g0", "lambda_gt")
U_PROFILES = ("flat", "cos-cos", "sin-cos")
PHI_PROFILES = ("none", "cos-sum", "sin-sum")
CHECKS = ("dalpha", "harnack", "equality", "kernel_oracle", "rho", "w_monotone", "mu_monotone",
          "gradient", "linf", "log_moment", "reduced", "identity")


@dataclass(frozen=True)
class Scenario:
    name: str = "scenario"
    # grid
    nx: int = 64
    ny: int = 64
    lx: float = geo.TWO_PI
    ly: float = geo.TWO_PI
    scheme: str = "spectral"
    # model
    model: str = "ricci"
    a: float = 1.0
    schedule: str = "lambda_gt"
    lam: float = 0.0
    # initial data
    u_profile: str = "cos-cos"
    u_amplitude: float = 0.05
    phi_profile: str = "none"
    phi_amplitude: float = 0.0
    # run
    T: float = 0.2
    dt_policy: str = "cfl"
    safety: float = 0.2
    dt: float = 0.0
    store_stride: int = 1
    nonconformal: str = "gauge"
    seed: int = 0
    basepoint_i: int = 16
    basepoint_j: int = 16
    # checks
    checks: tuple = ("dalpha", "harnack", "rho", "w_monotone")
    tolerances: tuple = ()
    output: str = "runs"

    def tolerance(self, check, default):
        return dict(self.tolerances).get(check, default)


_SECTIONS = {
    "scenario": ("name",),
    "grid": ("nx", "ny", "lx", "ly", "scheme"),
    "model": ("model", "a", "schedule", "lam"),
    "initial": ("u_profile", "u_amplitude", "phi_profile", "phi_amplitude"),
    "run": ("T", "dt_policy", "safety", "dt", "store_stride", "nonconformal", "seed", "basepoint_i",
            "basepoint_j", "output"),
    "checks": ("checks",),
}
_TYPES = {f.name: f.type for f in fields(Scenario)}
_DEFAULTS = Scenario()


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(value)
    return str(value)


def to_text(sc):
    """Canonical scenario text; floats via repr so reading it back is exact."""
    lines = []
    for section, keys in _SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            lines.append(f"{key} = {_fmt(getattr(sc, key))}")
        if section == "checks":
            for check, tol in sc.tolerances:
                lines.append(f"tol.{check} = {tol!r}")
        lines.append("")
    return "\n".join(lines)


def config_hash(sc):
    return hashlib.sha256(to_text(sc).encode()).hexdigest()


def _line_of(text, section, key):
    current = None
    for i, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1].strip()
        elif current == section and re.match(rf"{re.escape(key)}\s*[=:]", s):
            return i
    return None


def _convert(key, raw, line):
    kind = _TYPES[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            val = float(raw)
            if not math.isfinite(val):
                raise ValueError("not finite")
            return val
        if kind == "tuple":
            return tuple(p.strip() for p in raw.split(",") if p.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})", line) from None


def from_text(text):
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0], getattr(exc, "lineno", None)) from None
    values, tols = {}, []
    for section in cp.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]", _line_of(text, section, "") or None)
        for key, raw in cp.items(section):
            line = _line_of(text, section, key)
            if section == "checks" and key.startswith("tol."):
                check = key[4:]
                if check not in CHECKS:
                    raise ConfigError(f"tolerance for unknown check {check!r}", line)
                tols.append((check, _convert("T", raw, line)))
                continue
            if key not in _SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]", line)
            values[key] = _convert(key, raw, line)
    sc = replace(_DEFAULTS, tolerances=tuple(tols), **values)
    validate(sc, text)
    return sc


def validate(sc, text=""):
    def fail(msg, section, key, fallback=None):
        line = _line_of(text, section, key) if text else None
        if line is None and fallback and text:
            # a missing key is reported at the setting that made it required
            line = _line_of(text, *fallback)
        raise ConfigError(msg, line)

    for key in ("nx", "ny"):
        n = getattr(sc, key)
        if n < 16 or n % 2:
            fail(f"{key} must be an even integer >= 16", "grid", key)
    if sc.lx <= 0 or sc.ly <= 0:
        fail("side lengths must be positive", "grid", "lx")
    if sc.scheme not in geo.SCHEMES:
        fail(f"scheme must be one of {geo.SCHEMES}", "grid", "scheme")
    if sc.model not in MODELS:
        fail(f"model must be one of {MODELS}", "model", "model")
    if sc.model == "custom" and sc.schedule not in SCHEDULES:
        fail(f"schedule must be one of {SCHEDULES}", "model", "schedule")
    if sc.u_profile not in U_PROFILES:
        fail(f"u_profile must be one of {U_PROFILES}", "initial", "u_profile")
    if sc.phi_profile not in PHI_PROFILES:
        fail(f"phi_profile must be one of {PHI_PROFILES}", "initial", "phi_profile")
    if sc.model == "extended-ricci" and sc.phi_profile == "none":
        fail("extended-ricci needs a phi profile", "initial", "phi_profile", ("model", "model"))
    if sc.T <= 0:
        fail("T must be positive", "run", "T")
    if sc.dt_policy not in ("cfl", "fixed"):
        fail("dt_policy must be cfl or fixed", "run", "dt_policy")
    if sc.dt_policy == "fixed" and sc.dt <= 0:
        fail("fixed dt_policy needs dt > 0", "run", "dt", ("run", "dt_policy"))
    if sc.store_stride < 1:
        fail("store_stride must be >= 1", "run", "store_stride")
    if sc.nonconformal not in ("gauge", "project", "refuse"):
        fail("nonconformal must be gauge, project or refuse", "run", "nonconformal")
    if not (0 <= sc.basepoint_i < sc.nx and 0 <= sc.basepoint_j < sc.ny):
        fail("basepoint outside the grid", "run", "basepoint_i")
    for check in sc.checks:
        if check not in CHECKS:
            fail(f"unknown check {check!r}", "checks", "checks")
    return sc


def read_scenario(path):
    text = Path(path).read_text()
    return from_text(text)


def write_scenario(sc, path):
    Path(path).write_text(to_text(sc))


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    header: dict
    fields: dict = field(repr=False)


def write_checkpoint(path, chart, time, model_tag, arrays, extra=None):
    names = list(arrays)
    header = {
        "version": CHECKPOINT_VERSION,
        "grid": {"nx": chart.nx, "ny": chart.ny, "lx": chart.lx, "ly": chart.ly, "scheme": chart.scheme},
        "time": float(time),
        "model": model_tag,
        "fields": names,
        "shapes": [list(np.shape(arrays[n])) for n in names],
        "extra": extra or {},
    }
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())


def read_checkpoint(path):
    with open(path, "rb") as fh:
        if fh.readline() != MAGIC:
            raise ValueError(f"{path} is not a checkpoint")
        header = json.loads(fh.readline())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        out = {}
        for name, shape in zip(header["fields"], header["shapes"]):
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise ValueError(f"checkpoint truncated in field {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(float)
    return Checkpoint(header, out)


def chart_from_header(header):
    g = header["grid"]
    return geo.GridChart(g["nx"], g["ny"], g["lx"], g["ly"], g["scheme"])


# ---------------------------------------------------------------------------
# reports

@dataclass
class CheckRecord:
    name: str
    value: float
    tolerance: float
    verdict: str  # pass, fail, warning or skipped
    detail: dict = field(default_factory=dict)

    def to_json(self):
        return asdict(self)


def jsonable(obj):
    """Plain JSON types; non-finite floats become strings."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_summary(path, sc, records, extra=None):
    doc = {
        "scenario": sc.name,
        "config_hash": config_hash(sc),
        "seed": sc.seed,
        "checks": [jsonable(r.to_json()) for r in records],
    }
    if extra:
        doc.update(jsonable(extra))
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


def write_series_csv(path, sc, columns, rows):
    with open(path, "w", newline="") as fh:
        fh.write(f"# {CSV_VERSION} config_hash={config_hash(sc)}\n")
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([repr(float(v)) for v in row])


def write_dat(path, x, y, comment=""):
    with open(path, "w") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        for a, b in zip(x, y):
            fh.write(f"{float(a)!r} {float(b)!r}\n")
