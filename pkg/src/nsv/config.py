"""INI configuration: defaults, parsing, ``section.key=value`` overrides, validation."""
from __future__ import annotations

import configparser
import hashlib
import json
import math
import os
from dataclasses import dataclass

from . import fluid
from .core import (DomainError, DomainSpec, ParticleEnsemble, SimConfig, VelocityField, build_domain,
                   maxwellian_phase_grid, sample_maxwellian)


class ConfigError(ValueError):
    pass


def _float(s):
    s = s.strip().lower()
    if s in ("inf", "infinity", "+inf"):
        return math.inf
    return float(s)


def _floats(s):
    return [_float(t) for t in s.replace(",", " ").split()]


def _ints(s):
    return [int(t) for t in s.replace(",", " ").split()]


# section -> key -> (parser, default)
SCHEMA = {
    "domain": {
        "Lx": (_float, 1.0),
        "Ly": (_float, 1.0),
        "Nx": (int, 32),
        "Ny": (int, 32),
        "bc": (str, "no-slip"),
    },
    "sim": {
        "dt": (_float, 1e-3),
        "t_end": (_float, 0.1),
        "lambda": (_float, math.inf),
        "backend": (str, "particles"),
        "seed": (int, 0),
        "threads": (int, 1),
        "deposition": (str, "cic"),
        "snapshot_every": (int, 0),
        "output": (str, "out"),
    },
    "fluid": {
        "mu": (_float, 1.0),
        "upwind": (_float, 0.1),
        "theta": (_float, 0.5),
        "init": (str, "box_vortex"),
        "amplitude": (_float, 1.0),
    },
    "kinetic": {
        "particles": (int, 10000),
        "rho": (_float, 1.0),
        "vbar_x": (_float, 0.0),
        "vbar_y": (_float, 0.0),
        "temperature": (_float, 0.1),
        "vmax": (_float, 1.6),
        "nv": (int, 16),
    },
    "galerkin": {
        "modes": (_ints, [4, 8]),
        "lambdas": (_floats, [2.0, 4.0, math.inf]),
        "tol": (_float, 1e-10),
        "max_iter": (int, 30),
        "substeps": (int, 4),
    },
    "verify": {
        "energy_ratio_slack": (_float, 0.25),
        "mass_tol_phase": (_float, 1e-2),
        "moment_growth": (_float, 10.0),
        "slope_tol": (_float, 0.1),
        "galerkin_energy_tol": (_float, 1e-8),
    },
}

FLUID_INITS = ("box_vortex", "taylor_green", "zero")


@dataclass
class RunConfig:
    values: dict  # section -> key -> parsed value
    raw: dict     # section -> key -> string as given

    def __getitem__(self, item):
        return self.values[item]

    @property
    def domain(self) -> DomainSpec:
        d = self.values["domain"]
        bc = d["bc"]
        return DomainSpec(lengths=(d["Lx"], d["Ly"]), cells=(d["Nx"], d["Ny"]), bc_fluid=bc,
                          bc_kinetic="periodic" if bc == "periodic" else "specular")

    def grid(self):
        return build_domain(self.domain)

    @property
    def sim(self) -> SimConfig:
        s, f = self.values["sim"], self.values["fluid"]
        return SimConfig(dt=s["dt"], t_end=s["t_end"], mu=f["mu"], lam=s["lambda"],
                         kinetic_backend=s["backend"], seed=s["seed"], threads=s["threads"],
                         upwind=f["upwind"], theta=f["theta"], deposition=s["deposition"],
                         snapshot_every=s["snapshot_every"])

    def initial_velocity(self, grid):
        f = self.values["fluid"]
        if f["init"] == "box_vortex":
            return fluid.box_vortex(grid, f["amplitude"])
        if f["init"] == "taylor_green":
            return fluid.taylor_green(grid, 0.0, f["mu"], f["amplitude"])
        return VelocityField.zeros(grid)

    def initial_kinetic(self, grid):
        k = self.values["kinetic"]
        vbar = (k["vbar_x"], k["vbar_y"])
        if self.values["sim"]["backend"] == "phase-grid":
            return maxwellian_phase_grid(grid, k["rho"], vbar, k["temperature"], k["vmax"], k["nv"])
        if k["particles"] == 0 or k["rho"] == 0:
            return ParticleEnsemble.empty()
        return sample_maxwellian(k["rho"], vbar, k["temperature"], k["particles"],
                                 self.values["sim"]["seed"], grid)

    def as_dict(self):
        def enc(v):
            if isinstance(v, float) and math.isinf(v):
                return "inf"
            if isinstance(v, list):
                return [enc(x) for x in v]
            return v
        return {s: {k: enc(v) for k, v in sec.items()} for s, sec in self.values.items()}

    def digest(self):
        blob = json.dumps(self.as_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def parse_override(text):
    """``section.key=value`` -> (section, key, value)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    lhs, value = text.split("=", 1)
    if "." not in lhs:
        raise ConfigError(f"override {text!r} must name a section, e.g. sim.dt=1e-3")
    section, key = lhs.strip().split(".", 1)
    return section, key, value.strip()


def load_config(path=None, overrides=()) -> RunConfig:
    """Read ``path`` (optional), apply overrides, parse and validate."""
    raw = {s: {} for s in SCHEMA}
    if path is not None:
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        for section in cp.sections():
            for key, value in cp.items(section):
                _store(raw, section, key, value)
    for o in overrides:
        _store(raw, *parse_override(o))
    values = {}
    for section, keys in SCHEMA.items():
        values[section] = {}
        for key, (conv, default) in keys.items():
            if key in raw[section]:
                try:
                    values[section][key] = conv(raw[section][key])
                except ValueError as exc:
                    raise ConfigError(f"{section}.{key}: cannot parse {raw[section][key]!r}") from exc
            else:
                values[section][key] = default
    cfg = RunConfig(values, raw)
    validate(cfg)
    return cfg


def _store(raw, section, key, value):
    if section not in SCHEMA:
        raise ConfigError(f"unknown config section [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigError(f"unknown key {section}.{key}")
    raw[section][key] = value


def validate(cfg: RunConfig):
    try:
        cfg.domain.validate()
        cfg.sim
    except (DomainError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    v = cfg.values
    if v["fluid"]["init"] not in FLUID_INITS:
        raise ConfigError(f"fluid.init must be one of {FLUID_INITS}")
    if v["fluid"]["init"] == "taylor_green" and v["domain"]["bc"] != "periodic":
        raise ConfigError("taylor_green initial data needs domain.bc = periodic")
    if v["fluid"]["mu"] <= 0:
        raise ConfigError("fluid.mu must be positive")
    if v["sim"]["threads"] < 1:
        raise ConfigError("sim.threads must be >= 1")
    k = v["kinetic"]
    if k["particles"] < 0 or k["rho"] < 0 or k["temperature"] <= 0 or k["vmax"] <= 0 or k["nv"] < 2:
        raise ConfigError("kinetic section out of range")
    gl = v["galerkin"]
    if not gl["modes"] or not gl["lambdas"]:
        raise ConfigError("galerkin.modes and galerkin.lambdas must be nonempty")
    if any(b <= a for a, b in zip(gl["lambdas"], gl["lambdas"][1:])):
        raise ConfigError("galerkin.lambdas must be strictly increasing")
    if any(x <= 0 for x in gl["lambdas"]) or any(m < 1 for m in gl["modes"]):
        raise ConfigError("galerkin.modes and galerkin.lambdas must be positive")


def default_config() -> RunConfig:
    return load_config(None)
