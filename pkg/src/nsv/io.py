"""Snapshots (raw little-endian float64 + JSON sidecar), CSV tables and run manifests."""
from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .core import ParticleEnsemble, PhaseGridDensity, VelocityField

LE = "<f8"


def _sidecar(path):
    return path + ".json"


def write_field(path, name, array, time_, spacing):
    """Write ``array`` to ``path`` and its header to ``path + '.json'``. Returns both paths."""
    a = np.ascontiguousarray(array, dtype=LE)
    with open(path, "wb") as fh:
        fh.write(a.tobytes(order="C"))
    header = {"field": name, "shape": list(a.shape), "time": float(time_), "spacing": [float(s) for s in spacing]}
    with open(_sidecar(path), "w") as fh:
        json.dump(header, fh, indent=1)
    return [path, _sidecar(path)]


def read_field(path):
    with open(_sidecar(path)) as fh:
        header = json.load(fh)
    data = np.fromfile(path, dtype=LE).reshape(header["shape"])
    return data, header


def write_velocity(prefix, u: VelocityField, t):
    g = u.grid
    return (write_field(prefix + "_ux.bin", "ux", u.ux, t, (g.hx, g.hy))
            + write_field(prefix + "_uy.bin", "uy", u.uy, t, (g.hx, g.hy)))


def write_phase_grid(path, fg: PhaseGridDensity):
    g = fg.grid
    return write_field(path, "f", fg.values, fg.time, (g.hx, g.hy, fg.hv, fg.hv))


def write_ensemble(path, ens: ParticleEnsemble, t, seed):
    cols = np.stack([ens.positions[:, 0], ens.positions[:, 1], ens.velocities[:, 0],
                     ens.velocities[:, 1], ens.weights])
    with open(path, "wb") as fh:
        fh.write(np.ascontiguousarray(cols, dtype=LE).tobytes())
    with open(_sidecar(path), "w") as fh:
        json.dump({"N": ens.count, "time": float(t), "seed": seed, "columns": ["x", "y", "vx", "vy", "w"]},
                  fh, indent=1)
    return [path, _sidecar(path)]


def read_ensemble(path):
    with open(_sidecar(path)) as fh:
        header = json.load(fh)
    cols = np.fromfile(path, dtype=LE).reshape(5, header["N"])
    return ParticleEnsemble(cols[0:2].T.copy(), cols[2:4].T.copy(), cols[4].copy()), header


def write_csv(path, header, rows):
    """Rows are sequences; floats are written with ``repr`` (round-trip exact)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
    return [path]


@dataclass
class RunManifest:
    config_hash: str
    seed: int
    config: dict
    code_version: str = __version__
    start: float = field(default_factory=time.time)
    end: float = 0.0
    files: list = field(default_factory=list)
    status: str = "running"

    def add(self, paths):
        for p in paths:
            if p not in self.files:
                self.files.append(p)

    def write(self, path):
        self.end = time.time()
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=1, sort_keys=True)
        return path


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path
