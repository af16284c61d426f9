"""Particle-ensemble approximation of regular Lagrangian flows.

Initial points form a uniform lattice clipped to ``B_r(0)``; each carries the
volume of its cell so that sums over particles are midpoint-rule integrals.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field, replace
from itertools import product

import numpy as np

from .errors import ConfigurationError, IntegrationDivergedError, InvalidInputError
from .params import ExperimentParams

__all__ = [
    "FlowEnsemble",
    "CompressibilityEstimate",
    "ball_lattice",
    "ball_volume",
    "integrate_ensemble",
    "estimate_compressibility",
    "check_trajectory_confinement",
    "check_speed_limit",
    "save_ensemble_csv",
    "load_ensemble_csv",
]


def ball_volume(n, r=1.0):
    return math.pi ** (n / 2) / math.gamma(n / 2 + 1) * r**n


def ball_lattice(dim, radius, size=None, spacing=None):
    """Lattice nodes inside ``B_radius(0)`` and their cell volumes.

    Either ``size`` (nodes across the diameter) or ``spacing`` fixes the step.
    """
    if spacing is None:
        if size is None or size < 2:
            raise ConfigurationError("need a lattice size >= 2 or a spacing")
        spacing = 2 * radius / (size - 1)
    m = int(math.floor(radius / spacing + 1e-9))
    ax = np.arange(-m, m + 1) * spacing
    pts = np.stack(np.meshgrid(*([ax] * dim), indexing="ij"), axis=-1).reshape(-1, dim)
    pts = pts[np.einsum("ij,ij->i", pts, pts) <= radius**2 * (1 + 1e-12)]
    return pts, np.full(len(pts), spacing**dim)


@dataclass(frozen=True, eq=False)
class FlowEnsemble:
    initial_points: np.ndarray  # (N, n)
    weights: np.ndarray  # (N,)
    times: np.ndarray  # (K + 1,)
    positions: np.ndarray  # (K + 1, N, n)
    field_id: str = ""
    integrator: str = "rk4"
    dt: float = 0.0
    r: float = 1.0

    @property
    def n_steps(self):
        return len(self.times) - 1

    @property
    def dim(self):
        return self.initial_points.shape[1]

    def subsample(self, stride):
        """Keep every ``stride``-th time level (the last one must be kept)."""
        if (len(self.times) - 1) % stride:
            raise InvalidInputError("stride must divide the number of steps")
        return replace(self, times=self.times[::stride], positions=self.positions[::stride],
                       dt=self.dt * stride)


def _step_rk4(value, t, x, dt):
    k1 = value(t, x)
    k2 = value(t + dt / 2, x + dt / 2 * k1)
    k3 = value(t + dt / 2, x + dt / 2 * k2)
    k4 = value(t + dt, x + dt * k3)
    return x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def _step_euler(value, t, x, dt):
    return x + dt * value(t, x)


def integrate_ensemble(field, params: ExperimentParams, points=None, weights=None):
    """Integrate ``dX/dt = b(t, X)`` from every initial point up to ``params.tau``.

    The number of steps is ``ceil(tau / dt)``; the step is then shrunk so that
    the last time level lands exactly on ``tau``.
    """
    if points is None:
        points, weights = ball_lattice(field.dim, params.r, params.lattice_size)
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if weights is None:
        weights = np.ones(len(points))
    weights = np.asarray(weights, dtype=float)
    if not np.all(np.isfinite(points)):
        raise InvalidInputError("initial points must be finite")

    n_steps = max(1, math.ceil(params.tau / params.dt - 1e-9))
    times = np.linspace(0.0, params.tau, n_steps + 1)
    dt = params.tau / n_steps
    step = _step_rk4 if params.integrator == "rk4" else _step_euler

    X = np.empty((n_steps + 1, *points.shape))
    X[0] = points
    for k in range(n_steps):
        X[k + 1] = step(field.value, times[k], X[k], dt)
        if not np.all(np.isfinite(X[k + 1])):
            bad = int(np.flatnonzero(~np.isfinite(X[k + 1]).all(axis=1))[0])
            raise IntegrationDivergedError(bad, k + 1)
    return FlowEnsemble(points, weights, times, X, field.name, params.integrator, dt, params.r)


# ---------------------------------------------------------------------------
# compressibility

@dataclass(frozen=True)
class CompressibilityEstimate:
    L_hat: float
    histogram_resolution: float
    per_time_max: list
    time_indices: list
    sanity_floor: float
    ill_conditioned: bool = False
    label: str = "estimate"
    raw_max: float = 0.0


def _cic_density(points, weights, h):
    """Cloud-in-cell deposit of point masses onto the lattice ``h * Z^n``."""
    n = points.shape[1]
    u = points / h
    base = np.floor(u).astype(np.int64)
    frac = u - base
    lo = base.min(axis=0)
    shape = base.max(axis=0) - lo + 2
    rel = base - lo
    acc = np.zeros(int(np.prod(shape)))
    strides = np.cumprod([1, *shape[::-1][:-1]])[::-1]
    idx0 = rel @ strides
    for corner in product((0, 1), repeat=n):
        wt = weights.copy()
        for j, cj in enumerate(corner):
            wt *= frac[:, j] if cj else 1.0 - frac[:, j]
        acc += np.bincount(idx0 + int(np.dot(corner, strides)), weights=wt, minlength=acc.size)
    return acc / h**n


def estimate_compressibility(ensemble: FlowEnsemble, bin_width=0.1, time_stride=1):
    """Estimate the compressibility constant from pushforward densities.

    Particle masses are deposited cloud-in-cell on a lattice of spacing
    ``bin_width``; the estimate is the largest density seen over the sampled
    time levels, floored at 1.
    """
    if not bin_width > 0:
        raise ConfigurationError("bin_width must be positive")
    if len(ensemble.weights) == 0:
        raise InvalidInputError("empty ensemble")
    n = ensemble.dim
    spacing = float(np.mean(ensemble.weights)) ** (1.0 / n)
    ill = bin_width < spacing
    if ill:
        warnings.warn(
            f"bin width {bin_width} is below the particle spacing {spacing:.3g}; "
            "compressibility estimate is ill-conditioned",
            RuntimeWarning, stacklevel=2,
        )
    ks = list(range(0, ensemble.n_steps + 1, time_stride))
    if ks[-1] != ensemble.n_steps:
        ks.append(ensemble.n_steps)
    per_time, floor = [], 0.0
    mass = float(ensemble.weights.sum())
    for k in ks:
        dens = _cic_density(ensemble.positions[k], ensemble.weights, bin_width)
        per_time.append(float(dens.max()))
        floor = max(floor, mass / (np.count_nonzero(dens) * bin_width**n))
    raw = max(per_time)
    return CompressibilityEstimate(
        L_hat=max(1.0, raw), histogram_resolution=float(bin_width), per_time_max=per_time,
        time_indices=ks, sanity_floor=floor, ill_conditioned=ill, raw_max=raw,
    )


# ---------------------------------------------------------------------------
# radius bookkeeping

def check_trajectory_confinement(ensemble: FlowEnsemble, r, sup_norm):
    """True iff every ``X[k][i]`` lies in ``B_{r + (t_k + dt) * sup_norm}``."""
    radii = np.linalg.norm(ensemble.positions, axis=-1)
    limit = r + (ensemble.times + ensemble.dt) * sup_norm
    return bool(np.all(radii <= limit[:, None] * (1 + 1e-12)))


def check_speed_limit(ensemble: FlowEnsemble, sup_norm, c=1.0):
    disp = np.linalg.norm(ensemble.positions - ensemble.initial_points[None], axis=-1)
    limit = ensemble.times * sup_norm + c * ensemble.dt
    return bool(np.all(disp <= limit[:, None] + 1e-12))


# ---------------------------------------------------------------------------
# CSV round trip

def save_ensemble_csv(path, ensemble: FlowEnsemble):
    n = ensemble.dim
    meta = {
        "field_id": ensemble.field_id, "integrator": ensemble.integrator,
        "dt": repr(ensemble.dt), "r": repr(ensemble.r),
        "weights": [repr(float(w)) for w in ensemble.weights],
    }
    with open(path, "w", newline="") as fh:
        fh.write("# " + json.dumps(meta) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "t", "i", *[f"x{j + 1}" for j in range(n)]])
        for k, t in enumerate(ensemble.times):
            tk = f"{t:.17g}"
            for i, x in enumerate(ensemble.positions[k]):
                w.writerow([k, tk, i, *[f"{v:.17g}" for v in x]])


def load_ensemble_csv(path):
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("# "):
            raise InvalidInputError("missing ensemble metadata line")
        meta = json.loads(first[2:])
        reader = csv.reader(fh)
        header = next(reader)
        n = len(header) - 3
        data = np.array([row for row in reader if row], dtype=float)
    ks = data[:, 0].astype(int)
    ids = data[:, 2].astype(int)
    K, N = ks.max() + 1, ids.max() + 1
    if len(data) != K * N:
        raise InvalidInputError("ensemble CSV is incomplete")
    positions = np.empty((K, N, n))
    positions[ks, ids] = data[:, 3:]
    times = np.empty(K)
    times[ks] = data[:, 1]
    return FlowEnsemble(
        initial_points=positions[0].copy(),
        weights=np.array([float(w) for w in meta["weights"]]),
        times=times, positions=positions, field_id=meta["field_id"],
        integrator=meta["integrator"], dt=float(meta["dt"]), r=float(meta["r"]),
    )
