"""L^p quadrature on balls, local maximal functions and the log functional.

All integrals are midpoint sums over lattice cells whose centres lie in the
ball of integration.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage
from scipy.signal import fftconvolve

from . import fields as F
from .errors import (
    ConfigurationError,
    DegenerateRadiusError,
    IncompatibleEnsemblesError,
    InvalidDeltaError,
    InvalidInputError,
    UnsupportedExponentError,
)
from .flow import FlowEnsemble, ball_volume

__all__ = [
    "GridFunction",
    "BallGeometry",
    "LemmaReport",
    "lp_norm_ball",
    "grid_lp_norm",
    "interpolate",
    "local_maximal_function",
    "dyadic_radii",
    "check_maximal_lp_bound",
    "check_pointwise_bv",
    "gradient_magnitude",
    "log_functional_g",
    "flow_lp_difference",
]


def _check_p(p):
    if not p > 1 or not math.isfinite(p):
        raise UnsupportedExponentError(f"unsupported exponent p={p}; need 1 < p < inf")


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Samples on the uniform lattice ``{a, a+h, ..., b}^n``.

    ``values`` has shape ``(N,)*n`` for scalar data or ``(N,)*n + (m,)``.
    """

    box: tuple
    spacing: float
    values: np.ndarray
    dim: int = 2

    def __post_init__(self):
        a, b = self.box
        if not (b > a and self.spacing > 0):
            raise ConfigurationError("need b > a and a positive spacing")
        nodes = round((b - a) / self.spacing) + 1
        if abs((b - a) / self.spacing - (nodes - 1)) > 1e-6:
            raise ConfigurationError("box length is not a multiple of the spacing")
        vals = np.asarray(self.values)
        if vals.shape[: self.dim] != (nodes,) * self.dim or vals.ndim not in (self.dim, self.dim + 1):
            raise ConfigurationError(
                f"values shape {vals.shape} does not match {nodes} nodes per axis in {self.dim}d"
            )

    @property
    def nodes(self):
        return round((self.box[1] - self.box[0]) / self.spacing) + 1

    @property
    def axis(self):
        return self.box[0] + self.spacing * np.arange(self.nodes)

    @property
    def dim_out(self):
        return 1 if np.ndim(self.values) == self.dim else np.shape(self.values)[-1]

    def points(self):
        ax = self.axis
        return np.stack(np.meshgrid(*([ax] * self.dim), indexing="ij"), axis=-1)

    def magnitude(self):
        v = np.asarray(self.values, dtype=float)
        return np.abs(v) if v.ndim == self.dim else np.linalg.norm(v, axis=-1)

    @classmethod
    def from_function(cls, fn, box, spacing, dim=2):
        """Sample ``fn(points[N, dim]) -> (N,) or (N, m)`` on the lattice."""
        a, b = box
        nodes = round((b - a) / spacing) + 1
        ax = a + spacing * np.arange(nodes)
        pts = np.stack(np.meshgrid(*([ax] * dim), indexing="ij"), axis=-1)
        vals = np.asarray(fn(pts.reshape(-1, dim)), dtype=float)
        return cls(tuple(box), spacing, vals.reshape(*pts.shape[:-1], *vals.shape[1:]), dim)

    @classmethod
    def from_field(cls, vfield, t, box, spacing, gradient=False):
        fn = (lambda x: vfield.grad(t, x).reshape(len(x), -1)) if gradient else (lambda x: vfield.eval(t, x))
        return cls.from_function(fn, box, spacing, vfield.dim)

    def to_csv(self, path):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim == self.dim:
            vals = vals[..., None]
        F.write_grid_csv(path, [0.0], [self.axis] * self.dim, vals[None])

    @classmethod
    def from_csv(cls, path):
        times, axes, values = F.read_grid_csv(path)
        if len(times) != 1:
            raise InvalidInputError("a GridFunction CSV holds a single time level")
        ax = axes[0]
        if any(len(a) != len(ax) or not np.allclose(a, ax, rtol=0, atol=1e-12 * max(1, abs(ax).max())) for a in axes):
            raise InvalidInputError("GridFunction CSV needs the same axis in every direction")
        h = (ax[-1] - ax[0]) / (len(ax) - 1)
        vals = values[0]
        if vals.shape[-1] == 1:
            vals = vals[..., 0]
        return cls((float(ax[0]), float(ax[-1])), float(h), vals, len(axes))


@dataclass(frozen=True)
class BallGeometry:
    n: int

    @property
    def omega_n(self):
        return ball_volume(self.n, 1.0)

    def volume(self, r):
        return self.omega_n * r**self.n


@dataclass
class LemmaReport:
    lemma_id: str
    empirical_constant: float
    sample_count: int
    worst_case: dict = field(default_factory=dict)
    skipped: int = 0
    values: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


# ---------------------------------------------------------------------------
# quadrature

def lp_norm_ball(points, values, weights, p, r=None):
    """``(sum_i w_i |v_i|^p)^(1/p)`` over the samples with ``|x_i| <= r``."""
    _check_p(p)
    v = np.asarray(values, dtype=float)
    w = np.asarray(weights, dtype=float)
    mag = np.abs(v) if v.ndim == 1 else np.linalg.norm(v, axis=-1)
    if r is not None:
        pts = np.asarray(points, dtype=float)
        inside = np.einsum("ij,ij->i", pts, pts) <= r * r * (1 + 1e-12)
        mag, w = mag[inside], w[inside]
    return float(np.sum(w * mag**p) ** (1.0 / p))


def grid_lp_norm(g: GridFunction, p, rho):
    """L^p norm of ``|g|`` over ``B_rho(0)`` by midpoint sum over lattice cells."""
    _check_p(p)
    pts = g.points()
    inside = np.einsum("...i,...i->...", pts, pts) <= rho * rho * (1 + 1e-12)
    mag = g.magnitude()[inside]
    return float((np.sum(mag**p) * g.spacing**g.dim) ** (1.0 / p))


def interpolate(g: GridFunction, points):
    """Multilinear interpolation of ``g`` at ``points[N, n]``; clamped at the box."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    coords = ((pts - g.box[0]) / g.spacing).T
    vals = np.asarray(g.values, dtype=float)
    if vals.ndim == g.dim:
        return ndimage.map_coordinates(vals, coords, order=1, mode="nearest")
    return np.stack(
        [ndimage.map_coordinates(vals[..., j], coords, order=1, mode="nearest")
         for j in range(vals.shape[-1])], axis=1)


# ---------------------------------------------------------------------------
# maximal function

def dyadic_radii(lam, h, min_levels=6):
    """``lam / 2^j`` for ``j = 0..J`` with ``J >= min_levels`` reaching below ``h``."""
    levels = max(min_levels, math.ceil(math.log2(lam / h)) if lam > h else 0)
    return [lam / 2**j for j in range(levels + 1)]


def _disk_kernel(m, rho, h, dim):
    off = np.arange(-m, m + 1) * h
    grids = np.meshgrid(*([off] * dim), indexing="ij")
    return (sum(g * g for g in grids) <= rho * rho * (1 + 1e-12)).astype(float)


def _ball_average(absf, rho, h, dim):
    m = int(math.floor(rho / h + 1e-9))
    if m == 0:
        return absf
    kern = _disk_kernel(m, rho, h, dim)
    total = fftconvolve(absf, kern, mode="same")
    count = np.rint(fftconvolve(np.ones_like(absf), kern, mode="same"))
    return np.maximum(total, 0.0) / count


def local_maximal_function(f: GridFunction, lam, min_levels=6):
    """Discrete ``M_lam f``: max over dyadic radii of ball averages of ``|f|``.

    Ball averages near the box edge are taken over ``B_rho(x) ∩ box``. The
    node's own value is always included, so ``M_lam f >= |f|``.
    """
    if not lam >= f.spacing:
        raise DegenerateRadiusError(
            f"degenerate radius: lambda={lam} is smaller than the grid spacing h={f.spacing}"
        )
    absf = f.magnitude()
    out = absf.copy()
    for rho in dyadic_radii(lam, f.spacing, min_levels):
        np.maximum(out, _ball_average(absf, rho, f.spacing, f.dim), out=out)
    return GridFunction(f.box, f.spacing, out, f.dim)


def gradient_magnitude(u: GridFunction):
    """Frobenius norm of the lattice gradient of ``u`` (second-order centred)."""
    vals = np.asarray(u.values, dtype=float)
    comps = [vals] if vals.ndim == u.dim else [vals[..., j] for j in range(vals.shape[-1])]
    sq = np.zeros(vals.shape[: u.dim])
    for c in comps:
        for g in np.gradient(c, u.spacing):
            sq += g * g
    return GridFunction(u.box, u.spacing, np.sqrt(sq), u.dim)


def check_maximal_lp_bound(f, lam, p, rho, min_levels=6):
    """Empirical ``||M_lam f||_{L^p(B_rho)} / ||f||_{L^p(B_{rho+lam})}``.

    ``f`` may be one GridFunction or a batch; the report carries the batch
    maximum and every per-sample ratio.
    """
    _check_p(p)
    batch = [f] if isinstance(f, GridFunction) else list(f)
    if not batch:
        raise ConfigurationError("empty batch")
    ratios, worst, skipped = [], {}, 0
    for idx, g in enumerate(batch):
        if -g.box[0] < rho + lam or g.box[1] < rho + lam:
            raise ConfigurationError(f"box {g.box} does not contain B_(rho+lambda) = B_{rho + lam:g}")
        den = grid_lp_norm(g, p, rho + lam)
        if den == 0:
            skipped += 1
            continue
        num = grid_lp_norm(local_maximal_function(g, lam, min_levels), p, rho)
        ratio = num / den
        ratios.append(ratio)
        if not worst or ratio > worst["ratio"]:
            worst = {"index": idx, "ratio": ratio, "maximal_norm": num, "f_norm": den}
    return LemmaReport(
        lemma_id="maximal-lp", empirical_constant=max(ratios, default=0.0),
        sample_count=len(ratios), worst_case=worst, skipped=skipped, values=ratios,
    )


def _sample_pairs(rng, radius, lam, count, dim):
    def in_ball(k):
        out = np.empty((0, dim))
        while len(out) < k:
            c = rng.uniform(-radius, radius, size=(2 * k, dim))
            out = np.vstack([out, c[np.einsum("ij,ij->i", c, c) <= radius * radius]])
        return out[:k]

    xs, ys = np.empty((0, dim)), np.empty((0, dim))
    while len(xs) < count:
        x, y = in_ball(2 * count), in_ball(2 * count)
        keep = np.linalg.norm(x - y, axis=1) <= lam
        xs, ys = np.vstack([xs, x[keep]]), np.vstack([ys, y[keep]])
    return xs[:count], ys[:count]


def check_pointwise_bv(u: GridFunction, lam, pair_count, seed, radius=None, grad=None,
                       maximal=None):
    """Empirical constant in ``|u(x)-u(y)| <= c |x-y| (M Du(x) + M Du(y))``.

    Pairs are uniform in ``B_radius x B_radius`` conditioned on
    ``|x - y| <= lam``. ``grad`` (``|Du|`` on the same lattice) defaults to the
    centred lattice gradient; ``maximal`` may supply a precomputed ``M_lam |Du|``.
    """
    if pair_count < 1:
        raise ConfigurationError("pair_count must be >= 1")
    if radius is None:
        radius = min(-u.box[0], u.box[1])
    if maximal is None:
        if grad is None:
            grad = gradient_magnitude(u)
        maximal = local_maximal_function(grad, lam)
    rng = np.random.default_rng(seed)
    xs, ys = _sample_pairs(rng, radius, lam, pair_count, u.dim)
    du = interpolate(u, xs) - interpolate(u, ys)
    num = np.abs(du) if du.ndim == 1 else np.linalg.norm(du, axis=1)
    dist = np.linalg.norm(xs - ys, axis=1)
    den = dist * (interpolate(maximal, xs) + interpolate(maximal, ys))
    ok = den > 0
    if not ok.any():
        return LemmaReport("pointwise-bv", 0.0, 0, {}, skipped=int(pair_count))
    ratio = num[ok] / den[ok]
    i = int(np.argmax(ratio))
    worst = {
        "x": xs[ok][i].tolist(), "y": ys[ok][i].tolist(), "ratio": float(ratio[i]),
        "difference": float(num[ok][i]), "denominator": float(den[ok][i]),
    }
    return LemmaReport(
        lemma_id="pointwise-bv", empirical_constant=float(ratio[i]),
        sample_count=int(ok.sum()), worst_case=worst, skipped=int((~ok).sum()),
    )


# ---------------------------------------------------------------------------
# flow functionals

def _check_aligned(X: FlowEnsemble, Xt: FlowEnsemble, k):
    if (X.positions.shape != Xt.positions.shape
            or not np.array_equal(X.initial_points, Xt.initial_points)
            or not np.allclose(X.times, Xt.times, rtol=0, atol=1e-12)):
        raise IncompatibleEnsemblesError("ensembles do not share initial points and times")
    if not -len(X.times) <= k < len(X.times):
        raise IncompatibleEnsemblesError(f"time index {k} out of range")


def log_functional_g(X: FlowEnsemble, Xt: FlowEnsemble, delta, p, k):
    """``[sum_i w_i log(1 + |X - Xt| / delta)^p]^(1/p)`` at time level ``k``."""
    if not delta > 0:
        raise InvalidDeltaError(f"delta must be positive, got {delta}")
    _check_p(p)
    _check_aligned(X, Xt, k)
    d = np.linalg.norm(X.positions[k] - Xt.positions[k], axis=1)
    return float(np.sum(X.weights * np.log1p(d / delta) ** p) ** (1.0 / p))


def flow_lp_difference(X: FlowEnsemble, Xt: FlowEnsemble, p, r, k):
    _check_aligned(X, Xt, k)
    return lp_norm_ball(X.initial_points, X.positions[k] - Xt.positions[k], X.weights, p, r)
