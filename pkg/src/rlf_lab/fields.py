"""Catalog of bounded vector fields and their perturbations.

Every field is a time-dependent map ``b(t, x)`` on R^n that can be evaluated
on a batch of points, differentiated (analytically when a closed form is
available, by centred differences otherwise) and carries a declared bound
``sup_norm`` on ``|b|``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from itertools import product
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import ndimage, optimize

from .errors import ConfigurationError, InvalidInputError

__all__ = [
    "VectorField",
    "PerturbationSpec",
    "smooth_cutoff",
    "constant",
    "rotation",
    "contraction",
    "expansion",
    "shear",
    "catalog",
    "eval_field",
    "field_gradient",
    "make_perturbation",
    "sampled_field",
    "mollify",
    "load_sampled_field",
    "save_sampled_field",
    "read_grid_csv",
    "write_grid_csv",
    "random_trig_scalar",
]

KINDS = ("constant", "rotation", "contraction", "shear", "sampled-grid", "perturbed")
PERTURBATION_MODES = ("constant-shift", "smooth-bump", "seeded-random-trig")

ValueFn = Callable[[float, np.ndarray], np.ndarray]


def _as_points(x, dim):
    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[-1] != dim:
        raise InvalidInputError(f"expected points in R^{dim}, got shape {np.shape(x)}")
    if not np.all(np.isfinite(pts)):
        raise InvalidInputError("point coordinates must be finite")
    return pts, single


@dataclass(frozen=True, eq=False)
class VectorField:
    """A bounded vector field ``b: [0, T] x R^n -> R^n``.

    ``value`` maps ``(t, points[N, n])`` to ``values[N, n]``; ``jacobian``
    (optional) maps to ``[N, n, n]`` with ``J[..., i, j] = d b_i / d x_j``.
    """

    dim: int
    kind: str
    sup_norm: float
    value: ValueFn
    jacobian: Optional[Callable[[float, np.ndarray], np.ndarray]] = None
    autonomous: bool = True
    name: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown field kind {self.kind!r}")
        if not (self.sup_norm >= 0 and math.isfinite(self.sup_norm)):
            raise ConfigurationError("sup_norm must be a finite nonnegative number")

    @property
    def analytic(self):
        return self.jacobian is not None

    def eval(self, t, x):
        """Evaluate the field at one point ``(n,)`` or a batch ``(N, n)``."""
        if not math.isfinite(t):
            raise InvalidInputError("time must be finite")
        pts, single = _as_points(x, self.dim)
        out = np.asarray(self.value(float(t), pts), dtype=float)
        return out[0] if single else out

    def grad(self, t, x, h_g=None):
        """Spatial Jacobian ``Db(t, x)``.

        Uses the closed form when available and ``h_g`` is None; otherwise a
        centred difference with step ``h_g`` (default ``1e-4 * (1 + |x|)``).
        """
        if not math.isfinite(t):
            raise InvalidInputError("time must be finite")
        pts, single = _as_points(x, self.dim)
        if h_g is None and self.jacobian is not None:
            out = np.asarray(self.jacobian(float(t), pts), dtype=float)
        else:
            out = finite_difference_jacobian(self.value, float(t), pts, h_g)
        return out[0] if single else out


def finite_difference_jacobian(value: ValueFn, t, pts, h_g=None):
    n = pts.shape[1]
    if h_g is None:
        step = 1e-4 * (1.0 + np.linalg.norm(pts, axis=1))
    else:
        if not h_g > 0:
            raise ConfigurationError(f"finite-difference step must be positive, got {h_g}")
        step = np.full(len(pts), float(h_g))
    jac = np.empty((len(pts), n, n))
    for j in range(n):
        shift = np.zeros_like(pts)
        shift[:, j] = step
        jac[:, :, j] = (value(t, pts + shift) - value(t, pts - shift)) / (2 * step[:, None])
    return jac


def eval_field(field: VectorField, t, x):
    return field.eval(t, x)


def field_gradient(field: VectorField, t, x, h_g=None):
    return field.grad(t, x, h_g=h_g)


# ---------------------------------------------------------------------------
# smooth radial cutoff

def _phi(u):
    u = np.asarray(u, dtype=float)
    out = np.zeros_like(u)
    pos = u > 0
    out[pos] = np.exp(-1.0 / u[pos])
    return out


def _dphi(u):
    u = np.asarray(u, dtype=float)
    out = np.zeros_like(u)
    pos = u > 0
    out[pos] = np.exp(-1.0 / u[pos]) / u[pos] ** 2
    return out


def smooth_cutoff(s):
    """C-infinity step: 1 on ``s <= 1/2``, 0 on ``s >= 1``. Returns (chi, chi')."""
    s = np.asarray(s, dtype=float)
    a = _phi(1.0 - s)
    c = _phi(s - 0.5)
    den = a + c
    chi = a / den
    da = -_dphi(1.0 - s)
    dc = _dphi(s - 0.5)
    dchi = (da * c - a * dc) / den**2
    return chi, dchi


def _with_cutoff(value0, jac0, rho):
    """Multiply a field by ``chi(|x| / rho)``; returns (value, jacobian)."""

    def chi_only(pts):
        r2 = np.einsum("ij,ij->i", pts, pts)
        chi = np.ones(len(pts))
        edge = r2 > 0.25 * rho * rho
        if edge.any():
            chi[edge] = smooth_cutoff(np.sqrt(r2[edge]) / rho)[0]
        return chi

    def mask(pts):
        r = np.sqrt(np.einsum("ij,ij->i", pts, pts))
        chi, dchi = smooth_cutoff(r / rho)
        with np.errstate(invalid="ignore", divide="ignore"):
            grad = np.where(r[:, None] > 0, dchi[:, None] * pts / (rho * r[:, None]), 0.0)
        return chi, grad

    def value(t, pts):
        return value0(t, pts) * chi_only(pts)[:, None]

    def jacobian(t, pts):
        chi, grad = mask(pts)
        return jac0(t, pts) * chi[:, None, None] + value0(t, pts)[:, :, None] * grad[:, None, :]

    return value, jacobian


def _radial_sup(profile):
    """Tight upper bound for ``max_{0<=s<=1} profile(s)``."""
    s = np.linspace(0.0, 1.0, 20001)
    vals = profile(s)
    i = int(np.argmax(vals))
    lo, hi = s[max(i - 1, 0)], s[min(i + 1, len(s) - 1)]
    res = optimize.minimize_scalar(
        lambda u: -float(profile(np.array([u]))[0]),
        bounds=(lo, hi),
        method="bounded",
        options={"xatol": 1e-12},
    )
    best = max(float(vals[i]), -float(res.fun))
    return best * (1.0 + 1e-10)


# ---------------------------------------------------------------------------
# catalog

def constant(c=(1.0, 0.0)):
    c = np.asarray(c, dtype=float)
    n = len(c)

    def value(t, pts):
        return np.broadcast_to(c, pts.shape).copy()

    def jacobian(t, pts):
        return np.zeros((len(pts), n, n))

    return VectorField(
        dim=n, kind="constant", sup_norm=float(np.linalg.norm(c)), value=value,
        jacobian=jacobian, name=f"constant{tuple(c.tolist())}", metadata={"c": c.tolist()},
    )


def rotation(cutoff=4.0):
    """Rigid rotation ``(-y, x)`` truncated to ``B_cutoff``."""

    def value0(t, pts):
        return np.stack([-pts[:, 1], pts[:, 0]], axis=1)

    def jac0(t, pts):
        j = np.zeros((len(pts), 2, 2))
        j[:, 0, 1] = -1.0
        j[:, 1, 0] = 1.0
        return j

    value, jacobian = _with_cutoff(value0, jac0, cutoff)
    sup = _radial_sup(lambda s: cutoff * s * smooth_cutoff(s)[0])
    return VectorField(
        dim=2, kind="rotation", sup_norm=sup, value=value, jacobian=jacobian,
        name=f"rotation(cutoff={cutoff:g})", metadata={"cutoff": cutoff},
    )


def contraction(rate=1.0, cutoff=4.0, dim=2):
    """Linear field ``-rate * x`` truncated to ``B_cutoff``; ``rate < 0`` expands."""

    def value0(t, pts):
        return -rate * pts

    def jac0(t, pts):
        return np.broadcast_to(-rate * np.eye(dim), (len(pts), dim, dim)).copy()

    value, jacobian = _with_cutoff(value0, jac0, cutoff)
    sup = _radial_sup(lambda s: abs(rate) * cutoff * s * smooth_cutoff(s)[0])
    return VectorField(
        dim=dim, kind="contraction", sup_norm=sup, value=value, jacobian=jacobian,
        name=f"contraction(rate={rate:g},cutoff={cutoff:g})",
        metadata={"rate": rate, "cutoff": cutoff},
    )


def expansion(rate=1.0, cutoff=4.0, dim=2):
    return contraction(rate=-rate, cutoff=cutoff, dim=dim)


def shear(width=0.1, cutoff=4.0):
    """Bounded shear ``(tanh(y / width), 0)`` truncated to ``B_cutoff``."""

    def value0(t, pts):
        out = np.zeros_like(pts)
        out[:, 0] = np.tanh(pts[:, 1] / width)
        return out

    def jac0(t, pts):
        j = np.zeros((len(pts), 2, 2))
        j[:, 0, 1] = 1.0 / (width * np.cosh(pts[:, 1] / width) ** 2)
        return j

    value, jacobian = _with_cutoff(value0, jac0, cutoff)
    sup = _radial_sup(lambda s: np.tanh(cutoff * s / width) * smooth_cutoff(s)[0])
    return VectorField(
        dim=2, kind="shear", sup_norm=sup, value=value, jacobian=jacobian,
        name=f"shear(width={width:g},cutoff={cutoff:g})",
        metadata={"width": width, "cutoff": cutoff},
    )


def catalog():
    """The analytic experiment fields keyed by kind."""
    return {
        "constant": constant(),
        "rotation": rotation(),
        "contraction": contraction(),
        "shear": shear(),
    }


# ---------------------------------------------------------------------------
# perturbations

@dataclass(frozen=True)
class PerturbationSpec:
    mode: str = "constant-shift"
    epsilon: float = 0.0
    seed: int = 0
    direction: Optional[Sequence[float]] = None
    bump_width: float = 0.5


def _trig_basis(n, max_k=2):
    return np.array(list(product(range(1, max_k + 1), repeat=n)), dtype=float)


def _trig_sup(value, n):
    """Global max of ``|w|`` for a 2*pi-periodic field ``w``."""
    m = max(8, min(256, int(2e6 ** (1.0 / n))))
    axes = [np.linspace(0.0, 2 * np.pi, m, endpoint=False)] * n
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
    mag = np.linalg.norm(value(pts), axis=1)
    best = float(mag.max())
    for i in np.argsort(mag)[-5:]:
        res = optimize.minimize(
            lambda y: -float(np.linalg.norm(value(y[None, :])[0])),
            pts[i], method="Nelder-Mead",
            options={"xatol": 1e-12, "fatol": 1e-15, "maxiter": 4000},
        )
        best = max(best, -float(res.fun))
    return best


def _trig_components(n, n_out, seed):
    rng = np.random.default_rng(seed)
    ks = _trig_basis(n)
    coef = rng.uniform(-1.0, 1.0, size=(n_out, len(ks)))
    phase = rng.uniform(0.0, 2 * np.pi, size=(n_out, len(ks)))
    return ks, coef, phase


def _trig_field(n, seed, epsilon):
    ks, coef, phase = _trig_components(n, n, seed)

    # sin(a + phi) = sin(a) cos(phi) + cos(a) sin(phi)
    sin_coef = (coef * np.cos(phase)).T  # (K, n)
    cos_coef = (coef * np.sin(phase)).T

    def raw(pts):
        arg = pts @ ks.T  # (N, K)
        return np.sin(arg) @ sin_coef + np.cos(arg) @ cos_coef

    def raw_jac(pts):
        arg = pts @ ks.T
        return np.stack([(np.cos(arg + phase[j]) * coef[j]) @ ks for j in range(n)], axis=1)

    scale = epsilon / _trig_sup(raw, n) if epsilon > 0 else 0.0
    return (lambda t, pts: scale * raw(pts)), (lambda t, pts: scale * raw_jac(pts)), scale


def random_trig_scalar(points, seed):
    """Scalar trig sum ``sum_k c_k sin(k.x + phi_k)``, ``k in {1,2}^n``, seeded."""
    pts = np.asarray(points, dtype=float)
    ks, coef, phase = _trig_components(pts.shape[-1], 1, seed)
    return np.sin(pts @ ks.T + phase[0]) @ coef[0]


def make_perturbation(field: VectorField, spec: PerturbationSpec) -> VectorField:
    """Return ``b + w`` with ``sup |w| <= spec.epsilon``."""
    eps = float(spec.epsilon)
    if not (eps >= 0 and math.isfinite(eps)):
        raise ConfigurationError(f"epsilon must be finite and >= 0, got {spec.epsilon}")
    n = field.dim
    d = np.zeros(n)
    d[0] = 1.0
    if spec.direction is not None:
        d = np.asarray(spec.direction, dtype=float)
        if d.shape != (n,) or not np.linalg.norm(d) > 0:
            raise ConfigurationError("direction must be a nonzero vector of the field dimension")
        d = d / np.linalg.norm(d)

    if spec.mode == "constant-shift":
        def w(t, pts):
            return np.broadcast_to(eps * d, pts.shape)

        def dw(t, pts):
            return np.zeros((len(pts), n, n))
    elif spec.mode == "smooth-bump":
        s2 = spec.bump_width**2

        def w(t, pts):
            g = np.exp(-np.sum(pts**2, axis=1) / (2 * s2))
            return eps * g[:, None] * d

        def dw(t, pts):
            g = np.exp(-np.sum(pts**2, axis=1) / (2 * s2))
            return -eps * (g[:, None, None] * d[None, :, None]) * pts[:, None, :] / s2
    elif spec.mode == "seeded-random-trig":
        w, dw, _ = _trig_field(n, spec.seed, eps)
    else:
        raise ConfigurationError(f"unknown perturbation mode {spec.mode!r}")

    base_value, base_jac = field.value, field.jacobian

    def value(t, pts):
        return base_value(t, pts) + w(t, pts)

    jacobian = None
    if base_jac is not None:
        def jacobian(t, pts):
            return base_jac(t, pts) + dw(t, pts)

    return VectorField(
        dim=n, kind="perturbed", sup_norm=field.sup_norm + eps, value=value,
        jacobian=jacobian, autonomous=field.autonomous,
        name=f"{field.name}+{spec.mode}(eps={eps:g},seed={spec.seed})",
        metadata={"base": field.name, "mode": spec.mode, "epsilon": eps, "seed": spec.seed},
    )


# ---------------------------------------------------------------------------
# sampled fields and the grid CSV schema

def sampled_field(times, axes, values, name="sampled-grid", metadata=None):
    """Piecewise-(multi)linear field through samples on a uniform lattice.

    ``values`` has shape ``(len(times), len(axes[0]), ..., n)``. Outside the
    lattice the nearest sample is used. Linear interpolation never exceeds the
    largest sample magnitude, so that maximum is a valid ``sup_norm``.
    """
    times = np.asarray(times, dtype=float)
    axes = [np.asarray(a, dtype=float) for a in axes]
    values = np.asarray(values, dtype=float)
    n = len(axes)
    if values.shape != (len(times), *[len(a) for a in axes], n):
        raise InvalidInputError(f"values shape {values.shape} does not match the lattice")
    if not np.all(np.isfinite(values)):
        raise InvalidInputError("sampled values must be finite")
    origin = np.array([a[0] for a in axes])
    step = np.array([a[1] - a[0] if len(a) > 1 else 1.0 for a in axes])
    t0 = times[0]
    dt = times[1] - times[0] if len(times) > 1 else 1.0
    single_time = len(times) == 1

    def value(t, pts):
        coords = ((pts - origin) / step).T
        if single_time:
            return np.stack(
                [ndimage.map_coordinates(values[0, ..., j], coords, order=1, mode="nearest")
                 for j in range(n)], axis=1)
        tc = np.full((1, pts.shape[0]), (t - t0) / dt)
        coords = np.vstack([tc, coords])
        return np.stack(
            [ndimage.map_coordinates(values[..., j], coords, order=1, mode="nearest")
             for j in range(n)], axis=1)

    sup = float(np.linalg.norm(values, axis=-1).max())
    meta = {"times": len(times), "spacing": step.tolist(), "origin": origin.tolist()}
    meta.update(metadata or {})
    return VectorField(
        dim=n, kind="sampled-grid", sup_norm=sup, value=value, jacobian=None,
        autonomous=single_time, name=name, metadata=meta,
    )


def mollify(times, axes, values, radius):
    """Gaussian-smooth lattice samples in space with standard deviation ``radius``."""
    if radius < 0:
        raise ConfigurationError("mollification radius must be >= 0")
    values = np.asarray(values, dtype=float)
    if radius == 0:
        return values
    steps = [a[1] - a[0] for a in axes]
    sigma = [0.0] + [radius / h for h in steps] + [0.0]
    return ndimage.gaussian_filter(values, sigma=sigma, mode="nearest")


def _uniform_axis(vals, label):
    u = np.unique(vals)
    if len(u) > 1:
        d = np.diff(u)
        if not np.allclose(d, d[0], rtol=1e-9, atol=0):
            raise InvalidInputError(f"column {label} is not a uniform lattice")
    return u


def read_grid_csv(path):
    """Read the ``t,x1..xn,b1..bm`` lattice schema.

    Returns ``(times, axes, values)`` with ``values`` shaped
    ``(len(times), *axis_lengths, m)``.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        rows = [r for r in reader if r and any(c.strip() for c in r)]
    if not header or header[0] != "t":
        raise InvalidInputError("grid CSV header must start with 't'")
    xs = [h for h in header[1:] if h.startswith("x")]
    bs = [h for h in header[1:] if h.startswith("b")]
    n, m = len(xs), len(bs)
    if n == 0 or m == 0 or header != ["t", *[f"x{i + 1}" for i in range(n)], *[f"b{i + 1}" for i in range(m)]]:
        raise InvalidInputError(f"malformed grid CSV header {header}")
    try:
        data = np.array(rows, dtype=float)
    except ValueError as exc:
        raise InvalidInputError(f"non-numeric entry in grid CSV: {exc}") from None
    if data.ndim != 2 or data.shape[1] != 1 + n + m:
        raise InvalidInputError("ragged rows in grid CSV")
    times = _uniform_axis(data[:, 0], "t")
    axes = [_uniform_axis(data[:, 1 + i], xs[i]) for i in range(n)]
    shape = (len(times), *[len(a) for a in axes])
    if data.shape[0] != int(np.prod(shape)):
        raise InvalidInputError("grid CSV does not cover a complete lattice")
    idx = [np.searchsorted(times, data[:, 0])] + [
        np.searchsorted(axes[i], data[:, 1 + i]) for i in range(n)
    ]
    values = np.full((*shape, m), np.nan)
    values[tuple(idx)] = data[:, 1 + n:]
    if np.isnan(values).any():
        raise InvalidInputError("grid CSV has duplicate or missing lattice nodes")
    return times, axes, values


def write_grid_csv(path, times, axes, values):
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    n = len(axes)
    m = values.shape[-1]
    header = ["t", *[f"x{i + 1}" for i in range(n)], *[f"b{i + 1}" for i in range(m)]]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for ti, t in enumerate(times):
            for node in product(*[range(len(a)) for a in axes]):
                coords = [axes[i][node[i]] for i in range(n)]
                vals = values[(ti, *node)]
                w.writerow([f"{v:.17g}" for v in (t, *coords, *vals)])


def load_sampled_field(path, mollify_radius=0.0):
    times, axes, values = read_grid_csv(path)
    if values.shape[-1] != len(axes):
        raise InvalidInputError("sampled field needs as many b-columns as x-columns")
    if mollify_radius:
        values = mollify(times, axes, values, mollify_radius)
    return sampled_field(
        times, axes, values, name=f"sampled-grid({path})",
        metadata={"mollification_radius": float(mollify_radius)},
    )


def save_sampled_field(path, field: VectorField, times, axes):
    """Sample ``field`` on the lattice ``times x axes`` and write it as CSV."""
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    pts = mesh.reshape(-1, len(axes))
    vals = np.stack([field.eval(t, pts).reshape(*mesh.shape) for t in times])
    write_grid_csv(path, times, axes, vals)
