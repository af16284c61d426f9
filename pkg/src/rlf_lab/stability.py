"""Replay of the logarithmic Gronwall argument and the L^p stability check.

``verify_main_estimate`` integrates the flows of ``b`` and a perturbation
``b~``, measures ``delta = ||b - b~||_{L^1_t L^p_x(B_R)}``, evaluates the log
functional ``g`` and every term bounding its derivative, integrates the bound
into a constant ``C`` and finally compares ``sup_t ||X - X~||_{L^p(B_r)}``
against the bound produced by the Chebyshev truncation.
"""
from __future__ import annotations

import csv
import decimal
import io
import json
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import analysis as A
from .errors import ConfigurationError, InvalidDeltaError, LogSignError
from .fields import PerturbationSpec, VectorField, make_perturbation
from .flow import (
    FlowEnsemble,
    ball_lattice,
    ball_volume,
    estimate_compressibility,
    integrate_ensemble,
)
from .params import ExperimentParams

__all__ = [
    "ExperimentParams",
    "StabilityReport",
    "ChebyshevResult",
    "FieldDiagnostics",
    "SweepResult",
    "compute_delta",
    "field_diagnostics",
    "gronwall_chain_report",
    "chebyshev_truncation",
    "verify_main_estimate",
    "sweep_epsilon",
    "small_delta_ok",
    "worker_count",
    "SWEEP_COLUMNS",
]

G_FLOOR = 1e-12
SWEEP_COLUMNS = (
    "epsilon", "delta", "lhs_sup", "inv_log_delta", "ratio", "main_estimate_holds", "small_delta_ok",
)


def worker_count(default=None):
    """Worker cap from ``RLF_LAB_THREADS`` (falls back to the CPU count)."""
    env = os.environ.get("RLF_LAB_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigurationError(f"RLF_LAB_THREADS must be an integer, got {env!r}") from None
    return default or os.cpu_count() or 1


def small_delta_ok(delta):
    """``|log delta|^-1 >= 10 sqrt(delta)``."""
    if delta == 0:
        return True
    if not 0 < delta < 1:
        return False
    return 1.0 / abs(math.log(delta)) >= 10.0 * math.sqrt(delta)


def _time_grid(params):
    n_steps = max(1, math.ceil(params.tau / params.dt - 1e-9))
    return np.linspace(0.0, params.tau, n_steps + 1), params.tau / n_steps


def _difference_norms(b, bt, params, times):
    """``||(b - b~)(t_k, .)||_{L^p(B_R)}`` at each time in ``times``."""
    pts, w = ball_lattice(b.dim, params.R, spacing=params.quad_spacing)

    def norm(t):
        return A.lp_norm_ball(pts, b.eval(t, pts) - bt.eval(t, pts), w, params.p)

    if b.autonomous and bt.autonomous:
        return np.full(len(times), norm(float(times[0])))
    return np.array([norm(float(t)) for t in times])


def compute_delta(b: VectorField, bt: VectorField, params: ExperimentParams):
    """Left-endpoint rule for ``delta`` on the integrator's time levels."""
    times, dt = _time_grid(params)
    norms = _difference_norms(b, bt, params, times[:-1])
    return float(dt * np.sum(norms))


# ---------------------------------------------------------------------------
# lemma constants and maximal functions of Db

@dataclass(eq=False)
class FieldDiagnostics:
    """Lattice data of ``b`` at one time: ``|Db|``, ``M_{R~}|Db|`` and lemma constants."""

    t: float
    grad_norm: A.GridFunction
    maximal: A.GridFunction
    grad_lp: float  # ||Db(t, .)||_{L^p(B_R')}
    bv_report: A.LemmaReport
    maximal_reports: list
    c_n: float  # empirical constants times the safety factor
    c_pn: float


def field_diagnostics(b: VectorField, t, params: ExperimentParams):
    W = params.box_half_width
    h = 2 * W / (params.grid_size - 1)
    box = (-W, W)
    values = A.GridFunction.from_field(b, t, box, h)
    jac = A.GridFunction.from_field(b, t, box, h, gradient=True)
    grad_norm = A.GridFunction(box, h, jac.magnitude(), b.dim)
    lam = params.lam
    if lam >= h:
        maximal = A.local_maximal_function(grad_norm, lam)
    else:
        # both sup norms vanish: nothing moves and M is never used
        maximal = A.GridFunction(box, h, grad_norm.magnitude(), b.dim)

    reach = params.r + params.T * max(params.sup_b, params.sup_bt)
    if lam > 0:
        bv = A.check_pointwise_bv(
            values, lam, params.pair_count, params.seed, radius=reach, maximal=maximal
        )
    else:
        bv = A.LemmaReport("pointwise-bv", 0.0, 0)
    mx = []
    if lam >= h:
        for sup in sorted({params.sup_b, params.sup_bt}):
            mx.append(A.check_maximal_lp_bound(grad_norm, lam, params.p, params.r + params.T * sup))
    c_pn = max((m.empirical_constant for m in mx), default=0.0)

    pts, w = ball_lattice(b.dim, params.R_prime, spacing=params.quad_spacing)
    jac_pts = b.grad(t, pts).reshape(len(pts), -1)
    grad_lp = A.lp_norm_ball(pts, jac_pts, w, params.p)
    return FieldDiagnostics(
        t=float(t), grad_norm=grad_norm, maximal=maximal, grad_lp=grad_lp,
        bv_report=bv, maximal_reports=mx,
        c_n=params.safety * bv.empirical_constant, c_pn=params.safety * c_pn,
    )


# ---------------------------------------------------------------------------
# Gronwall chain

TERM_COLUMNS = (
    "t", "g", "g_prime", "slope", "term1", "term2", "term3", "term4",
    "bound2", "bound3", "bound4", "rhs",
)


@dataclass(eq=False)
class ChainTable:
    columns: dict  # name -> np.ndarray over time levels
    C_integrated: float
    slope_ok: np.ndarray
    link_ok: dict
    slope_ok_fraction: float
    g_bounded: bool
    L_hat: float
    Lt_hat: float
    c_n: float
    c_pn: float


def _rownorm(v):
    return np.sqrt(np.einsum("ij,ij->i", v, v))


def _chain_block(X, Xt, b, bt, t, delta, p, diag, w):
    D = X - Xt
    d = _rownorm(D)
    lg = np.log1p(d / delta)
    g = float(np.sum(w * lg**p) ** (1.0 / p))
    bX, bXt, btXt = b.eval(t, X), b.eval(t, Xt), bt.eval(t, Xt)
    dB1 = _rownorm(bX - bXt)
    dB2 = _rownorm(bXt - btXt)
    MX, MXt = A.interpolate(diag.maximal, X), A.interpolate(diag.maximal, Xt)
    lgp1 = lg ** (p - 1)

    moving = d > 0
    proj = np.zeros_like(d)
    proj[moving] = np.einsum("ij,ij->i", D[moving], (bX - btXt)[moving]) / d[moving]
    dgp = float(np.sum(w * p * lgp1 / (delta + d) * proj))

    if g > G_FLOOR:
        gfac = g ** (1 - p)
        common = w * lgp1 / (1 + d / delta)
        t1 = gfac / delta * float(np.sum(common * dB1))
        t2 = gfac / delta * float(np.sum(common * dB2))
        t3 = diag.c_n * gfac * float(np.sum(w * lgp1 * MX))
        t4 = diag.c_n * gfac * float(np.sum(w * lgp1 * MXt))
        gprime = dgp / (p * g ** (p - 1))
    elif not np.any(dB2):
        # flows coincide and the fields agree along them: they stay together
        t1 = t2 = t3 = t4 = gprime = 0.0
    else:
        # g = 0: the Hölder-collapsed forms are the continuous limits
        t1 = float(np.sum(w * dB1**p) ** (1 / p)) / delta
        t2 = float(np.sum(w * dB2**p) ** (1 / p)) / delta
        t3 = diag.c_n * float(np.sum(w * MX**p) ** (1 / p))
        t4 = diag.c_n * float(np.sum(w * MXt**p) ** (1 / p))
        gprime = 0.0
    return g, gprime, t1, t2, t3, t4


def gronwall_chain_report(X: FlowEnsemble, Xt: FlowEnsemble, b, bt, delta, params,
                          diagnostics=None, L_hat=None, Lt_hat=None):
    """Per-time-level values of every term in the bound on ``g'``.

    ``diagnostics`` maps a time to :class:`FieldDiagnostics`; for autonomous
    fields a single instance may be passed.
    """
    if not delta > 0:
        raise InvalidDeltaError(f"delta must be positive, got {delta}")
    p, slack = params.p, params.slack
    A._check_aligned(X, Xt, 0)
    times = X.times
    K = len(times) - 1
    dt = float(times[1] - times[0])
    if L_hat is None:
        L_hat = estimate_compressibility(X, params.bin_width).L_hat
    if Lt_hat is None:
        Lt_hat = estimate_compressibility(Xt, params.bin_width).L_hat

    def diag_at(t):
        if isinstance(diagnostics, FieldDiagnostics):
            return diagnostics
        if diagnostics is not None and t in diagnostics:
            return diagnostics[t]
        return field_diagnostics(b, t, params)

    if b.autonomous and not isinstance(diagnostics, FieldDiagnostics):
        diagnostics = diag_at(float(times[0]))
    wnorms = _difference_norms(b, bt, params, times)

    cols = {c: np.zeros(K + 1) for c in TERM_COLUMNS}
    cols["t"] = times.copy()
    w = X.weights
    for k, t in enumerate(times):
        diag = diag_at(float(t))
        g, gp, t1, t2, t3, t4 = _chain_block(
            X.positions[k], Xt.positions[k], b, bt, float(t), delta, p, diag, w
        )
        cols["g"][k], cols["g_prime"][k] = g, gp
        cols["term1"][k], cols["term2"][k], cols["term3"][k], cols["term4"][k] = t1, t2, t3, t4
        cols["bound3"][k] = diag.c_n * diag.c_pn * L_hat ** (1 / p) * diag.grad_lp
        cols["bound4"][k] = diag.c_n * diag.c_pn * Lt_hat ** (1 / p) * diag.grad_lp
        cols["bound2"][k] = Lt_hat ** (1 / p) / delta * wnorms[k]
    cols["rhs"] = cols["bound2"] + cols["bound3"] + cols["bound4"]
    cols["slope"][:-1] = np.diff(cols["g"]) / dt
    cols["slope"][-1] = np.nan

    s12 = cols["term1"] + cols["term2"]
    tol = 1e-12
    slope_ok = cols["slope"][:-1] <= (1 + slack) * 0.5 * (s12[:-1] + s12[1:]) + tol
    link_ok = {
        "g_prime<=term1+term2": cols["g_prime"] <= (s12) * (1 + 1e-9) + tol,
        "term1<=term3+term4": cols["term1"] <= (1 + slack) * (cols["term3"] + cols["term4"]) + tol,
        "term2<=bound2": cols["term2"] <= (1 + slack) * cols["bound2"] + tol,
        "term3<=bound3": cols["term3"] <= (1 + slack) * cols["bound3"] + tol,
        "term4<=bound4": cols["term4"] <= (1 + slack) * cols["bound4"] + tol,
    }
    C = float(dt * np.sum(cols["rhs"][:-1]))
    g_bounded = bool(np.all(cols["g"] <= C * (1 + slack) + tol))
    diag0 = diag_at(float(times[0]))
    return ChainTable(
        columns=cols, C_integrated=C, slope_ok=slope_ok, link_ok=link_ok,
        slope_ok_fraction=float(np.mean(slope_ok)), g_bounded=g_bounded,
        L_hat=float(L_hat), Lt_hat=float(Lt_hat), c_n=diag0.c_n, c_pn=diag0.c_pn,
    )


# ---------------------------------------------------------------------------
# Chebyshev truncation

@dataclass(frozen=True)
class ChebyshevResult:
    eta: float
    kept_fraction: float
    bad_mass: float
    chebyshev_ok: bool
    pointwise_cap: float
    lhs_bound: float
    exp_term: float
    identity_ulps: float
    identity_ulps_double: float


def _ulps(a, b):
    return abs(a - b) / math.ulp(b) if b != 0 else abs(a)


def _identity_check(C, delta, p):
    """``exp(pC / eta^(1/p))`` against ``delta^(-p/2)`` in 60-digit arithmetic."""
    with decimal.localcontext() as ctx:
        ctx.prec = 60
        Cd, dd, pd = decimal.Decimal(C), decimal.Decimal(delta), decimal.Decimal(p)
        L = abs(dd.ln())
        eta = (2 * Cd / L) ** pd
        lhs = (pd * Cd / eta ** (1 / pd)).exp()
        rhs = dd ** (-pd / 2)
        return float(lhs), float(rhs)


def _bad_mass(distances, weights, delta, p, level):
    lgp = np.log1p(np.asarray(distances, dtype=float) / delta) ** p
    return float(np.sum(np.asarray(weights, dtype=float)[lgp > level]))


def chebyshev_truncation(g_at_k, C, delta, params, X_sup=0.0, Xt_sup=0.0,
                         distances=None, weights=None):
    """Split ``B_r`` by ``log(1 + |X - X~|/delta)^p > C^p / eta``.

    With ``eta = 2^p C^p |log delta|^-p`` the good set has
    ``|X - X~|^p <= delta^p exp(pC / eta^(1/p)) = delta^(p/2)``. When the
    pointwise distances are given the bad mass is measured on the discrete
    measure, otherwise the Chebyshev bound ``g^p eta / C^p`` is used.
    """
    p = params.p
    if not delta > 0:
        raise InvalidDeltaError(f"delta must be positive, got {delta}")
    if delta >= 1:
        raise LogSignError(f"delta={delta} >= 1: |log delta| bound is invalid; reduce epsilon")
    if not C > 0:
        raise ConfigurationError(f"C must be positive, got {C}")
    logd = abs(math.log(delta))
    eta = 2**p * C**p * logd ** (-p)
    level = C**p / eta
    if distances is not None:
        bad_mass = _bad_mass(distances, weights, delta, p, level)
        total = float(np.sum(weights))
    else:
        bad_mass = min(g_at_k**p / level, ball_volume(params.dim, params.r))
        total = ball_volume(params.dim, params.r)
    chebyshev_ok = bad_mass <= eta and bad_mass * level <= g_at_k**p * (1 + 1e-12) + 1e-300

    exp_term = math.exp(p * C / eta ** (1 / p))
    target = delta ** (-p / 2)
    hi_lhs, hi_rhs = _identity_check(C, delta, p)
    lhs_bound = (
        eta * (X_sup + Xt_sup) ** p + ball_volume(params.dim, params.r) * delta ** (p / 2)
    ) ** (1 / p)
    return ChebyshevResult(
        eta=eta, kept_fraction=1.0 - bad_mass / total if total else 1.0, bad_mass=bad_mass,
        chebyshev_ok=bool(chebyshev_ok), pointwise_cap=delta**p * exp_term, lhs_bound=lhs_bound,
        exp_term=exp_term, identity_ulps=_ulps(hi_lhs, hi_rhs),
        identity_ulps_double=_ulps(exp_term, target),
    )


# ---------------------------------------------------------------------------
# the main experiment

@dataclass
class StabilityReport:
    field_id: str
    perturbation: dict
    params: dict
    delta: float
    exact_equality: bool
    g_series: list
    gronwall_terms: dict
    C_integrated: float
    eta: float
    lhs_sup: float
    rhs_bound: float
    main_estimate_holds: bool
    small_delta_ok: bool
    L_hat: float = 1.0
    Lt_hat: float = 1.0
    c_n: float = 0.0
    c_pn: float = 0.0
    X_sup: float = 0.0
    Xt_sup: float = 0.0
    slope_ok_fraction: float = 1.0
    g_bounded: bool = True
    chain_links: dict = field(default_factory=dict)
    chebyshev: dict = field(default_factory=dict)
    lemma_reports: list = field(default_factory=list)

    def recompute_holds(self):
        return self.lhs_sup <= self.rhs_bound

    def to_dict(self):
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return None
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            if isinstance(v, (list, tuple)):
                return [clean(x) for x in v]
            return v

        return clean(asdict(self))

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_csv(self):
        """Per-time-level table of the Gronwall chain."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["k", *TERM_COLUMNS]
        w.writerow(cols)
        terms = self.gronwall_terms
        for k in range(len(self.g_series)):
            row = [k]
            for c in TERM_COLUMNS:
                v = terms[c][k] if c in terms else (self.g_series[k] if c == "g" else None)
                row.append("" if v is None else repr(float(v)))
            w.writerow(row)
        return buf.getvalue()


def _exact_report(b, bt, spec, params):
    times, _ = _time_grid(params)
    zeros = [0.0] * len(times)
    terms = {c: list(zeros) for c in TERM_COLUMNS}
    terms["t"] = times.tolist()
    return StabilityReport(
        field_id=b.name, perturbation=asdict(spec), params=params.to_dict(), delta=0.0,
        exact_equality=True, g_series=zeros, gronwall_terms=terms, C_integrated=0.0, eta=0.0,
        lhs_sup=0.0, rhs_bound=0.0, main_estimate_holds=True, small_delta_ok=True,
    )


def verify_main_estimate(b: VectorField, spec: PerturbationSpec, params: ExperimentParams,
                         base_ensemble=None, diagnostics=None):
    """Run one stability experiment and assemble its :class:`StabilityReport`."""
    bt = make_perturbation(b, spec)
    params = params.with_(sup_b=b.sup_norm, sup_bt=bt.sup_norm, dim=b.dim)
    delta = compute_delta(b, bt, params)
    if delta == 0:
        return _exact_report(b, bt, spec, params)
    if delta >= 1:
        raise LogSignError(f"delta={delta:.4g} >= 1: |log delta| bound is invalid; reduce epsilon")

    if diagnostics is None and b.autonomous:
        diagnostics = field_diagnostics(b, 0.0, params)
    X = base_ensemble if base_ensemble is not None else integrate_ensemble(b, params)
    Xt = integrate_ensemble(bt, params, points=X.initial_points, weights=X.weights)
    L_hat = estimate_compressibility(X, params.bin_width).L_hat
    Lt_hat = estimate_compressibility(Xt, params.bin_width).L_hat
    chain = gronwall_chain_report(X, Xt, b, bt, delta, params, diagnostics, L_hat, Lt_hat)
    cols = chain.columns

    C = chain.C_integrated
    X_sup = float(np.linalg.norm(X.positions, axis=-1).max())
    Xt_sup = float(np.linalg.norm(Xt.positions, axis=-1).max())
    lhs = [A.flow_lp_difference(X, Xt, params.p, params.r, k) for k in range(len(X.times))]
    lhs_sup = max(lhs)

    D = X.positions - Xt.positions
    dist = np.sqrt(np.einsum("kij,kij->ki", D, D))
    kmax = int(np.argmax(cols["g"]))
    first = chebyshev_truncation(
        cols["g"][kmax], C, delta, params, X_sup, Xt_sup, dist[kmax], X.weights
    )
    level = C**params.p / first.eta
    bad = np.array([_bad_mass(dk, X.weights, delta, params.p, level) for dk in dist])
    cheb_ok = bool(np.all(bad <= first.eta)
                   and np.all(bad * level <= cols["g"] ** params.p * (1 + 1e-12) + 1e-300))
    rhs = first.lhs_bound

    diag = diagnostics if isinstance(diagnostics, FieldDiagnostics) else None
    lemma = []
    if diag is not None:
        lemma = [diag.bv_report.to_dict(), *[m.to_dict() for m in diag.maximal_reports]]

    return StabilityReport(
        field_id=b.name, perturbation=asdict(spec), params=params.to_dict(), delta=delta,
        exact_equality=False, g_series=cols["g"].tolist(),
        gronwall_terms={c: cols[c].tolist() for c in TERM_COLUMNS},
        C_integrated=C, eta=first.eta, lhs_sup=lhs_sup, rhs_bound=rhs,
        main_estimate_holds=bool(lhs_sup <= rhs), small_delta_ok=small_delta_ok(delta),
        L_hat=L_hat, Lt_hat=Lt_hat, c_n=chain.c_n, c_pn=chain.c_pn, X_sup=X_sup, Xt_sup=Xt_sup,
        slope_ok_fraction=chain.slope_ok_fraction, g_bounded=chain.g_bounded,
        chain_links={k: float(np.mean(v)) for k, v in chain.link_ok.items()},
        chebyshev={
            "bad_mass_max": float(bad.max()), "chebyshev_ok": cheb_ok,
            "kept_fraction_min": 1.0 - float(bad.max()) / float(np.sum(X.weights)),
            "pointwise_cap": first.pointwise_cap, "delta_p_half": delta ** (params.p / 2),
            "identity_ulps": first.identity_ulps,
            "identity_ulps_double": first.identity_ulps_double,
        },
        lemma_reports=lemma,
    )


# ---------------------------------------------------------------------------
# epsilon sweep

@dataclass
class SweepResult:
    rows: list
    warnings: list
    reports: list

    @property
    def lhs_strictly_decreasing(self):
        lhs = [r["lhs_sup"] for r in self.rows]
        return all(a > b for a, b in zip(lhs, lhs[1:]))

    @property
    def ratio_sup(self):
        return max((r["ratio"] for r in self.rows), default=0.0)

    @property
    def ratio_band(self):
        ratios = [r["ratio"] for r in self.rows]
        if not ratios or min(ratios) <= 0:
            return math.inf
        return max(ratios) / min(ratios)

    @property
    def all_hold(self):
        return all(r["main_estimate_holds"] for r in self.rows)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in self.rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else str(r[c]).lower() for c in SWEEP_COLUMNS])
        return buf.getvalue()

    def to_dict(self):
        return {
            "rows": self.rows, "warnings": self.warnings,
            "lhs_strictly_decreasing": self.lhs_strictly_decreasing,
            "ratio_sup": self.ratio_sup, "ratio_band": self.ratio_band,
        }


def sweep_epsilon(b: VectorField, mode, eps_list, params: ExperimentParams, seed=0,
                  workers=None):
    """Run the experiment for each epsilon; rows that cannot be analysed are dropped."""
    eps_list = [float(e) for e in eps_list]
    if not eps_list:
        raise ConfigurationError("eps_list is empty")
    if any(a <= b_ for a, b_ in zip(eps_list, eps_list[1:])):
        raise ConfigurationError("eps_list must be strictly decreasing")
    if any(e < 0 for e in eps_list):
        raise ConfigurationError("eps_list entries must be >= 0")

    notes, todo = [], []
    for eps in eps_list:
        spec = PerturbationSpec(mode=mode, epsilon=eps, seed=seed)
        if eps == 0:
            notes.append(f"epsilon=0 dropped: exact equality, log functional undefined")
            continue
        bt = make_perturbation(b, spec)
        p_eps = params.with_(sup_b=b.sup_norm, sup_bt=bt.sup_norm, dim=b.dim)
        delta = compute_delta(b, bt, p_eps)
        if not 0 < delta < 1:
            notes.append(f"epsilon={eps:g} dropped: delta={delta:.4g} outside (0, 1)")
            continue
        todo.append(spec)
    for n in notes:
        warnings.warn(n, RuntimeWarning, stacklevel=2)

    base = integrate_ensemble(b, params) if todo else None

    def run(spec):
        return verify_main_estimate(b, spec, params, base_ensemble=base)

    nw = min(workers or worker_count(), max(1, len(todo)))
    if nw > 1:
        with ThreadPoolExecutor(max_workers=nw) as ex:
            reports = list(ex.map(run, todo))
    else:
        reports = [run(s) for s in todo]

    rows = []
    for spec, rep in zip(todo, reports):
        inv = 1.0 / abs(math.log(rep.delta))
        rows.append({
            "epsilon": spec.epsilon, "delta": rep.delta, "lhs_sup": rep.lhs_sup,
            "inv_log_delta": inv, "ratio": rep.lhs_sup / inv,
            "main_estimate_holds": rep.main_estimate_holds, "small_delta_ok": rep.small_delta_ok,
        })
    return SweepResult(rows=rows, warnings=notes, reports=reports)
