import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rlf_lab import fields as F
from rlf_lab.errors import ConfigurationError, LogSignError, UnsupportedExponentError
from rlf_lab.flow import integrate_ensemble
from rlf_lab.params import ExperimentParams
from rlf_lab.stability import (
    SWEEP_COLUMNS,
    chebyshev_truncation,
    compute_delta,
    gronwall_chain_report,
    small_delta_ok,
    sweep_epsilon,
    verify_main_estimate,
    worker_count,
)

FAST = dict(lattice_size=41, dt=1e-2, grid_size=301, pair_count=500)


def _params(b, bt, **kw):
    return ExperimentParams.for_fields(b, bt, **kw)


def test_delta_zero_for_identical_fields():
    b = F.rotation()
    assert compute_delta(b, b, _params(b, b)) == 0.0


def test_delta_constant_shift():
    b = F.constant()
    bt = F.make_perturbation(b, F.PerturbationSpec("constant-shift", 1e-3))
    p = _params(b, bt)
    assert compute_delta(b, bt, p) == pytest.approx(1e-3 * math.sqrt(math.pi) * p.R, rel=0.02)


def test_delta_trig_self_convergence():
    b = F.rotation()
    bt = F.make_perturbation(b, F.PerturbationSpec("seeded-random-trig", 0.01, seed=3))
    coarse = compute_delta(b, bt, _params(b, bt, dt=1e-2))
    fine = compute_delta(b, bt, _params(b, bt, dt=1e-2, lattice_size=401))
    assert coarse == pytest.approx(fine, rel=0.02)


@settings(max_examples=50, deadline=None)
@given(r=st.floats(0.1, 5), T=st.floats(0.1, 5), sb=st.floats(0, 10), sbt=st.floats(0, 10))
def test_radius_monotonicity(r, T, sb, sbt):
    p = ExperimentParams(r=r, T=T, tau=T, sup_b=sb, sup_bt=sbt)
    assert p.R <= p.R_tilde + r * (1 + 1e-15) <= p.R_prime * (1 + 1e-15) + 1e-12


def test_params_validation():
    with pytest.raises(UnsupportedExponentError):
        ExperimentParams(p=1)
    with pytest.raises(ConfigurationError):
        ExperimentParams(tau=2.0, T=1.0)
    with pytest.raises(ConfigurationError):
        ExperimentParams(integrator="leapfrog")


def test_small_delta_rule():
    assert small_delta_ok(1e-4)
    assert not small_delta_ok(0.05)
    assert not small_delta_ok(1.5)


def _chain(b, bt, **kw):
    p = _params(b, bt, **FAST, **kw)
    X = integrate_ensemble(b, p)
    Xt = integrate_ensemble(bt, p, points=X.initial_points, weights=X.weights)
    delta = compute_delta(b, bt, p) or 1e-3
    return gronwall_chain_report(X, Xt, b, bt, delta, p), delta, p


def test_chain_same_field_is_zero():
    b = F.rotation()
    chain, _, _ = _chain(b, b)
    for name in ("g", "term1", "term2", "term3", "term4"):
        assert np.all(chain.columns[name] == 0.0), name


def test_chain_rotation_shift():
    b = F.rotation()
    bt = F.make_perturbation(b, F.PerturbationSpec("constant-shift", 0.01))
    chain, _, _ = _chain(b, bt)
    assert chain.slope_ok_fraction >= 0.99
    assert chain.g_bounded
    assert all(np.mean(v) == 1.0 for v in chain.link_ok.values())


def test_chebyshev_with_empty_bad_set():
    p = ExperimentParams()
    delta = 1e-4
    res = chebyshev_truncation(0.0, 3.0, delta, p, distances=np.zeros(10), weights=np.ones(10))
    assert res.bad_mass == 0.0 and res.chebyshev_ok
    assert res.lhs_bound == pytest.approx(math.sqrt(math.pi * delta), rel=1e-12)
    assert res.identity_ulps <= 4


@settings(max_examples=30, deadline=None)
@given(C=st.floats(0.1, 500), delta=st.floats(1e-12, 0.5), p=st.sampled_from([1.5, 2.0, 3.0]))
def test_eta_identity(C, delta, p):
    res = chebyshev_truncation(0.0, C, delta, ExperimentParams(p=p))
    assert res.identity_ulps <= 4
    assert res.eta == pytest.approx(2**p * C**p / abs(math.log(delta)) ** p)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), C=st.floats(0.5, 50))
def test_discrete_chebyshev(seed, C):
    rng = np.random.default_rng(seed)
    delta = 1e-3
    dist = rng.exponential(0.01, 200)
    w = rng.uniform(0.5, 1.5, 200)
    g = float(np.sum(w * np.log1p(dist / delta) ** 2) ** 0.5)
    res = chebyshev_truncation(g, max(C, g), delta, ExperimentParams(), distances=dist, weights=w)
    assert res.chebyshev_ok and res.bad_mass <= res.eta


def test_log_sign_error():
    with pytest.raises(LogSignError):
        chebyshev_truncation(0.0, 1.0, 1.5, ExperimentParams())


def test_exact_equality_report():
    rep = verify_main_estimate(F.rotation(), F.PerturbationSpec("constant-shift", 0.0), ExperimentParams())
    assert rep.exact_equality and rep.lhs_sup == 0.0 and rep.main_estimate_holds


def test_report_consistency_and_serialization():
    b = F.shear()
    rep = verify_main_estimate(b, F.PerturbationSpec("constant-shift", 1e-5), ExperimentParams(**FAST))
    assert rep.main_estimate_holds == rep.recompute_holds()
    d = json.loads(rep.to_json())
    assert d["lhs_sup"] == rep.lhs_sup and d["delta"] == rep.delta
    lines = rep.to_csv().splitlines()
    assert lines[0].startswith("k,t,g,") and len(lines) == len(rep.g_series) + 1


def test_sweep_drops_zero_and_validates():
    b = F.rotation()
    with pytest.warns(RuntimeWarning, match="epsilon=0"):
        res = sweep_epsilon(b, "constant-shift", [1e-3, 1e-4, 0.0], ExperimentParams(**FAST))
    assert [r["epsilon"] for r in res.rows] == [1e-3, 1e-4]
    assert res.to_csv().splitlines()[0] == ",".join(SWEEP_COLUMNS)
    assert res.lhs_strictly_decreasing
    for bad in ([], [1e-4, 1e-3], [1e-3, -1.0]):
        with pytest.raises(ConfigurationError):
            sweep_epsilon(b, "constant-shift", bad, ExperimentParams(**FAST))


def test_sweep_independent_of_thread_count(monkeypatch):
    b = F.rotation()
    out = []
    for n in ("1", "3"):
        monkeypatch.setenv("RLF_LAB_THREADS", n)
        assert worker_count() == int(n)
        out.append(sweep_epsilon(b, "constant-shift", [1e-3, 1e-4], ExperimentParams(**FAST)).to_csv())
    assert out[0] == out[1]


def test_bad_thread_env(monkeypatch):
    monkeypatch.setenv("RLF_LAB_THREADS", "many")
    with pytest.raises(ConfigurationError):
        worker_count()


def test_linear_response_of_lipschitz_fields():
    # lhs_sup grows linearly in epsilon for Lipschitz b, so lhs_sup * |log delta|
    # spreads by roughly eps_max/eps_min across a sweep
    res = sweep_epsilon(F.rotation(), "constant-shift", [1e-2, 1e-3, 1e-4, 1e-5], ExperimentParams(**FAST))
    slopes = [r["lhs_sup"] / r["epsilon"] for r in res.rows]
    assert max(slopes) / min(slopes) == pytest.approx(1.0, abs=1e-3)
    assert res.ratio_band > 50
