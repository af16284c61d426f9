import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rlf_lab import analysis as A
from rlf_lab import fields as F
from rlf_lab.errors import ConfigurationError, DegenerateRadiusError, InvalidDeltaError
from rlf_lab.flow import FlowEnsemble, ball_lattice, integrate_ensemble
from rlf_lab.params import ExperimentParams

PTS, W = ball_lattice(2, 1.0, 101)


def test_lp_norm_of_constant_and_radial():
    assert A.lp_norm_ball(PTS, np.full(len(PTS), 3.0), W, 2) == pytest.approx(3 * math.sqrt(math.pi), rel=0.02)
    assert A.lp_norm_ball(PTS, np.zeros(len(PTS)), W, 2) == 0.0
    r = np.linalg.norm(PTS, axis=1)
    assert A.lp_norm_ball(PTS, r, W, 2) == pytest.approx(math.sqrt(math.pi / 2), rel=0.02)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), c=st.sampled_from([-4.0, -0.5, 0.25, 2.0, 8.0]))
def test_lp_norm_is_a_norm(seed, c):
    rng = np.random.default_rng(seed)
    u, v = rng.normal(size=(2, len(PTS)))
    n2 = lambda x: A.lp_norm_ball(PTS, x, W, 2)
    n3 = lambda x: A.lp_norm_ball(PTS, x, W, 3)
    # sqrt is correctly rounded, so power-of-two scaling is bit exact at p = 2
    assert n2(c * u) == abs(c) * n2(u)
    assert n3(c * u) == pytest.approx(abs(c) * n3(u), rel=1e-14)
    assert n3(u + v) <= n3(u) + n3(v)


def test_maximal_function_of_constant_and_indicator():
    box, h = (-3.0, 3.0), 0.02
    f = A.GridFunction.from_function(lambda x: np.full(len(x), 3.0), box, h)
    M = A.local_maximal_function(f, 0.5).values
    assert np.allclose(M, 3.0, rtol=1e-12)
    ind = A.GridFunction.from_function(lambda x: (np.linalg.norm(x, axis=1) <= 1).astype(float), box, h)
    M = A.local_maximal_function(ind, 0.5)
    assert A.interpolate(M, [[0.0, 0.0]])[0] == pytest.approx(1.0, abs=1e-12)


def _lens_ratio_bruteforce(d, rho, h=2e-3):
    # fraction of B_rho((d,0)) inside B_1(0), by midpoint quadrature
    m = int(rho / h) + 1
    ax = (np.arange(-m, m) + 0.5) * h
    X, Y = np.meshgrid(ax, ax, indexing="ij")
    in_small = X**2 + Y**2 <= rho**2
    in_unit = (X + d) ** 2 + Y**2 <= 1.0
    return np.count_nonzero(in_small & in_unit) / np.count_nonzero(in_small)


def test_maximal_function_lens_oracle():
    oracle = max(_lens_ratio_bruteforce(1.5, rho) for rho in np.linspace(0.5, 1.0, 26))
    assert 0 < oracle < 1
    ind = A.GridFunction.from_function(
        lambda x: (np.linalg.norm(x, axis=1) <= 1).astype(float), (-3.0, 3.0), 0.01)
    val = A.interpolate(A.local_maximal_function(ind, 1.0), [[1.5, 0.0]])[0]
    assert val == pytest.approx(oracle, rel=0.02)


def test_degenerate_radius():
    f = A.GridFunction.from_function(lambda x: x[:, 0], (-1.0, 1.0), 0.1)
    with pytest.raises(DegenerateRadiusError, match="degenerate radius"):
        A.local_maximal_function(f, 0.05)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(-3, 3))
def test_maximal_function_properties(seed, k):
    box, h = (-1.5, 1.5), 0.03
    f = A.GridFunction.from_function(lambda x: F.random_trig_scalar(x, seed), box, h)
    small = A.local_maximal_function(f, 0.3).values
    big = A.local_maximal_function(f, 0.6).values
    assert np.all(small <= big)
    assert np.all(small >= np.abs(f.values))
    c = -(2.0**k)
    scaled = A.local_maximal_function(A.GridFunction(box, h, c * f.values, 2), 0.6).values
    assert np.array_equal(scaled, abs(c) * big)


def test_homogeneity_general_scalar_to_rounding():
    box, h = (-1.5, 1.5), 0.03
    f = A.GridFunction.from_function(lambda x: F.random_trig_scalar(x, 5), box, h)
    M = A.local_maximal_function(f, 0.6).values
    M3 = A.local_maximal_function(A.GridFunction(box, h, 3.1 * f.values, 2), 0.6).values
    assert np.allclose(M3, 3.1 * M, rtol=1e-12, atol=0)


def test_maximal_lp_bound_constant_gives_volume_ratio():
    f = A.GridFunction.from_function(lambda x: np.ones(len(x)), (-2.0, 2.0), 0.02)
    rep = A.check_maximal_lp_bound(f, 0.5, 2.0, 1.0)
    assert rep.empirical_constant == pytest.approx(math.sqrt(1 / 1.5**2), rel=0.02)
    assert rep.empirical_constant < 1


def test_maximal_lp_bound_batch_and_bump():
    box, h = (-2.0, 2.0), 0.02
    batch = [A.GridFunction.from_function(lambda x, s=s: F.random_trig_scalar(x, s), box, h)
             for s in range(50)]
    rep = A.check_maximal_lp_bound(batch, 0.5, 2.0, 1.0)
    assert rep.sample_count == 50 and math.isfinite(rep.empirical_constant)
    assert rep.empirical_constant < 4
    const = A.check_maximal_lp_bound(
        A.GridFunction.from_function(lambda x: np.ones(len(x)), box, h), 0.5, 2.0, 1.0)
    bump = A.check_maximal_lp_bound(
        A.GridFunction.from_function(lambda x: np.exp(-np.sum(x**2, 1) / (2 * 0.05**2)), box, h),
        0.5, 2.0, 1.0)
    assert const.empirical_constant < bump.empirical_constant < 4


def test_maximal_lp_bound_validation():
    f = A.GridFunction.from_function(lambda x: np.zeros(len(x)), (-2.0, 2.0), 0.05)
    rep = A.check_maximal_lp_bound(f, 0.5, 2.0, 1.0)
    assert rep.sample_count == 0 and rep.skipped == 1
    with pytest.raises(ConfigurationError):
        A.check_maximal_lp_bound(f, 0.5, 2.0, 1.8)


def test_pointwise_bv_linear_is_sharp():
    a = np.array([1.0, 2.0])
    u = A.GridFunction.from_function(lambda x: x @ a, (-2.0, 2.0), 0.02)
    rep = A.check_pointwise_bv(u, 0.5, 20000, 1, radius=1.0)
    assert rep.empirical_constant <= 0.5 + 1e-12
    assert rep.empirical_constant == pytest.approx(0.5, abs=1e-6)


def test_pointwise_bv_constant_is_empty():
    u = A.GridFunction.from_function(lambda x: np.full(len(x), 2.0), (-2.0, 2.0), 0.05)
    rep = A.check_pointwise_bv(u, 0.5, 100, 0, radius=1.0)
    assert rep.sample_count == 0 and rep.empirical_constant == 0.0


def test_pointwise_bv_mollified_abs():
    u = A.GridFunction.from_function(lambda x: np.sqrt(np.sum(x**2, 1) + 0.01**2), (-2.0, 2.0), 0.01)
    rep = A.check_pointwise_bv(u, 0.5, 1000, 3, radius=1.0)
    assert 0 < rep.empirical_constant <= 1.0


def test_lemma_report_json_and_grid_csv(tmp_path):
    rep = A.LemmaReport("maximal-lp", 0.5, 3, {"ratio": 0.5}, values=[0.1, 0.5])
    assert json.loads(rep.to_json()) == {
        "lemma_id": "maximal-lp", "empirical_constant": 0.5, "sample_count": 3,
        "worst_case": {"ratio": 0.5}, "skipped": 0, "values": [0.1, 0.5],
    }
    g = A.GridFunction.from_function(lambda x: F.random_trig_scalar(x, 2), (-1.0, 1.0), 0.1)
    g.to_csv(tmp_path / "g.csv")
    back = A.GridFunction.from_csv(tmp_path / "g.csv")
    assert np.array_equal(back.values, g.values) and back.box == g.box


def _pair(shift, p=None):
    X = integrate_ensemble(F.rotation(), ExperimentParams(lattice_size=41, dt=1e-2))
    Xt = FlowEnsemble(X.initial_points, X.weights, X.times, X.positions + shift, "s", "rk4", X.dt, 1.0)
    return X, Xt


def test_log_functional():
    X, _ = _pair(0.0)
    assert A.log_functional_g(X, X, 1e-3, 2, -1) == 0.0
    delta = 1e-3
    X, Xt = _pair(np.array([delta * (math.e - 1), 0.0]))
    assert A.log_functional_g(X, Xt, delta, 2, -1) == pytest.approx(math.sqrt(math.pi), rel=0.02)
    with pytest.raises(InvalidDeltaError):
        A.log_functional_g(X, Xt, 0.0, 2, -1)


@settings(max_examples=20, deadline=None)
@given(scale=st.floats(1.0, 10.0), delta=st.floats(1e-6, 1e-1))
def test_log_functional_monotone(scale, delta):
    X, Xt = _pair(np.array([0.01, 0.0]))
    _, Xf = _pair(np.array([0.01 * scale, 0.0]))
    assert A.log_functional_g(X, Xt, delta, 2, -1) <= A.log_functional_g(X, Xf, delta, 2, -1)


def test_log_functional_vanishes_for_large_delta():
    X, Xt = _pair(np.array([0.01, 0.0]))
    assert A.log_functional_g(X, Xt, 1e12, 2, -1) < 1e-12


def test_log_functional_self_convergence():
    b = F.rotation()
    bt = F.make_perturbation(b, F.PerturbationSpec("constant-shift", 0.01))
    vals = []
    for size in (101, 401):
        p = ExperimentParams(lattice_size=size, dt=1e-2)
        X = integrate_ensemble(b, p)
        Xt = integrate_ensemble(bt, p)
        vals.append(A.log_functional_g(X, Xt, 0.06, 2, -1))
    assert vals[0] == pytest.approx(vals[1], rel=0.02)


def test_flow_lp_difference():
    X, _ = _pair(0.0)
    assert A.flow_lp_difference(X, X, 2, 1.0, -1) == 0.0
    X, Xt = _pair(np.array([0.3, 0.0]))
    assert A.flow_lp_difference(X, Xt, 2, 1.0, -1) == pytest.approx(0.3 * math.sqrt(math.pi), rel=0.02)
    fine = integrate_ensemble(F.rotation(), ExperimentParams(lattice_size=41, dt=5e-3))
    assert A.flow_lp_difference(X, fine.subsample(2), 2, 1.0, -1) <= 1e-6
