import itertools
from types import SimpleNamespace

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from smdpbatch.discretize import to_dtmdp
from smdpbatch.exceptions import ConfigError, ExhaustionError, StructuralError
from smdpbatch.model import TruncationConfig, build_truncated
from smdpbatch.policies import Policy, make_static, make_work_conserving
from smdpbatch.profile import ServiceProfile, Weights, Workload
from smdpbatch.simulator import simulate
from smdpbatch.solver import (
    chain_stationary, evaluate_policy, find_min_smax, gth_stationary, optimality_residual,
    relative_value_iteration, solve_truncated, stationary_distribution,
)

from conftest import tiny_setup


def _np_stationary(P):
    n = P.shape[0]
    A = np.vstack([P.T - np.eye(n), np.ones(n)])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    return np.linalg.lstsq(A, b, rcond=None)[0]


def _enumerate(model):
    """Average cost of every deterministic stationary policy, by direct linear algebra."""
    out = {}
    for acts in itertools.product(*[list(model.feasible_actions(s)) for s in range(model.n_states)]):
        P = np.array([model.transition_row(s, a) for s, a in enumerate(acts)])
        mu = _np_stationary(P)
        idx = np.arange(model.n_states)
        out[acts] = float(mu @ model.c[idx, acts] / (mu @ model.y[idx, acts]))
    return out


@pytest.mark.parametrize(
    "b_max,rho,w,c_o",
    [(1, 0.6, (1.0, 0.5), 4.0), (1, 0.9, (1.0, 0.0), 0.0), (1, 0.3, (0.2, 3.0), 50.0), (2, 0.7, (1.0, 1.0), 2.0)],
)
def test_rvi_matches_brute_force_enumeration(b_max, rho, w, c_o):
    profile, wl, weights = tiny_setup(b_max, rho, *w)
    model = build_truncated(profile, wl, weights, TruncationConfig(b_max, c_o))
    costs = _enumerate(model)
    g_star = min(costs.values())
    policy, report = relative_value_iteration(to_dtmdp(model), epsilon=1e-11, iter_max=100_000)
    assert report.converged
    assert report.g == pytest.approx(g_star, rel=1e-9)
    assert costs[tuple(policy.actions)] == pytest.approx(g_star, rel=1e-12)
    assert evaluate_policy(policy, model).g_pi == pytest.approx(g_star, rel=1e-12)


def test_discretised_chain_keeps_average_cost():
    profile, wl, weights = tiny_setup(2, 0.7, 1.0, 1.0)
    model = build_truncated(profile, wl, weights, TruncationConfig(2, 2.0))
    dt = to_dtmdp(model, 0.7)
    mats = dt.transition_matrices()
    idx = np.arange(model.n_states)
    for acts, g in _enumerate(model).items():
        P = mats[list(acts), idx]
        mu = _np_stationary(P)
        assert mu @ dt.c_tilde[idx, acts] == pytest.approx(g, rel=1e-10)


def _one_state(kappa):
    # one recurrent state with a single action; a policy needs the overflow slot too,
    # so the stub carries a second, identical self-looping state
    model = SimpleNamespace(b_max=1, s_max=0, mults_per_iteration=lambda: 1)
    return SimpleNamespace(
        n_states=2, feasible=np.array([[True], [True]]), c_tilde=np.full((2, 1), kappa), eta=1.0, model=model,
        expected_next=lambda v: v[:, None].copy(),
    )


def test_rvi_one_state():
    policy, rep = relative_value_iteration(_one_state(3.5), epsilon=1e-9)
    assert rep.g == 3.5 and np.all(rep.h == 0) and rep.iterations <= 2


def test_rvi_argument_checks():
    env = _one_state(1.0)
    with pytest.raises(ConfigError):
        relative_value_iteration(env, epsilon=0)
    with pytest.raises(ConfigError):
        relative_value_iteration(env, iter_max=0)


def test_rvi_p4_table1_point(p4):
    model, policy, rep, ev = solve_truncated(
        p4, Workload.from_rho(p4, 0.9), Weights(1, 1), TruncationConfig(70, 100.0), delta=1e-3
    )
    assert rep.converged and rep.iterations == 1482
    assert rep.g == pytest.approx(66.13406355, rel=1e-8)
    assert ev.g_pi == pytest.approx(66.13411272, rel=1e-8)
    assert ev.delta_pi == pytest.approx(8.3499e-4, rel=1e-4)
    assert ev.acceptable
    assert rep.space_complexity == 2240
    assert rep.time_complexity == 1482 * 32 * 70**2


def test_rvi_cap_reports_not_converged(p4):
    model = build_truncated(p4, Workload.from_rho(p4, 0.9), Weights(1, 1), TruncationConfig(70, 100.0))
    policy, rep = relative_value_iteration(to_dtmdp(model), 0.01, 50)
    assert not rep.converged and rep.iterations == 50
    assert policy.n_states == 72


@pytest.mark.parametrize("rho", [0.3, 0.9])
def test_optimality_residual_within_epsilon(p4, rho):
    model = build_truncated(p4, Workload.from_rho(p4, rho), Weights(1, 1), TruncationConfig(60, 100.0))
    dt = to_dtmdp(model)
    _, rep = relative_value_iteration(dt, 0.01, 10_000)
    assert rep.converged
    assert np.abs(optimality_residual(dt, rep.g, rep.h)).max() <= 0.01


def test_stationary_trivial():
    assert np.allclose(chain_stationary(np.array([[0.0, 1.0], [1.0, 0.0]])), [0.5, 0.5])
    assert np.allclose(chain_stationary(np.array([[1.0]])), [1.0])


def test_stationary_reducible():
    P = np.array([[1.0, 0.0, 0.0], [0.5, 0.0, 0.5], [0.0, 0.0, 1.0]])
    with pytest.raises(StructuralError) as err:
        chain_stationary(P)
    assert sorted(map(sorted, err.value.classes)) == [[0], [2]]


def test_stationary_transient_states_get_zero():
    P = np.array([[0.0, 1.0, 0.0], [0.0, 0.5, 0.5], [0.0, 0.5, 0.5]])
    assert np.allclose(chain_stationary(P), [0.0, 0.5, 0.5])


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 30), st.integers(0, 2**31))
def test_gth_and_power_agree_with_dense_solve(n, seed):
    rng = np.random.default_rng(seed)
    P = rng.random((n, n)) * (rng.random((n, n)) < 0.5)
    P += np.eye(n, k=1) + np.eye(n, k=-(n - 1))  # keep it irreducible
    P /= P.sum(axis=1, keepdims=True)
    ref = _np_stationary(P)
    for method in ("gth", "power"):
        mu = chain_stationary(sp.csr_matrix(P), method)
        assert np.abs(mu @ P - mu).max() < 1e-8
        assert np.abs(mu - ref).max() < 1e-8


def test_stationary_balance_on_p4(p4):
    model = build_truncated(p4, Workload.from_rho(p4, 0.9), Weights(1, 1), TruncationConfig(150, 100.0))
    pol = make_work_conserving(32, 150)
    P = model.policy_matrix(pol.actions)
    for method in ("gth", "power"):
        mu = stationary_distribution(pol, model, method)
        assert np.abs(P.T @ mu - mu).max() < 1e-8


def test_stationary_matches_simulated_epochs(p4):
    wl = Workload.from_rho(p4, 0.5)
    model = build_truncated(p4, wl, Weights(), TruncationConfig(70))
    pol = make_work_conserving(32, 70)
    mu = stationary_distribution(pol, model)
    rep = simulate(p4, wl, pol, horizon=2.8e7 / wl.lam, seed=11, warmup_fraction=0.01)
    assert rep.epoch_counts.sum() > 1e7
    assert np.abs(rep.epoch_frequencies() - mu).sum() < 0.01


def test_delta_vanishes_when_overflow_unreachable():
    prof = ServiceProfile(alpha=1.0, tau0=0.0, beta=1.0, zeta0=0.0, b_max=4)
    model = build_truncated(prof, Workload(1e-6), Weights(), TruncationConfig(8, 5.0))
    ev = evaluate_policy(make_work_conserving(4, 8), model, delta=1e-30)
    assert ev.delta_pi < 1e-15


def test_evaluation_decomposition(p4):
    model = build_truncated(p4, Workload.from_rho(p4, 0.7), Weights(1.0, 2.0), TruncationConfig(60, 50.0))
    ev = evaluate_policy(make_static(16, 32, 60), model)
    assert ev.latency_cost + ev.energy_cost + ev.overflow_cost == pytest.approx(ev.g_pi, rel=1e-10)
    assert ev.avg_response_time == pytest.approx(ev.avg_queue_len / model.lam)
    assert ev.mu.sum() == pytest.approx(1.0)


def test_evaluate_rejects_mismatched_policy(p4):
    model = build_truncated(p4, Workload.from_rho(p4, 0.5), Weights(), TruncationConfig(40))
    with pytest.raises(Exception, match="states"):
        evaluate_policy(make_work_conserving(32, 50), model)


def test_find_min_smax_generous_delta(p4):
    s, recs = find_min_smax(p4, Workload.from_rho(p4, 0.9), Weights(1, 1), 100.0, delta=1e6, smax_grid=[32])
    assert s == 32 and len(recs) == 1


def test_find_min_smax_exhaustion(p4):
    with pytest.raises(ExhaustionError) as err:
        find_min_smax(p4, Workload.from_rho(p4, 0.9), Weights(1, 1), 100.0, delta=1e-12, smax_grid=[32, 40])
    assert [r.s_max for r in err.value.records] == [32, 40]


def test_find_min_smax_refine_equals_fine_scan(p4):
    wl, w = Workload.from_rho(p4, 0.9), Weights(1, 1)
    s_coarse, recs = find_min_smax(p4, wl, w, 100.0, smax_grid=range(32, 121, 16), refine=True)
    s_fine, _ = find_min_smax(p4, wl, w, 100.0, smax_grid=range(60, 121))
    assert s_coarse == s_fine == 70
    rec = next(r for r in recs if r.s_max == 70)
    assert rec.iterations == 1482 and rec.acceptable


def test_find_min_smax_grid_validation(p4):
    wl = Workload.from_rho(p4, 0.5)
    with pytest.raises(ConfigError):
        find_min_smax(p4, wl, Weights(), 1.0, smax_grid=[40, 35])
    with pytest.raises(ConfigError):
        find_min_smax(p4, wl, Weights(), 1.0, smax_grid=[16])


def test_solved_policies_have_waiting_threshold_structure(p4):
    # below the limit the server waits, at and above it always serves
    from smdpbatch.policies import detect_control_limit

    for rho in (0.1, 0.5, 0.9):
        limits = []
        for w2 in (0.0, 0.1, 1.0, 500.0):
            w = Weights(1.0, w2)
            _, policy, _, _ = solve_truncated(p4, Workload.from_rho(p4, rho), w, TruncationConfig(150, 100 * (1 + w2)))
            limits.append(detect_control_limit(policy, "threshold"))
        assert None not in limits and limits == sorted(limits)
        assert limits[0] <= 2 and limits[-1] == 32
