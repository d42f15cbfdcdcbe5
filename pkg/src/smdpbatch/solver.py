"""Relative value iteration, exact policy evaluation and the truncation search."""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import spsolve

from .discretize import DEFAULT_ETA_FRACTION, DtMdp, to_dtmdp
from .exceptions import BatchingError, ConfigError, DomainError, ExhaustionError, StructuralError
from .model import FiniteSmdp, TruncationConfig, build_truncated
from .policies import Policy, detect_control_limit
from .profile import ServiceProfile, Weights, Workload

# recurrent classes up to this size are solved exactly by GTH elimination
GTH_LIMIT = 800
POWER_TOL = 1e-12
POWER_MAX_ITER = 200_000


@dataclass
class SolveReport:
    """Outcome of relative value iteration.

    ``g`` is the optimal average cost per unit time, ``h`` the relative
    values with ``h[ref_state] = 0``.
    """

    g: float
    h: np.ndarray
    iterations: int
    final_span: float
    converged: bool
    eta: float
    epsilon: float
    mults_per_iteration: int
    space_complexity: int
    time_complexity: float

    def to_dict(self) -> dict:
        out = asdict(self)
        out["h"] = [float(v) for v in self.h]
        return out


@dataclass
class EvalReport:
    """Exact long-run performance of a fixed policy on the truncated model.

    Costs are per unit time. ``latency_cost + energy_cost + overflow_cost``
    equals ``g_pi``; ``delta_pi`` equals ``overflow_cost`` plus the holding
    and energy cost accrued while in the overflow state.
    """

    mu: np.ndarray
    g_pi: float
    delta_pi: float
    delta: float
    acceptable: bool
    avg_queue_len: float
    avg_response_time: float
    avg_power: float
    energy_efficiency: float
    latency_cost: float
    energy_cost: float
    overflow_cost: float
    mu_overflow: float
    overflow_stable: bool

    def to_dict(self, include_mu: bool = True) -> dict:
        out = asdict(self)
        if include_mu:
            out["mu"] = [float(v) for v in self.mu]
        else:
            out.pop("mu")
        return out


def _masked(values: np.ndarray, feasible: np.ndarray) -> np.ndarray:
    return np.where(feasible, values, np.inf)


def relative_value_iteration(
    dtmdp: DtMdp,
    epsilon: float = 0.01,
    iter_max: int = 10_000,
    ref_state: int = 0,
):
    """Solve the average-cost optimality equations of ``dtmdp``.

    Iterates ``J <- min_a {c~ + m~ J} - J(ref_state)`` from ``J = 0`` until
    the span of successive differences drops below ``epsilon`` or
    ``iter_max`` updates have been made. Ties in the minimisation go to the
    smallest action.

    Returns
    -------
    policy : Policy
    report : SolveReport
    """
    if not epsilon > 0:
        raise ConfigError(f"epsilon must be > 0, got {epsilon!r}")
    if int(iter_max) != iter_max or iter_max < 1:
        raise ConfigError(f"iter_max must be an integer >= 1, got {iter_max!r}")
    if not 0 <= ref_state < dtmdp.n_states:
        raise DomainError(f"ref_state must lie in [0, {dtmdp.n_states - 1}], got {ref_state}")

    feasible = dtmdp.feasible
    cost = _masked(dtmdp.c_tilde, feasible)
    J = np.zeros(dtmdp.n_states)
    span = math.inf
    n = 0
    while n < iter_max:
        Q = cost + _masked(dtmdp.expected_next(J), feasible)
        J_new = Q.min(axis=1) - J[ref_state]
        diff = J_new - J
        span = float(diff.max() - diff.min())
        J = J_new
        n += 1
        if span < epsilon:
            break

    actions = Q.argmin(axis=1)
    model = dtmdp.model
    mults = model.mults_per_iteration()
    report = SolveReport(
        g=float(J[ref_state]),
        h=J - J[ref_state],
        iterations=n,
        final_span=span,
        converged=span < epsilon,
        eta=dtmdp.eta,
        epsilon=float(epsilon),
        mults_per_iteration=mults,
        space_complexity=model.b_max * model.s_max,
        time_complexity=float(n) * model.b_max * model.s_max**2,
    )
    return Policy(actions, model.b_max), report


def optimality_residual(dtmdp: DtMdp, g: float, h: np.ndarray) -> np.ndarray:
    """``min_a {c~ + m~ h} - h - g`` per state; zero for an exact solution."""
    feasible = dtmdp.feasible
    Q = _masked(dtmdp.c_tilde, feasible) + _masked(dtmdp.expected_next(h), feasible)
    return Q.min(axis=1) - h - g


def _recurrent_classes(P: sp.csr_matrix):
    n_comp, labels = connected_components(P, directed=True, connection="strong")
    coo = P.tocoo()
    leaving = labels[coo.row] != labels[coo.col]
    open_comp = np.zeros(n_comp, dtype=bool)
    open_comp[labels[coo.row[leaving & (coo.data > 0)]]] = True
    closed = [c for c in range(n_comp) if not open_comp[c]]
    return [np.nonzero(labels == c)[0] for c in closed]


def gth_stationary(P: np.ndarray) -> np.ndarray:
    """Stationary vector of an irreducible stochastic matrix by GTH elimination.

    Subtraction-free, hence accurate even for nearly decomposable chains.
    """
    A = np.array(P, dtype=float)
    n = A.shape[0]
    for k in range(n - 1, 0, -1):
        scale = A[k, :k].sum()
        if scale <= 0:
            raise StructuralError("chain is reducible; GTH elimination needs an irreducible matrix")
        A[:k, k] /= scale
        A[:k, :k] += np.outer(A[:k, k], A[k, :k])
    pi = np.zeros(n)
    pi[0] = 1.0
    for k in range(1, n):
        pi[k] = pi[:k] @ A[:k, k]
    return pi / pi.sum()


def _power_stationary(P: sp.csr_matrix) -> np.ndarray:
    n = P.shape[0]
    lazy = (0.5 * (P + sp.identity(n, format="csr"))).T.tocsr()
    pi = np.full(n, 1.0 / n)
    for _ in range(POWER_MAX_ITER):
        nxt = lazy @ pi
        nxt /= nxt.sum()
        if np.abs(nxt - pi).sum() < POWER_TOL:
            return nxt
        pi = nxt
    # slow mixing: fall back to a sparse direct solve with one balance equation replaced
    A = (P.T - sp.identity(n, format="csr")).tolil()
    A[n - 1, :] = np.ones(n)
    b = np.zeros(n)
    b[-1] = 1.0
    pi = spsolve(A.tocsr(), b)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def chain_stationary(P, method: str = "auto") -> np.ndarray:
    """Stationary distribution of a unichain transition matrix.

    Transient states get zero mass. Raises :class:`StructuralError` when
    more than one recurrent class exists.
    """
    P = sp.csr_matrix(P)
    P.eliminate_zeros()
    classes = _recurrent_classes(P)
    if len(classes) != 1:
        raise StructuralError(
            f"chain has {len(classes)} recurrent classes; states {[c.tolist()[:5] for c in classes]}",
            classes=[c.tolist() for c in classes],
        )
    rec = classes[0]
    sub = P[rec][:, rec]
    if method not in ("auto", "gth", "power"):
        raise ConfigError(f"unknown stationary method {method!r}")
    if method == "gth" or (method == "auto" and rec.size <= GTH_LIMIT):
        pi_rec = gth_stationary(sub.toarray())
    else:
        pi_rec = _power_stationary(sub)
    mu = np.zeros(P.shape[0])
    mu[rec] = pi_rec
    return mu


def stationary_distribution(policy: Policy, model: FiniteSmdp, method: str = "auto") -> np.ndarray:
    """Stationary distribution of the embedded chain induced by ``policy``."""
    _check_policy(policy, model)
    return chain_stationary(model.policy_matrix(policy.actions), method)


def _check_policy(policy: Policy, model: FiniteSmdp):
    if policy.n_states != model.n_states:
        raise DomainError(f"policy covers {policy.n_states} states, model has {model.n_states}")
    if policy.b_max > model.b_max:
        raise DomainError(f"policy b_max={policy.b_max} exceeds model b_max={model.b_max}")


def evaluate_policy(policy: Policy, model: FiniteSmdp, delta: float = 1e-3, method: str = "auto") -> EvalReport:
    """Average cost ``g_pi`` and overflow share ``delta_pi`` of a fixed policy.

    Both are ratios of expectations under the embedded stationary
    distribution: cost per epoch over time per epoch.
    """
    mu = stationary_distribution(policy, model, method)
    idx = np.arange(model.n_states)
    acts = policy.actions
    y = model.y[idx, acts]
    c = model.c[idx, acts]
    area = model.holding_area()[idx, acts]
    energy = model.energy_table()[idx, acts]

    time_rate = float(mu @ y)
    lam = model.lam
    w = model.weights
    over = model.overflow
    g_pi = float(mu @ c) / time_rate
    delta_pi = float(mu[over] * c[over]) / time_rate
    avg_q = float(mu @ area) / time_rate
    power = float(mu @ energy) / time_rate
    latency_cost = w.w1 * avg_q / lam
    energy_cost = w.w2 * power
    a_over = int(acts[over])
    overflow_stable = a_over > 0 and lam * float(model.profile.latency(a_over)) < a_over
    return EvalReport(
        mu=mu,
        g_pi=g_pi,
        delta_pi=delta_pi,
        delta=float(delta),
        acceptable=delta_pi < delta,
        avg_queue_len=avg_q,
        avg_response_time=avg_q / lam,
        avg_power=power,
        energy_efficiency=lam / power if power > 0 else math.inf,
        latency_cost=latency_cost,
        energy_cost=energy_cost,
        overflow_cost=model.trunc.c_o * float(mu[over] * y[over]) / time_rate,
        mu_overflow=float(mu[over]),
        overflow_stable=bool(overflow_stable),
    )


@dataclass
class SmaxRecord:
    """One grid point of the truncation search."""

    s_max: int
    c_o: float
    g_rvi: float = math.nan
    g_pi: float = math.nan
    delta_pi: float = math.nan
    iterations: int = 0
    converged: bool = False
    acceptable: bool = False
    space_complexity: int = 0
    time_complexity: float = 0.0
    control_limit: int | None = None
    error: str = ""
    policy: Policy | None = field(default=None, repr=False)

    def to_row(self) -> dict:
        out = asdict(self)
        out.pop("policy")
        return out


def solve_truncated(
    profile: ServiceProfile,
    workload: Workload,
    weights: Weights,
    trunc: TruncationConfig,
    delta: float = 1e-3,
    epsilon: float = 0.01,
    iter_max: int = 10_000,
    eta_fraction: float = DEFAULT_ETA_FRACTION,
):
    """Build, discretise, solve and evaluate one truncation.

    Returns ``(model, policy, solve_report, eval_report)``.
    """
    model = build_truncated(profile, workload, weights, trunc)
    dt = to_dtmdp(model, eta_fraction)
    policy, report = relative_value_iteration(dt, epsilon, iter_max)
    evaluation = evaluate_policy(policy, model, delta)
    return model, policy, report, evaluation


def _grid_point(args) -> SmaxRecord:
    profile, workload, weights, s_max, c_o, delta, epsilon, iter_max, eta_fraction = args
    rec = SmaxRecord(s_max=int(s_max), c_o=float(c_o))
    try:
        model = build_truncated(profile, workload, weights, TruncationConfig(s_max, c_o))
        policy, report = relative_value_iteration(to_dtmdp(model, eta_fraction), epsilon, iter_max)
        rec.g_rvi = report.g
        rec.iterations = report.iterations
        rec.converged = report.converged
        rec.space_complexity = report.space_complexity
        rec.time_complexity = report.time_complexity
        rec.policy = policy
        rec.control_limit = detect_control_limit(policy)
        ev = evaluate_policy(policy, model, delta)
        rec.g_pi = ev.g_pi
        rec.delta_pi = ev.delta_pi
        rec.acceptable = ev.acceptable
    except BatchingError as exc:
        rec.error = f"{type(exc).__name__}: {exc}"
    return rec


def find_min_smax(
    profile: ServiceProfile,
    workload: Workload,
    weights: Weights,
    c_o: float,
    delta: float = 1e-3,
    epsilon: float = 0.01,
    iter_max: int = 10_000,
    smax_grid=None,
    eta_fraction: float = DEFAULT_ETA_FRACTION,
    refine: bool = False,
    exhaustive: bool = False,
    n_jobs: int = 1,
):
    """Smallest truncation level whose solved policy has ``delta_pi < delta``.

    Parameters
    ----------
    smax_grid : sequence of int
        Ascending candidate levels, all ``>= b_max``. Defaults to every
        integer from ``b_max`` to 400.
    refine : bool
        After the first acceptable grid point, rescan every integer between
        it and the previous grid point, so a coarse grid still yields the
        exact minimum (assuming acceptability is monotone in ``s_max``).
    exhaustive : bool
        Evaluate every grid point instead of stopping at the first hit.
    n_jobs : int
        Worker processes for the grid; results keep grid order.

    Returns
    -------
    s_max_star : int
    records : list of SmaxRecord
        One record per evaluated point, in ascending ``s_max``.

    Raises
    ------
    ExhaustionError
        If no evaluated point is acceptable; carries the records.
    """
    grid = list(range(profile.b_max, 401)) if smax_grid is None else [int(s) for s in smax_grid]
    if not grid:
        raise ConfigError("s_max grid is empty")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ConfigError("s_max grid must be strictly ascending")
    if grid[0] < profile.b_max:
        raise ConfigError(f"s_max grid starts at {grid[0]} < b_max={profile.b_max}")

    def task(s):
        return (profile, workload, weights, s, c_o, delta, epsilon, iter_max, eta_fraction)

    records = _scan(grid, task, exhaustive, n_jobs)
    hit = next((r for r in records if r.acceptable), None)
    if hit is not None and refine:
        pos = grid.index(hit.s_max)
        lower = grid[pos - 1] + 1 if pos > 0 else hit.s_max
        fine = list(range(lower, hit.s_max))
        if fine:
            extra = _scan(fine, task, False, n_jobs)
            records = sorted(records + extra, key=lambda r: r.s_max)
            hit = next(r for r in records if r.acceptable)
    if hit is None:
        raise ExhaustionError(
            f"no s_max in [{grid[0]}, {grid[-1]}] reaches delta_pi < {delta} with c_o={c_o}",
            records=records,
        )
    return hit.s_max, records


def _scan(grid, task, exhaustive, n_jobs):
    records = []
    if n_jobs <= 1:
        for s in grid:
            rec = _grid_point(task(s))
            records.append(rec)
            if rec.acceptable and not exhaustive:
                break
        return records
    # parallel: evaluate in chunks of n_jobs so an early hit stops the scan
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        for start in range(0, len(grid), n_jobs):
            chunk = grid[start : start + n_jobs]
            batch = list(pool.map(_grid_point, [task(s) for s in chunk]))
            for rec in batch:
                records.append(rec)
                if rec.acceptable and not exhaustive:
                    return records
    return records
