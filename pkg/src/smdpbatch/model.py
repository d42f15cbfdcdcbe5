"""Semi-Markov decision model of the batch queue and its finite truncation.

States are queue lengths ``0..s_max`` plus one aggregated overflow state,
stored at index ``s_max + 1``. The overflow state behaves as if it held
``s_max`` requests and carries an extra cost rate ``c_o`` while occupied.
Actions are batch sizes, ``0`` meaning wait for the next arrival.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.stats import poisson

from .exceptions import ConfigError, DomainError, StabilityError
from .profile import ServiceProfile, Weights, Workload, poisson_pmf, traffic_intensity

# Poisson terms whose upper tail falls below this are dropped from the
# banded transition rows; the dropped mass goes to the overflow state.
SUPPORT_TOL = 1e-13
# dense expectation operator is used while S*A*S stays below this many entries
DENSE_LIMIT = 6_000_000


@dataclass(frozen=True)
class TruncationConfig:
    s_max: int
    c_o: float = 0.0

    def __post_init__(self):
        if int(self.s_max) != self.s_max or self.s_max < 1:
            raise ConfigError(f"s_max must be a positive integer, got {self.s_max!r}")
        object.__setattr__(self, "s_max", int(self.s_max))
        if not (np.isfinite(self.c_o) and self.c_o >= 0):
            raise ConfigError(f"c_o must be finite and >= 0, got {self.c_o!r}")


def overflow_index(s_max: int) -> int:
    return s_max + 1


def queue_length(s: int, s_max: int) -> int:
    """Number of requests a state stands for; the overflow state counts as ``s_max``."""
    return s_max if s == s_max + 1 else s


def _check_state(s, s_max):
    if int(s) != s or not 0 <= s <= s_max + 1:
        raise DomainError(f"state must be an integer index in [0, {s_max + 1}], got {s!r}")
    return int(s)


def feasible_actions(s: int, b_max: int, s_max: int) -> range:
    """Batch sizes allowed in state ``s``: ``0..min(s, b_max)``, and ``0..b_max`` at overflow."""
    s = _check_state(s, s_max)
    if s == s_max + 1:
        return range(b_max + 1)
    return range(min(s, b_max) + 1)


def _check_action(s, a, b_max, s_max):
    allowed = feasible_actions(s, b_max, s_max)
    if int(a) != a or a not in allowed:
        raise DomainError(
            f"action {a!r} is infeasible in state {s}; allowed actions are 0..{allowed[-1]}"
        )
    return int(a)


def sojourn_time(a: int, profile: ServiceProfile, workload: Workload) -> float:
    """Expected time to the next decision epoch: ``1/lam`` when waiting, ``tau[a]`` otherwise."""
    if a == 0:
        return 1.0 / workload.lam
    return float(profile.latency(a))


def _base_cost(q, a, profile, workload, weights):
    lam = workload.lam
    if a == 0:
        return weights.w1 * q / lam**2
    tau = float(profile.latency(a))
    return weights.w2 * float(profile.energy(a)) + weights.w1 * (q / lam * tau + 0.5 * tau * tau)


def stage_cost(
    s: int,
    a: int,
    profile: ServiceProfile,
    workload: Workload,
    weights: Weights,
    trunc: TruncationConfig,
) -> float:
    """Expected weighted cost accumulated until the next decision epoch.

    Holding cost is charged at rate ``w1/lam`` per request in the system and
    energy at ``w2`` per mJ. The overflow state adds ``c_o * y(s, a)``.
    """
    s = _check_state(s, trunc.s_max)
    a = _check_action(s, a, profile.b_max, trunc.s_max)
    cost = _base_cost(queue_length(s, trunc.s_max), a, profile, workload, weights)
    if s == trunc.s_max + 1:
        cost += trunc.c_o * sojourn_time(a, profile, workload)
    return cost


def transition_row(
    s: int,
    a: int,
    profile: ServiceProfile,
    workload: Workload,
    trunc: TruncationConfig,
) -> np.ndarray:
    """Distribution of the next state after choosing ``a`` in ``s``.

    Computed directly from the Poisson law without support truncation; the
    probability of landing above ``s_max`` is lumped onto the overflow state.
    """
    s_max = trunc.s_max
    s = _check_state(s, s_max)
    a = _check_action(s, a, profile.b_max, s_max)
    row = np.zeros(s_max + 2)
    over = s_max + 1
    q = queue_length(s, s_max)
    if a == 0:
        row[q + 1 if q < s_max else over] = 1.0
        return row
    mean = workload.lam * float(profile.latency(a))
    n = s_max - q + a
    pmf, tail = poisson_pmf(mean, n)
    row[q - a : s_max + 1] = pmf
    row[over] = tail
    return row


@dataclass(frozen=True, eq=False)
class FiniteSmdp:
    """Materialised truncated model.

    Tables are indexed ``[state, action]``; infeasible entries of ``y`` and
    ``c`` are NaN. Transition rows are not stored densely: each action keeps
    one Poisson vector (``pmf[a]``) and its survival function, from which any
    row is rebuilt.
    """

    profile: ServiceProfile
    workload: Workload
    weights: Weights
    trunc: TruncationConfig
    y: np.ndarray
    c: np.ndarray
    feasible: np.ndarray
    pmf: np.ndarray
    survival: np.ndarray
    support: np.ndarray

    @property
    def s_max(self) -> int:
        return self.trunc.s_max

    @property
    def b_max(self) -> int:
        return self.profile.b_max

    @property
    def n_states(self) -> int:
        return self.s_max + 2

    @property
    def n_actions(self) -> int:
        return self.b_max + 1

    @property
    def overflow(self) -> int:
        return self.s_max + 1

    @property
    def lam(self) -> float:
        return self.workload.lam

    def feasible_actions(self, s: int) -> range:
        return feasible_actions(s, self.b_max, self.s_max)

    def max_action(self) -> np.ndarray:
        """Largest feasible action per state."""
        return self.feasible.sum(axis=1) - 1

    def _band(self, s, a):
        """Destination offset, band probabilities and overflow lump of row (s, a), a >= 1."""
        q = queue_length(s, self.s_max)
        n = self.s_max - q + a
        last = min(n, int(self.support[a]) - 1)
        probs = self.pmf[a, : last + 1]
        lump = float(self.survival[a, last])
        return q - a, probs, lump

    def lump(self, s: int, a: int) -> float:
        """Probability mass sent to the overflow state from (s, a)."""
        _check_action(_check_state(s, self.s_max), a, self.b_max, self.s_max)
        if a == 0:
            q = queue_length(s, self.s_max)
            return 1.0 if (s == self.overflow or q == self.s_max) else 0.0
        return self._band(s, a)[2]

    def transition_row(self, s: int, a: int) -> np.ndarray:
        """Dense next-state distribution of (s, a) as used by the solvers."""
        s = _check_state(s, self.s_max)
        a = _check_action(s, a, self.b_max, self.s_max)
        row = np.zeros(self.n_states)
        if a == 0:
            q = queue_length(s, self.s_max)
            row[q + 1 if (q < self.s_max and s != self.overflow) else self.overflow] = 1.0
            return row
        start, probs, lump = self._band(s, a)
        row[start : start + len(probs)] = probs
        row[self.overflow] += lump
        return row

    @cached_property
    def operator(self) -> sp.csr_matrix:
        """Stacked transition operator, row ``s * n_actions + a`` holds m'(. | s, a).

        Rows of infeasible pairs are empty.
        """
        S, A = self.n_states, self.n_actions
        indptr = [0]
        indices = []
        data = []
        for s in range(S):
            for a in range(A):
                if not self.feasible[s, a]:
                    indptr.append(indptr[-1])
                    continue
                if a == 0:
                    q = queue_length(s, self.s_max)
                    dest = q + 1 if (q < self.s_max and s != self.overflow) else self.overflow
                    indices.append(np.array([dest]))
                    data.append(np.array([1.0]))
                else:
                    start, probs, lump = self._band(s, a)
                    indices.append(np.append(np.arange(start, start + len(probs)), self.overflow))
                    data.append(np.append(probs, lump))
                indptr.append(indptr[-1] + len(indices[-1]))
        op = sp.csr_matrix(
            (np.concatenate(data), np.concatenate(indices), np.array(indptr)), shape=(S * A, S)
        )
        op.sum_duplicates()
        return op

    @cached_property
    def _dense_operator(self):
        S, A = self.n_states, self.n_actions
        if S * A * S > DENSE_LIMIT:
            return None
        return self.operator.toarray()

    def expected_next(self, values: np.ndarray) -> np.ndarray:
        """``sum_j m'(j|s,a) values[j]`` for every (s, a); zero on infeasible pairs."""
        dense = self._dense_operator
        flat = dense @ values if dense is not None else self.operator @ values
        return flat.reshape(self.n_states, self.n_actions)

    def policy_matrix(self, actions) -> sp.csr_matrix:
        """Transition matrix of the chain induced by a deterministic policy."""
        actions = np.asarray(actions, dtype=int)
        if actions.shape != (self.n_states,):
            raise DomainError(f"policy must have {self.n_states} entries, got {actions.shape}")
        idx = np.arange(self.n_states)
        if np.any(actions < 0) or np.any(actions >= self.n_actions) or not np.all(self.feasible[idx, actions]):
            bad = [int(s) for s in idx if not (0 <= actions[s] < self.n_actions and self.feasible[s, actions[s]])]
            raise DomainError(f"policy has infeasible actions in states {bad[:10]}")
        return self.operator[idx * self.n_actions + actions]

    def mults_per_iteration(self) -> int:
        """Multiplications of one dense value-iteration sweep, sum_s |A_s| * |S'|."""
        return int(self.feasible.sum()) * self.n_states

    def holding_area(self) -> np.ndarray:
        """Expected integral of the number in system over one epoch, per (s, a)."""
        q = np.minimum(np.arange(self.n_states), self.s_max)[:, None].astype(float)
        a = np.arange(self.n_actions)[None, :]
        tau = self.profile.latency(a)
        area = np.where(a == 0, q / self.lam, q * tau + 0.5 * self.lam * tau * tau)
        return np.where(self.feasible, area, np.nan)

    def energy_table(self) -> np.ndarray:
        a = np.arange(self.n_actions)[None, :]
        e = np.where(a == 0, 0.0, self.profile.energy(a)) * np.ones((self.n_states, 1))
        return np.where(self.feasible, e, np.nan)

    def dump_csv(self, path) -> None:
        """Debug dump of (s, a, y, c, lump_to_So) for every feasible pair."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["s", "a", "y", "c", "lump_to_So"])
            for s in range(self.n_states):
                label = "S_o" if s == self.overflow else s
                for a in self.feasible_actions(s):
                    writer.writerow([label, a, repr(float(self.y[s, a])), repr(float(self.c[s, a])), repr(self.lump(s, a))])


def _support_length(survival_row: np.ndarray, tol: float) -> int:
    """Number of leading Poisson terms kept: first k with P(N > k - 1) < tol."""
    below = np.nonzero(survival_row < tol)[0]
    return int(below[0]) + 1 if below.size else len(survival_row)


def build_truncated(
    profile: ServiceProfile,
    workload: Workload,
    weights: Weights,
    trunc: TruncationConfig,
    support_tol: float = SUPPORT_TOL,
) -> FiniteSmdp:
    """Assemble sojourn, cost and transition tables of the truncated model."""
    ti = traffic_intensity(profile, workload)
    if not ti.stable:
        raise StabilityError(f"traffic intensity rho={ti.rho:.6g} >= 1; the queue cannot be stabilised")
    if trunc.s_max < profile.b_max:
        raise ConfigError(f"s_max={trunc.s_max} must be >= b_max={profile.b_max}")

    s_max, b_max = trunc.s_max, profile.b_max
    S, A = s_max + 2, b_max + 1
    over = s_max + 1
    states = np.arange(S)
    q = np.minimum(states, s_max)
    amax = np.where(states == over, b_max, np.minimum(states, b_max))
    feasible = np.arange(A)[None, :] <= amax[:, None]

    lam = workload.lam
    a_row = np.arange(A)[None, :]
    tau = profile.latency(a_row)
    y = np.where(a_row == 0, 1.0 / lam, tau) * np.ones((S, 1))
    base = np.where(
        a_row == 0,
        weights.w1 * q[:, None] / lam**2,
        weights.w2 * profile.energy(a_row) + weights.w1 * (q[:, None] / lam * tau + 0.5 * tau * tau),
    )
    c = base + np.where(states == over, trunc.c_o, 0.0)[:, None] * y
    y = np.where(feasible, y, np.nan)
    c = np.where(feasible, c, np.nan)

    k = np.arange(s_max + 1)
    pmf = np.zeros((A, s_max + 1))
    survival = np.zeros((A, s_max + 1))
    support = np.ones(A, dtype=int)
    pmf[0, 0] = 1.0
    for a in range(1, A):
        mean = lam * float(profile.latency(a))
        pmf[a], _ = poisson_pmf(mean, s_max)
        survival[a] = poisson.sf(k, mean)
        support[a] = _support_length(survival[a], support_tol)

    for arr in (y, c, feasible, pmf, survival, support):
        arr.flags.writeable = False
    return FiniteSmdp(profile, workload, weights, trunc, y, c, feasible, pmf, survival, support)
