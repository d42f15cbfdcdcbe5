"""Model-free RVI Q-learning on a sampled discrete-time batching MDP.

Rewards are negated cost rates ``-c~(s, a)`` so the usual max-form update
applies. The bias subtracted at every step is ``Q(0, 0)``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .discretize import DtMdp
from .exceptions import ConfigError, DomainError
from .policies import Policy

REF_STATE = 0
REF_ACTION = 0
# uniforms are drawn in blocks of this many steps to bound memory
BLOCK = 1 << 20


@dataclass
class QTable:
    """Q-values over (state, action); infeasible pairs hold NaN and are never read."""

    q: np.ndarray
    n_feasible: np.ndarray
    reference: tuple = (REF_STATE, REF_ACTION)

    @classmethod
    def zeros(cls, env: DtMdp) -> "QTable":
        q = np.where(env.feasible, 0.0, np.nan)
        return cls(q, env.feasible.sum(axis=1).astype(np.int64))

    def greedy_actions(self) -> np.ndarray:
        return _greedy(self.q, self.n_feasible)

    def greedy_policy(self, b_max: int) -> Policy:
        return Policy(self.greedy_actions(), b_max)


@dataclass
class QLearnConfig:
    """Training parameters.

    Parameters
    ----------
    epsilon0 : float
        Base exploration probability in (0, 1]; step ``n`` explores with
        probability ``epsilon0 / sqrt(n)``.
    iterations : int
        Number of transitions sampled along the single trajectory.
    seed : int
        Seed of the numpy generator that drives every random choice.
    snapshot_every : int, optional
        Record the greedy policy every this many steps.
    snapshot_at : sequence of int, optional
        Additional explicit snapshot steps.
    step_size : {"global", "visit"}
        ``"global"`` uses ``1/sqrt(n + 2)`` with ``n`` the step index;
        ``"visit"`` uses the same schedule in the visit count of the updated
        pair, the usual choice for asynchronous stochastic approximation.
    exploration_clock : {"step", "state"}
        Whether ``n`` in the exploration probability counts all steps or
        only the visits to the current state.
    """

    epsilon0: float = 0.5
    iterations: int = 1_000_000
    seed: int = 0
    step_size: str = "global"
    exploration_clock: str = "step"
    snapshot_every: int | None = None
    snapshot_at: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if not 0 < self.epsilon0 <= 1:
            raise ConfigError(f"epsilon0 must lie in (0, 1], got {self.epsilon0!r}")
        if int(self.iterations) != self.iterations or self.iterations < 1:
            raise ConfigError(f"iterations must be an integer >= 1, got {self.iterations!r}")
        if self.step_size not in ("global", "visit"):
            raise ConfigError(f"step_size must be 'global' or 'visit', got {self.step_size!r}")
        if self.exploration_clock not in ("step", "state"):
            raise ConfigError(f"exploration_clock must be 'step' or 'state', got {self.exploration_clock!r}")
        if self.snapshot_every is not None and self.snapshot_every < 1:
            raise ConfigError("snapshot_every must be >= 1")
        self.iterations = int(self.iterations)
        self.snapshot_at = tuple(int(n) for n in self.snapshot_at)

    def snapshot_steps(self) -> list[int]:
        steps = {n for n in self.snapshot_at if 1 <= n <= self.iterations}
        if self.snapshot_every:
            steps.update(range(self.snapshot_every, self.iterations + 1, self.snapshot_every))
        steps.add(self.iterations)
        return sorted(steps)


@dataclass
class Snapshot:
    """Greedy policy after ``iteration`` steps; ``explorations`` counts random actions so far."""

    iteration: int
    policy: Policy
    explorations: int = 0


@njit(cache=True)
def _greedy(q, n_feasible):
    S = q.shape[0]
    out = np.zeros(S, dtype=np.int64)
    for s in range(S):
        best = q[s, 0]
        arg = 0
        for a in range(1, n_feasible[s]):
            if q[s, a] > best:
                best = q[s, a]
                arg = a
        out[s] = arg
    return out


@njit(cache=True)
def _row_max(q, s, n):
    best = q[s, 0]
    for b in range(1, n):
        if q[s, b] > best:
            best = q[s, b]
    return best


@njit(cache=True)
def _draw(cum, row, u):
    # first index whose cumulative probability exceeds u
    lo, hi = 0, cum.shape[1] - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if cum[row, mid] > u:
            hi = mid
        else:
            lo = mid + 1
    return lo


@njit(cache=True)
def _train_block(q, visits, state_visits, explored, n_feasible, cum, reward, s, n0, uniforms, epsilon0, per_visit,
                 per_state):
    A = q.shape[1]
    for i in range(uniforms.shape[0]):
        n = n0 + i + 1
        nf = n_feasible[s]
        state_visits[s] += 1
        t = state_visits[s] if per_state else n
        if uniforms[i, 0] <= epsilon0 / np.sqrt(t):
            a = min(int(uniforms[i, 1] * nf), nf - 1)
            explored[0] += 1
        else:
            a = 0
            best = q[s, 0]
            for b in range(1, nf):
                if q[s, b] > best:
                    best = q[s, b]
                    a = b
        s_next = _draw(cum, s * A + a, uniforms[i, 2])
        visits[s, a] += 1
        k = visits[s, a] if per_visit else n
        gamma = 1.0 / np.sqrt(k + 2.0)
        target = reward[s, a] + _row_max(q, s_next, n_feasible[s_next]) - q[0, 0]
        q[s, a] += gamma * (target - q[s, a])
        s = s_next
    return s


def _cumulative_table(env: DtMdp) -> np.ndarray:
    S, A = env.n_states, env.n_actions
    cum = np.ones((S * A, S))
    for s in range(S):
        for a in env.feasible_actions(s):
            row = np.clip(env.transition_row(s, a), 0.0, None)
            c = np.cumsum(row)
            c /= c[-1]
            cum[s * A + a] = c
    return cum


def sample_transition(env: DtMdp, s: int, a: int, rng: np.random.Generator):
    """Draw ``s'`` from ``m~(. | s, a)`` and return ``(s', -c~(s, a))``."""
    if not (0 <= s < env.n_states) or a not in env.feasible_actions(s):
        raise DomainError(f"action {a} is infeasible in state {s}")
    row = np.clip(env.transition_row(s, a), 0.0, None)
    s_next = int(rng.choice(env.n_states, p=row / row.sum()))
    return s_next, -float(env.c_tilde[s, a])


def q_update(table: QTable, s: int, a: int, s_next: int, reward: float, learning_rate: float) -> float:
    """Apply one RVI Q-learning step in place and return the new ``Q(s, a)``."""
    q = table.q
    best = np.max(q[s_next, : table.n_feasible[s_next]])
    r0, a0 = table.reference
    q[s, a] += learning_rate * (reward + best - q[r0, a0] - q[s, a])
    return float(q[s, a])


def train(env: DtMdp, config: QLearnConfig, return_table: bool = False):
    """Run RVI Q-learning along one trajectory from a random start state.

    Returns
    -------
    policy : Policy
        Greedy policy of the final table.
    snapshots : list of Snapshot
        Greedy policies at the configured steps (the last one is the final policy).
    table : QTable
        Only when ``return_table`` is true.
    """
    rng = np.random.default_rng(config.seed)
    table = QTable.zeros(env)
    q = np.where(env.feasible, table.q, 0.0)
    cum = _cumulative_table(env)
    reward = np.where(env.feasible, -env.c_tilde, 0.0)
    b_max = env.model.b_max
    visits = np.zeros(q.shape, dtype=np.int64)
    per_visit = config.step_size == "visit"
    state_visits = np.zeros(q.shape[0], dtype=np.int64)
    explored = np.zeros(1, dtype=np.int64)
    per_state = config.exploration_clock == "state"

    s = int(rng.integers(env.n_states))
    snapshots = []
    done = 0
    for stop in config.snapshot_steps():
        while done < stop:
            k = min(BLOCK, stop - done)
            s = _train_block(
                q, visits, state_visits, explored, table.n_feasible, cum, reward, s, done,
                rng.random((k, 3)), config.epsilon0, per_visit, per_state,
            )
            done += k
        snapshots.append(Snapshot(done, Policy(_greedy(q, table.n_feasible), b_max), int(explored[0])))

    table.q = np.where(env.feasible, q, np.nan)
    policy = snapshots[-1].policy
    if return_table:
        return policy, snapshots, table
    return policy, snapshots


def policy_agreement(p1: Policy, p2: Policy, weights=None) -> float:
    """Fraction of states, optionally weighted, on which two policies pick the same action."""
    a1 = np.asarray(getattr(p1, "actions", p1))
    a2 = np.asarray(getattr(p2, "actions", p2))
    if a1.shape != a2.shape:
        raise DomainError(f"policies cover different state counts: {a1.size} vs {a2.size}")
    same = (a1 == a2).astype(float)
    if weights is None:
        return float(same.mean())
    w = np.asarray(weights, dtype=float)
    if w.shape != a1.shape or np.any(w < 0) or w.sum() <= 0:
        raise DomainError("weights must be non-negative, not all zero, one per state")
    return float(same @ w / w.sum())


def write_snapshots(snapshots, path, config_hash: str | None = None) -> None:
    """CSV of ``iteration, state, action`` for every snapshot."""
    with open(Path(path), "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_sha256={config_hash}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iteration", "state", "action"])
        for snap in snapshots:
            n = snap.policy.n_states
            for s, a in enumerate(snap.policy.actions):
                writer.writerow([snap.iteration, "S_o" if s == n - 1 else s, int(a)])
