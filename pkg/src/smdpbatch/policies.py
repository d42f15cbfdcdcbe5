"""Stationary deterministic batching policies: constructors, lookup and CSV storage.

A policy is a table over the truncated state space ``0..s_max`` plus the
overflow state. Queue lengths above ``s_max`` reuse the overflow action, so
the table answers for every queue length a simulation can reach.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, DomainError, PolicyFormatError

OVERFLOW_LABEL = "S_o"


def _max_actions(b_max: int, s_max: int) -> np.ndarray:
    cap = np.minimum(np.arange(s_max + 2), b_max)
    cap[-1] = b_max
    return cap


@dataclass(frozen=True, eq=False)
class Policy:
    """Batch size chosen in each state; ``0`` means wait for the next arrival.

    Parameters
    ----------
    actions : array-like of int, length ``s_max + 2``
        Entry ``s`` is the action at queue length ``s``; the last entry is
        the overflow action.
    b_max : int
        Largest batch the server accepts.
    """

    actions: np.ndarray
    b_max: int

    def __post_init__(self):
        acts = np.array(self.actions, dtype=np.int64).ravel()
        if acts.size < 2:
            raise DomainError("a policy needs at least one regular state and the overflow state")
        if int(self.b_max) != self.b_max or self.b_max < 1:
            raise DomainError(f"b_max must be an integer >= 1, got {self.b_max!r}")
        cap = _max_actions(int(self.b_max), acts.size - 2)
        bad = np.nonzero((acts < 0) | (acts > cap))[0]
        if bad.size:
            s = int(bad[0])
            raise DomainError(
                f"infeasible action {int(acts[s])} in state {self._label(s, acts.size)}; "
                f"allowed 0..{int(cap[s])}"
            )
        acts.flags.writeable = False
        object.__setattr__(self, "actions", acts)
        object.__setattr__(self, "b_max", int(self.b_max))

    @staticmethod
    def _label(s, n):
        return OVERFLOW_LABEL if s == n - 1 else str(s)

    @property
    def s_max(self) -> int:
        return self.actions.size - 2

    @property
    def n_states(self) -> int:
        return self.actions.size

    @property
    def overflow_action(self) -> int:
        return int(self.actions[-1])

    def action_for(self, queue_len: int) -> int:
        """Action at an untruncated queue length; lengths above ``s_max`` use the overflow action."""
        if queue_len < 0:
            raise DomainError(f"queue length must be >= 0, got {queue_len}")
        if queue_len > self.s_max:
            return self.overflow_action
        return int(self.actions[queue_len])

    def __eq__(self, other):
        if not isinstance(other, Policy):
            return NotImplemented
        return self.b_max == other.b_max and np.array_equal(self.actions, other.actions)

    def __hash__(self):
        return hash((self.b_max, self.actions.tobytes()))

    def __len__(self):
        return self.actions.size

    def __repr__(self):
        head = ", ".join(str(a) for a in self.actions[:12])
        more = ", ..." if self.actions.size > 12 else ""
        return f"Policy(b_max={self.b_max}, s_max={self.s_max}, actions=[{head}{more}])"


def make_work_conserving(b_max: int, s_max: int) -> Policy:
    """Serve ``min(s, b_max)`` whenever the queue is non-empty."""
    return make_control_limit(1, b_max, s_max)


def make_static(b: int, b_max: int, s_max: int) -> Policy:
    """Wait until ``b`` requests are queued, then always serve exactly ``b``."""
    if int(b) != b or not 1 <= b <= b_max:
        raise DomainError(f"static batch size must lie in 1..{b_max}, got {b!r}")
    acts = np.where(np.arange(s_max + 2) >= b, int(b), 0)
    acts[-1] = b
    return Policy(acts, b_max)


def make_control_limit(limit: int, b_max: int, s_max: int) -> Policy:
    """Wait below ``limit``, serve the largest feasible batch from ``limit`` on.

    The overflow state counts as ``s_max`` requests.
    """
    if int(limit) != limit or limit < 1:
        raise DomainError(f"control limit must be an integer >= 1, got {limit!r}")
    q = np.minimum(np.arange(s_max + 2), s_max)
    acts = np.where(q >= limit, np.minimum(q, b_max), 0)
    return Policy(acts, b_max)


def detect_control_limit(policy: Policy, structure: str = "maximal", include_overflow: bool = True):
    """Threshold ``l`` of a control-limit policy, or ``None`` if the policy has no such shape.

    Parameters
    ----------
    structure : {"maximal", "threshold"}
        ``"maximal"`` requires ``pi(s) = min(s, b_max)`` for every ``s >= l``.
        ``"threshold"`` only requires ``pi(s) > 0`` there, so batches smaller
        than the maximum are allowed above the limit.
    include_overflow : bool
        Whether the overflow action must fit the pattern as well, with the
        overflow state standing for ``s_max`` requests.
    """
    if structure not in ("maximal", "threshold"):
        raise ConfigError(f"structure must be 'maximal' or 'threshold', got {structure!r}")
    acts = policy.actions
    s_max = policy.s_max
    q = np.minimum(np.arange(acts.size), s_max)
    if not include_overflow:
        acts, q = acts[:-1], q[:-1]
    serving = np.nonzero(acts[: s_max + 1] > 0)[0]
    if serving.size == 0:
        return None
    limit = int(serving[0])
    above = q >= limit
    if np.any(acts[~above] != 0):
        return None
    if structure == "maximal":
        ok = np.array_equal(acts[above], np.minimum(q[above], policy.b_max))
    else:
        ok = bool(np.all(acts[above] > 0))
    return limit if ok else None


def save_policy(policy: Policy, path, config_hash: str | None = None) -> None:
    """Write ``s,action`` rows; the overflow state is labelled ``S_o``."""
    buf = io.StringIO()
    if config_hash:
        buf.write(f"# config_sha256={config_hash}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["s", "action"])
    for s, a in enumerate(policy.actions):
        writer.writerow([Policy._label(s, policy.n_states), int(a)])
    Path(path).write_text(buf.getvalue())


def chart_rows(rho: float, w1: float, w2: float, policy: Policy):
    """Rows ``(rho, w1, w2, s, action)`` of the policy chart layout."""
    for s, a in enumerate(policy.actions):
        yield [rho, w1, w2, Policy._label(s, policy.n_states), int(a)]


def _read_rows(path):
    text = Path(path).read_text()
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise PolicyFormatError(f"{path}: empty policy file")
    return list(csv.DictReader(lines))


def _parse_state(label, path):
    if label == OVERFLOW_LABEL:
        return None
    try:
        return int(label)
    except ValueError:
        raise PolicyFormatError(f"{path}: bad state label {label!r}") from None


def load_policy(path, b_max: int, rho=None, w1=None, w2=None) -> Policy:
    """Read a policy CSV.

    Accepts the plain ``s,action`` layout and the chart layout
    ``rho,w1,w2,s,action``; the latter needs ``rho``, ``w1`` and ``w2`` to
    pick one slice.
    """
    rows = _read_rows(path)
    fields = set(rows[0].keys()) if rows else set()
    if not {"s", "action"} <= fields:
        raise PolicyFormatError(f"{path}: expected columns s,action (got {sorted(fields)})")
    if {"rho", "w1", "w2"} <= fields:
        if rho is None or w1 is None or w2 is None:
            raise PolicyFormatError(f"{path}: chart file needs rho, w1 and w2 to select a slice")
        rows = [
            r for r in rows
            if np.isclose(float(r["rho"]), rho) and np.isclose(float(r["w1"]), w1) and np.isclose(float(r["w2"]), w2)
        ]
        if not rows:
            raise PolicyFormatError(f"{path}: no rows for rho={rho}, w1={w1}, w2={w2}")

    regular = {}
    overflow = None
    for r in rows:
        s = _parse_state(r["s"], path)
        try:
            a = int(r["action"])
        except ValueError:
            raise PolicyFormatError(f"{path}: bad action {r['action']!r} in state {r['s']}") from None
        if s is None:
            overflow = a
        elif s in regular:
            raise PolicyFormatError(f"{path}: state {s} listed twice")
        else:
            regular[s] = a
    if overflow is None:
        raise PolicyFormatError(f"{path}: missing overflow state {OVERFLOW_LABEL}")
    if not regular:
        raise PolicyFormatError(f"{path}: no regular states")
    s_max = max(regular)
    missing = sorted(set(range(s_max + 1)) - set(regular))
    if missing:
        raise PolicyFormatError(f"{path}: missing states {missing[:10]}")
    acts = [regular[s] for s in range(s_max + 1)] + [overflow]
    try:
        return Policy(np.array(acts), b_max)
    except DomainError as exc:
        raise PolicyFormatError(f"{path}: {exc}") from exc
