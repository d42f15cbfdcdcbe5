"""Map the truncated continuous-time model to an equivalent discrete-time MDP.

With step ``eta``, costs become rates ``c/y`` and transitions become

    m~(j|s,a) = eta * m'(j|s,a) / y(s,a)            for j != s
    m~(s|s,a) = 1 + eta * (m'(s|s,a) - 1) / y(s,a)

Both models share the optimal average cost per unit time as long as
``eta`` stays below ``y/(1 - m'(s|s,a))`` for every pair with a self-loop
probability below one.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import BatchingError, ConfigError
from .model import FiniteSmdp

DEFAULT_ETA_FRACTION = 0.99
# diagonal entries this close outside [0, 1] are treated as rounding noise
DIAGONAL_SLACK = 1e-12


def eta_bound(model: FiniteSmdp) -> float:
    """Supremum of admissible ``eta`` for the model.

    The minimum over ``1/lam`` (waiting), ``tau[a]/(1 - p_a[a])`` (serving
    from a regular state) and ``tau[a]/sum_{i<=a} p_i[a]`` (serving from the
    overflow state).
    """
    bound = 1.0 / model.lam
    for a in range(1, model.n_actions):
        tau = float(model.profile.latency(a))
        stay_regular = model.pmf[a, a] if a < int(model.support[a]) else 0.0
        leave_overflow = 1.0 - float(model.survival[a, a])
        bound = min(bound, tau / (1.0 - stay_regular))
        if leave_overflow > 0:
            bound = min(bound, tau / leave_overflow)
    return bound


@dataclass(frozen=True, eq=False)
class DtMdp:
    """Discrete-time counterpart of a :class:`FiniteSmdp`.

    Transitions are kept implicit: ``m~ = I + (eta/y) (m' - I)`` row by row,
    so the same compact storage serves both models.
    """

    model: FiniteSmdp
    eta: float
    c_tilde: np.ndarray

    @property
    def n_states(self) -> int:
        return self.model.n_states

    @property
    def n_actions(self) -> int:
        return self.model.n_actions

    @property
    def feasible(self) -> np.ndarray:
        return self.model.feasible

    def feasible_actions(self, s: int) -> range:
        return self.model.feasible_actions(s)

    def expected_next(self, values: np.ndarray) -> np.ndarray:
        """``sum_j m~(j|s,a) values[j]`` for every (s, a); NaN on infeasible pairs."""
        prime = self.model.expected_next(values)
        return values[:, None] + (self.eta / self.model.y) * (prime - values[:, None])

    def transition_row(self, s: int, a: int) -> np.ndarray:
        row = self.model.transition_row(s, a)
        y = self.model.y[s, a]
        out = self.eta * row / y
        out[s] = 1.0 + self.eta * (row[s] - 1.0) / y
        return out

    def transition_matrices(self) -> np.ndarray:
        """Dense ``[a, s, j]`` array of m~; infeasible rows are zero. Small models only."""
        S, A = self.n_states, self.n_actions
        out = np.zeros((A, S, S))
        for s in range(S):
            for a in self.feasible_actions(s):
                out[a, s] = self.transition_row(s, a)
        return out


def _self_loop(model: FiniteSmdp) -> np.ndarray:
    S = model.n_states
    idx = np.arange(S)
    flat = model.operator
    rows = (idx[:, None] * model.n_actions + np.arange(model.n_actions)[None, :]).ravel()
    cols = np.repeat(idx, model.n_actions)
    return np.asarray(flat[rows, cols]).reshape(S, model.n_actions)


def to_dtmdp(model: FiniteSmdp, eta_fraction: float = DEFAULT_ETA_FRACTION) -> DtMdp:
    """Discretise ``model`` with ``eta = eta_fraction * eta_bound(model)``."""
    if not 0 < eta_fraction < 1:
        raise ConfigError(f"eta_fraction must lie in (0, 1), got {eta_fraction!r}")
    eta = eta_fraction * eta_bound(model)

    stay = _self_loop(model)
    with np.errstate(invalid="ignore"):
        diag = 1.0 + eta * (stay - 1.0) / model.y
    diag = diag[model.feasible]
    low, high = diag.min(), diag.max()
    if low < -DIAGONAL_SLACK or high > 1.0 + DIAGONAL_SLACK:
        raise BatchingError(
            f"discretised self-loop probabilities fall outside [0, 1] (min {low:.3g}, max {high:.3g}); "
            "eta violates its bound"
        )

    c_tilde = model.c / model.y
    c_tilde.flags.writeable = False
    return DtMdp(model=model, eta=eta, c_tilde=c_tilde)
