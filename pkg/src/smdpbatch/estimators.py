"""scikit-learn style front ends.

``fit`` takes a service profile (or latency/energy samples for the
regressor); ``predict`` maps queue lengths to batch sizes.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import qlearn
from ._validation import check_int, check_positive, check_profile, check_queue_lengths
from .discretize import DEFAULT_ETA_FRACTION, to_dtmdp
from .exceptions import ConfigError, FitError
from .model import TruncationConfig, build_truncated
from .profile import Weights, Workload, fit_linear_profile
from .solver import evaluate_policy, find_min_smax, relative_value_iteration


def _workload(profile, lam, rho) -> Workload:
    if (lam is None) == (rho is None):
        raise ConfigError("set exactly one of lam and rho")
    if lam is not None:
        return Workload(check_positive(lam, "lam"))
    return Workload.from_rho(profile, check_positive(rho, "rho"))


class _PolicyPredictor:
    def predict(self, X) -> np.ndarray:
        """Batch size for each queue length in ``X`` (0 means wait)."""
        check_is_fitted(self, "policy_")
        q = check_queue_lengths(X)
        acts = self.policy_.actions
        return acts[np.minimum(q, self.policy_.s_max + 1)].copy()


class SMDPBatchScheduler(_PolicyPredictor, BaseEstimator):
    """Optimal batching policy by relative value iteration on the truncated model.

    Parameters
    ----------
    rho, lam : float
        Load, as traffic intensity or arrival rate (requests/ms); give one.
    w1, w2 : float
        Latency and energy weights.
    s_max : int or "auto"
        Truncation level. ``"auto"`` searches for the smallest level whose
        overflow share stays below ``delta``.
    c_o : float
        Cost rate charged in the overflow state.
    delta, epsilon, iter_max, eta_fraction
        Acceptance tolerance, span tolerance, iteration cap and step fraction.

    Attributes
    ----------
    policy_ : Policy
    solve_report_ : SolveReport
    eval_report_ : EvalReport
    model_ : FiniteSmdp
    truncation_records_ : list of SmaxRecord
        Only when ``s_max="auto"``.
    """

    def __init__(self, rho=None, lam=None, w1=1.0, w2=0.0, s_max="auto", c_o=100.0,
                 delta=1e-3, epsilon=0.01, iter_max=10_000, eta_fraction=DEFAULT_ETA_FRACTION):
        self.rho = rho
        self.lam = lam
        self.w1 = w1
        self.w2 = w2
        self.s_max = s_max
        self.c_o = c_o
        self.delta = delta
        self.epsilon = epsilon
        self.iter_max = iter_max
        self.eta_fraction = eta_fraction

    def fit(self, X, y=None):
        """Solve for the service profile ``X`` (object, dict, path or bundled name)."""
        profile = check_profile(X)
        workload = _workload(profile, self.lam, self.rho)
        weights = Weights(self.w1, self.w2)
        if isinstance(self.s_max, str):
            if self.s_max != "auto":
                raise ConfigError(f"s_max must be an integer or 'auto', got {self.s_max!r}")
            s_max, self.truncation_records_ = find_min_smax(
                profile, workload, weights, self.c_o, self.delta, self.epsilon, self.iter_max,
                smax_grid=range(profile.b_max, 20 * profile.b_max + 1, 8), eta_fraction=self.eta_fraction,
                refine=True,
            )
        else:
            s_max = check_int(self.s_max, "s_max", profile.b_max)
        self.model_ = build_truncated(profile, workload, weights, TruncationConfig(s_max, self.c_o))
        dt = to_dtmdp(self.model_, self.eta_fraction)
        self.policy_, self.solve_report_ = relative_value_iteration(dt, self.epsilon, self.iter_max)
        self.eval_report_ = evaluate_policy(self.policy_, self.model_, self.delta)
        self.profile_ = profile
        self.workload_ = workload
        return self

    def score(self, X=None, y=None) -> float:
        """Negative average cost of the fitted policy (higher is better)."""
        check_is_fitted(self, "eval_report_")
        return -self.eval_report_.g_pi


class QLearningBatchScheduler(_PolicyPredictor, BaseEstimator):
    """Batching policy learned by RVI Q-learning on a sampled model.

    Parameters mirror :class:`SMDPBatchScheduler` for the model and
    :class:`~smdpbatch.qlearn.QLearnConfig` for training.
    """

    def __init__(self, rho=None, lam=None, w1=1.0, w2=0.0, s_max=64, c_o=10.0,
                 epsilon0=0.5, iterations=1_000_000, random_state=0, step_size="global",
                 exploration_clock="step", eta_fraction=DEFAULT_ETA_FRACTION):
        self.rho = rho
        self.lam = lam
        self.w1 = w1
        self.w2 = w2
        self.s_max = s_max
        self.c_o = c_o
        self.epsilon0 = epsilon0
        self.iterations = iterations
        self.random_state = random_state
        self.step_size = step_size
        self.exploration_clock = exploration_clock
        self.eta_fraction = eta_fraction

    def fit(self, X, y=None):
        profile = check_profile(X)
        workload = _workload(profile, self.lam, self.rho)
        s_max = check_int(self.s_max, "s_max", profile.b_max)
        self.model_ = build_truncated(profile, workload, Weights(self.w1, self.w2), TruncationConfig(s_max, self.c_o))
        config = qlearn.QLearnConfig(
            epsilon0=self.epsilon0, iterations=self.iterations, seed=int(self.random_state),
            step_size=self.step_size, exploration_clock=self.exploration_clock,
        )
        self.policy_, self.snapshots_, self.q_table_ = qlearn.train(
            to_dtmdp(self.model_, self.eta_fraction), config, return_table=True
        )
        return self


class LinearProfileRegressor(RegressorMixin, BaseEstimator):
    """Least-squares fit of latency and energy against batch size.

    ``fit(X, y)`` takes batch sizes ``X`` (n,) or (n, 1) and targets ``y``
    of shape (n, 2) holding latency (ms) and energy (mJ).
    ``predict`` returns the same two columns for new batch sizes.
    """

    def __init__(self, b_max=None):
        self.b_max = b_max

    def fit(self, X, y):
        b = check_queue_lengths(X).astype(float)
        y = np.asarray(y, dtype=float)
        if y.ndim != 2 or y.shape != (b.size, 2):
            raise FitError(f"y must have shape ({b.size}, 2) holding latency and energy, got {y.shape}")
        b_max = int(self.b_max) if self.b_max is not None else int(b.max())
        fit = fit_linear_profile(np.column_stack([b, y[:, 0]]), np.column_stack([b, y[:, 1]]), b_max)
        self.profile_ = fit.profile
        self.rmse_ = np.array([fit.latency_rmse, fit.energy_rmse])
        self.coef_ = np.array([fit.profile.alpha, fit.profile.beta])
        self.intercept_ = np.array([fit.profile.tau0, fit.profile.zeta0])
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "profile_")
        b = check_queue_lengths(X).astype(float)
        return np.column_stack([self.profile_.latency(b), self.profile_.energy(b)])


__all__ = ["SMDPBatchScheduler", "QLearningBatchScheduler", "LinearProfileRegressor"]
