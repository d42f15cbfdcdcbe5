import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from smdpbatch._validation import check_int, check_positive, check_queue_lengths, exactly_one
from smdpbatch.estimators import LinearProfileRegressor, QLearningBatchScheduler, SMDPBatchScheduler
from smdpbatch.exceptions import ConfigError, FitError


def test_scheduler_params_roundtrip():
    est = SMDPBatchScheduler(rho=0.9, w2=1.0, s_max=70)
    params = est.get_params()
    assert params["rho"] == 0.9 and params["s_max"] == 70 and params["lam"] is None
    other = clone(est).set_params(w2=5.0)
    assert other.w2 == 5.0 and est.w2 == 1.0


def test_scheduler_fit_predict(p4):
    est = SMDPBatchScheduler(rho=0.9, w1=1.0, w2=1.0, s_max=70, c_o=100.0).fit(p4)
    assert est.solve_report_.iterations == 1482
    assert est.score() == pytest.approx(-66.13411272, rel=1e-8)
    pred = est.predict([0, 1, 40, 1000])
    assert pred[0] == 0
    assert pred[2] == est.policy_.actions[40]
    assert pred[3] == est.policy_.overflow_action
    assert np.array_equal(est.predict(np.array([[5], [6]])), est.predict([5, 6]))


def test_scheduler_auto_truncation(p4):
    est = SMDPBatchScheduler(rho=0.9, w1=1.0, w2=1.0, c_o=100.0).fit("googlenet-p4")
    assert est.model_.s_max == 70
    assert est.eval_report_.acceptable
    assert est.truncation_records_[-1].s_max <= 80


def test_scheduler_errors(p4):
    with pytest.raises(NotFittedError):
        SMDPBatchScheduler(rho=0.5).predict([1])
    with pytest.raises(ConfigError):
        SMDPBatchScheduler(rho=0.5, lam=1.0).fit(p4)
    with pytest.raises(ConfigError):
        SMDPBatchScheduler().fit(p4)
    with pytest.raises(ConfigError):
        SMDPBatchScheduler(rho=0.5, s_max="big").fit(p4)
    est = SMDPBatchScheduler(rho=0.5, s_max=40).fit(p4)
    with pytest.raises(ConfigError):
        est.predict([-1])
    with pytest.raises(ConfigError):
        est.predict([1.5])


def test_scheduler_lam_input(p4):
    est = SMDPBatchScheduler(lam=1.0, s_max=40).fit(p4)
    assert est.workload_.lam == 1.0


def test_qlearning_scheduler(p4):
    est = QLearningBatchScheduler(rho=0.7, s_max=40, iterations=20_000, random_state=1)
    est.fit(p4.with_b_max(8))
    assert est.predict([0])[0] == 0
    assert est.policy_.n_states == 42
    again = clone(est).fit(p4.with_b_max(8))
    assert again.policy_ == est.policy_


def test_linear_regressor():
    b = np.array([1, 2, 4, 8, 16, 32])
    y = np.column_stack([0.3051 * b + 1.052, 19.9 * b + 19.6])
    reg = LinearProfileRegressor().fit(b, y)
    assert np.allclose(reg.coef_, [0.3051, 19.9])
    assert np.allclose(reg.intercept_, [1.052, 19.6])
    assert np.allclose(reg.rmse_, 0.0, atol=1e-10)
    assert reg.profile_.b_max == 32
    assert np.allclose(reg.predict([10]), [[0.3051 * 10 + 1.052, 19.9 * 10 + 19.6]])
    assert reg.score(b, y[:, :]) == pytest.approx(1.0)
    with pytest.raises(FitError):
        LinearProfileRegressor().fit(b, y[:, 0])


def test_validation_helpers():
    assert check_positive(2, "x") == 2.0
    assert check_positive(0, "x", strict=False) == 0.0
    for bad in (0, -1, float("nan"), "a"):
        with pytest.raises(ConfigError):
            check_positive(bad, "x")
    assert check_int(5.0, "n") == 5
    for bad in (True, 2.5, -1):
        with pytest.raises(ConfigError):
            check_int(bad, "n")
    assert check_queue_lengths(3).tolist() == [3]
    with pytest.raises(ConfigError):
        check_queue_lengths(np.zeros((2, 2)))
    assert exactly_one({"rho": 0.5, "lambda": None}, ("rho", "lambda")) == "rho"
    with pytest.raises(ConfigError, match="exactly one"):
        exactly_one({"rho": 0.5, "lambda": 1.0}, ("rho", "lambda"))
