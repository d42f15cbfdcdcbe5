import numpy as np
import pytest
from hypothesis import given, strategies as st

from smdpbatch.exceptions import ConfigError, DomainError, PolicyFormatError
from smdpbatch.policies import (
    Policy, chart_rows, detect_control_limit, load_policy, make_control_limit, make_static,
    make_work_conserving, save_policy,
)


def test_detect_examples():
    acts = [0, 0, 0] + [min(s, 32) for s in range(3, 41)] + [32]
    assert detect_control_limit(Policy(acts, 32)) == 3
    assert detect_control_limit(make_work_conserving(32, 40)) == 1
    assert detect_control_limit(Policy(np.zeros(42, dtype=int), 32)) is None


def test_detect_structures():
    # serves at the limit but not the maximal batch
    acts = np.array([0, 0, 2, 2, 4, 5, 6, 6])
    pol = Policy(acts, 6)
    assert detect_control_limit(pol) is None
    assert detect_control_limit(pol, "threshold") == 2
    # waiting again above the limit breaks both shapes
    assert detect_control_limit(Policy([0, 1, 0, 3, 3], 3), "threshold") is None
    with pytest.raises(ConfigError):
        detect_control_limit(pol, "bogus")


def test_detect_overflow_flag():
    acts = np.array([0, 1, 2, 3, 4, 1])
    pol = Policy(acts, 4)
    assert detect_control_limit(pol) is None
    assert detect_control_limit(pol, include_overflow=False) == 1


def test_work_conserving():
    pol = make_work_conserving(32, 40)
    assert pol.action_for(1) == 1
    assert pol.action_for(32 + 5) == 32
    assert pol.action_for(1000) == 32


def test_static():
    assert make_static(32, 32, 40).action_for(31) == 0
    assert make_static(32, 32, 40).action_for(100) == 32
    assert np.array_equal(make_static(1, 32, 40).actions, make_work_conserving(1, 40).actions)
    pol = make_static(8, 32, 40)
    assert pol.action_for(7) == 0 and pol.action_for(20) == 8
    with pytest.raises(DomainError):
        make_static(33, 32, 40)


@given(st.integers(1, 16), st.integers(16, 60))
def test_control_limit_roundtrip(limit, s_max):
    pol = make_control_limit(limit, 16, s_max)
    assert detect_control_limit(pol) == limit
    assert detect_control_limit(pol, "threshold") == limit


def test_control_limit_one_is_work_conserving():
    assert make_control_limit(1, 8, 20) == make_work_conserving(8, 20)


def test_policy_validation():
    with pytest.raises(DomainError, match="state 2"):
        Policy([0, 1, 3, 0], 4)
    with pytest.raises(DomainError, match="S_o"):
        Policy([0, 1, 2, 5], 4)
    with pytest.raises(DomainError):
        Policy([0], 4)
    pol = Policy([0, 1, 1, 2], 2)
    with pytest.raises(ValueError):
        pol.actions[0] = 1
    assert hash(pol) == hash(Policy(np.array([0, 1, 1, 2]), 2))


def test_save_load_identity(tmp_path):
    pol = make_control_limit(3, 8, 20)
    path = tmp_path / "p.csv"
    save_policy(pol, path, config_hash="abc")
    text = path.read_text()
    assert text.startswith("# config_sha256=abc\n") and "S_o,8" in text
    assert load_policy(path, 8) == pol


def test_load_rejects_infeasible(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("s,action\n0,0\n1,2\n2,2\nS_o,2\n")
    with pytest.raises(PolicyFormatError, match="infeasible"):
        load_policy(path, 4)


@pytest.mark.parametrize(
    "body,match",
    [
        ("s,action\n0,0\n1,1\n", "S_o"),
        ("s,action\n0,0\n0,0\nS_o,1\n", "twice"),
        ("s,action\n0,0\n2,1\nS_o,1\n", "missing"),
        ("state,a\n0,0\n", "columns"),
        ("", "empty"),
    ],
)
def test_load_format_errors(tmp_path, body, match):
    path = tmp_path / "p.csv"
    path.write_text(body)
    with pytest.raises(PolicyFormatError, match=match):
        load_policy(path, 4)


def test_chart_layout_slice(tmp_path):
    import csv

    p1, p2 = make_control_limit(2, 4, 6), make_static(4, 4, 6)
    path = tmp_path / "chart.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rho", "w1", "w2", "s", "action"])
        w.writerows(chart_rows(0.5, 1.0, 0.0, p1))
        w.writerows(chart_rows(0.9, 1.0, 5.0, p2))
    assert load_policy(path, 4, rho=0.9, w1=1.0, w2=5.0) == p2
    assert load_policy(path, 4, rho=0.5, w1=1.0, w2=0.0) == p1
    with pytest.raises(PolicyFormatError):
        load_policy(path, 4)
    with pytest.raises(PolicyFormatError, match="no rows"):
        load_policy(path, 4, rho=0.7, w1=1.0, w2=0.0)
