import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffprobe.schedule import NoiseSchedule, build_linear_schedule, schedule_from_dict


def sequential_product_oracle(betas):
    """Brute-force running product, one multiply at a time."""
    out, acc = [], 1.0
    for b in betas:
        acc = acc * (1.0 - b)
        out.append(acc)
    return np.array(out)


def test_single_step_schedule():
    s = build_linear_schedule(1, 0.5, 0.5)
    np.testing.assert_allclose(s.alpha_bars, [0.5])


def test_three_step_running_product():
    s = build_linear_schedule(3, 0.1, 0.3)
    np.testing.assert_allclose(s.betas, [0.1, 0.2, 0.3])
    np.testing.assert_allclose(s.alpha_bars, [0.9, 0.72, 0.504], rtol=1e-12)


def test_long_schedule_matches_product_oracle():
    s = build_linear_schedule(1000, 1e-4, 0.02)
    want = sequential_product_oracle(s.betas)
    np.testing.assert_allclose(s.alpha_bars, want, rtol=1e-10)
    assert abs(s.alpha_bars[-1] - want[-1]) / want[-1] < 1e-10


@pytest.mark.parametrize("args,msg", [
    ((0, 0.1, 0.2), "total_steps"),
    ((10, 0.0, 0.2), "strictly in"),
    ((10, 0.1, 1.0), "strictly in"),
    ((10, -0.1, 0.2), "strictly in"),
    ((10, 0.3, 0.2), "exceeds"),
])
def test_build_rejects_bad_arguments(args, msg):
    with pytest.raises(ValueError, match=msg):
        build_linear_schedule(*args)


def test_schedule_rejects_beta_of_one():
    with pytest.raises(ValueError):
        NoiseSchedule(np.array([0.5, 1.0]))


def test_alpha_bar_accessor_and_terminal_value():
    s = build_linear_schedule(5, 0.1, 0.2)
    assert s.alpha_bar(0) == 1.0
    assert s.alpha_bar(1) == pytest.approx(0.9)
    assert s.alpha_bar(5) == pytest.approx(s.alpha_bars[-1])
    with pytest.raises(ValueError):
        s.alpha_bar(6)
    with pytest.raises(ValueError):
        s.alpha_bar(-1)


def test_arrays_are_immutable():
    s = build_linear_schedule(4, 0.1, 0.2)
    with pytest.raises(ValueError):
        s.betas[0] = 0.5


def test_round_trip_through_dict():
    s = build_linear_schedule(7, 2e-4, 0.015)
    s2 = schedule_from_dict(s.to_dict())
    np.testing.assert_array_equal(s.betas, s2.betas)


@given(t=st.integers(1, 200),
       b0=st.floats(1e-6, 0.4),
       b1=st.floats(1e-6, 0.4))
@settings(max_examples=40, deadline=None)
def test_alpha_bars_strictly_decreasing_property(t, b0, b1):
    lo, hi = sorted((b0, b1))
    s = build_linear_schedule(t, lo, hi)
    assert ((s.alpha_bars > 0) & (s.alpha_bars < 1)).all()
    if t > 1:
        assert (np.diff(s.alpha_bars) < 0).all()
    np.testing.assert_allclose(s.alpha_bars, sequential_product_oracle(s.betas), rtol=1e-12)
