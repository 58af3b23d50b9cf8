import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from adapt.errors import DomainError, LayoutError, NumericError
from adapt.numerics import AdamState, LrSchedule, ParamVector, adam_step, cosine_lr, finite_diff_check, numeric_gradient

finite = st.floats(-1e3, 1e3, allow_nan=False)


def textbook_adam(x, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar Adam written out from the recurrence, one step per gradient."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return x


def pv(values, name="w"):
    values = np.asarray(values, dtype=float)
    return ParamVector([(name, values.shape)], values.ravel())


class TestParamVector:
    def test_segments_partition_the_buffer(self):
        p = ParamVector([("a", (2, 3)), ("b", (4,)), ("c", (0,))])
        assert p.size == 10
        covered = np.zeros(p.size, int)
        for name in p.names:
            covered[p.segment_slice(name)] += 1
        assert np.all(covered == 1)

    def test_segment_views_write_through(self):
        p = ParamVector([("a", (2,)), ("b", (2,))])
        p["b"] = [3.0, 4.0]
        assert p.values.tolist() == [0.0, 0.0, 3.0, 4.0]

    def test_bad_layouts(self):
        with pytest.raises(LayoutError):
            ParamVector([("a", (2,)), ("a", (1,))])
        with pytest.raises(LayoutError):
            ParamVector([("a", (2,))], np.zeros(3))
        with pytest.raises(LayoutError):
            ParamVector([("a", (2,))])["b"]


class TestAdam:
    def test_first_step_by_hand(self):
        # m_hat = 1, v_hat = 1, so the step is lr / (1 + eps)
        p, st_ = adam_step(pv([0.0]), pv([1.0]), AdamState.fresh(pv([0.0])), 0.1)
        assert p.values[0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)
        assert st_.step_count == 1

    def test_matches_textbook_recurrence_over_several_steps(self):
        grads = [0.3, -1.2, 0.7, 2.0, -0.1]
        p = pv([0.5])
        state = AdamState.fresh(p)
        for g in grads:
            p, state = adam_step(p, pv([g]), state, 0.01)
        assert p.values[0] == pytest.approx(textbook_adam(0.5, grads, 0.01), abs=1e-14)

    @given(arrays(float, 5, elements=finite), arrays(float, 5, elements=finite), arrays(float, 5, elements=st.floats(0, 1e3)))
    def test_zero_gradient_is_a_fixed_point(self, x, m, v):
        p = pv(x)
        state = AdamState(m, v, step_count=7)
        new, new_state = adam_step(p, p.zeros_like(), state, 0.1)
        assert np.array_equal(new.values, p.values)
        assert new_state.step_count == 8
        assert np.array_equal(new_state.first_moment, m) and np.array_equal(new_state.second_moment, v)

    @given(arrays(float, 4, elements=finite), st.lists(arrays(float, 4, elements=finite), min_size=1, max_size=5))
    def test_second_moment_stays_nonnegative(self, x, grads):
        p = pv(x)
        state = AdamState.fresh(p)
        for g in grads:
            p, state = adam_step(p, pv(g), state, 1e-3)
        assert np.all(state.second_moment >= 0)
        assert np.all(np.isfinite(p.values))
        assert state.step_count == len(grads)

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        g = [pv(rng.normal(size=6)) for _ in range(4)]

        def run():
            p, s = pv(np.ones(6)), AdamState.fresh(pv(np.ones(6)))
            for gi in g:
                p, s = adam_step(p, gi, s, 0.05)
            return p.values.tobytes()

        assert run() == run()

    def test_errors(self):
        p = pv([1.0, 2.0])
        with pytest.raises(LayoutError):
            adam_step(p, pv([1.0]), AdamState.fresh(p), 0.1)
        with pytest.raises(NumericError, match="w"):
            adam_step(p, pv([np.nan, 0.0]), AdamState.fresh(p), 0.1)
        with pytest.raises(DomainError):
            adam_step(p, p.zeros_like(), AdamState.fresh(p), 0.0)


class TestCosine:
    sched = LrSchedule(initial_lr=0.2, total_steps=100)

    def test_endpoints(self):
        assert cosine_lr(0, self.sched) == 0.2
        assert cosine_lr(50, self.sched) == pytest.approx(0.1, abs=1e-15)
        assert cosine_lr(100, self.sched) == pytest.approx(0.2 * 1e-6)

    @given(st.integers(1, 500), st.data())
    def test_nonincreasing_and_in_range(self, total, data):
        sched = LrSchedule(1e-3, total)
        a = data.draw(st.integers(0, total))
        b = data.draw(st.integers(a, total))
        assert 0 < cosine_lr(b, sched) <= cosine_lr(a, sched) <= 1e-3

    def test_out_of_range(self):
        with pytest.raises(DomainError):
            cosine_lr(101, self.sched)
        with pytest.raises(DomainError):
            cosine_lr(-1, self.sched)
        with pytest.raises(DomainError):
            LrSchedule(0.0, 10)


class TestFiniteDiff:
    def sumsq(self, p):
        return float(np.sum(p.values**2))

    def test_quadratic_passes(self):
        p = pv([1.0, 2.0])
        report = finite_diff_check(self.sumsq, p, pv([2.0, 4.0]), h=1e-5, tol=1e-6)
        assert report.passed and report.max_error < 1e-9

    def test_ten_percent_error_is_reported(self):
        p = pv([1.0, 2.0])
        report = finite_diff_check(self.sumsq, p, pv([2.2, 4.4]))
        assert not report.passed
        # worst coordinate |4.4 - 4| over the segment scale 4
        assert report.max_error == pytest.approx(0.1, rel=1e-6)

    def test_empty_segment_is_vacuous(self):
        p = ParamVector([("w", (2,)), ("empty", (0,))], np.array([1.0, -1.0]))
        report = finite_diff_check(self.sumsq, p, ParamVector(p.layout, np.array([2.0, -2.0])))
        assert report.errors["empty"] == 0.0 and report.passed

    def test_non_finite_loss_names_the_coordinate(self):
        p = pv([0.0, 1.0])
        with pytest.raises(NumericError, match="coordinate 1"):
            numeric_gradient(lambda q: math.inf if q.values[1] > 1.0 else 0.0, p)

    @given(arrays(float, 3, elements=st.floats(-3, 3)))
    def test_smooth_function(self, x):
        def f(p):
            v = p.values
            return float(np.sin(v[0]) * v[1] + np.exp(0.3 * v[2]))

        v = x
        grad = pv([np.cos(v[0]) * v[1], np.sin(v[0]), 0.3 * np.exp(0.3 * v[2])])
        assert finite_diff_check(f, pv(x), grad, tol=1e-6).passed
