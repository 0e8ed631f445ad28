"""Cost functions, parameter containers, and configuration validation."""

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emsched.model import (
    BatteryParams,
    CostModel,
    FunctionTriple,
    GridParams,
    ModelBundle,
    QuadraticCost,
    Weights,
    default_k_d,
    validate_config,
)


def defaults_valid(**overrides):
    kwargs = dict(
        battery=BatteryParams(),
        grid=GridParams(),
        costs=CostModel.quadratic(),
        weights=Weights(),
        horizon=288,
    )
    kwargs.update(overrides)
    return validate_config(**kwargs)


class TestQuadraticCosts:
    def test_usage_cost_at_rate_cap(self):
        costs = CostModel.quadratic(k_u=0.2)
        assert costs.usage_cost(0.165) == pytest.approx(0.005445, abs=1e-15)

    def test_delay_cost_normalized_to_one_at_target(self):
        costs = CostModel.quadratic(d_avg_max=18)
        assert costs.delay_cost(18.0) == pytest.approx(1.0, abs=1e-12)

    def test_usage_cost_zero(self):
        assert CostModel.quadratic().usage_cost(0.0) == 0.0

    def test_default_delay_coefficient(self):
        assert default_k_d(18) == pytest.approx(1.0 / 324.0)
        assert default_k_d(0) == 1.0  # degenerate target: any coefficient works

    def test_negative_inputs_rejected(self):
        costs = CostModel.quadratic()
        for fn in (costs.usage_cost, costs.usage_cost_derivative, costs.delay_cost, costs.delay_cost_derivative):
            with pytest.raises(ValueError):
                fn(-0.1)

    def test_inverse_derivative_degenerate_coefficient(self):
        # A flat cost has no marginal-cost inversion; the convention is 0.
        assert QuadraticCost(0.0).inverse_derivative(1.0) == 0.0

    def test_function_triple_adapter(self):
        cubicish = FunctionTriple(
            value_fn=lambda x: x**2,
            derivative_fn=lambda x: 2 * x,
            inverse_derivative_fn=lambda y: y / 2,
        )
        assert cubicish.value(3.0) == 9.0
        assert cubicish.derivative(3.0) == 6.0
        assert cubicish.inverse_derivative(6.0) == 3.0


@given(
    k=st.floats(min_value=1e-6, max_value=100.0),
    x=st.floats(min_value=0.0, max_value=50.0),
    y=st.floats(min_value=0.0, max_value=50.0),
    t=st.floats(min_value=0.0, max_value=1.0),
)
def test_cost_convexity(k, x, y, t):
    cost = QuadraticCost(k)
    mid = t * x + (1 - t) * y
    assert cost.value(mid) <= t * cost.value(x) + (1 - t) * cost.value(y) + 1e-12


@given(k=st.floats(min_value=1e-3, max_value=10.0), x=st.floats(min_value=1e-3, max_value=50.0))
@settings(max_examples=100)
def test_derivative_matches_finite_difference(k, x):
    cost = QuadraticCost(k)
    h = 1e-6 * max(x, 1.0)
    fd = (cost.value(x + h) - cost.value(x - h)) / (2 * h)
    assert cost.derivative(x) == pytest.approx(fd, rel=1e-6)


@given(k=st.floats(min_value=1e-3, max_value=10.0), y=st.floats(min_value=0.0, max_value=50.0))
def test_inverse_derivative_round_trip(k, y):
    cost = QuadraticCost(k)
    assert cost.derivative(cost.inverse_derivative(y)) == pytest.approx(y, abs=1e-9)


class TestValidateConfig:
    def test_defaults_pass(self):
        assert defaults_valid() == []

    def test_small_battery_window_kills_feasible_weight_range(self):
        problems = defaults_valid(battery=BatteryParams(b_max=0.5))
        assert any("V_max <= 0" in p for p in problems)

    def test_zero_purchase_cap_invalid(self):
        problems = defaults_valid(grid=GridParams(e_max=0.0))
        assert any("e_max" in p for p in problems)

    def test_delay_target_must_be_reachable(self):
        problems = validate_config(
            BatteryParams(), GridParams(), CostModel.quadratic(), Weights(d_avg_max=20),
            horizon=288, max_task_delay=18,
        )
        assert any("cannot bind" in p for p in problems)

    def test_unreachable_level_change_reported(self):
        problems = defaults_valid(weights=Weights(delta_u=5.0))
        assert any("delta_u" in p for p in problems)

    def test_bad_level_ordering_reported(self):
        problems = defaults_valid(battery=BatteryParams(b_min=1.0, b_init=0.5))
        assert any("b_min <= b_init <= b_max" in p for p in problems)

    def test_nonpositive_weights_reported(self):
        problems = defaults_valid(weights=Weights(alpha=0.0, mu=-1.0))
        assert any("alpha" in p for p in problems)
        assert any("mu" in p for p in problems)


class TestModelBundle:
    def test_usage_auxiliary_cap_is_larger_rate(self):
        bundle = ModelBundle(battery=BatteryParams(r_max=0.1, d_max_rate=0.2))
        assert bundle.gamma_u_cap == 0.2

    def test_per_slot_level_shift(self):
        bundle = ModelBundle(weights=Weights(delta_u=2.88), horizon=288)
        assert bundle.delta_per_slot == pytest.approx(0.01)
