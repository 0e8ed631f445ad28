"""Parameters and cost functions for battery-plus-scheduling energy management.

Units are fixed across the package: energy in kWh per slot, money in dollars,
scheduling delay in integer slots. All parameter containers are immutable and
freely shareable across threads and processes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Protocol, runtime_checkable


class ConfigurationError(ValueError):
    """Raised when parameters admit no feasible controller design."""


class InfeasibleSlot(RuntimeError):
    """The selected action needs more grid energy than the per-slot limit allows.

    Clamping the purchase would silently violate the supply-demand balance, so
    the run aborts with diagnostics instead.
    """

    def __init__(self, slot: int, required: float, limit: float, detail: str = ""):
        self.slot = slot
        self.required = required
        self.limit = limit
        self.detail = detail
        msg = f"slot {slot}: required grid purchase {required:.6f} kWh exceeds E_max={limit:.6f}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class StateConsistencyError(RuntimeError):
    """Internal bug trap: a state invariant that must hold by construction failed."""


@runtime_checkable
class CostFunction(Protocol):
    """Convex non-decreasing cost on [0, cap], with derivative and its inverse."""

    def value(self, x: float) -> float: ...

    def derivative(self, x: float) -> float: ...

    def inverse_derivative(self, y: float) -> float: ...


@dataclass(frozen=True)
class QuadraticCost:
    """k * x**2 — the default usage/delay cost family."""

    k: float

    def value(self, x: float) -> float:
        return self.k * x * x

    def derivative(self, x: float) -> float:
        return 2.0 * self.k * x

    def inverse_derivative(self, y: float) -> float:
        if self.k <= 0.0:
            # Flat cost: the marginal-cost inversion is never consulted because
            # the closed-form saturates first; 0 is a safe answer for probes.
            return 0.0
        return y / (2.0 * self.k)


@dataclass(frozen=True)
class FunctionTriple:
    """Adapter for user-supplied convex costs as (value, derivative, inverse-derivative)."""

    value_fn: Callable[[float], float]
    derivative_fn: Callable[[float], float]
    inverse_derivative_fn: Callable[[float], float]

    def value(self, x: float) -> float:
        return self.value_fn(x)

    def derivative(self, x: float) -> float:
        return self.derivative_fn(x)

    def inverse_derivative(self, y: float) -> float:
        return self.inverse_derivative_fn(y)


def default_k_d(d_avg_max: int) -> float:
    """Delay-cost coefficient normalizing the cost at the average-delay target to 1.

    With a target of 0 slots the delay cost is identically zero on the only
    admissible input, so any positive coefficient works; 1.0 keeps the model
    well defined.
    """
    if d_avg_max <= 0:
        return 1.0
    return 1.0 / float(d_avg_max) ** 2


@dataclass(frozen=True)
class CostModel:
    """Battery usage cost C_u and scheduling delay cost C_d."""

    usage: CostFunction
    delay: CostFunction

    @staticmethod
    def quadratic(k_u: float = 0.2, k_d: float | None = None, *, d_avg_max: int = 18) -> "CostModel":
        if k_d is None:
            k_d = default_k_d(d_avg_max)
        return CostModel(usage=QuadraticCost(k_u), delay=QuadraticCost(k_d))

    def usage_cost(self, x: float) -> float:
        _reject_negative(x)
        return self.usage.value(x)

    def usage_cost_derivative(self, x: float) -> float:
        _reject_negative(x)
        return self.usage.derivative(x)

    def usage_cost_inverse_derivative(self, y: float) -> float:
        return self.usage.inverse_derivative(y)

    def delay_cost(self, x: float) -> float:
        _reject_negative(x)
        return self.delay.value(x)

    def delay_cost_derivative(self, x: float) -> float:
        _reject_negative(x)
        return self.delay.derivative(x)

    def delay_cost_inverse_derivative(self, y: float) -> float:
        return self.delay.inverse_derivative(y)


def _reject_negative(x: float) -> None:
    if x < 0.0:
        raise ValueError(f"cost functions are defined for x >= 0, got {x}")


@dataclass(frozen=True)
class BatteryParams:
    """Ideal battery: capacity window, per-slot rate limits, and entry fees.

    c_rc / c_dc are fixed dollar costs charged once per slot in which a
    charging / discharging event occurs, modeling cycle-entry degradation.
    """

    b_min: float = 0.0
    b_max: float = 3.0
    b_init: float = 0.0
    r_max: float = 0.165
    d_max_rate: float = 0.165
    c_rc: float = 0.001
    c_dc: float = 0.001


@dataclass(frozen=True)
class GridParams:
    """Grid purchase limits: per-slot energy cap and the price band."""

    e_max: float = 0.3
    p_min: float = 0.063
    p_max: float = 0.118


@dataclass(frozen=True)
class Weights:
    """Objective weights and horizon-level targets.

    v is the cost-vs-queue-drift weight; None means "use the largest value the
    battery-capacity guarantee allows" (resolved at design time). delta_u is
    the desired net change of battery level over the horizon. d_avg_max is the
    average-delay target in slots.
    """

    alpha: float = 1.0
    mu: float = 1.0
    v: float | None = None
    delta_u: float = 0.0
    d_avg_max: int = 18


@dataclass(frozen=True)
class ModelBundle:
    """Everything a run needs besides the trace itself."""

    battery: BatteryParams = BatteryParams()
    grid: GridParams = GridParams()
    costs: CostModel = CostModel.quadratic()
    weights: Weights = Weights()
    horizon: int = 288
    z0_mode: str = "shifted"

    @property
    def gamma_u_cap(self) -> float:
        return max(self.battery.r_max, self.battery.d_max_rate)

    @property
    def delta_per_slot(self) -> float:
        return self.weights.delta_u / self.horizon


def validate_config(
    battery: BatteryParams,
    grid: GridParams,
    costs: CostModel,
    weights: Weights,
    horizon: int,
    max_task_delay: int | None = None,
) -> list[str]:
    """Report every violated parameter invariant; an empty list means valid.

    Also reports whether the battery window leaves any room for the feasible
    weight range (the designed v_max must be positive, i.e.
    b_max - b_min > r_max + d_max_rate + 2*gamma_u + |delta_u|).

    max_task_delay, when supplied, is the largest per-load delay cap in the
    trace; the average-delay target is only effective if it does not exceed it.
    """
    problems: list[str] = []
    if horizon < 1:
        problems.append(f"horizon must be >= 1, got {horizon}")

    if not (0.0 <= battery.b_min <= battery.b_init <= battery.b_max):
        problems.append(
            "battery levels must satisfy 0 <= b_min <= b_init <= b_max, got "
            f"b_min={battery.b_min}, b_init={battery.b_init}, b_max={battery.b_max}"
        )
    if battery.r_max <= 0.0:
        problems.append(f"charge rate limit r_max must be > 0, got {battery.r_max}")
    if battery.d_max_rate <= 0.0:
        problems.append(f"discharge rate limit d_max_rate must be > 0, got {battery.d_max_rate}")
    if battery.c_rc < 0.0 or battery.c_dc < 0.0:
        problems.append(f"entry costs must be >= 0, got c_rc={battery.c_rc}, c_dc={battery.c_dc}")

    if grid.e_max <= 0.0:
        problems.append(f"grid purchase limit e_max must be > 0, got {grid.e_max}")
    if not (0.0 <= grid.p_min <= grid.p_max):
        problems.append(f"prices must satisfy 0 <= p_min <= p_max, got p_min={grid.p_min}, p_max={grid.p_max}")

    if weights.alpha <= 0.0:
        problems.append(f"alpha must be > 0, got {weights.alpha}")
    if weights.mu <= 0.0:
        problems.append(f"mu must be > 0, got {weights.mu}")
    if weights.v is not None and weights.v < 0.0:
        problems.append(f"v must be >= 0, got {weights.v}")
    if weights.d_avg_max < 0:
        problems.append(f"d_avg_max must be >= 0, got {weights.d_avg_max}")
    if max_task_delay is not None and weights.d_avg_max > max_task_delay:
        problems.append(
            f"average-delay target d_avg_max={weights.d_avg_max} exceeds the largest "
            f"per-load delay cap {max_task_delay}; the constraint cannot bind"
        )

    if horizon >= 1:
        delta_cap = min(
            battery.b_max - battery.b_min,
            horizon * max(battery.r_max, battery.d_max_rate),
        )
        if abs(weights.delta_u) > delta_cap:
            problems.append(
                f"|delta_u|={abs(weights.delta_u)} is unreachable within the horizon "
                f"(cap {delta_cap})"
            )

    gamma_u = max(battery.r_max, battery.d_max_rate)
    try:
        du = costs.usage_cost_derivative(gamma_u)
        if not math.isfinite(du):
            problems.append(f"usage-cost derivative is not finite at {gamma_u}")
    except Exception as exc:  # user-supplied triples may raise anything
        problems.append(f"usage-cost derivative failed at {gamma_u}: {exc}")
    if weights.d_avg_max > 0:
        try:
            dd = costs.delay_cost_derivative(float(weights.d_avg_max))
            if not math.isfinite(dd):
                problems.append(f"delay-cost derivative is not finite at {weights.d_avg_max}")
        except Exception as exc:
            problems.append(f"delay-cost derivative failed at {weights.d_avg_max}: {exc}")

    headroom = battery.b_max - battery.b_min - battery.r_max - battery.d_max_rate - 2.0 * gamma_u - abs(weights.delta_u)
    if headroom <= 0.0:
        problems.append(
            "V_max <= 0: battery window b_max - b_min = "
            f"{battery.b_max - battery.b_min} does not exceed "
            f"r_max + d_max_rate + 2*max(r_max, d_max_rate) + |delta_u| = "
            f"{battery.r_max + battery.d_max_rate + 2.0 * gamma_u + abs(weights.delta_u)}; "
            "no feasible weight v exists"
        )

    return problems
