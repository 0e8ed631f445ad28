"""Real-time load scheduling and storage control via drift-plus-penalty.

The controller keeps four virtual queues — x for the average-delay target,
z for the battery-level shift, h_u / h_d for the auxiliary equalities tying
per-slot stand-ins to the time-averaged usage and delay — and at each slot
minimizes an upper bound of (Lyapunov drift) + v * (instantaneous cost).
The per-slot problem separates, and every piece has a closed-form solution:

* schedule_load picks the delay for the arriving task (always 0, 1, or the
  per-load cap);
* aux_solution picks the auxiliary stand-in for a time-averaged cost term;
* energy_control picks the grid/battery energy flows by comparing one
  candidate action per battery regime against staying idle.

Queue state is a value: every operation is state-in/state-out and pure, so
independent runs can execute concurrently without sharing anything.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple

from .model import (
    BatteryParams,
    ConfigurationError,
    CostFunction,
    CostModel,
    GridParams,
    InfeasibleSlot,
    StateConsistencyError,
    Weights,
)
from .scenario import LoadTask

_IDENTITY_TOL = 1e-9


@dataclass(frozen=True)
class ControllerState:
    """Virtual queues, battery level, and the designed constants in force.

    z tracks the battery level minus a time-dependent shift (so it ranges over
    all reals), x >= 0 accumulates delay excess over the per-slot target, and
    h_u / h_d are signed backlogs of the auxiliary equalities. z_offset is the
    constant gap between z and its shift identity left by the chosen
    initialization mode; it stays fixed for the whole run.
    """

    z: float
    x: float
    h_u: float
    h_d: float
    b: float
    a_o: float
    v: float
    gamma_u_cap: float
    slot: int = 0
    z_offset: float = 0.0


class EnergyAction(NamedTuple):
    e: float
    q: float
    d_rate: float
    s_r: float
    regime: str


@dataclass(frozen=True)
class ControlDecision:
    """Everything chosen in one slot, plus the implied usage and entry cost."""

    e: float
    q: float
    d_rate: float
    s_w: float
    s_r: float
    delay: int
    gamma_u: float
    gamma_d: float
    usage_amount: float
    entry_cost: float
    regime: str


@dataclass(frozen=True)
class DriftBound:
    """Constant upper bound on the per-slot quadratic queue-growth terms."""

    g: float


def design_params(
    battery: BatteryParams,
    grid: GridParams,
    costs: CostModel,
    weights: Weights,
    horizon: int,
) -> tuple[float, float]:
    """Compute the shift constant a_o and the largest admissible weight v_max.

    a_o places the battery-level queue so that any v in [0, v_max] keeps the
    battery inside [b_min, b_max] at every slot. Returns (a_o, v_max), with
    a_o evaluated at the v actually in use (weights.v, defaulting to v_max).
    """
    gamma_u = max(battery.r_max, battery.d_max_rate)
    marginal = costs.usage_cost_derivative(gamma_u)
    headroom = (
        battery.b_max - battery.b_min - battery.r_max - battery.d_max_rate
        - 2.0 * gamma_u - abs(weights.delta_u)
    )
    v_max = headroom / (grid.p_max + marginal)
    if v_max <= 0.0:
        raise ConfigurationError(
            f"battery window too small for any feasible weight: v_max = {v_max:.6g} <= 0"
        )
    v = weights.v if weights.v is not None else v_max
    delta_per_slot = weights.delta_u / horizon if horizon > 0 else 0.0
    a_o = (
        battery.b_min + v * grid.p_max + v * marginal + gamma_u + battery.d_max_rate
        + delta_per_slot
    )
    if weights.delta_u < 0.0:
        a_o -= weights.delta_u
    return a_o, v_max


def init_state(
    battery: BatteryParams,
    a_o: float,
    v: float,
    gamma_u_cap: float,
    z0_mode: str = "shifted",
) -> ControllerState:
    """Fresh state at slot 0: empty queues, battery at its initial level.

    z0_mode picks the battery-queue origin. "shifted" (default) starts z at
    b_init - a_o, which is what the battery-bounds guarantee assumes; "zero"
    starts z at 0, leaving a constant offset that the shift identity carries
    for the rest of the run.
    """
    if z0_mode == "shifted":
        z0 = battery.b_init - a_o
    elif z0_mode == "zero":
        z0 = 0.0
    else:
        raise ValueError(f"z0_mode must be 'shifted' or 'zero', got {z0_mode!r}")
    return ControllerState(
        z=z0,
        x=0.0,
        h_u=0.0,
        h_d=0.0,
        b=battery.b_init,
        a_o=a_o,
        v=v,
        gamma_u_cap=gamma_u_cap,
        slot=0,
        z_offset=z0 - (battery.b_init - a_o),
    )


def schedule_load(state: ControllerState, task: LoadTask, mu: float, effective_d_max: int) -> int:
    """Choose the service delay for the task arriving this slot.

    Compares the queue-weighted cost of serving now against the cheapest
    nonzero delay; the answer is always 0, 1, or the cap. Ties go to
    immediate service.
    """
    d_cap = min(effective_d_max, task.max_delay)
    if d_cap <= 0:
        return 0
    omega_o = -task.intensity * (state.z - abs(state.h_u))
    backlog = state.x - state.h_d
    if backlog >= 0.0:
        return 0 if omega_o <= mu * backlog else 1
    return 0 if omega_o <= mu * d_cap * backlog else d_cap


def aux_solution(h: float, v: float, beta: float, cost: CostFunction, cap: float) -> float:
    """Optimal auxiliary stand-in gamma* in [0, cap] for backlog h.

    Minimizes h*gamma + v*beta*C(gamma): 0 when the backlog is nonnegative,
    the cap when the backlog outweighs the marginal cost there, and the
    marginal-cost inversion in between. v*beta = 0 degenerates to a bang-bang
    choice (the limit of the general rule).
    """
    if cap <= 0.0 or h >= 0.0:
        return 0.0
    vb = v * beta
    if vb <= 0.0:
        return cap
    if h < -vb * cost.derivative(cap):
        return cap
    return cost.inverse_derivative(-h / vb)


def renewable_split(demand: float, renewable: float) -> float:
    """Renewable serves the current demand first; the rest may be stored."""
    return min(demand, renewable)


def _entry_cost(q: float, s_r: float, d_rate: float, battery: BatteryParams) -> float:
    cost = 0.0
    if q + s_r > 0.0:
        cost += battery.c_rc
    if d_rate > 0.0:
        cost += battery.c_dc
    return cost


def energy_objective(
    action: EnergyAction,
    key1: float,
    key2: float,
    v: float,
    battery: BatteryParams,
) -> float:
    """Queue-weighted per-slot value of an energy action (lower is better)."""
    return action.e * key1 + action.s_r * key2 + v * _entry_cost(action.q, action.s_r, action.d_rate, battery)


def energy_control(
    state: ControllerState,
    demand_l: float,
    s_w: float,
    renewable: float,
    price: float,
    battery: BatteryParams,
    grid: GridParams,
) -> EnergyAction:
    """Choose the grid purchase and battery flows for this slot.

    The sign pattern of key2 = z - h_u and key1 = key2 + v*price selects the
    battery regime to consider: key1 <= 0 favors charging, key2 >= 0 favors
    discharging, and the mixed band considers both directions at once (at most
    one of them is actually available, because the renewable surplus and the
    residual demand cannot both be positive). The regime's candidate action is
    taken only if it beats staying idle strictly; ties stay idle.

    Raises InfeasibleSlot when the chosen action needs a grid purchase above
    e_max — the candidates never need more grid energy than idling does, so
    this means no admissible action exists for the slot.
    """
    residual = demand_l - s_w
    surplus = renewable - s_w
    key2 = state.z - state.h_u
    key1 = key2 + state.v * price
    idle = EnergyAction(e=residual, q=0.0, d_rate=0.0, s_r=0.0, regime="idle")
    idle_value = energy_objective(idle, key1, key2, state.v, battery)

    if key1 <= 0.0:
        s_r = min(surplus, battery.r_max)
        q = min(battery.r_max - s_r, grid.e_max - residual)
        if q < 0.0:
            q = 0.0  # no grid headroom left; charge from the surplus alone
        candidate = EnergyAction(e=residual + q, q=q, d_rate=0.0, s_r=s_r, regime="charge")
    elif key2 < 0.0:
        d_rate = min(residual, battery.d_max_rate)
        s_r = min(surplus, battery.r_max)
        regime = "charge" if s_r > 0.0 else "discharge"
        candidate = EnergyAction(e=residual - d_rate, q=0.0, d_rate=d_rate, s_r=s_r, regime=regime)
    else:
        d_rate = min(residual, battery.d_max_rate)
        candidate = EnergyAction(e=residual - d_rate, q=0.0, d_rate=d_rate, s_r=0.0, regime="discharge")

    chosen = idle
    if energy_objective(candidate, key1, key2, state.v, battery) < idle_value:
        if candidate.q > 0.0 or candidate.s_r > 0.0 or candidate.d_rate > 0.0:
            chosen = candidate

    if chosen.e > grid.e_max + 1e-12:
        raise InfeasibleSlot(
            state.slot,
            chosen.e,
            grid.e_max,
            f"regime={chosen.regime}, residual demand {residual:.6f}",
        )
    return chosen


def update_queues(
    state: ControllerState,
    decision: ControlDecision,
    d_avg_max: int,
    delta_u: float,
    horizon: int,
) -> ControllerState:
    """Advance every queue and the battery by one slot.

    Re-asserts the shift identity between z and the battery level; a violation
    means a bug in the flow accounting, not bad input, so it raises
    StateConsistencyError.
    """
    net_flow = decision.q + decision.s_r - decision.d_rate
    shift = delta_u / horizon
    nxt = replace(
        state,
        x=max(state.x + decision.delay - d_avg_max, 0.0),
        z=state.z + net_flow - shift,
        h_u=state.h_u + decision.gamma_u - decision.usage_amount,
        h_d=state.h_d + decision.gamma_d - decision.delay,
        b=state.b + net_flow,
        slot=state.slot + 1,
    )
    drift = nxt.z - (nxt.b - (nxt.a_o + shift * nxt.slot)) - nxt.z_offset
    if abs(drift) > _IDENTITY_TOL:
        raise StateConsistencyError(
            f"slot {nxt.slot}: battery-queue shift identity drifted by {drift:.3e}"
        )
    return nxt


def drift_bound_G(
    battery: BatteryParams,
    weights: Weights,
    per_load_d_max: int,
    horizon: int,
) -> DriftBound:
    """Constant bounding the quadratic queue-growth terms of a single slot.

    per_load_d_max is the largest per-load delay cap over the whole trace.
    """
    shift = weights.delta_u / horizon
    g = (
        0.5 * max((battery.r_max - shift) ** 2, (battery.d_max_rate + shift) ** 2)
        + 0.5 * max(battery.r_max**2, battery.d_max_rate**2)
        + 0.5 * weights.mu * max(float(weights.d_avg_max) ** 2, float(per_load_d_max - weights.d_avg_max) ** 2)
        + 0.5 * weights.mu * float(per_load_d_max) ** 2
    )
    return DriftBound(g=g)


def lyapunov(state: ControllerState, mu: float) -> float:
    """Quadratic size of the queue vector."""
    return 0.5 * (state.z**2 + state.h_u**2 + mu * (state.x**2 + state.h_d**2))


def drift_upper_bound(
    state: ControllerState,
    decision: ControlDecision,
    active_demand: float,
    g: float,
    weights: Weights,
    horizon: int,
) -> float:
    """Per-slot upper bound on lyapunov(next) - lyapunov(current).

    active_demand is the total demand served this slot (it already reflects
    the slot's own scheduling choice). Every quantity here is observable, so
    the bound can be asserted slot by slot during a run.
    """
    shift = weights.delta_u / horizon
    return (
        state.z * (decision.e + decision.s_r + decision.s_w - active_demand - shift)
        + state.h_u * decision.gamma_u
        - state.h_u * (decision.e + decision.s_r)
        + weights.mu * state.x * (decision.delay - weights.d_avg_max)
        + g
        - abs(state.h_u) * (decision.s_w - active_demand)
        + weights.mu * state.h_d * (decision.gamma_d - decision.delay)
    )
