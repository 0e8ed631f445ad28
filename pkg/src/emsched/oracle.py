"""Brute-force ground truth and bound checkers for the online controller.

Three layers of independent verification live here:

* per-slot grid searches over each control subproblem, used to confirm the
  closed-form rules are actual minimizers,
* an exhaustive short-frame look-ahead optimizer (non-causal, sees the whole
  frame) that lower-bounds what any policy could pay on that frame under the
  frame-local reference constraints, and
* checkers for the performance bound, the delay-margin bound, the usage
  mismatch bound, and Jensen consistency of the auxiliary averages.

The look-ahead optimizer is deliberately a lattice search, not an LP/QP: at
desk scale it is exact within one grid step per energy coordinate and needs
no solver to trust.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence

import numpy as np

from . import controller
from .controller import ControlDecision, ControllerState, DriftBound
from .model import (
    BatteryParams,
    CostFunction,
    GridParams,
    InfeasibleSlot,
    ModelBundle,
)
from .scenario import LoadTask, SlotInput, Trace
from .simulator import RunSummary, SlotRecord

_FEAS_TOL = 1e-9


class SearchSpaceError(RuntimeError):
    """The requested lattice search is too large to enumerate."""

    def __init__(self, nodes: float, limit: float, suggested_step: float):
        self.nodes = nodes
        self.limit = limit
        self.suggested_step = suggested_step
        super().__init__(
            f"search space of ~{nodes:.2e} nodes exceeds the {limit:.0e} limit; "
            f"try energy_step >= {suggested_step:.4g}"
        )


@dataclass(frozen=True)
class GridSpec:
    """Lattice resolutions for the brute-force searches."""

    energy_step: float = 1e-3
    gamma_step: float = 1e-4
    max_nodes: float = 1e8

    def halved(self) -> "GridSpec":
        return GridSpec(self.energy_step / 2.0, self.gamma_step / 2.0, self.max_nodes)


@dataclass(frozen=True)
class CheckResult:
    """One verified inequality: achieved value, bound, and the verdict."""

    name: str
    passed: bool
    achieved: float
    bound: float
    detail: str = ""

    @property
    def margin(self) -> float:
        return self.bound - self.achieved


@dataclass(frozen=True)
class CheckReport:
    checks: tuple[CheckResult, ...]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def __iter__(self):
        return iter(self.checks)


# ---------------------------------------------------------------------------
# Per-slot subproblem oracles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SlotContext:
    """Everything the controller saw when it made a slot's decisions."""

    task: LoadTask | None
    demand_l: float
    s_w: float
    renewable: float
    price: float


class EnergyPoint(NamedTuple):
    e: float
    q: float
    d_rate: float
    s_r: float
    regime: str


@dataclass(frozen=True)
class SubproblemArgmins:
    delay: int
    delay_value: float
    gamma_u: float
    gamma_u_value: float
    gamma_d: float
    gamma_d_value: float
    energy: EnergyPoint
    energy_value: float


def oracle_schedule(state: ControllerState, task: LoadTask, mu: float, effective_d_max: int) -> tuple[int, float]:
    """Enumerate the scheduling subproblem over its whole integer range."""
    d_cap = min(int(effective_d_max), task.max_delay)
    weight = mu * (state.x - state.h_d)
    start_now = task.intensity * (abs(state.h_u) - state.z)
    best_d, best_v = 0, start_now
    for d in range(1, max(d_cap, 0) + 1):
        v = weight * d
        if v < best_v:
            best_d, best_v = d, v
    return best_d, best_v


def oracle_aux(h: float, v: float, beta: float, cost: CostFunction, cap: float, step: float = 1e-4) -> tuple[float, float]:
    """Grid-search the auxiliary subproblem min_{0<=g<=cap} h*g + v*beta*C(g)."""
    if cap <= 0.0:
        return 0.0, 0.0
    grid = np.arange(0.0, cap, step)
    grid = np.append(grid, cap)
    # Quadratic (and any numpy-broadcastable) costs evaluate the whole lattice
    # at once; fall back to per-point evaluation for scalar-only callables.
    try:
        batched = np.asarray(cost.value(grid), dtype=float)
    except Exception:
        batched = None
    if batched is not None and batched.shape == grid.shape:
        values = h * grid + v * beta * batched
    else:
        values = np.array([h * g + v * beta * cost.value(float(g)) for g in grid])
    i = int(np.argmin(values))
    return float(grid[i]), float(values[i])


def oracle_energy(
    state: ControllerState,
    demand_l: float,
    s_w: float,
    renewable: float,
    price: float,
    battery: BatteryParams,
    grid: GridParams,
    step: float = 1e-3,
) -> tuple[EnergyPoint, float]:
    """Grid-search the energy subproblem over (E, Q, D, S_r) with balance pinned.

    Scan order (idle, then charge, then discharge, each coordinate ascending)
    makes ties resolve toward idle and toward smaller flows, matching the
    closed-form rule's tie-breaking.
    """
    residual = demand_l - s_w
    surplus = renewable - s_w
    key2 = state.z - state.h_u
    key1 = key2 + state.v * price

    best: EnergyPoint | None = None
    best_v = math.inf

    if residual <= grid.e_max + _FEAS_TOL:
        best = EnergyPoint(residual, 0.0, 0.0, 0.0, "idle")
        best_v = residual * key1

    s_r_grid = _lattice(min(surplus, battery.r_max), step)
    q_grid = _lattice(min(battery.r_max, grid.e_max - residual), step)
    values = (
        (residual + q_grid[None, :]) * key1
        + s_r_grid[:, None] * key2
        + state.v * battery.c_rc
    )
    ok = (q_grid[None, :] <= battery.r_max - s_r_grid[:, None] + _FEAS_TOL) & (
        s_r_grid[:, None] + q_grid[None, :] > 0.0
    )
    if residual > grid.e_max + _FEAS_TOL:
        ok[:] = False  # even the idle purchase is over the cap; charging buys more
    if ok.any():
        masked = np.where(ok, values, np.inf)
        i, j = np.unravel_index(int(np.argmin(masked)), masked.shape)
        if masked[i, j] < best_v:
            best = EnergyPoint(residual + float(q_grid[j]), float(q_grid[j]), 0.0, float(s_r_grid[i]), "charge")
            best_v = float(masked[i, j])

    d_grid = _lattice(min(battery.d_max_rate, residual), step)
    e_grid = residual - d_grid
    ok_d = (d_grid > 0.0) & (e_grid <= grid.e_max + _FEAS_TOL)
    if ok_d.any():
        dis_values = np.where(ok_d, e_grid * key1 + state.v * battery.c_dc, np.inf)
        k = int(np.argmin(dis_values))
        if dis_values[k] < best_v:
            best = EnergyPoint(float(e_grid[k]), 0.0, float(d_grid[k]), 0.0, "discharge")
            best_v = float(dis_values[k])

    if best is None:
        raise InfeasibleSlot(state.slot, residual, grid.e_max, "grid oracle found no feasible point")
    return best, best_v


def _lattice(cap: float, step: float) -> np.ndarray:
    """0, step, 2*step, ... up to cap, plus the cap itself when it is off-grid."""
    if cap <= 0.0:
        return np.zeros(1)
    n = int(math.floor(cap / step + 1e-12))
    pts = np.arange(n + 1) * step
    if cap - pts[-1] > 1e-12:
        pts = np.append(pts, cap)
    return pts


def subproblem_oracles(
    state: ControllerState,
    inputs: SlotContext,
    bundle: ModelBundle,
    grid: GridSpec = GridSpec(),
) -> SubproblemArgmins:
    """Brute-force all four per-slot subproblems the controller solves in closed form."""
    weights = bundle.weights
    if inputs.task is not None:
        delay, delay_value = oracle_schedule(state, inputs.task, weights.mu, inputs.task.max_delay)
        gamma_d_cap = float(min(inputs.task.max_delay, weights.d_avg_max))
    else:
        delay, delay_value = 0, 0.0
        gamma_d_cap = float(weights.d_avg_max)
    gamma_u, gamma_u_value = oracle_aux(
        state.h_u, state.v, 1.0, bundle.costs.usage, state.gamma_u_cap, grid.gamma_step
    )
    gamma_d, gamma_d_value = oracle_aux(
        state.h_d, state.v, weights.alpha / weights.mu, bundle.costs.delay, gamma_d_cap, grid.gamma_step
    )
    energy, energy_value = oracle_energy(
        state, inputs.demand_l, inputs.s_w, inputs.renewable, inputs.price,
        bundle.battery, bundle.grid, grid.energy_step,
    )
    return SubproblemArgmins(
        delay=delay, delay_value=delay_value,
        gamma_u=gamma_u, gamma_u_value=gamma_u_value,
        gamma_d=gamma_d, gamma_d_value=gamma_d_value,
        energy=energy, energy_value=energy_value,
    )


# ---------------------------------------------------------------------------
# Frame look-ahead optimizer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Frame:
    """A contiguous slice of the horizon plus the battery level entering it."""

    start: int
    slots: tuple[SlotInput, ...]
    boundary_b: float

    def __post_init__(self):
        if not self.slots:
            raise ValueError("frame must contain at least one slot")
        for i, s in enumerate(self.slots):
            if s.slot != self.start + i:
                raise ValueError(f"frame slots not contiguous at index {i}")

    @property
    def length(self) -> int:
        return len(self.slots)


class OracleDecision(NamedTuple):
    slot: int
    price: float
    demand: float
    e: float
    q: float
    d_rate: float
    s_w: float
    s_r: float


@dataclass(frozen=True)
class OracleSolution:
    """Optimal frame plan found by the lattice search."""

    frame_start: int
    frame_length: int
    u_opt: float
    energy_step: float
    decisions: tuple[OracleDecision, ...]
    delays: tuple[tuple[int, int], ...]  # (arrival slot, chosen delay)
    delay_sum: int
    usage_sum: float
    purchase_entry_sum: float


def frames_from_run(trace: Trace, run: RunSummary, frame_length: int) -> list[Frame]:
    """Partition the horizon into frames, conditioning each on the run's battery level."""
    horizon = trace.horizon
    if frame_length < 1 or horizon % frame_length != 0:
        raise ValueError(f"frame length {frame_length} must divide the horizon {horizon}")
    frames = []
    for start in range(0, horizon, frame_length):
        frames.append(
            Frame(
                start=start,
                slots=trace.slots[start : start + frame_length],
                boundary_b=run.records[start].b,
            )
        )
    return frames


def _delay_choices(frame: Frame) -> tuple[list[tuple[int, LoadTask]], list[range]]:
    """Arrival positions and the delay range for each.

    Delays pushing service entirely past the frame all induce the same (empty)
    in-frame demand, so the range stops at the first such delay; the dedup
    step keeps the cheapest representative anyway.
    """
    arrivals = [(p, s.task) for p, s in enumerate(frame.slots) if s.task is not None]
    T = frame.length
    choices = [range(0, min(task.max_delay, T - p) + 1) for p, task in arrivals]
    return arrivals, choices


def _demand_profile(frame: Frame, arrivals, combo) -> np.ndarray:
    T = frame.length
    demand = np.zeros(T)
    for (p, task), d in zip(arrivals, combo):
        start = p + d
        stop = min(start + task.duration, T)
        if start < T:
            demand[start:stop] += task.intensity
    return demand


def _slot_actions(
    demand: np.ndarray,
    frame: Frame,
    battery: BatteryParams,
    grid_params: GridParams,
    h: float,
    k_charge: int,
    k_discharge: int,
) -> list[list[tuple[int, float]]]:
    """Feasible lattice flows and their slot cost (purchase + entry) per slot."""
    actions: list[list[tuple[int, float]]] = []
    for p, slot in enumerate(frame.slots):
        s_w = min(demand[p], slot.renewable)
        residual = demand[p] - s_w
        surplus = slot.renewable - s_w
        feasible: list[tuple[int, float]] = []
        if residual <= grid_params.e_max + _FEAS_TOL:
            feasible.append((0, residual * slot.price))
        for k in range(1, k_charge + 1):
            flow = k * h
            if flow > battery.r_max + _FEAS_TOL:
                break
            q = max(flow - surplus, 0.0)
            e = residual + q
            if e > grid_params.e_max + _FEAS_TOL:
                break
            feasible.append((k, e * slot.price + battery.c_rc))
        for k in range(1, k_discharge + 1):
            d = k * h
            if d > min(battery.d_max_rate, residual) + _FEAS_TOL:
                break
            e = residual - d
            if e > grid_params.e_max + _FEAS_TOL:
                continue
            feasible.append((-k, e * slot.price + battery.c_dc))
        actions.append(feasible)
    return actions


def lookahead_optimum(frame: Frame, bundle: ModelBundle, grid: GridSpec = GridSpec()) -> OracleSolution:
    """Exhaustively solve the frame-local reference problem on an energy lattice.

    Search space: all per-arrival delay choices (delays whose service falls
    entirely past the frame are merged into one representative), crossed with
    all lattice-valued battery flows per slot. The plan must respect battery
    bounds every slot, end with frame-total net flow equal to the frame's
    share of the target shift, and keep the frame-averaged delay within the
    long-run cap. Averaged usage and delay are priced through the convex cost
    functions once per frame, which is where the optimum of the frame-local
    auxiliary variables lands.
    """
    T = frame.length
    h = grid.energy_step
    battery, grid_params, weights = bundle.battery, bundle.grid, bundle.weights

    k_charge = int(math.floor(battery.r_max / h + _FEAS_TOL))
    k_discharge = int(math.floor(battery.d_max_rate / h + _FEAS_TOL))
    k_flow = max(k_charge, k_discharge)

    arrivals, choices = _delay_choices(frame)
    delay_budget = T * weights.d_avg_max

    # Deduplicate delay combinations by the in-frame demand profile they induce;
    # the cheapest total delay wins because the delay cost is increasing. The
    # all-zero combination always meets the frame delay budget, so at least one
    # profile survives.
    profiles: dict[tuple, tuple[np.ndarray, int, tuple[int, ...]]] = {}
    for combo in itertools.product(*choices):
        if sum(combo) > delay_budget:
            continue
        demand = _demand_profile(frame, arrivals, combo)
        key = tuple(np.round(demand, 12))
        kept = profiles.get(key)
        if kept is None or sum(combo) < kept[1]:
            profiles[key] = (demand, sum(combo), tuple(combo))

    # Battery offsets are indexed relative to the boundary level; the array
    # covers exactly the feasible window, so bounds are enforced by shape.
    o_lo = max(-T * k_discharge, int(math.ceil((battery.b_min - frame.boundary_b) / h - _FEAS_TOL)))
    o_hi = min(T * k_charge, int(math.floor((battery.b_max - frame.boundary_b) / h + _FEAS_TOL)))
    if not o_lo <= 0 <= o_hi:
        raise ValueError(f"frame boundary battery level {frame.boundary_b} violates the battery bounds")
    n_off = o_hi - o_lo + 1
    n_use = T * k_flow + 1

    target_net = T * weights.delta_u / bundle.horizon
    o_target = int(round(target_net / h))
    if not o_lo <= o_target <= o_hi:
        raise ValueError(f"frame net-flow target {target_net} kWh is outside the battery window")

    nodes = len(profiles) * T * n_off * n_use * (k_charge + k_discharge + 1)
    if nodes > grid.max_nodes:
        raise SearchSpaceError(nodes, grid.max_nodes, h * (nodes / grid.max_nodes) ** (1 / 3))

    usage_penalty = np.array([bundle.costs.usage_cost(j * h / T) for j in range(n_use)])

    best_value = math.inf
    best_profile: tuple[np.ndarray, int, tuple[int, ...]] | None = None
    best_usage_idx = -1
    for demand, delay_sum, combo in profiles.values():
        actions = _slot_actions(demand, frame, battery, grid_params, h, k_charge, k_discharge)
        if any(not feas for feas in actions):
            continue
        cost = _dp_forward(actions, n_off, n_use, o_lo)
        terminal = cost[o_target - o_lo]
        if not np.isfinite(terminal).any():
            continue
        totals = terminal / T + usage_penalty + weights.alpha * bundle.costs.delay_cost(delay_sum / T)
        idx = int(np.argmin(totals))
        if totals[idx] < best_value:
            best_value = float(totals[idx])
            best_profile = (demand, delay_sum, combo)
            best_usage_idx = idx
    if best_profile is None:
        raise InfeasibleSlot(frame.start, 0.0, grid_params.e_max, "no feasible frame plan on the lattice")

    demand, delay_sum, combo = best_profile
    actions = _slot_actions(demand, frame, battery, grid_params, h, k_charge, k_discharge)
    flows = _dp_backtrack(actions, n_off, n_use, o_lo, o_target, best_usage_idx)
    decisions = _build_decisions(frame, demand, flows, h)
    _assert_frame_feasible(frame, decisions, bundle)

    return OracleSolution(
        frame_start=frame.start,
        frame_length=T,
        u_opt=best_value,
        energy_step=h,
        decisions=decisions,
        delays=tuple((frame.start + p, d) for (p, _), d in zip(arrivals, combo)),
        delay_sum=delay_sum,
        usage_sum=sum(abs(k) for k in flows) * h,
        purchase_entry_sum=sum(
            cost for feas, k in zip(actions, flows) for kk, cost in feas if kk == k
        ),
    )


def _dp_forward(actions, n_off: int, n_use: int, o_lo: int) -> np.ndarray:
    """Min purchase+entry cost over (battery offset, cumulative usage) states."""
    cost = np.full((n_off, n_use), np.inf)
    cost[-o_lo, 0] = 0.0
    for feasible in actions:
        new = np.full_like(cost, np.inf)
        for k, c in feasible:
            a = abs(k)
            src = cost[max(0, -k) : n_off - max(0, k), : n_use - a]
            dst = new[max(0, k) : n_off - max(0, -k), a:]
            np.minimum(dst, src + c, out=dst)
        cost = new
    return cost


def _dp_backtrack(actions, n_off: int, n_use: int, o_lo: int, o_target: int, u_target: int) -> list[int]:
    """Re-run the DP keeping argmins, then recover the per-slot flow sequence."""
    cost = np.full((n_off, n_use), np.inf)
    cost[-o_lo, 0] = 0.0
    parents: list[np.ndarray] = []
    for feasible in actions:
        new = np.full_like(cost, np.inf)
        par = np.full(cost.shape, -(10**6), dtype=np.int32)
        for k, c in feasible:
            a = abs(k)
            src = cost[max(0, -k) : n_off - max(0, k), : n_use - a] + c
            dst_rows = slice(max(0, k), n_off - max(0, -k))
            better = src < new[dst_rows, a:]
            new[dst_rows, a:] = np.where(better, src, new[dst_rows, a:])
            par[dst_rows, a:] = np.where(better, k, par[dst_rows, a:])
        cost = new
        parents.append(par)
    i, j = o_target - o_lo, u_target
    flows: list[int] = []
    for par in reversed(parents):
        k = int(par[i, j])
        if k <= -(10**6):
            raise RuntimeError("backtrack fell off the DP table")  # bug trap
        flows.append(k)
        i -= k
        j -= abs(k)
    flows.reverse()
    return flows


def _build_decisions(frame: Frame, demand: np.ndarray, flows: Sequence[int], h: float) -> tuple[OracleDecision, ...]:
    out = []
    for p, (slot, k) in enumerate(zip(frame.slots, flows)):
        s_w = min(demand[p], slot.renewable)
        residual = demand[p] - s_w
        surplus = slot.renewable - s_w
        flow = k * h
        if k > 0:
            s_r = min(flow, surplus)
            q = flow - s_r
            e, d_rate = residual + q, 0.0
        elif k < 0:
            s_r = q = 0.0
            d_rate = -flow
            e = residual - d_rate
        else:
            s_r = q = d_rate = 0.0
            e = residual
        out.append(
            OracleDecision(
                slot=slot.slot, price=slot.price, demand=float(demand[p]),
                e=e, q=q, d_rate=d_rate, s_w=s_w, s_r=s_r,
            )
        )
    return tuple(out)


def _assert_frame_feasible(frame: Frame, decisions: tuple[OracleDecision, ...], bundle: ModelBundle) -> None:
    """Bug trap: the reconstructed plan must satisfy every per-slot validator."""
    b = frame.boundary_b
    battery, grid_params = bundle.battery, bundle.grid
    for dec in decisions:
        balance = dec.e - dec.q + dec.s_w + dec.d_rate - dec.demand
        if abs(balance) > 1e-9:
            raise RuntimeError(f"oracle slot {dec.slot}: balance off by {balance:.3e}")
        if dec.e < -1e-12 or dec.e > grid_params.e_max + 1e-9:
            raise RuntimeError(f"oracle slot {dec.slot}: purchase {dec.e} outside [0, E_max]")
        if (dec.q + dec.s_r > 0.0) and (dec.d_rate > 0.0):
            raise RuntimeError(f"oracle slot {dec.slot}: simultaneous charge and discharge")
        b += dec.q + dec.s_r - dec.d_rate
        if b < battery.b_min - 1e-9 or b > battery.b_max + 1e-9:
            raise RuntimeError(f"oracle slot {dec.slot}: battery level {b} outside bounds")


def recompute_frame_objective(sol: OracleSolution, bundle: ModelBundle) -> float:
    """Re-derive u_opt from the stored decisions; guards against stale values."""
    T = sol.frame_length
    purchase_entry = 0.0
    usage = 0.0
    for dec in sol.decisions:
        purchase_entry += dec.e * dec.price
        if dec.q + dec.s_r > 0.0:
            purchase_entry += bundle.battery.c_rc
        if dec.d_rate > 0.0:
            purchase_entry += bundle.battery.c_dc
        usage += abs(dec.q + dec.s_r - dec.d_rate)
    return (
        purchase_entry / T
        + bundle.costs.usage_cost(usage / T)
        + bundle.weights.alpha * bundle.costs.delay_cost(sol.delay_sum / T)
    )


# ---------------------------------------------------------------------------
# Bound checkers
# ---------------------------------------------------------------------------


def lookahead_grid_slack(bundle: ModelBundle, energy_step: float, frame_length: int) -> float:
    """Discretization allowance: one lattice step per slot, composed linearly.

    A lattice plan within one step of the continuous frame optimum misprices
    each slot's purchase by at most step*P_max, shifts the frame-averaged
    usage by at most one step, and may toggle at most one charge/discharge
    entry pair per frame.
    """
    marginal = bundle.costs.usage_cost_derivative(bundle.gamma_u_cap)
    return (
        energy_step * bundle.grid.p_max
        + energy_step * marginal
        + (bundle.battery.c_rc + bundle.battery.c_dc) / frame_length
    )


def _frames_gamma_d_cap(frames: Sequence[OracleSolution], bundle: ModelBundle, trace: Trace | None) -> float:
    if trace is not None:
        task_cap = trace.max_task_delay()
    else:
        task_cap = max((d for sol in frames for _, d in sol.delays), default=0)
    return float(min(max(task_cap, 0), bundle.weights.d_avg_max))


def lookahead_bound_check(
    run: RunSummary,
    frames: Sequence[OracleSolution],
    g: DriftBound,
    bundle: ModelBundle,
    trace: Trace | None = None,
) -> CheckReport:
    """Compare the run's average cost against the mean frame optimum plus the bound."""
    if not frames:
        raise ValueError("no frame solutions supplied")
    total_len = sum(sol.frame_length for sol in frames)
    if total_len != run.horizon:
        raise ValueError(f"frames cover {total_len} slots but the run horizon is {run.horizon}")
    frame_length = frames[0].frame_length
    if any(sol.frame_length != frame_length for sol in frames):
        raise ValueError("frames must all share one length (the horizon splits as M equal frames)")
    expected = 0
    for sol in sorted(frames, key=lambda f: f.frame_start):
        if sol.frame_start != expected:
            raise ValueError(f"frame starting at {sol.frame_start} does not begin where the previous one ended")
        expected += sol.frame_length

    recompute_err = max(abs(recompute_frame_objective(sol, bundle) - sol.u_opt) for sol in frames)
    consistency = CheckResult(
        name="frame_consistency",
        passed=recompute_err <= 1e-9,
        achieved=recompute_err,
        bound=1e-9,
        detail="frame objectives re-derived from stored decisions",
    )

    m = len(frames)
    lhs = run.total - sum(sol.u_opt for sol in frames) / m

    mu = bundle.weights.mu
    v = run.initial_state.v
    horizon = run.horizon
    l0 = controller.lyapunov(run.initial_state, mu)
    l_end = controller.lyapunov(run.state_at_horizon, mu)
    gamma_u_cap = bundle.gamma_u_cap
    gamma_d_cap = _frames_gamma_d_cap(frames, bundle, trace)
    cu_prime = bundle.costs.usage_cost_derivative(gamma_u_cap)
    cd_prime = bundle.costs.delay_cost_derivative(gamma_d_cap)
    rhs = (
        g.g * frame_length / v
        + (l0 - l_end) / (v * horizon)
        + (
            cu_prime * (run.initial_state.h_u - run.state_at_horizon.h_u)
            + bundle.weights.alpha * cd_prime * (run.initial_state.h_d - run.state_at_horizon.h_d)
        )
        / horizon
    )
    slack = lookahead_grid_slack(bundle, max(sol.energy_step for sol in frames), frame_length)
    bound_check = CheckResult(
        name="lookahead_bound",
        passed=lhs <= rhs + slack,
        achieved=lhs,
        bound=rhs + slack,
        detail=f"optimality gap vs mean frame optimum; grid slack {slack:.3e}",
    )
    return CheckReport((consistency, bound_check))


def margin_checks(run: RunSummary, g: DriftBound, bundle: ModelBundle) -> CheckReport:
    """Delay-margin and usage-mismatch bounds, plus the achieved delay cap."""
    weights = bundle.weights
    horizon = run.horizon
    x0 = run.initial_state.x
    x_end = run.state_at_horizon.x
    epsilon_d = (x_end - x0) / horizon
    l0 = controller.lyapunov(run.initial_state, weights.mu)
    d_bound = math.sqrt(2.0 * g.g / (weights.mu * horizon) + l0 / (weights.mu * horizon)) + abs(x0) / horizon
    delay_margin = CheckResult(
        name="delay_margin",
        passed=abs(epsilon_d) <= d_bound + _FEAS_TOL,
        achieved=abs(epsilon_d),
        bound=d_bound,
        detail=f"epsilon_d={epsilon_d:.6g}",
    )
    cap_slack = CheckResult(
        name="avg_delay_margin",
        passed=run.delay_avg - weights.d_avg_max <= d_bound + _FEAS_TOL,
        achieved=run.delay_avg - weights.d_avg_max,
        bound=d_bound,
        detail="average delay may exceed the cap by at most the margin bound",
    )
    achieved_cap = CheckResult(
        name="avg_delay_within_cap",
        passed=run.delay_avg <= weights.d_avg_max + _FEAS_TOL,
        achieved=run.delay_avg,
        bound=float(weights.d_avg_max),
        detail="observed average delay vs the long-run cap",
    )

    v = run.initial_state.v
    gamma_u_cap = bundle.gamma_u_cap
    u_bound = (
        2.0 * gamma_u_cap
        + bundle.battery.r_max
        + v * bundle.grid.p_max
        + v * bundle.costs.usage_cost_derivative(gamma_u_cap)
        + bundle.battery.d_max_rate
    )
    usage_mismatch = CheckResult(
        name="usage_mismatch",
        passed=abs(run.epsilon_u) <= u_bound + _FEAS_TOL,
        achieved=abs(run.epsilon_u),
        bound=u_bound,
        detail=f"epsilon_u={run.epsilon_u:.6g}",
    )
    return CheckReport((delay_margin, cap_slack, achieved_cap, usage_mismatch))


def feasibility_checks(run: RunSummary, bundle: ModelBundle) -> CheckReport:
    """Battery bounds, balance, charge/discharge exclusivity, and the shift identity.

    Everything is recomputed from the run's records (drain slots included),
    independent of the in-run assertions.
    """
    battery = bundle.battery
    shift = bundle.delta_per_slot
    a_o = run.initial_state.a_o
    z_offset = run.initial_state.z_offset

    bound_violation = 0.0
    balance_err = 0.0
    exclusive = 0
    identity_err = 0.0
    b = run.initial_state.b
    for r in run.records:
        if abs(r.b - b) > 1e-9:
            raise ValueError(f"records are not a contiguous run: battery jumps at slot {r.slot}")
        b_next = r.b + r.q + r.s_r - r.d_rate
        bound_violation = max(bound_violation, battery.b_min - b_next, b_next - battery.b_max)
        balance_err = max(balance_err, abs(r.e - r.q + r.s_w + r.d_rate - r.demand))
        if (r.q + r.s_r > 0.0) and (r.d_rate > 0.0):
            exclusive += 1
        z_next = r.z + (r.q + r.s_r - r.d_rate) - shift
        ideal = b_next - (a_o + shift * (r.slot + 1)) + z_offset
        identity_err = max(identity_err, abs(z_next - ideal))
        b = b_next

    return CheckReport(
        (
            CheckResult(
                name="battery_bounds",
                passed=bound_violation <= 1e-9,
                achieved=bound_violation,
                bound=0.0,
                detail="worst excursion beyond [b_min, b_max] after any slot",
            ),
            CheckResult(
                name="balance",
                passed=balance_err <= 1e-12,
                achieved=balance_err,
                bound=1e-12,
                detail="max |E - Q + S_w + D - demand| over all slots",
            ),
            CheckResult(
                name="exclusivity",
                passed=exclusive == 0,
                achieved=float(exclusive),
                bound=0.0,
                detail="slots charging and discharging simultaneously",
            ),
            CheckResult(
                name="shift_identity",
                passed=identity_err <= 1e-9,
                achieved=identity_err,
                bound=1e-9,
                detail="max drift of the battery-queue shift identity",
            ),
        )
    )


def _state_of_record(r: SlotRecord, template: ControllerState) -> ControllerState:
    return replace(template, z=r.z, x=r.x, h_u=r.h_u, h_d=r.h_d, b=r.b, slot=r.slot)


def drift_checks(run: RunSummary, g: DriftBound, bundle: ModelBundle, tol: float = 1e-9) -> CheckReport:
    """Per-slot quadratic drift never exceeds its constant-plus-linear bound."""
    weights = bundle.weights
    mu = weights.mu
    worst = -math.inf
    states = [_state_of_record(r, run.initial_state) for r in run.records] + [run.final_state]
    for r, state, nxt in zip(run.records, states, states[1:]):
        decision = ControlDecision(
            e=r.e, q=r.q, d_rate=r.d_rate, s_w=r.s_w, s_r=r.s_r, delay=r.delay,
            gamma_u=r.gamma_u, gamma_d=r.gamma_d,
            usage_amount=abs(r.q + r.s_r - r.d_rate),
            entry_cost=0.0, regime=r.regime,
        )
        drift = controller.lyapunov(nxt, mu) - controller.lyapunov(state, mu)
        bound = controller.drift_upper_bound(state, decision, r.demand, g.g, weights, bundle.horizon)
        worst = max(worst, drift - bound)
    return CheckReport(
        (
            CheckResult(
                name="drift_bound",
                passed=worst <= tol,
                achieved=worst,
                bound=0.0,
                detail="max over slots of drift minus its upper bound",
            ),
        )
    )


def sample_slot_states(
    bundle: ModelBundle,
    n: int,
    seed: int,
    a_o: float,
    v: float,
) -> list[tuple[ControllerState, SlotContext]]:
    """Random (queue state, slot context) pairs spanning all control regimes.

    Residual demand and surplus renewable are never both positive (the
    renewable split guarantees that in a real run), and residual demand stays
    under the grid cap so every sample admits a feasible action.
    """
    rng = np.random.default_rng(seed)
    battery, grid_params, weights = bundle.battery, bundle.grid, bundle.weights
    out = []
    for _ in range(n):
        state = ControllerState(
            z=float(rng.uniform(-1.5 * a_o - 1.0, battery.b_max)),
            x=float(rng.uniform(0.0, 2.0 * max(weights.d_avg_max, 1))),
            h_u=float(rng.uniform(-1.5, 1.5)),
            h_d=float(rng.uniform(-1.5 * max(weights.d_avg_max, 1), 1.5 * max(weights.d_avg_max, 1))),
            b=battery.b_init,
            a_o=a_o,
            v=v,
            gamma_u_cap=bundle.gamma_u_cap,
        )
        s_w = float(rng.uniform(0.0, 0.25))
        kind = rng.integers(0, 3)
        residual = float(rng.uniform(0.0, 0.9 * grid_params.e_max)) if kind == 0 else 0.0
        surplus = float(rng.uniform(0.0, 2.0 * battery.r_max)) if kind == 1 else 0.0
        task = None
        if rng.integers(0, 4) > 0:
            task = LoadTask(
                arrival_slot=0,
                intensity=float(rng.uniform(0.005, 0.3)),
                duration=int(rng.integers(1, 13)),
                max_delay=int(rng.integers(0, 2 * max(weights.d_avg_max, 1) + 1)),
            )
        out.append(
            (
                state,
                SlotContext(
                    task=task,
                    demand_l=s_w + residual,
                    s_w=s_w,
                    renewable=s_w + surplus,
                    price=float(rng.uniform(grid_params.p_min, grid_params.p_max)),
                ),
            )
        )
    return out


def equivalence_battery(
    bundle: ModelBundle,
    n_states: int,
    seed: int,
    grid: GridSpec = GridSpec(),
    corrupt: str | None = None,
) -> CheckReport:
    """Closed-form rules vs grid search over randomized states.

    The scheduling rule must match exactly; the auxiliary argmins must land
    within one gamma step (their objectives are strictly convex); the energy
    rule must dominate every lattice point and sit within the lattice's
    one-step value slack. `corrupt` is a test hook: "negate_omega" flips the
    sign of the immediate-service weight before calling the closed form, which
    a sound comparison must detect.
    """
    a_o, v_max = controller.design_params(
        bundle.battery, bundle.grid, bundle.costs, bundle.weights, bundle.horizon
    )
    v = bundle.weights.v if bundle.weights.v is not None else v_max
    weights = bundle.weights
    samples = sample_slot_states(bundle, n_states, seed, a_o, v)

    schedule_bad = aux_bad = dominance_bad = slack_bad = 0
    for state, ctx in samples:
        if ctx.task is not None:
            closed_state = state
            if corrupt == "negate_omega":
                closed_state = replace(state, z=-(state.z - abs(state.h_u)), h_u=0.0)
            closed_d = controller.schedule_load(closed_state, ctx.task, weights.mu, ctx.task.max_delay)
            oracle_d, _ = oracle_schedule(state, ctx.task, weights.mu, ctx.task.max_delay)
            if closed_d != oracle_d:
                schedule_bad += 1
            gamma_d_cap = float(min(ctx.task.max_delay, weights.d_avg_max))
        else:
            gamma_d_cap = float(weights.d_avg_max)

        for h, beta, cost, cap in (
            (state.h_u, 1.0, bundle.costs.usage, state.gamma_u_cap),
            (state.h_d, weights.alpha / weights.mu, bundle.costs.delay, gamma_d_cap),
        ):
            closed_g = controller.aux_solution(h, v, beta, cost, cap)
            grid_g, _ = oracle_aux(h, v, beta, cost, cap, grid.gamma_step)
            if abs(closed_g - grid_g) > grid.gamma_step + 1e-9:
                aux_bad += 1

        action = controller.energy_control(
            state, ctx.demand_l, ctx.s_w, ctx.renewable, ctx.price, bundle.battery, bundle.grid
        )
        key2 = state.z - state.h_u
        key1 = key2 + state.v * ctx.price
        closed_v = controller.energy_objective(action, key1, key2, state.v, bundle.battery)
        _, grid_v = oracle_energy(
            state, ctx.demand_l, ctx.s_w, ctx.renewable, ctx.price,
            bundle.battery, bundle.grid, grid.energy_step,
        )
        if closed_v > grid_v + 1e-9:
            dominance_bad += 1
        if grid_v > closed_v + grid.energy_step * (abs(key1) + abs(key2)) + 1e-9:
            slack_bad += 1

    def count_check(name: str, count: int, detail: str) -> CheckResult:
        return CheckResult(name=name, passed=count == 0, achieved=float(count), bound=0.0, detail=detail)

    return CheckReport(
        (
            count_check("schedule_equivalence", schedule_bad, f"delay mismatches over {n_states} states"),
            count_check("aux_equivalence", aux_bad, "auxiliary argmins off by more than one gamma step"),
            count_check("energy_dominance", dominance_bad, "closed form beaten by a lattice point"),
            count_check("energy_slack", slack_bad, "lattice best further than one-step value slack"),
        )
    )


def jensen_check(run: RunSummary, bundle: ModelBundle, tol: float = 1e-9) -> CheckReport:
    """Average of convex costs dominates the cost of the average, per run."""
    records = [r for r in run.records if r.in_horizon]
    if not records:
        raise ValueError("run has no in-horizon records")
    gamma_u = [r.gamma_u for r in records]
    gamma_d = [r.gamma_d for r in records]
    checks = []
    for name, values, fn in (
        ("jensen_usage", gamma_u, bundle.costs.usage_cost),
        ("jensen_delay", gamma_d, bundle.costs.delay_cost),
    ):
        mean_of_cost = sum(fn(g) for g in values) / len(values)
        cost_of_mean = fn(sum(values) / len(values))
        gap = cost_of_mean - mean_of_cost
        checks.append(
            CheckResult(
                name=name,
                passed=gap <= tol,
                achieved=gap,
                bound=tol,
                detail="cost of mean minus mean of cost (convexity says <= 0)",
            )
        )
    return CheckReport(tuple(checks))
