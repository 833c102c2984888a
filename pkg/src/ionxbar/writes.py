"""Write scheduling over a crossbar and phase-by-phase execution.

A plan groups target cells into write phases (sets of simultaneous pulses).
How many phases a full-array update needs is the figure of merit:

================  ==========================  ==========
policy            topology                    phases
================  ==========================  ==========
sequential        either                      M * N
row-parallel      either                      M
full-parallel     proposed only               1
half-select-v2    conventional only           M * N
================  ==========================  ==========

Execution is closed-loop in pulse width: each target's width is computed
from its charge at the start of its phase by inverting the device law.
Within a phase the bias is piecewise constant; it changes whenever a target
finishes and its lines are released, and the network is re-solved then.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .device import (
    PROGRAMMING_VOLTAGE,
    DeviceParams,
    charge_of_conductance,
    conductance_of_charge,
    effective_rate,
    integrate_charge,
)
from .network import (
    BiasConfig,
    CrossbarArray,
    Disturbance,
    TopologyKind,
    build_nodal_system,
    clm,
    clp,
    col_line,
    row_line,
    solve,
    write_disturbance,
)

# relative slack when checking targets against the conductance window
_WINDOW_RTOL = 1e-12
# charge changes below this fraction of q_max are treated as already on target
_SKIP_QTOL = 1e-12


class PolicyKind(str, enum.Enum):
    SEQUENTIAL = "sequential-cellwise"
    ROW_PARALLEL = "row-parallel"
    FULL_PARALLEL = "full-parallel"
    HALF_SELECT_V2 = "half-select-v2"


class WriteError(Exception):
    code = "WRITE_ERROR"


class PolicyTopologyMismatch(WriteError):
    code = "POLICY_TOPOLOGY_MISMATCH"


class UnreachableTarget(WriteError):
    code = "UNREACHABLE_TARGET"

    def __init__(self, message, cells=()):
        self.cells = list(cells)
        super().__init__(message)


class WrongPolarity(WriteError):
    code = "WRONG_POLARITY"


@dataclass(frozen=True)
class WritePolicy:
    kind: PolicyKind = PolicyKind.FULL_PARALLEL
    pulse_voltage: float = PROGRAMMING_VOLTAGE
    # length of one scheduler slot; phases occupy a whole number of slots
    pulse_dt: float = 30.0
    # how conventional-array lines that are not selected are biased
    unselected: str = "floating"

    def __post_init__(self):
        object.__setattr__(self, "kind", PolicyKind(self.kind))
        if not self.pulse_dt > 0:
            raise ValueError("pulse_dt must be > 0")
        if not self.pulse_voltage > 0:
            raise ValueError("pulse_voltage must be > 0 (polarity is chosen per cell)")
        if self.unselected not in ("floating", "grounded"):
            raise ValueError("unselected must be 'floating' or 'grounded'")


def check_compatible(policy: WritePolicy, kind: TopologyKind):
    kind = TopologyKind(kind)
    if policy.kind is PolicyKind.HALF_SELECT_V2 and kind is not TopologyKind.CONVENTIONAL:
        raise PolicyTopologyMismatch("half-select-v2 needs shared rails (conventional topology)")
    if policy.kind is PolicyKind.FULL_PARALLEL and kind is not TopologyKind.PROPOSED:
        raise PolicyTopologyMismatch("full-parallel needs isolated control loops (proposed topology)")


class CellTarget(NamedTuple):
    i: int
    j: int
    g: float


@dataclass(frozen=True)
class WritePlan:
    shape: tuple[int, int]
    phases: tuple

    @property
    def phase_count(self) -> int:
        return len(self.phases)

    def cells(self):
        return [(c.i, c.j) for phase in self.phases for c in phase]


def expected_phase_count(kind: PolicyKind, rows: int, cols: int) -> int:
    kind = PolicyKind(kind)
    if kind is PolicyKind.FULL_PARALLEL:
        return 1
    if kind is PolicyKind.ROW_PARALLEL:
        return rows
    return rows * cols


def plan_writes(target_g, policy: WritePolicy, params: DeviceParams) -> WritePlan:
    target_g = np.asarray(target_g, dtype=float)
    if target_g.ndim != 2:
        raise ValueError("target conductance must be an M x N matrix")
    lo, hi = params.g_min, params.g_max
    bad = ~((target_g >= lo * (1 - _WINDOW_RTOL)) & (target_g <= hi * (1 + _WINDOW_RTOL)))
    if np.any(bad):
        cells = [(int(i), int(j)) for i, j in zip(*np.nonzero(bad))]
        raise UnreachableTarget(
            f"target conductance outside [{lo:.6g}, {hi:.6g}] S at cells {cells}", cells
        )
    rows, cols = target_g.shape
    cell = lambda i, j: CellTarget(i, j, float(np.clip(target_g[i, j], lo, hi)))  # noqa: E731
    if policy.kind is PolicyKind.FULL_PARALLEL:
        phases = (tuple(cell(i, j) for i in range(rows) for j in range(cols)),)
    elif policy.kind is PolicyKind.ROW_PARALLEL:
        phases = tuple(tuple(cell(i, j) for j in range(cols)) for i in range(rows))
    else:
        phases = tuple((cell(i, j),) for i in range(rows) for j in range(cols))
    return WritePlan(shape=(rows, cols), phases=phases)


def pulse_width_for_target(current_q: float, target_q: float, params: DeviceParams, v_p: float) -> float:
    """Pulse duration that carries the charge from ``current_q`` to ``target_q``.

    Inverts the saturating insertion law for ``v_p > 0`` and the
    proportional extraction law for ``v_p < 0``.
    """
    q_max = params.q_max
    for name, q in (("current_q", current_q), ("target_q", target_q)):
        if not 0 <= q <= q_max:
            raise UnreachableTarget(f"{name}={q!r} outside [0, q_max={q_max!r}]")
    if target_q == current_q:
        return 0.0
    rate = float(effective_rate(params, v_p))
    if target_q > current_q:
        if not v_p > 0:
            raise WrongPolarity("raising the charge needs v_p > 0")
        if rate == 0:
            raise UnreachableTarget(f"|v_p|={abs(v_p)} is below the write threshold")
        if target_q == q_max:
            raise UnreachableTarget("q_max is approached only asymptotically")
        return -(q_max / rate) * math.log((q_max - target_q) / (q_max - current_q))
    if not v_p < 0:
        raise WrongPolarity("lowering the charge needs v_p < 0")
    if rate == 0:
        raise UnreachableTarget(f"|v_p|={abs(v_p)} is below the write threshold")
    if target_q == 0:
        raise UnreachableTarget("zero charge is approached only asymptotically")
    return (q_max / -rate) * math.log(current_q / target_q)


@dataclass
class PhaseRecord:
    index: int
    targets: list
    duration: float
    disturbance: Disturbance
    sneak_current_max: float
    g_after: np.ndarray


@dataclass
class WriteReport:
    phase_count: int
    executed_phases: int
    total_pulse_time: float
    slot_time: float
    achieved_G: np.ndarray
    target_G: np.ndarray
    target_error: float
    phases: list = field(default_factory=list)
    array: CrossbarArray | None = None

    @property
    def disturbance_l1(self) -> float:
        return float(sum(p.disturbance.l1 for p in self.phases))

    @property
    def disturbance_max(self) -> float:
        return float(max((p.disturbance.max_abs for p in self.phases), default=0.0))

    @property
    def sneak_current_max(self) -> float:
        return float(max((p.sneak_current_max for p in self.phases), default=0.0))

    def to_dict(self) -> dict:
        return {
            "phase_count": self.phase_count,
            "executed_phases": self.executed_phases,
            "total_pulse_time_s": self.total_pulse_time,
            "slot_time_s": self.slot_time,
            "target_error": self.target_error,
            "disturbance_l1_C": self.disturbance_l1,
            "disturbance_max_C": self.disturbance_max,
            "sneak_current_max_A": self.sneak_current_max,
            "achieved_G_S": self.achieved_G.tolist(),
            "target_G_S": self.target_G.tolist(),
            "phases": [
                {
                    "phase": p.index,
                    "duration_s": p.duration,
                    "targets": [[i, j] for i, j in p.targets],
                    "disturbance_l1_C": p.disturbance.l1,
                    "disturbance_max_C": p.disturbance.max_abs,
                    "sneak_current_max_A": p.sneak_current_max,
                }
                for p in self.phases
            ],
        }

    def disturbance_rows(self):
        """Rows ``(phase, cell_row, cell_col, dq_C, G_S)`` for every non-target cell."""
        for p in self.phases:
            rows, cols = p.disturbance.dq.shape
            for i in range(rows):
                for j in range(cols):
                    if p.disturbance.mask[i, j]:
                        yield (p.index, i, j, float(p.disturbance.dq[i, j]), float(p.g_after[i, j]))


def phase_bias(kind: TopologyKind, policy: WritePolicy, shape, active) -> BiasConfig:
    """Line voltages for the still-active ``(i, j, sign)`` pulses of a phase."""
    v = policy.pulse_voltage
    rows, cols = shape
    driven = {}
    if kind is TopologyKind.PROPOSED:
        for i, j, s in active:
            driven[clp(i, j)] = s * v
            driven[clm(i, j)] = 0.0
        return BiasConfig(driven)

    if policy.kind is PolicyKind.ROW_PARALLEL:
        (i0,) = {i for i, _, _ in active}
        driven[row_line(i0)] = 0.0
        for _, j, s in active:
            driven[col_line(j)] = -s * v
        if policy.unselected == "grounded":
            for i in range(rows):
                driven.setdefault(row_line(i), 0.0)
        return BiasConfig(driven)

    ((i0, j0, s),) = active
    driven[row_line(i0)] = s * v
    driven[col_line(j0)] = 0.0
    if policy.kind is PolicyKind.HALF_SELECT_V2:
        for i in range(rows):
            driven.setdefault(row_line(i), s * v / 2)
        for j in range(cols):
            driven.setdefault(col_line(j), s * v / 2)
    elif policy.unselected == "grounded":
        for i in range(rows):
            driven.setdefault(row_line(i), 0.0)
        for j in range(cols):
            driven.setdefault(col_line(j), 0.0)
    return BiasConfig(driven)


def _run_phase(array: CrossbarArray, policy: WritePolicy, pulses):
    """Apply one phase. ``pulses`` maps (i, j) -> (sign, width)."""
    params = array.params
    kind = array.topology.kind
    q = np.array(array.q, dtype=float)
    shape = q.shape
    events = sorted({w for _, w in pulses.values()})
    non_target = np.ones(shape, dtype=bool)
    for i, j in pulses:
        non_target[i, j] = False

    # each cell integrates over maximal runs of constant voltage, so a cell's
    # history does not depend on how the phase was cut into sub-intervals
    run_v = np.zeros(shape)
    run_start = np.zeros(shape)
    sneak_max = 0.0

    def flush(mask, t_end):
        sel = mask & (run_v != 0)
        if np.any(sel):
            q[sel] = integrate_charge(
                q[sel], effective_rate(params, run_v[sel]), t_end - run_start[sel], params.q_max
            )

    t_now = 0.0
    for t_end in events:
        active = [(i, j, s) for (i, j), (s, w) in sorted(pulses.items()) if w > t_now]
        bias = phase_bias(kind, policy, shape, active)
        # conductances frozen at the start of each sub-interval
        result = solve(build_nodal_system(array.with_charges(q), bias))
        v_cell = result.cell_voltages
        sneak_max = max(sneak_max, float(np.max(np.abs(result.cell_currents[non_target]), initial=0.0)))
        changed = v_cell != run_v
        flush(changed, t_now)
        run_v = np.where(changed, v_cell, run_v)
        run_start = np.where(changed, t_now, run_start)
        t_now = t_end
    flush(np.ones(shape, dtype=bool), t_now)
    return q, t_now, sneak_max


def execute_plan(array: CrossbarArray, plan: WritePlan, policy: WritePolicy) -> WriteReport:
    check_compatible(policy, array.topology.kind)
    if plan.shape != array.shape:
        raise ValueError(f"plan shape {plan.shape} does not match array {array.shape}")
    params = array.params
    target_g = np.full(array.shape, np.nan)
    for phase in plan.phases:
        for c in phase:
            target_g[c.i, c.j] = c.g

    records = []
    total_time = 0.0
    slot_time = 0.0
    for index, phase in enumerate(plan.phases):
        pulses = {}
        for c in phase:
            q_now = float(array.q[c.i, c.j])
            q_target = float(np.clip(charge_of_conductance(c.g, params), 0.0, params.q_max))
            if abs(q_target - q_now) <= _SKIP_QTOL * params.q_max:
                continue
            sign = 1.0 if q_target > q_now else -1.0
            width = pulse_width_for_target(q_now, q_target, params, sign * policy.pulse_voltage)
            if width > 0:
                pulses[(c.i, c.j)] = (sign, width)
        if not pulses:
            continue
        before = array
        q_new, duration, sneak_max = _run_phase(array, policy, pulses)
        array = array.with_charges(q_new, t=array.t + duration)
        total_time += duration
        slot_time += math.ceil(duration / policy.pulse_dt) * policy.pulse_dt
        targets = [(c.i, c.j) for c in phase]
        records.append(
            PhaseRecord(
                index=index,
                targets=targets,
                duration=duration,
                disturbance=write_disturbance(before, array, targets),
                sneak_current_max=sneak_max,
                g_after=array.conductances(),
            )
        )

    achieved = array.conductances()
    planned = ~np.isnan(target_g)
    err = np.abs(achieved - target_g)[planned] / target_g[planned]
    return WriteReport(
        phase_count=plan.phase_count,
        executed_phases=len(records),
        total_pulse_time=total_time,
        slot_time=slot_time,
        achieved_G=achieved,
        target_G=target_g,
        target_error=float(np.max(err, initial=0.0)),
        phases=records,
        array=array,
    )


def write_targets(array: CrossbarArray, target_g, policy: WritePolicy) -> WriteReport:
    """Plan and execute in one call."""
    check_compatible(policy, array.topology.kind)
    return execute_plan(array, plan_writes(target_g, policy, array.params), policy)


def random_targets(rng: np.random.Generator, shape, params: DeviceParams, lo: float = 0.1, hi: float = 0.9):
    """Conductances whose charges are uniform in ``[lo, hi] * q_max``."""
    q = rng.uniform(lo, hi, size=shape) * params.q_max
    return conductance_of_charge(q, params)

