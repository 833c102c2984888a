"""Scripted measurement protocols and array studies.

Each ``run_*`` function is a pure pipeline from parameters to an
:class:`ExperimentTrace`; the trace metadata holds everything needed to
re-run it.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .device import (
    PROGRAMMING_VOLTAGE,
    RETENTION_WINDOW_S,
    DeviceParams,
    DeviceState,
    program_step,
    relax_step,
    resistance,
)
from .network import CrossbarArray, ReadMode, TopologyKind, read_mac
from .writes import (
    PolicyKind,
    WritePolicy,
    expected_phase_count,
    plan_writes,
    pulse_width_for_target,
    random_targets,
    execute_plan,
)

SCHEMA_VERSION = 1

UNITS = {
    "t_s": "s",
    "q_C": "C",
    "R_ohm": "ohm",
    "G_S": "S",
    "V_V": "V",
    "I_A": "A",
    "dq_C": "C",
    "write_time_s": "s",
    "slot_time_s": "s",
    "sneak_current_max_A": "A",
    "disturbance_l1_C": "C",
    "disturbance_max_C": "C",
}

EXPERIMENTS = {
    "s1": "programming curve: 30 s pulses at 3.6 V until resistance saturates",
    "s2": "program 60 s, hold 300 s, reprogram in 60 s steps, reverse 60 s",
    "retention": "program to LRS, then relax for 48 h at zero bias",
    "iv": "read-path I-V sweeps at several frozen programmed states",
    "sneak": "random full-array write on conventional vs proposed arrays",
    "complexity": "write phase counts and write time per policy vs array size",
    "fit": "least-squares fit of R = a/q + b on the unsaturated segment",
}


def unit_of(column: str) -> str:
    return UNITS.get(column, "1")


@dataclass
class ExperimentTrace:
    name: str
    columns: dict
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        lengths = {len(v) for v in self.columns.values()}
        if len(lengths) > 1:
            raise ValueError(f"trace {self.name!r} has columns of unequal length")
        if "t_s" in self.columns:
            t = np.asarray(self.columns["t_s"], dtype=float)
            if np.any(np.diff(t) <= 0):
                raise ValueError(f"trace {self.name!r}: time column not strictly increasing")

    def __len__(self):
        return len(next(iter(self.columns.values()), ()))

    def __getitem__(self, column):
        return np.asarray(self.columns[column])

    @property
    def units(self) -> dict:
        return {c: unit_of(c) for c in self.columns}

    def csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(list(self.columns))
        for row in zip(*self.columns.values()):
            writer.writerow([_fmt(x) for x in row])
        return buf.getvalue()

    def sidecar(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "experiment": self.name,
            "units": self.units,
            "rows": len(self),
            "metadata": self.metadata,
        }

    def write(self, out_dir, seed: int = 0, timestamp: str | None = None) -> tuple[Path, Path]:
        """Write ``<name>-<timestamp>-<seed>.csv`` plus its JSON sidecar."""
        out_dir = Path(out_dir)
        stamp = timestamp or utc_stamp()
        stem = f"{self.name}-{stamp}-{seed}"
        csv_path = out_dir / f"{stem}.csv"
        json_path = out_dir / f"{stem}.json"
        meta = self.sidecar()
        meta["timestamp"] = stamp
        meta["seed"] = seed
        atomic_write(csv_path, self.csv_text())
        atomic_write(json_path, json.dumps(meta, indent=2, sort_keys=True, default=_json_default) + "\n")
        return csv_path, json_path

    @classmethod
    def read(cls, csv_path) -> "ExperimentTrace":
        csv_path = Path(csv_path)
        with open(csv_path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        columns = {h: [_parse(r[k]) for r in body] for k, h in enumerate(header)}
        meta = {}
        sidecar = csv_path.with_suffix(".json")
        name = csv_path.stem.split("-")[0]
        if sidecar.exists():
            doc = json.loads(sidecar.read_text())
            meta = doc.get("metadata", {})
            name = doc.get("experiment", name)
        return cls(name=name, columns=columns, metadata=meta)


def utc_stamp() -> str:
    import datetime

    return datetime.datetime.now(datetime.timezone.utc).strftime("%Y%m%dT%H%M%SZ")


def atomic_write(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _parse(s: str):
    for conv in (int, float):
        try:
            return conv(s)
        except ValueError:
            pass
    return s


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if hasattr(obj, "value"):
        return obj.value
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def _params_meta(params: DeviceParams) -> dict:
    return {
        "params": params.to_dict(),
        "q_max": params.q_max,
        "g0": params.material.g0,
        "ohmic_constant": params.ohmic_constant,
    }


def run_s1_protocol(
    params: DeviceParams,
    v_p: float = PROGRAMMING_VOLTAGE,
    pulse_dt: float = 30.0,
    rel_tol: float = 1e-3,
    max_cycles: int = 10_000,
) -> ExperimentTrace:
    """Repeated programming pulses with a resistance reading after each.

    Stops once one cycle changes the resistance by less than ``rel_tol``.
    """
    state = DeviceState()
    cycles, ts, qs, rs = [0], [0.0], [0.0], [resistance(state, params)]
    for cycle in range(1, max_cycles + 1):
        state = program_step(state, params, v_p, pulse_dt)
        r = resistance(state, params)
        cycles.append(cycle)
        ts.append(state.t)
        qs.append(state.q)
        rs.append(r)
        if abs(r - rs[-2]) < rel_tol * rs[-2]:
            break
    meta = {"protocol": "s1", "v_p": v_p, "pulse_dt": pulse_dt, "rel_tol": rel_tol, **_params_meta(params)}
    return ExperimentTrace("s1", {"cycle": cycles, "t_s": ts, "q_C": qs, "R_ohm": rs}, meta)


def run_s2_protocol(
    params: DeviceParams,
    v_p: float = PROGRAMMING_VOLTAGE,
    program_s: float = 60.0,
    hold_s: float = 300.0,
    reverse_at_s: float = 600.0,
    step_s: float = 60.0,
    reverse_s: float = 60.0,
    sample_dt: float = 1.0,
) -> ExperimentTrace:
    """Program, hold at 0 V, reprogram in steps, then reverse the polarity.

    The default timeline puts the segment boundaries at 60, 360 and 600 s.
    The hold uses :func:`relax_step`, so it is flat only when relaxation is
    disabled (``tau_retention == 0``).
    """
    segments = [("program", program_s, v_p)]
    segments.append(("hold", hold_s, 0.0))
    reprogram = reverse_at_s - program_s - hold_s
    n_steps = max(0, round(reprogram / step_s))
    segments += [("reprogram", step_s, v_p)] * n_steps
    segments.append(("reverse", reverse_s, -v_p))

    state = DeviceState()
    cols = {"t_s": [0.0], "V_V": [0.0], "q_C": [0.0], "R_ohm": [resistance(state, params)], "segment": ["start"]}
    boundaries = []
    t_seg = 0.0
    for label, duration, v in segments:
        n = round(duration / sample_dt)
        for k in range(1, n + 1):
            if v == 0.0:
                state = relax_step(state, params, sample_dt)
            else:
                state = program_step(state, params, v, sample_dt)
            cols["t_s"].append(t_seg + k * sample_dt)
            cols["V_V"].append(v)
            cols["q_C"].append(state.q)
            cols["R_ohm"].append(resistance(state, params))
            cols["segment"].append(label)
        t_seg += n * sample_dt
        boundaries.append({"segment": label, "end_s": t_seg})
    meta = {
        "protocol": "s2",
        "v_p": v_p,
        "sample_dt": sample_dt,
        "segments": boundaries,
        **_params_meta(params),
    }
    return ExperimentTrace("s2", cols, meta)


def run_retention(
    params: DeviceParams,
    v_p: float = PROGRAMMING_VOLTAGE,
    program_s: float = 600.0,
    window_s: float = RETENTION_WINDOW_S,
    samples: int = 200,
) -> ExperimentTrace:
    """Program toward LRS, then let the state relax at zero bias.

    Sampling is logarithmic in the time since programming ended.
    """
    state = program_step(DeviceState(), params, v_p, program_s)
    start = state.t
    times = np.concatenate([[0.0], np.logspace(0.0, math.log10(window_s), samples)])
    cols = {"t_s": [], "q_C": [], "R_ohm": []}
    prev = 0.0
    for t in times:
        if t > prev:
            state = relax_step(state, params, t - prev)
            prev = t
        cols["t_s"].append(float(t))
        cols["q_C"].append(state.q)
        cols["R_ohm"].append(resistance(state, params))
    meta = {
        "protocol": "retention",
        "v_p": v_p,
        "program_s": program_s,
        "relax_start_s": start,
        "window_s": window_s,
        "tau_retention": params.material.tau_retention,
        **_params_meta(params),
    }
    return ExperimentTrace("retention", cols, meta)


def _triangle(amplitude: float, points_per_quarter: int):
    up = np.linspace(0.0, amplitude, points_per_quarter + 1)
    return np.concatenate([up, up[-2::-1], -up[1:], -up[-2::-1]])


def run_iv_sweep(
    params: DeviceParams,
    v_amplitude: float = 0.2,
    cycles: int = 2,
    levels=(0.1, 0.3, 0.5, 0.7, 0.9),
    points_per_quarter: int = 20,
    mode: ReadMode | str = ReadMode.FULL_NODAL,
) -> ExperimentTrace:
    """Bipolar triangular sweeps on the read path of a single cell.

    Each state is reached with a programming pulse, then frozen in a
    read-only array; the sweep only reads it.
    """
    wave = _triangle(v_amplitude, points_per_quarter)
    slope = np.sign(np.diff(wave, prepend=wave[0]))
    cols = {"level": [], "q_C": [], "cycle": [], "sample": [], "V_V": [], "I_A": [], "branch": []}
    for level, fraction in enumerate(levels):
        target = fraction * params.q_max
        width = pulse_width_for_target(0.0, target, params, PROGRAMMING_VOLTAGE)
        state = program_step(DeviceState(), params, PROGRAMMING_VOLTAGE, width)
        cell = CrossbarArray.fresh(TopologyKind.PROPOSED, 1, 1, params, q=state.q)
        for cycle in range(cycles):
            for k, v in enumerate(wave):
                current = read_mac(cell, [v], mode)[0]
                cols["level"].append(level)
                cols["q_C"].append(float(cell.q[0, 0]))
                cols["cycle"].append(cycle)
                cols["sample"].append(k)
                cols["V_V"].append(float(v))
                cols["I_A"].append(float(current))
                # +1 on rising-voltage samples, -1 on falling ones
                cols["branch"].append(int(slope[k] if slope[k] != 0 else 1))
    meta = {
        "protocol": "iv",
        "v_amplitude": v_amplitude,
        "cycles": cycles,
        "levels": list(levels),
        "mode": ReadMode(mode).value,
        **_params_meta(params),
    }
    return ExperimentTrace("iv", cols, meta)


def hysteresis_gap(trace: ExperimentTrace) -> float:
    """Largest |I_forward(V) - I_reverse(V)| over matching voltages."""
    v, i = trace["V_V"], trace["I_A"]
    level, cycle, branch = trace["level"], trace["cycle"], trace["branch"]
    gap = 0.0
    for key in set(zip(level.tolist(), cycle.tolist())):
        sel = (level == key[0]) & (cycle == key[1])
        fwd = {float(a): float(b) for a, b, s in zip(v[sel], i[sel], branch[sel]) if s > 0}
        rev = {float(a): float(b) for a, b, s in zip(v[sel], i[sel], branch[sel]) if s < 0}
        for volt in fwd.keys() & rev.keys():
            gap = max(gap, abs(fwd[volt] - rev[volt]))
    return gap


def iv_slopes(trace: ExperimentTrace) -> dict:
    """Least-squares slope through the origin for each programmed level."""
    v, i, level = trace["V_V"], trace["I_A"], trace["level"]
    return {int(lv): float(np.dot(v[level == lv], i[level == lv]) / np.dot(v[level == lv], v[level == lv]))
            for lv in np.unique(level)}


def run_sneak_demo(
    M: int,
    params: DeviceParams,
    seed: int = 0,
    conventional_policy: PolicyKind | str = PolicyKind.SEQUENTIAL,
    wire_resistance: float = 0.0,
) -> ExperimentTrace:
    """Write the same random targets into a conventional and a proposed array.

    Both arrays start erased. The proposed array uses a single full-parallel
    phase; the conventional one uses ``conventional_policy`` with
    non-selected lines floating.
    """
    if not 2 <= M <= 16:
        raise ValueError("sneak demo supports 2 <= M <= 16")
    rng = np.random.default_rng(seed)
    targets = random_targets(rng, (M, M), params)
    runs = [
        (TopologyKind.CONVENTIONAL, WritePolicy(conventional_policy)),
        (TopologyKind.PROPOSED, WritePolicy(PolicyKind.FULL_PARALLEL)),
    ]
    cols = {k: [] for k in ("topology", "policy", "M", "phase", "sneak_current_max_A", "disturbance_l1_C", "disturbance_max_C")}
    summary = {}
    for kind, policy in runs:
        array = CrossbarArray.fresh(kind, M, M, params, wire_resistance=wire_resistance)
        report = execute_plan(array, plan_writes(targets, policy, params), policy)
        for p in report.phases:
            cols["topology"].append(kind.value)
            cols["policy"].append(policy.kind.value)
            cols["M"].append(M)
            cols["phase"].append(p.index)
            cols["sneak_current_max_A"].append(p.sneak_current_max)
            cols["disturbance_l1_C"].append(p.disturbance.l1)
            cols["disturbance_max_C"].append(p.disturbance.max_abs)
        summary[kind.value] = {
            "policy": policy.kind.value,
            "phase_count": report.phase_count,
            "disturbance_l1_C": report.disturbance_l1,
            "disturbance_max_C": report.disturbance_max,
            "sneak_current_max_A": report.sneak_current_max,
            "target_error": report.target_error,
        }
    meta = {"experiment": "sneak", "M": M, "seed": seed, "summary": summary, **_params_meta(params)}
    return ExperimentTrace("sneak", cols, meta)


def concat_traces(name: str, traces) -> ExperimentTrace:
    traces = list(traces)
    cols = {c: [] for c in traces[0].columns}
    for tr in traces:
        for c in cols:
            cols[c].extend(tr.columns[c])
    return ExperimentTrace(name, cols, {"parts": [tr.metadata for tr in traces]})


COMPLEXITY_RUNS = (
    (PolicyKind.SEQUENTIAL, TopologyKind.PROPOSED),
    (PolicyKind.ROW_PARALLEL, TopologyKind.PROPOSED),
    (PolicyKind.FULL_PARALLEL, TopologyKind.PROPOSED),
    (PolicyKind.HALF_SELECT_V2, TopologyKind.CONVENTIONAL),
)


def run_complexity_sweep(
    sizes,
    params: DeviceParams,
    seed: int = 0,
    pulse_dt: float = 30.0,
    simulate: bool = True,
) -> ExperimentTrace:
    """Phase count and simulated write time for each policy and array size.

    With ``simulate=False`` only the plans are built (write times are NaN).
    """
    sizes = list(sizes)
    if not sizes:
        raise ValueError("sizes must be non-empty")
    cols = {k: [] for k in ("M", "policy", "topology", "phase_count", "expected_phases", "write_time_s", "slot_time_s")}
    for M in sizes:
        rng = np.random.default_rng([seed, M])
        targets = random_targets(rng, (M, M), params)
        for kind, topology in COMPLEXITY_RUNS:
            policy = WritePolicy(kind, pulse_dt=pulse_dt)
            plan = plan_writes(targets, policy, params)
            write_time = slot_time = math.nan
            if simulate:
                report = execute_plan(CrossbarArray.fresh(topology, M, M, params), plan, policy)
                write_time, slot_time = report.total_pulse_time, report.slot_time
            cols["M"].append(M)
            cols["policy"].append(kind.value)
            cols["topology"].append(topology.value)
            cols["phase_count"].append(plan.phase_count)
            cols["expected_phases"].append(expected_phase_count(kind, M, M))
            cols["write_time_s"].append(write_time)
            cols["slot_time_s"].append(slot_time)
    meta = {"experiment": "complexity", "sizes": sizes, "seed": seed, "pulse_dt": pulse_dt, "simulate": simulate}
    return ExperimentTrace("complexity", cols, meta)


def phase_count_table(trace: ExperimentTrace) -> dict:
    """``{policy: {M: phase_count}}`` from a complexity trace."""
    table: dict = {}
    for m, pol, n in zip(trace["M"].tolist(), trace["policy"].tolist(), trace["phase_count"].tolist()):
        table.setdefault(pol, {})[int(m)] = int(n)
    return table


class FitError(ValueError):
    pass


@dataclass
class FitResult:
    K_fit: float
    offset: float
    r_squared: float
    residuals: np.ndarray
    n_samples: int
    degenerate: bool

    def to_dict(self) -> dict:
        return {
            "K_fit": self.K_fit,
            "offset_ohm": self.offset,
            "r_squared": self.r_squared,
            "n_samples": self.n_samples,
            "degenerate": self.degenerate,
            "residuals_ohm": self.residuals.tolist(),
        }


def ionic_resistance(r, g0: float):
    """Resistance of the intercalated-charge term alone, ``1 / (1/R - g0)``."""
    r = np.asarray(r, dtype=float)
    with np.errstate(divide="ignore"):
        return 1.0 / (1.0 / r - g0)


def fit_k_model(
    trace: ExperimentTrace,
    g0: float | None = None,
    q_max: float | None = None,
    max_fraction: float = 0.1,
) -> FitResult:
    """Fit ``R_ion = a / q + b`` on samples with ``0 < q < max_fraction * q_max``.

    ``R_ion`` removes the baseline conductance ``g0`` (taken from the trace
    metadata unless given), leaving the part that follows ``K/q``. For data
    generated by the device model ``a`` recovers ``l_x l_y / mu_e``.
    """
    g0 = trace.metadata.get("g0", 0.0) if g0 is None else g0
    q_max = trace.metadata.get("q_max", math.inf) if q_max is None else q_max
    q = trace["q_C"].astype(float)
    r_ion = ionic_resistance(trace["R_ohm"], g0)
    use = (q > 0) & (q < max_fraction * q_max) & np.isfinite(r_ion) & (r_ion > 0)
    if use.sum() < 3:
        raise FitError(f"need at least 3 unsaturated samples with q > 0, got {int(use.sum())}")
    q, y = q[use], r_ion[use]
    design = np.column_stack([1.0 / q, np.ones_like(q)])
    (a, b), *_ = np.linalg.lstsq(design, y, rcond=None)
    residuals = y - design @ np.array([a, b])
    ss_res = float(np.sum(residuals**2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 0.0 if ss_tot == 0 else min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    # the 1/q term explains nothing when its swing is negligible next to the data
    degenerate = abs(a) * float(np.ptp(1.0 / q)) <= 1e-9 * float(np.max(np.abs(y)))
    return FitResult(
        K_fit=float(a),
        offset=float(b),
        r_squared=r2,
        residuals=residuals,
        n_samples=int(use.sum()),
        degenerate=bool(degenerate),
    )
