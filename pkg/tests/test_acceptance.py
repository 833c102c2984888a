"""End-to-end acceptance checks on the calibrated preset.

Each test prints one ``PASS``/``FAIL`` line with the measured figure.
"""

import numpy as np
import pytest
from scipy import integrate

from ionxbar import cli
from ionxbar.device import (
    HRS_OHM,
    LRS_OHM,
    PROGRAMMING_VOLTAGE,
    DerivedModel,
    DeviceState,
    flux,
    memristance,
    memristance_rate,
    preset,
    program_step,
    programming_current,
)
from ionxbar.experiments import (
    fit_k_model,
    hysteresis_gap,
    ionic_resistance,
    run_iv_sweep,
    run_retention,
    run_s1_protocol,
    run_s2_protocol,
)
from ionxbar.network import (
    BiasConfig,
    CrossbarArray,
    ReadMode,
    TopologyKind,
    build_nodal_system,
    clm,
    clp,
    col_line,
    read_mac,
    row_line,
    solve,
)
from ionxbar.writes import (
    CellTarget,
    PolicyKind,
    WritePlan,
    WritePolicy,
    execute_plan,
    expected_phase_count,
    plan_writes,
    pulse_width_for_target,
    random_targets,
)

CAL = preset("paper-calibrated")
CAL_RET = preset("paper-calibrated-retention")


@pytest.fixture
def report(capsys):
    def _report(number: int, label: str, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {label}: {detail}")
        assert ok, f"criterion {number} ({label}) failed: {detail}"

    return _report


def test_01_hrs_lrs_anchors(report):
    r = run_s1_protocol(CAL)["R_ohm"]
    start_err = abs(r[0] - HRS_OHM) / HRS_OHM
    end_err = abs(r[-1] - LRS_OHM) / LRS_OHM
    ok = start_err <= 0.01 and end_err <= 0.02
    report(1, "HRS/LRS anchors", ok, f"R0={r[0]:.6g} ohm ({start_err:.2%}), plateau={r[-1]:.6g} ohm ({end_err:.2%})")


def test_02_k_over_q_identity(report):
    trace = run_s2_protocol(CAL)
    q, r = trace["q_C"], trace["R_ohm"]
    early = (q > 0) & (q < 0.1 * CAL.q_max)
    product = ionic_resistance(r[early], CAL.material.g0) * q[early]
    spread = float(np.ptp(product) / np.mean(product))
    fit = fit_k_model(trace)
    fit_err = abs(fit.K_fit - CAL.ohmic_constant) / CAL.ohmic_constant
    ok = early.sum() >= 3 and spread <= 0.01 and fit_err <= 0.01
    report(
        2,
        "K/q identity",
        ok,
        f"{int(early.sum())} samples, product spread {spread:.2e}, K_fit error {fit_err:.2e}",
    )


def test_03_flux_quadrature(report):
    model = DerivedModel.from_params(CAL, read_current=1e-6)
    i_p = programming_current(CAL, PROGRAMMING_VOLTAGE)
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        q1, q2 = 10.0 ** rng.uniform(-7, -4, size=2)
        if q1 == q2:
            continue
        # under linear charging q = I_p t, so V(t) = K / t on [q1/I_p, q2/I_p]
        value, _ = integrate.quad(lambda t: model.K / t, q1 / i_p, q2 / i_p, epsabs=0.0, epsrel=1e-12, limit=200)
        worst = max(worst, abs(flux(q1, q2, model) - value) / abs(value))
    report(3, "flux oracle", worst <= 1e-6, f"max relative error {worst:.2e} over 100 pairs")


def test_04_memristance_rate(report):
    model = DerivedModel.from_params(CAL, read_current=1e-6)
    i_p = programming_current(CAL, PROGRAMMING_VOLTAGE)
    worst = 0.0
    for t in np.logspace(-2, 3, 40):
        h = 1e-4 * t
        m = lambda s: memristance(i_p * s, model)  # noqa: E731
        fd = (m(t + h) - m(t - h)) / (2 * h)
        exact = memristance_rate(t, model, i_p)
        worst = max(worst, abs(fd - exact) / abs(exact))
    report(4, "dM/dt", worst <= 1e-6, f"max relative error {worst:.2e} on 40 log-spaced times")


def _checkerboard_plan(M, params):
    g = random_targets(np.random.default_rng(M), (M, M), params)
    cells = tuple(CellTarget(i, j, float(g[i, j])) for i in range(M) for j in range(M) if (i + j) % 2 == 0)
    return WritePlan(shape=(M, M), phases=(cells,))


def test_05_zero_disturbance(report):
    policy = WritePolicy(PolicyKind.FULL_PARALLEL)
    details, ok = [], True
    for M in (1, 2, 4, 8, 16):
        array = CrossbarArray.fresh(TopologyKind.PROPOSED, M, M, CAL, q=0.3 * CAL.q_max)
        # only every other cell is a target, so there are bystanders to watch
        rep = execute_plan(array, _checkerboard_plan(M, CAL), policy)
        dq = rep.array.q - array.q
        non_target = np.array([[(i + j) % 2 == 1 for j in range(M)] for i in range(M)])
        zero = bool(np.all(dq[non_target] == 0.0))
        full = execute_plan(array, plan_writes(random_targets(np.random.default_rng(M), (M, M), CAL), policy, CAL), policy)
        driven = {}
        for i in range(M):
            for j in range(M):
                driven[clp(i, j)] = PROGRAMMING_VOLTAGE * (1 if (i + j) % 2 else -1)
                driven[clm(i, j)] = 0.0
        block = build_nodal_system(full.array, BiasConfig(driven)).is_block_diagonal_by_cell()
        ok &= zero and block and full.phase_count == 1
        details.append(f"M={M}: dq==0 {zero}, block-diagonal {block}")
    report(5, "zero disturbance", ok, "; ".join(details))


def test_06_sneak_oracle(report):
    rng = np.random.default_rng(6)
    q = rng.uniform(0.1, 0.9, size=(2, 2)) * CAL.q_max
    array = CrossbarArray.fresh(TopologyKind.CONVENTIONAL, 2, 2, CAL).with_charges(q)
    v = PROGRAMMING_VOLTAGE
    res = solve(build_nodal_system(array, BiasConfig({row_line(0): v, col_line(0): 0.0})))
    r = 1.0 / array.conductances()
    oracle = v / (r[0, 1] + r[1, 1] + r[1, 0])
    sneak = res.read_currents[0, 1]
    rel = abs(sneak - oracle) / oracle

    policy = WritePolicy(PolicyKind.SEQUENTIAL)
    plan = WritePlan(shape=(2, 2), phases=((CellTarget(0, 0, float(array.conductances()[0, 0]) * 1.05),),))
    rep = execute_plan(array, plan, policy)
    dq = rep.array.q - array.q
    # (1,1) carries the sneak current row-ward, so its charge falls; any nonzero
    # change counts as disturbance
    bystanders = [float(dq[0, 1]), float(dq[1, 0]), float(dq[1, 1])]
    ok = rel <= 1e-9 and all(abs(x) > 0 for x in bystanders)
    report(6, "sneak oracle", ok, f"I_sneak={sneak:.9e} A, oracle rel err {rel:.1e}, bystander dq={[f'{x:.3e}' for x in bystanders]} C")


def test_07_complexity_laws(report):
    g_params = CAL
    ok, table = True, {}
    for kind, law in (
        (PolicyKind.SEQUENTIAL, lambda m: m * m),
        (PolicyKind.ROW_PARALLEL, lambda m: m),
        (PolicyKind.FULL_PARALLEL, lambda m: 1),
        (PolicyKind.HALF_SELECT_V2, lambda m: m * m),
    ):
        counts = []
        for M in (1, 2, 4, 8, 16):
            targets = random_targets(np.random.default_rng(M), (M, M), g_params)
            n = plan_writes(targets, WritePolicy(kind), g_params).phase_count
            ok &= n == law(M) == expected_phase_count(kind, M, M)
            counts.append(n)
        table[kind.value] = counts
    report(7, "complexity laws", ok, str(table))


def test_08_retention(report):
    trace = run_retention(CAL_RET)
    r = trace["R_ohm"]
    err = abs(r[-1] - HRS_OHM) / HRS_OHM
    monotone = bool(np.all(np.diff(r) > 0))
    s2 = run_s2_protocol(CAL)
    hold = s2["R_ohm"][(s2["t_s"] >= 60) & (s2["t_s"] <= 360)]
    flat = float(np.ptp(hold) / hold[0])
    ok = err <= 0.05 and monotone and flat <= 1e-12
    report(8, "retention", ok, f"R(48 h)={r[-1]:.6g} ohm ({err:.2%} from HRS), monotone {monotone}, hold spread {flat:.1e}")


def test_09_read_neutrality_and_no_hysteresis(report):
    rng = np.random.default_rng(9)
    ok, details = True, []
    for kind in TopologyKind:
        q0 = rng.uniform(0.1, 0.9, size=(4, 4)) * CAL.q_max
        array = CrossbarArray.fresh(kind, 4, 4, CAL).with_charges(q0)
        before = array.q.copy()
        for k in range(1000):
            read_mac(array, rng.uniform(0, 0.2, 4), ReadMode.FULL_NODAL if k % 10 == 0 else ReadMode.IDEAL)
        same = array.q.tobytes() == before.tobytes()
        ok &= same
        details.append(f"{kind.value} unchanged {same}")
    gap = hysteresis_gap(run_iv_sweep(CAL))
    ok &= gap <= 1e-12
    report(9, "read neutrality / no hysteresis", ok, ", ".join(details) + f", branch gap {gap:.1e} A")


def test_10_mac_correctness(report):
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(20):
        q = rng.uniform(0, 1, size=(8, 8)) * CAL.q_max
        array = CrossbarArray.fresh(TopologyKind.PROPOSED, 8, 8, CAL).with_charges(q)
        v = rng.uniform(0, 0.2, 8)
        g = array.conductances()
        oracle = np.array([sum(g[i, j] * v[i] for i in range(8)) for j in range(8)])
        worst = max(worst, float(np.max(np.abs(read_mac(array, v) - oracle) / np.abs(oracle))))
    errors = []
    for M in (2, 4, 8):
        q = np.full((M, M), 0.5 * CAL.q_max)
        array = CrossbarArray.fresh(TopologyKind.PROPOSED, M, M, CAL, wire_resistance=10.0).with_charges(q)
        v = np.full(M, 0.2)
        ideal = read_mac(array, v, ReadMode.IDEAL)
        nodal = read_mac(array, v, ReadMode.FULL_NODAL)
        errors.append(float(np.max(np.abs(nodal - ideal) / np.abs(ideal))))
    nondecreasing = all(b >= a for a, b in zip(errors, errors[1:]))
    ok = worst <= 1e-12 and nondecreasing and errors[0] > 0
    report(10, "MAC correctness", ok, f"ideal vs oracle {worst:.1e}; wire error by M=2,4,8: {[f'{e:.3e}' for e in errors]}")


def test_11_pulse_width_round_trip(report):
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        q_now, q_target = rng.uniform(0.01, 0.99, size=2) * CAL.q_max
        v = PROGRAMMING_VOLTAGE if q_target > q_now else -PROGRAMMING_VOLTAGE
        width = pulse_width_for_target(q_now, q_target, CAL, v)
        q_end = program_step(DeviceState(q=q_now), CAL, v, width).q
        worst = max(worst, abs(q_end - q_target) / CAL.q_max)
    report(11, "pulse-width round trip", worst <= 1e-3, f"max |q - target| = {worst:.2e} q_max")


def test_12_determinism(report, tmp_path, capsys):
    bodies = []
    for run in ("a", "b"):
        out = tmp_path / run
        argv = ["sweep", "sneak", "--sizes", "2,3", "--seed", "7", "--output-dir", str(out)]
        assert cli.main(argv) == 0
        for protocol in ("s1", "s2"):
            assert cli.main(["simulate", "device", "--protocol", protocol, "--output-dir", str(out)]) == 0
        bodies.append({p.name.split("-")[0]: p.read_bytes() for p in sorted(out.glob("*.csv"))})
    capsys.readouterr()
    same = bodies[0] == bodies[1] and len(bodies[0]) == 3
    report(12, "determinism", same, f"{len(bodies[0])} CSV bodies compared byte-for-byte")
