import math

import numpy as np
import pytest
import scipy.io
from hypothesis import given, settings
from hypothesis import strategies as st

from ionxbar.device import PROGRAMMING_VOLTAGE, DeviceParams, paper_calibrated
from ionxbar.network import (
    BiasConfig,
    CrossbarArray,
    NoReferenceError,
    ReadMode,
    SingularComponentError,
    Topology,
    TopologyKind,
    UnknownLineError,
    build_nodal_system,
    clm,
    clp,
    col_line,
    export_matrix_market,
    read_bias,
    read_mac,
    row_line,
    solve,
    write_disturbance,
)

CAL = paper_calibrated()


def _array(kind, rows, cols, seed=0, **kw):
    q = np.random.default_rng(seed).uniform(0.05, 0.95, size=(rows, cols)) * CAL.q_max
    return CrossbarArray.fresh(kind, rows, cols, CAL, **kw).with_charges(q)


def test_topology_validation():
    assert Topology("proposed-isolated-loop", 2, 3).shape == (2, 3)
    with pytest.raises(ValueError):
        Topology(TopologyKind.PROPOSED, 0, 3)
    with pytest.raises(ValueError):
        CrossbarArray.fresh(TopologyKind.PROPOSED, 2, 2, CAL, q=2 * CAL.q_max)


def test_array_is_immutable_and_round_trips():
    array = _array(TopologyKind.CONVENTIONAL, 2, 3)
    with pytest.raises(ValueError):
        array.q[0, 0] = 0.0
    again = CrossbarArray.from_dict(array.to_dict())
    assert again.q.tobytes() == array.q.tobytes()
    assert again.params == array.params and again.topology == array.topology


def test_two_by_two_hand_stamp():
    array = _array(TopologyKind.CONVENTIONAL, 2, 2)
    g = array.conductances()
    system = build_nodal_system(array, BiasConfig({row_line(0): 1.0, col_line(0): 0.0}))
    # free nodes are row 1 and col 1
    expected = np.array([[g[1, 0] + g[1, 1], -g[1, 1]], [-g[1, 1], g[0, 1] + g[1, 1]]])
    names = [system.nodes[k] for k in system.free]
    assert names == [row_line(1), col_line(1)]
    assert np.allclose(system.conductance_matrix.toarray(), expected, rtol=1e-15, atol=0)
    assert np.allclose(system.rhs, [0.0, g[0, 1]], rtol=1e-15, atol=0)


def test_sneak_current_matches_series_oracle():
    array = _array(TopologyKind.CONVENTIONAL, 2, 2, seed=4)
    v = 2.0
    res = solve(build_nodal_system(array, BiasConfig({row_line(0): v, col_line(0): 0.0})))
    r = 1.0 / array.conductances()
    i_sneak = v / (r[0, 1] + r[1, 1] + r[1, 0])
    assert res.read_currents[0, 1] == pytest.approx(i_sneak, rel=1e-12)
    assert res.read_currents[1, 0] == pytest.approx(i_sneak, rel=1e-12)
    assert res.read_currents[1, 1] == pytest.approx(-i_sneak, rel=1e-12)
    assert res.read_currents[0, 0] == pytest.approx(v / r[0, 0], rel=1e-12)
    total = res.terminal_currents[row_line(0)]
    assert total == pytest.approx(v / r[0, 0] + i_sneak, rel=1e-12)


def test_mesh_oracle_three_by_three():
    # brute force: dense Laplacian with Dirichlet rows, solved with numpy
    array = _array(TopologyKind.CONVENTIONAL, 3, 3, seed=5)
    g = array.conductances()
    bias = {row_line(0): 1.5, col_line(2): 0.0, row_line(2): 0.3}
    res = solve(build_nodal_system(array, BiasConfig(bias)))
    nodes = [row_line(i) for i in range(3)] + [col_line(j) for j in range(3)]
    L = np.zeros((6, 6))
    for i in range(3):
        for j in range(3):
            a, b = i, 3 + j
            L[a, a] += g[i, j]
            L[b, b] += g[i, j]
            L[a, b] -= g[i, j]
            L[b, a] -= g[i, j]
    fixed = [nodes.index(n) for n in bias]
    free = [k for k in range(6) if k not in fixed]
    vf = np.array(list(bias.values()))
    x = np.linalg.solve(L[np.ix_(free, free)], -L[np.ix_(free, fixed)] @ vf)
    for k, val in zip(free, x):
        assert res.node_voltages[nodes[k]] == pytest.approx(val, rel=1e-12)


def test_full_parallel_write_system_is_block_diagonal():
    array = _array(TopologyKind.PROPOSED, 3, 3)
    driven = {}
    for i in range(3):
        for j in range(3):
            driven[clp(i, j)] = PROGRAMMING_VOLTAGE
            driven[clm(i, j)] = 0.0
    driven[row_line(0)] = 0.0
    system = build_nodal_system(array, BiasConfig(driven))
    assert system.is_block_diagonal_by_cell()
    res = solve(system)
    assert np.all(res.cell_voltages == PROGRAMMING_VOLTAGE)
    assert np.allclose(res.cell_currents, CAL.ion_conductance * PROGRAMMING_VOLTAGE, rtol=1e-15)
    # the floating read lines sit at the single driven row's potential
    assert res.read_currents.max() == 0.0
    conventional = _array(TopologyKind.CONVENTIONAL, 3, 3)
    assert not build_nodal_system(conventional, read_bias([1.0, 0, 0], 3)).is_block_diagonal_by_cell()


def test_open_loops_are_absent_and_idle_lines_reported():
    array = _array(TopologyKind.PROPOSED, 2, 2)
    res = solve(build_nodal_system(array, BiasConfig({clp(0, 0): 1.0, clm(0, 0): 0.0})))
    assert res.cell_currents[0, 0] > 0
    assert res.cell_currents[1, 1] == 0.0
    assert math.isnan(res.node_voltages[row_line(0)])


def test_kcl_and_residual_on_random_read():
    array = _array(TopologyKind.PROPOSED, 6, 5, wire_resistance=3.0)
    res = solve(build_nodal_system(array, read_bias(np.linspace(0, 0.2, 6), 5)))
    assert res.residual <= 1e-9 and res.kcl_error <= 1e-9
    system = build_nodal_system(array, read_bias(np.linspace(0, 0.2, 6), 5))
    dense = system.conductance_matrix.toarray()
    assert np.array_equal(dense, dense.T)
    assert np.all(np.linalg.eigvalsh(dense) > 0)


def test_errors():
    array = _array(TopologyKind.CONVENTIONAL, 2, 2)
    with pytest.raises(NoReferenceError):
        build_nodal_system(array, BiasConfig({}, floating=frozenset({row_line(0)})))
    with pytest.raises(UnknownLineError):
        build_nodal_system(array, BiasConfig({row_line(5): 1.0}))
    with pytest.raises(UnknownLineError):
        build_nodal_system(array, BiasConfig({clp(0, 0): 1.0}))
    dead = CrossbarArray.fresh(TopologyKind.CONVENTIONAL, 2, 2, DeviceParams.from_dict({**CAL.to_dict(), "g0": 0.0}))
    with pytest.raises(SingularComponentError) as err:
        solve(build_nodal_system(dead, BiasConfig({row_line(0): 1.0})))
    assert err.value.nodes


def test_read_modes_agree_without_wires():
    for kind in TopologyKind:
        array = _array(kind, 4, 3, seed=8)
        v = np.array([0.2, 0.1, 0.0, 0.05])
        ideal = read_mac(array, v, ReadMode.IDEAL)
        nodal = read_mac(array, v, "full-nodal")
        assert np.allclose(nodal, ideal, rtol=1e-12, atol=0)
        assert np.allclose(ideal, array.conductances().T @ v, rtol=1e-15, atol=0)
    with pytest.raises(ValueError):
        read_mac(array, [0.1])


def test_wire_resistance_lowers_column_currents():
    array = _array(TopologyKind.PROPOSED, 4, 4, wire_resistance=50.0)
    v = np.full(4, 0.2)
    assert np.all(read_mac(array, v, ReadMode.FULL_NODAL) < read_mac(array, v, ReadMode.IDEAL))


def test_disturbance_measure():
    a = _array(TopologyKind.PROPOSED, 2, 2)
    q = a.q.copy()
    q[0, 1] += 1e-7
    q[0, 0] += 3e-6
    d = write_disturbance(a, a.with_charges(q), [(0, 0)])
    assert d.max_abs == pytest.approx(1e-7) and d.l1 == pytest.approx(1e-7)
    assert set(d.as_dict()) == {(0, 1), (1, 0), (1, 1)}


def test_matrix_market_export(tmp_path):
    array = _array(TopologyKind.CONVENTIONAL, 3, 2)
    system = build_nodal_system(array, read_bias([0.1, 0.2, 0.0], 2))
    path = tmp_path / "g.mtx"
    export_matrix_market(system, path, reduced=False)
    back = scipy.io.mmread(str(path)).toarray()
    assert np.allclose(back, system.laplacian.toarray(), rtol=1e-15, atol=0)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 10_000))
def test_read_network_conserves_current(rows, cols, seed):
    array = _array(TopologyKind.CONVENTIONAL, rows, cols, seed=seed)
    v = np.random.default_rng(seed).uniform(-0.2, 0.2, rows)
    res = solve(build_nodal_system(array, read_bias(v, cols)))
    injected = sum(res.terminal_currents.values())
    assert abs(injected) <= 1e-12 * max(1e-30, max(abs(x) for x in res.terminal_currents.values()))
