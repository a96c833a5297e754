import numpy as np
import pytest

from evmpopf.acpf import (
    PfOptions,
    branch_load_ratio,
    load_ratio,
    solve_power_flow,
    sweep_power_flow,
    total_loss,
    voltage_extremes,
)
from evmpopf.grid import NetworkCase
from evmpopf.scenarios import random_radial_feeder

from conftest import four_bus


def test_two_bus_matches_closed_form():
    # lossless line with reactance x feeding P at unity voltage: sin(d) = P x / (V1 V2)
    case = NetworkCase.from_arrays(base_mva=1.0, bus_id=[1, 2], bus_type=[3, 2], f_bus=[1], t_bus=[2],
                                   r=[0.0], x=[0.1], gen_bus=[1, 2], pg=[0.0, -0.5])
    sol = solve_power_flow(case, np.zeros(2), np.zeros(2), gen_p=[0.0, -0.5])
    assert sol.converged
    assert np.sin(sol.v_ang[0] - sol.v_ang[1]) == pytest.approx(0.5 * 0.1, abs=1e-10)
    assert sol.gen_p[0] == pytest.approx(0.5, abs=1e-9)


def test_reproduces_specified_loads():
    rng = np.random.default_rng(3)
    case = random_radial_feeder(30, rng)
    sol = solve_power_flow(case, case.pd, case.qd)
    assert sol.converged and sol.max_mismatch < 1e-8
    pq = case.pq
    np.testing.assert_allclose(-sol.s_bus[pq].real * case.base_mva, case.pd[pq], atol=1e-8)
    np.testing.assert_allclose(-sol.s_bus[pq].imag * case.base_mva, case.qd[pq], atol=1e-8)
    assert total_loss([sol])[0] >= 0


def test_warm_started_sweep_matches_cold_solves():
    case = four_bus()
    pd = np.array([[0, 0, 0], [0.1, 0.2, 0.1], [0.05, 0.1, 0.2], [0.1, 0.1, 0.1]])
    sols = sweep_power_flow(case, pd, 0.3 * pd)
    for t, s in enumerate(sols):
        cold = solve_power_flow(case, pd[:, t], 0.3 * pd[:, t])
        np.testing.assert_allclose(s.v_mag, cold.v_mag, atol=1e-9)


def test_load_ratio_and_extremes():
    case = four_bus().replace(rate=np.array([0.5, 0.0, 0.5]))
    sol = solve_power_flow(case, np.array([0, 0.2, 0.1, 0.1]), np.zeros(4))
    lr = load_ratio(sol, case)
    assert lr.shape == (6,)
    assert np.isnan(lr[1]) and np.isnan(lr[4])
    br = branch_load_ratio(sol, case)
    assert br[0] == pytest.approx(100 * max(abs(sol.s_line[0]), abs(sol.s_line[3])) / 0.5)
    ve = voltage_extremes(sol)
    assert ve.v_max == pytest.approx(1.0) and ve.v_min < 1.0


def test_heavy_load_does_not_converge():
    case = four_bus()
    sol = solve_power_flow(case, np.array([0, 50.0, 50.0, 50.0]), np.zeros(4), PfOptions(max_iter=10))
    assert not sol.converged


def test_load_vector_length_checked():
    with pytest.raises(ValueError):
        solve_power_flow(four_bus(), np.zeros(3), np.zeros(3))


def test_q_limit_switches_pv_bus():
    case = NetworkCase.from_arrays(base_mva=1.0, bus_id=[1, 2, 3], bus_type=[3, 2, 1], f_bus=[1, 2],
                                   t_bus=[2, 3], r=[0.01, 0.01], x=[0.05, 0.05], gen_bus=[1, 2],
                                   vg=[1.0, 1.05], qmin=[-9, -0.01], qmax=[9, 0.01])
    free = solve_power_flow(case, np.array([0, 0, 0.3]), np.array([0, 0, 0.2]))
    limited = solve_power_flow(case, np.array([0, 0, 0.3]), np.array([0, 0, 0.2]),
                               PfOptions(enforce_q_limits=True))
    assert free.gen_q[1] > 0.01
    assert limited.gen_q[1] == pytest.approx(0.01)
    assert limited.v_mag[1] < 1.05
