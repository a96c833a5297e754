import numpy as np
import pytest

from evmpopf.fleet import FleetSpec
from evmpopf.ipm import solve
from evmpopf.mpopf import UNLIMITED_V_BOUNDS, MpopfAssemblyError, VariableLayout, assemble, problem_size

from conftest import four_bus
from fdcheck import derivative_errors, five_bus_problem


def test_layout_blocks_and_periods():
    lay = VariableLayout(n_bus=4, n_gen=1, n_y=2, T=3)
    assert lay.n_xt == 4 + 4 + 1 + 1 + 4 * 2 and lay.n_x == 3 * lay.n_xt
    idx = lay.index("soc")
    assert idx.shape == (3, 2)
    assert idx[1, 0] == lay.n_xt + lay.block_offsets()["soc"]
    np.testing.assert_array_equal(np.unique(lay.period_of()), [0, 1, 2])


def test_problem_size_formulae():
    s = problem_size(n_bus=4, n_gen=1, n_branch=3, n_y=2, T=3)
    assert s["N_xt"] == 18 and s["N_x"] == 54 and s["N_gn"] == 24 and s["N_gs"] == 6 and s["N_hn"] == 18


def test_sizes_match_assembly(toy_case, toy_fleet, toy_demand):
    p = assemble(toy_case, toy_fleet, *toy_demand, [300, 500, 400], 0.25)
    s = p.sizes()
    ref = problem_size(4, 1, 3, 2, 3)
    assert s["N_x"] == ref["N_x"] and s["N_gn"] == ref["N_gn"] and s["N_hn"] == ref["N_hn"]
    g, jg = p.eval_equalities(p.initial_point())
    assert g.shape == (s["N_g"],) and jg.shape == (s["N_g"], s["N_x"])


def test_derivatives_match_finite_differences():
    p = five_bus_problem()
    rng = np.random.default_rng(1)
    for _ in range(2):
        x = p.initial_point() + 0.05 * rng.standard_normal(p.layout.n_x)
        err = derivative_errors(p, x, rng)
        assert err["gradient"] < 1e-6 and err["eq_jacobian"] < 1e-6 and err["ineq_jacobian"] < 1e-6
        assert err["hessian"] < 1e-5 and err["hessian_asymmetry"] < 1e-9


def test_storage_hand_case():
    # 30 kWh battery at 0.4, 3.7 kW for 15 min at 90 % efficiency -> 0.42775
    case = four_bus()
    fleet = FleetSpec.build([3], [0.03], avbp=np.ones((1, 1)), p_ch_max=[0.0037], n_gen=1,
                            soci=np.array([[0.4]]), eff_ch=[0.9])
    p = assemble(case, fleet, np.zeros((4, 1)), np.zeros((4, 1)), [300], 0.25)
    x = p.initial_point()
    x[p.index("pch")[0, 0]] = 0.0037
    x[p.index("soc")[0, 0]] = 0.42775
    assert abs(p.storage_residual(x)[0]) < 1e-15


def test_soc_resets_at_each_arrival():
    fleet = FleetSpec.build([3], [0.05], avbp=np.array([[1, 0, 1]]), p_ch_max=[0.01], n_gen=1,
                            soci=np.array([[0.2, 0, 0.6]]))
    p = assemble(four_bus(), fleet, np.zeros((4, 3)), np.zeros((4, 3)), [1, 1, 1], 0.25)
    x = np.zeros(p.layout.n_x)
    x[p.index("soc")[:, 0]] = [0.2, 0.2, 0.6]
    np.testing.assert_allclose(p.storage_residual(x), 0, atol=1e-15)


def test_pins_fix_unavailable_powers_and_slack_angle(toy_case, toy_fleet, toy_demand):
    p = assemble(toy_case, toy_fleet, *toy_demand, [300, 500, 400], 0.25)
    k = p.index("pch")[0, 0]
    assert p.pinned[k] and p.x_lower[k] == p.x_upper[k] == 0
    assert all(p.pinned[p.index("theta")[:, toy_case.slack]])
    assert not p.pinned[p.index("pch")[1, 0]]


def test_soc_bounds_only_while_plugged(toy_case, toy_fleet, toy_demand):
    p = assemble(toy_case, toy_fleet, *toy_demand, [300, 500, 400], 0.25)
    k = p.index("soc")[0, 0]
    assert np.isinf(p.x_lower[k]) and np.isinf(p.x_upper[k])
    k = p.index("soc")[2, 1]
    assert p.x_lower[k] == pytest.approx(0.7) and p.x_upper[k] == 1.0


def test_no_limits_mode_drops_rows_and_widens_voltage(toy_case, toy_fleet, toy_demand):
    p = assemble(toy_case, toy_fleet, *toy_demand, [300, 500, 400], 0.25, network_limits=False)
    assert p.n_hn == 0
    vm = p.index("vm")[0]
    assert p.x_lower[vm[1]] == UNLIMITED_V_BOUNDS[0] and p.x_upper[vm[1]] == UNLIMITED_V_BOUNDS[1]
    # the slack bus stays fixed
    assert p.x_lower[vm[0]] == p.x_upper[vm[0]] == 1.0


def test_objective_is_energy_cost(toy_case, toy_fleet, toy_demand):
    p = assemble(toy_case, toy_fleet, *toy_demand, [300, 500, 400], 0.25)
    x = np.zeros(p.layout.n_x)
    x[p.index("pg")[:, 0]] = [0.1, 0.2, 0.3]
    assert p.eval_objective(x)[0] == pytest.approx(0.25 * (30 + 100 + 120))


@pytest.mark.parametrize("bad", ["shape", "horizon", "fleet", "dt"])
def test_assembly_errors(toy_case, toy_fleet, toy_demand, bad):
    pd, qd = toy_demand
    args = dict(case=toy_case, fleet=toy_fleet, pd=pd, qd=qd, prices=[1, 2, 3], dt=0.25)
    if bad == "shape":
        args["pd"] = pd[:3]
    elif bad == "horizon":
        args["prices"] = [1, 2]
        args["pd"], args["qd"] = pd[:, :2], qd[:, :2]
    elif bad == "fleet":
        from dataclasses import replace
        args["fleet"] = replace(toy_fleet, bus=np.array([3, 42]))
    else:
        args["dt"] = 0.0
    with pytest.raises(MpopfAssemblyError):
        assemble(**args)


def test_empty_bound_box_rejected(toy_case, toy_fleet, toy_demand):
    from dataclasses import replace
    fleet = replace(toy_fleet, soc_max=np.array([0.3, 1.0]))
    with pytest.raises(MpopfAssemblyError, match="empty bound box"):
        assemble(toy_case, fleet, *toy_demand, [300, 500, 400], 0.25)


def test_toy_solution_meets_targets(toy_case, toy_fleet, toy_demand):
    p = assemble(toy_case, toy_fleet, *toy_demand, [300, 500, 400], 0.25)
    res = solve(p)
    assert res.status == "optimal"
    u = p.unpack(res.x)
    assert u["soc"][2, 0] >= 0.35 - 1e-6 and u["soc"][2, 1] >= 0.7 - 1e-6
    assert np.max(np.abs(p.equality_residual(res.x))) < 1e-6
    assert np.max(p.inequality_residual(res.x)) < 1e-6
    np.testing.assert_allclose(p.storage_residual(res.x), 0, atol=1e-8)


def test_debug_dump(tmp_path, toy_case, toy_fleet, toy_demand):
    import json
    p = assemble(toy_case, toy_fleet, *toy_demand, [300, 500, 400], 0.25)
    p.dump_debug(tmp_path / "d.json")
    doc = json.loads((tmp_path / "d.json").read_text())
    assert doc["sizes"]["N_x"] == p.layout.n_x
