import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as hs

from evmpopf import strategies as st
from evmpopf.fleet import FleetSpec

from conftest import four_bus


def one_ev(e_max_mwh, p_max_mw, avbp, soc0, soc_req, eff=1.0, bus=3):
    T = len(avbp)
    soci = np.zeros((1, T))
    socmi = np.zeros((1, T))
    first = int(np.flatnonzero(avbp)[0])
    last = int(np.flatnonzero(avbp)[-1])
    soci[0, first], socmi[0, last] = soc0, soc_req
    return FleetSpec.build([bus], [e_max_mwh], avbp=np.array([avbp]), p_ch_max=[p_max_mw], n_gen=1,
                           soci=soci, socmi=socmi, eff_ch=[eff])


def test_dumb_schedule_trims_last_step():
    # 8 kWh from a 3.7 kW charger: eight full quarter hours then 0.6 kWh
    fleet = one_ev(0.040, 0.0037, [1] * 12, 0.5, 0.7)
    power, soc = st.dumb_schedule(fleet, 0.25)
    np.testing.assert_allclose(power[0, :8], 0.0037)
    assert power[0, 8] == pytest.approx(0.0024)
    assert not power[0, 9:].any()
    assert soc[0, -1] == pytest.approx(0.7, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(
    e_kwh=hs.floats(10, 80), p_kw=hs.sampled_from([2.3, 3.7, 11.0]), eff=hs.floats(0.8, 1.0),
    first=hs.integers(0, 10), length=hs.integers(1, 30), soc0=hs.floats(0, 0.9), gain=hs.floats(0, 1),
)
def test_dumb_delivers_what_fits(e_kwh, p_kw, eff, first, length, soc0, gain):
    T = 40
    avbp = np.zeros(T, int)
    avbp[first:first + length] = 1
    soc_req = soc0 + gain * (1 - soc0)
    fleet = one_ev(e_kwh / 1000, p_kw / 1000, avbp, soc0, soc_req, eff=eff)
    power, soc = st.dumb_schedule(fleet, 0.25)
    need = (soc_req - soc0) * e_kwh / 1000
    fits = length * p_kw / 1000 * eff * 0.25
    assert np.sum(power) * eff * 0.25 == pytest.approx(min(need, fits), abs=1e-12)
    assert np.all(power <= p_kw / 1000 + 1e-15) and not power[0, :first].any()
    # rated power until the requirement is met: at most one partial step
    on = power[0][power[0] > 0]
    assert np.sum(on < p_kw / 1000 - 1e-15) <= 1
    assert soc[0, first + length - 1] <= soc_req + 1e-12


def test_dumb_stops_at_departure(caplog):
    fleet = one_ev(0.040, 0.0037, [0, 1, 1, 0], 0.1, 0.9)
    power, soc = st.dumb_schedule(fleet, 0.25)
    np.testing.assert_allclose(power[0], [0, 0.0037, 0.0037, 0])
    assert "short of its requirement" in caplog.text


def test_dumb_accounts_for_efficiency():
    fleet = one_ev(0.010, 0.01, [1, 1], 0.0, 0.45, eff=0.9)
    power, soc = st.dumb_schedule(fleet, 0.5)
    assert power[0, 0] == pytest.approx(0.0045 / 0.9 / 0.5)
    assert soc[0, 0] == pytest.approx(0.45)


def test_simulate_soc_resets_on_arrival():
    fleet = FleetSpec.build([3], [0.01], avbp=np.array([[1, 0, 1, 1]]), p_ch_max=[0.01], n_gen=1,
                            soci=np.array([[0.2, 0, 0.5, 0]]))
    soc = st.simulate_soc(fleet, np.full((1, 4), 0.004), np.zeros((1, 4)), 0.25)
    np.testing.assert_allclose(soc[0], [0.3, 0.4, 0.6, 0.7])


def test_coordinated_charges_in_cheap_period():
    case = four_bus()
    fleet = one_ev(0.05, 0.1, [1, 1], 0.2, 0.6)
    pd = np.array([[0, 0], [0.05, 0.05], [0.05, 0.05], [0.05, 0.05]])
    r = st.run_coordinated(case, fleet, pd, 0.3 * pd, [2000, 200], 0.25, True)
    assert r.status == "optimal"
    assert r.ev_power_mw[0, 0] == pytest.approx(0, abs=1e-6)
    assert r.ev_power_mw[0, 1] == pytest.approx(0.08, rel=1e-4)
    dumb = st.run_uncoordinated(case, fleet, pd, 0.3 * pd, [2000, 200], 0.25)
    assert dumb.ev_power_mw[0, 0] == pytest.approx(0.08)
    assert r.cost_nok < dumb.cost_nok


def binding_scenario():
    # transformer (branch 1-2) rated 0.25 MVA; EVs would all charge in the cheap first period
    case = four_bus(rate=1.0).replace(rate=np.array([0.25, 1.0, 1.0]), tap=np.array([1.0, 0.0, 0.0]))
    T = 4
    avbp = np.ones((2, T))
    soci = np.zeros((2, T))
    socmi = np.zeros((2, T))
    soci[:, 0] = 0.1
    socmi[:, -1] = 0.5
    fleet = FleetSpec.build([3, 4], [0.1, 0.1], avbp=avbp, p_ch_max=[0.1, 0.1], n_gen=1,
                            soci=soci, socmi=socmi)
    pd = np.tile(np.array([[0.0], [0.05], [0.03], [0.04]]), T)
    return case, fleet, pd, 0.3 * pd, np.array([300.0, 320, 340, 360]), 0.25


def test_binding_transformer_flattens_schedule():
    case, fleet, pd, qd, prices, dt = binding_scenario()
    free = st.run_coordinated(case, fleet, pd, qd, prices, dt, False)
    held = st.run_coordinated(case, fleet, pd, qd, prices, dt, True)
    assert free.status == held.status == "optimal"
    assert np.max(free.max_transformer_ratio) > 105
    assert np.max(held.max_transformer_ratio) == pytest.approx(100, abs=0.5)
    assert held.violations_over() == []
    assert abs(free.ev_energy_mwh - held.ev_energy_mwh) < 1e-4
    assert free.cost_nok <= held.cost_nok
    # the limited schedule pushes charging into later, dearer periods
    assert held.ev_charge_mw[0] < free.ev_charge_mw[0]


def test_report_energy_balance():
    case, fleet, pd, qd, prices, dt = binding_scenario()
    r = st.run_uncoordinated(case, fleet, pd, qd, prices, dt)
    np.testing.assert_allclose(r.generation_mw, r.load_mw + r.ev_charge_mw + r.loss_mw, atol=1e-12)
    assert np.all(r.loss_mw >= 0)
    assert r.status == "violations"
    periods = {v.period for v in r.violations}
    assert periods and all(v.element.startswith("branch 0 ") for v in r.violations)
    assert r.cost_nok == pytest.approx(np.sum(prices * r.generation_mw) * dt)


def test_violation_tolerance():
    r = st.StrategyReport(**{**_blank(), "violations": [
        st.ViolationRecord(0, "branch 0 (1-2) overload", 0.4),
        st.ViolationRecord(1, "branch 0 (1-2) overload", 0.6),
        st.ViolationRecord(2, "bus 3 vmin=0.9", 0.004),
        st.ViolationRecord(3, "bus 3 vmin=0.9", 0.005),
    ]})
    assert [v.period for v in r.violations_over(0.005)] == [1, 3]


def _blank(T=2):
    z = np.zeros(T)
    return dict(strategy="x", status="optimal", dt=0.25, prices=z, generation_mw=z, load_mw=z,
                ev_charge_mw=z, loss_mw=z, v_min=z + 1, v_max=z + 1, max_load_ratio=z,
                max_transformer_ratio=z, branch_ratio=np.zeros((T, 1)), solved=np.ones(T, bool),
                soc=np.zeros((0, T)), ev_power_mw=np.zeros((0, T)))


def _summary(name, cost, key="k"):
    return {"strategy": name, "status": "optimal", "energy_mwh": 1.0, "loss_mwh": 0.1,
            "cost_nok": cost, "scenario_key": key}


def test_saving_arithmetic():
    assert st.saving_pct(75927.1, 75927.1 - 1953.2) == pytest.approx(2.572, abs=5e-4)
    table = st.compare([_summary("dumb", 75927.1), _summary(st.WITH_LIMITS, 75927.1 - 1953.2)])
    row = table.row(st.WITH_LIMITS)
    assert row["daily_saving_nok"] == pytest.approx(1953.2)
    assert row["daily_saving_pct"] == pytest.approx(2.5725, abs=1e-4)
    assert row[st.YEARLY_LABEL] == pytest.approx(365 * 1953.2)


def test_identical_reports_give_zero_saving():
    case, fleet, pd, qd, prices, dt = binding_scenario()
    a = st.run_uncoordinated(case, fleet, pd, qd, prices, dt)
    b = st.run_uncoordinated(case, fleet, pd, qd, prices, dt)
    b.strategy = st.NO_LIMITS
    row = st.compare([a, b]).row(st.NO_LIMITS)
    assert row["daily_saving_nok"] == 0 and row["daily_saving_pct"] == 0


@pytest.mark.parametrize("rows, msg", [
    ([_summary("dumb", 1.0, "a"), _summary(st.NO_LIMITS, 1.0, "b")], "different scenarios"),
    ([_summary("dumb", 1.0), _summary("dumb", 2.0)], "duplicate"),
    ([_summary(st.NO_LIMITS, 1.0)], "dumb-charging report"),
    ([], "nothing"),
])
def test_compare_rejects_mismatched_inputs(rows, msg):
    with pytest.raises(st.ScenarioMismatchError, match=msg):
        st.compare(rows)


def test_scenario_key_tracks_inputs():
    case, fleet, pd, qd, prices, dt = binding_scenario()
    k = st.scenario_key(case, fleet, pd, qd, prices, dt)
    assert k == st.scenario_key(case, fleet, pd.copy(), qd, prices, dt)
    assert k != st.scenario_key(case, fleet, pd, qd, prices + 1, dt)
    assert k != st.scenario_key(case, fleet.subset([0]), pd, qd, prices, dt)


def test_penetration_steps():
    assert st.penetration_steps(10, 4) == [0, 4, 8, 10]
    assert st.penetration_steps(8, 4) == [0, 4, 8]
    with pytest.raises(ValueError):
        st.penetration_steps(8, 0)


def test_hosting_capacity_dumb_and_coordinated():
    case, fleet, pd, qd, prices, dt = binding_scenario()
    dumb = st.hosting_capacity(case, fleet, pd, qd, prices, dt, st.DUMB, 1)
    assert dumb.capacity == 1 and [s.n_ev for s in dumb.steps] == [0, 1, 2]
    assert dumb.steps[-1].max_transformer_ratio > 100.5
    coarse = st.hosting_capacity(case, fleet, pd, qd, prices, dt, st.DUMB, 2)
    assert coarse.capacity == 0 and [s.ok for s in coarse.steps] == [True, False]
    held = st.hosting_capacity(case, fleet, pd, qd, prices, dt, st.WITH_LIMITS, 1)
    assert held.capacity == 2 and held.capacity_pct == 100.0


def test_writers(tmp_path):
    case, fleet, pd, qd, prices, dt = binding_scenario()
    r = st.run_uncoordinated(case, fleet, pd, qd, prices, dt)
    files = st.write_report(r, tmp_path, manifest="manifest {}")
    names = sorted(p.name for p in files)
    assert names == ["dumb_series.csv", "dumb_soc.csv", "dumb_summary.json", "dumb_violations.csv"]
    series = (tmp_path / "dumb_series.csv").read_text().splitlines()
    assert series[0] == "# manifest {}" and series[1].split(",") == list(st.SERIES_COLUMNS)
    assert len(series) == 2 + 4
    summary = json.loads((tmp_path / "dumb_summary.json").read_text())
    assert summary["cost_nok"] == pytest.approx(r.cost_nok)
    st.write_plot_data([r], tmp_path / "plot.csv")
    rows = (tmp_path / "plot.csv").read_text().splitlines()
    assert rows[0] == "period,series,value" and any("dumb/ev_charge_mw" in x for x in rows)


def test_infeasible_voltage_floor_is_reported():
    # base load alone pulls the far bus below a 0.999 p.u. floor
    case = four_bus(vmin=[1, 0.999, 0.999, 0.999])
    fleet = one_ev(0.05, 0.1, [1, 1], 0.2, 0.6)
    pd = np.array([[0, 0], [0.1, 0.1], [0.1, 0.1], [0.1, 0.1]])
    r = st.run_coordinated(case, fleet, pd, 0.3 * pd, [300, 200], 0.25, True)
    assert r.status == "infeasible"
    assert not r.ok
