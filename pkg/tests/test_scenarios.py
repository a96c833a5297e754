import numpy as np
import pytest

from evmpopf import scenarios as sc
from evmpopf.fleet import validate_fleet


def test_fleet_size_for_households():
    assert sc.EvPopulationParams().n_evs(856) == 1113
    assert sc.EvPopulationParams().n_evs(20) == 26


def test_population_statistics():
    ev = sc.sample_population(sc.EvPopulationParams(), 20000, np.random.default_rng(5))
    assert abs(np.mean(ev.distance_km) - 52) < 1
    assert abs(np.std(ev.distance_km) - 22) < 1.5
    mix = [np.mean(ev.charger_kw == kw) for kw in (2.3, 3.7, 11.0)]
    np.testing.assert_allclose(mix, [0.7, 0.2, 0.1], atol=0.02)
    # every slow charger belongs to the frugal group, group shares stay 80/20
    assert np.all(ev.group[ev.charger_kw == 2.3] == 0)
    assert abs(np.mean(ev.group == 0) - 0.8) < 0.02


def test_generated_fleet_is_valid_and_deterministic():
    f1, ev1 = sc.generate_fleet(sc.EvPopulationParams(), 30, seed=4)
    f2, _ = sc.generate_fleet(sc.EvPopulationParams(), 30, seed=4)
    f3, _ = sc.generate_fleet(sc.EvPopulationParams(), 30, seed=5)
    assert f1.n_y == 39 and len(ev1) == 39
    assert validate_fleet(f1, 96) == []
    np.testing.assert_array_equal(f1.avbp, f2.avbp)
    assert not np.array_equal(f1.avbp, f3.avbp)


def test_every_household_gets_an_ev():
    f, _ = sc.generate_fleet(sc.EvPopulationParams(), 10, seed=0, household_bus=np.arange(11, 21))
    assert set(f.bus) == set(range(11, 21))
    assert np.max(np.bincount(f.bus)) == 2


def test_required_soc_is_reachable():
    f, events = sc.generate_fleet(sc.EvPopulationParams(), 50, seed=2)
    for e in events:
        window = (e.depart_t - e.arrive_t + 1) * 0.25
        gain = (e.soc_required_at_departure - e.soc_init) * f.e_max[e.device]
        assert gain <= window * f.p_ch_max[e.device] * f.eff_ch[e.device] + 1e-12


def test_short_horizon_rejected():
    with pytest.raises(sc.ScenarioError):
        sc.generate_fleet(sc.EvPopulationParams(), 5, seed=0, T=48)


@pytest.mark.parametrize("kw", [dict(charger_shares=(0.5, 0.2, 0.2)), dict(sd_distance_km=0),
                                dict(charger_shares=(0.9, 0.05, 0.05))])
def test_parameter_validation(kw):
    with pytest.raises(sc.ScenarioError):
        sc.EvPopulationParams(**kw)


def _history():
    return sc.FeederHistory(
        p_pcc=np.array([1.0, 1.5, 2.0]), p_gen=np.array([0.2, 0.0, 0.1]),
        snapshot_p=np.array([0.6, 0.3, 0.1]), snapshot_q=np.array([0.2, 0.05, 0.03]),
        consumer_energy_kwh=np.array([4000, 6000, 2000, 1000, 3000.0]),
        consumer_transformer=np.array([0, 0, 1, 1, 2]),
        consumer_bus=np.array([2, 3, 3, 4, 5]),
    )


def test_disaggregation_conserves_load():
    lv = sc.baseload_levels(_history())
    total = np.array([1.2, 1.5, 2.1])
    np.testing.assert_allclose(lv.p_transformer.sum(0), total, rtol=1e-12)
    np.testing.assert_allclose(lv.p_consumer.sum(0), total, rtol=1e-12)
    np.testing.assert_allclose(lv.q_transformer.sum(0), lv.q_total, rtol=1e-12)
    np.testing.assert_allclose(lv.q_consumer.sum(0), lv.q_total, rtol=1e-12)
    np.testing.assert_allclose(lv.psi, [0.4, 0.6, 2 / 3, 1 / 3, 1.0])


def test_disaggregation_to_buses():
    pd, qd = sc.disaggregate_baseload(_history(), 6, 0.5, [1, 2, 3, 4, 5])
    assert pd.shape == qd.shape == (5, 6)
    np.testing.assert_allclose(pd[:, 0], pd[:, 1])
    np.testing.assert_allclose(pd[:, :6].sum(0), np.repeat([1.2, 1.5, 2.1], 2), rtol=1e-12)
    assert pd[0].sum() == 0


def test_disaggregation_horizon_and_bus_errors():
    with pytest.raises(sc.ScenarioError, match="history covers"):
        sc.disaggregate_baseload(_history(), 16, 0.25, [1, 2, 3, 4, 5])
    with pytest.raises(sc.ScenarioError, match="not in case"):
        sc.disaggregate_baseload(_history(), 3, 1.0, [1, 2, 3])


@pytest.mark.parametrize("change, msg", [
    (dict(consumer_transformer=np.array([0, 0, 1, 1, 3])), "maps to no transformer"),
    (dict(snapshot_p=np.array([0.6, 0.0, 0.1])), "positive snapshot"),
    (dict(p_gen=np.zeros(2)), "same length"),
])
def test_history_validation(change, msg):
    from dataclasses import fields
    h = _history()
    args = {f.name: getattr(h, f.name) for f in fields(h)}
    args.update(change)
    with pytest.raises(sc.ScenarioError, match=msg):
        sc.FeederHistory(**args)


def test_price_file_round_trip(tmp_path):
    hourly = np.arange(24) * 10.0 + 300
    sc.write_price_series(tmp_path / "p.csv", hourly)
    ps = sc.load_price_series(tmp_path / "p.csv", 96, 0.25)
    np.testing.assert_allclose(ps.values, np.repeat(hourly, 4))
    assert ps.start == "2019-01-01 12:00:00"
    assert ps.sd == pytest.approx(np.std(hourly))


def test_price_file_gap_is_reported(tmp_path):
    path = tmp_path / "p.csv"
    sc.write_price_series(path, np.ones(24))
    lines = path.read_text().splitlines()
    del lines[5]
    path.write_text("\n".join(lines))
    with pytest.raises(sc.ScenarioError, match="missing hours 2019-01-01 16:00:00"):
        sc.load_price_series(path, 96, 0.25)


def test_price_volatility_classification():
    flat = sc.price_series_from_hourly(np.full(24, 380.0), 24, 1.0)
    spiky = sc.price_series_from_hourly(sc.volatile_prices(24, 1.0), 24, 1.0)
    assert not flat.volatile and flat.volatility == 0
    assert spiky.volatile and spiky.volatility >= 0.4


def test_two_tier_window_wraps_midnight():
    p = sc.two_tier_prices(24, 1.0, cheap_from_h=22, cheap_to_h=2)
    clock = (12 + np.arange(24)) % 24
    assert set(clock[p == 300]) == {22, 23, 0, 1}


def test_dt_must_divide_an_hour():
    with pytest.raises(sc.ScenarioError):
        sc.price_series_from_hourly(np.ones(24), 10, 0.4)


def test_calibrated_base_peak_ratio():
    from evmpopf.acpf import branch_load_ratio, sweep_power_flow

    f = sc.calibrated_feeder(20)
    res = sweep_power_flow(f.case, f.pd, f.qd)
    assert all(r.converged for r in res)
    s = np.array([branch_load_ratio(r, f.case)[f.transformer] for r in res]) / 100
    # the specified 89% evening peak plus the network's own losses
    assert 0.88 <= s.max() <= 0.93


def test_random_radial_feeder_is_a_tree():
    case = sc.random_radial_feeder(30, np.random.default_rng(0))
    assert case.n_branch == 29 and set(case.t_bus) == set(range(2, 31))
