"""Scenario data: EV fleets, consumer base load, price series, synthetic feeders.

Times of day are hours on a 24 h clock; a horizon starts at
``window_start_h`` (noon by default) and runs forward in steps of ``dt``.
"""

from __future__ import annotations

import csv
import datetime as _dt
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from evmpopf.fleet import FleetSpec, PlugEvent, extract_plug_events
from evmpopf.grid import PQ, SLACK, NetworkCase

#: Oslo 2019 day-ahead price statistics (NOK/MWh) used as the volatility reference.
REFERENCE_PRICE_MEAN = 386.8
REFERENCE_PRICE_SD = 81.2
REFERENCE_VOLATILITY = REFERENCE_PRICE_SD / REFERENCE_PRICE_MEAN


class ScenarioError(ValueError):
    pass


# --------------------------------------------------------------------- EV fleet
@dataclass(frozen=True)
class EvPopulationParams:
    mean_distance_km: float = 52.0
    sd_distance_km: float = 22.0
    daily_sd_fraction: float = 0.10
    group_shares: tuple[float, float] = (0.8, 0.2)
    consumption_kwh_per_100km: tuple[float, float] = (17.0, 21.0)
    e_max_kwh: tuple[float, float] = (30.0, 60.0)
    arrival_mean_h: float = 17.0
    arrival_sd_min: float = 90.0
    arrival_daily_sd_min: float = 15.0
    plug_hours: float = 14.5
    charger_kw: tuple[float, float, float] = (2.3, 3.7, 11.0)
    charger_shares: tuple[float, float, float] = (0.70, 0.20, 0.10)
    evs_per_household: float = 1.3
    eff_ch: float = 1.0
    soc_required: float = 1.0
    window_start_h: float = 12.0

    def __post_init__(self):
        for name in ("group_shares", "charger_shares"):
            shares = getattr(self, name)
            if abs(sum(shares) - 1.0) > 1e-9 or min(shares) < 0:
                raise ScenarioError(f"{name} must be non-negative and sum to 1")
        positive = ("mean_distance_km", "sd_distance_km", "daily_sd_fraction", "arrival_sd_min",
                    "plug_hours", "evs_per_household", "eff_ch")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ScenarioError(f"{name} must be positive")
        if min(self.e_max_kwh) <= 0 or min(self.charger_kw) <= 0 or min(self.consumption_kwh_per_100km) <= 0:
            raise ScenarioError("capacities, charger ratings and consumptions must be positive")
        # the slowest charger class is reserved for the frugal group; it must fit inside it
        if self.charger_shares[0] > self.group_shares[0] + 1e-12:
            raise ScenarioError("share of slowest chargers exceeds the share of group A")

    def n_evs(self, n_households: int) -> int:
        return int(round(self.evs_per_household * n_households + 1e-9))


@dataclass(frozen=True, eq=False)
class EvSample:
    """Per-EV sampled attributes (arrays of equal length)."""

    distance_km: np.ndarray
    group: np.ndarray
    charger_kw: np.ndarray
    consumption_kwh_per_km: np.ndarray
    e_max_kwh: np.ndarray
    arrival_h: np.ndarray

    @property
    def demand_kwh(self) -> np.ndarray:
        return self.distance_km * self.consumption_kwh_per_km


def _positive_normal(rng, mean, sd, size):
    out = rng.normal(mean, sd, size)
    bad = out <= 0
    while np.any(bad):
        m = mean[bad] if np.ndim(mean) else mean
        s = sd[bad] if np.ndim(sd) else sd
        out[bad] = rng.normal(m, s, int(bad.sum()))
        bad = out <= 0
    return out


def sample_population(params: EvPopulationParams, n: int, rng: np.random.Generator) -> EvSample:
    """Draw ``n`` EVs for one simulated day."""
    fixed = _positive_normal(rng, params.mean_distance_km, params.sd_distance_km, n)
    today = _positive_normal(rng, fixed, params.daily_sd_fraction * fixed, n)
    # charger class first: slow chargers all go to group A, the remaining
    # group-A share is spread over the faster classes
    charger_class = rng.choice(3, size=n, p=np.asarray(params.charger_shares))
    rest_a = params.group_shares[0] - params.charger_shares[0]
    rest = 1.0 - params.charger_shares[0]
    p_a_fast = rest_a / rest if rest > 0 else 0.0
    is_a = np.where(charger_class == 0, True, rng.random(n) < p_a_fast)
    group = np.where(is_a, 0, 1)
    cons = np.asarray(params.consumption_kwh_per_100km)[group] / 100.0
    e_max = np.asarray(params.e_max_kwh)[group]
    kw = np.asarray(params.charger_kw)[charger_class]
    own_mean = rng.normal(params.arrival_mean_h, params.arrival_sd_min / 60.0, n)
    arrival = own_mean + rng.normal(0.0, params.arrival_daily_sd_min / 60.0, n)
    return EvSample(today, group, kw, cons, e_max, arrival)


def _hours_since_start(clock_h, start_h):
    return np.mod(np.asarray(clock_h) - start_h, 24.0)


def generate_fleet(
    params: EvPopulationParams,
    n_households: int,
    seed: int,
    T: int = 96,
    dt: float = 0.25,
    *,
    household_bus=None,
    n_gen: int = 1,
) -> tuple[FleetSpec, list[PlugEvent]]:
    """Sample a fleet and its plug events for one noon-to-noon day.

    ``household_bus`` gives the bus id of each household (defaults to
    ``1..n_households``). Households receive one EV each; the extra EVs go to
    randomly chosen households without a second car.
    """
    if T * dt < 24.0 - 1e-9:
        raise ScenarioError(f"horizon of {T * dt:g} h is shorter than the 24 h plug cycle")
    if n_households <= 0:
        raise ScenarioError("n_households must be positive")
    rng = np.random.default_rng(seed)
    n = params.n_evs(n_households)
    hh_bus = np.arange(1, n_households + 1) if household_bus is None else np.asarray(household_bus, dtype=int)
    if len(hh_bus) != n_households:
        raise ScenarioError("household_bus must have one entry per household")
    owner = np.arange(n) % n_households
    if n > n_households:
        extra = n - n_households
        owner[n_households:] = rng.permutation(n_households)[np.arange(extra) % n_households]
    ev = sample_population(params, n, rng)

    start = _hours_since_start(ev.arrival_h, params.window_start_h)
    stop = np.minimum(start + params.plug_hours, T * dt)
    first = np.ceil(start / dt - 1e-9).astype(int)
    last = np.ceil(stop / dt - 1e-9).astype(int) - 1
    first = np.clip(first, 0, T - 1)
    last = np.clip(last, first, T - 1)

    e_max = ev.e_max_kwh / 1000.0
    p_max = ev.charger_kw / 1000.0
    soc_init = np.maximum(0.0, 1.0 - ev.demand_kwh / ev.e_max_kwh)
    window_h = (last - first + 1) * dt
    reachable = soc_init + 0.95 * window_h * p_max * params.eff_ch / e_max
    soc_req = np.maximum(soc_init, np.minimum(params.soc_required, reachable))

    avbp = np.zeros((n, T), dtype=np.int8)
    soci = np.zeros((n, T))
    socmi = np.zeros((n, T))
    events = []
    for i in range(n):
        avbp[i, first[i] : last[i] + 1] = 1
        soci[i, first[i]] = soc_init[i]
        socmi[i, last[i]] = soc_req[i]
        events.append(PlugEvent(i, int(first[i]), int(last[i]), float(soc_init[i]), float(soc_req[i])))
    fleet = FleetSpec.build(
        hh_bus[owner], e_max, avbp=avbp, p_ch_max=p_max, n_gen=n_gen,
        eff_ch=np.full(n, params.eff_ch), soci=soci, socmi=socmi,
    )
    return fleet, events


def fleet_energy_need_mwh(fleet: FleetSpec) -> np.ndarray:
    """Grid-side energy each EV must draw over the horizon (MWh)."""
    gain = np.zeros(fleet.n_y)
    for ev in extract_plug_events(fleet):
        gain[ev.device] += max(0.0, ev.soc_required_at_departure - ev.soc_init)
    return gain * fleet.e_max / fleet.eff_ch


# ------------------------------------------------------------------ base load
@dataclass(frozen=True, eq=False)
class FeederHistory:
    """Measured feeder data, following the transformer/consumer hierarchy.

    ``p_pcc`` and ``p_gen`` are hourly MW series. ``snapshot_p``/``snapshot_q``
    hold one reference reading per distribution transformer (its hour is the
    caller's choice). Consumers carry annual energy, a transformer index and
    the bus id they load.
    """

    p_pcc: np.ndarray
    p_gen: np.ndarray
    snapshot_p: np.ndarray
    snapshot_q: np.ndarray
    consumer_energy_kwh: np.ndarray
    consumer_transformer: np.ndarray
    consumer_bus: np.ndarray

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            object.__setattr__(self, name, np.asarray(getattr(self, name)))
        if self.p_pcc.shape != self.p_gen.shape:
            raise ScenarioError("p_pcc and p_gen must have the same length")
        n_tr = len(self.snapshot_p)
        if len(self.snapshot_q) != n_tr:
            raise ScenarioError("snapshot_p and snapshot_q must have the same length")
        tr = self.consumer_transformer
        if len(tr) != len(self.consumer_energy_kwh) or len(tr) != len(self.consumer_bus):
            raise ScenarioError("consumer arrays must have equal length")
        if np.any((tr < 0) | (tr >= n_tr)):
            bad = int(np.flatnonzero((tr < 0) | (tr >= n_tr))[0])
            raise ScenarioError(f"consumer {bad} maps to no transformer")
        if np.sum(self.snapshot_p) <= 0:
            raise ScenarioError("transformer snapshot must carry positive total load")
        if np.any(self.snapshot_p <= 0):
            raise ScenarioError("every transformer needs positive snapshot load to define its reactive ratio")
        sums = np.bincount(tr, weights=self.consumer_energy_kwh, minlength=n_tr)
        empty = np.flatnonzero(sums <= 0)
        if len(empty):
            raise ScenarioError(f"transformer {int(empty[0])} has no consumer energy to split by")


@dataclass(frozen=True, eq=False)
class BaseloadLevels:
    """Hourly series at every level of the hierarchy (MW / MVAr)."""

    p_total: np.ndarray
    q_total: np.ndarray
    p_transformer: np.ndarray
    q_transformer: np.ndarray
    p_consumer: np.ndarray
    q_consumer: np.ndarray
    kappa: np.ndarray
    phi: np.ndarray
    psi: np.ndarray


def baseload_levels(history: FeederHistory) -> BaseloadLevels:
    p_total = history.p_pcc + history.p_gen
    sp_total = np.sum(history.snapshot_p)
    kappa = history.snapshot_p / sp_total
    phi = history.snapshot_q / history.snapshot_p
    big_phi = np.sum(history.snapshot_q) / sp_total
    q_total = big_phi * p_total
    p_tr = kappa[:, None] * p_total[None, :]
    q_tr = phi[:, None] * p_tr
    tr = history.consumer_transformer
    e = history.consumer_energy_kwh
    psi = e / np.bincount(tr, weights=e, minlength=len(kappa))[tr]
    p_c = psi[:, None] * p_tr[tr]
    q_c = psi[:, None] * q_tr[tr]
    return BaseloadLevels(p_total, q_total, p_tr, q_tr, p_c, q_c, kappa, phi, psi)


def disaggregate_baseload(history: FeederHistory, T: int, dt: float, bus_ids) -> tuple[np.ndarray, np.ndarray]:
    """Bus-indexed base load ``(PD, QD)`` in MW/MVAr, shape ``n_bus x T``.

    Hourly values are held constant over their sub-periods.
    """
    lv = baseload_levels(history)
    steps = _steps_per_hour(dt)
    hours = math.ceil(T / steps)
    if hours > len(lv.p_total):
        raise ScenarioError(f"history covers {len(lv.p_total)} h, horizon needs {hours} h")
    bus_ids = np.asarray(bus_ids)
    where = {int(b): k for k, b in enumerate(bus_ids)}
    missing = [int(b) for b in history.consumer_bus if int(b) not in where]
    if missing:
        raise ScenarioError(f"consumer bus ids not in case: {sorted(set(missing))[:10]}")
    rows = np.array([where[int(b)] for b in history.consumer_bus], dtype=int)
    pd = np.zeros((len(bus_ids), hours))
    qd = np.zeros((len(bus_ids), hours))
    np.add.at(pd, rows, lv.p_consumer[:, :hours])
    np.add.at(qd, rows, lv.q_consumer[:, :hours])
    return np.repeat(pd, steps, axis=1)[:, :T], np.repeat(qd, steps, axis=1)[:, :T]


def _steps_per_hour(dt: float) -> int:
    steps = 1.0 / dt
    if abs(steps - round(steps)) > 1e-9:
        raise ScenarioError(f"dt={dt} h does not divide an hour")
    return int(round(steps))


# --------------------------------------------------------------------- prices
@dataclass(frozen=True, eq=False)
class PriceSeries:
    values: np.ndarray
    hourly: np.ndarray
    mean: float
    sd: float
    volatile: bool
    start: str | None = None

    @property
    def volatility(self) -> float:
        return self.sd / self.mean if self.mean else math.inf


def price_series_from_hourly(hourly, T: int, dt: float, start: str | None = None) -> PriceSeries:
    hourly = np.asarray(hourly, dtype=float)
    steps = _steps_per_hour(dt)
    hours = math.ceil(T / steps)
    if len(hourly) < hours:
        raise ScenarioError(f"price series has {len(hourly)} h, horizon needs {hours} h")
    used = hourly[:hours]
    mean = float(np.mean(used))
    sd = float(np.std(used))
    volatile = bool(mean > 0 and sd / mean > REFERENCE_VOLATILITY)
    return PriceSeries(np.repeat(used, steps)[:T], used, mean, sd, volatile, start)


def load_price_series(path, T: int, dt: float) -> PriceSeries:
    """Read ``timestamp,price_nok_mwh`` rows (hourly) covering the horizon."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"price file not found: {path}")
    stamps, prices = [], []
    with path.open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows or [c.strip() for c in rows[0][:2]] != ["timestamp", "price_nok_mwh"]:
        raise ScenarioError(f"{path}: header must be 'timestamp,price_nok_mwh'")
    for lineno, row in enumerate(rows[1:], start=2):
        try:
            stamps.append(_dt.datetime.fromisoformat(row[0].strip()).replace(tzinfo=None))
            prices.append(float(row[1]))
        except (ValueError, IndexError) as exc:
            raise ScenarioError(f"{path}:{lineno}: {exc}") from None
    if not stamps:
        raise ScenarioError(f"{path}: no price rows")
    hours = math.ceil(T / _steps_per_hour(dt))
    expected = [stamps[0] + _dt.timedelta(hours=h) for h in range(hours)]
    have = set(stamps)
    missing = [e.isoformat(sep=" ") for e in expected if e not in have]
    if missing:
        raise ScenarioError(f"{path}: missing hours {', '.join(missing)}")
    lookup = dict(zip(stamps, prices))
    return price_series_from_hourly([lookup[e] for e in expected], T, dt, stamps[0].isoformat(sep=" "))


def write_price_series(path, hourly, start="2019-01-01 12:00:00") -> None:
    t0 = _dt.datetime.fromisoformat(start)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "price_nok_mwh"])
        for h, v in enumerate(hourly):
            w.writerow([(t0 + _dt.timedelta(hours=h)).isoformat(sep=" "), repr(float(v))])


def two_tier_prices(T: int, dt: float, *, high: float = 450.0, low: float = 300.0,
                    cheap_from_h: float = 0.0, cheap_to_h: float = 4.0, start_h: float = 12.0) -> np.ndarray:
    """Flat high price with one cheap window (clock hours, may wrap midnight)."""
    clock = np.mod(start_h + np.arange(T) * dt, 24.0)
    if cheap_from_h <= cheap_to_h:
        cheap = (clock >= cheap_from_h) & (clock < cheap_to_h)
    else:
        cheap = (clock >= cheap_from_h) | (clock < cheap_to_h)
    return np.where(cheap, low, high)


def volatile_prices(T: int, dt: float, *, mean: float = 386.8, start_h: float = 12.0) -> np.ndarray:
    """A spiky day: expensive evening peak, deep night valley (sd/mean about 0.6)."""
    clock = np.mod(start_h + np.arange(T) * dt, 24.0)
    shape = np.interp(clock, [0, 3, 6, 8, 12, 16, 18, 20, 22, 24],
                      [0.35, 0.25, 0.5, 1.4, 0.9, 1.2, 2.3, 1.6, 0.8, 0.35])
    return mean * shape / np.mean(shape)


# ------------------------------------------------------------------- feeders
#: Normalised household demand by clock hour (peak 1.0 in the early evening).
HOUSEHOLD_PROFILE = np.array([
    0.56, 0.55, 0.55, 0.56, 0.58, 0.62,  # 00-05
    0.72, 0.82, 0.78, 0.70, 0.66, 0.64,  # 06-11
    0.63, 0.62, 0.62, 0.66, 0.78, 0.92,  # 12-17
    1.00, 0.98, 0.90, 0.80, 0.70, 0.61,  # 18-23
])


def household_profile(hours: int, start_h: int = 12) -> np.ndarray:
    """Hourly normalised household demand starting at clock hour ``start_h``."""
    return HOUSEHOLD_PROFILE[(start_h + np.arange(hours)) % 24]


@dataclass(frozen=True, eq=False)
class Feeder:
    """A synthetic feeder plus the data needed to build its scenario."""

    case: NetworkCase
    household_bus: np.ndarray
    pd: np.ndarray
    qd: np.ndarray
    history: FeederHistory | None = None
    transformer: int = -1
    info: dict = field(default_factory=dict)


def random_radial_feeder(n_bus: int, rng: np.random.Generator, *, base_mva: float = 1.0,
                         load_mw: float = 0.01) -> NetworkCase:
    """Random tree with modest impedances and random PQ loads at every non-slack bus."""
    if n_bus < 2:
        raise ScenarioError("a feeder needs at least two buses")
    parent = np.array([int(rng.integers(max(0, k - 4), k)) for k in range(1, n_bus)])
    r = rng.uniform(0.002, 0.02, n_bus - 1)
    x = r * rng.uniform(0.5, 3.0, n_bus - 1)
    pd = np.concatenate([[0.0], rng.uniform(0.2, 1.0, n_bus - 1) * load_mw])
    qd = pd * rng.uniform(0.1, 0.5, n_bus)
    bus_type = np.full(n_bus, PQ)
    bus_type[0] = SLACK
    return NetworkCase.from_arrays(
        base_mva=base_mva, bus_id=np.arange(1, n_bus + 1), bus_type=bus_type,
        f_bus=parent + 1, t_bus=np.arange(2, n_bus + 1), r=r, x=x,
        b=rng.uniform(0, 1e-4, n_bus - 1), gen_bus=[1], pd=pd, qd=qd,
        vmin=np.where(bus_type == SLACK, 1.0, 0.9), vmax=np.where(bus_type == SLACK, 1.0, 1.1),
        name=f"radial{n_bus}",
    )


def _feeder_case(n_lv: int, n_feeders: int, s_tr_mva: float, rng, *, base_mva: float,
                 r_tr: float, x_tr: float, r_km: float, x_km: float, span_km: float,
                 line_rate_mva: float, name: str):
    """MV slack -> one transformer -> LV busbar -> ``n_feeders`` radial strings."""
    z_base = 0.4 ** 2 / base_mva  # 400 V secondary
    bus_id = [1, 2]
    f_bus, t_bus, r, x, rate, tap = [1], [2], [r_tr], [x_tr], [s_tr_mva], [1.0]
    strings = np.array_split(np.arange(n_lv), n_feeders)
    nxt = 3
    for members in strings:
        prev = 2
        for _ in members:
            length = span_km * rng.uniform(0.6, 1.4)
            bus_id.append(nxt)
            f_bus.append(prev)
            t_bus.append(nxt)
            r.append(r_km * length / z_base)
            x.append(x_km * length / z_base)
            rate.append(line_rate_mva)
            tap.append(0.0)
            prev = nxt
            nxt += 1
    nb = len(bus_id)
    bus_type = np.full(nb, PQ)
    bus_type[0] = SLACK
    case = NetworkCase.from_arrays(
        base_mva=base_mva, bus_id=bus_id, bus_type=bus_type, f_bus=f_bus, t_bus=t_bus,
        r=r, x=x, tap=tap, rate=rate, gen_bus=[1],
        vmin=np.where(bus_type == SLACK, 1.0, 0.9), vmax=np.where(bus_type == SLACK, 1.0, 1.1),
        name=name,
    )
    return case, np.arange(3, nb + 1)


def _history_for(case, household_bus, profile_hours, peak_mw, rng, pf_q=0.3):
    n_h = len(household_bus)
    energy = rng.lognormal(np.log(16000.0), 0.3, n_h)
    series = household_profile(profile_hours)
    return FeederHistory(
        p_pcc=peak_mw * series / np.max(series),
        p_gen=np.zeros(profile_hours),
        snapshot_p=np.array([peak_mw]),
        snapshot_q=np.array([pf_q * peak_mw]),
        consumer_energy_kwh=energy,
        consumer_transformer=np.zeros(n_h, dtype=int),
        consumer_bus=np.asarray(household_bus),
    )


def calibrated_feeder(
    n_households: int = 20,
    *,
    seed: int = 7,
    T: int = 96,
    dt: float = 0.25,
    peak_ratio: float = 0.89,
    s_tr_mva: float = 0.1,
    n_strings: int = 4,
) -> Feeder:
    """One MV/LV transformer serving households; base evening peak at ``peak_ratio`` of its rating.

    Line ratings are generous so the transformer is the only element that
    can bind, and strings are short so load ratio rises faster than voltage
    falls.
    """
    rng = np.random.default_rng(seed)
    base = s_tr_mva
    case, hh_bus = _feeder_case(
        n_households, n_strings, s_tr_mva, rng, base_mva=base,
        r_tr=0.01, x_tr=0.04, r_km=0.21, x_km=0.08, span_km=0.03,
        line_rate_mva=10 * s_tr_mva, name=f"calibrated{n_households}",
    )
    # the evening peak's apparent power: P sqrt(1 + 0.3^2) = peak_ratio * rating
    peak_p = peak_ratio * s_tr_mva / math.sqrt(1 + 0.3 ** 2)
    hours = math.ceil(T * dt)
    history = _history_for(case, hh_bus, hours, peak_p, rng)
    pd, qd = disaggregate_baseload(history, T, dt, case.bus_id)
    return Feeder(case, hh_bus, pd, qd, history, transformer=0,
                  info={"peak_ratio": peak_ratio, "s_tr_mva": s_tr_mva})


def large_feeder(n_bus: int = 200, *, seed: int = 11, T: int = 96, dt: float = 0.25,
                 s_tr_mva: float = 1.0, n_strings: int = 10) -> Feeder:
    """A long multi-string feeder for scaling runs (base peak about 60% of rating)."""
    rng = np.random.default_rng(seed)
    n_lv = n_bus - 2
    case, hh_bus = _feeder_case(
        n_lv, n_strings, s_tr_mva, rng, base_mva=s_tr_mva,
        r_tr=0.01, x_tr=0.04, r_km=0.21, x_km=0.08, span_km=0.02,
        line_rate_mva=s_tr_mva, name=f"feeder{n_bus}",
    )
    hours = math.ceil(T * dt)
    history = _history_for(case, hh_bus, hours, 0.6 * s_tr_mva / math.sqrt(1.09), rng)
    pd, qd = disaggregate_baseload(history, T, dt, case.bus_id)
    return Feeder(case, hh_bus, pd, qd, history, transformer=0, info={"s_tr_mva": s_tr_mva})
