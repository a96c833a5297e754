"""Charging strategies, their reports, hosting-capacity sweeps and comparisons.

Three strategies share one scenario (grid, base load, fleet, prices):

``dumb``
    every EV charges at its rated power from arrival until its energy need
    is met; power flow is solved per period and limit breaches are logged.
``mpopf-no-limits``
    cost-minimizing multiperiod OPF without line, transformer or voltage
    limits.
``mpopf-with-limits``
    the same OPF with all operational limits enforced.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from evmpopf.acpf import PfOptions, sweep_power_flow
from evmpopf.fleet import FleetSpec, PlugEvent, extract_plug_events
from evmpopf.grid import NetworkCase, build_admittances, line_flows, polar
from evmpopf.ipm import IpmOptions, solve
from evmpopf.mpopf import assemble

logger = logging.getLogger(__name__)

DUMB = "dumb"
NO_LIMITS = "mpopf-no-limits"
WITH_LIMITS = "mpopf-with-limits"
STRATEGIES = (DUMB, NO_LIMITS, WITH_LIMITS)

# breaches smaller than this are rounding, not violations (p.u. voltage / % loading)
RECORD_TOL_V = 1e-6
RECORD_TOL_RATIO = 1e-4
HOSTING_TOL = 0.005

SERIES_COLUMNS = ("period", "price_nok_mwh", "generation_mw", "load_mw", "ev_charge_mw", "loss_mw",
                  "v_min_pu", "v_max_pu", "max_load_ratio_pct", "max_transformer_ratio_pct", "solved")
YEARLY_LABEL = "yearly_saving_nok_extrapolated"
TABLE_COLUMNS = ("strategy", "status", "energy_mwh", "loss_mwh", "cost_nok", "daily_saving_nok",
                 "daily_saving_pct", YEARLY_LABEL, "max_hosting_capacity_ev", "max_hosting_capacity_pct")


class ScenarioMismatchError(ValueError):
    """Reports being compared were not produced from the same inputs."""


class ViolationRecord(tuple):
    """``(period, element, magnitude)``; magnitude in % loading or p.u. voltage."""

    __slots__ = ()

    def __new__(cls, period: int, element: str, magnitude: float):
        return super().__new__(cls, (int(period), str(element), float(magnitude)))

    period = property(lambda self: self[0])
    element = property(lambda self: self[1])
    magnitude = property(lambda self: self[2])


@dataclass(eq=False)
class StrategyReport:
    strategy: str
    status: str
    dt: float
    prices: np.ndarray
    generation_mw: np.ndarray
    load_mw: np.ndarray
    ev_charge_mw: np.ndarray
    loss_mw: np.ndarray
    v_min: np.ndarray
    v_max: np.ndarray
    max_load_ratio: np.ndarray
    max_transformer_ratio: np.ndarray
    branch_ratio: np.ndarray
    solved: np.ndarray
    soc: np.ndarray
    ev_power_mw: np.ndarray
    violations: list = field(default_factory=list)
    scenario_key: str = ""
    n_ev: int = 0
    iterations: int = 0
    solve_time: float = 0.0
    message: str = ""
    trace: list = field(default_factory=list)

    @property
    def T(self) -> int:
        return len(self.prices)

    @property
    def energy_mwh(self) -> float:
        return float(np.sum(self.generation_mw) * self.dt)

    @property
    def loss_mwh(self) -> float:
        return float(np.sum(self.loss_mw) * self.dt)

    @property
    def ev_energy_mwh(self) -> float:
        return float(np.sum(self.ev_charge_mw) * self.dt)

    @property
    def cost_nok(self) -> float:
        return float(np.sum(self.prices * self.generation_mw) * self.dt)

    @property
    def ok(self) -> bool:
        """Solved everywhere and free of violations."""
        return self.status in ("optimal", "converged") and not self.violations

    def violations_over(self, tol: float = HOSTING_TOL) -> list:
        """Violations exceeding ``tol`` relative to the limit (0.005 = 0.5 %)."""
        out = []
        for v in self.violations:
            if v.element.startswith("branch") or v.element == "power flow":
                if v.magnitude > 100.0 * tol:
                    out.append(v)
            elif v.magnitude > tol * self._v_ref(v.element):
                out.append(v)
        return out

    def _v_ref(self, element: str) -> float:
        try:
            return float(element.rsplit("=", 1)[1])
        except (IndexError, ValueError):
            return 1.0

    def summary(self) -> dict:
        return {
            "strategy": self.strategy,
            "status": self.status,
            "n_ev": self.n_ev,
            "energy_mwh": self.energy_mwh,
            "loss_mwh": self.loss_mwh,
            "ev_energy_mwh": self.ev_energy_mwh,
            "cost_nok": self.cost_nok,
            "max_load_ratio_pct": _nanmax(self.max_load_ratio),
            "max_transformer_ratio_pct": _nanmax(self.max_transformer_ratio),
            "v_min_pu": _nanmin(self.v_min),
            "v_max_pu": _nanmax(self.v_max),
            "n_violations": len(self.violations),
            "unsolved_periods": int(np.sum(~self.solved)),
            "iterations": self.iterations,
            "solve_time_s": self.solve_time,
            "scenario_key": self.scenario_key,
        }


def _nanmax(a) -> float:
    a = np.asarray(a, float)
    return float(np.nanmax(a)) if np.any(np.isfinite(a)) else math.nan


def _nanmin(a) -> float:
    a = np.asarray(a, float)
    return float(np.nanmin(a)) if np.any(np.isfinite(a)) else math.nan


def scenario_key(case: NetworkCase, fleet: FleetSpec, pd, qd, prices, dt) -> str:
    """Hash identifying the inputs shared by the strategies of one comparison."""
    h = hashlib.sha256()
    h.update(case.name.encode())
    for a in (case.bus_id, case.r, case.x, case.rate, pd, qd, prices, [dt], fleet.bus, fleet.e_max,
              fleet.p_ch_max, fleet.eff_ch, fleet.avbp, fleet.soci, fleet.socmi):
        h.update(np.ascontiguousarray(np.asarray(a, dtype=float)).tobytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------- building
def _ratios(case: NetworkCase, s_line: np.ndarray) -> np.ndarray:
    """Per-period worst terminal loading of each branch (%), NaN when unrated."""
    nl = case.n_branch
    s = np.abs(s_line) * case.base_mva
    worst = np.fmax(s[:, :nl], s[:, nl:])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = 100.0 * worst / case.rate
    return np.where(case.rated, ratio, np.nan)


def _collect_violations(case: NetworkCase, vm: np.ndarray, ratio: np.ndarray, solved: np.ndarray) -> list:
    out = []
    for t in range(vm.shape[0]):
        if not solved[t]:
            out.append(ViolationRecord(t, "power flow", math.inf))
            continue
        low = case.vmin - vm[t]
        high = vm[t] - case.vmax
        for i in np.flatnonzero(low > RECORD_TOL_V):
            out.append(ViolationRecord(t, f"bus {int(case.bus_id[i])} undervoltage vmin={case.vmin[i]:g}", low[i]))
        for i in np.flatnonzero(high > RECORD_TOL_V):
            out.append(ViolationRecord(t, f"bus {int(case.bus_id[i])} overvoltage vmax={case.vmax[i]:g}", high[i]))
        with np.errstate(invalid="ignore"):
            over = np.flatnonzero(ratio[t] - 100.0 > RECORD_TOL_RATIO)
        for k in over:
            out.append(ViolationRecord(t, f"branch {k} ({int(case.f_bus[k])}-{int(case.t_bus[k])}) overload",
                                       ratio[t, k] - 100.0))
    return out


def _build_report(strategy, status, case, fleet, pd, prices, dt, vm, s_line, gen_mw, ev_power, soc,
                  solved, key, **extra) -> StrategyReport:
    ratio = _ratios(case, s_line)
    trafo = case.is_transformer & case.rated
    with np.errstate(invalid="ignore"):
        max_ratio = np.array([_nanmax(r) for r in ratio])
        max_trafo = np.array([_nanmax(r[trafo]) if np.any(trafo) else math.nan for r in ratio])
    generation = np.asarray(gen_mw).sum(axis=1)
    load = np.asarray(pd).sum(axis=0)
    ev = np.asarray(ev_power).sum(axis=0) if len(ev_power) else np.zeros(len(prices))
    report = StrategyReport(
        strategy=strategy,
        status=status,
        dt=dt,
        prices=np.asarray(prices, float),
        generation_mw=np.where(solved, generation, np.nan),
        load_mw=load,
        ev_charge_mw=ev,
        loss_mw=np.where(solved, generation - load - ev, np.nan),
        v_min=np.where(solved, vm.min(axis=1), np.nan),
        v_max=np.where(solved, vm.max(axis=1), np.nan),
        max_load_ratio=max_ratio,
        max_transformer_ratio=max_trafo,
        branch_ratio=ratio,
        solved=np.asarray(solved, bool),
        soc=soc,
        ev_power_mw=np.asarray(ev_power),
        violations=_collect_violations(case, vm, ratio, solved),
        scenario_key=key,
        n_ev=fleet.n_y,
        **extra,
    )
    return report


# ---------------------------------------------------------------- dumb
def dumb_schedule(fleet: FleetSpec, dt: float, events: list[PlugEvent] | None = None):
    """Charge-on-arrival power (MW, ``n_ev x T``) and the resulting SOC.

    Each EV draws rated power from its arrival period until the stored energy
    reaches its departure requirement; the final period is trimmed so the
    requirement is hit exactly. Charging stops at departure even if the
    requirement is not met.
    """
    T = fleet.horizon
    n = fleet.n_y
    events = extract_plug_events(fleet) if events is None else events
    power = np.zeros((n, T))
    for ev in events:
        i = ev.device
        per_step = fleet.eff_ch[i] * fleet.p_ch_max[i] * dt
        need = max(0.0, ev.soc_required_at_departure - ev.soc_init) * fleet.e_max[i]
        for t in range(ev.arrive_t, ev.depart_t + 1):
            if need <= 1e-15 or per_step <= 0:
                break
            take = min(per_step, need)
            power[i, t] = take / (fleet.eff_ch[i] * dt)
            need -= take
        if need > 1e-9:
            logger.warning("EV %d leaves %.4f MWh short of its requirement", i, need)
    soc = simulate_soc(fleet, power, np.zeros_like(power), dt)
    return power, soc


def simulate_soc(fleet: FleetSpec, p_ch, p_dch, dt: float) -> np.ndarray:
    """SOC after each period (``n_ev x T``), resetting to the arrival SOC."""
    n, T = fleet.n_y, fleet.horizon
    soc = np.zeros((n, T))
    arrive = np.zeros((n, T), dtype=bool)
    arrive[:, 0] = True
    arrive[:, 1:] = fleet.avbp[:, 1:].astype(bool) & ~fleet.avbp[:, :-1].astype(bool)
    prev = np.zeros(n)
    for t in range(T):
        prev = np.where(arrive[:, t], fleet.soci[:, t], prev)
        prev = prev + (fleet.eff_ch * p_ch[:, t] - p_dch[:, t] / fleet.eff_dch) * dt / fleet.e_max
        soc[:, t] = prev
    return soc


def _ev_bus_load(case: NetworkCase, fleet: FleetSpec, power: np.ndarray) -> np.ndarray:
    out = np.zeros((case.n_bus, power.shape[1]))
    if fleet.n_y:
        np.add.at(out, case.bus_index(fleet.bus), power)
    return out


def run_uncoordinated(case: NetworkCase, fleet: FleetSpec, pd, qd, prices, dt: float,
                      pf_options: PfOptions | None = None) -> StrategyReport:
    """Dumb charging followed by a per-period power-flow sweep."""
    pd, qd = np.asarray(pd, float), np.asarray(qd, float)
    power, soc = dumb_schedule(fleet, dt)
    p_total = pd + _ev_bus_load(case, fleet, power)
    sols = sweep_power_flow(case, p_total, qd, pf_options)
    solved = np.array([s.converged for s in sols])
    vm = np.array([s.v_mag for s in sols])
    s_line = np.array([s.s_line for s in sols])
    gen = np.array([s.gen_p for s in sols])
    if not np.all(solved):
        status = "diverged"
    else:
        status = "converged"
    report = _build_report(DUMB, status, case, fleet, pd, prices, dt, vm, s_line, gen, power, soc, solved,
                           scenario_key(case, fleet, pd, qd, prices, dt))
    if report.violations and status == "converged":
        report.status = "violations"
    return report


# ---------------------------------------------------------------- coordinated
def run_coordinated(case: NetworkCase, fleet: FleetSpec, pd, qd, prices, dt: float, network_limits: bool,
                    opts: IpmOptions | None = None) -> StrategyReport:
    """Solve the multiperiod OPF and report its schedule."""
    pd, qd = np.asarray(pd, float), np.asarray(qd, float)
    problem = assemble(case, fleet, pd, qd, prices, dt, network_limits=network_limits)
    res = solve(problem, opts or IpmOptions())
    u = problem.unpack(res.x)
    T = problem.T
    v = polar(u["vm"], u["theta"])
    adm = build_admittances(case)
    s_line = np.array([line_flows(v[t], adm) for t in range(T)])
    ev_power = (u["pch"] - u["pdch"]).T
    strategy = WITH_LIMITS if network_limits else NO_LIMITS
    return _build_report(
        strategy, res.status, case, fleet, pd, prices, dt, u["vm"], s_line, u["pg"], ev_power, u["soc"].T,
        np.ones(T, dtype=bool), scenario_key(case, fleet, pd, qd, prices, dt),
        iterations=res.iterations, solve_time=res.solve_time, message=res.message, trace=res.log,
    )


def run_strategy(strategy: str, case, fleet, pd, qd, prices, dt, opts: IpmOptions | None = None) -> StrategyReport:
    if strategy == DUMB:
        return run_uncoordinated(case, fleet, pd, qd, prices, dt)
    if strategy in (NO_LIMITS, WITH_LIMITS):
        return run_coordinated(case, fleet, pd, qd, prices, dt, strategy == WITH_LIMITS, opts)
    raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")


def _run_job(args):
    return run_strategy(*args)


def run_all(case, fleet, pd, qd, prices, dt, strategies=STRATEGIES, *, opts=None, jobs: int = 1) -> list:
    """Run several strategies (optionally in worker processes), in input order."""
    jobs_args = [(s, case, fleet, pd, qd, prices, dt, opts) for s in strategies]
    if jobs <= 1 or len(jobs_args) <= 1:
        return [_run_job(a) for a in jobs_args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_job, jobs_args))


# ---------------------------------------------------------------- hosting capacity
@dataclass(frozen=True)
class HostingStep:
    n_ev: int
    status: str
    max_load_ratio: float
    max_transformer_ratio: float
    v_min: float
    n_violations: int
    ok: bool


@dataclass
class HostingResult:
    strategy: str
    capacity: int
    n_total: int
    steps: list

    @property
    def capacity_pct(self) -> float:
        return 100.0 * self.capacity / self.n_total if self.n_total else 100.0


def penetration_steps(n_total: int, ev_step: int) -> list[int]:
    if ev_step <= 0:
        raise ValueError("ev_step must be positive")
    steps = list(range(0, n_total + 1, ev_step))
    if steps[-1] != n_total:
        steps.append(n_total)
    return steps


def growth_order(n_total: int, seed: int) -> np.ndarray:
    """Deterministic order in which EVs are added; prefixes are nested fleets."""
    return np.random.default_rng(seed).permutation(n_total)


def _hosting_job(args):
    strategy, case, fleet, pd, qd, prices, dt, opts, tol, n = args
    r = run_strategy(strategy, case, fleet, pd, qd, prices, dt, opts)
    bad = r.violations_over(tol)
    ok = r.status in ("optimal", "converged", "violations") and not bad
    return HostingStep(n, r.status, _nanmax(r.max_load_ratio), _nanmax(r.max_transformer_ratio),
                       _nanmin(r.v_min), len(bad), ok)


def hosting_capacity(case, fleet: FleetSpec, pd, qd, prices, dt, strategy: str, ev_step: int, *,
                     seed: int = 0, tol: float = HOSTING_TOL, opts: IpmOptions | None = None,
                     full_sweep: bool = False, jobs: int = 1) -> HostingResult:
    """Largest EV count, in steps of ``ev_step``, that the strategy serves without violations.

    Fleets grow by nested prefixes of a seeded permutation. The capacity is
    the last step before the first failing one; later steps are only
    evaluated with ``full_sweep`` (or when running in parallel). A step fails
    when the schedule breaches a limit by more than ``tol`` or when the
    optimizer does not reach optimality.
    """
    order = growth_order(fleet.n_y, seed)
    counts = penetration_steps(fleet.n_y, ev_step)

    def args(n):
        sub = fleet.subset(np.sort(order[:n]))
        return (strategy, case, sub, pd, qd, prices, dt, opts, tol, n)

    steps = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            steps = list(pool.map(_hosting_job, [args(n) for n in counts]))
    else:
        for n in counts:
            step = _hosting_job(args(n))
            steps.append(step)
            if not step.ok and not full_sweep:
                break
    capacity = 0
    for step in steps:
        if not step.ok:
            break
        capacity = step.n_ev
    return HostingResult(strategy, capacity, fleet.n_y, steps)


# ---------------------------------------------------------------- comparison
@dataclass
class ComparisonTable:
    rows: list
    scenario_key: str

    def row(self, strategy: str) -> dict:
        for r in self.rows:
            if r["strategy"] == strategy:
                return r
        raise KeyError(strategy)

    def write_csv(self, path, manifest: str | None = None) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            if manifest:
                fh.write(f"# {manifest}\n")
            w = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: _fmt(r.get(k)) for k in TABLE_COLUMNS})
        return path

    def write_json(self, path, manifest: dict | None = None) -> Path:
        path = Path(path)
        doc = {"manifest": manifest or {}, "scenario_key": self.scenario_key, "rows": self.rows}
        path.write_text(json.dumps(doc, indent=1, default=_json_default))
        return path


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}" if math.isfinite(v) else str(v)
    return v


def _json_default(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(type(v))


def compare(reports, hosting: dict | None = None) -> ComparisonTable:
    """Tabulate reports (or their ``summary()`` dicts) against the dumb row.

    ``hosting`` optionally maps strategy name to a :class:`HostingResult`.
    The yearly figure is 365 times the daily saving.
    """
    rows_in = [r.summary() if isinstance(r, StrategyReport) else dict(r) for r in reports]
    if not rows_in:
        raise ScenarioMismatchError("nothing to compare")
    keys = {r.get("scenario_key", "") for r in rows_in}
    if len(keys) != 1:
        raise ScenarioMismatchError(f"reports come from different scenarios: {sorted(keys)}")
    by_name = {r["strategy"]: r for r in rows_in}
    if len(by_name) != len(rows_in):
        raise ScenarioMismatchError("duplicate strategy in comparison")
    base = by_name.get(DUMB)
    if base is None:
        raise ScenarioMismatchError("comparison needs the dumb-charging report as reference")
    rows = []
    for name in [s for s in STRATEGIES if s in by_name] + [s for s in by_name if s not in STRATEGIES]:
        r = by_name[name]
        saving = base["cost_nok"] - r["cost_nok"]
        h = (hosting or {}).get(name)
        rows.append({
            "strategy": name,
            "status": r["status"],
            "energy_mwh": r["energy_mwh"],
            "loss_mwh": r["loss_mwh"],
            "cost_nok": r["cost_nok"],
            "daily_saving_nok": saving,
            "daily_saving_pct": saving_pct(base["cost_nok"], r["cost_nok"]) if base["cost_nok"] else math.nan,
            YEARLY_LABEL: 365.0 * saving,
            "max_hosting_capacity_ev": None if h is None else h.capacity,
            "max_hosting_capacity_pct": None if h is None else h.capacity_pct,
        })
    return ComparisonTable(rows, keys.pop())


def saving_pct(cost_reference: float, cost: float) -> float:
    return 100.0 * (cost_reference - cost) / cost_reference


# ---------------------------------------------------------------- writers
def _write_rows(path: Path, header, rows, manifest: str | None):
    with path.open("w", newline="") as fh:
        if manifest:
            fh.write(f"# {manifest}\n")
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def series_rows(report: StrategyReport):
    for t in range(report.T):
        yield [t, report.prices[t], report.generation_mw[t], report.load_mw[t], report.ev_charge_mw[t],
               report.loss_mw[t], report.v_min[t], report.v_max[t], report.max_load_ratio[t],
               report.max_transformer_ratio[t], int(report.solved[t])]


def write_report(report: StrategyReport, directory, manifest: str | None = None) -> list[Path]:
    """Per-period series, violation log, SOC trajectories and a JSON summary."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    stem = report.strategy
    files = [
        _write_rows(d / f"{stem}_series.csv", SERIES_COLUMNS, series_rows(report), manifest),
        _write_rows(d / f"{stem}_violations.csv", ("period", "element", "magnitude"), report.violations, manifest),
        _write_rows(d / f"{stem}_soc.csv", ["ev"] + [f"t{t}" for t in range(report.T)],
                    ([i] + list(row) for i, row in enumerate(report.soc)), manifest),
    ]
    summary = d / f"{stem}_summary.json"
    summary.write_text(json.dumps({"manifest": manifest, **report.summary()}, indent=1, default=_json_default))
    files.append(summary)
    return files


def plot_rows(reports):
    """Long-format ``(period, series, value)`` rows for plotting."""
    for r in reports:
        for t in range(r.T):
            for name, arr in (("generation_mw", r.generation_mw), ("load_mw", r.load_mw),
                              ("ev_charge_mw", r.ev_charge_mw), ("loss_mw", r.loss_mw),
                              ("v_min_pu", r.v_min), ("max_load_ratio_pct", r.max_load_ratio),
                              ("max_transformer_ratio_pct", r.max_transformer_ratio),
                              ("price_nok_mwh", r.prices)):
                yield [t, f"{r.strategy}/{name}", arr[t]]
            yield [t, f"{r.strategy}/mean_soc", float(np.mean(r.soc[:, t])) if r.soc.size else math.nan]


def write_plot_data(reports, path, manifest: str | None = None) -> Path:
    return _write_rows(Path(path), ("period", "series", "value"), plot_rows(reports), manifest)


def write_hosting(results, path, manifest: str | None = None) -> Path:
    rows = []
    for res in results:
        for s in res.steps:
            rows.append([res.strategy, s.n_ev, 100.0 * s.n_ev / res.n_total if res.n_total else 100.0, s.status,
                         s.max_load_ratio, s.max_transformer_ratio, s.v_min, s.n_violations, int(s.ok),
                         res.capacity])
    header = ("strategy", "n_ev", "penetration_pct", "status", "max_load_ratio_pct", "max_transformer_ratio_pct",
              "v_min_pu", "n_violations", "ok", "capacity_ev")
    return _write_rows(Path(path), header, rows, manifest)
