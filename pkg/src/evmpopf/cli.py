"""``evmpopf`` command line: generate scenarios, run strategies, compare, sweep.

Exit codes: 0 success, 1 solver failure (iteration limit or numerical
trouble), 2 bad input, 3 dumb charging produced limit violations,
4 the optimizer reported the problem infeasible.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from evmpopf import __version__
from evmpopf.acpf import sweep_power_flow
from evmpopf.fleet import read_fleet_bundle, write_fleet_bundle
from evmpopf.grid import CaseValidationError
from evmpopf.io import CaseFormatError, load_case, load_demand, save_case, save_demand
from evmpopf.ipm import IpmOptions, write_trace
from evmpopf.mpopf import MpopfAssemblyError
from evmpopf import scenarios as sc
from evmpopf import strategies as st

logger = logging.getLogger("evmpopf")

EXIT_OK, EXIT_SOLVER, EXIT_INPUT, EXIT_VIOLATIONS, EXIT_INFEASIBLE = 0, 1, 2, 3, 4
INPUT_ERRORS = (FileNotFoundError, NotADirectoryError, CaseFormatError, CaseValidationError, sc.ScenarioError,
                MpopfAssemblyError, st.ScenarioMismatchError, ValueError, json.JSONDecodeError)


class InputError(Exception):
    pass


# ------------------------------------------------------------------ manifest
def file_hash(path) -> str:
    """SHA-256 prefix of a file, or of every file below a directory in name order."""
    p = Path(path)
    h = hashlib.sha256()
    files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
    for q in files:
        if p.is_dir():
            h.update(str(q.relative_to(p)).encode())
        h.update(q.read_bytes())
    return h.hexdigest()[:16]


def params_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


class Manifest:
    def __init__(self, command: str, seed, inputs: dict | None = None, extra: dict | None = None):
        self.data = {"tool": f"evmpopf {__version__}", "command": command, "seed": seed,
                     "inputs": {k: v for k, v in sorted((inputs or {}).items())}}
        if extra:
            self.data.update(extra)

    @property
    def line(self) -> str:
        return "manifest " + json.dumps(self.data, sort_keys=True)

    @property
    def digest(self) -> str:
        return params_hash(self.data)


# ------------------------------------------------------------------ inputs
def _bundle_path(args, name, fallback):
    value = getattr(args, name, None)
    if value:
        return Path(value)
    if getattr(args, "bundle", None):
        return Path(args.bundle) / fallback
    return None


def _need(path, flag):
    if path is None:
        raise InputError(f"{flag} is required (or --bundle)")
    if not path.exists():
        raise FileNotFoundError(f"{flag}: no such file or directory: {path}")
    return path


def _bundle_seed(args):
    if getattr(args, "bundle", None):
        m = Path(args.bundle) / "manifest.json"
        if m.exists():
            return json.loads(m.read_text()).get("seed")
    return args.seed


def load_inputs(args, need_fleet=True):
    """Case, fleet, demand and prices for run/sweep, plus their hashes."""
    case_p = _need(_bundle_path(args, "case", "case.json"), "--case")
    demand_p = _need(_bundle_path(args, "demand", "demand"), "--demand")
    prices_p = _need(_bundle_path(args, "prices", "prices.csv"), "--prices")
    fleet_p = _bundle_path(args, "fleet", "fleet")
    case = load_case(case_p)
    pd, qd = load_demand(demand_p, case.n_bus)
    if need_fleet:
        fleet = read_fleet_bundle(_need(fleet_p, "--fleet"))
        T_data = min(fleet.horizon, pd.shape[1])
    else:
        fleet = None
        T_data = pd.shape[1]
    T = args.horizon or T_data
    if T > T_data:
        raise InputError(f"--horizon {T} exceeds the {T_data} periods covered by the data")
    if fleet is not None and fleet.horizon != T:
        raise InputError(f"fleet covers {fleet.horizon} periods but the run horizon is {T}")
    prices = sc.load_price_series(prices_p, T, args.dt)
    inputs = {"case": file_hash(case_p), "demand": file_hash(demand_p), "prices": file_hash(prices_p)}
    if need_fleet:
        inputs["fleet"] = file_hash(fleet_p)
    return case, fleet, pd[:, :T], qd[:, :T], prices, inputs


def _ipm_options(args) -> IpmOptions:
    return IpmOptions(tol_kkt=args.tol, max_iter=args.max_iter, barrier=args.barrier)


def _strategies(args) -> list[str]:
    if args.strategy == "dumb":
        return [st.DUMB]
    if args.strategy == "mpopf":
        return [st.WITH_LIMITS if args.limits == "on" else st.NO_LIMITS]
    return list(st.STRATEGIES)


def _exit_for(reports) -> int:
    """Most severe outcome wins: infeasible, then solver failure, then dumb violations."""
    codes = {EXIT_OK}
    for r in reports:
        if r.status == "infeasible":
            codes.add(EXIT_INFEASIBLE)
        elif r.status in ("max_iter", "numerical", "diverged"):
            codes.add(EXIT_SOLVER)
        elif r.strategy == st.DUMB and r.violations:
            codes.add(EXIT_VIOLATIONS)
    for code in (EXIT_INFEASIBLE, EXIT_SOLVER, EXIT_VIOLATIONS):
        if code in codes:
            return code
    return EXIT_OK


# ------------------------------------------------------------------ commands
def cmd_pf(args) -> int:
    case_p = _need(Path(args.case) if args.case else None, "--case")
    case = load_case(case_p)
    inputs = {"case": file_hash(case_p)}
    if args.demand:
        pd, qd = load_demand(_need(Path(args.demand), "--demand"), case.n_bus)
        inputs["demand"] = file_hash(args.demand)
        if args.horizon:
            pd, qd = pd[:, :args.horizon], qd[:, :args.horizon]
    else:
        pd, qd = case.pd[:, None], case.qd[:, None]
    manifest = Manifest("pf", args.seed, inputs)
    sols = sweep_power_flow(case, pd, qd)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for t, s in enumerate(sols):
        ratio = st._ratios(case, s.s_line[None, :])[0]
        rows.append([t, int(s.converged), s.iterations, s.max_mismatch, float(np.sum(s.gen_p)),
                     float(np.sum(pd[:, t])), float(np.sum(s.s_bus.real) * case.base_mva),
                     float(np.min(s.v_mag)), float(np.max(s.v_mag)), st._nanmax(ratio)])
    st._write_rows(out / "pf.csv", ("period", "converged", "iterations", "max_mismatch", "generation_mw",
                                    "load_mw", "loss_mw", "v_min_pu", "v_max_pu", "max_load_ratio_pct"),
                   rows, manifest.line)
    ok = all(s.converged for s in sols)
    summary = {"manifest": manifest.data, "periods": len(sols), "converged": ok,
               "v_min_pu": min(r[7] for r in rows), "max_load_ratio_pct": max(r[9] for r in rows)}
    (out / "pf_summary.json").write_text(json.dumps(summary, indent=1))
    print(f"power flow: {len(sols)} period(s), {'all converged' if ok else 'some diverged'}; "
          f"v_min {summary['v_min_pu']:.4f} p.u., max load ratio {summary['max_load_ratio_pct']:.1f} %")
    return EXIT_OK if ok else EXIT_SOLVER


def _household_buses(case, n_households):
    """Load buses, cycled, for households placed on an existing case."""
    mean_load = np.abs(case.pd)
    candidates = case.bus_id[(case.bus_type == 1) & (mean_load > 0)]
    if len(candidates) == 0:
        candidates = case.bus_id[case.bus_type == 1]
    if len(candidates) == 0:
        raise InputError("case has no PQ bus to host households")
    return candidates[np.arange(n_households) % len(candidates)]


def cmd_generate(args) -> int:
    T = args.horizon or int(round(24 / args.dt))
    out = Path(args.out)
    price_src = Path(args.prices) if args.prices else None
    if price_src is not None:
        prices = sc.load_price_series(_need(price_src, "--prices"), T, args.dt)
    params = sc.EvPopulationParams()
    if args.case:
        case_p = _need(Path(args.case), "--case")
        case = load_case(case_p)
        household_bus = _household_buses(case, args.households)
        if args.demand:
            pd, qd = load_demand(_need(Path(args.demand), "--demand"), case.n_bus)
            if pd.shape[1] < T:
                raise InputError(f"demand covers {pd.shape[1]} periods, horizon needs {T}")
            pd, qd = pd[:, :T], qd[:, :T]
        else:
            pd, qd = np.repeat(case.pd[:, None], T, axis=1), np.repeat(case.qd[:, None], T, axis=1)
        source = {"case": file_hash(case_p)}
    else:
        n = args.households
        feeder = sc.calibrated_feeder(n, seed=args.seed, T=T, dt=args.dt, s_tr_mva=0.005 * n,
                                      n_strings=max(4, math.ceil(n / 10)))
        case, household_bus, pd, qd = feeder.case, feeder.household_bus, feeder.pd, feeder.qd
        source = {"feeder": f"calibrated({n})"}
    fleet, events = sc.generate_fleet(params, args.households, args.seed, T, args.dt,
                                      household_bus=household_bus, n_gen=case.n_gen)
    out.mkdir(parents=True, exist_ok=True)
    save_case(case, out / "case.json")
    write_fleet_bundle(fleet, out / "fleet")
    save_demand(out / "demand", pd, qd)
    if price_src is not None:
        sc.write_price_series(out / "prices.csv", prices.hourly, prices.start or "2019-01-01 12:00:00")
        source["prices"] = file_hash(price_src)
    manifest = Manifest("generate", args.seed, source, {
        "params_hash": params_hash({"params": params.__dict__, "households": args.households, "T": T,
                                    "dt": args.dt}),
        "outputs": {"case": file_hash(out / "case.json"), "fleet": file_hash(out / "fleet"),
                    "demand": file_hash(out / "demand")},
    })
    doc = dict(manifest.data, manifest_hash=manifest.digest, n_ev=fleet.n_y, households=args.households,
               horizon=T, dt=args.dt)
    (out / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    need = sc.fleet_energy_need_mwh(fleet)
    print(f"generated {fleet.n_y} EVs for {args.households} households "
          f"({float(np.sum(need)):.3f} MWh to deliver); manifest {manifest.digest}")
    return EXIT_OK


def _write_run(report, out: Path, manifest: Manifest, args):
    st.write_report(report, out, manifest.line)
    if args.trace and report.strategy != st.DUMB:
        write_trace(report.trace, out / f"{report.strategy}_trace.csv", header_line="# " + manifest.line)


def cmd_run(args) -> int:
    case, fleet, pd, qd, prices, inputs = load_inputs(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest("run", _bundle_seed(args), inputs, {"dt": args.dt, "horizon": len(prices.values)})
    names = _strategies(args)
    reports = st.run_all(case, fleet, pd, qd, prices.values, args.dt, names, opts=_ipm_options(args),
                         jobs=args.jobs)
    for r in reports:
        _write_run(r, out, manifest, args)
        s = r.summary()
        print(f"{r.strategy}: {r.status}, cost {s['cost_nok']:.2f} NOK, energy {s['energy_mwh']:.4f} MWh, "
              f"peak load ratio {s['max_load_ratio_pct']:.1f} %, {s['n_violations']} violation(s)")
    if args.emit_plots:
        st.write_plot_data(reports, out / "plot_data.csv", "# " + manifest.line)
    if len(reports) > 1 and st.DUMB in names:
        _write_comparison(st.compare(reports), out, manifest)
    return _exit_for(reports)


def _write_comparison(table, out: Path, manifest: Manifest, hosting=None):
    table.write_csv(out / "comparison.csv", manifest.line)
    table.write_json(out / "comparison.json", manifest.data)
    for r in table.rows:
        print(f"{r['strategy']:>18}: cost {r['cost_nok']:.2f} NOK, saving {r['daily_saving_nok']:.2f} NOK "
              f"({r['daily_saving_pct']:.3f} %), yearly (extrapolated) {r[st.YEARLY_LABEL]:.0f} NOK")


def cmd_compare(args) -> int:
    out = Path(args.out)
    paths = [Path(p) for p in args.reports] if args.reports else sorted(out.glob("*_summary.json"))
    paths = [p for p in paths if p.name != "pf_summary.json"]
    if not paths:
        raise InputError(f"no *_summary.json reports found in {out}")
    summaries = []
    for p in paths:
        if not p.exists():
            raise FileNotFoundError(f"report not found: {p}")
        summaries.append(json.loads(p.read_text()))
    table = st.compare(summaries)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest("compare", None, {p.name: file_hash(p) for p in paths})
    _write_comparison(table, out, manifest)
    return EXIT_OK


def cmd_sweep(args) -> int:
    case, fleet, pd, qd, prices, inputs = load_inputs(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest("sweep", args.seed, inputs, {"ev_step": args.ev_step, "dt": args.dt})
    results = []
    for name in _strategies(args):
        res = st.hosting_capacity(case, fleet, pd, qd, prices.values, args.dt, name, args.ev_step,
                                  seed=args.seed, opts=_ipm_options(args), full_sweep=args.full, jobs=args.jobs)
        results.append(res)
        print(f"{name}: hosting capacity {res.capacity} of {res.n_total} EVs ({res.capacity_pct:.1f} %)")
    st.write_hosting(results, out / "hosting.csv", "# " + manifest.line)
    (out / "hosting.json").write_text(json.dumps({
        "manifest": manifest.data,
        "capacity": {r.strategy: {"ev": r.capacity, "pct": r.capacity_pct, "n_total": r.n_total} for r in results},
    }, indent=1))
    return EXIT_OK


# ------------------------------------------------------------------ parser
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--horizon", type=int, default=None, help="number of periods T")
    common.add_argument("--dt", type=float, default=0.25, help="period length in hours")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for independent runs")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--bundle", help="directory written by 'generate' (supplies defaults for the paths)")
    data.add_argument("--case")
    data.add_argument("--fleet")
    data.add_argument("--demand")
    data.add_argument("--prices")

    solver = argparse.ArgumentParser(add_help=False)
    solver.add_argument("--strategy", choices=("dumb", "mpopf", "all"), default="all")
    solver.add_argument("--limits", choices=("on", "off"), default="on")
    solver.add_argument("--tol", type=float, default=1e-6)
    solver.add_argument("--max-iter", type=int, default=150)
    solver.add_argument("--barrier", choices=("mehrotra", "monotone"), default="monotone")

    p = argparse.ArgumentParser(prog="evmpopf", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"evmpopf {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("pf", parents=[common], help="power flow of a case or a demand series")
    q.add_argument("--case")
    q.add_argument("--demand")
    q.set_defaults(func=cmd_pf)

    q = sub.add_parser("generate", parents=[common], help="sample a fleet and demand bundle")
    q.add_argument("--households", type=int, default=856)
    q.add_argument("--case", help="place households on this case instead of a synthetic feeder")
    q.add_argument("--demand", help="base load for --case (default: case loads held constant)")
    q.add_argument("--prices", help="price CSV to validate and copy into the bundle")
    q.set_defaults(func=cmd_generate)

    q = sub.add_parser("run", parents=[common, data, solver], help="run one or all strategies")
    q.add_argument("--trace", action="store_true", help="write the solver iteration log as CSV")
    q.add_argument("--emit-plots", action="store_true", help="write long-format plot data")
    q.set_defaults(func=cmd_run)

    q = sub.add_parser("compare", parents=[common], help="comparison table from run summaries")
    q.add_argument("reports", nargs="*", help="summary JSON files (default: all in --out)")
    q.set_defaults(func=cmd_compare)

    q = sub.add_parser("sweep", parents=[common, data, solver], help="hosting-capacity sweep")
    q.add_argument("--ev-step", type=int, required=True)
    q.add_argument("--full", action="store_true", help="keep sweeping past the first failing step")
    q.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be at least 1")
    if not args.dt > 0:
        parser.error("--dt must be positive")
    try:
        return args.func(args)
    except (InputError, *INPUT_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
