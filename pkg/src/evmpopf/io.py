"""Case and demand files.

A case is either a JSON document or a directory holding ``bus.csv``,
``branch.csv``, ``gen.csv`` (and optionally ``case.json`` with ``baseMVA``).
Columns follow the MATPOWER tables by name:

bus     bus_i type Pd Qd Gs Bs area Vm Va baseKV zone Vmax Vmin [Amin Amax]
branch  fbus tbus r x b rateA rateB rateC ratio angle status [angmin angmax]
gen     bus Pg Qg Qmax Qmin Vg mBase status Pmax Pmin [cost]

``Gs``/``Bs`` are MW/MVAr at 1 p.u. voltage, angles in degrees, ``ratio = 0``
means a plain line. ``Amin``/``Amax`` (bus angle limits, degrees) and
``cost`` are extensions. Unknown columns are ignored with a warning; a missing
mandatory column is an error.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from pathlib import Path

import numpy as np

from evmpopf.grid import NetworkCase

logger = logging.getLogger(__name__)

COLUMNS = {
    "bus": ("bus_i", "type", "Pd", "Qd", "Gs", "Bs", "area", "Vm", "Va", "baseKV", "zone", "Vmax", "Vmin",
            "Amin", "Amax", "lam_P", "lam_Q", "mu_Vmax", "mu_Vmin"),
    "branch": ("fbus", "tbus", "r", "x", "b", "rateA", "rateB", "rateC", "ratio", "angle", "status",
               "angmin", "angmax", "PF", "QF", "PT", "QT", "mu_Sf", "mu_St", "mu_angmin", "mu_angmax"),
    "gen": ("bus", "Pg", "Qg", "Qmax", "Qmin", "Vg", "mBase", "status", "Pmax", "Pmin", "Pc1", "Pc2",
            "Qc1min", "Qc1max", "Qc2min", "Qc2max", "ramp_agc", "ramp_10", "ramp_30", "ramp_q", "apf", "cost"),
}
MANDATORY = {
    "bus": ("bus_i", "type", "Pd", "Qd"),
    "branch": ("fbus", "tbus", "r", "x"),
    "gen": ("bus",),
}


BIG = 1e10


class CaseFormatError(ValueError):
    pass


def _table(records: list[dict], kind: str, source: str) -> dict[str, np.ndarray]:
    names = set()
    for rec in records:
        names.update(rec)
    unknown = sorted(names - set(COLUMNS[kind]))
    if unknown:
        logger.warning("%s: ignoring unknown %s columns %s", source, kind, unknown)
    missing = [c for c in MANDATORY[kind] if c not in names]
    if missing:
        raise CaseFormatError(f"{source}: {kind} table lacks mandatory columns {missing}")
    out = {}
    for c in COLUMNS[kind]:
        if c in names:
            vals = []
            for k, rec in enumerate(records):
                if c not in rec or rec[c] in ("", None):
                    if c in MANDATORY[kind]:
                        raise CaseFormatError(f"{source}: {kind} row {k + 1} has no {c}")
                    vals.append(math.nan)
                else:
                    try:
                        vals.append(float(rec[c]))
                    except (TypeError, ValueError):
                        raise CaseFormatError(f"{source}: {kind} row {k + 1}, column {c}: {rec[c]!r}") from None
            out[c] = np.array(vals)
    return out


def _get(tab, name, default):
    v = tab.get(name)
    if v is None:
        return None if default is None else np.full(len(next(iter(tab.values()))), default, dtype=float)
    if default is not None:
        v = np.where(np.isnan(v), default, v)
    return v


def _limit(tab, name, default):
    """Generator limit column; magnitudes of 1e10 and above mean unlimited."""
    v = _get(tab, name, default)
    return np.where(np.abs(v) >= BIG, np.sign(v) * math.inf, v)


def case_from_tables(base_mva: float, bus: dict, branch: dict, gen: dict, name: str = "case",
                     source: str = "case") -> NetworkCase:
    base = float(base_mva)
    gen_on = _get(gen, "status", 1.0) > 0
    if not np.all(gen_on):
        logger.warning("%s: dropping %d out-of-service generators", source, int((~gen_on).sum()))
    g = {k: v[gen_on] for k, v in gen.items()}
    deg = math.pi / 180.0
    amin = _get(bus, "Amin", -360.0) * deg
    amax = _get(bus, "Amax", 360.0) * deg
    return NetworkCase.from_arrays(
        base_mva=base,
        bus_id=bus["bus_i"].astype(int),
        bus_type=bus["type"].astype(int),
        pd=bus["Pd"], qd=bus["Qd"],
        gs=_get(bus, "Gs", 0.0) / base, bs=_get(bus, "Bs", 0.0) / base,
        vmin=_get(bus, "Vmin", 0.9), vmax=_get(bus, "Vmax", 1.1),
        amin=np.maximum(amin, -math.pi), amax=np.minimum(amax, math.pi),
        f_bus=branch["fbus"].astype(int), t_bus=branch["tbus"].astype(int),
        r=branch["r"], x=branch["x"], b=_get(branch, "b", 0.0),
        rate=_get(branch, "rateA", 0.0), tap=_get(branch, "ratio", 0.0),
        shift=_get(branch, "angle", 0.0) * deg,
        in_service=_get(branch, "status", 1.0) > 0,
        gen_bus=g["bus"].astype(int),
        pg=_get(g, "Pg", 0.0), vg=_get(g, "Vg", 1.0),
        pmin=_limit(g, "Pmin", -math.inf), pmax=_limit(g, "Pmax", math.inf),
        qmin=_limit(g, "Qmin", -math.inf), qmax=_limit(g, "Qmax", math.inf),
        cost=_get(g, "cost", 1.0),
        name=name,
    )


def _read_csv(path: Path) -> list[dict]:
    with path.open(newline="") as fh:
        lines = [ln for ln in fh if ln.strip() and not ln.startswith("#")]
    reader = csv.DictReader(lines)
    if reader.fieldnames is None:
        raise CaseFormatError(f"{path}: empty file")
    reader.fieldnames = [f.strip() for f in reader.fieldnames]
    return [{k: (v.strip() if isinstance(v, str) else v) for k, v in row.items()} for row in reader]


def load_case(path) -> NetworkCase:
    """Read a case from a JSON file or a CSV bundle directory."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"case not found: {path}")
    if path.is_dir():
        meta = {}
        if (path / "case.json").exists():
            meta = json.loads((path / "case.json").read_text())
        tabs = {}
        for kind in ("bus", "branch", "gen"):
            f = path / f"{kind}.csv"
            if not f.exists():
                raise CaseFormatError(f"{path}: missing {kind}.csv")
            tabs[kind] = _table(_read_csv(f), kind, str(f))
        base = meta.get("baseMVA", 100.0)
        return case_from_tables(base, tabs["bus"], tabs["branch"], tabs["gen"],
                                name=meta.get("name", path.name), source=str(path))
    doc = json.loads(path.read_text())
    for key in ("baseMVA", "bus", "branch", "gen"):
        if key not in doc:
            raise CaseFormatError(f"{path}: missing key {key!r}")
    tabs = {kind: _table(doc[kind], kind, str(path)) for kind in ("bus", "branch", "gen")}
    return case_from_tables(doc["baseMVA"], tabs["bus"], tabs["branch"], tabs["gen"],
                            name=doc.get("name", path.stem), source=str(path))


def case_to_dict(case: NetworkCase) -> dict:
    base = case.base_mva
    deg = 180.0 / math.pi

    def num(v):
        v = float(v)
        return v if math.isfinite(v) else (BIG if v > 0 else -BIG)

    bus = [
        {"bus_i": int(case.bus_id[i]), "type": int(case.bus_type[i]), "Pd": num(case.pd[i]), "Qd": num(case.qd[i]),
         "Gs": num(case.gs[i] * base), "Bs": num(case.bs[i] * base), "Vmax": num(case.vmax[i]),
         "Vmin": num(case.vmin[i]), "Amin": num(case.amin[i] * deg), "Amax": num(case.amax[i] * deg)}
        for i in range(case.n_bus)
    ]
    branch = [
        {"fbus": int(case.f_bus[k]), "tbus": int(case.t_bus[k]), "r": num(case.r[k]), "x": num(case.x[k]),
         "b": num(case.b[k]), "rateA": num(case.rate[k]), "ratio": num(case.tap[k]),
         "angle": num(case.shift[k] * deg), "status": int(case.in_service[k])}
        for k in range(case.n_branch)
    ]
    gen = [
        {"bus": int(case.gen_bus[g]), "Pg": num(case.pg[g]), "Qmax": num(case.qmax[g]), "Qmin": num(case.qmin[g]),
         "Vg": num(case.vg[g]), "status": 1, "Pmax": num(case.pmax[g]), "Pmin": num(case.pmin[g]),
         "cost": num(case.cost[g])}
        for g in range(case.n_gen)
    ]
    return {"name": case.name, "baseMVA": base, "bus": bus, "branch": branch, "gen": gen}


def save_case(case: NetworkCase, path) -> Path:
    """Write a case as JSON (``.json`` suffix) or as a CSV bundle directory."""
    path = Path(path)
    doc = case_to_dict(case)
    if path.suffix == ".json":
        path.write_text(json.dumps(doc, indent=1))
        return path
    path.mkdir(parents=True, exist_ok=True)
    (path / "case.json").write_text(json.dumps({"name": doc["name"], "baseMVA": doc["baseMVA"]}))
    for kind in ("bus", "branch", "gen"):
        rows = doc[kind]
        with (path / f"{kind}.csv").open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else list(MANDATORY[kind]))
            w.writeheader()
            for r in rows:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return path


# ----------------------------------------------------------------- demand
def save_demand(directory, pd, qd) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    np.savetxt(d / "pd.csv", np.asarray(pd), delimiter=",", fmt="%.17g")
    np.savetxt(d / "qd.csv", np.asarray(qd), delimiter=",", fmt="%.17g")


def load_demand(directory, n_bus: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Read ``pd.csv``/``qd.csv`` (``n_bus x T``, MW / MVAr)."""
    d = Path(directory)
    out = []
    for name in ("pd.csv", "qd.csv"):
        f = d / name
        if not f.exists():
            raise FileNotFoundError(f"demand file not found: {f}")
        m = np.loadtxt(f, delimiter=",", ndmin=2)
        out.append(m)
    pd, qd = out
    if pd.shape != qd.shape:
        raise CaseFormatError(f"{d}: pd.csv {pd.shape} and qd.csv {qd.shape} differ in shape")
    if n_bus is not None and pd.shape[0] != n_bus:
        raise CaseFormatError(f"{d}: demand has {pd.shape[0]} rows, case has {n_bus} buses")
    return pd, qd
