"""Storage-fleet input model: battery records plus time-indexed availability matrices.

Matrices are ``n_y x T`` (``n_g x T`` for generator availability) with
0-based period indices throughout.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

BATT_COLUMNS = (
    "BATT_BUS",
    "SOC_OPT",
    "PCH_OPT",
    "PDICH_OPT",
    "Q_INJ_OPT",
    "SOC_MAX",
    "SOC_MIN",
    "QS_MAX",
    "QS_MIN",
    "MBASE",
    "PCH_MAX",
    "PDCH_MAX",
    "EFF_CH",
    "EFF_DICH",
    # extensions: capacity and lower power limits are not part of the classic table
    "E_MAX",
    "PCH_MIN",
    "PDCH_MIN",
)
MATRIX_FILES = {
    "avbp": "avbp.csv",
    "conch": "conch.csv",
    "condi": "condi.csv",
    "avbq": "avbq.csv",
    "avg": "avg.csv",
    "soci": "soci.csv",
    "socmi": "socmi.csv",
}


def _f(values, n=None, default=0.0) -> np.ndarray:
    if values is None:
        return np.full(n, default, dtype=float)
    return np.asarray(values, dtype=float).reshape(-1)


@dataclass(frozen=True, eq=False)
class FleetSpec:
    """Battery parameters (MW, MVAr, MWh, fractions) and availability matrices.

    Warm-start columns (``soc_opt`` ...) are NaN when absent.
    """

    bus: np.ndarray
    e_max: np.ndarray
    p_ch_max: np.ndarray
    p_ch_min: np.ndarray
    p_dch_max: np.ndarray
    p_dch_min: np.ndarray
    q_s_max: np.ndarray
    q_s_min: np.ndarray
    soc_max: np.ndarray
    soc_min: np.ndarray
    eff_ch: np.ndarray
    eff_dch: np.ndarray
    avbp: np.ndarray
    conch: np.ndarray
    condi: np.ndarray
    avbq: np.ndarray
    soci: np.ndarray
    socmi: np.ndarray
    avg: np.ndarray
    soc_opt: np.ndarray = field(default=None)
    pch_opt: np.ndarray = field(default=None)
    pdch_opt: np.ndarray = field(default=None)
    q_inj_opt: np.ndarray = field(default=None)
    mbase: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.bus)
        for name in ("soc_opt", "pch_opt", "pdch_opt", "q_inj_opt", "mbase"):
            if getattr(self, name) is None:
                object.__setattr__(self, name, np.full(n, np.nan))

    @classmethod
    def build(
        cls,
        bus,
        e_max,
        *,
        avbp,
        p_ch_max,
        n_gen: int,
        p_ch_min=None,
        p_dch_max=None,
        p_dch_min=None,
        q_s_max=None,
        q_s_min=None,
        soc_max=None,
        soc_min=None,
        eff_ch=None,
        eff_dch=None,
        conch=None,
        condi=None,
        avbq=None,
        soci=None,
        socmi=None,
        avg=None,
    ) -> "FleetSpec":
        """Convenience constructor: V2G and reactive provision off unless given."""
        avbp = np.asarray(avbp, dtype=np.int8)
        if avbp.ndim == 1:
            avbp = avbp[None, :]
        n, T = avbp.shape
        zeros = np.zeros((n, T), dtype=np.int8)
        return cls(
            bus=np.asarray(bus, dtype=int).reshape(-1),
            e_max=_f(e_max),
            p_ch_max=_f(p_ch_max),
            p_ch_min=_f(p_ch_min, n),
            p_dch_max=_f(p_dch_max, n),
            p_dch_min=_f(p_dch_min, n),
            q_s_max=_f(q_s_max, n),
            q_s_min=_f(q_s_min, n),
            soc_max=_f(soc_max, n, 1.0),
            soc_min=_f(soc_min, n, 0.0),
            eff_ch=_f(eff_ch, n, 1.0),
            eff_dch=_f(eff_dch, n, 1.0),
            avbp=avbp,
            conch=avbp.copy() if conch is None else np.asarray(conch, dtype=np.int8).reshape(n, T),
            condi=zeros.copy() if condi is None else np.asarray(condi, dtype=np.int8).reshape(n, T),
            avbq=zeros.copy() if avbq is None else np.asarray(avbq, dtype=np.int8).reshape(n, T),
            soci=np.zeros((n, T)) if soci is None else np.asarray(soci, dtype=float).reshape(n, T),
            socmi=np.zeros((n, T)) if socmi is None else np.asarray(socmi, dtype=float).reshape(n, T),
            avg=np.ones((n_gen, T), dtype=np.int8) if avg is None else np.asarray(avg, dtype=np.int8).reshape(n_gen, T),
        )

    @classmethod
    def empty(cls, n_gen: int, T: int) -> "FleetSpec":
        return cls.build(
            np.zeros(0, int), np.zeros(0), avbp=np.zeros((0, T)), p_ch_max=np.zeros(0), n_gen=n_gen
        )

    @property
    def n_y(self) -> int:
        return len(self.bus)

    @property
    def horizon(self) -> int:
        return self.avbp.shape[1]

    def subset(self, devices) -> "FleetSpec":
        """Fleet restricted to the given device indices (generator rows untouched)."""
        idx = np.asarray(devices, dtype=int)
        changes = {}
        for name in self.__dataclass_fields__:
            value = getattr(self, name)
            if name == "avg":
                continue
            changes[name] = value[idx]
        return replace(self, **changes)

    def soc_floor(self) -> np.ndarray:
        """Time-varying SOC lower bound while plugged in: ``max(SOCMi, soc_min)``."""
        return np.maximum(self.socmi, self.soc_min[:, None])


class Violation(NamedTuple):
    device: int
    period: int
    rule: str


class PlugEvent(NamedTuple):
    device: int
    arrive_t: int
    depart_t: int
    soc_init: float
    soc_required_at_departure: float


class Pin(NamedTuple):
    kind: str
    index: int
    period: int
    value: float
    rule: str


def arrival_mask(avbp: np.ndarray) -> np.ndarray:
    """True where a device is plugged in at ``t`` and was not at ``t-1`` (or ``t=0``)."""
    avbp = np.asarray(avbp).astype(bool)
    prev = np.zeros_like(avbp)
    prev[:, 1:] = avbp[:, :-1]
    return avbp & ~prev


def departure_mask(avbp: np.ndarray) -> np.ndarray:
    """True where a device is plugged in at ``t`` and not at ``t+1`` (or ``t=T-1``)."""
    avbp = np.asarray(avbp).astype(bool)
    nxt = np.zeros_like(avbp)
    nxt[:, :-1] = avbp[:, 1:]
    return avbp & ~nxt


def validate_fleet(fleet: FleetSpec, T: int | None = None, case=None) -> list[Violation]:
    """Check every fleet invariant; an empty list means the fleet is valid.

    Global problems (shapes, per-device parameters) use ``period = -1``.
    """
    out: list[Violation] = []
    n = fleet.n_y
    T = fleet.horizon if T is None else T
    for name in ("avbp", "conch", "condi", "avbq", "soci", "socmi"):
        shape = getattr(fleet, name).shape
        if shape != (n, T):
            out.append(Violation(-1, -1, f"{name} has shape {shape}, expected {(n, T)}"))
    if fleet.avg.shape[1:] != (T,) or (case is not None and fleet.avg.shape[0] != case.n_gen):
        out.append(Violation(-1, -1, f"avg has shape {fleet.avg.shape}"))
    for name in ("e_max", "p_ch_max", "p_ch_min", "p_dch_max", "p_dch_min", "q_s_max", "q_s_min",
                 "soc_max", "soc_min", "eff_ch", "eff_dch"):
        if len(getattr(fleet, name)) != n:
            out.append(Violation(-1, -1, f"{name} has length {len(getattr(fleet, name))}, expected {n}"))
    if out:
        return out

    for name in ("avbp", "conch", "condi", "avbq", "avg"):
        m = getattr(fleet, name)
        for i, t in zip(*np.nonzero((m != 0) & (m != 1))):
            out.append(Violation(int(i), int(t), f"{name} entry not binary"))
    for name in ("soci", "socmi"):
        m = getattr(fleet, name)
        for i, t in zip(*np.nonzero((m < 0) | (m > 1) | ~np.isfinite(m))):
            out.append(Violation(int(i), int(t), f"{name} outside [0, 1]"))

    away = fleet.avbp == 0
    for i, t in zip(*np.nonzero(away & (fleet.conch != 0))):
        out.append(Violation(int(i), int(t), "charge while unavailable"))
    for i, t in zip(*np.nonzero(away & (fleet.condi != 0))):
        out.append(Violation(int(i), int(t), "discharge while unavailable"))
    arrivals = arrival_mask(fleet.avbp)
    for i, t in zip(*np.nonzero((fleet.soci > 0) & ~arrivals)):
        out.append(Violation(int(i), int(t), "initial SOC at a non-arrival slot"))

    for i in range(n):
        if not fleet.e_max[i] > 0:
            out.append(Violation(i, -1, "e_max must be positive"))
        for name in ("eff_ch", "eff_dch"):
            eff = getattr(fleet, name)[i]
            if not 0 < eff <= 1:
                out.append(Violation(i, -1, f"{name} outside (0, 1]"))
        for lo, hi in (("p_ch_min", "p_ch_max"), ("p_dch_min", "p_dch_max"), ("q_s_min", "q_s_max"),
                       ("soc_min", "soc_max")):
            if getattr(fleet, lo)[i] > getattr(fleet, hi)[i]:
                out.append(Violation(i, -1, f"{lo} > {hi}"))
    if case is not None and n:
        known = set(int(b) for b in case.bus_id)
        for i in np.flatnonzero([int(b) not in known for b in fleet.bus]):
            out.append(Violation(int(i), -1, f"bus {int(fleet.bus[i])} does not exist"))
    return out


def extract_plug_events(fleet: FleetSpec) -> list[PlugEvent]:
    """One event per maximal run of availability, in device then time order."""
    events = []
    arrivals = arrival_mask(fleet.avbp)
    departures = departure_mask(fleet.avbp)
    for i in range(fleet.n_y):
        starts = np.flatnonzero(arrivals[i])
        ends = np.flatnonzero(departures[i])
        for a, d in zip(starts, ends):
            events.append(PlugEvent(i, int(a), int(d), float(fleet.soci[i, a]), float(fleet.socmi[i, d])))
    return events


def rebuild_avbp(events, n_y: int, T: int) -> np.ndarray:
    avbp = np.zeros((n_y, T), dtype=np.int8)
    for ev in events:
        avbp[ev.device, ev.arrive_t : ev.depart_t + 1] = 1
    return avbp


def pin_variables(fleet: FleetSpec, T: int | None = None) -> list[Pin]:
    """Variable fixings implied by availability and by collapsed device bounds.

    A storage power is pinned to zero whenever the device is not both plugged
    in and permitted that action; generator outputs are pinned when the
    generator is unavailable. Device bounds with ``min == max`` pin the
    variable at that value in every remaining period. Each variable appears
    at most once.
    """
    T = fleet.horizon if T is None else T
    pins: dict[tuple[str, int, int], Pin] = {}

    def add(kind, mask, rule, value=0.0):
        for i, t in zip(*np.nonzero(mask)):
            key = (kind, int(i), int(t))
            if key not in pins:
                v = value[i] if np.ndim(value) else value
                pins[key] = Pin(kind, int(i), int(t), float(v), rule)

    live = fleet.avbp.astype(bool)
    add("p_ch", ~(live & fleet.conch.astype(bool)), "unavailable or charging not permitted")
    add("p_dch", ~(live & fleet.condi.astype(bool)), "unavailable or discharging not permitted")
    add("q_s", ~(live & fleet.avbq.astype(bool)), "unavailable or reactive provision not permitted")
    gen_off = fleet.avg == 0
    add("p_g", gen_off, "generator unavailable")
    add("q_g", gen_off, "generator unavailable")

    everywhere = np.ones((fleet.n_y, T), dtype=bool)
    for kind, lo, hi in (("p_ch", fleet.p_ch_min, fleet.p_ch_max),
                         ("p_dch", fleet.p_dch_min, fleet.p_dch_max),
                         ("q_s", fleet.q_s_min, fleet.q_s_max)):
        add(kind, everywhere & (lo == hi)[:, None], "min equals max", value=lo)
    return sorted(pins.values(), key=lambda p: (p.kind, p.period, p.index))


def _write_matrix(path: Path, m: np.ndarray, integer: bool) -> None:
    fmt = "%d" if integer else "%.17g"
    with open(path, "w", newline="") as fh:
        for row in np.atleast_2d(m):
            fh.write(",".join(fmt % v for v in row) + "\n")


def _read_matrix(path: Path, rows: int | None = None, cols: int | None = None, dtype=float) -> np.ndarray:
    text = Path(path).read_text().strip()
    if not text:
        return np.zeros((rows or 0, cols or 0), dtype=dtype)
    m = np.loadtxt(path, delimiter=",", dtype=float, ndmin=2)
    if rows is not None and m.shape[0] != rows:
        raise ValueError(f"{path}: expected {rows} rows, found {m.shape[0]}")
    return m.astype(dtype)


def write_fleet_bundle(fleet: FleetSpec, directory) -> list[Path]:
    """Write ``batt.csv`` plus one CSV per availability matrix; returns the paths."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    cols = {
        "BATT_BUS": fleet.bus, "SOC_OPT": fleet.soc_opt, "PCH_OPT": fleet.pch_opt,
        "PDICH_OPT": fleet.pdch_opt, "Q_INJ_OPT": fleet.q_inj_opt, "SOC_MAX": fleet.soc_max,
        "SOC_MIN": fleet.soc_min, "QS_MAX": fleet.q_s_max, "QS_MIN": fleet.q_s_min,
        "MBASE": fleet.mbase, "PCH_MAX": fleet.p_ch_max, "PDCH_MAX": fleet.p_dch_max,
        "EFF_CH": fleet.eff_ch, "EFF_DICH": fleet.eff_dch, "E_MAX": fleet.e_max,
        "PCH_MIN": fleet.p_ch_min, "PDCH_MIN": fleet.p_dch_min,
    }
    paths = [d / "batt.csv"]
    with open(paths[0], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BATT_COLUMNS)
        for i in range(fleet.n_y):
            row = []
            for c in BATT_COLUMNS:
                v = cols[c][i]
                row.append(str(int(v)) if c == "BATT_BUS" else ("" if np.isnan(v) else "%.17g" % v))
            w.writerow(row)
    for attr, fname in MATRIX_FILES.items():
        paths.append(d / fname)
        _write_matrix(paths[-1], getattr(fleet, attr), attr not in ("soci", "socmi"))
    return paths


def read_fleet_bundle(directory) -> FleetSpec:
    d = Path(directory)
    path = d / "batt.csv"
    if not path.exists():
        raise FileNotFoundError(f"fleet bundle is missing {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in ("BATT_BUS", "E_MAX", "PCH_MAX") if c not in header]
        if missing:
            raise ValueError(f"{path}: missing mandatory columns {missing}")
        rows = list(reader)

    def col(name, default=np.nan):
        out = []
        for r in rows:
            v = r.get(name, "")
            out.append(float(v) if v not in ("", None) else default)
        return np.array(out, dtype=float)

    n = len(rows)
    avg = _read_matrix(d / MATRIX_FILES["avg"], dtype=np.int8)
    T = avg.shape[1]
    mats = {}
    for attr in ("avbp", "conch", "condi", "avbq", "soci", "socmi"):
        dtype = float if attr in ("soci", "socmi") else np.int8
        mats[attr] = _read_matrix(d / MATRIX_FILES[attr], rows=n, cols=T, dtype=dtype).reshape(n, T)
    return FleetSpec(
        bus=col("BATT_BUS").astype(int),
        e_max=col("E_MAX"),
        p_ch_max=col("PCH_MAX"),
        p_ch_min=col("PCH_MIN", 0.0),
        p_dch_max=col("PDCH_MAX", 0.0),
        p_dch_min=col("PDCH_MIN", 0.0),
        q_s_max=col("QS_MAX", 0.0),
        q_s_min=col("QS_MIN", 0.0),
        soc_max=col("SOC_MAX", 1.0),
        soc_min=col("SOC_MIN", 0.0),
        eff_ch=col("EFF_CH", 1.0),
        eff_dch=col("EFF_DICH", 1.0),
        soc_opt=col("SOC_OPT"),
        pch_opt=col("PCH_OPT"),
        pdch_opt=col("PDICH_OPT"),
        q_inj_opt=col("Q_INJ_OPT"),
        mbase=col("MBASE"),
        avg=avg,
        **mats,
    )
