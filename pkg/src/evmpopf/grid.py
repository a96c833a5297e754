"""Network data model and the complex-algebra building blocks of AC power flow.

All quantities inside this module are per unit on ``NetworkCase.base_mva``
except the generator limits and branch ratings, which keep MATPOWER units
(MW, MVAr, MVA) and are converted where they are consumed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

PQ, PV, SLACK = 1, 2, 3
_BUS_TYPE_NAMES = {PQ: "PQ", PV: "PV", SLACK: "slack"}


class CaseValidationError(ValueError):
    """Raised when a network case violates its structural invariants.

    ``problems`` holds one human-readable message per violation, e.g.
    ``"branch 3: to_bus 17 does not exist"``.
    """

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class SingularBranchError(CaseValidationError):
    pass


def _arr(values, dtype=float) -> np.ndarray:
    out = np.array(values, dtype=dtype, copy=True).reshape(-1)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class NetworkCase:
    """Static grid description mirroring the MATPOWER BUS/BRANCH/GEN tables.

    Bus shunts are given in p.u. on ``base_mva``; branch ``shift`` and bus
    angle limits in radians; ``rate`` in MVA with 0 meaning unrated.
    ``tap == 0`` marks a plain line (MATPOWER convention), any other value a
    transformer with the tap applied on the from side.
    """

    base_mva: float
    bus_id: np.ndarray
    bus_type: np.ndarray
    gs: np.ndarray
    bs: np.ndarray
    vmin: np.ndarray
    vmax: np.ndarray
    amin: np.ndarray
    amax: np.ndarray
    pd: np.ndarray
    qd: np.ndarray
    f_bus: np.ndarray
    t_bus: np.ndarray
    r: np.ndarray
    x: np.ndarray
    b: np.ndarray
    tap: np.ndarray
    shift: np.ndarray
    rate: np.ndarray
    in_service: np.ndarray
    gen_bus: np.ndarray
    pmin: np.ndarray
    pmax: np.ndarray
    qmin: np.ndarray
    qmax: np.ndarray
    vg: np.ndarray
    pg: np.ndarray
    cost: np.ndarray
    name: str = "case"
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        problems = []
        ids = [int(i) for i in self.bus_id]
        index = {}
        for k, bid in enumerate(ids):
            if bid in index:
                problems.append(f"bus {bid}: duplicate id")
            index[bid] = k
        object.__setattr__(self, "_index", index)

        nb = len(ids)
        for name in ("bus_type", "gs", "bs", "vmin", "vmax", "amin", "amax", "pd", "qd"):
            if len(getattr(self, name)) != nb:
                problems.append(f"bus column {name}: length {len(getattr(self, name))} != {nb}")
        nl = len(self.f_bus)
        for name in ("t_bus", "r", "x", "b", "tap", "shift", "rate", "in_service"):
            if len(getattr(self, name)) != nl:
                problems.append(f"branch column {name}: length {len(getattr(self, name))} != {nl}")
        ng = len(self.gen_bus)
        for name in ("pmin", "pmax", "qmin", "qmax", "vg", "pg", "cost"):
            if len(getattr(self, name)) != ng:
                problems.append(f"gen column {name}: length {len(getattr(self, name))} != {ng}")
        if problems:
            raise CaseValidationError(problems)

        if self.base_mva <= 0:
            problems.append(f"base_mva must be positive, got {self.base_mva}")
        n_slack = int(np.sum(self.bus_type == SLACK))
        if n_slack != 1:
            problems.append(f"expected exactly one slack bus, found {n_slack}")
        bad_type = set(int(t) for t in self.bus_type) - set(_BUS_TYPE_NAMES)
        if bad_type:
            problems.append(f"unknown bus types {sorted(bad_type)}")
        for k in np.flatnonzero(self.vmin > self.vmax):
            problems.append(f"bus {ids[k]}: vmin {self.vmin[k]} > vmax {self.vmax[k]}")
        for k in np.flatnonzero(self.amin > self.amax):
            problems.append(f"bus {ids[k]}: amin > amax")
        for i in range(nl):
            for side, bus in (("from_bus", self.f_bus[i]), ("to_bus", self.t_bus[i])):
                if int(bus) not in index:
                    problems.append(f"branch {i}: {side} {int(bus)} does not exist")
            if self.in_service[i]:
                if self.r[i] < 0:
                    problems.append(f"branch {i}: negative resistance {self.r[i]}")
                if self.rate[i] < 0:
                    problems.append(f"branch {i}: negative rating {self.rate[i]}")
        for g in range(ng):
            if int(self.gen_bus[g]) not in index:
                problems.append(f"gen {g}: bus {int(self.gen_bus[g])} does not exist")
            if self.pmin[g] > self.pmax[g]:
                problems.append(f"gen {g}: pmin {self.pmin[g]} > pmax {self.pmax[g]}")
            if self.qmin[g] > self.qmax[g]:
                problems.append(f"gen {g}: qmin {self.qmin[g]} > qmax {self.qmax[g]}")
        if problems:
            raise CaseValidationError(problems)

    @classmethod
    def from_arrays(
        cls,
        *,
        base_mva: float,
        bus_id,
        bus_type,
        f_bus,
        t_bus,
        r,
        x,
        gen_bus,
        gs=None,
        bs=None,
        vmin=None,
        vmax=None,
        amin=None,
        amax=None,
        pd=None,
        qd=None,
        b=None,
        tap=None,
        shift=None,
        rate=None,
        in_service=None,
        pmin=None,
        pmax=None,
        qmin=None,
        qmax=None,
        vg=None,
        pg=None,
        cost=None,
        name: str = "case",
    ) -> "NetworkCase":
        """Build a case from columns, filling optional ones with neutral defaults."""
        nb, nl, ng = len(bus_id), len(f_bus), len(gen_bus)

        def col(v, n, default, dtype=float):
            return _arr(np.full(n, default) if v is None else v, dtype)

        return cls(
            base_mva=float(base_mva),
            bus_id=_arr(bus_id, int),
            bus_type=_arr(bus_type, int),
            gs=col(gs, nb, 0.0),
            bs=col(bs, nb, 0.0),
            vmin=col(vmin, nb, 0.9),
            vmax=col(vmax, nb, 1.1),
            amin=col(amin, nb, -np.pi),
            amax=col(amax, nb, np.pi),
            pd=col(pd, nb, 0.0),
            qd=col(qd, nb, 0.0),
            f_bus=_arr(f_bus, int),
            t_bus=_arr(t_bus, int),
            r=_arr(r),
            x=_arr(x),
            b=col(b, nl, 0.0),
            tap=col(tap, nl, 0.0),
            shift=col(shift, nl, 0.0),
            rate=col(rate, nl, 0.0),
            in_service=col(in_service, nl, True, bool),
            gen_bus=_arr(gen_bus, int),
            pmin=col(pmin, ng, -np.inf),
            pmax=col(pmax, ng, np.inf),
            qmin=col(qmin, ng, -np.inf),
            qmax=col(qmax, ng, np.inf),
            vg=col(vg, ng, 1.0),
            pg=col(pg, ng, 0.0),
            cost=col(cost, ng, 1.0),
            name=name,
        )

    @property
    def n_bus(self) -> int:
        return len(self.bus_id)

    @property
    def n_branch(self) -> int:
        return len(self.f_bus)

    @property
    def n_gen(self) -> int:
        return len(self.gen_bus)

    def bus_index(self, bus_ids) -> np.ndarray:
        """Map external bus ids to dense 0-based positions."""
        try:
            return np.array([self._index[int(b)] for b in np.atleast_1d(bus_ids)], dtype=int)
        except KeyError as exc:
            raise CaseValidationError([f"bus {exc.args[0]} does not exist"]) from None

    @property
    def slack(self) -> int:
        return int(np.flatnonzero(self.bus_type == SLACK)[0])

    @property
    def pv(self) -> np.ndarray:
        return np.flatnonzero(self.bus_type == PV)

    @property
    def pq(self) -> np.ndarray:
        return np.flatnonzero(self.bus_type == PQ)

    @property
    def gen_index(self) -> np.ndarray:
        return self.bus_index(self.gen_bus)

    @property
    def is_transformer(self) -> np.ndarray:
        return self.tap != 0

    @property
    def rated(self) -> np.ndarray:
        """Mask of in-service branches that carry a flow limit."""
        return self.in_service & (self.rate > 0)

    def replace(self, **changes) -> "NetworkCase":
        fields = {
            name: getattr(self, name)
            for name in self.__dataclass_fields__
            if name != "_index"
        }
        fields.update(changes)
        for key, value in list(fields.items()):
            if isinstance(value, (list, tuple)):
                fields[key] = _arr(value, bool if key == "in_service" else float)
        return NetworkCase(**fields)


@dataclass(frozen=True, eq=False)
class Admittances:
    """Bus and branch admittance matrices of a case, in p.u."""

    y_bus: sp.csr_matrix
    y_fr: sp.csr_matrix
    y_to: sp.csr_matrix
    c_fr: sp.csr_matrix
    c_to: sp.csr_matrix
    y_shunt: sp.csr_matrix

    @property
    def y_line(self) -> sp.csr_matrix:
        return sp.vstack([self.y_fr, self.y_to], format="csr")

    @property
    def c_line(self) -> sp.csr_matrix:
        return sp.vstack([self.c_fr, self.c_to], format="csr")


def build_connectivity(case: NetworkCase) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Return the from/to connectivity matrices, shape ``(n_branch, n_bus)``.

    Rows of out-of-service branches are all zero.
    """
    nl, nb = case.n_branch, case.n_bus
    live = np.flatnonzero(case.in_service)
    f = case.bus_index(case.f_bus[live]) if len(live) else np.zeros(0, int)
    t = case.bus_index(case.t_bus[live]) if len(live) else np.zeros(0, int)
    ones = np.ones(len(live))
    c_fr = sp.csr_matrix((ones, (live, f)), shape=(nl, nb))
    c_to = sp.csr_matrix((ones, (live, t)), shape=(nl, nb))
    return c_fr, c_to


def branch_primitives(case: NetworkCase) -> tuple[np.ndarray, ...]:
    """Per-branch pi-model entries ``(yff, yft, ytf, ytt)``; zero when out of service."""
    live = case.in_service.astype(bool)
    zero_x = np.flatnonzero(live & (case.x == 0))
    if len(zero_x):
        raise SingularBranchError([f"branch {i}: x = 0 on an in-service branch" for i in zero_x])
    z = case.r + 1j * np.where(live, case.x, 1.0)
    ys = np.where(live, 1.0 / z, 0.0)
    bc = np.where(live, case.b, 0.0)
    ratio = np.where(case.tap == 0, 1.0, case.tap)
    tap = ratio * np.exp(1j * case.shift)
    ytt = ys + 0.5j * bc
    yff = ytt / (tap * np.conj(tap))
    yft = -ys / np.conj(tap)
    ytf = -ys / tap
    return yff, yft, ytf, ytt


def build_admittances(case: NetworkCase) -> Admittances:
    """Assemble ``Y_bus``, ``Y_fr`` and ``Y_to`` with the standard pi branch model.

    Line charging lives inside the branch matrices so that terminal flows
    include the charging current; ``y_shunt`` only carries bus shunts.
    """
    c_fr, c_to = build_connectivity(case)
    yff, yft, ytf, ytt = branch_primitives(case)
    nl, nb = case.n_branch, case.n_bus
    y_fr = (sp.diags(yff) @ c_fr + sp.diags(yft) @ c_to).tocsr()
    y_to = (sp.diags(ytf) @ c_fr + sp.diags(ytt) @ c_to).tocsr()
    y_shunt = sp.diags(case.gs + 1j * case.bs, format="csr", shape=(nb, nb))
    y_bus = (c_fr.T @ y_fr + c_to.T @ y_to + y_shunt).tocsr()
    y_bus.sum_duplicates()

    check = c_fr.T @ y_fr + c_to.T @ y_to + y_shunt - y_bus
    if check.nnz and np.max(np.abs(check.data)) > 1e-12 * max(1.0, abs(y_bus).max()):
        raise AssertionError("bus admittance identity violated")
    assert y_fr.shape == (nl, nb)
    return Admittances(y_bus=y_bus, y_fr=y_fr, y_to=y_to, c_fr=c_fr, c_to=c_to, y_shunt=y_shunt)


def _check_dim(v: np.ndarray, adm: Admittances) -> np.ndarray:
    v = np.asarray(v, dtype=complex)
    if v.ndim != 1 or v.shape[0] != adm.y_bus.shape[0]:
        raise ValueError(f"voltage vector of length {v.shape} does not match {adm.y_bus.shape[0]} buses")
    return v


def bus_injections(v, adm: Admittances) -> np.ndarray:
    """Complex power injected into each bus, ``diag(V) conj(Y_bus V)``."""
    v = _check_dim(v, adm)
    return v * np.conj(adm.y_bus @ v)


def line_flows(v, adm: Admittances) -> np.ndarray:
    """Complex terminal flows, from-side entries first then to-side (length ``2 n_l``)."""
    v = _check_dim(v, adm)
    s_fr = (adm.c_fr @ v) * np.conj(adm.y_fr @ v)
    s_to = (adm.c_to @ v) * np.conj(adm.y_to @ v)
    return np.concatenate([s_fr, s_to])


def polar(v_mag, v_ang) -> np.ndarray:
    return np.asarray(v_mag) * np.exp(1j * np.asarray(v_ang))
