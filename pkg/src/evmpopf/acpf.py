"""Newton-Raphson AC power flow in polar coordinates."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from evmpopf.derivatives import dsbus_dv
from evmpopf.grid import PQ, PV, Admittances, NetworkCase, build_admittances, bus_injections, line_flows

logger = logging.getLogger(__name__)


class SingularJacobianError(RuntimeError):
    def __init__(self, iteration: int):
        self.iteration = iteration
        super().__init__(f"power-flow Jacobian is singular at iteration {iteration}")


@dataclass(frozen=True)
class PfOptions:
    tol: float = 1e-8
    max_iter: int = 30
    enforce_q_limits: bool = False


@dataclass(frozen=True, eq=False)
class PfSolution:
    """Converged (or diverged) power-flow state; powers in p.u. on ``base_mva``."""

    v_mag: np.ndarray
    v_ang: np.ndarray
    s_bus: np.ndarray
    s_line: np.ndarray
    converged: bool
    iterations: int
    max_mismatch: float
    base_mva: float = 1.0
    gen_p: np.ndarray = field(default_factory=lambda: np.zeros(0))
    gen_q: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def v(self) -> np.ndarray:
        return self.v_mag * np.exp(1j * self.v_ang)


class VoltageExtremes(NamedTuple):
    v_min: float
    v_max: float
    argmin: int
    argmax: int


def _bus_gen_sum(case: NetworkCase, values: np.ndarray) -> np.ndarray:
    out = np.zeros(case.n_bus, dtype=np.result_type(values, float))
    np.add.at(out, case.gen_index, values)
    return out


def solve_power_flow(
    case: NetworkCase,
    p_load,
    q_load,
    opts: PfOptions | None = None,
    *,
    gen_p=None,
    gen_q=None,
    v_set=None,
    v0=None,
    adm: Admittances | None = None,
) -> PfSolution:
    """Solve the AC power flow for one load snapshot.

    Parameters
    ----------
    p_load, q_load
        Bus loads in MW / MVAr, length ``n_bus`` (case order).
    gen_p, gen_q
        Generator injections in MW / MVAr. ``gen_p`` of the slack generator is
        ignored; ``gen_q`` only matters for generators sitting on PQ buses.
        Defaults: ``case.pg`` and zero.
    v_set
        Voltage-magnitude set points per generator (defaults to ``case.vg``);
        applied at slack and PV buses.
    v0
        Complex warm-start voltage. Defaults to a flat start with set points.
    """
    opts = opts or PfOptions()
    adm = adm or build_admittances(case)
    nb, base = case.n_bus, case.base_mva
    p_load = np.asarray(p_load, dtype=float)
    q_load = np.asarray(q_load, dtype=float)
    if p_load.shape != (nb,) or q_load.shape != (nb,):
        raise ValueError(f"load vectors must have length {nb}")
    gen_p = np.array(case.pg if gen_p is None else gen_p, dtype=float)
    gen_q = np.zeros(case.n_gen) if gen_q is None else np.array(gen_q, dtype=float)
    v_set = np.array(case.vg if v_set is None else v_set, dtype=float)

    bus_type = case.bus_type.copy()
    gidx = case.gen_index
    q_fixed_gen = np.zeros(case.n_gen, dtype=bool)
    setpoint = np.ones(nb)
    setpoint[gidx] = v_set

    if v0 is None:
        vm = np.ones(nb)
        controlled = (bus_type == PV) | (bus_type == 3)
        vm[controlled] = setpoint[controlled]
        v = vm.astype(complex)
    else:
        v = np.array(v0, dtype=complex)
        controlled = (bus_type == PV) | (bus_type == 3)
        v[controlled] = setpoint[controlled] * np.exp(1j * np.angle(v[controlled]))

    total_iter = 0
    while True:
        gq = np.where(q_fixed_gen | (bus_type[gidx] == PQ), gen_q, 0.0)
        s_spec = (_bus_gen_sum(case, gen_p + 1j * gq) - (p_load + 1j * q_load)) / base
        v, converged, it, mismatch = _newton(adm.y_bus, s_spec, v, bus_type, opts, total_iter)
        total_iter += it
        if not (opts.enforce_q_limits and converged):
            break
        s_bus = bus_injections(v, adm)
        q_gen = _gen_q(case, s_bus, q_load, gen_q, bus_type)
        pv_gens = np.flatnonzero((bus_type[gidx] == PV) & ~q_fixed_gen)
        over = pv_gens[(q_gen[pv_gens] > case.qmax[pv_gens] + 1e-9) | (q_gen[pv_gens] < case.qmin[pv_gens] - 1e-9)]
        if len(over) == 0:
            break
        for g in over:
            gen_q[g] = np.clip(q_gen[g], case.qmin[g], case.qmax[g])
            q_fixed_gen[g] = True
            bus_type[gidx[g]] = PQ
        logger.debug("PV->PQ switch for generators %s", over.tolist())

    s_bus = bus_injections(v, adm)
    out_p = gen_p.copy()
    out_q = _gen_q(case, s_bus, q_load, gen_q, bus_type)
    slack_gens = np.flatnonzero(gidx == case.slack)
    if len(slack_gens):
        other = _bus_gen_sum(case, np.where(np.isin(np.arange(case.n_gen), slack_gens), 0.0, gen_p))
        p_slack = s_bus[case.slack].real * base + p_load[case.slack] - other[case.slack]
        out_p[slack_gens] = p_slack / len(slack_gens)
    return PfSolution(
        v_mag=np.abs(v),
        v_ang=np.angle(v),
        s_bus=s_bus,
        s_line=line_flows(v, adm),
        converged=converged,
        iterations=total_iter,
        max_mismatch=mismatch,
        base_mva=base,
        gen_p=out_p,
        gen_q=out_q,
    )


def _gen_q(case, s_bus, q_load, gen_q, bus_type) -> np.ndarray:
    """Reactive output of voltage-controlling generators, split evenly per bus."""
    gidx = case.gen_index
    out = np.array(gen_q, dtype=float)
    free = bus_type[gidx] != PQ
    q_bus = s_bus.imag * case.base_mva + q_load
    fixed = _bus_gen_sum(case, np.where(free, 0.0, gen_q))
    n_free = np.bincount(gidx[free], minlength=case.n_bus)
    for g in np.flatnonzero(free):
        b = gidx[g]
        out[g] = (q_bus[b] - fixed[b]) / max(n_free[b], 1)
    return out


def _newton(y_bus, s_spec, v, bus_type, opts: PfOptions, it0: int):
    pv = np.flatnonzero(bus_type == PV)
    pq = np.flatnonzero(bus_type == PQ)
    pvpq = np.concatenate([pv, pq])
    npvpq = len(pvpq)

    def mismatch(v):
        mis = v * np.conj(y_bus @ v) - s_spec
        return np.concatenate([mis[pvpq].real, mis[pq].imag])

    f = mismatch(v)
    norm = float(np.max(np.abs(f))) if len(f) else 0.0
    it = 0
    va, vm = np.angle(v), np.abs(v)
    while norm >= opts.tol and it < opts.max_iter:
        it += 1
        ds_dva, ds_dvm = dsbus_dv(y_bus, v)
        j11 = ds_dva[pvpq][:, pvpq].real
        j12 = ds_dvm[pvpq][:, pq].real
        j21 = ds_dva[pq][:, pvpq].imag
        j22 = ds_dvm[pq][:, pq].imag
        jac = sp.bmat([[j11, j12], [j21, j22]], format="csc")
        try:
            dx = spla.splu(jac).solve(-f)
        except RuntimeError:
            raise SingularJacobianError(it0 + it) from None
        if not np.all(np.isfinite(dx)):
            raise SingularJacobianError(it0 + it)
        va = va.copy()
        vm = vm.copy()
        va[pvpq] += dx[:npvpq]
        vm[pq] += dx[npvpq:]
        v = vm * np.exp(1j * va)
        f = mismatch(v)
        norm = float(np.max(np.abs(f))) if len(f) else 0.0
        if not np.isfinite(norm):
            break
    converged = bool(norm < opts.tol)
    if not converged:
        logger.warning("power flow did not converge: max mismatch %.3e after %d iterations", norm, it)
    return v, converged, it, norm


def sweep_power_flow(
    case: NetworkCase,
    p_load,
    q_load,
    opts: PfOptions | None = None,
    *,
    gen_p=None,
    warm_start: bool = True,
) -> list[PfSolution]:
    """Solve a time series of snapshots (columns of ``n_bus x T`` load matrices).

    Each period starts from the previous period's voltages when
    ``warm_start`` is set; a diverged period falls back to a flat start for
    the next one.
    """
    adm = build_admittances(case)
    p_load = np.asarray(p_load, dtype=float)
    q_load = np.asarray(q_load, dtype=float)
    gen_p = None if gen_p is None else np.asarray(gen_p, dtype=float)
    out = []
    v0 = None
    for t in range(p_load.shape[1]):
        gp = None if gen_p is None else gen_p[:, t]
        try:
            sol = solve_power_flow(case, p_load[:, t], q_load[:, t], opts, gen_p=gp, v0=v0, adm=adm)
        except SingularJacobianError as exc:
            logger.warning("period %d: %s", t, exc)
            nb = case.n_bus
            sol = PfSolution(
                v_mag=np.full(nb, np.nan),
                v_ang=np.full(nb, np.nan),
                s_bus=np.full(nb, np.nan, dtype=complex),
                s_line=np.full(2 * case.n_branch, np.nan, dtype=complex),
                converged=False,
                iterations=exc.iteration,
                max_mismatch=np.inf,
                base_mva=case.base_mva,
                gen_p=np.full(case.n_gen, np.nan),
                gen_q=np.full(case.n_gen, np.nan),
            )
        out.append(sol)
        v0 = sol.v if (warm_start and sol.converged) else None
    return out


def load_ratio(sol: PfSolution, case: NetworkCase) -> np.ndarray:
    """Apparent terminal flow in percent of rating, from-side block then to-side.

    Unrated or out-of-service branches are reported as NaN.
    """
    rate = np.concatenate([case.rate, case.rate])
    rated = np.concatenate([case.rated, case.rated])
    s_mva = np.abs(sol.s_line) * sol.base_mva
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = 100.0 * s_mva / rate
    return np.where(rated, ratio, np.nan)


def branch_load_ratio(sol: PfSolution, case: NetworkCase) -> np.ndarray:
    """Worse of the two terminal ratios per branch (NaN when unrated)."""
    ratio = load_ratio(sol, case).reshape(2, -1)
    with np.errstate(invalid="ignore"):
        return np.fmax(ratio[0], ratio[1])


def voltage_extremes(sol: PfSolution) -> VoltageExtremes:
    vm = sol.v_mag
    return VoltageExtremes(float(np.min(vm)), float(np.max(vm)), int(np.argmin(vm)), int(np.argmax(vm)))


def total_loss(sols: Sequence[PfSolution]) -> np.ndarray:
    """Active network loss per solution in MW (sum of bus injections)."""
    return np.array([np.sum(s.s_bus.real) * s.base_mva for s in sols])
