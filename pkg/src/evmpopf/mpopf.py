"""Multiperiod AC OPF with storage coupling: variable layout, callbacks, derivatives.

Per period the variable block is ``[theta, V, P_g, Q_g, SOC, P_ch, P_dch, Q_s]``
and blocks are stacked period after period. Powers are p.u. on the case
base, SOC is a fraction of capacity. The objective is reported in NOK.

Equality rows come in three groups: nodal balance (``2 n_b`` per period,
active then reactive), linear pins (``x_k = value``), and storage state
equations (``n_y`` per period). Inequality rows are the squared apparent
flows at both terminals of rated branches, per period, present only when
network limits are enforced. Simple bounds are kept as bounds.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from evmpopf import derivatives as dv
from evmpopf.fleet import FleetSpec, arrival_mask, pin_variables, validate_fleet
from evmpopf.grid import NetworkCase, build_admittances
from evmpopf.ipm.nlp import Nlp

logger = logging.getLogger(__name__)

UNLIMITED_V_BOUNDS = (0.5, 1.5)
BLOCKS = ("theta", "vm", "pg", "qg", "soc", "pch", "pdch", "qs")
PIN_BLOCK = {"p_ch": "pch", "p_dch": "pdch", "q_s": "qs", "p_g": "pg", "q_g": "qg"}


class MpopfAssemblyError(ValueError):
    pass


@dataclass(frozen=True)
class VariableLayout:
    n_bus: int
    n_gen: int
    n_y: int
    T: int

    @property
    def n_xt(self) -> int:
        return 2 * self.n_bus + 2 * self.n_gen + 4 * self.n_y

    @property
    def n_x(self) -> int:
        return self.T * self.n_xt

    def block_sizes(self) -> dict[str, int]:
        nb, ng, ny = self.n_bus, self.n_gen, self.n_y
        return dict(theta=nb, vm=nb, pg=ng, qg=ng, soc=ny, pch=ny, pdch=ny, qs=ny)

    def block_offsets(self) -> dict[str, int]:
        out, off = {}, 0
        for name, size in self.block_sizes().items():
            out[name] = off
            off += size
        return out

    def index(self, block: str) -> np.ndarray:
        """Global indices of one variable block as a ``T x size`` array."""
        size = self.block_sizes()[block]
        start = self.block_offsets()[block]
        base = np.arange(self.T)[:, None] * self.n_xt + start
        return base + np.arange(size)[None, :]

    def period_of(self) -> np.ndarray:
        return np.repeat(np.arange(self.T), self.n_xt)


def problem_size(n_bus: int, n_gen: int, n_branch: int, n_y: int, T: int, n_rated: int | None = None) -> dict:
    """Variable and constraint bookkeeping without building anything."""
    layout = VariableLayout(n_bus, n_gen, n_y, T)
    n_rated = n_branch if n_rated is None else n_rated
    return {
        "N_xt": layout.n_xt,
        "N_x": layout.n_x,
        "N_gn": 2 * n_bus * T,
        "N_gs": n_y * T,
        "N_hn": 2 * n_rated * T,
    }


def _kron_eye(T: int, m) -> sp.csr_matrix:
    return sp.kron(sp.identity(T, format="csr"), m, format="csr")


def _coo(m) -> sp.coo_matrix:
    return sp.coo_matrix(m)


class MpopfProblem:
    """Assembled multiperiod OPF; immutable after construction.

    Parameters
    ----------
    pd, qd
        Bus loads in MW / MVAr, shape ``n_bus x T``.
    prices
        Energy price per period in NOK/MWh, applied to every generator.
    dt
        Period length in hours.
    network_limits
        When False the line-flow rows are dropped, angle bounds removed and
        free voltage magnitudes widened to ``UNLIMITED_V_BOUNDS``.
    """

    def __init__(
        self,
        case: NetworkCase,
        fleet: FleetSpec,
        pd,
        qd,
        prices,
        dt: float,
        *,
        network_limits: bool = True,
    ):
        self.case = case
        self.fleet = fleet
        self.pd = np.asarray(pd, dtype=float)
        self.qd = np.asarray(qd, dtype=float)
        self.prices = np.asarray(prices, dtype=float).reshape(-1)
        self.dt = float(dt)
        self.network_limits = bool(network_limits)
        T = len(self.prices)
        nb, ng, ny = case.n_bus, case.n_gen, fleet.n_y
        if self.pd.shape != (nb, T) or self.qd.shape != (nb, T):
            raise MpopfAssemblyError(
                f"demand must be {(nb, T)}, got pd {self.pd.shape}, qd {self.qd.shape}"
            )
        if fleet.horizon != T:
            raise MpopfAssemblyError(f"fleet horizon {fleet.horizon} != price horizon {T}")
        if self.dt <= 0:
            raise MpopfAssemblyError("dt must be positive")
        problems = validate_fleet(fleet, T, case)
        if problems:
            raise MpopfAssemblyError(f"invalid fleet: {problems[:5]}")

        self.T = T
        self.layout = VariableLayout(nb, ng, ny, T)
        self.adm = build_admittances(case)
        base = case.base_mva
        self.base = base
        self._idx = {b: self.layout.index(b) for b in BLOCKS}

        self._gen_bus = case.gen_index
        self._dev_bus = case.bus_index(fleet.bus) if ny else np.zeros(0, int)
        self._e_pu = fleet.e_max / base
        self._reset = arrival_mask(fleet.avbp) | np.zeros((ny, T), dtype=bool)
        if ny:
            self._reset[:, 0] = True

        self._ybus = _kron_eye(T, self.adm.y_bus)
        rated = np.flatnonzero(case.rated) if self.network_limits else np.zeros(0, int)
        self._rated = rated
        self._nr = len(rated)
        self._smax2 = (case.rate[rated] / base) ** 2
        self._cf = _kron_eye(T, self.adm.c_fr[rated])
        self._ct = _kron_eye(T, self.adm.c_to[rated])
        self._yf = _kron_eye(T, self.adm.y_fr[rated])
        self._yt = _kron_eye(T, self.adm.y_to[rated])

        self._build_bounds()
        self._build_pins()
        self.n_gn = 2 * nb * T
        self.n_gl = len(self.pin_index)
        self.n_gs = ny * T
        self.n_eq = self.n_gn + self.n_gl + self.n_gs
        self.n_hn = 2 * self._nr * T
        self.n_hl = int(np.sum(np.isfinite(self.x_lower) & ~self.pinned)
                        + np.sum(np.isfinite(self.x_upper) & ~self.pinned))
        self._build_linear_jacobians()

    # ------------------------------------------------------------------ bounds
    def _build_bounds(self):
        case, fleet, base = self.case, self.fleet, self.base
        n = self.layout.n_x
        lo = np.full(n, -np.inf)
        hi = np.full(n, np.inf)
        idx = self._idx

        amin = np.where(case.amin <= -np.pi, -np.inf, case.amin)
        amax = np.where(case.amax >= np.pi, np.inf, case.amax)
        vmin, vmax = case.vmin.copy(), case.vmax.copy()
        if not self.network_limits:
            amin[:], amax[:] = -np.inf, np.inf
            free_v = vmin < vmax
            vmin[free_v] = np.minimum(vmin[free_v], UNLIMITED_V_BOUNDS[0])
            vmax[free_v] = np.maximum(vmax[free_v], UNLIMITED_V_BOUNDS[1])
        lo[idx["theta"]] = amin
        hi[idx["theta"]] = amax
        lo[idx["vm"]] = vmin
        hi[idx["vm"]] = vmax
        lo[idx["pg"]] = case.pmin / base
        hi[idx["pg"]] = case.pmax / base
        lo[idx["qg"]] = case.qmin / base
        hi[idx["qg"]] = case.qmax / base
        if fleet.n_y:
            live = fleet.avbp.T.astype(bool)
            floor = fleet.soc_floor().T
            lo[idx["soc"]] = np.where(live, floor, -np.inf)
            hi[idx["soc"]] = np.where(live, fleet.soc_max[None, :], np.inf)
            lo[idx["pch"]] = fleet.p_ch_min / base
            hi[idx["pch"]] = fleet.p_ch_max / base
            lo[idx["pdch"]] = fleet.p_dch_min / base
            hi[idx["pdch"]] = fleet.p_dch_max / base
            lo[idx["qs"]] = fleet.q_s_min / base
            hi[idx["qs"]] = fleet.q_s_max / base
        bad = np.flatnonzero(lo > hi + 1e-12)
        if len(bad):
            raise MpopfAssemblyError(
                f"empty bound box for {len(bad)} variables, first at index {bad[0]} "
                f"({self.describe(bad[0])}): [{lo[bad[0]]}, {hi[bad[0]]}]"
            )
        hi = np.maximum(hi, lo)
        self._box_lower, self._box_upper = lo, hi

    def _build_pins(self):
        idx = self._idx
        pins = {}
        slack = self.case.slack
        for t in range(self.T):
            pins[int(idx["theta"][t, slack])] = 0.0
        for p in pin_variables(self.fleet, self.T):
            k = int(idx[PIN_BLOCK[p.kind]][p.period, p.index])
            pins.setdefault(k, p.value / self.base)
        lo, hi = self._box_lower, self._box_upper
        for k in np.flatnonzero(lo == hi):
            pins.setdefault(int(k), float(lo[k]))
        order = np.array(sorted(pins), dtype=int)
        self.pin_index = order
        self.pin_value = np.array([pins[k] for k in order], dtype=float)
        pinned = np.zeros(self.layout.n_x, dtype=bool)
        pinned[order] = True
        self.pinned = pinned
        self.x_lower = lo.copy()
        self.x_upper = hi.copy()
        self.x_lower[order] = self.pin_value
        self.x_upper[order] = self.pin_value

    def describe(self, k: int) -> str:
        t, local = divmod(int(k), self.layout.n_xt)
        for name, off in self.layout.block_offsets().items():
            size = self.layout.block_sizes()[name]
            if off <= local < off + size:
                return f"{name}[{local - off}] at t={t}"
        return f"x[{k}]"

    # --------------------------------------------------------------- linear parts
    def _build_linear_jacobians(self):
        T, nb, ny = self.T, self.case.n_bus, self.fleet.n_y
        idx = self._idx
        n = self.layout.n_x
        rows, cols, vals = [], [], []
        tt = np.arange(T)[:, None]
        # balance rows: generator and storage injections
        g_bus = self._gen_bus[None, :]
        rows.append((2 * nb * tt + g_bus).ravel()); cols.append(idx["pg"].ravel()); vals.append(np.ones(idx["pg"].size))
        rows.append((2 * nb * tt + nb + g_bus).ravel()); cols.append(idx["qg"].ravel()); vals.append(np.ones(idx["qg"].size))
        if ny:
            y_bus = self._dev_bus[None, :]
            p_rows = (2 * nb * tt + y_bus).ravel()
            q_rows = (2 * nb * tt + nb + y_bus).ravel()
            rows += [p_rows, p_rows, q_rows]
            cols += [idx["pch"].ravel(), idx["pdch"].ravel(), idx["qs"].ravel()]
            vals += [-np.ones(p_rows.size), np.ones(p_rows.size), np.ones(q_rows.size)]
        self._jac_balance_linear = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(self.n_gn, n)
        )
        self._jac_pins = sp.csr_matrix(
            (np.ones(self.n_gl), (np.arange(self.n_gl), self.pin_index)), shape=(self.n_gl, n)
        )
        if ny:
            fleet = self.fleet
            r = (tt * ny + np.arange(ny)[None, :])
            ch = fleet.eff_ch * self.dt / self._e_pu
            dch = self.dt / (fleet.eff_dch * self._e_pu)
            rows = [r.ravel(), r.ravel(), r.ravel()]
            cols = [idx["soc"].ravel(), idx["pch"].ravel(), idx["pdch"].ravel()]
            vals = [np.ones(r.size), -np.broadcast_to(ch, r.shape).ravel(), np.broadcast_to(dch, r.shape).ravel()]
            couple = ~self._reset.T
            rows.append(r[couple])
            prev = np.vstack([np.zeros((1, ny), int), idx["soc"][:-1]])
            cols.append(prev[couple])
            vals.append(-np.ones(int(couple.sum())))
            self._jac_storage = sp.csr_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(self.n_gs, n)
            )
            self._storage_const = -np.where(self._reset.T, fleet.soci.T, 0.0).ravel()
        else:
            self._jac_storage = sp.csr_matrix((0, n))
            self._storage_const = np.zeros(0)

    # ------------------------------------------------------------------ helpers
    def _voltage(self, X) -> np.ndarray:
        vm = X[self._idx["vm"]].ravel()
        va = X[self._idx["theta"]].ravel()
        return vm * np.exp(1j * va)

    def _balance_rows(self, stacked_rows: np.ndarray, part: int) -> np.ndarray:
        nb = self.case.n_bus
        t, i = np.divmod(stacked_rows, nb)
        return 2 * nb * t + part * nb + i

    def _scatter_va_vm(self, blocks, row_map=None, shape=None) -> sp.csr_matrix:
        """Place ``(dVa, dVm)`` derivative blocks into X columns."""
        va_cols = self._idx["theta"].ravel()
        vm_cols = self._idx["vm"].ravel()
        rows, cols, vals = [], [], []
        for m, colmap in zip(blocks, (va_cols, vm_cols)):
            c = _coo(m)
            rows.append(c.row if row_map is None else row_map[c.row])
            cols.append(colmap[c.col])
            vals.append(c.data)
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=shape
        )

    # ---------------------------------------------------------------- callbacks
    def eval_objective(self, X):
        """Total energy cost in NOK and its gradient."""
        X = self._check(X)
        coef = self.prices[:, None] * self.base * self.dt
        pg = X[self._idx["pg"]]
        grad = np.zeros_like(X)
        grad[self._idx["pg"]] = np.broadcast_to(coef, pg.shape)
        return float(np.sum(coef * pg)), grad

    def _check(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.shape != (self.layout.n_x,):
            raise ValueError(f"X must have length {self.layout.n_x}, got {X.shape}")
        return X

    def balance_residual(self, X) -> np.ndarray:
        X = self._check(X)
        nb, T = self.case.n_bus, self.T
        v = self._voltage(X)
        s = (v * np.conj(self._ybus @ v)).reshape(T, nb)
        lin = self._jac_balance_linear @ X
        p = lin.reshape(T, 2, nb)[:, 0] - self.pd.T / self.base - s.real
        q = lin.reshape(T, 2, nb)[:, 1] - self.qd.T / self.base - s.imag
        return np.stack([p, q], axis=1).ravel()

    def storage_residual(self, X) -> np.ndarray:
        X = self._check(X)
        return self._jac_storage @ X + self._storage_const

    def equality_residual(self, X) -> np.ndarray:
        """``[balance; pins; storage]`` without the Jacobian."""
        X = self._check(X)
        return np.concatenate([
            self.balance_residual(X),
            X[self.pin_index] - self.pin_value,
            self.storage_residual(X),
        ])

    def inequality_residual(self, X) -> np.ndarray:
        """Squared terminal flows minus squared ratings, without the Jacobian."""
        X = self._check(X)
        if self.n_hn == 0:
            return np.zeros(0)
        v = self._voltage(X)
        smax2 = np.tile(self._smax2, self.T)
        res = np.zeros(self.n_hn)
        for side, (c, y) in enumerate(((self._cf, self._yf), (self._ct, self._yt))):
            res[self._line_rows(side)] = np.abs((c @ v) * np.conj(y @ v)) ** 2 - smax2
        return res

    def eval_equalities(self, X):
        """Residuals ``[balance; pins; storage]`` and the sparse Jacobian."""
        X = self._check(X)
        v = self._voltage(X)
        ds_dva, ds_dvm = dv.dsbus_dv(self._ybus, v)
        rows_p = self._balance_rows(np.arange(self._ybus.shape[0]), 0)
        rows_q = self._balance_rows(np.arange(self._ybus.shape[0]), 1)
        jp = self._scatter_va_vm((-ds_dva.real, -ds_dvm.real), rows_p, (self.n_gn, self.layout.n_x))
        jq = self._scatter_va_vm((-ds_dva.imag, -ds_dvm.imag), rows_q, (self.n_gn, self.layout.n_x))
        j_bal = jp + jq + self._jac_balance_linear
        res = self.equality_residual(X)
        jac = sp.vstack([j_bal, self._jac_pins, self._jac_storage], format="csr")
        return res, jac

    def _flows(self, v):
        out = []
        for c, y in ((self._cf, self._yf), (self._ct, self._yt)):
            out.append(dv.dsbr_dv(c, y, v))
        return out

    def _line_rows(self, side: int) -> np.ndarray:
        nr = self._nr
        t, k = np.divmod(np.arange(nr * self.T), nr) if nr else (np.zeros(0, int), np.zeros(0, int))
        return 2 * nr * t + side * nr + k

    def eval_inequalities(self, X):
        """Squared terminal flows minus squared ratings (``<= 0``) and Jacobian."""
        X = self._check(X)
        n, T = self.layout.n_x, self.T
        if self.n_hn == 0:
            return np.zeros(0), sp.csr_matrix((0, n))
        v = self._voltage(X)
        res = np.zeros(self.n_hn)
        smax2 = np.tile(self._smax2, T)
        mats = []
        for side, (da, dm, s) in enumerate(self._flows(v)):
            rows = self._line_rows(side)
            res[rows] = np.abs(s) ** 2 - smax2
            fa, fm = dv.dabr2_dv(da, dm, s)
            mats.append(self._scatter_va_vm((fa, fm), rows, (self.n_hn, n)))
        return res, (mats[0] + mats[1]).tocsr()

    def eval_lagrangian_hessian(self, X, lam_eq, mu_ineq, obj_scale: float = 1.0) -> sp.csr_matrix:
        """Exact Hessian of ``obj_scale*F + lam_eq^T G + mu_ineq^T H`` (symmetric)."""
        X = self._check(X)
        lam_eq = np.asarray(lam_eq, dtype=float)
        mu_ineq = np.asarray(mu_ineq, dtype=float)
        if lam_eq.shape != (self.n_eq,) or mu_ineq.shape != (self.n_hn,):
            raise ValueError("multiplier lengths do not match constraint counts")
        n = self.layout.n_x
        nb, T = self.case.n_bus, self.T
        v = self._voltage(X)
        lam_bal = lam_eq[: self.n_gn].reshape(T, 2, nb)
        lam_p = lam_bal[:, 0].ravel()
        lam_q = lam_bal[:, 1].ravel()
        paa, pav, pva, pvv = dv.d2sbus_dv2(self._ybus, v, lam_p)
        qaa, qav, qva, qvv = dv.d2sbus_dv2(self._ybus, v, lam_q)
        haa = -(paa.real + qaa.imag)
        hav = -(pav.real + qav.imag)
        hva = -(pva.real + qva.imag)
        hvv = -(pvv.real + qvv.imag)
        if self.n_hn:
            flows = self._flows(v)
            cs = ((self._cf, self._yf), (self._ct, self._yt))
            for side, ((da, dm, s), (c, y)) in enumerate(zip(flows, cs)):
                mu = mu_ineq[self._line_rows(side)]
                faa, fav, fva, fvv = dv.d2asbr_dv2(da, dm, s, c, y, v, mu)
                haa = haa + faa
                hav = hav + fav
                hva = hva + fva
                hvv = hvv + fvv
        va_cols = self._idx["theta"].ravel()
        vm_cols = self._idx["vm"].ravel()
        rows, cols, vals = [], [], []
        for m, rmap, cmap in ((haa, va_cols, va_cols), (hav, va_cols, vm_cols),
                              (hva, vm_cols, va_cols), (hvv, vm_cols, vm_cols)):
            c = _coo(m)
            rows.append(rmap[c.row])
            cols.append(cmap[c.col])
            vals.append(c.data)
        del obj_scale  # the objective is linear
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
        )

    # ------------------------------------------------------------- start point
    def initial_point(self) -> np.ndarray:
        """Flat voltages, mid-box generation and SOC, charge rates just above their floor."""
        case, fleet, base = self.case, self.fleet, self.base
        idx, lo, hi = self._idx, self.x_lower, self.x_upper
        X = np.zeros(self.layout.n_x)
        X[idx["vm"]] = np.clip(1.0, lo[idx["vm"]], hi[idx["vm"]])
        X[idx["vm"]] = np.where(self.pinned[idx["vm"]], lo[idx["vm"]], X[idx["vm"]])

        def mid(block, fallback):
            i = idx[block]
            l, h = lo[i], hi[i]
            with np.errstate(invalid="ignore"):
                out = np.where(np.isfinite(l) & np.isfinite(h), 0.5 * (l + h), fallback)
            out = np.where(np.isfinite(l) & ~np.isfinite(h), np.maximum(fallback, l), out)
            out = np.where(~np.isfinite(l) & np.isfinite(h), np.minimum(fallback, h), out)
            return out

        ng = max(case.n_gen, 1)
        p_need = (self.pd.sum(axis=0) / base)[:, None] / ng
        q_need = (self.qd.sum(axis=0) / base)[:, None] / ng
        X[idx["pg"]] = mid("pg", np.broadcast_to(p_need, idx["pg"].shape))
        X[idx["qg"]] = mid("qg", np.broadcast_to(q_need, idx["qg"].shape))
        if fleet.n_y:
            i = idx["pch"]
            X[i] = lo[i] + 1e-3 * (hi[i] - lo[i])
            warm = np.isfinite(fleet.pch_opt)
            if warm.any():
                X[i[:, warm]] = np.clip(fleet.pch_opt[warm] / base, lo[i[:, warm]], hi[i[:, warm]])
            for block in ("pdch", "qs"):
                j = idx[block]
                X[j] = np.where(np.isfinite(lo[j]), lo[j], 0.0)
            X[idx["soc"]] = self._simulate_soc(X)
            j = idx["soc"]
            finite = np.isfinite(lo[j]) & np.isfinite(hi[j])
            with np.errstate(invalid="ignore"):
                X[j] = np.where(finite, 0.5 * (lo[j] + hi[j]), X[j])
            warm = np.isfinite(fleet.soc_opt)
            if warm.any():
                X[j[:, warm]] = np.where(finite[:, warm], np.clip(fleet.soc_opt[warm], lo[j[:, warm]], hi[j[:, warm]]), X[j[:, warm]])
        X[self.pin_index] = self.pin_value
        return X

    def _simulate_soc(self, X) -> np.ndarray:
        fleet = self.fleet
        idx = self._idx
        pch, pdch = X[idx["pch"]], X[idx["pdch"]]
        soc = np.zeros((self.T, fleet.n_y))
        prev = np.zeros(fleet.n_y)
        for t in range(self.T):
            prev = np.where(self._reset[:, t], fleet.soci[:, t], prev)
            prev = prev + (fleet.eff_ch * pch[t] - pdch[t] / fleet.eff_dch) * self.dt / self._e_pu
            soc[t] = prev
        return soc

    # -------------------------------------------------------------- utilities
    def unpack(self, X) -> dict[str, np.ndarray]:
        """Split X into ``T x size`` arrays per block (powers in MW / MVAr)."""
        X = self._check(X)
        out = {b: X[self._idx[b]].copy() for b in BLOCKS}
        for b in ("pg", "qg", "pch", "pdch", "qs"):
            out[b] *= self.base
        return out

    def index(self, block: str) -> np.ndarray:
        return self._idx[block]

    @property
    def smax2(self) -> np.ndarray:
        """Squared ratings (p.u.) of each inequality row."""
        return np.tile(np.concatenate([self._smax2, self._smax2]), self.T)

    def row_periods(self) -> tuple[np.ndarray, np.ndarray]:
        """Period of every equality row and every inequality row."""
        nb, T, ny = self.case.n_bus, self.T, self.fleet.n_y
        eq = np.concatenate([
            np.repeat(np.arange(T), 2 * nb),
            self.layout.period_of()[self.pin_index],
            np.repeat(np.arange(T), ny),
        ])
        ineq = np.repeat(np.arange(T), 2 * self._nr)
        return eq, ineq

    def as_nlp(self) -> "MpopfNlp":
        return MpopfNlp(self)

    def sizes(self) -> dict[str, int]:
        return {
            "N_x": self.layout.n_x,
            "N_xt": self.layout.n_xt,
            "N_g": self.n_eq,
            "N_gn": self.n_gn,
            "N_gl": self.n_gl,
            "N_gs": self.n_gs,
            "N_h": self.n_hn + self.n_hl,
            "N_hn": self.n_hn,
            "N_hl": self.n_hl,
        }

    def dump_debug(self, path) -> None:
        """Write bounds, partition sizes, sparsity counts and constants to JSON."""
        X0 = self.initial_point()
        _, je = self.eval_equalities(X0)
        _, ji = self.eval_inequalities(X0)

        def clean(a):
            return [None if not np.isfinite(v) else float(v) for v in a]

        payload = {
            "sizes": self.sizes(),
            "dt_hours": self.dt,
            "base_mva": self.base,
            "network_limits": self.network_limits,
            "prices_nok_mwh": self.prices.tolist(),
            "x_lower": clean(self.x_lower),
            "x_upper": clean(self.x_upper),
            "pins": {"index": self.pin_index.tolist(), "value": self.pin_value.tolist()},
            "nnz": {"jac_eq": int(je.nnz), "jac_ineq": int(ji.nnz)},
        }
        Path(path).write_text(json.dumps(payload, indent=1))


class MpopfNlp(Nlp):
    """Solver view of an :class:`MpopfProblem`.

    Pinned variables and their rows are eliminated. The objective is scaled
    by ``1 / (max|price| * base * dt)``, each line row is divided by its
    squared rating, and power variables are divided by their largest finite
    bound so that charge rates of a few kW are O(1) in the solver.
    """

    def __init__(self, problem: MpopfProblem):
        self.problem = problem
        self.free = np.flatnonzero(~problem.pinned)
        self.n = len(self.free)
        self._eq_rows = np.concatenate([
            np.arange(problem.n_gn),
            problem.n_gn + problem.n_gl + np.arange(problem.n_gs),
        ])
        self.m_eq = len(self._eq_rows)
        self.m_in = problem.n_hn
        self.var_scale = self._variable_scale()[self.free]
        self.lower = problem.x_lower[self.free] / self.var_scale
        self.upper = problem.x_upper[self.free] / self.var_scale
        self._full = problem.initial_point()
        self.x0 = self._full[self.free] / self.var_scale
        self.var_period = problem.layout.period_of()[self.free]
        peak = float(np.max(np.abs(problem.prices))) if problem.T else 1.0
        self.obj_scale = 1.0 / (max(peak, 1e-12) * problem.base * problem.dt)
        self._row_scale = 1.0 / problem.smax2 if problem.n_hn else np.zeros(0)
        self._dcol = sp.diags(self.var_scale)

    def _variable_scale(self) -> np.ndarray:
        p = self.problem
        d = np.ones(p.layout.n_x)
        for block in ("pg", "qg", "pch", "pdch", "qs"):
            idx = p.index(block)
            lo, hi = np.abs(p._box_lower[idx]), np.abs(p._box_upper[idx])
            mag = np.fmax(np.where(np.isfinite(lo), lo, np.nan), np.where(np.isfinite(hi), hi, np.nan))
            d[idx] = np.where(np.isfinite(mag) & (mag > 0), np.minimum(mag, 1.0), 1.0)
        return d

    def full_x(self, x) -> np.ndarray:
        X = self._full.copy()
        X[self.free] = np.asarray(x) * self.var_scale
        return X

    def objective(self, x):
        f, g = self.problem.eval_objective(self.full_x(x))
        return f * self.obj_scale, g[self.free] * self.var_scale * self.obj_scale

    def equalities(self, x):
        c, j = self.problem.eval_equalities(self.full_x(x))
        return c[self._eq_rows], (j[self._eq_rows][:, self.free] @ self._dcol).tocsr()

    def inequalities(self, x):
        h, j = self.problem.eval_inequalities(self.full_x(x))
        if self.m_in == 0:
            return h, j[:, self.free]
        d = sp.diags(self._row_scale)
        return h * self._row_scale, (d @ j[:, self.free] @ self._dcol).tocsr()

    def hessian(self, x, y, z, obj_factor=1.0):
        p = self.problem
        lam = np.zeros(p.n_eq)
        lam[self._eq_rows] = y
        w = p.eval_lagrangian_hessian(self.full_x(x), lam, np.asarray(z) * self._row_scale)
        return (self._dcol @ w[self.free][:, self.free] @ self._dcol).tocsr()

    def finalize(self, res):
        """Map a reduced result back to the full variable vector and NOK objective."""
        p = self.problem
        X = self.full_x(res.x)
        y = np.zeros(p.n_eq)
        y[self._eq_rows] = res.y_eq / self.obj_scale
        res.x = X
        res.y_eq = y
        res.z_ineq = np.asarray(res.z_ineq) * self._row_scale / self.obj_scale
        res.z_lower = np.asarray(res.z_lower) / self.obj_scale
        res.z_upper = np.asarray(res.z_upper) / self.obj_scale
        res.objective = p.eval_objective(X)[0] if np.all(np.isfinite(X)) else np.nan
        return res


def assemble(case, fleet, pd, qd, prices, dt, *, network_limits: bool = True) -> MpopfProblem:
    return MpopfProblem(case, fleet, pd, qd, prices, dt, network_limits=network_limits)
