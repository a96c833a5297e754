"""Symmetric indefinite KKT factorization with inertia correction.

The reduced Newton system of the interior-point method is

    [ W + Sx + dw I   Jc^T       Jh^T   ] [dx]   [r1]
    [ Jc             -dc I       0      ] [dy] = [r2]
    [ Jh              0         -D - dc ] [dz]   [r3]

Rows and columns are permuted so that each period's primal variables,
equality rows and inequality rows form one contiguous group. When no row
touches more than one period the system splits into independent blocks that
are factorized separately.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import qdldl
import scipy.sparse as sp

logger = logging.getLogger(__name__)


class KktError(RuntimeError):
    """The KKT matrix could not be given the right inertia."""


@dataclass
class Inertia:
    positive: int
    negative: int
    zero: int

    def matches(self, n: int, m: int) -> bool:
        return self.positive == n and self.negative == m and self.zero == 0


def _row_periods(jac: sp.csr_matrix, var_period: np.ndarray) -> tuple[np.ndarray, bool]:
    """Period of each row (its first column's period) and whether any row spans periods."""
    jac = sp.csr_matrix(jac)
    m = jac.shape[0]
    out = np.zeros(m, dtype=int)
    coupled = False
    if jac.nnz == 0:
        return out, False
    col_p = var_period[jac.indices]
    row_of = np.repeat(np.arange(m), np.diff(jac.indptr))
    lo = np.full(m, np.iinfo(np.int64).max)
    hi = np.full(m, -1)
    np.minimum.at(lo, row_of, col_p)
    np.maximum.at(hi, row_of, col_p)
    has = np.diff(jac.indptr) > 0
    out[has] = lo[has]
    coupled = bool(np.any(hi[has] != lo[has]))
    return out, coupled


class KktSystem:
    """Reusable factorization of the reduced KKT matrix.

    Parameters
    ----------
    n, m_eq, m_in
        Primal size and constraint counts.
    var_period
        Optional period label per primal variable. Enables the
        period-contiguous ordering and the decoupled block path.
    """

    def __init__(self, n: int, m_eq: int, m_in: int, var_period=None, *, reg_floor: float = 1e-8):
        self.n, self.m_eq, self.m_in = n, m_eq, m_in
        self.size = n + m_eq + m_in
        self.var_period = None if var_period is None else np.asarray(var_period, dtype=int)
        self.reg_floor = reg_floor
        self._pattern = None
        self._perm = None
        self._blocks = None
        self._solvers = None
        self._inertia = None
        self._full = None
        self.decoupled = False

    # -------------------------------------------------------------- structure
    def _structure(self, jc, jh):
        n = self.n
        if self.var_period is None:
            self._perm = np.arange(self.size)
            self._blocks = None
            return
        eq_p, eq_c = _row_periods(jc, self.var_period)
        in_p, in_c = _row_periods(jh, self.var_period)
        labels = np.concatenate([self.var_period, eq_p, in_p])
        kind = np.concatenate([np.zeros(n, int), np.ones(self.m_eq, int), np.full(self.m_in, 2)])
        perm = np.lexsort((np.arange(self.size), kind, labels))
        self._perm = perm
        self.decoupled = not (eq_c or in_c)
        if self.decoupled:
            sorted_labels = labels[perm]
            cuts = np.flatnonzero(np.diff(sorted_labels)) + 1
            self._blocks = np.split(np.arange(self.size), cuts)
        else:
            self._blocks = None

    def assemble(self, w, jc, jh, sigma_x, d_in, delta_w: float, delta_c: float) -> sp.csc_matrix:
        """Upper triangle of the permuted KKT matrix (fixed sparsity pattern)."""
        n, me = self.n, self.m_eq
        if self._perm is None:
            self._structure(jc, jh)
        w = sp.triu(sp.coo_matrix(w), format="coo")
        jc = sp.coo_matrix(jc)
        jh = sp.coo_matrix(jh)
        diag = np.concatenate([
            sigma_x + delta_w,
            np.full(me, -delta_c),
            -(d_in + delta_c),
        ])
        rows = np.concatenate([w.row, jc.col, jh.col, np.arange(self.size)])
        cols = np.concatenate([w.col, n + jc.row, n + me + jh.row, np.arange(self.size)])
        vals = np.concatenate([w.data, jc.data, jh.data, diag])
        # move to permuted positions and keep the upper triangle
        inv = np.empty(self.size, dtype=int)
        inv[self._perm] = np.arange(self.size)
        pr, pc = inv[rows], inv[cols]
        upper = np.where(pr <= pc)
        lower = np.where(pr > pc)
        r = np.concatenate([pr[upper], pc[lower]])
        c = np.concatenate([pc[upper], pr[lower]])
        v = np.concatenate([vals[upper], vals[lower]])
        if self._pattern is not None:
            r = np.concatenate([r, self._pattern[0]])
            c = np.concatenate([c, self._pattern[1]])
            v = np.concatenate([v, np.zeros(len(self._pattern[0]))])
        k = sp.coo_matrix((v, (r, c)), shape=(self.size, self.size)).tocsc()
        k.sort_indices()
        return k

    # ---------------------------------------------------------- factorization
    def _factor_one(self, k: sp.csc_matrix, slot: int):
        solver = self._solvers[slot] if self._solvers is not None else None
        if solver is not None and self._same_pattern(slot, k):
            solver.update(k, upper=True)
        else:
            solver = qdldl.Solver(k, upper=True)
            self._remember(slot, k, solver)
        d = solver.factors()[1]
        return solver, d

    def _same_pattern(self, slot, k):
        ref = self._patterns_by_slot[slot]
        return ref[0].shape == k.indptr.shape and ref[1].shape == k.indices.shape and \
            np.array_equal(ref[0], k.indptr) and np.array_equal(ref[1], k.indices)

    def _remember(self, slot, k, solver):
        self._solvers[slot] = solver
        self._patterns_by_slot[slot] = (k.indptr.copy(), k.indices.copy())

    def factor(self, k: sp.csc_matrix) -> Inertia:
        """Factorize ``k`` (upper triangle, permuted) and return its inertia."""
        if self._pattern is None or len(self._pattern[0]) != k.nnz:
            coo = k.tocoo()
            self._pattern = (coo.row.copy(), coo.col.copy())
        groups = self._blocks if self.decoupled else [None]
        if self._solvers is None or len(self._solvers) != len(groups):
            self._solvers = [None] * len(groups)
            self._patterns_by_slot = [None] * len(groups)
        pos = neg = zero = 0
        self._k = k
        self._full = None
        for slot, g in enumerate(groups):
            sub = k if g is None else k[g][:, g]
            try:
                _, d = self._factor_one(sp.csc_matrix(sub), slot)
            except RuntimeError:
                self._solvers[slot] = None
                self._inertia = Inertia(0, 0, self.size)
                return self._inertia
            pos += int(np.sum(d > 0))
            neg += int(np.sum(d < 0))
            zero += int(np.sum(d == 0))
        self._inertia = Inertia(pos, neg, zero)
        return self._inertia

    def _apply_inverse(self, b):
        if not self.decoupled:
            return self._solvers[0].solve(b)
        y = np.empty_like(b)
        for slot, g in enumerate(self._blocks):
            y[g] = self._solvers[slot].solve(b[g])
        return y

    def solve(self, rhs, refine: int = 1) -> np.ndarray:
        """Solve with the current factorization; ``rhs`` in natural ordering.

        Pivoting through the tiny ``-delta_c`` diagonal without row exchanges
        can cost several digits, so ``refine`` rounds of iterative refinement
        against the assembled matrix follow the triangular solves.
        """
        rhs = np.asarray(rhs, dtype=float)
        b = rhs[self._perm]
        y = self._apply_inverse(b)
        if refine:
            if self._full is None:
                self._full = (self._k + sp.triu(self._k, 1).T).tocsr()
            for _ in range(refine):
                y = y + self._apply_inverse(b - self._full @ y)
        out = np.empty_like(y)
        out[self._perm] = y
        return out

    def residual(self, rhs, sol) -> float:
        """Relative residual of the last factored system (natural ordering)."""
        k = self._k
        full = k + sp.triu(k, 1).T
        b = np.asarray(rhs)[self._perm]
        y = np.asarray(sol)[self._perm]
        return float(np.linalg.norm(full @ y - b) / max(np.linalg.norm(b), 1e-300))


@dataclass
class Regularization:
    """IPOPT-style inertia correction state carried across iterations."""

    delta_w_last: float = 0.0
    delta_w_min: float = 1e-20
    delta_w_init: float = 1e-4
    delta_w_max: float = 1e40
    grow_first: float = 100.0
    grow: float = 8.0
    shrink: float = 1.0 / 3.0
    delta_c: float = 1e-8


def kkt_solve(system: KktSystem, w, jc, jh, sigma_x, d_in, rhs, reg: Regularization | None = None):
    """Factorize with inertia correction and solve one right-hand side.

    Returns ``(step, factor_info)``; ``factor_info`` holds the regularization
    used so later right-hand sides can reuse the same factorization through
    ``system.solve``. Raises ``KktError`` when no admissible shift is found.
    """
    reg = reg or Regularization()
    n, m = system.n, system.m_eq + system.m_in
    delta_c = max(reg.delta_c, system.reg_floor)
    delta_w = 0.0
    k = system.assemble(w, jc, jh, sigma_x, d_in, delta_w, delta_c)
    inertia = system.factor(k)
    attempts = 0
    if not inertia.matches(n, m):
        if reg.delta_w_last == 0.0:
            delta_w = reg.delta_w_init
        else:
            delta_w = max(reg.delta_w_min, reg.delta_w_last * reg.shrink)
        while True:
            attempts += 1
            k = system.assemble(w, jc, jh, sigma_x, d_in, delta_w, delta_c)
            inertia = system.factor(k)
            if inertia.matches(n, m):
                break
            if delta_w > reg.delta_w_max:
                raise KktError(
                    f"inertia correction failed: ({inertia.positive}+, {inertia.negative}-, "
                    f"{inertia.zero}0) expected ({n}+, {m}-)"
                )
            mult = reg.grow_first if reg.delta_w_last == 0.0 and attempts == 1 else reg.grow
            delta_w *= mult
        reg.delta_w_last = delta_w
    step = system.solve(rhs)
    if not np.all(np.isfinite(step)):
        raise KktError("non-finite KKT step")
    return step, {"delta_w": delta_w, "delta_c": delta_c, "attempts": attempts}
