"""Problem interface consumed by the interior-point solver.

A problem is

    min f(x)  s.t.  c(x) = 0,  h(x) <= 0,  lower <= x <= upper

with infinite bounds meaning "absent". Sparse matrices may be any scipy
format; the Hessian is the full symmetric matrix of
``obj_factor * f + y^T c + z^T h``.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
import scipy.sparse as sp


class Nlp:
    n: int
    m_eq: int
    m_in: int
    lower: np.ndarray
    upper: np.ndarray
    x0: np.ndarray
    var_period: np.ndarray | None = None

    def objective(self, x) -> tuple[float, np.ndarray]:
        raise NotImplementedError

    def equalities(self, x) -> tuple[np.ndarray, sp.spmatrix]:
        raise NotImplementedError

    def inequalities(self, x) -> tuple[np.ndarray, sp.spmatrix]:
        raise NotImplementedError

    def hessian(self, x, y, z, obj_factor: float = 1.0) -> sp.spmatrix:
        raise NotImplementedError


def _dense_jac(fun, x, m, eps=1e-7):
    cols = []
    for k in range(len(x)):
        e = np.zeros(len(x))
        e[k] = eps
        cols.append((fun(x + e) - fun(x - e)) / (2 * eps))
    return np.column_stack(cols) if cols else np.zeros((m, 0))


class CallbackNlp(Nlp):
    """Small dense problem from plain callables.

    ``eq``/``ineq`` return residual vectors; their Jacobians and the
    Hessian may be given explicitly or are approximated by central
    differences (adequate for tests and tiny models).
    """

    def __init__(
        self,
        f: Callable,
        grad: Callable,
        x0,
        *,
        lower=None,
        upper=None,
        eq: Callable | None = None,
        eq_jac: Callable | None = None,
        ineq: Callable | None = None,
        ineq_jac: Callable | None = None,
        hess: Callable | None = None,
    ):
        self.x0 = np.asarray(x0, dtype=float)
        self.n = len(self.x0)
        self._f, self._g = f, grad
        self._eq = eq or (lambda x: np.zeros(0))
        self._ineq = ineq or (lambda x: np.zeros(0))
        self._eq_jac, self._ineq_jac, self._hess = eq_jac, ineq_jac, hess
        self.m_eq = len(self._eq(self.x0))
        self.m_in = len(self._ineq(self.x0))
        self.lower = np.full(self.n, -np.inf) if lower is None else np.asarray(lower, dtype=float)
        self.upper = np.full(self.n, np.inf) if upper is None else np.asarray(upper, dtype=float)

    def objective(self, x):
        return float(self._f(x)), np.asarray(self._g(x), dtype=float)

    def equalities(self, x):
        c = np.asarray(self._eq(x), dtype=float)
        j = self._eq_jac(x) if self._eq_jac else _dense_jac(self._eq, x, self.m_eq)
        return c, sp.csr_matrix(j, shape=(self.m_eq, self.n))

    def inequalities(self, x):
        h = np.asarray(self._ineq(x), dtype=float)
        j = self._ineq_jac(x) if self._ineq_jac else _dense_jac(self._ineq, x, self.m_in)
        return h, sp.csr_matrix(j, shape=(self.m_in, self.n))

    def hessian(self, x, y, z, obj_factor=1.0):
        if self._hess is not None:
            return sp.csr_matrix(self._hess(x, y, z, obj_factor))

        def lag_grad(xx):
            g = obj_factor * np.asarray(self._g(xx), dtype=float)
            _, je = self.equalities(xx)
            _, ji = self.inequalities(xx)
            return g + je.T @ y + ji.T @ z

        h = _dense_jac(lag_grad, x, self.n, eps=1e-5)
        return sp.csr_matrix(0.5 * (h + h.T))
