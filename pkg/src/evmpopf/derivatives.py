"""Polar-coordinate derivatives of bus injections and branch flows.

Every function works on any compatible set of sparse matrices, so callers
can pass block-diagonal stacks of several periods and get all periods'
derivatives in one call.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp


def _diag(v) -> sp.csr_matrix:
    return sp.diags(np.asarray(v), format="csr")


def dsbus_dv(y_bus, v):
    """Return ``(dS/dVa, dS/dVm)`` for ``S = diag(V) conj(Y V)``."""
    i_bus = y_bus @ v
    vnorm = v / np.abs(v)
    dv = _diag(v)
    ds_dva = 1j * dv @ np.conj(_diag(i_bus) - y_bus @ dv)
    ds_dvm = dv @ np.conj(y_bus @ _diag(vnorm)) + _diag(np.conj(i_bus) * vnorm)
    return ds_dva.tocsr(), ds_dvm.tocsr()


def dsbr_dv(c_br, y_br, v):
    """Return ``(dS/dVa, dS/dVm, S)`` for terminal flows ``S = diag(C V) conj(Y V)``."""
    i_br = y_br @ v
    v_br = c_br @ v
    vnorm = v / np.abs(v)
    dv = _diag(v)
    ds_dva = 1j * (_diag(np.conj(i_br)) @ c_br @ dv - _diag(v_br) @ np.conj(y_br @ dv))
    ds_dvm = _diag(v_br) @ np.conj(y_br @ _diag(vnorm)) + _diag(np.conj(i_br)) @ c_br @ _diag(vnorm)
    return ds_dva.tocsr(), ds_dvm.tocsr(), v_br * np.conj(i_br)


def d2sbus_dv2(y_bus, v, lam):
    """Second derivatives of ``lam^T S_bus`` as blocks ``(aa, av, va, vv)``.

    ``lam`` may be complex. Take the real part of the result for a real
    Lagrangian term ``lam^T Re(S)`` and the imaginary part for ``lam^T Im(S)``.
    """
    i_bus = y_bus @ v
    dlam = _diag(lam)
    dv = _diag(v)
    a = _diag(lam * v)
    b = y_bus @ dv
    c = a @ np.conj(b)
    d = y_bus.T.conj() @ dv
    e = _diag(np.conj(v)) @ (d @ dlam - _diag(d @ lam))
    f = c - a @ _diag(np.conj(i_bus))
    g = _diag(1.0 / np.abs(v))
    aa = e + f
    va = 1j * g @ (e - f)
    av = va.T
    vv = g @ (c + c.T) @ g
    return aa, av, va, vv


def d2sbr_dv2(c_br, y_br, v, lam):
    """Second derivatives of ``lam^T S_br`` for complex weights ``lam``."""
    dlam = _diag(lam)
    dv = _diag(v)
    a = y_br.conj().T @ dlam @ c_br
    b = _diag(np.conj(v)) @ a @ dv
    d = _diag((a @ v) * np.conj(v))
    e = _diag((a.T @ np.conj(v)) * v)
    f = b + b.T
    g = _diag(1.0 / np.abs(v))
    aa = f - d - e
    va = 1j * g @ (b - b.T - d + e)
    av = va.T
    vv = g @ f @ g
    return aa, av, va, vv


def d2asbr_dv2(ds_dva, ds_dvm, s_br, c_br, y_br, v, lam):
    """Second derivatives of ``lam^T |S_br|^2`` (real blocks ``aa, av, va, vv``)."""
    dlam = _diag(lam)
    saa, sav, sva, svv = d2sbr_dv2(c_br, y_br, v, np.conj(s_br) * lam)
    haa = 2 * (saa + ds_dva.T @ dlam @ np.conj(ds_dva)).real
    hva = 2 * (sva + ds_dvm.T @ dlam @ np.conj(ds_dva)).real
    hav = 2 * (sav + ds_dva.T @ dlam @ np.conj(ds_dvm)).real
    hvv = 2 * (svv + ds_dvm.T @ dlam @ np.conj(ds_dvm)).real
    return haa, hav, hva, hvv


def dabr2_dv(ds_dva, ds_dvm, s_br):
    """First derivatives of squared apparent flow ``|S|^2``."""
    dre = _diag(s_br.real)
    dim = _diag(s_br.imag)
    da = 2 * (dre @ ds_dva.real + dim @ ds_dva.imag)
    dm = 2 * (dre @ ds_dvm.real + dim @ ds_dvm.imag)
    return da.tocsr(), dm.tocsr()
