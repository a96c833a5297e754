"""Primal-dual interior-point method for sparse nonlinear programs.

Inequalities ``h(x) <= 0`` get slacks ``s >= 0`` (``h + s = 0``); finite
variable bounds carry their own multipliers. The default barrier rule shrinks
``mu`` by a fixed factor each iteration (never below a tenth of the
tolerance). The ``"mehrotra"`` rule solves the reduced KKT system once for
the affine (predictor) direction and once more, reusing the factorization,
for a centred direction with target ``sigma * mu``, ``sigma = (mu_aff / mu)^3``.

On EV dispatch models with a binding transformer the adaptive rule can
collapse ``mu`` while the iterate is still primal infeasible and then stall,
which the monotone rule never did on the same set, so it is only an option.
The classical second-order correction term and a residual-merit backtracking
line search both slowed or derailed convergence (the corrected step drives
charge rates onto their bounds early); they are off by default.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from evmpopf.ipm.kkt import KktError, KktSystem, Regularization, kkt_solve
from evmpopf.ipm.nlp import Nlp

logger = logging.getLogger(__name__)

STATUSES = ("optimal", "max_iter", "infeasible", "numerical")
TRACE_COLUMNS = ("iter", "objective", "barrier", "inf_pr", "inf_du", "complementarity",
                 "alpha_pr", "alpha_du", "delta_w", "backtracks")


@dataclass(frozen=True)
class IpmOptions:
    tol_kkt: float = 1e-6
    max_iter: int = 150
    mu0: float = 0.1
    barrier: str = "monotone"
    tau: float = 0.995
    reg_floor: float = 1e-8
    bound_push: float = 1e-2
    bound_relax: float = 1e-10
    kappa_sigma: float = 1e10
    monotone_factor: float = 0.2
    sigma_max: float = 1.0
    second_order: bool = False
    max_backtrack: int = 0
    stall_window: int = 25
    verbose: bool = False

    def __post_init__(self):
        for name in ("tol_kkt", "max_iter", "mu0", "reg_floor", "bound_push"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        if self.barrier not in ("mehrotra", "monotone"):
            raise ValueError("barrier must be 'mehrotra' or 'monotone'")


@dataclass
class IpmResult:
    x: np.ndarray
    y_eq: np.ndarray
    z_ineq: np.ndarray
    z_lower: np.ndarray
    z_upper: np.ndarray
    objective: float
    status: str
    iterations: int
    log: list = field(default_factory=list)
    message: str = ""
    solve_time: float = 0.0

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"

    def write_trace(self, path) -> None:
        write_trace(self.log, path)


def write_trace(log, path, header_line: str | None = None) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        if header_line:
            fh.write(header_line.rstrip("\n") + "\n")
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for rec in log:
            w.writerow([rec[c] for c in TRACE_COLUMNS])


def _push_interior(x, lo, hi, push):
    """Move x strictly inside its bounds (absolute + relative push)."""
    x = x.copy()
    both = np.isfinite(lo) & np.isfinite(hi)
    pl = np.where(both, np.minimum(push * np.maximum(1, np.abs(lo)), 0.5 * push * (hi - lo)),
                  push * np.maximum(1, np.abs(lo)))
    pu = np.where(both, np.minimum(push * np.maximum(1, np.abs(hi)), 0.5 * push * (hi - lo)),
                  push * np.maximum(1, np.abs(hi)))
    with np.errstate(invalid="ignore"):
        fl = np.isfinite(lo)
        fu = np.isfinite(hi)
        x[fl] = np.maximum(x[fl], lo[fl] + pl[fl])
        x[fu] = np.minimum(x[fu], hi[fu] - pu[fu])
    return x


def _max_step(v, dv, tau):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-tau * v[neg] / dv[neg])))


class _State:
    __slots__ = ("x", "s", "y", "z", "zl", "zu", "f", "g", "c", "jc", "h", "jh")


def solve(problem, opts: IpmOptions | None = None) -> IpmResult:
    """Solve an :class:`Nlp` (or any object exposing ``as_nlp()``)."""
    opts = opts or IpmOptions()
    nlp = problem if isinstance(problem, Nlp) or not hasattr(problem, "as_nlp") else problem.as_nlp()
    res = _solve_nlp(nlp, opts)
    if hasattr(nlp, "finalize"):
        res = nlp.finalize(res)
    return res


def _solve_nlp(nlp: Nlp, opts: IpmOptions) -> IpmResult:
    t0 = time.perf_counter()
    n, me, mi = nlp.n, nlp.m_eq, nlp.m_in
    lo, hi = np.asarray(nlp.lower, float), np.asarray(nlp.upper, float)
    il = np.flatnonzero(np.isfinite(lo))
    iu = np.flatnonzero(np.isfinite(hi))
    empty = np.flatnonzero(lo > hi)
    if len(empty):
        return IpmResult(np.asarray(nlp.x0, float), np.zeros(me), np.zeros(mi), np.zeros(len(il)),
                         np.zeros(len(iu)), np.nan, "infeasible", 0,
                         message=f"empty bound box for {len(empty)} variables")
    tight = np.flatnonzero(hi - lo < 1e-12)
    if len(tight):
        return IpmResult(np.asarray(nlp.x0, float), np.zeros(me), np.zeros(mi), np.zeros(len(il)),
                         np.zeros(len(iu)), np.nan, "numerical", 0,
                         message=f"{len(tight)} variables have no interior; eliminate them first")

    # tiny relaxation keeps bound gaps representable once iterates hug a bound
    lo = lo - opts.bound_relax * np.maximum(1.0, np.abs(lo))
    hi = hi + opts.bound_relax * np.maximum(1.0, np.abs(hi))
    st = _State()
    st.x = _push_interior(np.asarray(nlp.x0, float), lo, hi, opts.bound_push)
    _evaluate(nlp, st)
    st.s = np.maximum(-st.h, opts.bound_push * np.maximum(1.0, np.abs(st.h)))
    mu = opts.mu0
    st.z = mu / st.s
    st.zl = mu / (st.x[il] - lo[il])
    st.zu = mu / (hi[iu] - st.x[iu])
    st.y = np.zeros(me)

    kkt = KktSystem(n, me, mi, getattr(nlp, "var_period", None), reg_floor=opts.reg_floor)
    reg = Regularization(delta_c=opts.reg_floor)
    n_comp = mi + len(il) + len(iu)
    log = []
    best_pr = np.inf
    best_pr_iter = 0
    status, message = "max_iter", ""

    for it in range(opts.max_iter + 1):
        rd, rc, rh = _residuals(st, il, iu)
        gl, gu = st.x[il] - lo[il], hi[iu] - st.x[iu]
        comp = np.concatenate([st.s * st.z, gl * st.zl, gu * st.zu])
        mu_cur = float(np.mean(comp)) if n_comp else 0.0
        inf_pr = float(max(np.max(np.abs(rc), initial=0.0), np.max(np.abs(rh), initial=0.0)))
        s_max = 100.0
        mult_sum = np.sum(np.abs(st.y)) + np.sum(st.z) + np.sum(st.zl) + np.sum(st.zu)
        sd = max(s_max, mult_sum / max(me + n_comp, 1)) / s_max
        sc = max(s_max, (mult_sum - np.sum(np.abs(st.y))) / max(n_comp, 1)) / s_max
        inf_du = float(np.max(np.abs(rd), initial=0.0)) / sd
        comp_err = float(np.max(comp, initial=0.0)) / sc
        rec = {"iter": it, "objective": st.f, "barrier": mu_cur, "inf_pr": inf_pr, "inf_du": inf_du,
               "complementarity": comp_err, "alpha_pr": np.nan, "alpha_du": np.nan,
               "delta_w": reg.delta_w_last, "backtracks": 0}
        log.append(rec)
        if opts.verbose:
            logger.info("%3d f=% .6e pr=%.2e du=%.2e mu=%.2e", it, st.f, inf_pr, inf_du, mu_cur)
        if inf_pr <= opts.tol_kkt and inf_du <= opts.tol_kkt and comp_err <= opts.tol_kkt:
            status = "optimal"
            break
        if it == opts.max_iter:
            status, message = "max_iter", f"no convergence in {opts.max_iter} iterations"
            break
        if inf_pr < 0.5 * best_pr:
            best_pr, best_pr_iter = inf_pr, it
        elif it - best_pr_iter > opts.stall_window and inf_pr > 100 * opts.tol_kkt:
            status = "infeasible"
            message = f"primal infeasibility stalled at {inf_pr:.3e} for {it - best_pr_iter} iterations"
            break
        if not np.all(np.isfinite(np.concatenate([rd, rc, rh]))):
            status, message = "numerical", "non-finite residuals"
            break

        # ---- Newton system
        sigma_x = np.zeros(n)
        np.add.at(sigma_x, il, st.zl / gl)
        np.add.at(sigma_x, iu, st.zu / gu)
        d_in = st.s / st.z
        w = nlp.hessian(st.x, st.y, st.z, 1.0)

        def rhs_for(r_sz, r_l, r_u):
            r1 = -rd.copy()
            np.add.at(r1, il, -r_l / gl)
            np.add.at(r1, iu, r_u / gu)
            return np.concatenate([r1, -rc, -rh + r_sz / st.z])

        def expand(step, r_sz, r_l, r_u):
            dx, dy, dz = step[:n], step[n:n + me], step[n + me:]
            ds = (-r_sz - st.s * dz) / st.z
            dzl = (-r_l - st.zl * dx[il]) / gl
            dzu = (-r_u + st.zu * dx[iu]) / gu
            return dx, ds, dy, dz, dzl, dzu

        try:
            if opts.barrier == "mehrotra":
                r_sz, r_l, r_u = st.s * st.z, gl * st.zl, gu * st.zu
                step, info = kkt_solve(kkt, w, st.jc, st.jh, sigma_x, d_in, rhs_for(r_sz, r_l, r_u), reg)
                dx, ds, dy, dz, dzl, dzu = expand(step, r_sz, r_l, r_u)
                ap = min(_max_step(st.s, ds, 1.0), _max_step(gl, dx[il], 1.0), _max_step(gu, -dx[iu], 1.0))
                ad = min(_max_step(st.z, dz, 1.0), _max_step(st.zl, dzl, 1.0), _max_step(st.zu, dzu, 1.0))
                if n_comp:
                    mu_aff = float(np.mean(np.concatenate([
                        (st.s + ap * ds) * (st.z + ad * dz),
                        (gl + ap * dx[il]) * (st.zl + ad * dzl),
                        (gu - ap * dx[iu]) * (st.zu + ad * dzu),
                    ])))
                    sigma = min(opts.sigma_max, (mu_aff / mu_cur) ** 3) if mu_cur > 0 else 0.0
                else:
                    sigma = 0.0
                target = sigma * mu_cur
                r_sz, r_l, r_u = st.s * st.z - target, gl * st.zl - target, gu * st.zu - target
                step = kkt.solve(rhs_for(r_sz, r_l, r_u))
                if opts.second_order:
                    # keep the corrected direction only when it does not shorten the step
                    so = (r_sz + ds * dz, r_l + dx[il] * dzl, r_u - dx[iu] * dzu)
                    step_so = kkt.solve(rhs_for(*so))
                    if _step_length(expand(step_so, *so), st, gl, gu, il, iu) >= \
                            _step_length(expand(step, r_sz, r_l, r_u), st, gl, gu, il, iu):
                        step, (r_sz, r_l, r_u) = step_so, so
            else:
                mu = max(min(mu, opts.monotone_factor * mu_cur), opts.tol_kkt / 10)
                target = mu
                r_sz, r_l, r_u = st.s * st.z - target, gl * st.zl - target, gu * st.zu - target
                step, info = kkt_solve(kkt, w, st.jc, st.jh, sigma_x, d_in, rhs_for(r_sz, r_l, r_u), reg)
        except KktError as exc:
            status, message = "numerical", str(exc)
            break
        if not np.all(np.isfinite(step)):
            status, message = "numerical", "non-finite step"
            break
        dx, ds, dy, dz, dzl, dzu = expand(step, r_sz, r_l, r_u)
        rec_delta = info["delta_w"]

        tau = min(max(opts.tau, 1.0 - mu_cur), 1.0 - 1e-8)
        ap = min(_max_step(st.s, ds, tau), _max_step(gl, dx[il], tau), _max_step(gu, -dx[iu], tau))
        ad = min(_max_step(st.z, dz, tau), _max_step(st.zl, dzl, tau), _max_step(st.zu, dzu, tau))

        # ---- safeguard: backtrack on the perturbed KKT residual
        phi0 = _merit(rd, rc, rh, comp - target)
        backtracks = 0
        trial = None
        scale = 1.0
        for backtracks in range(opts.max_backtrack + 1):
            trial = _trial(nlp, st, scale * ap, scale * ad, dx, ds, dy, dz, dzl, dzu)
            if trial is not None:
                trd, trc, trh = _residuals(trial, il, iu)
                tcomp = np.concatenate([trial.s * trial.z, (trial.x[il] - lo[il]) * trial.zl,
                                        (hi[iu] - trial.x[iu]) * trial.zu])
                phi = _merit(trd, trc, trh, tcomp - target)
                if np.isfinite(phi) and phi <= (1 - 1e-4 * scale * ap) * phi0:
                    break
            if backtracks == opts.max_backtrack:
                break
            scale *= 0.5
        if trial is None:
            status, message = "numerical", "function evaluation failed along the step"
            break
        rec["alpha_pr"], rec["alpha_du"] = scale * ap, scale * ad
        rec["delta_w"], rec["backtracks"] = rec_delta, backtracks
        _move_collapsed_bounds(trial.x, lo, hi, il, iu)
        _reset_multipliers(trial, lo, hi, il, iu, mu_cur if opts.barrier == "mehrotra" else mu, opts.kappa_sigma)
        st = trial

    return IpmResult(
        x=st.x, y_eq=st.y, z_ineq=st.z, z_lower=st.zl, z_upper=st.zu,
        objective=st.f, status=status, iterations=log[-1]["iter"], log=log, message=message,
        solve_time=time.perf_counter() - t0,
    )


def _step_length(direction, st, gl, gu, il, iu, tau=0.995):
    dx, ds, _, dz, dzl, dzu = direction
    ap = min(_max_step(st.s, ds, tau), _max_step(gl, dx[il], tau), _max_step(gu, -dx[iu], tau))
    ad = min(_max_step(st.z, dz, tau), _max_step(st.zl, dzl, tau), _max_step(st.zu, dzu, tau))
    return min(ap, ad)


def _evaluate(nlp, st):
    st.f, st.g = nlp.objective(st.x)
    st.c, st.jc = nlp.equalities(st.x)
    st.h, st.jh = nlp.inequalities(st.x)


def _residuals(st, il, iu):
    rd = st.g + st.jc.T @ st.y + st.jh.T @ st.z
    np.add.at(rd, il, -st.zl)
    np.add.at(rd, iu, st.zu)
    return rd, st.c, st.h + st.s


def _merit(rd, rc, rh, rcomp) -> float:
    return float(rd @ rd + rc @ rc + rh @ rh + rcomp @ rcomp)


def _trial(nlp, st, ap, ad, dx, ds, dy, dz, dzl, dzu):
    tr = _State()
    tr.x = st.x + ap * dx
    tr.s = st.s + ap * ds
    tr.y = st.y + ad * dy
    tr.z = st.z + ad * dz
    tr.zl = st.zl + ad * dzl
    tr.zu = st.zu + ad * dzu
    try:
        with np.errstate(all="ignore"):
            _evaluate(nlp, tr)
    except (FloatingPointError, ValueError, ZeroDivisionError):
        return None
    if not (np.isfinite(tr.f) and np.all(np.isfinite(tr.c)) and np.all(np.isfinite(tr.h))):
        return None
    return tr


def _move_collapsed_bounds(x, lo, hi, il, iu):
    """Relax bounds whose gap has shrunk to rounding level (updates in place)."""
    eps = np.finfo(float).eps ** 0.75
    gl = x[il] - lo[il]
    tiny = gl < eps * np.maximum(1.0, np.abs(lo[il]))
    if np.any(tiny):
        k = il[tiny]
        lo[k] = np.minimum(lo[k], x[k]) - eps * np.maximum(1.0, np.abs(x[k]))
    gu = hi[iu] - x[iu]
    tiny = gu < eps * np.maximum(1.0, np.abs(hi[iu]))
    if np.any(tiny):
        k = iu[tiny]
        hi[k] = np.maximum(hi[k], x[k]) + eps * np.maximum(1.0, np.abs(x[k]))


def _reset_multipliers(st, lo, hi, il, iu, mu, kappa):
    """Keep each multiplier within a factor ``kappa`` of its central-path value."""
    if mu <= 0:
        return
    gl = np.maximum(st.x[il] - lo[il], 1e-300)
    gu = np.maximum(hi[iu] - st.x[iu], 1e-300)
    st.zl = np.clip(st.zl, mu / (kappa * gl), kappa * mu / gl)
    st.zu = np.clip(st.zu, mu / (kappa * gu), kappa * mu / gu)
    sl = np.maximum(st.s, 1e-300)
    st.z = np.clip(st.z, mu / (kappa * sl), kappa * mu / sl)
