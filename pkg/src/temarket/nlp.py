"""Smooth nonlinear programming: a primal-dual interior-point solver.

Problems have the form

    min f(x)  s.t.  c(x) = 0,  g(x) <= 0,  lower <= x <= upper.

Inequalities get slack variables s >= 0 so that internally every general
constraint is an equality and only simple bounds remain. Each iteration
takes a regularized Newton step on the log-barrier KKT system and keeps
the iterate strictly inside the bounds with a fraction-to-boundary rule.
Steps are accepted by a filter on (constraint violation, barrier
objective) by default, or by backtracking on an l1 exact-penalty merit
function.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Sequence

import numpy as np
import scipy.optimize
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

Vector = np.ndarray
HessianFn = Callable[[Vector, float, Vector, Vector], sp.spmatrix]


class Status(str, Enum):
    OPTIMAL = "Optimal"
    MAX_ITERATIONS = "MaxIterations"
    INFEASIBLE = "Infeasible"
    NUMERICAL_FAILURE = "NumericalFailure"


_STATUS_RANK = {Status.OPTIMAL: 0, Status.MAX_ITERATIONS: 1, Status.NUMERICAL_FAILURE: 2, Status.INFEASIBLE: 3}


def _empty_vec(x: Vector) -> Vector:
    return np.zeros(0)


@dataclass
class NlpProblem:
    """Callbacks and data describing one NLP.

    ``hessian(x, obj_factor, lam_eq, lam_ineq)`` returns the Hessian of
    obj_factor*f + lam_eq.c + lam_ineq.g as a full symmetric sparse matrix.
    When it is missing, a finite-difference Hessian is used, which is only
    practical for small problems.
    """

    n: int
    objective: Callable[[Vector], float]
    gradient: Callable[[Vector], Vector]
    lower: Vector
    upper: Vector
    x0: Vector
    eq: Callable[[Vector], Vector] = _empty_vec
    eq_jac: Callable[[Vector], sp.spmatrix] | None = None
    ineq: Callable[[Vector], Vector] = _empty_vec
    ineq_jac: Callable[[Vector], sp.spmatrix] | None = None
    hessian: HessianFn | None = None
    names: Sequence[str] | None = None

    def __post_init__(self) -> None:
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        self.x0 = np.asarray(self.x0, dtype=float)
        for name, arr in (("lower", self.lower), ("upper", self.upper), ("x0", self.x0)):
            if arr.shape != (self.n,):
                raise ValueError(f"{name} has shape {arr.shape}, expected ({self.n},)")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound above upper bound")

    def eq_jacobian(self, x: Vector) -> sp.csr_matrix:
        if self.eq_jac is None:
            return sp.csr_matrix((0, self.n))
        return sp.csr_matrix(self.eq_jac(x))

    def ineq_jacobian(self, x: Vector) -> sp.csr_matrix:
        if self.ineq_jac is None:
            return sp.csr_matrix((0, self.n))
        return sp.csr_matrix(self.ineq_jac(x))

    def label(self, k: int) -> str:
        return self.names[k] if self.names is not None else f"x[{k}]"


@dataclass
class SolverOptions:
    """Tolerances apply to the scaled problem; feasibility is also checked unscaled."""

    tol: float = 1e-6
    tol_eq: float = 1e-6
    tol_ineq: float = 1e-6
    tol_kkt: float = 1e-6
    tol_compl: float = 1e-6
    max_iter: int = 500
    mu_init: float = 0.1
    mu_min: float | None = None
    bound_push: float = 1e-2
    # bound multipliers are kept within this factor of mu / distance
    kappa_sigma: float = 1e10
    # "filter" (Fletcher-Leyffer style, as in Ipopt) or "merit" (l1 penalty)
    line_search: str = "filter"
    method: str = "ipm"
    fallback: bool = True
    auto_scale: bool = True
    verbose: bool = False


@dataclass
class SolveReport:
    status: Status
    x: Vector
    objective: float
    eq_violation: float
    ineq_violation: float
    kkt_residual: float
    iterations: int
    seconds: float
    lam_eq: Vector = field(default_factory=lambda: np.zeros(0))
    lam_ineq: Vector = field(default_factory=lambda: np.zeros(0))
    method: str = "ipm"
    message: str = ""
    merit_pairs: list[tuple[float, float]] = field(default_factory=list, repr=False)
    iterates: list[Vector] = field(default_factory=list, repr=False)
    start_index: int = 0

    @property
    def ok(self) -> bool:
        return self.status is Status.OPTIMAL


# ------------------------------------------------------------ reduced space

class _Reduced:
    """The problem over free variables and slacks, with optional scaling.

    Internal vector z = [x_free, s]; constraints C(z) = [c(x); g(x) + s].
    """

    def __init__(self, p: NlpProblem, opts: SolverOptions):
        self.p = p
        fixed = p.lower == p.upper
        self.free = np.flatnonzero(~fixed)
        self.x_fixed = np.where(fixed, p.lower, 0.0)
        self.nx = len(self.free)
        x0 = np.clip(p.x0, p.lower, p.upper)
        x0[fixed] = p.lower[fixed]
        self.x0 = x0
        ce = np.asarray(p.eq(x0), dtype=float)
        ci = np.asarray(p.ineq(x0), dtype=float)
        self.me, self.mi = len(ce), len(ci)
        self.m = self.me + self.mi
        self.n = self.nx + self.mi

        self.obj_scale = 1.0
        self.row_scale = np.ones(self.m)
        if opts.auto_scale:
            g = p.gradient(x0)[self.free]
            gmax = np.max(np.abs(g), initial=0.0)
            if gmax > 100.0:
                self.obj_scale = 100.0 / gmax
            J = self._raw_jac(x0)
            if self.m:
                rmax = abs(J).max(axis=1).toarray().ravel()
                self.row_scale = np.where(rmax > 100.0, 100.0 / np.maximum(rmax, 1e-300), 1.0)

        self.lz = np.concatenate([p.lower[self.free], np.zeros(self.mi)])
        self.uz = np.concatenate([p.upper[self.free], np.full(self.mi, np.inf)])
        self.has_l = np.isfinite(self.lz)
        self.has_u = np.isfinite(self.uz)

    def full_x(self, z: Vector) -> Vector:
        x = self.x_fixed.copy()
        x[self.free] = z[: self.nx]
        return x

    def _raw_jac(self, x: Vector) -> sp.csr_matrix:
        Je = self.p.eq_jacobian(x)[:, self.free]
        Ji = self.p.ineq_jacobian(x)[:, self.free]
        return sp.vstack([Je, Ji]).tocsr() if self.m else sp.csr_matrix((0, self.nx))

    def f(self, z: Vector) -> float:
        return self.obj_scale * float(self.p.objective(self.full_x(z)))

    def grad(self, z: Vector) -> Vector:
        g = np.zeros(self.n)
        g[: self.nx] = self.obj_scale * np.asarray(self.p.gradient(self.full_x(z)))[self.free]
        return g

    def C(self, z: Vector) -> Vector:
        x = self.full_x(z)
        ce = np.asarray(self.p.eq(x), dtype=float)
        ci = np.asarray(self.p.ineq(x), dtype=float) + z[self.nx:]
        return self.row_scale * np.concatenate([ce, ci])

    def J(self, z: Vector) -> sp.csr_matrix:
        Jx = self._raw_jac(self.full_x(z))
        Js = sp.vstack([sp.csr_matrix((self.me, self.mi)), sp.identity(self.mi, format="csr")])
        return (sp.diags(self.row_scale) @ sp.hstack([Jx, Js])).tocsr()

    def W(self, z: Vector, lam: Vector) -> sp.csr_matrix:
        x = self.full_x(z)
        lam_u = self.row_scale * lam
        if self.p.hessian is not None:
            H = sp.csr_matrix(self.p.hessian(x, self.obj_scale, lam_u[: self.me], lam_u[self.me:]))
        else:
            H = sp.csr_matrix(_fd_hessian(self.p, x, self.obj_scale, lam_u[: self.me], lam_u[self.me:]))
        H = H[self.free][:, self.free]
        return sp.block_diag([H, sp.csr_matrix((self.mi, self.mi))]).tocsr()

    def unscaled_violations(self, x: Vector) -> tuple[float, float]:
        ce = np.asarray(self.p.eq(x), dtype=float)
        ci = np.asarray(self.p.ineq(x), dtype=float)
        eqv = float(np.max(np.abs(ce), initial=0.0))
        inv = float(np.max(ci, initial=0.0)) if len(ci) else 0.0
        bnd = float(max(np.max(self.p.lower - x, initial=0.0), np.max(x - self.p.upper, initial=0.0)))
        return eqv, max(inv, bnd)


def _fd_hessian(p: NlpProblem, x: Vector, sigma: float, le: Vector, li: Vector, h: float = 1e-6) -> np.ndarray:
    if p.n > 2000:
        raise ValueError("finite-difference Hessian requested for a large problem; supply hessian=")

    def lag_grad(xx):
        g = sigma * np.asarray(p.gradient(xx), dtype=float)
        if len(le):
            g = g + p.eq_jacobian(xx).T @ le
        if len(li):
            g = g + p.ineq_jacobian(xx).T @ li
        return g

    H = np.empty((p.n, p.n))
    for k in range(p.n):
        step = h * max(1.0, abs(x[k]))
        xp, xm = x.copy(), x.copy()
        xp[k] += step
        xm[k] -= step
        H[:, k] = (lag_grad(xp) - lag_grad(xm)) / (2 * step)
    return 0.5 * (H + H.T)


# -------------------------------------------------------------- IPM driver

_KAPPA_EPS = 10.0
_KAPPA_MU = 0.2
_THETA_MU = 1.5
_ETA_ARMIJO = 1e-4
_S_MAX = 100.0
# filter line search constants
_GAMMA_THETA = 1e-5
_GAMMA_PHI = 1e-8
_DELTA_SW = 1.0
_S_THETA = 1.1
_S_PHI = 2.3
# phase one calls a problem infeasible when its least violation exceeds this many tolerances
_PHASE_ONE_FACTOR = 1e3


def solve_nlp(p: NlpProblem, opts: SolverOptions | None = None) -> SolveReport:
    """Solve ``p``; failures are reported through the status, never raised."""
    opts = opts or SolverOptions()
    t0 = time.perf_counter()
    if opts.method == "auglag":
        rep = _solve_auglag(p, opts)
    else:
        rep = _solve_ipm(p, opts)
        if opts.fallback and rep.status in (Status.NUMERICAL_FAILURE, Status.MAX_ITERATIONS):
            rep = _recover(p, opts, rep)
    rep.seconds = time.perf_counter() - t0
    return rep


def _recover(p: NlpProblem, opts: SolverOptions, failed: SolveReport) -> SolveReport:
    """Phase one after a failed solve: certify infeasibility or restart from a feasible point."""
    x1, viol, ph = _phase_one(p, opts, failed.x)
    tol = _PHASE_ONE_FACTOR * max(opts.tol_eq, opts.tol_ineq)
    if ph.status is Status.OPTIMAL and viol > tol:
        log.info("phase one: least constraint violation %.3e, problem is infeasible", viol)
        return replace(failed, status=Status.INFEASIBLE, iterations=failed.iterations + ph.iterations,
                       message=f"least attainable constraint violation {viol:.3e}")
    if viol <= tol:
        log.info("phase one found a feasible point; restarting")
        rep = _solve_ipm(replace(p, x0=x1), opts)
        rep.iterations += failed.iterations + ph.iterations
        if rep.status is Status.OPTIMAL:
            return rep
        failed = rep
    log.info("interior point failed (%s); retrying with augmented Lagrangian", failed.message)
    alt = _solve_auglag(p, opts)
    if _STATUS_RANK[alt.status] < _STATUS_RANK[failed.status]:
        alt.iterations += failed.iterations
        return alt
    return failed


def _phase_one(p: NlpProblem, opts: SolverOptions, x0: Vector) -> tuple[Vector, float, SolveReport]:
    """Minimize the l1 constraint violation with elastic variables.

    Returns the x part of the solution, its largest unscaled violation and
    the solve report of the auxiliary problem.
    """
    n = p.n
    x0 = np.clip(np.asarray(x0, dtype=float), p.lower, p.upper)
    c0, g0 = np.asarray(p.eq(x0), dtype=float), np.asarray(p.ineq(x0), dtype=float)
    me, mi = len(c0), len(g0)
    ne = 2 * me + mi
    ip, ineg, it_ = slice(n, n + me), slice(n + me, n + 2 * me), slice(n + 2 * me, n + ne)
    Ie, Ii = sp.identity(me, format="csr"), sp.identity(mi, format="csr")

    def split(z):
        return z[:n], z[ip], z[ineg], z[it_]

    def grad(z):
        g = np.zeros(n + ne)
        g[n:] = 1.0
        return g

    def eq(z):
        x, pos, neg, _ = split(z)
        return np.asarray(p.eq(x)) - pos + neg

    def eq_jac(z):
        return sp.hstack([p.eq_jacobian(z[:n]), -Ie, Ie, sp.csr_matrix((me, mi))]).tocsr()

    def ineq(z):
        x, _, _, t = split(z)
        return np.asarray(p.ineq(x)) - t

    def ineq_jac(z):
        return sp.hstack([p.ineq_jacobian(z[:n]), sp.csr_matrix((mi, 2 * me)), -Ii]).tocsr()

    hess = None
    if p.hessian is not None:
        def hess(z, sigma, le, li):
            H = sp.csr_matrix(p.hessian(z[:n], 0.0, le, li))
            return sp.block_diag([H, sp.csr_matrix((ne, ne))], format="csr")

    z0 = np.concatenate([x0, np.maximum(c0, 0.0), np.maximum(-c0, 0.0), np.maximum(g0, 0.0)])
    q = NlpProblem(n=n + ne, objective=lambda z: float(np.sum(z[n:])), gradient=grad,
                   lower=np.concatenate([p.lower, np.zeros(ne)]), upper=np.concatenate([p.upper, np.full(ne, np.inf)]),
                   x0=z0, eq=eq, eq_jac=eq_jac, ineq=ineq, ineq_jac=ineq_jac, hessian=hess)
    rep = _solve_ipm(q, replace(opts, verbose=False))
    x = rep.x[:n]
    viol = max(float(np.max(np.abs(p.eq(x)), initial=0.0)), float(np.max(p.ineq(x), initial=0.0)))
    return x, viol, rep


def _push_inside(z: Vector, lz: Vector, uz: Vector, push: float) -> Vector:
    z = z.copy()
    width = uz - lz
    pl = np.where(np.isfinite(lz), np.minimum(push * np.maximum(1.0, np.abs(lz)), 0.5 * np.where(np.isfinite(width), width, np.inf)), 0.0)
    pu = np.where(np.isfinite(uz), np.minimum(push * np.maximum(1.0, np.abs(uz)), 0.5 * np.where(np.isfinite(width), width, np.inf)), 0.0)
    lo = np.where(np.isfinite(lz), lz + pl, -np.inf)
    hi = np.where(np.isfinite(uz), uz - pu, np.inf)
    return np.minimum(np.maximum(z, lo), hi)


def _frac_to_boundary(v: Vector, dv: Vector, tau: float) -> float:
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-tau * v[neg] / dv[neg])))


def _factor(K: sp.spmatrix):
    try:
        lu = spla.splu(K.tocsc(), permc_spec="COLAMD", diag_pivot_thresh=0.1)
    except RuntimeError:
        return None
    return lu


def _solve_ipm(p: NlpProblem, opts: SolverOptions) -> SolveReport:
    R = _Reduced(p, opts)
    n, m = R.n, R.m
    lz, uz, hl, hu = R.lz, R.uz, R.has_l, R.has_u
    mu_min = opts.mu_min if opts.mu_min is not None else min(opts.tol, opts.tol_compl) / 10.0

    z = np.concatenate([R.x0[R.free], np.zeros(R.mi)])
    if R.mi:
        gi = np.asarray(p.ineq(R.x0), dtype=float)
        z[R.nx:] = np.maximum(-gi, 0.0)
    z = _push_inside(z, lz, uz, opts.bound_push)

    mu = opts.mu_init
    zl = np.where(hl, 1.0, 0.0)
    zu = np.where(hu, 1.0, 0.0)
    dl = np.where(hl, z - lz, 1.0)
    du = np.where(hu, uz - z, 1.0)

    fz, gz, Cz, Jz = R.f(z), R.grad(z), R.C(z), R.J(z)
    lam = np.zeros(m)
    if m:
        Kls = sp.bmat([[sp.identity(n), Jz.T], [Jz, None]]).tocsc()
        lu = _factor(Kls)
        if lu is not None:
            sol = lu.solve(np.concatenate([-(gz - zl + zu), np.zeros(m)]))
            if np.all(np.isfinite(sol)) and np.max(np.abs(sol[n:]), initial=0.0) <= 1e3:
                lam = sol[n:]

    nu = 1.0
    delta_w_last = 0.0
    # proximal floor raised after heavy backtracking, which damps steps
    # along directions where constraint curvature spoils the linear model
    dw_floor = 0.0
    filt: list[tuple[float, float]] = []
    filter_mu = None
    theta_max = theta_min = None
    merit_pairs: list[tuple[float, float]] = []
    iterates: list[Vector] = []
    status = Status.MAX_ITERATIONS
    message = "iteration limit reached"
    best_theta_window: list[float] = []
    it = 0
    kkt = np.inf

    def errors(mu_val):
        dual = gz + (Jz.T @ lam if m else 0.0) - zl + zu
        sd = max(_S_MAX, (np.abs(lam).sum() + zl.sum() + zu.sum()) / max(1, m + 2 * n)) / _S_MAX
        sc = max(_S_MAX, (zl.sum() + zu.sum()) / max(1, 2 * n)) / _S_MAX
        compl = max(np.max(np.abs(np.where(hl, dl * zl - mu_val, 0.0)), initial=0.0),
                    np.max(np.abs(np.where(hu, du * zu - mu_val, 0.0)), initial=0.0))
        e_dual = float(np.max(np.abs(dual), initial=0.0)) / sd
        e_prim = float(np.max(np.abs(Cz), initial=0.0))
        return e_dual, e_prim, compl / sc

    while True:
        e_dual, e_prim, e_comp = errors(0.0)
        kkt = max(e_dual, e_prim, e_comp)
        x_full = R.full_x(z)
        if e_dual <= opts.tol_kkt and e_comp <= opts.tol_compl and e_prim <= opts.tol:
            eqv, inv = R.unscaled_violations(x_full)
            if eqv <= opts.tol_eq and inv <= opts.tol_ineq:
                status, message = Status.OPTIMAL, "converged"
                break
        if it >= opts.max_iter:
            break
        if not np.isfinite(kkt) or np.max(np.abs(lam), initial=0.0) > 1e14:
            status, message = Status.INFEASIBLE, "multipliers diverged"
            break

        # barrier update (possibly several times in a row)
        while mu > mu_min:
            ed, ep, ec = errors(mu)
            if max(ed, ep, ec) > _KAPPA_EPS * mu:
                break
            mu = max(mu_min, min(_KAPPA_MU * mu, mu**_THETA_MU))
        tau = max(0.99, 1.0 - mu)

        Sig = np.where(hl, zl / dl, 0.0) + np.where(hu, zu / du, 0.0)
        grad_phi = gz - np.where(hl, mu / dl, 0.0) + np.where(hu, mu / du, 0.0)
        W = R.W(z, lam)
        WS = (W + sp.diags(Sig)).tocsr()
        rhs = -np.concatenate([grad_phi + (Jz.T @ lam if m else 0.0), Cz])

        step = None
        delta_w = dw_floor
        delta_c = 0.0
        for attempt in range(12):
            Kmat = sp.bmat([[WS + delta_w * sp.identity(n), Jz.T if m else None],
                            [Jz if m else None, -delta_c * sp.identity(m) if m else None]]) if m else WS + delta_w * sp.identity(n)
            lu = _factor(Kmat)
            if lu is None:
                if delta_c == 0.0 and m:
                    delta_c = 1e-8 * mu**0.25
                else:
                    delta_w = 1e-4 if delta_w == 0.0 else 10.0 * delta_w
                continue
            sol = lu.solve(rhs)
            if not np.all(np.isfinite(sol)):
                delta_w = 1e-4 if delta_w == 0.0 else 10.0 * delta_w
                continue
            dz = sol[:n]
            curv = float(dz @ (WS @ dz)) + delta_w * float(dz @ dz)
            if curv >= 1e-11 * float(dz @ dz):
                step = (sol, lu, Kmat)
                break
            if delta_w == 0.0:
                delta_w = 1e-4 if delta_w_last == 0.0 else max(1e-20, delta_w_last / 3.0)
            else:
                delta_w *= 8.0 if delta_w_last else 100.0
            if delta_w > 1e40:
                break
        if step is None:
            status, message = Status.NUMERICAL_FAILURE, "KKT system could not be factorized"
            break
        if delta_w:
            delta_w_last = delta_w
        sol, lu, Kmat = step
        dz, dlam = sol[:n], sol[n:]
        dzl = np.where(hl, (mu - zl * dl) / dl - Sig_part(zl, dl, hl) * dz, 0.0)
        dzu = np.where(hu, (mu - zu * du) / du + Sig_part(zu, du, hu) * dz, 0.0)

        a_pr = _frac_to_boundary(np.concatenate([dl[hl], du[hu]]), np.concatenate([dz[hl], -dz[hu]]), tau)
        a_du = _frac_to_boundary(np.concatenate([zl[hl], zu[hu]]), np.concatenate([dzl[hl], dzu[hu]]), tau)

        # merit and penalty update
        c1 = float(np.abs(Cz).sum())
        curv_model = max(0.0, float(dz @ (WS @ dz)))
        dphi = float(grad_phi @ dz)
        if c1 > 0:
            nu_trial = max((dphi + 0.5 * curv_model) / (0.9 * c1),
                           float(np.max(np.abs(lam + dlam), initial=0.0)))
            if nu_trial > nu:
                nu = max(1.5 * nu, nu_trial + 1.0)
            elif nu > 10.0 * (nu_trial + 1.0):
                # a stale large penalty turns curvature error into rejections
                nu = 2.0 * (nu_trial + 1.0)

        def barrier(zz, fval):
            bar = 0.0
            # a trial point on a bound gets an infinite barrier and is rejected
            with np.errstate(divide="ignore"):
                if np.any(hl):
                    bar -= np.sum(np.log(zz[hl] - lz[hl]))
                if np.any(hu):
                    bar -= np.sum(np.log(uz[hu] - zz[hu]))
            return fval + mu * bar

        def merit(zz, fval, Cval):
            return barrier(zz, fval) + nu * float(np.abs(Cval).sum())

        use_filter = opts.line_search == "filter"
        if use_filter:
            if mu != filter_mu:
                # the barrier objective changed, so old entries no longer apply
                filt.clear()
                filter_mu = mu
            bphi0 = barrier(z, fz)
            if theta_max is None:
                theta_max = 1e4 * max(1.0, c1)
                theta_min = 1e-4 * max(1.0, c1)

        def acceptable(zt_, ft_, Ct_, alpha_):
            """Acceptance test for a trial point; returns (ok, augment_filter)."""
            if not use_filter:
                ph = merit(zt_, ft_, Ct_)
                return bool(np.isfinite(ph) and ph <= phi0 + _ETA_ARMIJO * alpha_ * D), False
            th = float(np.abs(Ct_).sum())
            bp = barrier(zt_, ft_)
            if not np.isfinite(bp) or th > theta_max:
                return False, False
            for th_j, ph_j in filt:
                if th >= th_j and bp >= ph_j:
                    return False, False
            sw = dphi < 0 and alpha_ * (-dphi) ** _S_PHI > _DELTA_SW * c1 ** _S_THETA
            if sw and c1 <= theta_min:
                return bool(bp <= bphi0 + _ETA_ARMIJO * alpha_ * dphi), False
            ok = th <= (1.0 - _GAMMA_THETA) * c1 or bp <= bphi0 - _GAMMA_PHI * c1
            return bool(ok), True

        phi0 = merit(z, fz, Cz)
        D = dphi - nu * c1
        alpha = a_pr
        accepted = False
        augment = False
        soc_done = False
        phit = phi0
        for _ in range(40):
            zt = z + alpha * dz
            ft, Ct = R.f(zt), R.C(zt)
            ok, augment = acceptable(zt, ft, Ct, alpha)
            if ok:
                phit = merit(zt, ft, Ct)
                accepted = True
                break
            if not soc_done and alpha == a_pr and m and (not use_filter or float(np.abs(Ct).sum()) >= c1):
                # second-order correction against the Maratos effect
                soc_done = True
                rhs_soc = rhs.copy()
                rhs_soc[n:] = -(alpha * Cz + Ct)
                sol_soc = lu.solve(rhs_soc)
                dz_soc = sol_soc[:n]
                a_soc = _frac_to_boundary(np.concatenate([dl[hl], du[hu]]), np.concatenate([dz_soc[hl], -dz_soc[hu]]), tau)
                zs = z + a_soc * dz_soc
                fs, Cs = R.f(zs), R.C(zs)
                ok, augment = acceptable(zs, fs, Cs, alpha)
                if ok:
                    zt, ft, Ct, phit = zs, fs, Cs, merit(zs, fs, Cs)
                    dz, dlam = dz_soc, sol_soc[n:]
                    dzl = np.where(hl, (mu - zl * dl) / dl - Sig_part(zl, dl, hl) * dz, 0.0)
                    dzu = np.where(hu, (mu - zu * du) / du + Sig_part(zu, du, hu) * dz, 0.0)
                    a_du = _frac_to_boundary(np.concatenate([zl[hl], zu[hu]]), np.concatenate([dzl[hl], dzu[hu]]), tau)
                    alpha = a_soc
                    accepted = True
                    break
            alpha *= 0.5
            if alpha < 1e-14:
                break
        if accepted and use_filter and augment:
            filt.append(((1.0 - _GAMMA_THETA) * c1, bphi0 - _GAMMA_PHI * c1))

        if not accepted:
            # tiny steps are a sign of a stationary point of infeasibility
            # when the constraints cannot be reduced any further
            if e_prim > opts.tol and float(np.max(np.abs(Jz.T @ Cz), initial=0.0)) <= 1e-6 * max(1.0, c1):
                status, message = Status.INFEASIBLE, "converged to a point of local infeasibility"
            elif mu > mu_min:
                mu = max(mu_min, _KAPPA_MU * mu)
                it += 1
                continue
            else:
                status, message = Status.NUMERICAL_FAILURE, "line search failed"
            break

        merit_pairs.append((phi0, phit))
        if alpha < 1e-2 * a_pr:
            dw_floor = min(1e6, max(1e-6, 10.0 * dw_floor))
        elif alpha >= a_pr and dw_floor:
            dw_floor = dw_floor / 10.0 if dw_floor > 1e-9 else 0.0
        z = zt
        lam = lam + alpha * dlam
        zl = zl + a_du * dzl
        zu = zu + a_du * dzu
        dl = np.where(hl, z - lz, 1.0)
        du = np.where(hu, uz - z, 1.0)
        # keep the bound multipliers close to the primal-dual centre
        zl = np.where(hl, np.clip(zl, mu / (opts.kappa_sigma * dl), opts.kappa_sigma * mu / dl), 0.0)
        zu = np.where(hu, np.clip(zu, mu / (opts.kappa_sigma * du), opts.kappa_sigma * mu / du), 0.0)
        fz, gz, Cz, Jz = ft, R.grad(z), Ct, R.J(z)
        it += 1
        iterates.append(R.full_x(z))
        if opts.verbose:
            log.info("it %3d  f=%.8e  prim=%.2e  dual=%.2e  mu=%.1e  a=%.2e/%.2e  dw=%.1e  nu=%.1e",
                     it, fz / R.obj_scale, e_prim, e_dual, mu, alpha, a_pr, delta_w, nu)

        theta = float(np.max(np.abs(Cz), initial=0.0))
        best_theta_window.append(theta)
        if len(best_theta_window) > 60:
            best_theta_window.pop(0)
            if theta > 1e3 * opts.tol and min(best_theta_window[-30:]) > 0.99 * min(best_theta_window[:30]):
                status, message = Status.INFEASIBLE, "constraint violation stopped decreasing"
                break

    x = R.full_x(z)
    eqv, inv = R.unscaled_violations(x)
    lam_u = R.row_scale * lam / R.obj_scale
    return SolveReport(status=status, x=x, objective=float(p.objective(x)), eq_violation=eqv, ineq_violation=inv,
                       kkt_residual=float(kkt), iterations=it, seconds=0.0, lam_eq=lam_u[: R.me],
                       lam_ineq=lam_u[R.me:], method="ipm", message=message, merit_pairs=merit_pairs,
                       iterates=iterates)


def Sig_part(zb: Vector, d: Vector, has: Vector) -> Vector:
    return np.where(has, zb / d, 0.0)


# ------------------------------------------------------ augmented Lagrangian

def _solve_auglag(p: NlpProblem, opts: SolverOptions) -> SolveReport:
    """Bound-constrained augmented Lagrangian with L-BFGS-B subproblems."""
    R = _Reduced(p, opts)
    n, m = R.n, R.m
    z = np.concatenate([R.x0[R.free], np.zeros(R.mi)])
    if R.mi:
        z[R.nx:] = np.maximum(-np.asarray(p.ineq(R.x0), dtype=float), 0.0)
    bounds = list(zip(np.where(R.has_l, R.lz, None), np.where(R.has_u, R.uz, None)))
    lam = np.zeros(m)
    rho = 10.0
    theta_prev = np.inf
    total_it = 0
    status = Status.MAX_ITERATIONS
    for outer in range(60):
        def fun(zz):
            C = R.C(zz)
            val = R.f(zz) + lam @ C + 0.5 * rho * C @ C
            g = R.grad(zz) + (R.J(zz).T @ (lam + rho * C) if m else 0.0)
            return val, g

        res = scipy.optimize.minimize(fun, z, jac=True, method="L-BFGS-B", bounds=bounds,
                                      options={"maxiter": 2000, "ftol": 1e-15, "gtol": 1e-10})
        total_it += int(res.nit)
        z = res.x
        C = R.C(z)
        theta = float(np.max(np.abs(C), initial=0.0))
        lam = lam + rho * C
        g = R.grad(z) + (R.J(z).T @ lam if m else 0.0)
        proj = np.clip(z - g, np.where(R.has_l, R.lz, -np.inf), np.where(R.has_u, R.uz, np.inf)) - z
        kkt = max(theta, float(np.max(np.abs(proj), initial=0.0)))
        eqv, inv = R.unscaled_violations(R.full_x(z))
        if kkt <= opts.tol and eqv <= opts.tol_eq and inv <= opts.tol_ineq:
            status = Status.OPTIMAL
            break
        if total_it >= 50 * opts.max_iter:
            break
        if theta > 0.25 * theta_prev:
            rho *= 10.0
        if rho > 1e12:
            status = Status.INFEASIBLE if theta > opts.tol_eq else Status.NUMERICAL_FAILURE
            break
        theta_prev = theta
    x = R.full_x(z)
    eqv, inv = R.unscaled_violations(x)
    lam_u = R.row_scale * lam / R.obj_scale
    return SolveReport(status=status, x=x, objective=float(p.objective(x)), eq_violation=eqv, ineq_violation=inv,
                       kkt_residual=float(kkt), iterations=total_it, seconds=0.0, lam_eq=lam_u[: R.me],
                       lam_ineq=lam_u[R.me:], method="auglag", message=f"{outer + 1} outer iterations")


# ---------------------------------------------------------------- utilities

def solve_multistart(p: NlpProblem, starts: Sequence[Vector], opts: SolverOptions | None = None,
                     rel_tie: float = 1e-9) -> tuple[SolveReport, list[SolveReport]]:
    """Solve from each start and keep the best report.

    Ranking: solver status, then objective, with objectives closer than
    ``rel_tie`` (relative) treated as equal and separated by KKT residual
    and finally by start order.
    """
    opts = opts or SolverOptions()
    reports = []
    for k, x0 in enumerate(starts):
        q = NlpProblem(**{**p.__dict__, "x0": np.asarray(x0, dtype=float)})
        # the slow fallback only matters while no start has converged
        done = any(r.status is Status.OPTIMAL for r in reports)
        rep = solve_nlp(q, replace(opts, fallback=False) if done else opts)
        rep.start_index = k
        reports.append(rep)
    best = reports[0]
    for rep in reports[1:]:
        if _better(rep, best, rel_tie):
            best = rep
    return best, reports


def _better(a: SolveReport, b: SolveReport, rel_tie: float) -> bool:
    ra, rb = _STATUS_RANK[a.status], _STATUS_RANK[b.status]
    if ra != rb:
        return ra < rb
    gap = a.objective - b.objective
    if abs(gap) > rel_tie * max(1.0, abs(a.objective), abs(b.objective)):
        return gap < 0
    if a.kkt_residual != b.kkt_residual:
        return a.kkt_residual < b.kkt_residual
    return a.start_index < b.start_index


@dataclass
class GradientCheck:
    objective: float
    eq: float
    ineq: float
    worst: str

    @property
    def max_error(self) -> float:
        return max(self.objective, self.eq, self.ineq)


def check_gradients(p: NlpProblem, x: Vector, h: float = 1e-6, max_columns: int | None = 200,
                    n_directions: int = 8, seed: int = 0) -> GradientCheck:
    """Central differences against the analytic derivatives.

    Errors are |analytic - fd| / max(1, |analytic|, |fd|). For problems with
    more than ``max_columns`` variables a random column subset is checked
    entry by entry and the full Jacobians are probed along random unit
    directions.
    """
    x = np.asarray(x, dtype=float)
    rng = np.random.default_rng(seed)
    cols = np.arange(p.n)
    if max_columns is not None and p.n > max_columns:
        cols = np.sort(rng.choice(p.n, size=max_columns, replace=False))
    g = np.asarray(p.gradient(x))
    Je = p.eq_jacobian(x).tocsc()
    Ji = p.ineq_jacobian(x).tocsc()
    worst = {"objective": (0.0, ""), "eq": (0.0, ""), "ineq": (0.0, "")}

    def rel(a, b):
        return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))

    def note(key, errs, label):
        if errs.size and errs.max() > worst[key][0]:
            worst[key] = (float(errs.max()), label)

    for k in cols:
        step = h * max(1.0, abs(x[k]))
        xp, xm = x.copy(), x.copy()
        xp[k] += step
        xm[k] -= step
        note("objective", rel(np.array([g[k]]), np.array([(p.objective(xp) - p.objective(xm)) / (2 * step)])), p.label(k))
        if Je.shape[0]:
            fd = (np.asarray(p.eq(xp)) - np.asarray(p.eq(xm))) / (2 * step)
            note("eq", rel(Je[:, k].toarray().ravel(), fd), p.label(k))
        if Ji.shape[0]:
            fd = (np.asarray(p.ineq(xp)) - np.asarray(p.ineq(xm))) / (2 * step)
            note("ineq", rel(Ji[:, k].toarray().ravel(), fd), p.label(k))

    if len(cols) < p.n:
        for _ in range(n_directions):
            d = rng.standard_normal(p.n)
            d /= np.linalg.norm(d)
            step = h * max(1.0, float(np.max(np.abs(x))))
            xp, xm = x + step * d, x - step * d
            note("objective", rel(np.array([g @ d]), np.array([(p.objective(xp) - p.objective(xm)) / (2 * step)])), "direction")
            if Je.shape[0]:
                note("eq", rel(Je @ d, (np.asarray(p.eq(xp)) - np.asarray(p.eq(xm))) / (2 * step)), "direction")
            if Ji.shape[0]:
                note("ineq", rel(Ji @ d, (np.asarray(p.ineq(xp)) - np.asarray(p.ineq(xm))) / (2 * step)), "direction")

    label = max(worst.items(), key=lambda kv: kv[1][0])
    return GradientCheck(worst["objective"][0], worst["eq"][0], worst["ineq"][0], f"{label[0]}:{label[1][1]}")
