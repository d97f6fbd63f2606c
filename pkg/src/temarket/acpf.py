"""AC power flow in rectangular coordinates.

The ``*_pu`` kernels work on per-unit voltage vectors and are shared with
the market optimizer. The public functions take and return kW / kvar.

With a = G e - B f and c = G f + B e, the injected power at each bus is
P = e*a + f*c and Q = f*a - e*c.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .network import AdmittanceTable, Network


class PowerFlowError(RuntimeError):
    pass


class Diverged(PowerFlowError):
    pass


class SingularJacobian(PowerFlowError):
    pass


class DimensionMismatch(ValueError):
    pass


@dataclass
class VoltageState:
    e: np.ndarray
    f: np.ndarray

    @classmethod
    def flat(cls, n: int) -> "VoltageState":
        return cls(np.ones(n), np.zeros(n))

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.e, self.f)


@dataclass
class InjectionSet:
    """Net injections (generation minus demand) per bus, kW and kvar."""

    P: np.ndarray
    Q: np.ndarray

    @classmethod
    def from_loads(cls, net: Network, scale: float = 1.0) -> "InjectionSet":
        return cls(-scale * net.load_kw(), -scale * net.load_kvar())


@dataclass
class FlowResult:
    """Directed branch flows; ``*_from`` leaves the from bus, ``*_to`` leaves the to bus."""

    P_from: np.ndarray
    Q_from: np.ndarray
    P_to: np.ndarray
    Q_to: np.ndarray
    current: np.ndarray
    bus_loss: np.ndarray

    @property
    def branch_loss(self) -> np.ndarray:
        return self.P_from + self.P_to

    @property
    def total_loss(self) -> float:
        return float(self.branch_loss.sum())


@dataclass
class NewtonReport:
    iterations: int
    mismatch: float
    history: list[float] = field(default_factory=list)
    seconds: float = 0.0


@dataclass(frozen=True)
class LimitBounds:
    """Operating limits for :func:`check_limits`; power bounds in kW / kvar."""

    v_min: float = 0.95
    v_max: float = 1.05
    p_min: np.ndarray | None = None
    p_max: np.ndarray | None = None
    q_min: np.ndarray | None = None
    q_max: np.ndarray | None = None


# ---------------------------------------------------------------- pu kernels

def injections_pu(adm: AdmittanceTable, e: np.ndarray, f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = adm.G @ e - adm.B @ f
    c = adm.G @ f + adm.B @ e
    return e * a + f * c, f * a - e * c


def injection_jacobian_pu(adm: AdmittanceTable, e: np.ndarray, f: np.ndarray) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Jacobians of (P, Q) w.r.t. the stacked voltage vector [e, f]."""
    G, B = adm.G, adm.B
    a = G @ e - B @ f
    c = G @ f + B @ e
    De, Df = sp.diags(e), sp.diags(f)
    dP_de = sp.diags(a) + De @ G + Df @ B
    dP_df = sp.diags(c) - De @ B + Df @ G
    dQ_de = -sp.diags(c) + Df @ G - De @ B
    dQ_df = sp.diags(a) - Df @ B - De @ G
    return sp.hstack([dP_de, dP_df]).tocsr(), sp.hstack([dQ_de, dQ_df]).tocsr()


def injection_hessian_pu(adm: AdmittanceTable, wP: np.ndarray, wQ: np.ndarray) -> sp.csr_matrix:
    """Hessian of sum(wP*P + wQ*Q) w.r.t. [e, f]; constant in the voltages."""
    G = adm.G.tocoo()
    B = adm.B.tocoo()
    i, j = G.row, G.col
    Hee = sp.csr_matrix((G.data * (wP[i] + wP[j]) - B.data * (wQ[i] + wQ[j]), (i, j)), shape=adm.G.shape)
    Hef = sp.csr_matrix((B.data * (wP[j] - wP[i]) + G.data * (wQ[j] - wQ[i]), (i, j)), shape=adm.G.shape)
    return sp.bmat([[Hee, Hef], [Hef.T, Hee]]).tocsr()


def branch_loss_pu(adm: AdmittanceTable, e: np.ndarray, f: np.ndarray) -> np.ndarray:
    de = e[adm.from_idx] - e[adm.to_idx]
    df = f[adm.from_idx] - f[adm.to_idx]
    return adm.g * (de * de + df * df)


def _half_incidence(adm: AdmittanceTable, n_bus: int) -> sp.csr_matrix:
    nl = len(adm.g)
    rows = np.concatenate([adm.from_idx, adm.to_idx])
    cols = np.concatenate([np.arange(nl), np.arange(nl)])
    return sp.csr_matrix((np.full(2 * nl, 0.5), (rows, cols)), shape=(n_bus, nl))


def _signed_incidence(adm: AdmittanceTable, n_bus: int) -> sp.csr_matrix:
    nl = len(adm.g)
    rows = np.concatenate([np.arange(nl), np.arange(nl)])
    cols = np.concatenate([adm.from_idx, adm.to_idx])
    vals = np.concatenate([np.ones(nl), -np.ones(nl)])
    return sp.csr_matrix((vals, (rows, cols)), shape=(nl, n_bus))


def bus_loss_pu(adm: AdmittanceTable, e: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Each branch's real loss split evenly between its two end buses."""
    return _half_incidence(adm, len(e)) @ branch_loss_pu(adm, e, f)


def bus_loss_jacobian_pu(adm: AdmittanceTable, e: np.ndarray, f: np.ndarray) -> sp.csr_matrix:
    n = len(e)
    A = _signed_incidence(adm, n)
    H = _half_incidence(adm, n)
    de, df = A @ e, A @ f
    Je = H @ sp.diags(2 * adm.g * de) @ A
    Jf = H @ sp.diags(2 * adm.g * df) @ A
    return sp.hstack([Je, Jf]).tocsr()


def bus_loss_hessian_pu(adm: AdmittanceTable, weights: np.ndarray) -> sp.csr_matrix:
    """Hessian of sum(weights * bus_loss) w.r.t. [e, f]."""
    n = len(weights)
    A = _signed_incidence(adm, n)
    omega = 0.5 * (weights[adm.from_idx] + weights[adm.to_idx])
    block = (A.T @ sp.diags(2 * omega * adm.g) @ A).tocsr()
    return sp.block_diag([block, block]).tocsr()


# ---------------------------------------------------------------- public API

def _check_dims(net: Network, *arrays: np.ndarray) -> None:
    for arr in arrays:
        if np.shape(arr) != (net.n_bus,):
            raise DimensionMismatch(f"expected length {net.n_bus}, got shape {np.shape(arr)}")


def pf_residuals(net: Network, adm: AdmittanceTable, v: VoltageState, inj: InjectionSet) -> np.ndarray:
    """Specified minus computed injections, stacked [P (kW); Q (kvar)]."""
    _check_dims(net, v.e, v.f, inj.P, inj.Q)
    P, Q = injections_pu(adm, v.e, v.f)
    K = net.kw_per_pu
    return np.concatenate([inj.P - K * P, inj.Q - K * Q])


def pf_jacobian(net: Network, adm: AdmittanceTable, v: VoltageState) -> sp.csr_matrix:
    """Derivative of :func:`pf_residuals` w.r.t. [e, f] (kW or kvar per pu)."""
    _check_dims(net, v.e, v.f)
    JP, JQ = injection_jacobian_pu(adm, v.e, v.f)
    return (-net.kw_per_pu * sp.vstack([JP, JQ])).tocsr()


def solve_newton_pf(net: Network, adm: AdmittanceTable, inj: InjectionSet, tol: float = 1e-8,
                    max_iter: int = 50, v0: VoltageState | None = None) -> tuple[VoltageState, NewtonReport]:
    """Newton-Raphson with the slack held at 1.0 pu, 0 deg.

    ``tol`` applies to the infinity norm of the per-unit mismatch on
    non-slack buses. A step that raises the mismatch is halved up to six
    times.
    """
    t0 = time.perf_counter()
    _check_dims(net, inj.P, inj.Q)
    n = net.n_bus
    K = net.kw_per_pu
    slack = net.slack_index
    keep = np.array([k for k in range(n) if k != slack])
    cols = np.concatenate([keep, keep + n])
    Psp, Qsp = inj.P / K, inj.Q / K

    v = v0 or VoltageState.flat(n)
    x = np.concatenate([v.e, v.f])
    x[slack], x[n + slack] = 1.0, 0.0

    def mismatch(xx):
        P, Q = injections_pu(adm, xx[:n], xx[n:])
        return np.concatenate([Psp[keep] - P[keep], Qsp[keep] - Q[keep]])

    r = mismatch(x)
    norm = float(np.max(np.abs(r), initial=0.0))
    history = [norm]
    it = 0
    while norm >= tol:
        if it >= max_iter:
            raise Diverged(f"no convergence after {max_iter} iterations (mismatch {norm:.3e} pu)")
        JP, JQ = injection_jacobian_pu(adm, x[:n], x[n:])
        J = sp.vstack([JP[keep], JQ[keep]]).tocsc()[:, cols]
        try:
            dx = spla.spsolve(J.tocsc(), r)
        except RuntimeError as exc:
            raise SingularJacobian(str(exc)) from None
        if not np.all(np.isfinite(dx)):
            raise SingularJacobian("Jacobian is singular at the current iterate")
        step = 1.0
        for _ in range(7):
            trial = x.copy()
            trial[cols] += step * dx
            r_trial = mismatch(trial)
            trial_norm = float(np.max(np.abs(r_trial), initial=0.0))
            if trial_norm < norm or step < 1.0 / 64:
                break
            step *= 0.5
        x, r, norm = trial, r_trial, trial_norm
        it += 1
        history.append(norm)
    report = NewtonReport(iterations=it, mismatch=norm, history=history, seconds=time.perf_counter() - t0)
    return VoltageState(x[:n].copy(), x[n:].copy()), report


def branch_flows(net: Network, adm: AdmittanceTable, v: VoltageState) -> FlowResult:
    """Complex power leaving each end of every branch, S = V * conj(I)."""
    _check_dims(net, v.e, v.f)
    V = v.e + 1j * v.f
    y = adm.g + 1j * adm.b
    Vf, Vt = V[adm.from_idx], V[adm.to_idx]
    I_ft = y * (Vf - Vt)
    S_ft = Vf * np.conj(I_ft)
    S_tf = Vt * np.conj(-I_ft)
    K = net.kw_per_pu
    loss = (S_ft + S_tf).real
    bus = _half_incidence(adm, net.n_bus) @ loss
    return FlowResult(K * S_ft.real, K * S_ft.imag, K * S_tf.real, K * S_tf.imag, np.abs(I_ft), K * bus)


def bus_losses(flows: FlowResult) -> np.ndarray:
    """Per-bus loss share in kW (half of every incident branch's real loss)."""
    return flows.bus_loss


def check_limits(v: VoltageState, inj: InjectionSet | None = None, bounds: LimitBounds = LimitBounds(),
                 bus_ids: list[int] | None = None, tol: float = 1e-9) -> list[str]:
    """One finding per violated limit; empty when everything is within bounds."""
    n = len(v.e)
    ids = bus_ids or list(range(1, n + 1))
    findings = []
    vsq = v.e**2 + v.f**2
    vmag = np.sqrt(vsq)
    for k in range(n):
        if vsq[k] < bounds.v_min**2 - tol:
            findings.append(f"bus {ids[k]}: |V|={vmag[k]:.6f} below {bounds.v_min} by {bounds.v_min - vmag[k]:.6g} pu")
        elif vsq[k] > bounds.v_max**2 + tol:
            findings.append(f"bus {ids[k]}: |V|={vmag[k]:.6f} above {bounds.v_max} by {vmag[k] - bounds.v_max:.6g} pu")
    if inj is not None:
        for name, vals, lo, hi in (("P", inj.P, bounds.p_min, bounds.p_max), ("Q", inj.Q, bounds.q_min, bounds.q_max)):
            for k in range(n):
                if lo is not None and vals[k] < lo[k] - tol:
                    findings.append(f"bus {ids[k]}: {name}={vals[k]:.6g} below {lo[k]:.6g} by {lo[k] - vals[k]:.6g}")
                if hi is not None and vals[k] > hi[k] + tol:
                    findings.append(f"bus {ids[k]}: {name}={vals[k]:.6g} above {hi[k]:.6g} by {vals[k] - hi[k]:.6g}")
    return findings
