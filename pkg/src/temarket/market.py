"""Stage 1 (cost minimization without trading) and stage 2 (profit
maximization with trading) over the whole horizon.

Both stages are single horizon-coupled NLPs in per-unit powers. Bus 1 is
the utility connection. Every other bus is a participant whose net draw
from the network is P_im (negative when exporting) and whose share of the
network loss is P_l.

In stage 2 the utility is settled at its tariff for the pool's net draw
W = sum(P_im + P_l) over participants: it is paid u_b per kWh when W > 0
and pays u_s per kWh when W < 0. Participants pay or receive their own
transaction price on P_im + P_l, and the cash flows of participants and
utility add up to zero at every step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from . import acpf
from .der import BatterySpec, CostBreakdown, DGSpec, EfficiencyConvention, PriceSchedule
from .network import AdmittanceTable, Network, build_admittance
from .nlp import NlpProblem, SolveReport, SolverOptions, Status, solve_multistart

log = logging.getLogger(__name__)

COST_SCALE = 1e-3  # objective is handled in k$
PAY_UNIT = 1e3  # stage-2 payment variables are held in k$
# $ charged per $ of rationality violation; the elastic variable keeps a
# strict interior when the pool surplus at a step is tiny and is driven to
# zero at the optimum because the penalty exceeds the row's multiplier
RATIONALITY_PENALTY = 100.0
GAP_UNIT = 1e-3  # elastic variables are held in tenths of a cent so the interior push stays negligible


class MarketError(RuntimeError):
    pass


class InfeasibleScenario(MarketError):
    pass


class MissingBaseline(MarketError):
    pass


class StageFailed(MarketError):
    def __init__(self, stage: str, report: SolveReport):
        super().__init__(f"{stage}: solver returned {report.status.value} ({report.message})")
        self.stage = stage
        self.report = report


@dataclass(frozen=True)
class BusDevices:
    battery: BatterySpec | None = None
    dg: DGSpec | None = None
    pv: np.ndarray | None = None  # available renewable power per step, kW

    def real_capacity(self) -> float:
        cap = 0.0
        if self.battery is not None:
            cap += max(self.battery.p_charge_max, self.battery.p_discharge_max)
        if self.dg is not None:
            cap += self.dg.p_max
        if self.pv is not None:
            cap += float(np.max(self.pv, initial=0.0))
        return cap


@dataclass
class Scenario:
    """Everything the two market stages need.

    ``load_P``/``load_Q`` have shape (T, n_bus) in kW / kvar and follow the
    network's bus order; ``devices`` is keyed by bus id.
    """

    network: Network
    devices: dict[int, BusDevices]
    load_P: np.ndarray
    load_Q: np.ndarray
    prices: PriceSchedule
    dt: float = 0.5
    v_min: float = 0.95
    v_max: float = 1.05
    q_ratio: float = 0.6
    battery_convention: EfficiencyConvention = EfficiencyConvention.AS_PRINTED
    solver: SolverOptions = field(default_factory=lambda: market_solver_options())
    n_starts: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        self.load_P = np.atleast_2d(np.asarray(self.load_P, dtype=float))
        self.load_Q = np.atleast_2d(np.asarray(self.load_Q, dtype=float))
        T, nb = self.load_P.shape
        if nb != self.network.n_bus or self.load_Q.shape != (T, nb):
            raise MarketError("load arrays must have shape (T, n_bus)")
        if len(self.prices) != T:
            raise MarketError(f"price schedule has {len(self.prices)} steps, loads have {T}")
        if self.dt <= 0:
            raise MarketError("dt must be positive")
        if not 0 < self.v_min < self.v_max:
            raise MarketError("need 0 < v_min < v_max")
        ids = set(self.network.bus_ids)
        for bus, dev in self.devices.items():
            if bus not in ids or bus == 1:
                raise MarketError(f"devices attached to invalid bus {bus}")
            if dev.pv is not None and len(dev.pv) != T:
                raise MarketError(f"bus {bus}: renewable profile length {len(dev.pv)} != {T}")

    @property
    def T(self) -> int:
        return self.load_P.shape[0]


def market_solver_options(**overrides) -> SolverOptions:
    """Tolerances tight enough for the kW- and cent-level market invariants."""
    base = SolverOptions(tol=1e-8, tol_eq=1e-8, tol_ineq=1e-9, tol_kkt=1e-6, tol_compl=1e-10,
                         mu_min=1e-11, max_iter=500)
    return replace(base, **overrides)


@dataclass
class DispatchSolution:
    """Per step (rows) and bus (columns, network order) results in kW / kvar / kWh."""

    stage: str
    P_im: np.ndarray
    P_chg: np.ndarray
    P_dis: np.ndarray
    P_dg: np.ndarray
    P_re: np.ndarray
    Q_g: np.ndarray
    e: np.ndarray
    f: np.ndarray
    P_l: np.ndarray
    E_b: np.ndarray
    slack_P: np.ndarray
    slack_Q: np.ndarray
    costs: CostBreakdown
    report: SolveReport
    reports: list[SolveReport] = field(default_factory=list, repr=False)

    @property
    def P_b(self) -> np.ndarray:
        return self.P_dis - self.P_chg

    @property
    def v_mag(self) -> np.ndarray:
        return np.hypot(self.e, self.f)


@dataclass
class TradeOutcome:
    """Stage-2 prices and cash flows.

    Column 0 (bus 1) holds the utility: its ``delta`` is the tariff
    settlement, its price, costs and profit are NaN.
    """

    price: np.ndarray
    delta: np.ndarray
    C_tilde: np.ndarray
    C_bar_star: np.ndarray
    profit: np.ndarray
    utility_import: np.ndarray


# --------------------------------------------------------------- layout

class _Layout:
    def __init__(self) -> None:
        self.n = 0
        self.names: list[str] = []
        self.lower: list[np.ndarray] = []
        self.upper: list[np.ndarray] = []

    def add(self, name: str, T: int, labels: list[str], lo, hi) -> np.ndarray:
        k = len(labels)
        idx = np.arange(self.n, self.n + T * k).reshape(T, k)
        self.n += T * k
        self.names += [f"{name}[t={t + 1},{lab}]" for t in range(T) for lab in labels]
        self.lower.append(np.broadcast_to(np.asarray(lo, dtype=float), (T, k)).ravel())
        self.upper.append(np.broadcast_to(np.asarray(hi, dtype=float), (T, k)).ravel())
        return idx

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return np.concatenate(self.lower), np.concatenate(self.upper)


class _Triplets:
    def __init__(self) -> None:
        self.r: list[np.ndarray] = []
        self.c: list[np.ndarray] = []
        self.v: list[np.ndarray] = []

    def add(self, rows, cols, vals) -> None:
        rows, cols, vals = np.broadcast_arrays(np.asarray(rows), np.asarray(cols), np.asarray(vals, dtype=float))
        self.r.append(rows.ravel())
        self.c.append(cols.ravel())
        self.v.append(vals.ravel())

    def matrix(self, shape) -> sp.csr_matrix:
        if not self.r:
            return sp.csr_matrix(shape)
        return sp.csr_matrix((np.concatenate(self.v), (np.concatenate(self.r), np.concatenate(self.c))), shape=shape)


@dataclass
class _Baseline:
    cost: np.ndarray  # (T, n_part) C-bar-star in $


class StageModel:
    """NLP callbacks for one market stage.

    ``stage`` is 1 (no trading) or 2 (trading). Stage 2 needs the stage-1
    solution as ``baseline``: its per-bus costs bound each participant's
    trading cost and the sign of its draw fixes who buys and who sells.

    Stage 2 prices each step with one buyer price and one seller price,
    the groups being fixed by the sign of the stage-1 draw; sign rows keep
    every participant on its side. Each participant's payment delta (k$)
    is tied to its group price by pay = price * draw, so the zero-sum and
    rationality rows are linear in delta. A pool surplus floor keeps the
    step's total profit at or above the stage-1 cash-flow imbalance. On
    one-sided steps, where stage 1 had only buyers or only sellers, nothing
    can be traded inside the pool: prices are pinned to the tariff and the
    zero-sum, sign and floor rows are dropped.
    """

    def __init__(self, sc: Scenario, stage: int, baseline: "DispatchSolution | None" = None,
                 commit: np.ndarray | None = None):
        if stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if stage == 2 and baseline is None:
            raise MissingBaseline("stage 2 needs the stage-1 solution")
        self.sc = sc
        self.stage = stage
        net = sc.network
        self.net = net
        self.adm: AdmittanceTable = build_admittance(net)
        self.K = net.kw_per_pu
        self.dt = sc.dt
        T = sc.T
        self.T = T
        nb = net.n_bus
        self.nb = nb
        self.slack = net.slack_index
        self.part = np.array([k for k in range(nb) if k != self.slack])
        npart = len(self.part)
        self.npart = npart
        ids = net.bus_ids
        part_ids = [ids[k] for k in self.part]
        pos_in_part = {bid: p for p, bid in enumerate(part_ids)}
        self.ub = sc.prices.u_b
        self.us = sc.prices.u_s

        dev = sc.devices
        self.bat_buses = [b for b in part_ids if dev.get(b, BusDevices()).battery is not None]
        self.dg_buses = [b for b in part_ids if dev.get(b, BusDevices()).dg is not None]
        self.re_buses = [b for b in part_ids if dev.get(b, BusDevices()).pv is not None]
        self.q_buses = [b for b in part_ids if dev.get(b, BusDevices()).real_capacity() > 0]
        self.bat_p = np.array([pos_in_part[b] for b in self.bat_buses], dtype=int)
        self.dg_p = np.array([pos_in_part[b] for b in self.dg_buses], dtype=int)
        self.re_p = np.array([pos_in_part[b] for b in self.re_buses], dtype=int)
        self.q_p = np.array([pos_in_part[b] for b in self.q_buses], dtype=int)
        self.bats = [dev[b].battery for b in self.bat_buses]
        self.dgs = [dev[b].dg for b in self.dg_buses]
        K = self.K

        L = _Layout()
        bus_lab = [f"bus{b}" for b in ids]
        part_lab = [f"bus{b}" for b in part_ids]
        e_lo = np.full((T, nb), -sc.v_max)
        e_hi = np.full((T, nb), sc.v_max)
        f_lo, f_hi = e_lo.copy(), e_hi.copy()
        e_lo[:, self.slack] = e_hi[:, self.slack] = 1.0
        f_lo[:, self.slack] = f_hi[:, self.slack] = 0.0
        self.ie = L.add("e", T, bus_lab, e_lo, e_hi)
        self.if_ = L.add("f", T, bus_lab, f_lo, f_hi)
        big = 100.0
        if stage == 1:
            self.iimp = L.add("p_import", T, part_lab, 0.0, big)
            self.iexp = L.add("p_export", T, part_lab, 0.0, big)
        else:
            self.ipim = L.add("p_im", T, part_lab, -big, big)
        self.iloss = L.add("p_loss", T, part_lab, -np.inf, np.inf)
        bl = [f"bus{b}" for b in self.bat_buses]
        self.ichg = L.add("p_chg", T, bl, 0.0, [b.p_charge_max / K for b in self.bats] if bl else 0.0)
        self.idis = L.add("p_dis", T, bl, 0.0, [b.p_discharge_max / K for b in self.bats] if bl else 0.0)
        E_lo = np.tile([b.e_min / K for b in self.bats], (T, 1)) if bl else np.zeros((T, 0))
        E_hi = np.tile([b.e_max / K for b in self.bats], (T, 1)) if bl else np.zeros((T, 0))
        if bl:
            E_lo[-1] = np.maximum(E_lo[-1], [b.e_initial / K for b in self.bats])
        self.iE = L.add("energy", T, bl, E_lo, E_hi)
        # DG commitment: None solves the convex relaxation, otherwise a
        # (T, n_dg) mask; committed units run at least on_threshold and
        # the others are held at zero
        self.commit = None if commit is None else np.asarray(commit, dtype=bool).reshape(T, len(self.dgs))
        dg_lo = np.zeros((T, len(self.dgs)))
        dg_hi = np.tile([d.p_max / K for d in self.dgs], (T, 1)) if self.dgs else np.zeros((T, 0))
        if self.commit is not None and self.dgs:
            floor = np.array([max(d.p_min, d.on_threshold) / K for d in self.dgs])
            dg_lo = np.where(self.commit, floor, 0.0)
            dg_hi = np.where(self.commit, dg_hi, 0.0)
        self.idg = L.add("p_dg", T, [f"bus{b}" for b in self.dg_buses], dg_lo, dg_hi)
        re_avail = np.stack([np.asarray(dev[b].pv, dtype=float) for b in self.re_buses], axis=1) / K \
            if self.re_buses else np.zeros((T, 0))
        self.re_avail = re_avail
        self.ire = L.add("p_re", T, [f"bus{b}" for b in self.re_buses], 0.0, re_avail)
        qcap = np.array([sc.q_ratio * dev[b].real_capacity() / K for b in self.q_buses])
        self.iq = L.add("q_g", T, [f"bus{b}" for b in self.q_buses], -qcap if len(qcap) else 0.0,
                        qcap if len(qcap) else 0.0)
        if stage == 2:
            draw1 = (baseline.P_im + baseline.P_l)[:, self.part]
            self.buyer = draw1 >= 0
            all_buy, all_sell = self.buyer.all(axis=1), (~self.buyer).all(axis=1)
            self.t2 = np.flatnonzero(~(all_buy | all_sell))
            self.t1 = np.flatnonzero(all_buy | all_sell)
            self.p_fix = np.where(all_buy, self.ub, self.us)[self.t1]
            # one buyer and one seller price per step; fixed at the tariff on one-sided steps
            plo = np.stack([self.us, self.us], axis=1)
            phi = np.stack([self.ub, self.ub], axis=1)
            plo[self.t1], phi[self.t1] = self.p_fix[:, None], self.p_fix[:, None]
            self.iprice = L.add("group_price", T, ["buyers", "sellers"], plo, phi)
            self.price_col = np.where(self.buyer, self.iprice[:, [0]], self.iprice[:, [1]])
            self.ipay = L.add("payment", T, part_lab, -np.inf, np.inf)
            self.ielastic = L.add("rationality_gap", T, part_lab, 0.0, big)
            self.isurplus = L.add("surplus_gap", T, ["pool"], 0.0, np.where(all_buy | all_sell, 0.0, big)[:, None])
            self.iusup = L.add("utility_supply", T, ["utility"], 0.0, np.where(all_sell, 0.0, big)[:, None])
            self.iuabs = L.add("utility_absorb", T, ["utility"], 0.0, np.where(all_buy, 0.0, big)[:, None])
            self.baseline = baseline_costs(baseline)[:, self.part]
            self.imbalance = cash_flow_imbalance(sc, baseline)
        self.layout = L
        self.n = L.n
        self.lower, self.upper = L.bounds()

        self.PD = sc.load_P[:, self.part] / K
        self.QD = sc.load_Q[:, self.part] / K

        # Ybus pattern shared by G and B
        Y = (abs(self.adm.G) + abs(self.adm.B)).tocoo()
        self.yi, self.yj = Y.row, Y.col
        self.Gv = np.asarray(self.adm.G[self.yi, self.yj]).ravel()
        self.Bv = np.asarray(self.adm.B[self.yi, self.yj]).ravel()
        self.ydiag = self.yi == self.yj
        row_of_bus = np.full(nb, -1)
        row_of_bus[self.part] = np.arange(npart)
        self.row_of_bus = row_of_bus

        # constraint row offsets
        r = 0
        self.r_pfp = np.arange(r, r + T * npart).reshape(T, npart); r += T * npart
        self.r_pfq = np.arange(r, r + T * npart).reshape(T, npart); r += T * npart
        self.r_bal = np.arange(r, r + T * npart).reshape(T, npart); r += T * npart
        self.r_loss = np.arange(r, r + T * npart).reshape(T, npart); r += T * npart
        nbat = len(self.bats)
        self.r_bat = np.arange(r, r + T * nbat).reshape(T, nbat); r += T * nbat
        if stage == 2:
            self.r_settle = np.arange(r, r + T); r += T
            n2, n1 = len(self.t2), len(self.t1)
            self.r_zero = np.arange(r, r + n2); r += n2
            self.r_grp = np.arange(r, r + T * npart).reshape(T, npart); r += T * npart
        self.m_eq = r
        r = 0
        self.r_vmax = np.arange(r, r + T * npart).reshape(T, npart); r += T * npart
        self.r_vmin = np.arange(r, r + T * npart).reshape(T, npart); r += T * npart
        if stage == 2:
            self.r_rat = np.arange(r, r + T * npart).reshape(T, npart); r += T * npart
            self.r_sign = np.arange(r, r + n2 * npart).reshape(n2, npart); r += n2 * npart
            self.r_floor = np.arange(r, r + n2); r += n2
        self.m_ineq = r

        self.eta_c = np.array([b.eta_c for b in self.bats])
        self.eta_d = np.array([b.eta_d for b in self.bats])
        self.cdeg = np.array([b.degradation_cost for b in self.bats])
        self.E0 = np.array([b.e_initial / K for b in self.bats])
        if sc.battery_convention is EfficiencyConvention.AS_PRINTED:
            self.dis_coef = self.eta_d
        else:
            self.dis_coef = 1.0 / self.eta_d
        self.chg_coef = self.eta_c

    # ----------------------------------------------------- unpacking

    def _v(self, x):
        return x[self.ie], x[self.if_]

    def _pim(self, x):
        if self.stage == 1:
            return x[self.iimp] - x[self.iexp]
        return x[self.ipim]

    def _dg_kw(self, x):
        return x[self.idg] * self.K

    def _der_cost(self, x) -> np.ndarray:
        """Battery wear plus DG fuel per participant and step, $ (T, npart)."""
        out = np.zeros((self.T, self.npart))
        if len(self.bats):
            wear = self.cdeg * (x[self.ichg] + x[self.idis]) * self.K * self.dt
            np.add.at(out, (slice(None), self.bat_p), wear)
        for k, d in enumerate(self.dgs):
            out[:, self.dg_p[k]] += self._dg_rate(k, x)[0] * self.dt
        return out

    def _dg_rate(self, k: int, x):
        """Fuel cost rate of DG ``k`` in $/h with its first and second derivative per kW.

        The relaxation replaces the on/off constant by its convex envelope
        c*P/p_max; with a commitment the constant is charged where committed.
        """
        d = self.dgs[k]
        P = x[self.idg[:, k]] * self.K
        if self.commit is None:
            slope = d.b + d.c / d.p_max
            return d.a * P * P + slope * P, 2 * d.a * P + slope, np.full_like(P, 2 * d.a)
        on = self.commit[:, k]
        return (d.a * P * P + d.b * P + np.where(on, d.c, 0.0), 2 * d.a * P + d.b, np.full_like(P, 2 * d.a))

    def _injections(self, x):
        e, f = self._v(x)
        a = e @ self.adm.G.T - f @ self.adm.B.T
        c = f @ self.adm.G.T + e @ self.adm.B.T
        return e * a + f * c, f * a - e * c, a, c

    def _bus_loss(self, x):
        e, f = self._v(x)
        adm = self.adm
        de = e[:, adm.from_idx] - e[:, adm.to_idx]
        df = f[:, adm.from_idx] - f[:, adm.to_idx]
        br = adm.g * (de * de + df * df)
        loss = np.zeros((self.T, self.nb))
        np.add.at(loss, (slice(None), adm.from_idx), 0.5 * br)
        np.add.at(loss, (slice(None), adm.to_idx), 0.5 * br)
        return loss, de, df

    def _draw_kwh(self, x):
        """(P_im + P_l) * K * dt per participant, kWh."""
        return (self._pim(x) + x[self.iloss]) * self.K * self.dt

    # ----------------------------------------------------- objective

    def objective(self, x) -> float:
        K, dt = self.K, self.dt
        total = self._der_cost(x).sum()
        if self.stage == 1:
            total += np.sum((self.ub[:, None] * (x[self.iimp] + x[self.iloss]) - self.us[:, None] * x[self.iexp]) * K * dt)
        else:
            total += np.sum((self.ub * x[self.iusup[:, 0]] - self.us * x[self.iuabs[:, 0]]) * K * dt)
            total += RATIONALITY_PENALTY * GAP_UNIT * (np.sum(x[self.ielastic]) + np.sum(x[self.isurplus]))
        return COST_SCALE * float(total)

    def gradient(self, x) -> np.ndarray:
        K, dt = self.K, self.dt
        g = np.zeros(self.n)
        if self.stage == 1:
            g[self.iimp] = self.ub[:, None] * K * dt
            g[self.iexp] = -self.us[:, None] * K * dt
            g[self.iloss] = self.ub[:, None] * K * dt
        else:
            g[self.iusup[:, 0]] = self.ub * K * dt
            g[self.iuabs[:, 0]] = -self.us * K * dt
            g[self.ielastic] = RATIONALITY_PENALTY * GAP_UNIT
            g[self.isurplus] = RATIONALITY_PENALTY * GAP_UNIT
        if len(self.bats):
            g[self.ichg] = self.cdeg * K * dt
            g[self.idis] = self.cdeg * K * dt
        for k, d in enumerate(self.dgs):
            _, d1, _ = self._dg_rate(k, x)
            g[self.idg[:, k]] = d1 * K * dt
        return COST_SCALE * g

    # ----------------------------------------------------- equalities

    def eq(self, x) -> np.ndarray:
        out = np.zeros(self.m_eq)
        P, Q, _, _ = self._injections(x)
        pim = self._pim(x)
        out[self.r_pfp] = -pim - P[:, self.part]
        qinj = -self.QD.copy()
        if len(self.q_p):
            qinj[:, self.q_p] += x[self.iq]
        out[self.r_pfq] = qinj - Q[:, self.part]
        bal = self.PD - pim
        if len(self.bats):
            np.subtract.at(bal, (slice(None), self.bat_p), x[self.idis] - x[self.ichg])
        if len(self.dgs):
            np.subtract.at(bal, (slice(None), self.dg_p), x[self.idg])
        if len(self.re_p):
            np.subtract.at(bal, (slice(None), self.re_p), x[self.ire])
        out[self.r_bal] = bal
        loss, _, _ = self._bus_loss(x)
        out[self.r_loss] = x[self.iloss] - loss[:, self.part]
        if len(self.bats):
            E = x[self.iE]
            Eprev = np.vstack([self.E0[None, :], E[:-1]])
            out[self.r_bat] = E - Eprev + (self.dis_coef * x[self.idis] - self.chg_coef * x[self.ichg]) * self.dt
        if self.stage == 2:
            draw = self._pim(x) + x[self.iloss]
            out[self.r_settle] = x[self.iusup[:, 0]] - x[self.iuabs[:, 0]] - draw.sum(axis=1)
            pay = x[self.ipay] * PAY_UNIT
            util = (self.ub * x[self.iusup[:, 0]] - self.us * x[self.iuabs[:, 0]]) * self.K * self.dt
            out[self.r_zero] = (pay.sum(axis=1) - util)[self.t2]
            out[self.r_grp] = pay - x[self.price_col] * self._draw_kwh(x)
        return out

    def _pim_cols(self):
        """Variable columns and signs making up P_im."""
        if self.stage == 1:
            return [(self.iimp, 1.0), (self.iexp, -1.0)]
        return [(self.ipim, 1.0)]

    def eq_jac(self, x) -> sp.csr_matrix:
        T, npart = self.T, self.npart
        tr = _Triplets()
        e, f = self._v(x)
        _, _, a, c = self._injections(x)
        yi, yj, Gv, Bv, dg = self.yi, self.yj, self.Gv, self.Bv, self.ydiag
        keep = self.row_of_bus[yi] >= 0
        yi, yj, Gv, Bv, dg = yi[keep], yj[keep], Gv[keep], Bv[keep], dg[keep]
        rows_p = self.r_pfp[:, self.row_of_bus[yi]]
        rows_q = self.r_pfq[:, self.row_of_bus[yi]]
        Ei, Fi = e[:, yi], f[:, yi]
        ai, ci = a[:, yi], c[:, yi]
        dP_de = Ei * Gv + Fi * Bv + dg * ai
        dP_df = Fi * Gv - Ei * Bv + dg * ci
        dQ_de = Fi * Gv - Ei * Bv - dg * ci
        dQ_df = -Fi * Bv - Ei * Gv + dg * ai
        tr.add(rows_p, self.ie[:, yj], -dP_de)
        tr.add(rows_p, self.if_[:, yj], -dP_df)
        tr.add(rows_q, self.ie[:, yj], -dQ_de)
        tr.add(rows_q, self.if_[:, yj], -dQ_df)
        for cols, sgn in self._pim_cols():
            tr.add(self.r_pfp, cols, -sgn)
            tr.add(self.r_bal, cols, -sgn)
        if len(self.q_p):
            tr.add(self.r_pfq[:, self.q_p], self.iq, 1.0)
        if len(self.bats):
            tr.add(self.r_bal[:, self.bat_p], self.idis, -1.0)
            tr.add(self.r_bal[:, self.bat_p], self.ichg, 1.0)
        if len(self.dgs):
            tr.add(self.r_bal[:, self.dg_p], self.idg, -1.0)
        if len(self.re_p):
            tr.add(self.r_bal[:, self.re_p], self.ire, -1.0)

        # loss shares
        tr.add(self.r_loss, self.iloss, 1.0)
        adm = self.adm
        _, de, df = self._bus_loss(x)
        for end in (adm.from_idx, adm.to_idx):
            rb = self.row_of_bus[end]
            ok = rb >= 0
            rows = self.r_loss[:, rb[ok]]
            gde = (adm.g * de)[:, ok]
            gdf = (adm.g * df)[:, ok]
            tr.add(rows, self.ie[:, adm.from_idx[ok]], -gde)
            tr.add(rows, self.ie[:, adm.to_idx[ok]], gde)
            tr.add(rows, self.if_[:, adm.from_idx[ok]], -gdf)
            tr.add(rows, self.if_[:, adm.to_idx[ok]], gdf)

        if len(self.bats):
            tr.add(self.r_bat, self.iE, 1.0)
            tr.add(self.r_bat[1:], self.iE[:-1], -1.0)
            tr.add(self.r_bat, self.idis, self.dis_coef * self.dt)
            tr.add(self.r_bat, self.ichg, -self.chg_coef * self.dt)

        if self.stage == 2:
            Kdt = self.K * self.dt
            tr.add(self.r_settle, self.iusup[:, 0], 1.0)
            tr.add(self.r_settle, self.iuabs[:, 0], -1.0)
            tr.add(self.r_settle[:, None], self.ipim, -1.0)
            tr.add(self.r_settle[:, None], self.iloss, -1.0)
            t1, t2 = self.t1, self.t2
            tr.add(self.r_zero[:, None], self.ipay[t2], PAY_UNIT)
            tr.add(self.r_zero, self.iusup[t2, 0], -self.ub[t2] * Kdt)
            tr.add(self.r_zero, self.iuabs[t2, 0], self.us[t2] * Kdt)
            tr.add(self.r_grp, self.ipay, PAY_UNIT)
            tr.add(self.r_grp, self.price_col, -self._draw_kwh(x))
            for blk in (self.ipim, self.iloss):
                tr.add(self.r_grp, blk, -x[self.price_col] * Kdt)
        return tr.matrix((self.m_eq, self.n))

    # ----------------------------------------------------- inequalities

    def ineq(self, x) -> np.ndarray:
        out = np.zeros(self.m_ineq)
        e, f = self._v(x)
        vsq = (e * e + f * f)[:, self.part]
        out[self.r_vmax] = vsq - self.sc.v_max**2
        out[self.r_vmin] = self.sc.v_min**2 - vsq
        if self.stage == 2:
            out[self.r_rat] = self.trading_cost(x) - self.baseline - x[self.ielastic] * GAP_UNIT
            # buyers keep drawing and sellers keep feeding on two-sided steps
            draw = (self._pim(x) + x[self.iloss])[self.t2]
            out[self.r_sign] = np.where(self.buyer[self.t2], -draw, draw)
            # the pool keeps at least the surplus of settling the stage-1 schedule internally
            t2 = self.t2
            gain = (self.baseline - self.trading_cost(x)).sum(axis=1)
            out[self.r_floor] = (self.imbalance - gain)[t2] - x[self.isurplus[t2, 0]] * GAP_UNIT
        return out

    def prices(self, x) -> np.ndarray:
        """Per participant price, $/kWh: the price of its group."""
        return np.clip(x[self.price_col], self.us[:, None], self.ub[:, None])

    def trading_cost(self, x) -> np.ndarray:
        """C-tilde per participant and step, $."""
        return self._der_cost(x) + x[self.ipay] * PAY_UNIT

    def ineq_jac(self, x) -> sp.csr_matrix:
        tr = _Triplets()
        e, f = self._v(x)
        P = self.part
        tr.add(self.r_vmax, self.ie[:, P], 2 * e[:, P])
        tr.add(self.r_vmax, self.if_[:, P], 2 * f[:, P])
        tr.add(self.r_vmin, self.ie[:, P], -2 * e[:, P])
        tr.add(self.r_vmin, self.if_[:, P], -2 * f[:, P])
        if self.stage == 2:
            K, dt = self.K, self.dt
            tr.add(self.r_rat, self.ipay, PAY_UNIT)
            tr.add(self.r_rat, self.ielastic, -GAP_UNIT)
            t2 = self.t2
            sgn = np.where(self.buyer[t2], -1.0, 1.0)
            for blk in (self.ipim, self.iloss):
                tr.add(self.r_sign, blk[t2], sgn)
            fl = self.r_floor[:, None]
            tr.add(fl, self.ipay[t2], PAY_UNIT)
            tr.add(self.r_floor, self.isurplus[t2, 0], -GAP_UNIT)
            if len(self.bats):
                tr.add(self.r_rat[:, self.bat_p], self.ichg, self.cdeg * K * dt)
                tr.add(self.r_rat[:, self.bat_p], self.idis, self.cdeg * K * dt)
                tr.add(fl, self.ichg[t2], self.cdeg * K * dt)
                tr.add(fl, self.idis[t2], self.cdeg * K * dt)
            for k, d in enumerate(self.dgs):
                _, d1, _ = self._dg_rate(k, x)
                tr.add(self.r_rat[:, self.dg_p[k]], self.idg[:, k], d1 * K * dt)
                tr.add(self.r_floor, self.idg[t2, k], d1[t2] * K * dt)
        return tr.matrix((self.m_ineq, self.n))

    # ----------------------------------------------------- Hessian

    def hessian(self, x, sigma: float, lam_eq: np.ndarray, lam_ineq: np.ndarray) -> sp.csr_matrix:
        K, dt = self.K, self.dt
        tr = _Triplets()
        # DG curvature from the objective (and the rationality rows in stage 2)
        for k, d in enumerate(self.dgs):
            _, _, d2 = self._dg_rate(k, x)
            w = sigma * COST_SCALE * np.ones(self.T)
            if self.stage == 2:
                w = w + lam_ineq[self.r_rat[:, self.dg_p[k]]]
                w[self.t2] += lam_ineq[self.r_floor]
            tr.add(self.idg[:, k], self.idg[:, k], w * d2 * K * K * dt)

        # power flow rows: residual = specified injection - P(e,f), so weights are -lambda
        wP = np.zeros((self.T, self.nb))
        wQ = np.zeros((self.T, self.nb))
        wP[:, self.part] = -lam_eq[self.r_pfp]
        wQ[:, self.part] = -lam_eq[self.r_pfq]
        yi, yj, Gv, Bv = self.yi, self.yj, self.Gv, self.Bv
        Hee = Gv * (wP[:, yi] + wP[:, yj]) - Bv * (wQ[:, yi] + wQ[:, yj])
        Hef = Bv * (wP[:, yj] - wP[:, yi]) + Gv * (wQ[:, yj] - wQ[:, yi])
        tr.add(self.ie[:, yi], self.ie[:, yj], Hee)
        tr.add(self.if_[:, yi], self.if_[:, yj], Hee)
        tr.add(self.ie[:, yi], self.if_[:, yj], Hef)
        tr.add(self.if_[:, yj], self.ie[:, yi], Hef)

        # loss rows: residual = ploss - loss(e,f)
        wL = np.zeros((self.T, self.nb))
        wL[:, self.part] = -lam_eq[self.r_loss]
        adm = self.adm
        omega = 0.5 * (wL[:, adm.from_idx] + wL[:, adm.to_idx]) * 2 * adm.g
        for blk in (self.ie, self.if_):
            fi, ti = blk[:, adm.from_idx], blk[:, adm.to_idx]
            tr.add(fi, fi, omega)
            tr.add(ti, ti, omega)
            tr.add(fi, ti, -omega)
            tr.add(ti, fi, -omega)

        # voltage limits
        lv = np.zeros((self.T, self.nb))
        lv[:, self.part] = 2 * (lam_ineq[self.r_vmax] - lam_ineq[self.r_vmin])
        tr.add(self.ie, self.ie, lv)
        tr.add(self.if_, self.if_, lv)

        # payment rows: pay - price * draw
        if self.stage == 2:
            lg = -lam_eq[self.r_grp] * K * dt
            for blk in (self.ipim, self.iloss):
                tr.add(self.price_col, blk, lg)
                tr.add(blk, self.price_col, lg)

        return tr.matrix((self.n, self.n))

    # ----------------------------------------------------- problem + starts

    def problem(self, x0: np.ndarray) -> NlpProblem:
        return NlpProblem(n=self.n, objective=self.objective, gradient=self.gradient, lower=self.lower,
                          upper=self.upper, x0=x0, eq=self.eq, eq_jac=self.eq_jac, ineq=self.ineq,
                          ineq_jac=self.ineq_jac, hessian=self.hessian, names=self.layout.names)

    def initial_point(self, dg_fraction: float = 0.0, from_dispatch: "DispatchSolution | None" = None,
                      rng: np.random.Generator | None = None, noise: float = 0.0) -> np.ndarray:
        """A starting point; flat voltages unless a dispatch is given to warm start from."""
        K = self.K
        x = np.zeros(self.n)
        T = self.T
        if from_dispatch is not None:
            d = from_dispatch
            x[self.ie] = d.e
            x[self.if_] = d.f
            x[self.iloss] = d.P_l[:, self.part] / K
            bi = [self.net.index_of(b) for b in self.bat_buses]
            x[self.ichg] = d.P_chg[:, bi] / K
            x[self.idis] = d.P_dis[:, bi] / K
            x[self.iE] = d.E_b[:, bi] / K
            x[self.idg] = d.P_dg[:, [self.net.index_of(b) for b in self.dg_buses]] / K
            x[self.ire] = d.P_re[:, [self.net.index_of(b) for b in self.re_buses]] / K
            x[self.iq] = d.Q_g[:, [self.net.index_of(b) for b in self.q_buses]] / K
            if dg_fraction > 0 and len(self.dgs):
                x[self.idg] = np.maximum(x[self.idg], dg_fraction * self.upper[self.idg])
            pim = d.P_im[:, self.part] / K
        else:
            x[self.ie] = 1.0
            x[self.ire] = self.re_avail
            if len(self.bats):
                x[self.iE] = self.E0
                x[self.iE[-1]] = np.maximum(self.E0, self.lower[self.iE[-1]])
            if len(self.dgs):
                x[self.idg] = dg_fraction * self.upper[self.idg]
            pim = self.PD.copy()
        x[self.idg] = np.clip(x[self.idg], self.lower[self.idg], self.upper[self.idg])
        # keep the local balance consistent with whatever devices are set
        pim = self.PD.copy()
        if len(self.bats):
            np.subtract.at(pim, (slice(None), self.bat_p), x[self.idis] - x[self.ichg])
        if len(self.dgs):
            np.subtract.at(pim, (slice(None), self.dg_p), x[self.idg])
        if len(self.re_p):
            np.subtract.at(pim, (slice(None), self.re_p), x[self.ire])
        if self.stage == 1:
            x[self.iimp] = np.maximum(pim, 0.0)
            x[self.iexp] = np.maximum(-pim, 0.0)
        else:
            x[self.ipim] = pim
            draw = (pim + x[self.iloss]).sum(axis=1)
            x[self.iusup[:, 0]] = np.maximum(draw, 0.0)
            x[self.iuabs[:, 0]] = np.maximum(-draw, 0.0)
            price = self._balanced_prices(x)
            x[self.iprice[:, 0]] = np.where(self.buyer, price, -np.inf).max(axis=1, initial=-np.inf)
            x[self.iprice[:, 1]] = np.where(~self.buyer, price, -np.inf).max(axis=1, initial=-np.inf)
            x[self.iprice] = np.where(np.isfinite(x[self.iprice]), x[self.iprice], self.lower[self.iprice])
            x[self.ipay] = price * self._draw_kwh(x) / PAY_UNIT
        if rng is not None and noise > 0:
            free = self.lower < self.upper
            span = np.where(np.isfinite(self.upper - self.lower), self.upper - self.lower, 1.0)
            x[free] += noise * rng.uniform(-1, 1, free.sum()) * np.minimum(span[free], 1.0)
        return np.clip(x, self.lower, self.upper)

    def _balanced_prices(self, x: np.ndarray) -> np.ndarray:
        """(T, npart) starting prices meeting each step's zero-sum exactly.

        The side with less energy trades at the midpoint of the tariff band
        and the larger side's price absorbs the utility settlement, which
        keeps both prices strictly inside the band.
        """
        w = self._draw_kwh(x)
        price = np.empty_like(w)
        for t in range(self.T):
            ub, us = self.ub[t], self.us[t]
            if t in self.t1:
                price[t] = self.p_fix[np.searchsorted(self.t1, t)]
                continue
            buy = self.buyer[t]
            I, E = w[t, buy].sum(), -w[t, ~buy].sum()
            mid = 0.5 * (ub + us)
            if I >= E:
                p_exp, p_imp = mid, ub - (ub - mid) * E / max(I, 1e-12)
            else:
                p_imp, p_exp = mid, us + (mid - us) * I / max(E, 1e-12)
            price[t] = np.where(buy, p_imp, p_exp)
        return price

    # ----------------------------------------------------- results

    def dispatch(self, x: np.ndarray, report: SolveReport, reports: list[SolveReport]) -> DispatchSolution:
        K, T, nb = self.K, self.T, self.nb
        full = lambda: np.zeros((T, nb))
        P_im, P_chg, P_dis, P_dg, P_re, Q_g = full(), full(), full(), full(), full(), full()
        E_b = np.full((T, nb), np.nan)
        P_im[:, self.part] = self._pim(x) * K
        bi = [self.net.index_of(b) for b in self.bat_buses]
        if bi:
            P_chg[:, bi] = x[self.ichg] * K
            P_dis[:, bi] = x[self.idis] * K
            E_b[:, bi] = x[self.iE] * K
        if self.dg_buses:
            P_dg[:, [self.net.index_of(b) for b in self.dg_buses]] = x[self.idg] * K
        if self.re_buses:
            P_re[:, [self.net.index_of(b) for b in self.re_buses]] = x[self.ire] * K
        if self.q_buses:
            Q_g[:, [self.net.index_of(b) for b in self.q_buses]] = x[self.iq] * K
        e, f = self._v(x)
        loss, _, _ = self._bus_loss(x)
        P, Q, _, _ = self._injections(x)
        # P_im at the slack is the utility's draw from the pool, -P_slack
        P_im[:, self.slack] = -P[:, self.slack] * K
        P_l = loss * K
        P_l[:, self.part] = x[self.iloss] * K

        ub, us, dt = self.ub[:, None], self.us[:, None], self.dt
        C_b, C_dg = full(), full()
        der = self._der_cost(x)
        if self.dgs:
            for k, d in enumerate(self.dgs):
                C_dg[:, self.part[self.dg_p[k]]] = self._dg_rate(k, x)[0] * dt
        C_b[:, self.part] = der - C_dg[:, self.part]
        C_im, C_l = full(), full()
        if self.stage == 1:
            C_im[:, self.part] = (ub * x[self.iimp] - us * x[self.iexp]) * K * dt
            C_l[:, self.part] = ub * x[self.iloss] * K * dt
        else:
            price = self.prices(x)
            C_im[:, self.part] = price * x[self.ipim] * K * dt
            C_l[:, self.part] = x[self.ipay] * PAY_UNIT - C_im[:, self.part]
        for arr in (C_im, C_l, C_b, C_dg):
            arr[:, self.slack] = np.nan
        return DispatchSolution(stage="baseline" if self.stage == 1 else "trading", P_im=P_im, P_chg=P_chg,
                                P_dis=P_dis, P_dg=P_dg, P_re=P_re, Q_g=Q_g, e=e.copy(), f=f.copy(), P_l=P_l,
                                E_b=E_b, slack_P=P[:, self.slack] * K, slack_Q=Q[:, self.slack] * K,
                                costs=CostBreakdown(C_im, C_b, C_dg, C_l), report=report, reports=reports)


def _check_supply(sc: Scenario) -> None:
    """Reject scenarios whose load cannot be met even ignoring the network."""
    # the utility connection is unbounded, so only nonsensical inputs fail here
    if np.any(sc.load_P < 0) or not np.all(np.isfinite(sc.load_P)):
        raise InfeasibleScenario("loads must be finite and nonnegative")


def _starts(model: StageModel, sc: Scenario, warm: DispatchSolution | None) -> list[np.ndarray]:
    rng = np.random.default_rng(sc.seed)
    if warm is None:
        cands = [model.initial_point(), model.initial_point(dg_fraction=0.5),
                 model.initial_point(dg_fraction=0.5, rng=rng, noise=0.02)]
    else:
        cands = [model.initial_point(from_dispatch=warm), model.initial_point(from_dispatch=warm, dg_fraction=0.5),
                 model.initial_point(from_dispatch=warm, rng=rng, noise=0.02)]
    if not model.dgs:
        cands = [cands[0], cands[2]]
    return cands[: max(1, sc.n_starts)]


def dg_commitment(sol: DispatchSolution, sc: Scenario) -> np.ndarray:
    """(T, n_dg) mask of DG units running above their on threshold, in bus order."""
    buses = [b for b in sc.network.bus_ids if sc.devices.get(b, BusDevices()).dg is not None
             and b != sc.network.bus_ids[sc.network.slack_index]]
    if not buses:
        return np.zeros((sc.T, 0), dtype=bool)
    cols = [sc.network.index_of(b) for b in buses]
    thr = np.array([sc.devices[b].dg.on_threshold for b in buses])
    return sol.P_dg[:, cols] > thr * (1 + 1e-6)


def _solve_fixed(sc: Scenario, stage: int, baseline, commit, warm) -> tuple[StageModel, SolveReport, list]:
    model = StageModel(sc, stage, baseline, commit)
    if warm is None or commit is None:
        starts = _starts(model, sc, warm)
    else:
        starts = [model.initial_point(from_dispatch=warm)]
    best, reports = solve_multistart(model.problem(starts[0]), starts, sc.solver)
    return model, best, reports


def _solve_stage(sc: Scenario, stage: int, baseline=None) -> tuple[StageModel, SolveReport, list]:
    """Relax-and-fix over DG commitment.

    The convex relaxation proposes which units run at each step. Each
    proposal is solved with exact costs, units left idling at their floor
    are switched off, and the cheapest optimal candidate wins. In stage 2
    the stage-1 commitment is always among the candidates, since the
    stage-1 dispatch is feasible for it.
    """
    label = f"stage {stage}"
    warm = baseline if stage == 2 else None
    model, best, reports = _solve_fixed(sc, stage, baseline, None, warm)
    all_reports = list(reports)
    if not model.dgs:
        return model, best, all_reports
    if best.status is not Status.OPTIMAL:
        raise StageFailed(label, best)
    relaxed = model.dispatch(best.x, best, reports)
    cands = [dg_commitment(relaxed, sc)]
    if stage == 2:
        cands.append(dg_commitment(baseline, sc))
    winner = None
    failed = best
    tried: list[bytes] = []
    while cands:
        commit = cands.pop(0)
        if commit.tobytes() in tried:
            continue
        tried.append(commit.tobytes())
        m, r, reps = _solve_fixed(sc, stage, baseline, commit, relaxed if stage == 1 else baseline)
        all_reports.extend(reps)
        if r.status is not Status.OPTIMAL:
            failed = r
            continue
        if winner is None or r.objective < winner[1].objective - 1e-12:
            winner = (m, r)
        sol = m.dispatch(r.x, r, reps)
        floor = np.array([max(d.p_min, d.on_threshold) for d in m.dgs])
        cols = [sc.network.index_of(b) for b in m.dg_buses]
        P = sol.P_dg[:, cols]
        idle = commit & (P <= floor * (1 + 1e-4))
        # a unit dearer on average than the utility's buy price is worth trying without
        a, b, c = (np.array([getattr(d, k) for d in m.dgs]) for k in "abc")
        avg = (a * P * P + b * P + c) / np.maximum(P, 1e-9)
        dear = commit & (avg > sc.prices.u_b[:, None])
        if (dear & ~idle).any():
            cands.insert(0, commit & ~(idle | dear))
        if idle.any():
            cands.insert(0, commit & ~idle)
    if winner is None:
        raise StageFailed(label, failed)
    return winner[0], winner[1], all_reports


def solve_stage1(sc: Scenario) -> DispatchSolution:
    """Least-cost dispatch when every bus trades only with the utility."""
    _check_supply(sc)
    model, best, reports = _solve_stage(sc, 1)
    if best.status is not Status.OPTIMAL:
        raise StageFailed("stage 1", best)
    return model.dispatch(best.x, best, reports)


def build_stage1(sc: Scenario) -> NlpProblem:
    model = StageModel(sc, 1)
    return model.problem(model.initial_point())


def baseline_costs(stage1: DispatchSolution) -> np.ndarray:
    """C-bar-star per bus and step ($); NaN for the utility column."""
    return stage1.costs.C_total


def build_stage2(sc: Scenario, baseline: DispatchSolution | None) -> NlpProblem:
    if baseline is None:
        raise MissingBaseline("stage 2 needs the stage-1 solution")
    model = StageModel(sc, 2, baseline)
    return model.problem(model.initial_point())


def solve_stage2(sc: Scenario, stage1: DispatchSolution) -> tuple[DispatchSolution, TradeOutcome]:
    """Profit-maximizing dispatch and per-bus transaction prices."""
    if stage1 is None:
        raise MissingBaseline("stage 2 needs a stage-1 solution")
    base = baseline_costs(stage1)
    model, best, reports = _solve_stage(sc, 2, stage1)
    if best.status is not Status.OPTIMAL:
        raise StageFailed("stage 2", best)
    sol = model.dispatch(best.x, best, reports)
    x = best.x
    T, nb = model.T, model.nb
    price = np.full((T, nb), np.nan)
    price[:, model.part] = model.prices(x)
    delta = np.full((T, nb), np.nan)
    delta[:, model.part] = x[model.ipay] * PAY_UNIT
    usup, uabs = x[model.iusup[:, 0]], x[model.iuabs[:, 0]]
    delta[:, model.slack] = -(model.ub * usup - model.us * uabs) * model.K * model.dt
    der = model._der_cost(x)
    w = (sol.P_im + sol.P_l)[:, model.part]
    pay = uniform_group_payments(w, delta[:, model.part], der, base[:, model.part], sc.prices, sc.dt)
    delta[:, model.part] = pay
    moved = np.abs(w) > 1e-9
    price[:, model.part] = np.where(moved, pay / np.where(moved, w * sc.dt, 1.0), price[:, model.part])
    price[:, model.part] = np.clip(price[:, model.part], sc.prices.u_s[:, None], sc.prices.u_b[:, None])
    C_tilde = np.full((T, nb), np.nan)
    C_tilde[:, model.part] = der + pay
    prof = profit(base, C_tilde)
    trade = TradeOutcome(price=price, delta=delta, C_tilde=C_tilde, C_bar_star=base, profit=prof,
                         utility_import=(usup - uabs) * model.K)
    return sol, trade


def uniform_group_payments(w, pay, der, baseline, prices: PriceSchedule, dt: float, tol: float = 1e-9):
    """Re-express stage-2 payments with one price for buyers and one for sellers.

    Payments enter the stage-2 objective only through their sum, so the
    solver's split is one of many optima. With draws ``w`` (T, n, kW)
    fixed, a buyer price p_I and seller price p_E must satisfy
    p_I*I - p_E*E = sum(pay), stay inside [u_s, u_b] and keep every
    participant's cost der + p*w*dt at or below its baseline. That leaves
    an interval for p_E, and its midpoint is used. Steps where the
    interval is empty keep the solver's payments.
    """
    w = np.asarray(w, dtype=float)
    out = np.array(pay, dtype=float, copy=True)
    for t in range(w.shape[0]):
        buy, sell = w[t] > 1e-9, w[t] < -1e-9
        if not (buy.any() and sell.any()):
            continue
        I, E = w[t, buy].sum() * dt, -w[t, sell].sum() * dt
        S = out[t, buy | sell].sum()
        room = baseline[t] - der[t]
        us, ub = prices.u_s[t], prices.u_b[t]
        # seller price bounds: box, rationality (-p_E*|w|*dt <= room)
        lo = max(us, np.max(-room[sell] / (-w[t, sell] * dt)))
        hi = ub
        # buyer price p_I = (S + p_E*E)/I must lie in the box and satisfy p_I*w*dt <= room
        p_I_max = min(ub, np.min(room[buy] / (w[t, buy] * dt)))
        lo = max(lo, (us * I - S) / E)
        hi = min(hi, (p_I_max * I - S) / E)
        if hi < lo - tol:
            continue
        p_E = 0.5 * (lo + hi) if hi >= lo else lo
        p_I = (S + p_E * E) / I
        out[t, buy] = p_I * w[t, buy] * dt
        out[t, sell] = p_E * w[t, sell] * dt
    return out


def profit(baseline_cost, trading_cost):
    """Cost saved by trading; negative values mean a participant lost out."""
    return np.asarray(baseline_cost) - np.asarray(trading_cost)


def cash_flow_imbalance(sc: Scenario, stage1: DispatchSolution) -> np.ndarray:
    """Per-step surplus the utility collects when nobody trades, $.

    Participants pay u_b for imports and loss shares and receive u_s for
    exports. The utility is entitled only to its tariff on the pool's net
    draw; whatever it collects beyond that is the imbalance.
    """
    part = [k for k in range(sc.network.n_bus) if k != sc.network.slack_index]
    paid = np.sum(stage1.costs.C_im[:, part] + stage1.costs.C_l[:, part], axis=1)
    draw = np.sum(stage1.P_im[:, part] + stage1.P_l[:, part], axis=1) * sc.dt
    return paid - sc.prices.tariff(draw)


def dispatch_injections(sc: Scenario, sol: DispatchSolution, t: int) -> acpf.InjectionSet:
    """Net bus injections (kW / kvar) implied by a dispatch at step ``t``."""
    P = -sol.P_im[t].copy()
    Q = sol.Q_g[t] - sc.load_Q[t]
    s = sc.network.slack_index
    P[s], Q[s] = sol.slack_P[t], sol.slack_Q[t]
    return acpf.InjectionSet(P, Q)
