"""Post-market reallocation of payments so equal traders get equal benefit.

Each participant's stage-2 draw w = P_im + P_l puts it in a group:
importers (w > 0), exporters (w < 0) or idle. Within a group, money is
redistributed in proportion to |w|. Importers share what importers paid
and exporters share what exporters received, so group totals and every
step's zero-sum are preserved exactly. Each group then sees one implied
price. The pool price pi* is the one the pool itself sets: the exporters'
price when the pool draws from the utility, the importers' price when it
feeds the utility. The other group's price blends pi* with the tariff.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .der import PriceSchedule
from .market import DispatchSolution, TradeOutcome

IMPORTER, EXPORTER, IDLE = 1, -1, 0

# below this draw (kW) a participant counts as idle; smaller draws are solver noise
IDLE_KW = 1e-6


class AllocationError(ValueError):
    pass


class EmptyTradingStep(AllocationError):
    pass


class ZeroTradedEnergy(AllocationError):
    pass


class PriceOutOfBounds(AllocationError):
    pass


@dataclass
class AllocationResult:
    """Per step (rows) and bus (columns) allocation outputs.

    The utility column carries its unchanged settlement in ``delta_star``
    and NaN elsewhere. ``two_sided`` marks steps with both importers and
    exporters; the other steps pass through at the tariff price.
    """

    pi_star: np.ndarray
    rate: np.ndarray
    delta_star: np.ndarray
    profit_star: np.ndarray
    phi: np.ndarray
    group: np.ndarray
    two_sided: np.ndarray
    importer_price: np.ndarray
    exporter_price: np.ndarray


def contribution_rates(w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Share of each participant within its trading group.

    Args:
        w: signed draw per participant at one step (kW); positive imports.

    Returns:
        (rates, groups): rates sum to one within each nonempty group and
        are zero for idle participants.
    """
    w = np.asarray(w, dtype=float)
    group = np.where(w > IDLE_KW, IMPORTER, np.where(w < -IDLE_KW, EXPORTER, IDLE))
    if not np.any(group):
        raise EmptyTradingStep("no participant imports or exports")
    rate = np.zeros_like(w)
    for g in (IMPORTER, EXPORTER):
        sel = group == g
        if sel.any():
            rate[sel] = np.abs(w[sel]) / np.abs(w[sel]).sum()
    return rate, group


def allocate(stage2: DispatchSolution, trade: TradeOutcome, prices: PriceSchedule, dt: float,
             slack_index: int = 0, tol: float = 1e-9) -> AllocationResult:
    """Recompute payments with one price per group and step.

    Raises:
        ZeroTradedEnergy: a two-sided step has no energy on the pricing side.
        PriceOutOfBounds: a derived price leaves [u_s, u_b] by more than ``tol``.
    """
    T, nb = stage2.P_im.shape
    part = np.array([k for k in range(nb) if k != slack_index])
    W = (stage2.P_im + stage2.P_l)[:, part]
    delta = trade.delta[:, part]

    pi_star = np.full(T, np.nan)
    imp_price = np.full(T, np.nan)
    exp_price = np.full(T, np.nan)
    rate = np.zeros((T, nb))
    group = np.zeros((T, nb), dtype=int)
    d_star = np.full((T, nb), np.nan)
    d_star[:, slack_index] = trade.delta[:, slack_index]
    two_sided = np.zeros(T, dtype=bool)

    for t in range(T):
        w = W[t]
        try:
            r, g = contribution_rates(w)
        except EmptyTradingStep:
            # nobody trades, so nobody pays, the utility included
            d_star[t] = 0.0
            continue
        rate[t, part], group[t, part] = r, g
        imp, exp = g == IMPORTER, g == EXPORTER
        I = w[imp].sum() * dt
        E = -w[exp].sum() * dt
        paid = delta[t, imp].sum()
        received = -delta[t, exp].sum()
        ds = np.zeros(len(part))
        ds[imp] = r[imp] * paid
        ds[exp] = -r[exp] * received
        ds[g == IDLE] = delta[t, g == IDLE]
        d_star[t, part] = ds
        if I > 0:
            imp_price[t] = paid / I
        if E > 0:
            exp_price[t] = received / E
        ub, us = prices.u_b[t], prices.u_s[t]
        if imp.any() and exp.any():
            two_sided[t] = True
            pool_draws = I >= E
            pi_star[t] = exp_price[t] if pool_draws else imp_price[t]
            if not np.isfinite(pi_star[t]):
                raise ZeroTradedEnergy(f"step {t + 1}: no energy on the pricing side")
        else:
            pi_star[t] = ub if imp.any() else us
        for name, p in (("pi*", pi_star[t]), ("importer price", imp_price[t]), ("exporter price", exp_price[t])):
            if np.isfinite(p) and not us - tol <= p <= ub + tol:
                raise PriceOutOfBounds(f"step {t + 1}: {name} {p:.6g} outside [{us:.6g}, {ub:.6g}]")

    profit_star = np.full((T, nb), np.nan)
    profit_star[:, part] = trade.profit[:, part] + delta - d_star[:, part]
    phi = per_unit_profit(W, d_star[:, part], prices, dt)
    phi_full = np.full((T, nb), np.nan)
    phi_full[:, part] = phi
    return AllocationResult(pi_star=pi_star, rate=rate, delta_star=d_star, profit_star=profit_star, phi=phi_full,
                            group=group, two_sided=two_sided, importer_price=imp_price, exporter_price=exp_price)


def per_unit_profit(W: np.ndarray, d_star: np.ndarray, prices: PriceSchedule, dt: float) -> np.ndarray:
    """Saving per kWh traded relative to settling the same draw with the utility, $/kWh."""
    energy = W * dt
    ref = prices.tariff(energy, (slice(None), None))
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(np.abs(W) > IDLE_KW, (ref - d_star) / np.abs(energy), np.nan)


def fairness_metrics(alloc: AllocationResult, stage2: DispatchSolution | None = None,
                     prices: PriceSchedule | None = None) -> dict[str, np.ndarray]:
    """Largest intra-group spread of per-unit profit at each step ($/kWh).

    Steps where a group is empty report NaN for that group. The optional
    arguments are accepted for symmetry with :func:`allocate`; the spread
    only needs the stored per-unit profits.
    """
    out = {}
    for name, g in (("importer", IMPORTER), ("exporter", EXPORTER)):
        spread = np.full(len(alloc.pi_star), np.nan)
        for t in range(len(spread)):
            vals = alloc.phi[t][alloc.group[t] == g]
            vals = vals[np.isfinite(vals)]
            if len(vals):
                spread[t] = vals.max() - vals.min()
        out[name] = spread
    return out
