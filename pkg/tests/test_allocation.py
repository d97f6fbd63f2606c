import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from temarket.allocation import (EXPORTER, IDLE, IMPORTER, EmptyTradingStep, PriceOutOfBounds, allocate,
                                 contribution_rates, fairness_metrics, per_unit_profit)
from temarket.der import CostBreakdown, PriceSchedule
from temarket.market import DispatchSolution, TradeOutcome
from temarket.nlp import SolveReport, Status


def outcome(P_im, P_l, pay, ub, us, dt=1.0, baseline=None):
    """Stage-2 stand-ins for one or more steps; column 0 is the utility."""
    P_im = np.atleast_2d(np.asarray(P_im, dtype=float))
    P_l = np.atleast_2d(np.asarray(P_l, dtype=float))
    pay = np.atleast_2d(np.asarray(pay, dtype=float))
    T, n = P_im.shape
    zeros = np.zeros((T, n))
    rep = SolveReport(Status.OPTIMAL, np.zeros(1), 0.0, 0.0, 0.0, 0.0, 0, 0.0)
    sol = DispatchSolution("trading", P_im, zeros, zeros, zeros, zeros, zeros, np.ones((T, n)), zeros, P_l,
                           zeros, zeros[:, 0], zeros[:, 0], CostBreakdown(zeros, zeros, zeros, zeros), rep)
    delta = np.column_stack([-pay.sum(axis=1), pay])
    prices = PriceSchedule(np.full(T, ub), np.full(T, us))
    w = (P_im + P_l)[:, 1:]
    if baseline is None:
        baseline = prices.tariff(w * dt, (slice(None), None))
    base = np.column_stack([np.full(T, np.nan), baseline])
    C_tilde = np.column_stack([np.full(T, np.nan), pay])
    trade = TradeOutcome(price=np.full((T, n), np.nan), delta=delta, C_tilde=C_tilde, C_bar_star=base,
                         profit=base - C_tilde, utility_import=np.zeros(T))
    return sol, trade, prices


def test_rates_within_one_group():
    r, g = contribution_rates(np.array([300.0, 100.0]))
    assert r == pytest.approx([0.75, 0.25])
    assert list(g) == [IMPORTER, IMPORTER]


def test_single_exporter_takes_the_whole_group():
    r, g = contribution_rates(np.array([-50.0]))
    assert r == pytest.approx([1.0]) and g[0] == EXPORTER


def test_rates_are_normalized_per_group():
    r, g = contribution_rates(np.array([200.0, 200.0, -400.0, 0.0]))
    assert r == pytest.approx([0.5, 0.5, 1.0, 0.0])
    assert list(g) == [IMPORTER, IMPORTER, EXPORTER, IDLE]


def test_all_idle_step_has_no_rates():
    with pytest.raises(EmptyTradingStep):
        contribution_rates(np.zeros(3))


def test_hand_example_with_a_lossy_importer():
    # importer draws 100 kW plus 2 kW of loss, exporter supplies 102 kW, $10.20 changes hands
    sol, trade, prices = outcome([[0.0, 100.0, -102.0]], [[0.0, 2.0, 0.0]], [[10.20, -10.20]], 0.2, 0.05)
    a = allocate(sol, trade, prices, 1.0)
    assert a.pi_star[0] == pytest.approx(0.1)
    assert a.delta_star[0, 1:] == pytest.approx([10.20, -10.20])
    assert np.sum(a.delta_star[0]) == pytest.approx(0.0, abs=1e-12)
    assert a.two_sided[0]


def test_idle_step_is_skipped():
    sol, trade, prices = outcome([[0.0, 0.0, 0.0]], [[0.0, 0.0, 0.0]], [[0.0, 0.0]], 0.2, 0.1)
    a = allocate(sol, trade, prices, 0.5)
    assert np.isnan(a.pi_star[0])
    assert np.all(a.delta_star[0, 1:] == 0.0)


def test_uniform_input_is_left_unchanged():
    # two importers and an exporter already at one price per group
    pay = np.array([[0.15 * 100 * 0.5, 0.15 * 50 * 0.5, -0.15 * 150 * 0.5]])
    sol, trade, prices = outcome([[0.0, 100.0, 50.0, -150.0]], np.zeros((1, 4)), pay, 0.2, 0.1, dt=0.5)
    a = allocate(sol, trade, prices, 0.5)
    assert a.delta_star[0, 1:] == pytest.approx(pay[0], abs=1e-12)
    assert a.profit_star[0, 1:] == pytest.approx(trade.profit[0, 1:], abs=1e-12)


def test_allocation_is_idempotent():
    pay = np.array([[9.0, 5.0, -14.0]])
    sol, trade, prices = outcome([[0.0, 100.0, 50.0, -150.0]], [[0.0, 1.0, 3.0, 0.0]], pay, 0.2, 0.05)
    a = allocate(sol, trade, prices, 1.0)
    trade2 = TradeOutcome(trade.price, a.delta_star, trade.C_tilde, trade.C_bar_star, a.profit_star,
                          trade.utility_import)
    b = allocate(sol, trade2, prices, 1.0)
    assert np.allclose(b.delta_star, a.delta_star, atol=1e-12)
    assert np.allclose(b.pi_star, a.pi_star)


def test_pool_price_comes_from_the_pricing_side():
    # the pool draws from the utility, so the exporters' price sets pi*
    pay = np.array([[0.18 * 200, -0.12 * 100]])
    sol, trade, prices = outcome([[-100.0, 200.0, -100.0]], np.zeros((1, 3)), pay, 0.2, 0.1)
    a = allocate(sol, trade, prices, 1.0)
    assert a.pi_star[0] == pytest.approx(0.12)
    assert a.importer_price[0] == pytest.approx(0.18)
    assert a.exporter_price[0] == pytest.approx(0.12)


def test_one_sided_step_passes_through_at_the_tariff():
    pay = np.array([[0.2 * 100, 0.2 * 50]])
    sol, trade, prices = outcome([[-150.0, 100.0, 50.0]], np.zeros((1, 3)), pay, 0.2, 0.1)
    a = allocate(sol, trade, prices, 1.0)
    assert not a.two_sided[0]
    assert a.pi_star[0] == 0.2
    assert a.delta_star[0, 1:] == pytest.approx(pay[0])


def test_price_outside_the_band_is_an_error():
    sol, trade, prices = outcome([[0.0, 100.0, -100.0]], np.zeros((1, 3)), [[50.0, -50.0]], 0.2, 0.1)
    with pytest.raises(PriceOutOfBounds):
        allocate(sol, trade, prices, 1.0)


def test_per_unit_profit_of_a_uniform_group():
    W = np.array([[100.0, 40.0, -140.0]])
    d = np.array([[15.0, 6.0, -16.8]])
    phi = per_unit_profit(W, d, PriceSchedule(np.array([0.2]), np.array([0.1])), 1.0)
    assert phi[0] == pytest.approx([0.05, 0.05, 0.02])


def test_importer_benefit_vanishes_at_the_buy_price():
    W = np.array([[100.0]])
    phi = per_unit_profit(W, np.array([[20.0]]), PriceSchedule(np.array([0.2]), np.array([0.1])), 1.0)
    assert phi[0, 0] == pytest.approx(0.0)


def trading_step():
    """A random two-sided step with stage-2 payments inside the tariff band."""
    return st.tuples(
        st.lists(st.floats(1.0, 400.0), min_size=1, max_size=4),
        st.lists(st.floats(1.0, 400.0), min_size=1, max_size=4),
        st.lists(st.floats(0.0, 1.0), min_size=8, max_size=8),
        st.lists(st.floats(0.0, 0.2), min_size=4, max_size=4),
    )


@settings(max_examples=200, deadline=None)
@given(trading_step())
def test_random_allocations_conserve_money_and_equalize_groups(case):
    buys, sells, fracs, losses = case
    ub, us, dt = 0.25, 0.1, 0.5
    losses = [lf * b for lf, b in zip(losses, buys)]
    w_buy = np.array(buys) + np.array(losses[: len(buys)])
    I = w_buy.sum()
    E = np.array(sells) / sum(sells) * I
    w = np.concatenate([w_buy, -E])
    # per-bus stage-2 prices drawn inside the band, then rescaled so the step is zero-sum
    p = us + np.array(fracs[: len(w)] + [0.5] * max(0, len(w) - 8)) * (ub - us)
    pay = p * w * dt
    nb, ns = len(buys), len(sells)
    scale = -pay[:nb].sum() / pay[nb:].sum()
    pay[nb:] *= scale
    assume(np.all(us - 1e-12 <= pay[nb:] / (w[nb:] * dt)) and np.all(pay[nb:] / (w[nb:] * dt) <= ub + 1e-12))
    P_im = np.concatenate([[0.0], buys, -E])
    P_l = np.concatenate([[0.0], losses[: nb], np.zeros(ns)])
    sol, trade, prices = outcome([P_im], [P_l], [pay], ub, us, dt)
    a = allocate(sol, trade, prices, dt)
    assert abs(np.sum(a.delta_star[0])) < 1e-9
    assert np.nansum(a.profit_star) == pytest.approx(np.nansum(trade.profit), abs=1e-9)
    fm = fairness_metrics(a)
    assert fm["importer"][0] < 1e-9 and fm["exporter"][0] < 1e-9
    implied = a.delta_star[0, 1:] / (w * dt)
    assert np.ptp(implied[:nb]) < 1e-12 and np.ptp(implied[nb:]) < 1e-12
    assert us - 1e-9 <= a.pi_star[0] <= ub + 1e-9
    for k in range(nb + ns):
        assert a.rate[0, 1 + k] == pytest.approx(abs(w[k]) / (I if k < nb else E.sum()))
