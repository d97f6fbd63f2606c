"""Acceptance criteria, one test each; the terminal summary prints one line per criterion."""

import time

import numpy as np
import pytest

import conftest
from _builders import battery_scenario
from _oracles import battery_dp, sweep_oracle
from temarket.acpf import (InjectionSet, LimitBounds, VoltageState, branch_flows, check_limits, pf_jacobian,
                           pf_residuals, solve_newton_pf)
from temarket.allocation import fairness_metrics
from temarket.config import build_scenario, bundled
from temarket.market import build_stage1, build_stage2, solve_stage1
from temarket.network import build_admittance, read_case
from temarket.nlp import check_gradients
from temarket.reporting import REPORT_FILES, emit_reports, run_scenario

N_POINTS = 100


def record(k: int, ok: bool, detail: str) -> None:
    conftest.ACCEPTANCE[k] = (bool(ok), detail)
    assert ok, f"criterion {k}: {detail}"


def oracle_loss(net, V: np.ndarray) -> float:
    """Series loss from branch currents of the sweep voltages, kW."""
    pos = {b.id: k for k, b in enumerate(net.buses)}
    loss = 0.0
    for br in net.branches:
        z = complex(br.r, br.x)
        i = (V[pos[br.from_bus]] - V[pos[br.to_bus]]) / z
        loss += br.r * abs(i) ** 2
    return loss * net.kw_per_pu


def test_criterion_01_power_flow_oracle():
    net = read_case(bundled("case33.txt"))
    adm = build_admittance(net)
    inj = InjectionSet.from_loads(net)
    t0 = time.perf_counter()
    v, rep = solve_newton_pf(net, adm, inj)
    elapsed = time.perf_counter() - t0
    loss = branch_flows(net, adm, v).total_loss
    V = sweep_oracle(net, inj)
    ref_loss, ref_vmin = oracle_loss(net, V), float(np.abs(V).min())
    rel = abs(loss - ref_loss) / ref_loss
    dv = abs(v.magnitude.min() - ref_vmin)
    ok = rep.iterations <= 10 and rel < 0.01 and dv < 1e-3 and elapsed < 1.0
    record(1, ok, f"{rep.iterations} iterations, loss {loss:.3f} vs oracle {ref_loss:.3f} kW, "
                  f"min|V| gap {dv:.2e} pu, {elapsed:.3f} s")


@pytest.fixture(scope="module")
def day_problems(day_config):
    sc = build_scenario(day_config.truncated(2))
    return sc, build_stage1(sc), build_stage2(sc, solve_stage1(sc))


def random_point(p, rng):
    lo, hi = np.maximum(p.lower, -2.0), np.minimum(p.upper, 2.0)
    return np.clip(p.x0 + 0.05 * rng.standard_normal(p.n), lo, hi)


def pf_jacobian_error(net, adm, v, inj, h=1e-7) -> float:
    J = pf_jacobian(net, adm, v).toarray()
    n = net.n_bus
    x = np.concatenate([v.e, v.f])
    worst = 0.0
    for k in range(2 * n):
        xp, xm = x.copy(), x.copy()
        xp[k] += h
        xm[k] -= h
        fd = (pf_residuals(net, adm, VoltageState(xp[:n], xp[n:]), inj)
              - pf_residuals(net, adm, VoltageState(xm[:n], xm[n:]), inj)) / (2 * h)
        err = np.abs(J[:, k] - fd) / np.maximum(1.0, np.maximum(np.abs(J[:, k]), np.abs(fd)))
        worst = max(worst, float(err.max()))
    return worst


def test_criterion_02_derivative_audit(day_problems):
    sc, p1, p2 = day_problems
    net = sc.network
    adm = build_admittance(net)
    inj = InjectionSet.from_loads(net)
    rng = np.random.default_rng(2024)
    worst = {"pf": 0.0, "stage1": 0.0, "stage2": 0.0}
    for i in range(N_POINTS):
        v = VoltageState(1 + 0.05 * rng.standard_normal(net.n_bus), 0.05 * rng.standard_normal(net.n_bus))
        worst["pf"] = max(worst["pf"], pf_jacobian_error(net, adm, v, inj))
        for name, p in (("stage1", p1), ("stage2", p2)):
            chk = check_gradients(p, random_point(p, rng), max_columns=60, seed=i)
            worst[name] = max(worst[name], chk.max_error)
    ok = max(worst.values()) < 1e-5
    record(2, ok, f"{N_POINTS} points, max relative error pf {worst['pf']:.1e}, "
                  f"stage 1 {worst['stage1']:.1e}, stage 2 {worst['stage2']:.1e}")


def test_criterion_03_stage1_matches_grid_search():
    t0 = time.perf_counter()
    sc = battery_scenario()
    nlp = float(np.nansum(solve_stage1(sc).costs.C_total))
    grid = battery_dp(sc)
    elapsed = time.perf_counter() - t0
    gap = abs(nlp - grid) / abs(grid)
    ok = gap <= 0.01 and elapsed < 60.0
    record(3, ok, f"NLP {nlp:.4f} $ vs grid {grid:.4f} $ ({gap:.2%}), {elapsed:.1f} s")


def test_criterion_04_zero_sum(day_run):
    b, _ = day_run
    s = np.abs(np.nansum(b.trade.delta, axis=1)).max()
    s_star = np.abs(np.nansum(b.allocation.delta_star, axis=1)).max()
    ok = len(b.trade.delta) == 48 and s < 1e-6 and s_star < 1e-6
    record(4, ok, f"max |sum delta| {s:.1e} $, max |sum delta*| {s_star:.1e} $ over {len(b.trade.delta)} steps")


def test_criterion_05_prices_in_the_tariff_band(day_run):
    b, _ = day_run
    sc, a = b.scenario, b.allocation
    ub, us = sc.prices.u_b, sc.prices.u_s
    pi = b.trade.price[:, 1:]
    fin = np.isfinite(pi)
    in_band = np.all((pi >= us[:, None] - 1e-9)[fin]) and np.all((pi <= ub[:, None] + 1e-9)[fin])
    star = a.pi_star
    ok_star = star.shape == (sc.T,) and np.all(np.isfinite(star))
    star_band = ok_star and np.all((us - 1e-9 <= star) & (star <= ub + 1e-9))
    # a step has PV surplus when some participant's renewable output exceeds its own load
    surplus = np.any(b.stage2.P_re[:, 1:] > sc.load_P[:, 1:] + 1e-6, axis=1)
    margin = float(np.min(ub[surplus] - star[surplus])) if surplus.any() else np.nan
    ok = in_band and star_band and surplus.any() and margin > 0
    record(5, ok, f"pi_i in band: {in_band}, pi* scalar and in band: {star_band}, "
                  f"{int(surplus.sum())} surplus steps, min(u_b - pi*) there {margin:.4f} $/kWh")


def test_criterion_06_voltage_feasibility(day_run):
    b, _ = day_run
    sc = b.scenario
    bounds = LimitBounds(v_min=sc.v_min, v_max=sc.v_max)
    findings = []
    for sol in (b.stage1, b.stage2):
        for t in range(sc.T):
            findings += check_limits(VoltageState(sol.e[t], sol.f[t]), bounds=bounds, bus_ids=sc.network.bus_ids)
    lo = min(b.stage1.v_mag.min(), b.stage2.v_mag.min())
    hi = max(b.stage1.v_mag.max(), b.stage2.v_mag.max())
    ok = (sc.v_min, sc.v_max) == (0.95, 1.05) and not findings
    record(6, ok, f"{len(findings)} findings, |V| in [{lo:.4f}, {hi:.4f}] pu")


def test_criterion_07_profit_properties(day_run):
    b, _ = day_run
    rho, rho_star = b.trade.profit, b.allocation.profit_star
    min_rho, min_star = np.nanmin(rho), np.nanmin(rho_star)
    total = np.nansum(rho)
    gap = np.abs(np.nansum(rho, axis=1) - b.imbalance)
    ok_sign = min_rho >= -1e-6 and min_star >= -1e-6 and total >= 0
    ok = ok_sign and gap.max() < 1e-4
    record(7, ok, f"min profit {min_rho:.1e}, min profit* {min_star:.1e}, total {total:.2f} $; "
                  f"profit vs imbalance: max gap {gap.max():.2f} $ at step {int(np.argmax(gap))}, "
                  f"{int(np.sum(gap >= 1e-4))}/{len(gap)} steps off")


def test_criterion_08_fairness(day_run):
    b, _ = day_run
    fm = fairness_metrics(b.allocation)
    exp, imp = np.nanmax(fm["exporter"], initial=0.0), np.nanmax(fm["importer"], initial=0.0)
    drift = np.abs(np.nansum(b.allocation.profit_star, axis=1) - np.nansum(b.trade.profit, axis=1)).max()
    ok = exp < 1e-6 and imp < 1e-3 and drift < 1e-6
    record(8, ok, f"exporter spread {exp:.1e}, importer spread {imp:.1e} $/kWh, profit drift {drift:.1e} $")


def test_criterion_09_battery_invariants(day_run):
    b, _ = day_run
    sc = b.scenario
    soc_lo, soc_hi, overlap, short = np.inf, -np.inf, 0.0, -np.inf
    for sol in (b.stage1, b.stage2):
        for bus, dev in sc.devices.items():
            bat = dev.battery
            if bat is None:
                continue
            k = sc.network.index_of(bus)
            soc = sol.E_b[:, k] / bat.capacity
            soc_lo, soc_hi = min(soc_lo, soc.min()), max(soc_hi, soc.max())
            overlap = max(overlap, float(np.minimum(sol.P_chg[:, k], sol.P_dis[:, k]).max()))
            short = max(short, bat.e_initial - sol.E_b[-1, k])
    ok = soc_lo >= 0.4 - 1e-9 and soc_hi <= 0.9 + 1e-9 and overlap <= 1e-6 and short <= 0.0
    record(9, ok, f"SoC in [{soc_lo:.6f}, {soc_hi:.6f}], max overlap {overlap:.1e} kW, "
                  f"terminal minus initial >= {-short:.1e} kWh")


def test_criterion_10_runtime_and_determinism(day_run, day_config, tmp_path):
    b, seconds = day_run
    t0 = time.perf_counter()
    again = run_scenario(day_config)
    seconds2 = time.perf_counter() - t0
    emit_reports(b, tmp_path / "a")
    emit_reports(again, tmp_path / "b")
    same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
               for f in REPORT_FILES + ("manifest.json",))
    ok = max(seconds, seconds2) < 600.0 and same
    record(10, ok, f"runs took {seconds:.1f} s and {seconds2:.1f} s, reports byte-identical: {same}")
