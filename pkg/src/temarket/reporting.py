"""Run orchestration, CSV reports and a verifier that re-reads them.

A run executes the baseline stage, the trading stage and the benefit
allocation in order. Reports are plain CSV files with numbers written to
nine significant digits, plus ``manifest.json`` that lists the files and
echoes the configuration. Identical inputs give byte-identical reports:
nothing time-dependent is written.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .allocation import EXPORTER, IMPORTER, AllocationError, AllocationResult, allocate, fairness_metrics
from .config import RunConfig, build_scenario
from .market import (DispatchSolution, InfeasibleScenario, Scenario, StageFailed, TradeOutcome,
                     cash_flow_imbalance, solve_stage1, solve_stage2)
from .nlp import SolveReport, Status

log = logging.getLogger(__name__)

SCHEMA_VERSION = "1.0"
REPORT_FILES = ("voltages.csv", "dispatch.csv", "prices.csv", "cashflow.csv", "profits.csv", "summary.csv")

# tolerances re-asserted by the verifier
ZERO_SUM_TOL = 1e-6
PRICE_TOL = 1e-9
EXPORTER_SPREAD_TOL = 1e-6
IMPORTER_SPREAD_TOL = 1e-3
PROFIT_TOL = 1e-6
VOLTAGE_TOL = 1e-9
# nine significant digits leave a relative rounding error of at most 5e-9
# per written value; sums read back from disk are allowed that much per term
ROUNDING = 5e-9


class RunFailed(RuntimeError):
    """A stage did not finish; ``stage`` names it and ``infeasible`` tells why."""

    def __init__(self, stage: str, cause: Exception, infeasible: bool):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause
        self.infeasible = infeasible


class IoFailure(OSError):
    pass


@dataclass
class ResultsBundle:
    config: RunConfig
    scenario: Scenario
    stage1: DispatchSolution
    stage2: DispatchSolution
    trade: TradeOutcome
    allocation: AllocationResult
    imbalance: np.ndarray
    seconds: dict[str, float] = field(default_factory=dict)
    schema_version: str = SCHEMA_VERSION

    @property
    def reports(self) -> dict[str, list[SolveReport]]:
        return {"stage1": self.stage1.reports, "stage2": self.stage2.reports}


def _stage_error(stage: str, exc: Exception) -> RunFailed:
    if isinstance(exc, StageFailed):
        infeasible = exc.report.status is Status.INFEASIBLE
    else:
        infeasible = isinstance(exc, InfeasibleScenario)
    return RunFailed(stage, exc, infeasible)


def run_scenario(cfg: RunConfig) -> ResultsBundle:
    """Baseline stage, trading stage and allocation for one configuration.

    Raises:
        ConfigInvalid: the scenario cannot be assembled.
        RunFailed: a stage stopped; the exception carries the stage name.
    """
    sc = build_scenario(cfg)
    seconds = {}
    t0 = time.perf_counter()
    try:
        s1 = solve_stage1(sc)
    except (StageFailed, InfeasibleScenario) as exc:
        raise _stage_error("stage 1", exc) from exc
    seconds["stage1"] = time.perf_counter() - t0
    log.info("stage 1: %s in %.1f s", s1.report.status.value, seconds["stage1"])

    t0 = time.perf_counter()
    try:
        s2, trade = solve_stage2(sc, s1)
    except StageFailed as exc:
        raise _stage_error("stage 2", exc) from exc
    seconds["stage2"] = time.perf_counter() - t0
    log.info("stage 2: %s in %.1f s", s2.report.status.value, seconds["stage2"])

    t0 = time.perf_counter()
    try:
        alloc = allocate(s2, trade, sc.prices, sc.dt, slack_index=sc.network.slack_index)
    except AllocationError as exc:
        raise RunFailed("allocation", exc, infeasible=False) from exc
    seconds["allocation"] = time.perf_counter() - t0
    return ResultsBundle(config=cfg, scenario=sc, stage1=s1, stage2=s2, trade=trade, allocation=alloc,
                         imbalance=cash_flow_imbalance(sc, s1), seconds=seconds)


# ------------------------------------------------------------------ writing

def fmt(v) -> str:
    """Nine significant digits; integers and labels pass through."""
    if isinstance(v, (str, bool, np.bool_)):
        return str(v).lower() if isinstance(v, (bool, np.bool_)) else v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if np.isnan(v):
        return "nan"
    if v == 0.0:
        return "0"
    return f"{v:.9g}"


def _write(path: Path, header: list[str], rows) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([fmt(v) for v in row])
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _config_echo(b: ResultsBundle) -> dict:
    cfg = b.config
    return {
        "case": cfg.case_path.name,
        "steps": cfg.steps,
        "dt": cfg.dt,
        "v_min": cfg.v_min,
        "v_max": cfg.v_max,
        "reactive_ratio": cfg.q_ratio,
        "battery_convention": cfg.battery_convention.value,
        "seed": cfg.seed,
        "solver": {"tol": cfg.tol, "max_iter": cfg.max_iter, "n_starts": cfg.n_starts},
        "ders": [{"bus": d.bus, "pv_kw": d.pv_kw, "battery": d.battery is not None, "dg": d.dg is not None}
                 for d in cfg.ders],
    }


def emit_reports(b: ResultsBundle, out_dir: str | Path) -> list[Path]:
    """Write the CSV reports and manifest; returns the written paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out}: {exc}") from exc
    sc, s1, s2, tr, al = b.scenario, b.stage1, b.stage2, b.trade, b.allocation
    ids = sc.network.bus_ids
    T, nb = s1.P_im.shape
    dt = sc.dt
    slack = sc.network.slack_index
    part = [k for k in range(nb) if k != slack]
    steps = range(T)

    _write(out / "voltages.csv", ["bus", "step", "v_baseline", "v_trading"],
           ((ids[k], t + 1, s1.v_mag[t, k], s2.v_mag[t, k]) for k in range(nb) for t in steps))

    def dispatch_rows():
        for sol in (s1, s2):
            for k in range(nb):
                for t in steps:
                    yield (sol.stage, ids[k], t + 1, sol.P_im[t, k], sol.P_b[t, k], sol.P_chg[t, k],
                           sol.P_dis[t, k], sol.E_b[t, k], sol.P_dg[t, k], sol.P_re[t, k], sol.Q_g[t, k],
                           sol.P_l[t, k])

    _write(out / "dispatch.csv", ["stage", "bus", "step", "P_im", "P_b", "P_chg", "P_dis", "E_b", "P_dg", "P_re",
                                  "Q_g", "P_l"], dispatch_rows())

    price_cols = [f"pi_bus{ids[k]}" for k in part]
    _write(out / "prices.csv", ["step", "u_b", "u_s", "pi_star", "two_sided", *price_cols],
           ((t + 1, sc.prices.u_b[t], sc.prices.u_s[t], al.pi_star[t], bool(al.two_sided[t]),
             *tr.price[t, part]) for t in steps))

    _write(out / "cashflow.csv", ["bus", "step", "delta", "delta_star"],
           ((ids[k], t + 1, tr.delta[t, k], al.delta_star[t, k]) for k in range(nb) for t in steps))

    W = s2.P_im + s2.P_l
    _write(out / "profits.csv", ["bus", "step", "group", "rate", "draw_kwh", "profit", "profit_star", "phi"],
           ((ids[k], t + 1, int(al.group[t, k]), al.rate[t, k], W[t, k] * dt, tr.profit[t, k],
             al.profit_star[t, k], al.phi[t, k]) for k in part for t in steps))

    spread = fairness_metrics(al)
    _write(out / "summary.csv", ["step", "payments", "payments_star", "profit", "profit_star", "imbalance",
                                 "utility_import_kw", "loss_baseline_kw", "loss_trading_kw", "importer_spread",
                                 "exporter_spread"],
           ((t + 1, np.nansum(tr.delta[t]), np.nansum(al.delta_star[t]), np.nansum(tr.profit[t]),
             np.nansum(al.profit_star[t]), b.imbalance[t], tr.utility_import[t], np.sum(s1.P_l[t]),
             np.sum(s2.P_l[t]), spread["importer"][t], spread["exporter"][t]) for t in steps))

    files = []
    for name in REPORT_FILES:
        data = (out / name).read_bytes()
        files.append({"name": name, "sha256": hashlib.sha256(data).hexdigest(), "bytes": len(data)})
    manifest = {
        "schema_version": b.schema_version,
        "files": files,
        "config": _config_echo(b),
        "solver": {stage: [{"status": r.status.value, "iterations": r.iterations, "objective": fmt(r.objective)}
                           for r in reps] for stage, reps in b.reports.items()},
        "tolerances": {"zero_sum": ZERO_SUM_TOL, "price": PRICE_TOL, "exporter_spread": EXPORTER_SPREAD_TOL,
                       "importer_spread": IMPORTER_SPREAD_TOL, "profit": PROFIT_TOL},
    }
    try:
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write manifest: {exc}") from exc
    return [out / n for n in REPORT_FILES] + [out / "manifest.json"]


# ---------------------------------------------------------------- verifying

def _read(path: Path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    cols = {}
    for j, name in enumerate(header):
        vals = [r[j] for r in body]
        try:
            cols[name] = np.array([float(v) for v in vals])
        except ValueError:
            cols[name] = np.array(vals)
    return cols


def check_reports(out_dir: str | Path) -> list[str]:
    """Re-assert the market invariants from the files alone.

    Returns one finding per violation; an empty list means the reports
    pass. Raises IoFailure when a file is missing or unreadable.
    """
    out = Path(out_dir)
    try:
        manifest = json.loads((out / "manifest.json").read_text())
        data = {name: _read(out / name) for name in REPORT_FILES}
    except (OSError, ValueError, IndexError) as exc:
        raise IoFailure(f"cannot read reports in {out}: {exc}") from exc
    findings = []
    for entry in manifest.get("files", []):
        digest = hashlib.sha256((out / entry["name"]).read_bytes()).hexdigest()
        if digest != entry["sha256"]:
            findings.append(f"{entry['name']}: checksum differs from manifest")

    cash = data["cashflow.csv"]
    for col in ("delta", "delta_star"):
        for t in np.unique(cash["step"]):
            vals = cash[col][cash["step"] == t]
            vals = vals[np.isfinite(vals)]
            tol = ZERO_SUM_TOL + ROUNDING * np.abs(vals).sum()
            if abs(vals.sum()) > tol:
                findings.append(f"step {int(t)}: {col} sums to {vals.sum():.3g} $")

    pr = data["prices.csv"]
    ub, us = pr["u_b"], pr["u_s"]
    for col in [c for c in pr if c.startswith("pi_")]:
        p = pr[col]
        bad = np.isfinite(p) & ((p < us - PRICE_TOL) | (p > ub + PRICE_TOL))
        for t in np.flatnonzero(bad):
            findings.append(f"step {int(pr['step'][t])}: {col}={p[t]:.9g} outside [{us[t]:.9g}, {ub[t]:.9g}]")

    prof = data["profits.csv"]
    for col in ("profit", "profit_star"):
        bad = prof[col] < -PROFIT_TOL
        for r in np.flatnonzero(bad):
            findings.append(f"bus {int(prof['bus'][r])} step {int(prof['step'][r])}: {col}={prof[col][r]:.3g} $")
    for g, tol, name in ((EXPORTER, EXPORTER_SPREAD_TOL, "exporter"), (IMPORTER, IMPORTER_SPREAD_TOL, "importer")):
        for t in np.unique(prof["step"]):
            sel = (prof["step"] == t) & (prof["group"] == g) & np.isfinite(prof["phi"])
            if sel.sum() > 1:
                phi = prof["phi"][sel]
                # phi is a ratio of written values; allow their relative rounding
                slack_ = 4 * ROUNDING * np.max(np.abs(phi)) + ROUNDING * np.max(np.abs(prof["profit_star"][sel]))
                if phi.max() - phi.min() > tol + slack_:
                    findings.append(f"step {int(t)}: {name} per-unit profit spread {phi.max() - phi.min():.3g} $/kWh")

    cfg = manifest.get("config", {})
    v_min, v_max = cfg.get("v_min", 0.95), cfg.get("v_max", 1.05)
    vol = data["voltages.csv"]
    for col in ("v_baseline", "v_trading"):
        bad = (vol[col] < v_min - VOLTAGE_TOL) | (vol[col] > v_max + VOLTAGE_TOL)
        for r in np.flatnonzero(bad):
            findings.append(f"bus {int(vol['bus'][r])} step {int(vol['step'][r])}: {col}={vol[col][r]:.9g} pu")
    return findings
