"""Run configuration: YAML loading, defaults and scenario assembly.

A config names a case file, per-step load and PV shapes, a buy-price
schedule and the DERs installed at each bus. Relative paths resolve
against the config file's directory, then against the bundled data.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .der import BatterySpec, DGSpec, EfficiencyConvention, PriceSchedule
from .market import BusDevices, Scenario, market_solver_options
from .network import CaseError, Network, read_case


class ConfigInvalid(ValueError):
    """Raised with one message per offending field."""

    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


class WrongLength(ConfigInvalid):
    def __init__(self, msg: str):
        super().__init__([msg])


@dataclass(frozen=True)
class DerConfig:
    bus: int
    pv_kw: float = 0.0
    battery: BatterySpec | None = None
    dg: DGSpec | None = None


@dataclass
class RunConfig:
    case_path: Path
    load_shape: np.ndarray
    pv_shape: np.ndarray
    u_b: np.ndarray
    u_s: np.ndarray
    steps: int = 48
    dt: float = 0.5
    v_min: float = 0.95
    v_max: float = 1.05
    ders: list[DerConfig] = field(default_factory=list)
    q_ratio: float = 0.6
    battery_convention: EfficiencyConvention = EfficiencyConvention.AS_PRINTED
    tol: float = 1e-8
    max_iter: int = 500
    n_starts: int = 3
    seed: int = 0
    output: Path = Path("results")
    verbose: bool = False
    source: dict[str, Any] = field(default_factory=dict)

    def truncated(self, steps: int) -> "RunConfig":
        """The same run over the first ``steps`` steps."""
        if not 1 <= steps <= self.steps:
            raise ConfigInvalid([f"steps: {steps} outside 1..{self.steps}"])
        return replace(self, steps=steps, load_shape=self.load_shape[:steps], pv_shape=self.pv_shape[:steps],
                       u_b=self.u_b[:steps], u_s=self.u_s[:steps])


def bundled(name: str) -> Path:
    return Path(str(resources.files("temarket") / "data" / name))


def _resolve(name: str, base: Path) -> Path:
    p = Path(name)
    if p.is_absolute():
        return p
    for cand in (base / p, bundled(name)):
        if cand.exists():
            return cand
    return base / p


def read_series(path: Path) -> np.ndarray:
    """Read ``step value`` lines (steps from 1, in order); ``#`` starts a comment."""
    vals: list[float] = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            try:
                if len(parts) == 1:
                    vals.append(float(parts[0]))
                    continue
                step, value = int(parts[0]), float(parts[1])
            except ValueError as exc:
                raise ConfigInvalid([f"{path.name}:{lineno}: {exc}"]) from None
            if step != len(vals) + 1:
                raise ConfigInvalid([f"{path.name}:{lineno}: expected step {len(vals) + 1}, got {step}"])
            vals.append(value)
    return np.array(vals)


def derive_halfhour_prices(hourly) -> PriceSchedule:
    """Expand 24 hourly buy prices to 48 half-hour steps.

    The first half of hour h keeps price[h]; the second half takes the mean
    of price[h] and the next hour's price, wrapping at midnight. The sell
    price is half the buy price.
    """
    h = np.asarray(hourly, dtype=float)
    if h.shape != (24,):
        raise WrongLength(f"need 24 hourly prices, got {h.size}")
    ub = np.empty(48)
    ub[0::2] = h
    ub[1::2] = 0.5 * (h + np.roll(h, -1))
    return PriceSchedule(ub, ub / 2)


_TOP_KEYS = {"case", "horizon", "profiles", "prices", "voltage", "ders", "defaults", "solver", "seed", "output",
             "reactive_ratio", "battery_convention", "verbose"}


def _spec(cls, base, override, where: str, problems: list[str]):
    if override in (None, False):
        return None
    kw = {f.name: getattr(base, f.name) for f in fields(cls)}
    if isinstance(override, dict):
        for k, v in override.items():
            if k not in kw:
                problems.append(f"{where}.{k}: unknown field")
            else:
                kw[k] = v
    elif override is not True:
        problems.append(f"{where}: expected true/false or a mapping")
        return None
    try:
        return cls(**kw)
    except (ValueError, TypeError) as exc:
        problems.append(f"{where}: {exc}")
        return None


def load_config(path: str | Path) -> RunConfig:
    """Read and validate a YAML run config, applying Table-I style defaults."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigInvalid([f"{path}: {exc}"]) from None
    if not isinstance(raw, dict):
        raise ConfigInvalid(["top level must be a mapping"])
    return config_from_dict(raw, path.parent)


def config_from_dict(raw: dict, base: Path) -> RunConfig:
    problems: list[str] = []
    for k in raw:
        if k not in _TOP_KEYS:
            problems.append(f"{k}: unknown key")

    case = _resolve(str(raw.get("case", "case33.txt")), base)
    if not case.exists():
        problems.append(f"case: file {case} not found")

    hz = raw.get("horizon") or {}
    steps, dt = int(hz.get("steps", 48)), float(hz.get("dt", 0.5))
    if steps < 1:
        problems.append("horizon.steps: must be positive")
    if dt <= 0:
        problems.append("horizon.dt: must be positive")

    prof = raw.get("profiles") or {}

    def series(key: str, section: dict, default: str | None, where: str) -> np.ndarray | None:
        name = section.get(key, default)
        if name is None:
            return None
        if isinstance(name, list):
            return np.asarray(name, dtype=float)
        p = _resolve(str(name), base)
        if not p.exists():
            problems.append(f"{where}.{key}: file {p} not found")
            return None
        try:
            return read_series(p)
        except ConfigInvalid as exc:
            problems.extend(f"{where}.{key}: {m}" for m in exc.problems)
            return None

    load_shape = series("load_shape", prof, "load_shape.txt", "profiles")
    pv_shape = series("pv_shape", prof, "pv_shape.txt", "profiles")
    for name, arr in (("load_shape", load_shape), ("pv_shape", pv_shape)):
        if arr is not None:
            if len(arr) != steps:
                problems.append(f"profiles.{name}: length {len(arr)} does not match {steps} steps")
            elif np.any(arr < 0) or not np.all(np.isfinite(arr)):
                problems.append(f"profiles.{name}: values must be finite and nonnegative")

    pr = raw.get("prices") or {}
    u_b = u_s = None
    if "buy" in pr:
        u_b = series("buy", pr, None, "prices")
        if u_b is not None:
            u_s = series("sell", pr, None, "prices") if "sell" in pr else u_b / 2
    else:
        hourly = series("hourly_buy", pr, "tou_hourly.txt", "prices")
        if hourly is not None:
            if steps == 48 and abs(dt - 0.5) < 1e-12 and len(hourly) == 24:
                try:
                    sched = derive_halfhour_prices(hourly)
                    u_b, u_s = sched.u_b, sched.u_s
                except ConfigInvalid as exc:
                    problems.extend(f"prices.hourly_buy: {m}" for m in exc.problems)
            else:
                u_b, u_s = hourly, hourly / 2
    for name, arr in (("buy", u_b), ("sell", u_s)):
        if arr is not None and len(arr) != steps:
            problems.append(f"prices.{name}: length {len(arr)} does not match {steps} steps")
    if u_b is not None and u_s is not None and len(u_b) == len(u_s):
        if np.any(u_s < 0) or np.any(u_s > u_b):
            problems.append("prices: need 0 <= sell <= buy at every step")

    volt = raw.get("voltage") or {}
    v_min, v_max = float(volt.get("min", 0.95)), float(volt.get("max", 1.05))
    if not 0 < v_min < v_max:
        problems.append("voltage: need 0 < min < max")

    defaults = raw.get("defaults") or {}
    bat_base = _spec(BatterySpec, BatterySpec(), defaults.get("battery", True), "defaults.battery", problems) \
        or BatterySpec()
    dg_base = _spec(DGSpec, DGSpec(), defaults.get("dg", True), "defaults.dg", problems) or DGSpec()

    ders: list[DerConfig] = []
    seen: set[int] = set()
    for k, d in enumerate(raw.get("ders") or []):
        where = f"ders[{k}]"
        if not isinstance(d, dict) or "bus" not in d:
            problems.append(f"{where}: needs a bus")
            continue
        extra = set(d) - {"bus", "pv_kw", "battery", "dg"}
        if extra:
            problems.append(f"{where}: unknown keys {sorted(extra)}")
        bus = int(d["bus"])
        if bus in seen:
            problems.append(f"{where}.bus: bus {bus} listed twice")
        seen.add(bus)
        pv_kw = float(d.get("pv_kw", 0.0))
        if pv_kw < 0:
            problems.append(f"{where}.pv_kw: must be nonnegative")
        ders.append(DerConfig(bus=bus, pv_kw=pv_kw,
                              battery=_spec(BatterySpec, bat_base, d.get("battery"), f"{where}.battery", problems),
                              dg=_spec(DGSpec, dg_base, d.get("dg"), f"{where}.dg", problems)))

    sol = raw.get("solver") or {}
    try:
        conv = EfficiencyConvention(raw.get("battery_convention", "as_printed"))
    except ValueError:
        problems.append("battery_convention: expected as_printed or physical")
        conv = EfficiencyConvention.AS_PRINTED

    if problems:
        raise ConfigInvalid(problems)
    return RunConfig(case_path=case, load_shape=load_shape, pv_shape=pv_shape, u_b=np.asarray(u_b, dtype=float),
                     u_s=np.asarray(u_s, dtype=float), steps=steps, dt=dt, v_min=v_min, v_max=v_max, ders=ders,
                     q_ratio=float(raw.get("reactive_ratio", 0.6)), battery_convention=conv,
                     tol=float(sol.get("tol", 1e-8)), max_iter=int(sol.get("max_iter", 500)),
                     n_starts=int(sol.get("n_starts", 3)), seed=int(raw.get("seed", 0)),
                     output=Path(raw.get("output", "results")), verbose=bool(raw.get("verbose", False)), source=raw)


def build_scenario(cfg: RunConfig) -> Scenario:
    """Network, loads, prices and devices for a validated config."""
    try:
        net: Network = read_case(cfg.case_path)
    except (OSError, CaseError) as exc:
        raise ConfigInvalid([f"case: {exc}"]) from None
    problems = []
    ids = set(net.bus_ids)
    devices = {}
    for d in cfg.ders:
        if d.bus not in ids or d.bus == net.bus_ids[net.slack_index]:
            problems.append(f"ders: bus {d.bus} is not a participant bus of the case")
            continue
        devices[d.bus] = BusDevices(battery=d.battery, dg=d.dg,
                                    pv=cfg.pv_shape * d.pv_kw if d.pv_kw > 0 else None)
    if problems:
        raise ConfigInvalid(problems)
    load_P = np.outer(cfg.load_shape, net.load_kw())
    load_Q = np.outer(cfg.load_shape, net.load_kvar())
    solver = market_solver_options(tol=cfg.tol, max_iter=cfg.max_iter, verbose=cfg.verbose)
    return Scenario(network=net, devices=devices, load_P=load_P, load_Q=load_Q,
                    prices=PriceSchedule(cfg.u_b, cfg.u_s), dt=cfg.dt, v_min=cfg.v_min, v_max=cfg.v_max,
                    q_ratio=cfg.q_ratio, battery_convention=cfg.battery_convention, solver=solver,
                    n_starts=cfg.n_starts, seed=cfg.seed)
