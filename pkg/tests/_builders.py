"""Small hand-made networks and scenarios shared by the tests."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import yaml

from temarket.der import BatterySpec, DGSpec, PriceSchedule
from temarket.market import BusDevices, Scenario
from temarket.network import Branch, Bus, BusKind, Network


def case_text(buses, branches, base=(10.0, 12.66)) -> str:
    """Case-file text from (id, kind, P, Q) bus tuples and (from, to, r_ohm, x_ohm) branches."""
    lines = [f"BASE {base[0]} {base[1]}", "BUS id kind Pd_kW Qd_kvar microgrid"]
    lines += [f"BUS {i} {k} {p} {q} 0" for i, k, p, q in buses]
    lines += ["BRANCH from to r_ohm x_ohm"]
    lines += [f"BRANCH {f} {t} {r} {x}" for f, t, r, x in branches]
    return "\n".join(lines) + "\n"


def two_bus_network(load_kw=300.0, load_kvar=100.0, r=0.02, x=0.01) -> Network:
    return Network((Bus(1, BusKind.SLACK), Bus(2, BusKind.PROSUMER, load_kw, load_kvar)),
                   (Branch(1, 2, r, x),))


def battery_scenario(T=4, dt=1.0) -> Scenario:
    """Slack plus one prosumer with a 100 kWh battery and a rising tariff.

    Reactive support is switched off so the only decision is the battery
    schedule, which keeps a grid search over it exhaustive.
    """
    net = two_bus_network()
    load = np.array([1.0, 0.8, 1.1, 1.3])[:T]
    lp = np.outer(load, net.load_kw())
    lq = np.outer(load, net.load_kvar())
    ub = np.array([0.08, 0.12, 0.30, 0.25])[:T]
    bat = BatterySpec(capacity=100.0, p_charge_max=50.0, p_discharge_max=50.0, degradation_cost=0.01)
    return Scenario(net, {2: BusDevices(battery=bat)}, lp, lq, PriceSchedule(ub, ub / 2), dt=dt, q_ratio=0.0)


def four_bus_scenario(T=6, dg=True, seed=1) -> Scenario:
    """One consumer and two prosumers with PV, a battery and a diesel unit."""
    buses = [Bus(1, BusKind.SLACK), Bus(2, BusKind.CONSUMER, 300, 100), Bus(3, BusKind.PROSUMER, 200, 80),
             Bus(4, BusKind.PROSUMER, 150, 50)]
    br = [Branch(1, 2, 0.01, 0.008), Branch(2, 3, 0.02, 0.01), Branch(2, 4, 0.015, 0.02)]
    net = Network(buses, br)
    rng = np.random.default_rng(seed)
    lp = np.tile(net.load_kw(), (T, 1)) * rng.uniform(0.6, 1.2, (T, 1))
    lq = np.tile(net.load_kvar(), (T, 1))
    ub = np.linspace(0.1, 0.3, T)
    dev = {3: BusDevices(battery=BatterySpec(), pv=rng.uniform(0, 600, T)),
           4: BusDevices(dg=DGSpec() if dg else None, pv=rng.uniform(0, 300, T))}
    return Scenario(net, dev, lp, lq, PriceSchedule(ub, ub / 2), dt=0.5)


def write_two_bus_config(folder: Path, steps=4, **extra) -> Path:
    """A runnable YAML config for a 2-bus feeder with PV and a battery."""
    folder.mkdir(parents=True, exist_ok=True)
    (folder / "two.txt").write_text(case_text([(1, "slack", 0, 0), (2, "prosumer", 200, 60)],
                                              [(1, 2, 0.5, 0.3)]))
    ub = [0.10, 0.15, 0.30, 0.20, 0.12, 0.10][:steps]
    raw = {
        "case": "two.txt",
        "horizon": {"steps": steps, "dt": 0.5},
        "profiles": {"load_shape": [1.0, 0.9, 1.2, 1.1, 1.0, 0.8][:steps],
                     "pv_shape": [0.0, 0.6, 0.9, 0.3, 0.0, 0.0][:steps]},
        "prices": {"buy": ub, "sell": [u / 2 for u in ub]},
        "ders": [{"bus": 2, "pv_kw": 150, "battery": True}],
        "output": "results",
    }
    raw.update(extra)
    path = folder / "two.yaml"
    path.write_text(yaml.safe_dump(raw))
    return path
