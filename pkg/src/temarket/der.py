"""Distributed energy resource models and per-bus cost terms.

Powers are in kW, energies in kWh, durations in hours and money in $.
Battery power follows the generator sign convention: positive discharges
into the bus, negative charges from it.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np


class DerError(ValueError):
    pass


class RateLimitExceeded(DerError):
    pass


class SocOutOfRange(DerError):
    pass


class DispatchOutOfRange(DerError):
    pass


class NegativeLoss(DerError):
    pass


class EfficiencyConvention(str, Enum):
    """How efficiencies enter the storage update.

    ``AS_PRINTED`` multiplies both legs by their efficiency, so discharging
    P for dt removes eta_d*P*dt from storage. ``PHYSICAL`` divides the
    discharge leg instead, which makes every round trip lossy.
    """

    AS_PRINTED = "as_printed"
    PHYSICAL = "physical"


@dataclass(frozen=True)
class BatterySpec:
    capacity: float = 1000.0
    eta_c: float = 0.9
    eta_d: float = 0.9
    soc_min: float = 0.4
    soc_max: float = 0.9
    p_charge_max: float = 500.0
    p_discharge_max: float = 500.0
    degradation_cost: float = 0.1
    initial_soc: float = 0.5

    def __post_init__(self) -> None:
        if not 0 < self.soc_min < self.soc_max <= 1:
            raise DerError(f"need 0 < soc_min < soc_max <= 1, got [{self.soc_min}, {self.soc_max}]")
        if min(self.capacity, self.p_charge_max, self.p_discharge_max) <= 0:
            raise DerError("battery capacity and power limits must be positive")
        if not (0 < self.eta_c <= 1 and 0 < self.eta_d <= 1):
            raise DerError("efficiencies must lie in (0, 1]")
        if not self.soc_min <= self.initial_soc <= self.soc_max:
            raise DerError(f"initial_soc {self.initial_soc} outside [{self.soc_min}, {self.soc_max}]")
        if self.degradation_cost < 0:
            raise DerError("degradation cost must be nonnegative")

    @property
    def e_min(self) -> float:
        return self.soc_min * self.capacity

    @property
    def e_max(self) -> float:
        return self.soc_max * self.capacity

    @property
    def e_initial(self) -> float:
        return self.initial_soc * self.capacity


@dataclass(frozen=True)
class DGSpec:
    """Diesel generator with quadratic fuel cost a*P^2 + b*P + c."""

    p_min: float = 0.0
    p_max: float = 1000.0
    a: float = 2.45e-5
    b: float = 0.1833
    c: float = 26.235
    on_threshold: float = 1.0

    def __post_init__(self) -> None:
        if not 0 <= self.p_min <= self.p_max:
            raise DerError(f"need 0 <= p_min <= p_max, got [{self.p_min}, {self.p_max}]")
        if self.a < 0:
            raise DerError("quadratic coefficient must be nonnegative")
        if self.on_threshold <= 0:
            raise DerError("on_threshold must be positive")


@dataclass(frozen=True)
class REProfile:
    available: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.available, dtype=float)
        if arr.ndim != 1 or np.any(arr < 0) or not np.all(np.isfinite(arr)):
            raise DerError("renewable profile must be a finite nonnegative vector")
        object.__setattr__(self, "available", arr)

    def __len__(self) -> int:
        return len(self.available)


@dataclass(frozen=True)
class PriceSchedule:
    """Utility buy (u_b) and sell (u_s) prices per step, $/kWh."""

    u_b: np.ndarray
    u_s: np.ndarray

    def __post_init__(self) -> None:
        ub = np.asarray(self.u_b, dtype=float)
        us = np.asarray(self.u_s, dtype=float)
        if ub.shape != us.shape or ub.ndim != 1:
            raise DerError("price vectors must be 1-D and of equal length")
        if np.any(us < 0) or np.any(us > ub):
            raise DerError("need 0 <= u_s <= u_b at every step")
        object.__setattr__(self, "u_b", ub)
        object.__setattr__(self, "u_s", us)

    def __len__(self) -> int:
        return len(self.u_b)

    def tariff(self, energy_kwh: np.ndarray | float, step: int | slice | np.ndarray = slice(None)) -> np.ndarray:
        """Utility settlement for a signed energy: buy at u_b, sell at u_s."""
        e = np.asarray(energy_kwh, dtype=float)
        return np.where(e >= 0, e * self.u_b[step], e * self.u_s[step])


@dataclass(frozen=True)
class CostBreakdown:
    """Per bus per step cost components, all in $."""

    C_im: np.ndarray
    C_b: np.ndarray
    C_dg: np.ndarray
    C_l: np.ndarray

    @property
    def C_total(self) -> np.ndarray:
        return self.C_im + self.C_b + self.C_dg + self.C_l


def battery_step(E: float, P_b: float, dt: float, spec: BatterySpec,
                 convention: EfficiencyConvention = EfficiencyConvention.AS_PRINTED,
                 check: bool = True) -> float:
    """Stored energy after holding battery power ``P_b`` for ``dt`` hours.

    Charging always adds eta_c*|P_b|*dt. Discharging removes eta_d*P_b*dt
    under the as-printed convention or P_b*dt/eta_d under the physical one.
    """
    if check:
        limit = spec.p_discharge_max if P_b >= 0 else spec.p_charge_max
        if abs(P_b) > limit:
            raise RateLimitExceeded(f"|P_b|={abs(P_b)} kW exceeds {limit} kW")
    if P_b >= 0:
        drawn = spec.eta_d * P_b * dt if convention is EfficiencyConvention.AS_PRINTED else P_b * dt / spec.eta_d
        E_next = E - drawn
    else:
        E_next = E + spec.eta_c * (-P_b) * dt
    if check and not spec.e_min - 1e-9 <= E_next <= spec.e_max + 1e-9:
        raise SocOutOfRange(f"SoC {E_next / spec.capacity:.4f} outside [{spec.soc_min}, {spec.soc_max}]")
    return E_next


def battery_limits_ok(E: float, P_b: float, spec: BatterySpec) -> tuple[bool, list[str]]:
    findings = []
    soc = E / spec.capacity
    if not spec.soc_min <= soc <= spec.soc_max:
        findings.append(f"SocOutOfRange: SoC {soc:.4f} outside [{spec.soc_min}, {spec.soc_max}]")
    limit = spec.p_charge_max if P_b < 0 else spec.p_discharge_max
    if abs(P_b) > limit:
        findings.append(f"RateLimitExceeded: |P_b|={abs(P_b)} kW above {limit} kW")
    return not findings, findings


def battery_cost(P_b: float | np.ndarray, dt: float, spec: BatterySpec) -> float | np.ndarray:
    return spec.degradation_cost * np.abs(P_b) * dt


def dg_on_fraction(P_dg: float | np.ndarray, spec: DGSpec) -> np.ndarray:
    """Smooth 0..1 commitment indicator: C1 cubic ramp over [0, on_threshold]."""
    x = np.clip(np.asarray(P_dg, dtype=float) / spec.on_threshold, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def dg_cost_rate(P_dg, spec: DGSpec):
    """Hourly fuel cost [$/h]; the constant term fades out below the on threshold."""
    P = np.asarray(P_dg, dtype=float)
    return spec.a * P * P + spec.b * P + spec.c * dg_on_fraction(P, spec)


def dg_cost_rate_derivs(P_dg, spec: DGSpec) -> tuple[np.ndarray, np.ndarray]:
    """First and second derivative of :func:`dg_cost_rate` w.r.t. power."""
    P = np.asarray(P_dg, dtype=float)
    eps = spec.on_threshold
    x = P / eps
    inside = (x > 0) & (x < 1)
    d1 = 2 * spec.a * P + spec.b + np.where(inside, spec.c * 6 * x * (1 - x) / eps, 0.0)
    d2 = 2 * spec.a + np.where(inside, spec.c * (6 - 12 * x) / eps**2, 0.0)
    return d1, d2


def dg_cost(P_dg: float, spec: DGSpec) -> float:
    """Cost of running at ``P_dg`` kW for one hour; zero when the unit is off."""
    if not spec.p_min - 1e-9 <= P_dg <= spec.p_max + 1e-9:
        raise DispatchOutOfRange(f"P_dg={P_dg} outside [{spec.p_min}, {spec.p_max}]")
    return float(dg_cost_rate(P_dg, spec))


def import_cost(P_im, price, dt):
    return np.asarray(P_im) * price * dt if np.ndim(P_im) else P_im * price * dt


def loss_cost(P_l, price, dt):
    if np.any(np.asarray(P_l) < 0):
        raise NegativeLoss(f"loss must be nonnegative, got {P_l}")
    return np.asarray(P_l) * price * dt if np.ndim(P_l) else P_l * price * dt


def bus_total_cost(C_im, C_b, C_dg, C_l):
    return C_im + C_b + C_dg + C_l


def bus_power_balance_residual(P_D, P_im, P_b=0.0, P_dg=0.0, P_re=0.0):
    """Demand minus supply at a bus; zero for a feasible dispatch."""
    return P_D - (P_im + P_b + P_dg + P_re)
