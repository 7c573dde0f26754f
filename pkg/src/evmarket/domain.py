"""Core value types shared by every other module.

Units: energy in kWh, prices in pence/kWh, time in integer seconds since
simulation start. All energy arithmetic is 64-bit floating point with a
conservation tolerance of CONSERVATION_TOL_KWH.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

#: Fraction of total capacity below which an EV battery never trades.
BATTERY_FLOOR_FRAC = 0.2
#: Fraction of total capacity above which an EV battery never trades.
BATTERY_CEILING_FRAC = 0.8

#: Tolerance for energy-conservation and battery-window checks (kWh).
CONSERVATION_TOL_KWH = 1e-9

#: matching_id used by trades settled directly with the main grid.
GRID = "GRID"


class Side(Enum):
    """Which side of the market a bid belongs to."""

    PROSUMER_NET = "prosumer_net"
    EV_RESOURCE = "ev_resource"


class Algorithm(Enum):
    GREEDY = "greedy"
    HUNGARIAN = "hungarian"


def check_timestamp(t: int, resolution_s: int) -> int:
    """Validate a timestamp: non-negative integer multiple of the resolution."""
    if t < 0 or t % resolution_s != 0:
        raise ValueError(f"timestamp {t} is not a non-negative multiple of {resolution_s} s")
    return t


@dataclass(frozen=True)
class EnergyRecord:
    """One prosumer's production/consumption sample for a single data step."""

    agent_id: str
    t: int
    production_kwh: float
    consumption_kwh: float

    def __post_init__(self) -> None:
        for name in ("production_kwh", "consumption_kwh"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name}={v} must be finite and non-negative")

    @property
    def net_kwh(self) -> float:
        """Production minus consumption; the only derived quantity other modules read."""
        return self.production_kwh - self.consumption_kwh


@dataclass
class Battery:
    """An EV battery with its tradable window and stored-energy cost basis.

    The operable window is [floor, ceiling] with floor = 0.2 * total + reserve
    and ceiling = 0.8 * total. ``cost_basis_p_per_kwh`` is the volume-weighted
    average acquisition price of the currently stored tradable energy.
    """

    c_total_kwh: float
    reserve_kwh: float = 0.0
    soc_kwh: float = 0.0
    cost_basis_p_per_kwh: float = 0.0

    @property
    def floor_kwh(self) -> float:
        return BATTERY_FLOOR_FRAC * self.c_total_kwh + self.reserve_kwh

    @property
    def ceiling_kwh(self) -> float:
        return BATTERY_CEILING_FRAC * self.c_total_kwh

    @property
    def available_kwh(self) -> float:
        """Energy the EV may discharge without breaching the floor."""
        return max(0.0, self.soc_kwh - self.floor_kwh)

    @property
    def headroom_kwh(self) -> float:
        """Energy the EV may absorb without breaching the ceiling."""
        return max(0.0, self.ceiling_kwh - self.soc_kwh)

    def clone(self) -> "Battery":
        return Battery(self.c_total_kwh, self.reserve_kwh, self.soc_kwh,
                       self.cost_basis_p_per_kwh)


def validate_battery(b: Battery) -> str | None:
    """Check the operable-window invariants.

    Returns None when the battery is valid, otherwise a description naming the
    broken bound. A floor at or above the ceiling makes the EV untradeable and
    is reported as a violation regardless of SoC.
    """
    if b.c_total_kwh <= 0:
        return f"total capacity {b.c_total_kwh} must be positive"
    if b.reserve_kwh < 0:
        return f"reserve {b.reserve_kwh} must be non-negative"
    floor, ceiling = b.floor_kwh, b.ceiling_kwh
    if floor >= ceiling:
        return f"floor {floor:g} exceeds ceiling {ceiling:g}"
    if b.soc_kwh < floor - CONSERVATION_TOL_KWH:
        return f"soc {b.soc_kwh:g} below floor {floor:g}"
    if b.soc_kwh > ceiling + CONSERVATION_TOL_KWH:
        return f"soc {b.soc_kwh:g} above ceiling {ceiling:g}"
    return None


@dataclass(frozen=True)
class EvItinerary:
    """Presence windows for one EV, aligned to 900 s boundaries.

    ``presence`` is a sorted list of disjoint [arrive, depart) intervals.
    """

    ev_id: str
    presence: tuple[tuple[int, int], ...]
    initial_soc_kwh: float

    def __post_init__(self) -> None:
        prev_end = -1
        for arrive, depart in self.presence:
            if arrive % 900 != 0 or depart % 900 != 0:
                raise ValueError(f"{self.ev_id}: interval [{arrive},{depart}) not 900 s aligned")
            if not arrive < depart:
                raise ValueError(f"{self.ev_id}: empty interval [{arrive},{depart})")
            if arrive <= prev_end:
                raise ValueError(f"{self.ev_id}: intervals overlap or are unsorted at {arrive}")
            prev_end = depart

    def present_during(self, start: int, end: int) -> bool:
        """True iff the EV is present for the whole of [start, end)."""
        return any(a <= start and end <= d for a, d in self.presence)

    def present_at(self, t: int) -> bool:
        return any(a <= t < d for a, d in self.presence)


@dataclass(frozen=True)
class Bid:
    """A per-period market submission from one agent.

    Prosumers bid their forecast net energy for the upcoming period (positive
    = surplus); EVs bid available energy and remaining headroom, both taken at
    period start.
    """

    period_index: int
    agent_id: str
    side: Side
    submitted_at: int
    prosumer_forecast_net_kwh: float | None = None
    ev_available_kwh: float | None = None
    ev_headroom_kwh: float | None = None

    def __post_init__(self) -> None:
        if self.side is Side.PROSUMER_NET:
            if self.prosumer_forecast_net_kwh is None:
                raise ValueError("prosumer bid missing forecast")
        else:
            if self.ev_available_kwh is None or self.ev_headroom_kwh is None:
                raise ValueError("EV bid missing available/headroom")
            if self.ev_available_kwh < 0 or self.ev_headroom_kwh < 0:
                raise ValueError("EV bid quantities must be non-negative")


@dataclass(frozen=True)
class MatchAssignment:
    """One-to-one prosumer-to-EV pairing for a single matching period."""

    period_index: int
    pairs: tuple[tuple[str, str, str], ...]  # (prosumer_id, ev_id, matching_id)
    algorithm: Algorithm
    total_cost_kwh: float

    def __post_init__(self) -> None:
        prosumers = [p for p, _, _ in self.pairs]
        evs = [v for _, v, _ in self.pairs]
        if len(set(prosumers)) != len(prosumers) or len(set(evs)) != len(evs):
            raise ValueError("an agent appears in more than one pair")
        if self.total_cost_kwh < 0:
            raise ValueError("total cost must be non-negative")


@dataclass(frozen=True)
class TradeEvent:
    """One executed energy transfer, in-system or with the main grid.

    ``ev_available_kwh_after`` / ``ev_headroom_kwh_after`` record the matched
    EV's window right after the transfer; they are None for grid trades.
    """

    t: int
    matching_id: str
    seller_id: str
    buyer_id: str
    energy_kwh: float
    price_p_per_kwh: float
    ev_available_kwh_after: float | None = None
    ev_headroom_kwh_after: float | None = None

    def __post_init__(self) -> None:
        if not self.energy_kwh > 0:
            raise ValueError("trade energy must be positive")


def make_matching_id(period_index: int, prosumer_id: str, ev_id: str) -> str:
    """Matching ids are unique per (period, pair) by construction."""
    return f"m{period_index:06d}-{prosumer_id}-{ev_id}"
