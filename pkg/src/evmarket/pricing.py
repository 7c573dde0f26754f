"""Tariffs and pricing rules.

Grid prices bound everything: no in-system participant ever does worse than
trading with the main grid. Prosumer surplus sold to an EV settles at the
midpoint of the grid buy/sell prices; an EV resells its stored energy with a
fixed 10% margin on its cost basis, clamped to the grid bounds.
"""
from __future__ import annotations

from dataclasses import dataclass

from .domain import Battery

#: Default UK-style grid tariffs, pence/kWh.
DEFAULT_GRID_BUY_P_PER_KWH = 29.49
DEFAULT_GRID_SELL_P_PER_KWH = 6.4

EV_RESALE_MARGIN = 0.10


@dataclass(frozen=True)
class Tariffs:
    """Static grid buy/sell prices for the whole horizon, pence/kWh."""

    p_gb: float = DEFAULT_GRID_BUY_P_PER_KWH
    p_gs: float = DEFAULT_GRID_SELL_P_PER_KWH

    def __post_init__(self) -> None:
        if not (0 < self.p_gs < self.p_gb):
            raise ValueError(f"tariffs need 0 < sell ({self.p_gs}) < buy ({self.p_gb})")


def split_price(t: Tariffs) -> float:
    """Price for prosumer-to-EV sales: midpoint of the grid buy/sell prices."""
    return (t.p_gb + t.p_gs) / 2.0


def ev_resale_price(cost_basis: float, t: Tariffs) -> float:
    """Price for EV-to-prosumer sales: cost basis plus 10%, grid-clamped.

    The upper clamp keeps buyers no worse off than the grid; the lower clamp
    keeps an anomalously cheap basis from undercutting the grid sell price.
    """
    if cost_basis < 0:
        raise ValueError("cost basis must be non-negative")
    return max(t.p_gs, min((1.0 + EV_RESALE_MARGIN) * cost_basis, t.p_gb))


def update_cost_basis(b: Battery, charged_kwh: float, price: float) -> float:
    """New volume-weighted basis after charging ``charged_kwh`` at ``price``.

    Weights are tradable energy only (SoC above the floor); discharging never
    changes the basis. Call before applying the SoC change.
    """
    if charged_kwh <= 0:
        raise ValueError("charge amount must be positive")
    tradable_old = b.available_kwh
    return (b.cost_basis_p_per_kwh * tradable_old + price * charged_kwh) / (
        tradable_old + charged_kwh
    )


def ev_participation_check(ledger_view, ev_id: str) -> bool:
    """True iff the ledger records at least one prior in-system charge for the EV.

    ``ledger_view`` is anything exposing ``has_charge_event(ev_id)`` — in
    practice the management contract of a WaspChain.
    """
    return bool(ledger_view.has_charge_event(ev_id))
