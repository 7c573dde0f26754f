"""Load-profile and EV-itinerary handling: CSV ingest, validation, and the
seeded synthetic generators that stand in for the original measurement data.

The bundled ``paper5`` fixture is five heterogeneous PV agents sampled every
10 seconds over 24 hours (one pure consumer, one dominant producer at roughly
three times the next largest peak) plus a fleet of five identical EVs.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .domain import Battery, EnergyRecord, EvItinerary, validate_battery

SECONDS_PER_DAY = 86400
ITINERARY_SLOT_S = 900

#: Assumed driving consumption while an EV is away from its charger.
DRIVE_KWH_PER_AWAY_HOUR = 3.0

LOAD_CSV_HEADER = ["agent_id", "t_s", "production_kwh", "consumption_kwh"]
ITINERARY_CSV_HEADER = ["ev_id", "arrive_s", "depart_s", "initial_soc_kwh",
                        "c_total_kwh", "reserve_kwh"]


class DataError(ValueError):
    """Raised for malformed input files or generator parameters."""


@dataclass
class AgentSeries:
    """Columnar per-agent energy series on the dataset's uniform grid."""

    agent_id: str
    production_kwh: np.ndarray
    consumption_kwh: np.ndarray

    @property
    def net_kwh(self) -> np.ndarray:
        return self.production_kwh - self.consumption_kwh

    def records(self, resolution_s: int) -> list[EnergyRecord]:
        return [
            EnergyRecord(self.agent_id, i * resolution_s,
                         float(self.production_kwh[i]), float(self.consumption_kwh[i]))
            for i in range(len(self.production_kwh))
        ]

    def window_sums(self, window_steps: int) -> tuple[np.ndarray, np.ndarray]:
        """(consumption, production) summed over consecutive windows."""
        n = len(self.production_kwh) // window_steps * window_steps
        cons = self.consumption_kwh[:n].reshape(-1, window_steps).sum(axis=1)
        prod = self.production_kwh[:n].reshape(-1, window_steps).sum(axis=1)
        return cons, prod


@dataclass
class LoadDataset:
    """All agents' series on one shared timestamp grid starting at t=0."""

    resolution_s: int
    horizon_s: int
    agents: dict[str, AgentSeries]

    @property
    def agent_ids(self) -> list[str]:
        return sorted(self.agents)

    @property
    def n_steps(self) -> int:
        return self.horizon_s // self.resolution_s

    def validate(self) -> None:
        if self.horizon_s % self.resolution_s != 0:
            raise DataError("horizon not a multiple of the resolution")
        n = self.n_steps
        for aid, series in self.agents.items():
            if len(series.production_kwh) != n or len(series.consumption_kwh) != n:
                raise DataError(f"agent {aid} does not cover the shared grid")
            for arr, name in ((series.production_kwh, "production"),
                              (series.consumption_kwh, "consumption")):
                if not np.all(np.isfinite(arr)) or np.any(arr < 0):
                    raise DataError(f"agent {aid} has invalid {name} values")


def _records_to_dataset(rows: list[EnergyRecord], resolution_hint: int = 10) -> LoadDataset:
    by_agent: dict[str, list[EnergyRecord]] = {}
    for r in rows:
        by_agent.setdefault(r.agent_id, []).append(r)

    grids = {aid: [r.t for r in recs] for aid, recs in by_agent.items()}
    first = grids[next(iter(grids))]
    for aid, grid in grids.items():
        if grid != first:
            raise DataError(f"agent {aid} does not share the common timestamp grid")

    if len(first) > 1:
        resolution = first[1] - first[0]
    else:
        resolution = resolution_hint
    for i, t in enumerate(first):
        expected = first[0] + i * resolution
        if t != expected:
            raise DataError(f"gap at t={expected} for agent {sorted(by_agent)[0]}")
    if first and first[0] != 0:
        raise DataError(f"grid must start at t=0, found t={first[0]}")

    agents = {
        aid: AgentSeries(
            aid,
            np.array([r.production_kwh for r in recs], dtype=np.float64),
            np.array([r.consumption_kwh for r in recs], dtype=np.float64),
        )
        for aid, recs in by_agent.items()
    }
    ds = LoadDataset(resolution, resolution * len(first), agents)
    ds.validate()
    return ds


def load_csv(path: str | Path) -> LoadDataset:
    """Parse and validate a load-profile CSV.

    Header must be exactly ``agent_id,t_s,production_kwh,consumption_kwh``.
    Every agent must cover the identical gap-free grid starting at t=0;
    violations are reported with the offending row or timestamp.
    """
    path = Path(path)
    rows: list[EnergyRecord] = []
    last_t: dict[str, int] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        missing = [c for c in LOAD_CSV_HEADER if c not in header]
        if missing or header != LOAD_CSV_HEADER:
            raise DataError(f"{path}: bad header, missing column(s) "
                            f"{missing or header}; expected {LOAD_CSV_HEADER}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                aid, t, prod, cons = row[0], int(row[1]), float(row[2]), float(row[3])
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}:{lineno}: unparseable row {row}") from exc
            if aid in last_t and t <= last_t[aid]:
                raise DataError(f"{path}:{lineno}: non-monotone timestamp {t} for agent {aid}")
            last_t[aid] = t
            try:
                rows.append(EnergyRecord(aid, t, prod, cons))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    if not rows:
        raise DataError(f"{path}: no data rows")

    # Gap detection with per-agent context before the shared-grid check.
    by_agent: dict[str, list[int]] = {}
    for r in rows:
        by_agent.setdefault(r.agent_id, []).append(r.t)
    for aid, grid in sorted(by_agent.items()):
        if len(grid) > 1:
            step = min(b - a for a, b in zip(grid, grid[1:]))
            for a, b in zip(grid, grid[1:]):
                if b - a != step:
                    raise DataError(f"{path}: gap at t={a + step} for agent {aid}")
    return _records_to_dataset(rows)


def write_csv(dataset: LoadDataset, path: str | Path) -> None:
    """Write the canonical form: sorted agent blocks, ascending time, LF,
    shortest round-trip float formatting."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write(",".join(LOAD_CSV_HEADER) + "\n")
        for aid in dataset.agent_ids:
            series = dataset.agents[aid]
            for i in range(dataset.n_steps):
                t = i * dataset.resolution_s
                fh.write(f"{aid},{t},{series.production_kwh[i]!r},"
                         f"{series.consumption_kwh[i]!r}\n")


@dataclass(frozen=True)
class SyntheticPvParams:
    """Shape parameters for one synthetic PV agent.

    Production follows a half-sine between sunrise and sunset scaled to the
    peak power; consumption is a constant base disturbed by uniform noise.
    """

    peak_production_kw: float
    base_consumption_kw: float
    consumption_noise_frac: float
    sunrise_s: int = 6 * 3600
    sunset_s: int = 18 * 3600
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.peak_production_kw < 0 or self.base_consumption_kw < 0:
            raise DataError("powers must be non-negative")
        if not 0 <= self.consumption_noise_frac < 1:
            raise DataError("noise fraction must be in [0, 1)")
        if not self.sunrise_s < self.sunset_s:
            raise DataError("sunrise must precede sunset")


def generate_pv_profile(params: SyntheticPvParams, horizon_s: int,
                        resolution_s: int = 10, agent_id: str = "agent") -> list[EnergyRecord]:
    """Deterministic synthetic profile for one agent.

    Same parameters and seed give bitwise-identical records.
    """
    if horizon_s % resolution_s != 0:
        raise DataError("horizon must be a multiple of the resolution")
    n = horizon_s // resolution_s
    t = np.arange(n, dtype=np.int64) * resolution_s
    sod = t % SECONDS_PER_DAY

    day_frac = (sod - params.sunrise_s) / (params.sunset_s - params.sunrise_s)
    production_kw = params.peak_production_kw * np.sin(np.pi * day_frac)
    production_kw = np.where((day_frac >= 0) & (day_frac < 1),
                             np.clip(production_kw, 0.0, None), 0.0)

    rng = np.random.default_rng(params.rng_seed)
    noise = rng.uniform(-params.consumption_noise_frac,
                        params.consumption_noise_frac, n)
    consumption_kw = params.base_consumption_kw * (1.0 + noise)

    step_h = resolution_s / 3600.0
    return [
        EnergyRecord(agent_id, int(t[i]),
                     float(production_kw[i] * step_h),
                     float(consumption_kw[i] * step_h))
        for i in range(n)
    ]


def generate_ev_itinerary(seed: int, horizon_s: int, away_blocks_per_day: int,
                          c_total_kwh: float, ev_id: str | None = None,
                          reserve_kwh_override: float | None = None,
                          ) -> tuple[EvItinerary, Battery]:
    """Seeded EV presence windows plus the matching battery.

    Away blocks are 30 minutes at 900 s alignment, one per equal slice of the
    day. The travel reserve defaults to seven times the mean daily driving
    consumption; a battery whose floor reaches the ceiling is rejected.
    """
    if away_blocks_per_day < 0:
        raise DataError("away blocks per day must be non-negative")
    if horizon_s % ITINERARY_SLOT_S != 0:
        raise DataError(f"horizon must be a multiple of {ITINERARY_SLOT_S} s")
    if ev_id is None:
        ev_id = f"ev{seed}"

    rng = np.random.default_rng(seed)
    away: list[tuple[int, int]] = []
    block_slots = 2  # 30 min
    n_days = math.ceil(horizon_s / SECONDS_PER_DAY)
    if away_blocks_per_day > 0:
        slots_per_day = SECONDS_PER_DAY // ITINERARY_SLOT_S
        segment = slots_per_day // away_blocks_per_day
        if segment < block_slots:
            raise DataError("too many away blocks per day to fit 30 min blocks")
        for day in range(n_days):
            for k in range(away_blocks_per_day):
                offset = int(rng.integers(0, segment - block_slots + 1))
                start_slot = day * slots_per_day + k * segment + offset
                start = start_slot * ITINERARY_SLOT_S
                end = min(start + block_slots * ITINERARY_SLOT_S, horizon_s)
                if start < horizon_s:
                    away.append((start, end))

    presence: list[tuple[int, int]] = []
    cursor = 0
    for start, end in away:
        if cursor < start:
            presence.append((cursor, start))
        cursor = end
    if cursor < horizon_s:
        presence.append((cursor, horizon_s))

    daily_drive_kwh = away_blocks_per_day * block_slots * (ITINERARY_SLOT_S / 3600.0) \
        * DRIVE_KWH_PER_AWAY_HOUR
    reserve = 7.0 * daily_drive_kwh if reserve_kwh_override is None else reserve_kwh_override

    battery = Battery(c_total_kwh=c_total_kwh, reserve_kwh=reserve)
    if battery.floor_kwh >= battery.ceiling_kwh:
        raise DataError(f"{ev_id}: floor {battery.floor_kwh:g} exceeds ceiling "
                        f"{battery.ceiling_kwh:g}; battery untradeable")
    battery.soc_kwh = float(rng.uniform(battery.floor_kwh, battery.ceiling_kwh))
    problem = validate_battery(battery)
    if problem is not None:
        raise DataError(f"{ev_id}: {problem}")

    itinerary = EvItinerary(ev_id, tuple(presence), battery.soc_kwh)
    return itinerary, battery


def write_itineraries_csv(fleet: list[tuple[EvItinerary, Battery]], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write(",".join(ITINERARY_CSV_HEADER) + "\n")
        for itinerary, battery in fleet:
            for arrive, depart in itinerary.presence:
                fh.write(f"{itinerary.ev_id},{arrive},{depart},"
                         f"{itinerary.initial_soc_kwh!r},{battery.c_total_kwh!r},"
                         f"{battery.reserve_kwh!r}\n")


def load_itineraries_csv(path: str | Path) -> list[tuple[EvItinerary, Battery]]:
    path = Path(path)
    intervals: dict[str, list[tuple[int, int]]] = {}
    meta: dict[str, tuple[float, float, float]] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ITINERARY_CSV_HEADER:
            raise DataError(f"{path}: bad header {header}; expected {ITINERARY_CSV_HEADER}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                ev_id = row[0]
                arrive, depart = int(row[1]), int(row[2])
                soc, c_total, reserve = float(row[3]), float(row[4]), float(row[5])
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}:{lineno}: unparseable row {row}") from exc
            intervals.setdefault(ev_id, []).append((arrive, depart))
            meta[ev_id] = (soc, c_total, reserve)
    fleet = []
    for ev_id in sorted(intervals):
        soc, c_total, reserve = meta[ev_id]
        battery = Battery(c_total_kwh=c_total, reserve_kwh=reserve, soc_kwh=soc)
        problem = validate_battery(battery)
        if problem is not None:
            raise DataError(f"{path}: {ev_id}: {problem}")
        fleet.append((EvItinerary(ev_id, tuple(sorted(intervals[ev_id])), soc), battery))
    return fleet


# --- bundled reference scenario -------------------------------------------

#: Tesla Model 3 Long Range pack size used for the whole bundled fleet.
PAPER5_EV_CAPACITY_KWH = 79.5

PAPER5_AGENT_PARAMS = {
    "a1": SyntheticPvParams(3.0, 0.8, 0.15, rng_seed=101),
    "a2": SyntheticPvParams(0.0, 2.0, 0.15, rng_seed=102),  # pure consumer
    "a3": SyntheticPvParams(2.5, 0.6, 0.15, rng_seed=103),
    "a4": SyntheticPvParams(2.0, 0.5, 0.15, rng_seed=104),
    "a5": SyntheticPvParams(9.0, 1.0, 0.15, rng_seed=105),  # dominant producer
}

PAPER5_EV_SEEDS = {f"ev{i}": 200 + i for i in range(1, 6)}


def paper5_dataset(horizon_s: int = SECONDS_PER_DAY, resolution_s: int = 10) -> LoadDataset:
    """The bundled five-agent reference dataset, generated deterministically."""
    rows: list[EnergyRecord] = []
    for aid, params in PAPER5_AGENT_PARAMS.items():
        rows.extend(generate_pv_profile(params, horizon_s, resolution_s, agent_id=aid))
    return _records_to_dataset(rows, resolution_hint=resolution_s)


def paper5_fleet(horizon_s: int = SECONDS_PER_DAY) -> list[tuple[EvItinerary, Battery]]:
    """Five identical always-present EVs with seeded initial charge."""
    return [
        generate_ev_itinerary(seed, horizon_s, away_blocks_per_day=0,
                              c_total_kwh=PAPER5_EV_CAPACITY_KWH, ev_id=ev_id)
        for ev_id, seed in PAPER5_EV_SEEDS.items()
    ]
