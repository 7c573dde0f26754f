"""The simulation clock and trading loop.

Each matching period: update EV presence, collect forecast bids onto the
ledger, match, then execute trades at the data resolution with battery and
grid settlement. Federated runs additionally take one training step per agent
per period and aggregate the models every K periods.

The loop is single-threaded and deterministic: identical configuration and
seeds produce byte-identical artifacts.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from . import forecast as fc
from .data import DRIVE_KWH_PER_AWAY_HOUR, LoadDataset
from .domain import (Algorithm, BATTERY_FLOOR_FRAC, Battery, Bid,
                     CONSERVATION_TOL_KWH, EvItinerary, GRID, MatchAssignment,
                     Side, TradeEvent, make_matching_id, validate_battery)
from .ledger import Allowlist, WaspChain
from .matching import build_cost_matrix, match_greedy, match_hungarian, optimal_cost
from .pricing import Tariffs, ev_resale_price, split_price, update_cost_basis


class ConfigError(ValueError):
    """Invalid scenario configuration (CLI exit 1)."""


class EngineInvariantError(RuntimeError):
    """A runtime invariant broke mid-simulation (CLI exit 2)."""


@dataclass
class ScenarioConfig:
    dataset: LoadDataset
    fleet: list[tuple[EvItinerary, Battery]]
    scenario_kind: str = "shared"           # "isolated" | "shared"
    shared_evs: int = 1
    algorithm: Algorithm = Algorithm.HUNGARIAN
    forecaster: str = "perfect"             # "perfect" | "federated"
    matching_period_s: int = 60
    data_resolution_s: int = 10
    tariffs: Tariffs = field(default_factory=Tariffs)
    genesis_seed: int = 7
    aggregation_periods: int = 15
    charge_cap_kwh_per_step: float | None = None
    inject_fault: str | None = None         # test hook: "battery-bound"
    label: str = "run"

    def validate(self) -> None:
        if self.scenario_kind not in ("isolated", "shared"):
            raise ConfigError(f"scenario_kind {self.scenario_kind!r} not isolated/shared")
        if self.forecaster not in ("perfect", "federated"):
            raise ConfigError(f"forecaster {self.forecaster!r} not perfect/federated")
        if self.matching_period_s % self.data_resolution_s != 0:
            raise ConfigError("matching_period_s must be a multiple of data_resolution_s")
        if self.dataset.resolution_s != self.data_resolution_s:
            raise ConfigError(f"dataset resolution {self.dataset.resolution_s} != "
                              f"configured {self.data_resolution_s}")
        if self.dataset.horizon_s % self.matching_period_s != 0:
            raise ConfigError("horizon must divide into whole matching periods")
        if self.scenario_kind == "shared" and not 0 <= self.shared_evs <= len(self.fleet):
            raise ConfigError(f"shared_evs {self.shared_evs} outside fleet size "
                              f"{len(self.fleet)}")
        if self.scenario_kind == "isolated" and not self.fleet:
            raise ConfigError("isolated scenario needs a fleet template")
        if self.aggregation_periods < 1:
            raise ConfigError("aggregation_periods must be >= 1")
        for itinerary, battery in self.fleet:
            problem = validate_battery(battery)
            if problem is not None:
                raise ConfigError(f"{itinerary.ev_id}: {problem}")

    def summary(self) -> dict:
        return {
            "label": self.label,
            "scenario_kind": self.scenario_kind,
            "shared_evs": self.shared_evs if self.scenario_kind == "shared" else None,
            "algorithm": self.algorithm.value,
            "forecaster": self.forecaster,
            "matching_period_s": self.matching_period_s,
            "data_resolution_s": self.data_resolution_s,
            "horizon_s": self.dataset.horizon_s,
            "tariffs": {"p_gb": self.tariffs.p_gb, "p_gs": self.tariffs.p_gs},
            "genesis_seed": self.genesis_seed,
            "aggregation_periods": self.aggregation_periods,
            "charge_cap_kwh_per_step": self.charge_cap_kwh_per_step,
            "agents": self.dataset.agent_ids,
            "fleet": [it.ev_id for it, _ in self.fleet],
        }


@dataclass
class AgentMeter:
    grid_import_kwh: float = 0.0
    grid_export_kwh: float = 0.0
    insystem_sold_kwh: float = 0.0
    insystem_bought_kwh: float = 0.0
    cash_p: float = 0.0

    @property
    def insystem_traded_kwh(self) -> float:
        return self.insystem_sold_kwh + self.insystem_bought_kwh

    @property
    def scenario_grid_kwh(self) -> float:
        return self.grid_import_kwh + self.grid_export_kwh


@dataclass
class EvMeter:
    charged_kwh: float = 0.0
    discharged_kwh: float = 0.0
    cash_p: float = 0.0
    realized_margin_p: float = 0.0


@dataclass
class PeriodDiag:
    """Per-period matching diagnostics for the dominance checks."""

    period_index: int
    algorithm: str
    realized_cost_kwh: float
    optimal_cost_kwh: float
    n_pairs: int


@dataclass
class ExchangeRow:
    """One exchange.csv row; ``counterparty`` carries the seller's id."""

    t_s: int
    energy_kwh: float
    ev_available_kwh: float | None
    ev_capacity_kwh: float | None
    matching_id: str
    prosumer_id: str
    ev_id: str
    price_p_per_kwh: float
    counterparty: str


@dataclass
class RunArtifacts:
    config_summary: dict
    dataset: LoadDataset
    exchange_rows: list[ExchangeRow]
    chain: WaspChain
    agent_meters: dict[str, AgentMeter]
    ev_meters: dict[str, EvMeter]
    grid_cash_p: float
    period_diags: list[PeriodDiag]
    max_step_residual_kwh: float

    @property
    def total_insystem_kwh(self) -> float:
        return sum(m.insystem_traded_kwh for m in self.agent_meters.values())


class _EvState:
    def __init__(self, ev_id: str, itinerary: EvItinerary, battery: Battery):
        self.ev_id = ev_id
        self.itinerary = itinerary
        self.battery = battery.clone()
        self.battery.soc_kwh = itinerary.initial_soc_kwh
        self.next_gap = 0  # index into absence gaps not yet charged for driving
        self.gaps = self._absence_gaps()

    def _absence_gaps(self) -> list[tuple[int, int]]:
        gaps = []
        cursor = None
        for arrive, depart in self.itinerary.presence:
            if cursor is not None and arrive > cursor:
                gaps.append((cursor, arrive))
            cursor = depart
        return gaps

    def apply_driving_until(self, now_s: int) -> None:
        """Debit driving consumption for every absence gap ending by now."""
        hard_floor = BATTERY_FLOOR_FRAC * self.battery.c_total_kwh
        while self.next_gap < len(self.gaps) and self.gaps[self.next_gap][1] <= now_s:
            start, end = self.gaps[self.next_gap]
            drive = (end - start) / 3600.0 * DRIVE_KWH_PER_AWAY_HOUR
            self.battery.soc_kwh = max(hard_floor, self.battery.soc_kwh - drive)
            self.next_gap += 1


def _check_battery(ev: _EvState, period: int, step_t: int) -> None:
    b = ev.battery
    if (b.soc_kwh < b.floor_kwh - CONSERVATION_TOL_KWH
            or b.soc_kwh > b.ceiling_kwh + CONSERVATION_TOL_KWH):
        raise EngineInvariantError(
            f"battery window violated for {ev.ev_id} at period {period}, t={step_t}: "
            f"soc {b.soc_kwh!r} outside [{b.floor_kwh!r}, {b.ceiling_kwh!r}]")


def run(config: ScenarioConfig) -> RunArtifacts:
    """Execute the full scenario and return its artifacts."""
    config.validate()
    dataset = config.dataset
    agents = dataset.agent_ids
    period_s = config.matching_period_s
    res_s = config.data_resolution_s
    steps_per_period = period_s // res_s
    n_periods = dataset.horizon_s // period_s
    tariffs = config.tariffs
    p_split = split_price(tariffs)

    if config.scenario_kind == "shared":
        ev_states = {it.ev_id: _EvState(it.ev_id, it, b)
                     for it, b in config.fleet[:config.shared_evs]}
        dedicated: dict[str, str] = {}
    else:
        template_it, template_b = config.fleet[0]
        ev_states = {}
        dedicated = {}
        for agent in agents:
            ev_id = f"ev-{agent}"
            itinerary = EvItinerary(ev_id, template_it.presence, template_it.initial_soc_kwh)
            ev_states[ev_id] = _EvState(ev_id, itinerary, template_b)
            dedicated[agent] = ev_id
    ev_ids = sorted(ev_states)

    chain = WaspChain(Allowlist(frozenset(agents), frozenset(ev_ids)))

    # Actual per-period sums, also used as the perfect forecaster.
    period_sums = {aid: dataset.agents[aid].window_sums(steps_per_period)
                   for aid in agents}
    nets = {aid: dataset.agents[aid].net_kwh for aid in agents}

    trainers: dict[str, fc.OnlineTrainer] = {}
    registry: fc.ParamRegistry | None = None
    if config.forecaster == "federated":
        registry = fc.ParamRegistry(config.genesis_seed)
        trainers = {aid: fc.OnlineTrainer(aid, fc.pull_global(registry), period_s)
                    for aid in agents}

    agent_meters = {aid: AgentMeter() for aid in agents}
    ev_meters = {ev: EvMeter() for ev in ev_ids}
    grid_cash = 0.0
    exchange_rows: list[ExchangeRow] = []
    period_diags: list[PeriodDiag] = []
    max_residual = 0.0

    def log_trade(t: int, prosumer: str, seller: str, buyer: str, energy: float,
                  price: float, matching_id: str, ev: _EvState | None) -> None:
        nonlocal grid_cash
        avail = ev.battery.available_kwh if ev is not None else None
        headroom = ev.battery.headroom_kwh if ev is not None else None
        event = TradeEvent(t, matching_id, seller, buyer, energy, price, avail, headroom)
        chain.log_trade(event)
        exchange_rows.append(ExchangeRow(
            t, energy, avail, headroom, matching_id, prosumer,
            ev.ev_id if ev is not None else "", price, seller))
        cash = energy * price
        if seller == GRID:
            grid_cash += cash
            agent_meters[prosumer].cash_p -= cash
        elif buyer == GRID:
            grid_cash -= cash
            agent_meters[prosumer].cash_p += cash
        elif seller == prosumer:
            agent_meters[prosumer].cash_p += cash
            ev_meters[buyer].cash_p -= cash
        else:
            agent_meters[prosumer].cash_p -= cash
            ev_meters[seller].cash_p += cash

    for period in range(n_periods):
        period_start = period * period_s
        period_end = period_start + period_s
        chain.begin_period(period)

        for ev in ev_states.values():
            ev.apply_driving_until(period_start)

        present = {ev_id: ev_states[ev_id].itinerary.present_during(period_start, period_end)
                   for ev_id in ev_ids}

        # Forecasts -> bids -> ledger. Prosumers bid first, then EVs, both in
        # id order; submitted_at is the period start for everyone.
        forecasts: dict[str, float] = {}
        bids: list[Bid] = []
        for aid in agents:
            if config.forecaster == "perfect":
                cons, prod = period_sums[aid][0][period], period_sums[aid][1][period]
                f = float(prod - cons)
            else:
                pred = trainers[aid].predict_next()
                if pred is not None:
                    f = float(pred[1] - pred[0])
                elif period >= 1:
                    cons, prod = period_sums[aid][0][period - 1], period_sums[aid][1][period - 1]
                    f = float(prod - cons)
                else:
                    f = 0.0
            forecasts[aid] = f
            bid = Bid(period, aid, Side.PROSUMER_NET, period_start,
                      prosumer_forecast_net_kwh=f)
            chain.submit_bid(bid, aid)
            bids.append(bid)
        for ev_id in ev_ids:
            if not present[ev_id]:
                continue
            b = ev_states[ev_id].battery
            bid = Bid(period, ev_id, Side.EV_RESOURCE, period_start,
                      ev_available_kwh=b.available_kwh, ev_headroom_kwh=b.headroom_kwh)
            chain.submit_bid(bid, ev_id)
            bids.append(bid)

        # Matching.
        if config.scenario_kind == "isolated":
            pairs = []
            terms = []
            for aid in agents:
                ev_id = dedicated[aid]
                if present[ev_id]:
                    pairs.append((aid, ev_id, make_matching_id(period, aid, ev_id)))
                    b = ev_states[ev_id].battery
                    f = forecasts[aid]
                    terms.append(max(0.0, f - b.headroom_kwh) if f >= 0
                                 else max(0.0, -f - b.available_kwh))
                else:
                    terms.append(abs(forecasts[aid]))
            assignment = MatchAssignment(period, tuple(pairs), config.algorithm,
                                         math.fsum(terms))
            realized = opt = assignment.total_cost_kwh
        else:
            matrix = build_cost_matrix(bids, period)
            if config.algorithm is Algorithm.GREEDY:
                assignment = match_greedy(bids, period)
                realized = assignment.total_cost_kwh
                opt = optimal_cost(matrix)
            else:
                assignment = match_hungarian(matrix, period)
                realized = opt = assignment.total_cost_kwh
        chain.record_assignment(assignment)
        period_diags.append(PeriodDiag(period, config.algorithm.value,
                                       realized, opt, len(assignment.pairs)))

        pair_by_agent = {p: (v, mid) for p, v, mid in assignment.pairs}

        # Trade execution at the data resolution.
        for s in range(steps_per_period):
            step = period * steps_per_period + s
            t = step * res_s
            for aid in agents:
                n = float(nets[aid][step])
                meter = agent_meters[aid]
                match = pair_by_agent.get(aid)
                ev = None
                if match is not None:
                    ev_id, matching_id = match
                    state = ev_states[ev_id]
                    if state.itinerary.present_during(t, t + res_s):
                        ev = state
                    else:
                        # Departure mid-period voids the pairing; the prosumer
                        # settles the remaining steps with the grid.
                        del pair_by_agent[aid]

                ev_delta = 0.0
                grid_delta = 0.0
                if n > 0.0:
                    to_ev = 0.0
                    if ev is not None:
                        to_ev = min(n, ev.battery.headroom_kwh)
                        if config.charge_cap_kwh_per_step is not None:
                            to_ev = min(to_ev, config.charge_cap_kwh_per_step)
                        if to_ev > 0.0:
                            hit_ceiling = to_ev == ev.battery.headroom_kwh
                            ev.battery.cost_basis_p_per_kwh = update_cost_basis(
                                ev.battery, to_ev, p_split)
                            ev.battery.soc_kwh = (ev.battery.ceiling_kwh if hit_ceiling
                                                  else ev.battery.soc_kwh + to_ev)
                            _check_battery(ev, period, t)
                            ev_meters[ev.ev_id].charged_kwh += to_ev
                            meter.insystem_sold_kwh += to_ev
                            log_trade(t, aid, aid, ev.ev_id, to_ev, p_split, matching_id, ev)
                    rem = n - to_ev
                    if rem > 0.0:
                        meter.grid_export_kwh += rem
                        log_trade(t, aid, aid, GRID, rem, tariffs.p_gs, GRID, None)
                    ev_delta, grid_delta = to_ev, rem
                elif n < 0.0:
                    need = -n
                    from_ev = 0.0
                    if ev is not None and chain.has_charge_event(ev.ev_id):
                        from_ev = min(need, ev.battery.available_kwh)
                        if config.charge_cap_kwh_per_step is not None:
                            from_ev = min(from_ev, config.charge_cap_kwh_per_step)
                        if from_ev > 0.0:
                            basis = ev.battery.cost_basis_p_per_kwh
                            price = ev_resale_price(basis, tariffs)
                            hit_floor = from_ev == ev.battery.available_kwh
                            ev.battery.soc_kwh = (ev.battery.floor_kwh if hit_floor
                                                  else ev.battery.soc_kwh - from_ev)
                            _check_battery(ev, period, t)
                            ev_meters[ev.ev_id].discharged_kwh += from_ev
                            ev_meters[ev.ev_id].realized_margin_p += (price - basis) * from_ev
                            meter.insystem_bought_kwh += from_ev
                            log_trade(t, aid, ev.ev_id, aid, from_ev, price, matching_id, ev)
                    rem = need - from_ev
                    if rem > 0.0:
                        meter.grid_import_kwh += rem
                        log_trade(t, aid, GRID, aid, rem, tariffs.p_gb, GRID, None)
                    ev_delta, grid_delta = -from_ev, -rem

                residual = abs(n - ev_delta - grid_delta)
                max_residual = max(max_residual, residual)
                if residual > CONSERVATION_TOL_KWH:
                    raise EngineInvariantError(
                        f"energy conservation broke for {aid} at period {period}, "
                        f"t={t}: residual {residual!r} kWh")

        if config.inject_fault == "battery-bound" and period == 0 and ev_states:
            bad = ev_states[ev_ids[0]]
            bad.battery.soc_kwh = bad.battery.ceiling_kwh + 1.0
            _check_battery(bad, period, period_end - res_s)

        # Training and periodic aggregation.
        if config.forecaster == "federated":
            for aid in agents:
                cons, prod = period_sums[aid][0][period], period_sums[aid][1][period]
                trainers[aid].observe_period(period, float(cons), float(prod))
                trainers[aid].train_once()
            if (period + 1) % config.aggregation_periods == 0:
                models = [trainers[aid].params for aid in agents]
                merged = fc.federated_aggregate(models)
                merged = fc.LstmParams(*merged.arrays(), version=registry.version + 1)
                registry.update(merged)
                chain.publish_params(
                    hashlib.sha256(fc.params_to_bytes(merged)).digest(), merged.version)
                for aid in agents:
                    trainers[aid].adopt(fc.pull_global(registry))

        chain.end_period()

    return RunArtifacts(config.summary(), dataset, exchange_rows, chain,
                        agent_meters, ev_meters, grid_cash, period_diags, max_residual)


# --- artifact files ----------------------------------------------------------

EXCHANGE_HEADER = ["t_s", "energy_kwh", "ev_available_kwh", "ev_capacity_kwh",
                   "matching_id", "prosumer_id", "ev_id", "price_p_per_kwh",
                   "counterparty"]


def write_exchange_csv(artifacts: RunArtifacts, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        fh.write(",".join(EXCHANGE_HEADER) + "\n")
        for r in artifacts.exchange_rows:
            avail = "" if r.ev_available_kwh is None else repr(r.ev_available_kwh)
            cap = "" if r.ev_capacity_kwh is None else repr(r.ev_capacity_kwh)
            fh.write(f"{r.t_s},{r.energy_kwh!r},{avail},{cap},{r.matching_id},"
                     f"{r.prosumer_id},{r.ev_id},{r.price_p_per_kwh!r},{r.counterparty}\n")


def run_summary(artifacts: RunArtifacts) -> dict:
    return {
        "config": artifacts.config_summary,
        "agents": {
            aid: {
                "grid_import_kwh": m.grid_import_kwh,
                "grid_export_kwh": m.grid_export_kwh,
                "insystem_sold_kwh": m.insystem_sold_kwh,
                "insystem_bought_kwh": m.insystem_bought_kwh,
                "insystem_traded_kwh": m.insystem_traded_kwh,
                "cash_p": m.cash_p,
            }
            for aid, m in sorted(artifacts.agent_meters.items())
        },
        "evs": {
            ev: {
                "charged_kwh": m.charged_kwh,
                "discharged_kwh": m.discharged_kwh,
                "cash_p": m.cash_p,
                "realized_margin_p": m.realized_margin_p,
            }
            for ev, m in sorted(artifacts.ev_meters.items())
        },
        "grid_cash_p": artifacts.grid_cash_p,
        "total_insystem_kwh": artifacts.total_insystem_kwh,
        "max_step_residual_kwh": artifacts.max_step_residual_kwh,
        "periods": [
            {"period": d.period_index, "algorithm": d.algorithm,
             "realized_cost_kwh": d.realized_cost_kwh,
             "optimal_cost_kwh": d.optimal_cost_kwh, "n_pairs": d.n_pairs}
            for d in artifacts.period_diags
        ],
    }


def write_run_dir(artifacts: RunArtifacts, out_dir: str | Path) -> None:
    """exchange.csv, ledger files and summary.json (report files are separate)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_exchange_csv(artifacts, out_dir / "exchange.csv")
    artifacts.chain.export_files(out_dir)
    with (out_dir / "summary.json").open("w") as fh:
        json.dump(run_summary(artifacts), fh, sort_keys=True, indent=2)
        fh.write("\n")


def write_manifest(run_dir: str | Path, config_summary: dict) -> None:
    """Digest every artifact in the directory into run_manifest.json."""
    run_dir = Path(run_dir)
    digests = {}
    for p in sorted(run_dir.iterdir()):
        if p.is_file() and p.name != "run_manifest.json":
            digests[p.name] = hashlib.sha256(p.read_bytes()).hexdigest()
    with (run_dir / "run_manifest.json").open("w") as fh:
        json.dump({"config": config_summary, "artifacts": digests}, fh,
                  sort_keys=True, indent=2)
        fh.write("\n")


def verify_manifest(run_dir: str | Path) -> list[str]:
    """Names of artifacts whose digest no longer matches the manifest."""
    run_dir = Path(run_dir)
    with (run_dir / "run_manifest.json").open() as fh:
        manifest = json.load(fh)
    broken = []
    for name, digest in sorted(manifest["artifacts"].items()):
        path = run_dir / name
        if not path.is_file() or hashlib.sha256(path.read_bytes()).hexdigest() != digest:
            broken.append(name)
    return broken
