"""Evaluation metrics over run artifacts: grid-exchange reduction, absolute
and monetary benefit per agent, and pairwise run comparisons.

Percent changes are computed on in-system traded energy; report headers state
this to keep the metric unambiguous. Report values round to 2 decimals,
half-up.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from decimal import Decimal, ROUND_HALF_UP
from pathlib import Path

import numpy as np

from .data import LoadDataset
from .engine import RunArtifacts
from .pricing import Tariffs

COMPARISON_METRIC_NOTE = ("# metric: in-system traded energy (kWh); "
                          "pct_change = 100 * (variant - base) / base\n")

REPORT_HEADER = ["agent_id", "role", "original_grid_kwh", "scenario_grid_kwh",
                 "absolute_benefit_kwh", "money_benefit_p"]


class MetricsError(ValueError):
    pass


def round_half_up(x: float, ndigits: int = 2) -> float:
    quantum = Decimal(1).scaleb(-ndigits)
    return float(Decimal(repr(x)).quantize(quantum, rounding=ROUND_HALF_UP))


def baseline_grid_exchange(dataset: LoadDataset, agent_id: str) -> float:
    """No-trading grid exchange: every surplus sold plus every deficit bought."""
    return float(np.abs(dataset.agents[agent_id].net_kwh).sum())


def baseline_cash_p(dataset: LoadDataset, agent_id: str, tariffs: Tariffs) -> float:
    """Signed cash flow of trading every step with the grid alone."""
    net = dataset.agents[agent_id].net_kwh
    revenue = float(net[net > 0].sum()) * tariffs.p_gs
    cost = float(-net[net < 0].sum()) * tariffs.p_gb
    return revenue - cost


def absolute_benefit(original_kwh: float, scenario_kwh: float) -> float:
    if original_kwh < 0 or scenario_kwh < 0:
        raise MetricsError("grid exchanges must be non-negative")
    return original_kwh - scenario_kwh


def monetary_benefit(artifacts: RunArtifacts, agent_id: str) -> float:
    """Prosumers: scenario cash minus the grid-only baseline. EVs: trade cash
    (sell revenue minus buy cost); their realized margin is metered separately."""
    tariffs = Tariffs(**artifacts.config_summary["tariffs"])
    if agent_id in artifacts.agent_meters:
        baseline = baseline_cash_p(artifacts.dataset, agent_id, tariffs)
        return artifacts.agent_meters[agent_id].cash_p - baseline
    if agent_id in artifacts.ev_meters:
        return artifacts.ev_meters[agent_id].cash_p
    raise MetricsError(f"unknown agent {agent_id}")


def ev_fleet_average_benefit_p(artifacts: RunArtifacts) -> float:
    if not artifacts.ev_meters:
        return 0.0
    return sum(m.cash_p for m in artifacts.ev_meters.values()) / len(artifacts.ev_meters)


@dataclass(frozen=True)
class AgentReport:
    agent_id: str
    role: str
    original_grid_kwh: float
    scenario_grid_kwh: float
    absolute_benefit_kwh: float
    money_benefit_p: float


def reports_from_summary(summary: dict, dataset: LoadDataset) -> list[AgentReport]:
    """Rebuild per-agent reports from a run's summary dictionary."""
    tariffs = Tariffs(**summary["config"]["tariffs"])
    reports = []
    for aid in sorted(summary["agents"]):
        m = summary["agents"][aid]
        original = baseline_grid_exchange(dataset, aid)
        scenario = m["grid_import_kwh"] + m["grid_export_kwh"]
        money = m["cash_p"] - baseline_cash_p(dataset, aid, tariffs)
        reports.append(AgentReport(aid, "prosumer", original, scenario,
                                   absolute_benefit(original, scenario), money))
    for ev in sorted(summary["evs"]):
        reports.append(AgentReport(ev, "ev", 0.0, 0.0, 0.0,
                                   summary["evs"][ev]["cash_p"]))
    return reports


def build_reports(artifacts: RunArtifacts) -> list[AgentReport]:
    reports = []
    for aid in sorted(artifacts.agent_meters):
        original = baseline_grid_exchange(artifacts.dataset, aid)
        scenario = artifacts.agent_meters[aid].scenario_grid_kwh
        reports.append(AgentReport(aid, "prosumer", original, scenario,
                                   absolute_benefit(original, scenario),
                                   monetary_benefit(artifacts, aid)))
    for ev in sorted(artifacts.ev_meters):
        reports.append(AgentReport(ev, "ev", 0.0, 0.0, 0.0,
                                   monetary_benefit(artifacts, ev)))
    return reports


def write_report_csv_rows(reports: list[AgentReport], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_HEADER)
        for r in reports:
            writer.writerow([r.agent_id, r.role,
                             round_half_up(r.original_grid_kwh),
                             round_half_up(r.scenario_grid_kwh),
                             round_half_up(r.absolute_benefit_kwh),
                             round_half_up(r.money_benefit_p)])


def write_report_csv(artifacts: RunArtifacts, path: str | Path) -> None:
    write_report_csv_rows(build_reports(artifacts), path)


# --- run comparisons ---------------------------------------------------------

#: Key groups counting as a single comparison factor (plus the free label).
_FACTOR_GROUPS = ({"algorithm"}, {"forecaster"}, {"shared_evs", "scenario_kind"})


@dataclass(frozen=True)
class RunComparison:
    """Per-agent and aggregate % change of in-system traded energy, b vs a."""

    factor: str
    per_agent: dict[str, tuple[float, float, float | None]]  # a, b, pct
    aggregate_a_kwh: float
    aggregate_b_kwh: float
    aggregate_pct: float | None


def _pct(a: float, b: float) -> float | None:
    if a == 0.0:
        return 0.0 if b == 0.0 else None
    return 100.0 * (b - a) / a


def compare_summaries(sa: dict, sb: dict) -> RunComparison:
    """Compare two run summaries that differ in exactly one configured factor."""
    ca, cb = dict(sa["config"]), dict(sb["config"])
    for c in (ca, cb):
        c.pop("label", None)
    differing = [k for k in sorted(set(ca) | set(cb)) if ca.get(k) != cb.get(k)]
    if differing and not any(set(differing) <= group for group in _FACTOR_GROUPS):
        raise MetricsError(f"runs differ beyond a single factor: {differing}")
    factor = "+".join(differing) if differing else "identical"

    if sorted(sa["agents"]) != sorted(sb["agents"]):
        raise MetricsError("runs cover different agents")
    per_agent = {}
    for aid in sorted(sa["agents"]):
        ta = sa["agents"][aid]["insystem_traded_kwh"]
        tb = sb["agents"][aid]["insystem_traded_kwh"]
        per_agent[aid] = (ta, tb, _pct(ta, tb))
    agg_a, agg_b = sa["total_insystem_kwh"], sb["total_insystem_kwh"]
    return RunComparison(factor, per_agent, agg_a, agg_b, _pct(agg_a, agg_b))


def compare_runs(a: RunArtifacts, b: RunArtifacts) -> RunComparison:
    from .engine import run_summary
    return compare_summaries(run_summary(a), run_summary(b))


def write_comparison_csv(rows: list[tuple[str, str, RunComparison]],
                         path: str | Path) -> None:
    """Long-format table: one line per agent plus an AGGREGATE line per
    comparison. ``rows`` holds (comparison_name, scenario_label, comparison)."""
    with Path(path).open("w", newline="") as fh:
        fh.write(COMPARISON_METRIC_NOTE)
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["comparison", "scenario", "agent_id",
                         "base_kwh", "variant_kwh", "pct_change"])

        def fmt(p: float | None) -> str:
            return "" if p is None else str(round_half_up(p))

        for name, scenario, comp in rows:
            for aid, (ta, tb, pct) in sorted(comp.per_agent.items()):
                writer.writerow([name, scenario, aid, round_half_up(ta),
                                 round_half_up(tb), fmt(pct)])
            writer.writerow([name, scenario, "AGGREGATE",
                             round_half_up(comp.aggregate_a_kwh),
                             round_half_up(comp.aggregate_b_kwh),
                             fmt(comp.aggregate_pct)])


# --- charts ------------------------------------------------------------------

def _grouped_bars(path: Path, title: str, ylabel: str, scenario_labels: list[str],
                  series: dict[str, list[float]]) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "evmarket"
    fig, ax = plt.subplots(figsize=(9, 4.5))
    n_groups = len(scenario_labels)
    names = list(series)
    width = 0.8 / max(1, len(names))
    for k, name in enumerate(names):
        xs = [i + (k - (len(names) - 1) / 2) * width for i in range(n_groups)]
        ax.bar(xs, series[name], width=width, label=name)
    ax.set_xticks(range(n_groups))
    ax.set_xticklabels(scenario_labels)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend(fontsize=8, ncol=2)
    ax.axhline(0.0, color="black", linewidth=0.6)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def write_energy_chart(per_scenario: dict[str, RunArtifacts], path: str | Path) -> None:
    """In-system traded energy per agent for each trading scenario."""
    labels = list(per_scenario)
    agents = sorted(next(iter(per_scenario.values())).agent_meters)
    series = {aid: [per_scenario[s].agent_meters[aid].insystem_traded_kwh for s in labels]
              for aid in agents}
    _grouped_bars(Path(path), "Energy traded in-system by scenario",
                  "energy (kWh)", labels, series)


def write_money_chart(per_scenario: dict[str, RunArtifacts], path: str | Path) -> None:
    """Monetary benefit per agent (and fleet-average EV profit) per scenario."""
    labels = list(per_scenario)
    agents = sorted(next(iter(per_scenario.values())).agent_meters)
    series = {aid: [monetary_benefit(per_scenario[s], aid) for s in labels]
              for aid in agents}
    series["EV (avg)"] = [ev_fleet_average_benefit_p(per_scenario[s]) for s in labels]
    _grouped_bars(Path(path), "Monetary benefit by scenario", "benefit (pence)",
                  labels, series)
