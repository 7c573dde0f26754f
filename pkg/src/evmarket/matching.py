"""Per-period market matching.

Builds a square cost matrix from bids (cost = energy the pairing fails to
absorb or serve, dummy entries = fully unserved magnitude) and produces a
one-to-one assignment either by arrival order (greedy FIFO, O(n)) or by
minimum total cost (Hungarian, O(n^3)) with a brute-force oracle for testing.

All assignment totals are evaluated with math.fsum, the correctly rounded
exact sum, so equal-cost assignments compare equal regardless of the order
their entries are added in. Ties are broken lexicographically by (row, col).
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .domain import Algorithm, Bid, MatchAssignment, Side, make_matching_id

BRUTEFORCE_MAX_N = 9


class MatchingError(ValueError):
    pass


@dataclass
class CostMatrix:
    """Square padded cost matrix for one period's LSAP instance.

    Rows are prosumers (sorted by id), columns are EVs (sorted by id). When
    prosumers outnumber EVs the matrix is padded with dummy columns whose cost
    is the prosumer's full unserved magnitude; in the opposite case dummy rows
    of zero cost are added.
    """

    period_index: int
    prosumer_ids: list[str]
    ev_ids: list[str]
    cost_kwh: np.ndarray  # square, n x n

    @property
    def n(self) -> int:
        return self.cost_kwh.shape[0]

    @property
    def n_prosumers(self) -> int:
        return len(self.prosumer_ids)

    @property
    def n_evs(self) -> int:
        return len(self.ev_ids)


def pair_cost(forecast_net_kwh: float, ev_available_kwh: float,
              ev_headroom_kwh: float) -> float:
    """Energy a prosumer/EV pairing cannot absorb (surplus) or serve (deficit)."""
    if forecast_net_kwh >= 0:
        return max(0.0, forecast_net_kwh - ev_headroom_kwh)
    return max(0.0, -forecast_net_kwh - ev_available_kwh)


def split_bids(bids: list[Bid], period_index: int) -> tuple[list[Bid], list[Bid]]:
    """Validate and split one period's bids into (prosumer, ev) lists."""
    seen: set[str] = set()
    prosumers, evs = [], []
    for bid in bids:
        if bid.period_index != period_index:
            raise MatchingError(f"bid for period {bid.period_index} in period {period_index}")
        if bid.agent_id in seen:
            raise MatchingError(f"duplicate bid from {bid.agent_id}")
        seen.add(bid.agent_id)
        (prosumers if bid.side is Side.PROSUMER_NET else evs).append(bid)
    return prosumers, evs


def build_cost_matrix(bids: list[Bid], period_index: int) -> CostMatrix:
    prosumer_bids, ev_bids = split_bids(bids, period_index)
    prosumer_bids.sort(key=lambda b: b.agent_id)
    ev_bids.sort(key=lambda b: b.agent_id)

    n_p, n_e = len(prosumer_bids), len(ev_bids)
    n = max(n_p, n_e)
    cost = np.zeros((n, n), dtype=np.float64)
    for i, pb in enumerate(prosumer_bids):
        f = pb.prosumer_forecast_net_kwh
        if not math.isfinite(f):
            raise MatchingError(f"non-finite forecast from {pb.agent_id}")
        for j, eb in enumerate(ev_bids):
            cost[i, j] = pair_cost(f, eb.ev_available_kwh, eb.ev_headroom_kwh)
        cost[i, n_e:] = abs(f)  # dummy columns: fully unserved
    # Dummy rows (EVs outnumbering prosumers) stay all-zero.
    return CostMatrix(period_index, [b.agent_id for b in prosumer_bids],
                      [b.agent_id for b in ev_bids], cost)


def _solve_lsap(cost: list[list[float]], rows: list[int], cols: list[int]) -> list[int]:
    """Shortest-augmenting-path assignment on the given row/col subset.

    Returns the chosen column (as an index into ``cols``) for each row in
    ``rows``, minimizing the summed cost. Deterministic; ties resolved by the
    scan order, not canonically — callers needing the lexicographic optimum
    apply the refinement pass.
    """
    n = len(rows)
    INF = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    p = [0] * (n + 1)       # p[j]: row (1-based) matched to column j; 0 = free
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [INF] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = INF
            j1 = 0
            row = cost[rows[i0 - 1]]
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = row[cols[j - 1]] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = [0] * n
    for j in range(1, n + 1):
        if p[j] > 0:
            col_of_row[p[j] - 1] = j - 1
    return col_of_row


def _assignment_total(cost: list[list[float]], assignment: list[int]) -> float:
    return math.fsum(cost[i][assignment[i]] for i in range(len(assignment)))


def _lexicographic_refine(cost: list[list[float]], incumbent: list[int],
                          total: float) -> list[int]:
    """Smallest assignment in (row, col) lexicographic order among those whose
    exact total equals ``total``.

    Walks rows in order, probing columns smaller than the incumbent's choice;
    a probe solves the remaining subproblem and succeeds when the completed
    total still equals the optimum. The incumbent is always a feasible
    fallback, so the pass never worsens the cost.
    """
    n = len(incumbent)
    current = list(incumbent)
    free_cols = sorted(current)
    chosen: list[int] = []
    for i in range(n):
        keep = current[i]
        for c in free_cols:
            if c >= keep:
                break
            rest_rows = list(range(i + 1, n))
            rest_cols = [x for x in free_cols if x != c]
            sub = _solve_lsap(cost, rest_rows, rest_cols) if rest_rows else []
            candidate = chosen + [c] + [rest_cols[sub[k]] for k in range(len(rest_rows))]
            if _assignment_total(cost, candidate) <= total:
                current = candidate
                keep = c
                break
        chosen.append(keep)
        free_cols.remove(keep)
    return current


def _pairs_from_assignment(m: CostMatrix, col_of_row: list[int]) -> tuple[tuple[str, str, str], ...]:
    pairs = []
    for i in range(m.n_prosumers):
        j = col_of_row[i]
        if j < m.n_evs:
            p, v = m.prosumer_ids[i], m.ev_ids[j]
            pairs.append((p, v, make_matching_id(m.period_index, p, v)))
    return tuple(pairs)


def optimal_cost(m: CostMatrix) -> float:
    """Minimum total cost of the padded LSAP, without canonical tie-breaking."""
    if m.n == 0:
        return 0.0
    cost = m.cost_kwh.tolist()
    idx = list(range(m.n))
    return _assignment_total(cost, _solve_lsap(cost, idx, idx))


def match_hungarian(m: CostMatrix, period_index: int | None = None) -> MatchAssignment:
    """Minimum-cost one-to-one assignment with lexicographic tie-break.

    Dummy pairings are dropped from the output pairs but their cost (true
    unserved energy) stays in the total.
    """
    period = m.period_index if period_index is None else period_index
    if not np.all(np.isfinite(m.cost_kwh)):
        raise MatchingError("cost matrix has non-finite entries")
    if m.n == 0:
        return MatchAssignment(period, (), Algorithm.HUNGARIAN, 0.0)
    cost = m.cost_kwh.tolist()
    idx = list(range(m.n))
    assignment = _solve_lsap(cost, idx, idx)
    total = _assignment_total(cost, assignment)
    if m.n > 1:
        assignment = _lexicographic_refine(cost, assignment, total)
        total = _assignment_total(cost, assignment)
    return MatchAssignment(period, _pairs_from_assignment(m, assignment),
                           Algorithm.HUNGARIAN, total)


def match_bruteforce(m: CostMatrix) -> MatchAssignment:
    """Exhaustive-minimum oracle; same tie-break contract as match_hungarian."""
    if m.n > BRUTEFORCE_MAX_N:
        raise MatchingError(f"brute force refused for n={m.n} > {BRUTEFORCE_MAX_N}")
    if m.n == 0:
        return MatchAssignment(m.period_index, (), Algorithm.HUNGARIAN, 0.0)
    cost = m.cost_kwh.tolist()
    best: tuple[float, tuple[int, ...]] | None = None
    for perm in itertools.permutations(range(m.n)):
        total = math.fsum(cost[i][perm[i]] for i in range(m.n))
        if best is None or total < best[0]:
            best = (total, perm)
    return MatchAssignment(m.period_index, _pairs_from_assignment(m, list(best[1])),
                           Algorithm.HUNGARIAN, best[0])


def match_greedy(bids: list[Bid], period_index: int) -> MatchAssignment:
    """FIFO pairing by submission time (ties by agent id), needing no forecast.

    The i-th arrived prosumer is paired with the i-th arrived EV; leftovers
    stay unmatched. The reported total is the pairing's cost as a feasible
    point of the same padded LSAP the Hungarian algorithm solves.
    """
    prosumer_bids, ev_bids = split_bids(bids, period_index)
    prosumer_bids.sort(key=lambda b: (b.submitted_at, b.agent_id))
    ev_bids.sort(key=lambda b: (b.submitted_at, b.agent_id))

    pairs = []
    terms = []
    matched_evs: dict[str, Bid] = {}
    for pb, eb in zip(prosumer_bids, ev_bids):
        pairs.append((pb.agent_id, eb.agent_id,
                      make_matching_id(period_index, pb.agent_id, eb.agent_id)))
        matched_evs[pb.agent_id] = eb
    for pb in prosumer_bids:
        f = pb.prosumer_forecast_net_kwh
        if pb.agent_id in matched_evs:
            eb = matched_evs[pb.agent_id]
            terms.append(pair_cost(f, eb.ev_available_kwh, eb.ev_headroom_kwh))
        else:
            terms.append(abs(f))  # lands on a dummy column
    # Unmatched EVs correspond to zero-cost dummy rows.
    return MatchAssignment(period_index, tuple(pairs), Algorithm.GREEDY, math.fsum(terms))
