"""Reliability pathfinding on predicted balances and a trial-and-error payment simulator."""

from __future__ import annotations

import csv
import heapq
import math
import statistics
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import ValidationError
from .graph import ChannelGraph, DirectedEdge
from .models import Estimator, predict_edges

P_FLOOR = 1e-6
MAX_RETRIES = 20


@dataclass(frozen=True)
class RouteQuery:
    src: str
    dest: str
    amount_sat: int

    def __post_init__(self):
        if self.src == self.dest:
            raise ValidationError("source and destination must differ")
        if self.amount_sat <= 0:
            raise ValidationError("amount_sat must be positive")


@dataclass(frozen=True)
class RoutingResult:
    path: tuple[DirectedEdge, ...]
    per_hop_p: tuple[float, ...]
    total_cost: float
    found: bool

    @property
    def nodes(self) -> list[str]:
        if not self.path:
            return []
        return [self.path[0].src] + [e.dst for e in self.path]


NOT_FOUND = RoutingResult((), (), math.inf, False)


def edge_predictions(graph: ChannelGraph, est: Estimator,
                     include_disabled: bool = False) -> dict[DirectedEdge, float]:
    """``p_hat`` for every edge with a usable policy and a defined prediction."""
    edges = [e for e in graph.edges() if graph.has_usable_policy(e, include_disabled)]
    pred = predict_edges(est, graph, edges)
    return {e: float(v) for e, v in zip(edges, pred) if not np.isnan(v)}


def costs_from_predictions(graph: ChannelGraph, preds: Mapping[DirectedEdge, float],
                           amount_sat: int, p_floor: float = P_FLOOR) -> dict[DirectedEdge, float]:
    """``-ln p_hat`` per edge; infinite when ``p_hat * capacity < amount`` or ``p_hat <= p_floor``."""
    out = {}
    for e in graph.edges():
        p = preds.get(e)
        if p is None or p <= p_floor or p * graph.capacity(e) < amount_sat:
            out[e] = math.inf
        else:
            out[e] = -math.log(max(p, p_floor))
    return out


def edge_costs(graph: ChannelGraph, est: Estimator, amount_sat: int, p_floor: float = P_FLOOR,
               include_disabled: bool = False) -> dict[DirectedEdge, float]:
    return costs_from_predictions(graph, edge_predictions(graph, est, include_disabled),
                                  amount_sat, p_floor)


def _dijkstra(adj, src: str, dest: str, amount: float = 0.0, blocked=frozenset()):
    """Least (cost, hops, node sequence) path over ``adj[u] = [(v, edge, cost, eff), ...]``.

    Edges with ``eff < amount`` or listed in ``blocked`` are skipped. Costs
    accumulate left to right along the path, so the returned total is
    exactly the sum a caller would compute over the returned edges.
    """
    best: dict[str, tuple] = {src: (0.0, 0, (src,))}
    heap = [(0.0, 0, (src,), ())]
    done = set()
    while heap:
        cost, hops, nodes, edges = heapq.heappop(heap)
        u = nodes[-1]
        if u in done:
            continue
        done.add(u)
        if u == dest:
            return cost, edges
        for v, e, w, eff in adj.get(u, ()):
            if v in done or eff < amount or e in blocked:
                continue
            label = (cost + w, hops + 1, nodes + (v,))
            if v not in best or label < best[v]:
                best[v] = label
                heapq.heappush(heap, (*label, edges + (e,)))
    return None


def _adjacency(graph: ChannelGraph, costs: Mapping[DirectedEdge, float]):
    # parallel channels: keep the cheapest edge per (u, v), lowest channel id on ties
    pick: dict[tuple[str, str], tuple[float, DirectedEdge]] = {}
    for e, c in costs.items():
        if not math.isfinite(c):
            continue
        if c < 0:
            raise ValidationError(f"negative cost on {e.channel_id}")
        key = (e.src, e.dst)
        if key not in pick or (c, e.channel_id) < (pick[key][0], pick[key][1].channel_id):
            pick[key] = (c, e)
    adj: dict[str, list] = {}
    for (u, v), (c, e) in sorted(pick.items()):
        adj.setdefault(u, []).append((v, e, c, math.inf))
    return adj


def find_path(graph: ChannelGraph, costs: Mapping[DirectedEdge, float], query: RouteQuery,
              predictions: Optional[Mapping[DirectedEdge, float]] = None) -> RoutingResult:
    """Minimum-cost path from ``query.src`` to ``query.dest`` over finite-cost edges.

    Ties are broken by hop count, then by the lexicographic node sequence.
    ``per_hop_p`` comes from ``predictions`` when given, else ``exp(-cost)``.
    """
    for n in (query.src, query.dest):
        if n not in graph.nodes:
            raise ValidationError(f"unknown node {n}")
    hit = _dijkstra(_adjacency(graph, costs), query.src, query.dest)
    if hit is None:
        return NOT_FOUND
    total, path = hit
    if predictions is not None:
        per_hop = tuple(float(predictions[e]) for e in path)
    else:
        per_hop = tuple(math.exp(-costs[e]) for e in path)
    return RoutingResult(tuple(path), per_hop, total, True)


def route(graph: ChannelGraph, est: Estimator, query: RouteQuery,
          p_floor: float = P_FLOOR) -> RoutingResult:
    preds = edge_predictions(graph, est)
    return find_path(graph, costs_from_predictions(graph, preds, query.amount_sat, p_floor),
                     query, preds)


# --- simulation -------------------------------------------------------------

@dataclass(frozen=True)
class Workload:
    n_payments: int = 500
    amount_min_sat: int = 10_000
    amount_max_sat: int = 1_000_000
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_payments < 1:
            raise ValidationError("n_payments must be >= 1")
        if not 0 < self.amount_min_sat <= self.amount_max_sat:
            raise ValidationError("need 0 < amount_min_sat <= amount_max_sat")


def draw_payments(graph: ChannelGraph, workload: Workload) -> list[RouteQuery]:
    """Uniform distinct endpoints among connected nodes; log-uniform amounts."""
    nodes = sorted(n for n, adj in graph.adjacency.items() if adj)
    if len(nodes) < 2:
        raise ValidationError("workload needs at least two connected nodes")
    rng = np.random.default_rng(workload.rng_seed)
    lo, hi = math.log(workload.amount_min_sat), math.log(workload.amount_max_sat)
    out = []
    for _ in range(workload.n_payments):
        i, j = rng.choice(len(nodes), size=2, replace=False)
        amount = int(round(math.exp(rng.uniform(lo, hi))))
        out.append(RouteQuery(nodes[int(i)], nodes[int(j)], max(amount, 1)))
    return out


@dataclass
class EstimatorOutcome:
    name: str
    attempts: list[Optional[int]] = field(default_factory=list)  # None for failed payments

    @property
    def successes(self) -> list[int]:
        return [a for a in self.attempts if a is not None]

    @property
    def success_rate(self) -> float:
        return len(self.successes) / len(self.attempts) if self.attempts else 0.0

    @property
    def median_retries(self) -> float:
        s = self.successes
        return float(statistics.median(a - 1 for a in s)) if s else math.nan

    @property
    def mean_retries(self) -> float:
        s = self.successes
        return float(np.mean([a - 1 for a in s])) if s else math.nan

    @property
    def max_attempts(self) -> int:
        s = self.successes
        return max(s) if s else 0


@dataclass
class SimReport:
    n_payments: int
    outcomes: dict[str, EstimatorOutcome]


def true_balances(graph: ChannelGraph) -> dict[DirectedEdge, int]:
    out = {}
    for e in graph.edges():
        lab = graph.labels.get(e)
        if lab is not None:
            out[e] = lab.y_sat
        else:
            rev = graph.labels.get(e.reverse())
            if rev is None:
                raise ValidationError(f"channel {e.channel_id} has no ground-truth balance")
            out[e] = graph.capacity(e) - rev.y_sat
    return out


def _attempt_payment(graph, adj_full, balances, q: RouteQuery, max_retries: int):
    failed: set[DirectedEdge] = set()
    for attempt in range(1, max_retries + 2):
        hit = _dijkstra(adj_full, q.src, q.dest, q.amount_sat, failed)
        if hit is None:
            return None, ()
        _, path = hit
        bad = next((e for e in path if balances[e] < q.amount_sat), None)
        if bad is None:
            return attempt, path
        failed.add(bad)
    return None, ()


def _sim_adjacency(graph: ChannelGraph, preds: Mapping[DirectedEdge, float], p_floor: float):
    # all parallel edges kept: amount pruning may disqualify the cheapest one
    adj: dict[str, list] = {}
    for e in sorted(preds):
        p = preds[e]
        if p <= p_floor:
            continue
        adj.setdefault(e.src, []).append((e.dst, e, -math.log(p), p * graph.capacity(e)))
    for lst in adj.values():
        lst.sort(key=lambda t: (t[0], t[2], t[1].channel_id))
    return adj


def simulate(graph: ChannelGraph, estimators: Mapping[str, Estimator], workload: Workload = Workload(),
             max_retries: int = MAX_RETRIES, shift_balances: bool = False,
             p_floor: float = P_FLOOR) -> SimReport:
    """Replay the same payments against the true balances for each estimator.

    Each attempt takes the cheapest path under the estimator's costs; the
    first hop lacking balance is excluded for the rest of that payment.
    A payment gets at most ``1 + max_retries`` attempts. With
    ``shift_balances`` successful payments move liquidity along the path.
    """
    payments = draw_payments(graph, workload)
    truth = true_balances(graph)
    outcomes = {}
    for name, est in estimators.items():
        adj_full = _sim_adjacency(graph, edge_predictions(graph, est), p_floor)
        balances = dict(truth)
        out = EstimatorOutcome(name)
        for q in payments:
            attempts, path = _attempt_payment(graph, adj_full, balances, q, max_retries)
            out.attempts.append(attempts)
            if attempts is not None and shift_balances:
                for e in path:
                    balances[e] -= q.amount_sat
                    balances[e.reverse()] += q.amount_sat
        outcomes[name] = out
    return SimReport(len(payments), outcomes)


SIM_COLUMNS = ("model", "n_payments", "n_success", "success_rate", "median_retries",
               "mean_retries", "max_attempts")


def write_sim_report(report: SimReport, path) -> None:
    with open(path, "w", newline="", encoding="utf8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SIM_COLUMNS)
        for name, o in report.outcomes.items():
            w.writerow([name, report.n_payments, len(o.successes), f"{o.success_rate:.6f}",
                        f"{o.median_retries:.1f}", f"{o.mean_retries:.6f}", o.max_attempts])
