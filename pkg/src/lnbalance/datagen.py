"""Training data without crowdsourced balances.

Two sources: per-channel balance time series reduced to one draw by kernel
density sampling, and a synthetic network whose balances follow the
empirically observed mix of depleted and uniform channels.
"""

from __future__ import annotations

import csv
import hashlib
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, ValidationError
from .graph import (MSAT_PER_SAT, BalanceLabel, Channel, ChannelGraph, ChannelPolicy, DirectedEdge,
                    NodeInfo, attach_labels, make_label, normalize_node_id, save_labels,
                    save_snapshot)


# --- kernel density sampling ------------------------------------------------

@dataclass(frozen=True)
class BalanceSeries:
    edge: DirectedEdge
    capacity_sat: int
    samples: tuple[tuple[int, int], ...]  # (unix timestamp, local balance sat)

    def __post_init__(self):
        if not self.samples:
            raise ValidationError(f"empty balance series for channel {self.edge.channel_id}")
        prev = None
        for ts, bal in self.samples:
            if not 0 <= bal <= self.capacity_sat:
                raise ValidationError(
                    f"series for {self.edge.channel_id}: balance {bal} outside [0, {self.capacity_sat}]")
            if prev is not None and ts <= prev:
                raise ValidationError(
                    f"series for {self.edge.channel_id}: timestamps not strictly increasing")
            prev = ts

    @property
    def balances(self) -> np.ndarray:
        return np.array([b for _, b in self.samples], dtype=float)


def silverman_bandwidth(x: np.ndarray) -> float:
    """``0.9 * min(std, IQR/1.34) * n^(-1/5)``; uses std alone when the IQR is zero."""
    n = len(x)
    if n < 2:
        return 0.0
    std = float(np.std(x, ddof=1))
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(std, (q75 - q25) / 1.34)
    if spread <= 0:
        spread = std
    return 0.9 * spread * n ** -0.2


def kde_sample_many(series: BalanceSeries, n: int, rng_seed: int) -> np.ndarray:
    """``n`` independent draws from the Gaussian KDE of the series, clamped to capacity."""
    x = series.balances
    h = silverman_bandwidth(x)
    rng = np.random.default_rng(rng_seed)
    picks = x[rng.integers(0, len(x), size=n)]
    noise = rng.standard_normal(n) * h if h > 0 else np.zeros(n)
    return np.clip(np.rint(picks + noise), 0, series.capacity_sat).astype(np.int64)


def kde_sample(series: BalanceSeries, rng_seed: int) -> int:
    return int(kde_sample_many(series, 1, rng_seed)[0])


def load_series(graph: ChannelGraph, path) -> list[BalanceSeries]:
    """Read ``channel_id,src_pub,timestamp,balance_sat`` rows grouped per direction."""
    grouped: dict[DirectedEdge, list[tuple[int, int]]] = defaultdict(list)
    with open(path, newline="", encoding="utf8") as f:
        reader = csv.DictReader(f)
        need = {"channel_id", "src_pub", "timestamp", "balance_sat"}
        if not need <= set(reader.fieldnames or ()):
            raise DataError(f"{path}: series header must contain {sorted(need)}")
        for i, rec in enumerate(reader, start=1):
            try:
                edge = graph.edge_between(normalize_node_id(rec["src_pub"]), rec["channel_id"])
                grouped[edge].append((int(rec["timestamp"]), int(rec["balance_sat"])))
            except ValueError as exc:
                raise DataError(f"{path} row {i}: {exc}") from None
    return [BalanceSeries(e, graph.capacity(e), tuple(sorted(s))) for e, s in grouped.items()]


def labels_from_series(graph: ChannelGraph, series: Sequence[BalanceSeries],
                       rng_seed: int) -> ChannelGraph:
    """One KDE draw per series, attached as that direction's label."""
    rows = []
    for s in sorted(series, key=lambda s: s.edge):
        key = int.from_bytes(hashlib.sha256(
            f"{rng_seed}|{s.edge.channel_id}|{s.edge.src}".encode()).digest()[:8], "little")
        rows.append((s.edge.channel_id, s.edge.src, kde_sample(s, key)))
    return attach_labels(graph, rows, source="series")


# --- synthetic networks -----------------------------------------------------

# (bit, probability) for announced feature flags; 19 is handled separately
_COMMON_BITS = ((9, 1.0), (14, 1.0), (5, 0.5), (7, 0.3), (12, 0.6), (17, 0.4),
                (23, 0.5), (27, 0.3), (45, 0.2))
_TIME_LOCKS = (18, 34, 40, 80, 144)
TENDENCY_NOISE = 0.05
ORIENT_SLOPE = 15.0


@dataclass(frozen=True)
class SynthConfig:
    n_nodes: int = 200
    m: int = 2
    capacity_log_mean: float = math.log(2_000_000)
    capacity_log_sigma: float = 1.0
    min_capacity_sat: int = 20_000
    depleted_fraction: float = 0.30
    depleted_beta: tuple[float, float] = (0.5, 12.0)
    signal_strength: float = 0.5
    locality: float = 0.2
    disabled_fraction: float = 0.02
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_nodes < 2:
            raise ValidationError("n_nodes must be >= 2")
        if self.m < 1:
            raise ValidationError("m must be >= 1")
        if self.m >= self.n_nodes:
            raise ValidationError(f"m={self.m} must be smaller than n_nodes={self.n_nodes}")
        for name in ("depleted_fraction", "signal_strength", "disabled_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1]")
        if self.locality <= 0:
            raise ValidationError("locality must be positive")
        if self.capacity_log_sigma < 0 or self.min_capacity_sat < 1:
            raise ValidationError("invalid capacity distribution")


def synthetic_node_id(seed: int, i: int) -> str:
    digest = hashlib.sha256(f"lnbalance-synth|{seed}|{i}".encode()).hexdigest()
    return ("02" if int(digest[0], 16) % 2 == 0 else "03") + digest[:64]


def _attach(cfg: SynthConfig, rng: np.random.Generator, position: np.ndarray) -> list[tuple[int, int]]:
    """Preferential attachment biased towards nearby latent positions.

    Every new node links to ``m`` existing ones, so the graph stays connected.
    """
    seed_size = cfg.m + 1
    pairs = [(i, j) for i in range(seed_size) for j in range(i + 1, seed_size)]
    degree = np.zeros(cfg.n_nodes)
    for i, j in pairs:
        degree[i] += 1
        degree[j] += 1
    for new in range(seed_size, cfg.n_nodes):
        w = (degree[:new] + 1.0) * np.exp(-np.abs(position[:new] - position[new]) / cfg.locality)
        w += 1e-12
        targets = rng.choice(new, size=cfg.m, replace=False, p=w / w.sum())
        for t in sorted(int(t) for t in targets):
            pairs.append((t, new))
            degree[t] += 1
            degree[new] += 1
    return pairs


def generate_synthetic(cfg: SynthConfig) -> ChannelGraph:
    """Build a labeled synthetic network; every directed edge carries its true balance.

    Nodes sit at a latent position in [0, 1]; attachment favours nearby
    nodes and the position doubles as a liquidity tendency. Each channel's
    balance split is depleted (a sharp Beta near one end) with probability
    ``depleted_fraction``, otherwise uniform. With probability
    ``signal_strength`` the split is oriented so that the node with higher
    tendency holds the larger side, the direction's ``max_htlc`` tracks its
    balance, and fee rates rise as the outbound side drains.
    """
    rng = np.random.default_rng(cfg.rng_seed)
    n = cfg.n_nodes
    s = cfg.signal_strength
    ids = [synthetic_node_id(cfg.rng_seed, i) for i in range(n)]
    position = rng.random(n)
    tendency = position + TENDENCY_NOISE * rng.standard_normal(n)
    pairs = _attach(cfg, rng, position)

    caps = np.maximum(np.rint(rng.lognormal(cfg.capacity_log_mean, cfg.capacity_log_sigma,
                                            size=len(pairs))), cfg.min_capacity_sat).astype(np.int64)
    node_cap = np.zeros(n)
    for (i, j), c in zip(pairs, caps):
        node_cap[i] += c
        node_cap[j] += c
    cap_rank = np.argsort(np.argsort(node_cap)) / max(n - 1, 1)

    nodes = []
    for i in range(n):
        bits = {b for b, prob in _COMMON_BITS if rng.random() < prob}
        if rng.random() < 0.2 + 0.6 * cap_rank[i]:
            bits.add(19)
        nodes.append(NodeInfo(ids[i], frozenset(bits), f"synth-{i}"))

    a_beta, b_beta = cfg.depleted_beta
    channels = []
    truth: list[tuple[int, int, int, int, float]] = []  # (i, j, y_i, cap, p_i)
    for k, ((i, j), cap) in enumerate(zip(pairs, caps)):
        if rng.random() < cfg.depleted_fraction:
            p = rng.beta(a_beta, b_beta)
        else:
            p = rng.random()
        # p is i's share; orientation decides whether to mirror it
        if rng.random() < s:
            i_high = rng.random() < 1.0 / (1.0 + math.exp(-ORIENT_SLOPE * (tendency[i] - tendency[j])))
        else:
            i_high = rng.random() < 0.5
        if (p >= 0.5) != i_high:
            p = 1.0 - p
        y_i = int(round(p * cap))
        policies = {}
        for u, y_u in ((i, y_i), (j, int(cap) - y_i)):
            policies[u] = _policy(rng, s, y_u / cap, int(cap), cfg.disabled_fraction)
        a, b = (i, j) if ids[i] < ids[j] else (j, i)
        cid = f"{700000 + k}x{k % 3000}x{k % 2}"
        channels.append(Channel(cid, ids[a], ids[b], int(cap), policies[a], policies[b]))
        truth.append((i, j, y_i, int(cap), p))

    graph = ChannelGraph.build(nodes, channels)
    labels = {}
    for ch, (i, j, y_i, cap, _) in zip(channels, truth):
        y_a = y_i if ids[i] == ch.node_a else cap - y_i
        fwd, rev = ch.edges
        labels[fwd] = make_label(graph, fwd, y_a)
        labels[rev] = make_label(graph, rev, cap - y_a)
    return graph.with_labels(labels)


def _policy(rng: np.random.Generator, s: float, q: float, cap: int,
            disabled_fraction: float) -> ChannelPolicy:
    """Policy for a direction holding share ``q`` of capacity ``cap``."""
    cap_msat = cap * MSAT_PER_SAT
    if rng.random() < s:
        frac = q * rng.lognormal(0.0, 0.25)
    elif rng.random() < 0.5:
        frac = 0.99
    else:
        frac = rng.uniform(0.01, 1.0)
    frac = min(max(frac, 0.001), 1.0)
    min_htlc = int(rng.choice([1, 1000, 1000]))
    max_htlc = max(int(round(frac * cap_msat)), min_htlc)
    fee_rate = rng.lognormal(math.log(100.0), 1.0)
    if rng.random() < s:
        fee_rate *= math.exp(2.0 * (0.5 - q))
    return ChannelPolicy(
        time_lock_delta=int(rng.choice(_TIME_LOCKS)),
        min_htlc_msat=min_htlc,
        max_htlc_msat=max_htlc,
        fee_base_msat=int(rng.choice([0, 1000, 1000])),
        fee_rate_ppm=int(round(fee_rate)),
        disabled=bool(rng.random() < disabled_fraction),
    )


def observed_labels(graph: ChannelGraph, label_fraction: float, rng_seed: int) -> list[BalanceLabel]:
    """One observed direction for a random ``label_fraction`` of labeled channels."""
    if not 0 < label_fraction <= 1:
        raise ValidationError("label_fraction must be in (0, 1]")
    rng = np.random.default_rng(rng_seed)
    out = []
    for cid in graph.labeled_channel_ids():
        keep = rng.random() < label_fraction
        side = int(rng.integers(0, 2))
        if not keep:
            continue
        e = graph.channels[cid].edges[side]
        lab = graph.labels.get(e)
        if lab is None:
            lab = make_label(graph, e, graph.capacity(e) - graph.labels[e.reverse()].y_sat)
        out.append(lab)
    return out


def save_truth(graph: ChannelGraph, path) -> None:
    with open(path, "w", newline="", encoding="utf8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["channel_id", "src_pub", "dst_pub", "capacity_sat", "y_sat", "p"])
        for e in graph.edges():
            lab = graph.labels[e]
            w.writerow([e.channel_id, e.src, e.dst, graph.capacity(e), lab.y_sat, repr(lab.p)])


def load_truth(graph: ChannelGraph, path) -> ChannelGraph:
    """Attach a ground-truth CSV (every direction) as labels."""
    with open(path, newline="", encoding="utf8") as f:
        rows = [(r["channel_id"], r["src_pub"], int(r["y_sat"])) for r in csv.DictReader(f)]
    return attach_labels(graph.with_labels({}), rows, source=str(path))


def write_synthetic(graph: ChannelGraph, out_dir, label_fraction: float = 1.0,
                    rng_seed: int = 0) -> dict[str, Path]:
    """Write ``snapshot.json``, ``labels.csv`` and ``truth.csv`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"snapshot": out / "snapshot.json", "labels": out / "labels.csv",
             "truth": out / "truth.csv"}
    save_snapshot(graph, paths["snapshot"])
    save_labels(observed_labels(graph, label_fraction, rng_seed), paths["labels"])
    save_truth(graph, paths["truth"])
    return paths
