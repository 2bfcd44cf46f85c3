"""Channel graph model and snapshot/label file I/O.

A channel ``{a, b}`` is stored once, with ``node_a < node_b``. Each channel
yields two directed edges; the policy for ``(u, v)`` is the one announced by
``u`` for forwarding towards ``v``.
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Mapping, Optional

from .errors import SnapshotParseError, ValidationError

MSAT_PER_SAT = 1000
MAX_FEATURE_BIT = 1024
_PUBKEY_RE = re.compile(r"^[0-9a-f]{66}$")


def normalize_node_id(key: str) -> str:
    key = str(key).strip().lower()
    if not _PUBKEY_RE.match(key):
        raise ValidationError(f"invalid node public key {key!r}: expected 66 hex characters")
    return key


@dataclass(frozen=True)
class NodeInfo:
    id: str
    feature_bits: frozenset = frozenset()
    alias: Optional[str] = None

    def __post_init__(self):
        for bit in self.feature_bits:
            if not 0 <= bit < MAX_FEATURE_BIT:
                raise ValidationError(f"node {self.id}: feature bit {bit} out of range")


@dataclass(frozen=True)
class ChannelPolicy:
    time_lock_delta: int = 0
    min_htlc_msat: int = 0
    max_htlc_msat: int = 0
    fee_base_msat: int = 0
    fee_rate_ppm: int = 0
    disabled: bool = False

    def __post_init__(self):
        for name in ("time_lock_delta", "min_htlc_msat", "max_htlc_msat",
                     "fee_base_msat", "fee_rate_ppm"):
            if getattr(self, name) < 0:
                raise ValidationError(f"policy field {name} is negative")
        if self.min_htlc_msat and self.max_htlc_msat and self.min_htlc_msat > self.max_htlc_msat:
            raise ValidationError(
                f"min_htlc_msat {self.min_htlc_msat} exceeds max_htlc_msat {self.max_htlc_msat}")


@dataclass(frozen=True, order=True)
class DirectedEdge:
    src: str
    dst: str
    channel_id: str

    def reverse(self) -> "DirectedEdge":
        return DirectedEdge(self.dst, self.src, self.channel_id)


@dataclass(frozen=True)
class Channel:
    channel_id: str
    node_a: str
    node_b: str
    capacity_sat: int
    policy_a_to_b: Optional[ChannelPolicy] = None
    policy_b_to_a: Optional[ChannelPolicy] = None

    def __post_init__(self):
        if self.node_a == self.node_b:
            raise ValidationError(f"channel {self.channel_id}: self-loop on {self.node_a}")
        if self.node_a > self.node_b:
            raise ValidationError(f"channel {self.channel_id}: endpoints not in canonical order")
        if self.capacity_sat <= 0:
            raise ValidationError(
                f"channel {self.channel_id}: capacity must be positive, got {self.capacity_sat}")

    @property
    def edges(self) -> tuple[DirectedEdge, DirectedEdge]:
        return (DirectedEdge(self.node_a, self.node_b, self.channel_id),
                DirectedEdge(self.node_b, self.node_a, self.channel_id))

    def policy_from(self, src: str) -> Optional[ChannelPolicy]:
        if src == self.node_a:
            return self.policy_a_to_b
        if src == self.node_b:
            return self.policy_b_to_a
        raise ValidationError(f"node {src} is not an endpoint of channel {self.channel_id}")


@dataclass(frozen=True)
class BalanceLabel:
    edge: DirectedEdge
    y_sat: int
    p: float


@dataclass(frozen=True, eq=False)
class ChannelGraph:
    """Immutable payment channel graph, optionally carrying balance labels."""

    nodes: Mapping[str, NodeInfo]
    channels: Mapping[str, Channel]
    adjacency: Mapping[str, tuple[DirectedEdge, ...]]
    labels: Mapping[DirectedEdge, BalanceLabel] = field(default_factory=dict)

    @classmethod
    def build(cls, nodes: Iterable[NodeInfo], channels: Iterable[Channel],
              labels: Optional[Mapping[DirectedEdge, BalanceLabel]] = None) -> "ChannelGraph":
        node_map: dict[str, NodeInfo] = {}
        for info in nodes:
            if info.id in node_map:
                raise ValidationError(f"duplicate node {info.id}")
            node_map[info.id] = info
        chan_map: dict[str, Channel] = {}
        adj: dict[str, list[DirectedEdge]] = {nid: [] for nid in node_map}
        for ch in channels:
            if ch.channel_id in chan_map:
                raise ValidationError(f"duplicate channel_id {ch.channel_id}")
            for nid in (ch.node_a, ch.node_b):
                if nid not in node_map:
                    raise ValidationError(f"channel {ch.channel_id} references unknown node {nid}")
            chan_map[ch.channel_id] = ch
            fwd, rev = ch.edges
            adj[ch.node_a].append(fwd)
            adj[ch.node_b].append(rev)
        if chan_map and sum(c.capacity_sat for c in chan_map.values()) <= 0:
            raise ValidationError("total network capacity must be positive")
        return cls(node_map, chan_map, {k: tuple(v) for k, v in adj.items()}, dict(labels or {}))

    def __eq__(self, other):
        if not isinstance(other, ChannelGraph):
            return NotImplemented
        return (dict(self.nodes) == dict(other.nodes)
                and dict(self.channels) == dict(other.channels)
                and dict(self.labels) == dict(other.labels))

    __hash__ = None

    @property
    def total_capacity_sat(self) -> int:
        return sum(c.capacity_sat for c in self.channels.values())

    def edges(self) -> Iterator[DirectedEdge]:
        """All directed edges, two per channel, in channel insertion order."""
        for ch in self.channels.values():
            yield from ch.edges

    def channel_of(self, edge: DirectedEdge) -> Channel:
        try:
            ch = self.channels[edge.channel_id]
        except KeyError:
            raise ValidationError(f"unknown channel_id {edge.channel_id}") from None
        if {edge.src, edge.dst} != {ch.node_a, ch.node_b}:
            raise ValidationError(f"edge {edge.src}->{edge.dst} does not match channel {edge.channel_id}")
        return ch

    def capacity(self, edge: DirectedEdge) -> int:
        return self.channel_of(edge).capacity_sat

    def policy(self, edge: DirectedEdge) -> Optional[ChannelPolicy]:
        return self.channel_of(edge).policy_from(edge.src)

    def has_usable_policy(self, edge: DirectedEdge, include_disabled: bool = False) -> bool:
        pol = self.policy(edge)
        return pol is not None and (include_disabled or not pol.disabled)

    def edge_between(self, src: str, channel_id: str) -> DirectedEdge:
        ch = self.channels.get(channel_id)
        if ch is None:
            raise ValidationError(f"unknown channel_id {channel_id}")
        if src == ch.node_a:
            return ch.edges[0]
        if src == ch.node_b:
            return ch.edges[1]
        raise ValidationError(f"node {src} is not an endpoint of channel {channel_id}")

    def label_p(self, edge: DirectedEdge) -> Optional[float]:
        """Observed proportion for ``edge``, derived from the reverse label if needed."""
        lab = self.labels.get(edge)
        if lab is not None:
            return lab.p
        rev = self.labels.get(edge.reverse())
        if rev is not None:
            return 1.0 - rev.p
        return None

    def labeled_channel_ids(self) -> list[str]:
        seen = dict.fromkeys(e.channel_id for e in self.labels)
        return [cid for cid in self.channels if cid in seen]

    def with_labels(self, labels: Mapping[DirectedEdge, BalanceLabel]) -> "ChannelGraph":
        return replace(self, labels=dict(labels))


def make_label(graph: ChannelGraph, edge: DirectedEdge, y_sat: int) -> BalanceLabel:
    cap = graph.capacity(edge)
    if not 0 <= y_sat <= cap:
        raise ValidationError(
            f"label on channel {edge.channel_id}: y_sat {y_sat} outside [0, {cap}]")
    return BalanceLabel(edge, int(y_sat), y_sat / cap)


def capacity_centrality(graph: ChannelGraph, node: str) -> float:
    """Share of total network capacity held by channels incident to ``node``."""
    if node not in graph.nodes:
        raise ValidationError(f"unknown node {node}")
    total = graph.total_capacity_sat
    if total == 0:
        return 0.0
    incident = sum(graph.channels[e.channel_id].capacity_sat for e in graph.adjacency[node])
    return incident / total


# --- snapshot files ---------------------------------------------------------

def _as_int(value, what: str) -> int:
    try:
        return int(value)
    except (TypeError, ValueError):
        raise SnapshotParseError(f"{what}: expected an integer, got {value!r}") from None


def _parse_policy(obj, where: str) -> Optional[ChannelPolicy]:
    if obj is None:
        return None
    if not isinstance(obj, dict):
        raise SnapshotParseError(f"{where}: policy must be an object")
    return ChannelPolicy(
        time_lock_delta=_as_int(obj.get("time_lock_delta", 0), f"{where}.time_lock_delta"),
        min_htlc_msat=_as_int(obj.get("min_htlc", 0), f"{where}.min_htlc"),
        max_htlc_msat=_as_int(obj.get("max_htlc_msat", 0), f"{where}.max_htlc_msat"),
        fee_base_msat=_as_int(obj.get("fee_base_msat", 0), f"{where}.fee_base_msat"),
        fee_rate_ppm=_as_int(obj.get("fee_rate_milli_msat", 0), f"{where}.fee_rate_milli_msat"),
        disabled=bool(obj.get("disabled", False)),
    )


def _policy_to_json(pol: Optional[ChannelPolicy]):
    if pol is None:
        return None
    return {
        "time_lock_delta": pol.time_lock_delta,
        "min_htlc": str(pol.min_htlc_msat),
        "max_htlc_msat": str(pol.max_htlc_msat),
        "fee_base_msat": str(pol.fee_base_msat),
        "fee_rate_milli_msat": str(pol.fee_rate_ppm),
        "disabled": pol.disabled,
    }


def parse_snapshot(data) -> ChannelGraph:
    if not isinstance(data, dict) or not isinstance(data.get("nodes"), list) \
            or not isinstance(data.get("edges"), list):
        raise SnapshotParseError("snapshot must be an object with 'nodes' and 'edges' arrays")
    nodes = []
    for i, obj in enumerate(data["nodes"]):
        if not isinstance(obj, dict) or "pub_key" not in obj:
            raise SnapshotParseError(f"nodes[{i}]: missing pub_key")
        try:
            bits = frozenset(int(b) for b in (obj.get("features") or {}))
        except ValueError:
            raise SnapshotParseError(f"nodes[{i}]: feature keys must be bit numbers") from None
        try:
            nodes.append(NodeInfo(normalize_node_id(obj["pub_key"]), bits, obj.get("alias") or None))
        except ValidationError as exc:
            raise ValidationError(f"nodes[{i}]: {exc}") from None
    channels = []
    for i, obj in enumerate(data["edges"]):
        if not isinstance(obj, dict):
            raise SnapshotParseError(f"edges[{i}]: expected an object")
        cid = str(obj.get("channel_id", ""))
        where = f"edges[{i}] (channel {cid})"
        for key in ("channel_id", "capacity", "node1_pub", "node2_pub"):
            if key not in obj:
                raise SnapshotParseError(f"{where}: missing {key}")
        try:
            n1 = normalize_node_id(obj["node1_pub"])
            n2 = normalize_node_id(obj["node2_pub"])
            p1 = _parse_policy(obj.get("node1_policy"), f"{where}.node1_policy")
            p2 = _parse_policy(obj.get("node2_policy"), f"{where}.node2_policy")
            if n1 == n2:
                raise ValidationError(f"self-loop on {n1}")
            if n1 > n2:
                n1, n2, p1, p2 = n2, n1, p2, p1
            channels.append(Channel(cid, n1, n2, _as_int(obj["capacity"], f"{where}.capacity"), p1, p2))
        except ValidationError as exc:
            raise ValidationError(f"{where}: {exc}") from None
    return ChannelGraph.build(nodes, channels)


def load_snapshot(path) -> ChannelGraph:
    """Load a describegraph-style JSON snapshot."""
    try:
        with open(path, encoding="utf8") as f:
            data = json.load(f)
    except json.JSONDecodeError as exc:
        raise SnapshotParseError(f"{path}: malformed JSON: {exc}") from None
    return parse_snapshot(data)


def snapshot_to_json(graph: ChannelGraph) -> dict:
    nodes = []
    for info in graph.nodes.values():
        obj = {"pub_key": info.id, "alias": info.alias or "",
               "features": {str(b): {"is_known": True} for b in sorted(info.feature_bits)}}
        nodes.append(obj)
    edges = []
    for ch in graph.channels.values():
        edges.append({
            "channel_id": ch.channel_id,
            "capacity": str(ch.capacity_sat),
            "node1_pub": ch.node_a,
            "node2_pub": ch.node_b,
            "node1_policy": _policy_to_json(ch.policy_a_to_b),
            "node2_policy": _policy_to_json(ch.policy_b_to_a),
        })
    return {"nodes": nodes, "edges": edges}


def save_snapshot(graph: ChannelGraph, path) -> None:
    with open(path, "w", encoding="utf8") as f:
        json.dump(snapshot_to_json(graph), f, indent=1, sort_keys=True)
        f.write("\n")


# --- label files ------------------------------------------------------------

def attach_labels(graph: ChannelGraph, rows: Iterable[tuple[str, str, int]],
                  source: str = "labels") -> ChannelGraph:
    """Attach ``(channel_id, src_pub, y_sat)`` observations to a copy of ``graph``."""
    labels = dict(graph.labels)
    for lineno, (cid, src, y_sat) in enumerate(rows, start=1):
        where = f"{source} row {lineno}"
        try:
            edge = graph.edge_between(normalize_node_id(src), cid)
            lab = make_label(graph, edge, y_sat)
        except ValidationError as exc:
            raise ValidationError(f"{where}: {exc}") from None
        prev = labels.get(edge)
        if prev is not None and prev.y_sat != lab.y_sat:
            raise ValidationError(f"{where}: conflicting duplicate label for {cid} from {edge.src}")
        other = labels.get(edge.reverse())
        if other is not None and other.y_sat + lab.y_sat != graph.capacity(edge):
            raise ValidationError(
                f"{where}: labels of both directions of {cid} do not sum to capacity")
        labels[edge] = lab
    return graph.with_labels(labels)


def load_labels(graph: ChannelGraph, path) -> ChannelGraph:
    """Read a ``channel_id,src_pub,y_sat`` CSV and attach it to ``graph``."""
    with open(path, newline="", encoding="utf8") as f:
        reader = csv.DictReader(f)
        missing = {"channel_id", "src_pub", "y_sat"} - set(reader.fieldnames or ())
        if missing:
            raise SnapshotParseError(f"{path}: labels header missing {sorted(missing)}")
        rows = []
        for i, rec in enumerate(reader, start=1):
            try:
                rows.append((rec["channel_id"], rec["src_pub"], int(rec["y_sat"])))
            except (TypeError, ValueError):
                raise SnapshotParseError(f"{path} row {i}: y_sat is not an integer") from None
    return attach_labels(graph, rows, source=str(path))


def save_labels(labels: Iterable[BalanceLabel], path) -> None:
    with open(path, "w", newline="", encoding="utf8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["channel_id", "src_pub", "y_sat"])
        for lab in labels:
            w.writerow([lab.edge.channel_id, lab.edge.src, lab.y_sat])

