"""Design-matrix construction: node features, edge features and per-variant rows."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import InvariantError, SchemaMismatchError, ValidationError
from .graph import MSAT_PER_SAT, ChannelGraph, DirectedEdge, capacity_centrality
from .spectral import PositionalTable

VARIANTS = ("random-edge", "node-wise", "edge-wise", "concatenated", "shallow", "joint")
PE_VARIANTS = ("shallow", "joint")
EDGE_FEATURES = ("time_lock_delta", "log_min_htlc_msat", "max_htlc_fraction",
                 "log_fee_rate_ppm", "log_fee_base_msat")
RATIO_CAP = 100.0
DEFAULT_RANDOM_DIM = 8

# feature blocks concatenated, in order, for each variant
LAYOUTS = {
    "random-edge": ("random",),
    "node-wise": ("x_local",),
    "edge-wise": ("edge",),
    "concatenated": ("x_local", "x_remote", "edge"),
    "shallow": ("z_local", "z_remote"),
    "joint": ("x_local", "z_local", "x_remote", "z_remote", "edge"),
}


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered feature names and their provenance, frozen when a model is fit."""

    variant: str
    names: tuple[str, ...]
    sources: tuple[str, ...]
    feature_bits: tuple[int, ...] = ()
    k_pe: int = 0
    random_dim: int = 0
    fee_ratio: str = "drain"

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ValidationError("feature names must be unique")
        if len(self.names) != len(self.sources):
            raise ValidationError("names and sources differ in length")

    def __len__(self):
        return len(self.names)

    def to_json(self) -> dict:
        return {"variant": self.variant, "names": list(self.names), "sources": list(self.sources),
                "feature_bits": list(self.feature_bits), "k_pe": self.k_pe,
                "random_dim": self.random_dim, "fee_ratio": self.fee_ratio}

    @classmethod
    def from_json(cls, obj: dict) -> "FeatureSchema":
        return cls(obj["variant"], tuple(obj["names"]), tuple(obj["sources"]),
                   tuple(obj.get("feature_bits", ())), int(obj.get("k_pe", 0)),
                   int(obj.get("random_dim", 0)), obj.get("fee_ratio", "drain"))

    @property
    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class FeatureRow:
    edge: DirectedEdge
    values: np.ndarray
    target_p: Optional[float] = None


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    schema: FeatureSchema
    edges: tuple[DirectedEdge, ...]
    X: np.ndarray
    y: Optional[np.ndarray] = None
    capacities: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self):
        return len(self.edges)

    def rows(self) -> list[FeatureRow]:
        ys = self.y if self.y is not None else [None] * len(self.edges)
        return [FeatureRow(e, self.X[i], None if t is None else float(t))
                for i, (e, t) in enumerate(zip(self.edges, ys))]


def _node_names(side: str, bits: Sequence[int]) -> list[str]:
    return ([f"{side}_feat_{b}.is_known" for b in bits]
            + [f"{side}_capacity_centrality", f"{side}_fee_ratio"])


def make_schema(graph: ChannelGraph, variant: str, k_pe: int = 0,
                random_dim: int = DEFAULT_RANDOM_DIM, fee_ratio: str = "drain") -> FeatureSchema:
    """Fix the feature layout of ``variant`` using ``graph`` as the training graph."""
    if variant not in VARIANTS:
        raise ValidationError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if fee_ratio not in ("drain", "inverse"):
        raise ValidationError(f"fee_ratio must be 'drain' or 'inverse', got {fee_ratio!r}")
    bits = tuple(sorted(set().union(*(n.feature_bits for n in graph.nodes.values()))))
    if variant in PE_VARIANTS and k_pe < 1:
        raise ValidationError(f"variant {variant} needs k_pe >= 1")
    parts: list[tuple[str, str]] = []
    for block in LAYOUTS[variant]:
        if block == "random":
            parts.extend((f"random_{i}", "random") for i in range(random_dim))
        elif block == "edge":
            parts.extend((n, "edge") for n in EDGE_FEATURES)
        elif block.startswith("x_"):
            side = block[2:]
            parts.extend((n, f"node-{side}") for n in _node_names(side, bits))
        else:
            side = block[2:]
            parts.extend((f"{side}_pe_{i}", "positional") for i in range(k_pe))
    names, sources = zip(*parts)
    return FeatureSchema(variant, names, sources, bits,
                         k_pe if variant in PE_VARIANTS else 0,
                         random_dim if variant == "random-edge" else 0, fee_ratio)


def _safe_ratio(num: float, den: float, cap: float = RATIO_CAP) -> float:
    if den == 0:
        return 1.0 if num == 0 else cap
    return min(num / den, cap)


def fee_ratio(graph: ChannelGraph, node: str, direction: str = "drain",
              include_disabled: bool = False) -> float:
    """Mean incoming over mean outgoing fee rate (``drain``), or its inverse.

    Incoming rates are the policies peers set towards ``node``; outgoing are
    the node's own. Division by zero: 0/0 gives 1, x/0 gives ``RATIO_CAP``.
    """
    incoming, outgoing = [], []
    for e in graph.adjacency[node]:
        if graph.has_usable_policy(e, include_disabled):
            outgoing.append(graph.policy(e).fee_rate_ppm)
        rev = e.reverse()
        if graph.has_usable_policy(rev, include_disabled):
            incoming.append(graph.policy(rev).fee_rate_ppm)
    mean_in = sum(incoming) / len(incoming) if incoming else 0.0
    mean_out = sum(outgoing) / len(outgoing) if outgoing else 0.0
    if direction == "drain":
        return _safe_ratio(mean_in, mean_out)
    return _safe_ratio(mean_out, mean_in)


def node_features(graph: ChannelGraph, node: str, schema: FeatureSchema,
                  include_disabled: bool = False) -> np.ndarray:
    if node not in graph.nodes:
        raise ValidationError(f"unknown node {node}")
    bits = graph.nodes[node].feature_bits
    flags = [1.0 if b in bits else 0.0 for b in schema.feature_bits]
    return np.array(flags + [capacity_centrality(graph, node),
                             fee_ratio(graph, node, schema.fee_ratio, include_disabled)])


def edge_features(graph: ChannelGraph, edge: DirectedEdge) -> np.ndarray:
    pol = graph.policy(edge)
    if pol is None:
        raise ValidationError(f"edge {edge.src}->{edge.dst} on {edge.channel_id} has no policy")
    cap_msat = graph.capacity(edge) * MSAT_PER_SAT
    return np.array([
        float(pol.time_lock_delta),
        math.log10(1 + pol.min_htlc_msat),
        min(1.0, pol.max_htlc_msat / cap_msat),
        math.log10(1 + pol.fee_rate_ppm),
        math.log10(1 + pol.fee_base_msat),
    ])


def random_edge_features(edge: DirectedEdge, dim: int, rng_seed: int) -> np.ndarray:
    key = zlib.crc32(f"{edge.channel_id}|{edge.src}".encode())
    return np.random.default_rng([rng_seed & 0xFFFFFFFFFFFFFFFF, key]).standard_normal(dim)


def featurizable_channels(graph: ChannelGraph, include_disabled: bool = False) -> list[str]:
    """Channels whose two directions both carry a usable policy."""
    return [cid for cid, ch in graph.channels.items()
            if all(graph.has_usable_policy(e, include_disabled) for e in ch.edges)]


def edge_matrix(graph: ChannelGraph, edges: Sequence[DirectedEdge], schema: FeatureSchema,
                encodings: Optional[PositionalTable] = None, rng_seed: int = 0,
                include_disabled: bool = False) -> np.ndarray:
    """Feature rows for arbitrary edges under a fixed ``schema``."""
    variant = schema.variant
    if variant in PE_VARIANTS:
        if encodings is None:
            raise ValidationError(f"variant {variant} requires positional encodings")
        if encodings.k != schema.k_pe:
            raise SchemaMismatchError(
                f"encodings have k={encodings.k}, schema expects k={schema.k_pe}")
    node_cache: dict[str, np.ndarray] = {}

    def x(n):
        if n not in node_cache:
            node_cache[n] = node_features(graph, n, schema, include_disabled)
        return node_cache[n]

    def block(name, e):
        if name == "random":
            return random_edge_features(e, schema.random_dim, rng_seed)
        if name == "edge":
            return edge_features(graph, e)
        node = e.src if name.endswith("local") else e.dst
        return x(node) if name.startswith("x_") else encodings.get(node)

    layout = LAYOUTS[variant]
    out = np.empty((len(edges), len(schema)))
    for i, e in enumerate(edges):
        row = np.concatenate([block(b, e) for b in layout])
        if row.shape[0] != len(schema):
            raise SchemaMismatchError(
                f"row width {row.shape[0]} does not match schema width {len(schema)}")
        out[i] = row
    if np.isnan(out).any():
        raise InvariantError("NaN in assembled feature rows")
    return out


def build_rows(graph: ChannelGraph, schema: FeatureSchema,
               encodings: Optional[PositionalTable] = None, rng_seed: int = 0,
               channel_ids: Optional[Iterable[str]] = None,
               include_disabled: bool = False) -> FeatureMatrix:
    """Augmented training rows: both directions of every labeled, featurizable channel.

    The direction without an observation gets target ``1 - p`` of the
    observed one. Channels lacking a usable policy on either side are skipped.
    """
    allowed = set(featurizable_channels(graph, include_disabled))
    wanted = graph.labeled_channel_ids() if channel_ids is None else list(channel_ids)
    edges, targets, caps = [], [], []
    for cid in wanted:
        if cid not in allowed:
            continue
        ch = graph.channels[cid]
        for e in ch.edges:
            p = graph.label_p(e)
            if p is None:
                raise ValidationError(f"channel {cid} has no balance label")
            edges.append(e)
            targets.append(p)
            caps.append(ch.capacity_sat)
    X = edge_matrix(graph, edges, schema, encodings, rng_seed, include_disabled)
    return FeatureMatrix(schema, tuple(edges), X, np.array(targets, dtype=float),
                         np.array(caps, dtype=float))


def save_matrix_csv(matrix: FeatureMatrix, path) -> None:
    """Design matrix as CSV, schema names in the header; schema JSON beside it."""
    with open(path, "w", newline="", encoding="utf8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["channel_id", "src_pub", "dst_pub", *matrix.schema.names, "target_p"])
        for i, e in enumerate(matrix.edges):
            target = "" if matrix.y is None else repr(float(matrix.y[i]))
            w.writerow([e.channel_id, e.src, e.dst, *(repr(float(v)) for v in matrix.X[i]), target])
    with open(f"{path}.schema.json", "w", encoding="utf8") as f:
        json.dump(matrix.schema.to_json(), f, indent=1)
        f.write("\n")
