"""The estimator roster: two heuristics, six forest variants and two routing controls."""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import forest
from .errors import CorruptModelError, InsufficientDataError, ValidationError
from .features import (PE_VARIANTS, VARIANTS, build_rows, edge_matrix, featurizable_channels,
                       make_schema)
from .forest import ForestConfig, RandomForestModel
from .graph import MSAT_PER_SAT, ChannelGraph, DirectedEdge
from .spectral import PositionalTable, laplacian_encodings, load_encodings, save_encodings

HEURISTICS = ("equal-split", "local-max-htlc")
ROSTER = HEURISTICS + VARIANTS
# routing-only estimators: ground truth and a capacity preference control
CONTROLS = ("oracle", "capacity")
KINDS = ROSTER + CONTROLS
MIN_CHANNELS = 10


@dataclass(frozen=True, eq=False)
class Estimator:
    """Maps a directed edge to a predicted outbound share ``p_hat``.

    Forest kinds carry the fitted model, and ``shallow``/``joint`` also the
    positional encodings used at training time. ``rng_seed`` keys the
    per-edge noise of the ``random-edge`` variant.
    """

    kind: str
    model: Optional[RandomForestModel] = None
    encodings: Optional[PositionalTable] = None
    rng_seed: int = 0
    include_disabled: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown estimator kind {self.kind!r}; expected one of {KINDS}")
        is_forest = self.kind in VARIANTS
        if is_forest != (self.model is not None):
            raise ValidationError(f"estimator {self.kind}: model presence does not match kind")
        if (self.kind in PE_VARIANTS) != (self.encodings is not None):
            raise ValidationError(f"estimator {self.kind}: encodings presence does not match kind")
        if is_forest and self.model.schema.variant != self.kind:
            raise ValidationError(
                f"estimator {self.kind} carries a model trained for {self.model.schema.variant}")

    @property
    def is_forest(self) -> bool:
        return self.kind in VARIANTS


def heuristic(kind: str) -> Estimator:
    if kind not in HEURISTICS + CONTROLS:
        raise ValidationError(f"{kind!r} is not a heuristic")
    return Estimator(kind)


def _defined(est: Estimator, graph: ChannelGraph, edge: DirectedEdge) -> bool:
    if est.kind in ("equal-split", "capacity"):
        return True
    if est.kind == "oracle":
        return graph.label_p(edge) is not None
    if est.kind == "local-max-htlc":
        pol = graph.policy(edge)
        return pol is not None and pol.max_htlc_msat > 0
    ch = graph.channel_of(edge)
    return all(graph.has_usable_policy(e, est.include_disabled) for e in ch.edges)


def predict_edges(est: Estimator, graph: ChannelGraph, edges: Sequence[DirectedEdge]) -> np.ndarray:
    """Predictions for many edges at once; NaN marks an undefined prediction."""
    out = np.full(len(edges), np.nan)
    ok = [i for i, e in enumerate(edges) if _defined(est, graph, e)]
    if not ok:
        return out
    if est.kind == "equal-split":
        out[ok] = 0.5
    elif est.kind == "oracle":
        out[ok] = [graph.label_p(edges[i]) for i in ok]
    elif est.kind == "capacity":
        ref = statistics.median(ch.capacity_sat for ch in graph.channels.values())
        for i in ok:
            c = graph.capacity(edges[i])
            out[i] = c / (c + ref)
    elif est.kind == "local-max-htlc":
        for i in ok:
            e = edges[i]
            cap_msat = graph.capacity(e) * MSAT_PER_SAT
            out[i] = min(1.0, graph.policy(e).max_htlc_msat / cap_msat)
    else:
        chosen = [edges[i] for i in ok]
        X = edge_matrix(graph, chosen, est.model.schema, est.encodings, est.rng_seed,
                        est.include_disabled)
        out[ok] = est.model.predict(X)
    return out


def predict_edge(est: Estimator, graph: ChannelGraph, edge: DirectedEdge) -> Optional[float]:
    """``p_hat`` for one edge, or ``None`` when the estimator is undefined there."""
    v = predict_edges(est, graph, [edge])[0]
    return None if np.isnan(v) else float(v)


def train_variant(kind: str, graph: ChannelGraph, channel_ids: Optional[Iterable[str]] = None,
                  config: ForestConfig = ForestConfig(), k_pe: int = 16, rng_seed: int = 0,
                  encodings: Optional[PositionalTable] = None, include_disabled: bool = False,
                  fee_ratio: str = "drain") -> Estimator:
    """Fit one forest variant on the labeled channels ``channel_ids``.

    Parameters
    ----------
    kind : str
        One of the six forest variants.
    graph : ChannelGraph
        Training graph with labels; the full topology is used for encodings.
    channel_ids : iterable of str, optional
        Training channels; defaults to every labeled channel.
    k_pe : int
        Encoding dimension for ``shallow`` and ``joint``.
    encodings : PositionalTable, optional
        Precomputed encodings; computed from ``graph`` when omitted.

    Returns
    -------
    Estimator
        Self-contained: carries the model, schema and encodings.
    """
    if kind not in VARIANTS:
        raise ValidationError(f"{kind!r} is not a forest variant; expected one of {VARIANTS}")
    ids = graph.labeled_channel_ids() if channel_ids is None else list(channel_ids)
    usable = set(featurizable_channels(graph, include_disabled))
    ids = [c for c in ids if c in usable]
    if len(ids) < MIN_CHANNELS:
        raise InsufficientDataError(
            f"need at least {MIN_CHANNELS} labeled channels with policies, got {len(ids)}")
    if kind in PE_VARIANTS:
        if encodings is None:
            encodings = laplacian_encodings(graph, k_pe, rng_seed=rng_seed)
        k_pe = encodings.k
    else:
        encodings = None
    schema = make_schema(graph, kind, k_pe=k_pe, fee_ratio=fee_ratio)
    rows = build_rows(graph, schema, encodings, rng_seed, ids, include_disabled)
    model = forest.fit(rows, config)
    return Estimator(kind, model, encodings, rng_seed, include_disabled)


# --- bundles ----------------------------------------------------------------

BUNDLE_FILES = ("estimator.json", "model.bin", "encodings.csv", "schema.json")


def save_estimator(est: Estimator, out_dir) -> Path:
    """Write an estimator bundle directory: metadata, model file, encodings, schema."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"kind": est.kind, "rng_seed": est.rng_seed, "include_disabled": est.include_disabled}
    (out / "estimator.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    if est.model is not None:
        forest.save(est.model, out / "model.bin")
        (out / "schema.json").write_text(
            json.dumps(est.model.schema.to_json(), sort_keys=True, indent=1) + "\n")
    if est.encodings is not None:
        save_encodings(est.encodings, out / "encodings.csv")
    return out


def load_estimator(path) -> Estimator:
    src = Path(path)
    try:
        meta = json.loads((src / "estimator.json").read_text())
        kind = meta["kind"]
    except (OSError, ValueError, KeyError) as exc:
        raise CorruptModelError(f"{src}: unreadable estimator bundle ({exc})") from None
    model = forest.load(src / "model.bin") if kind in VARIANTS else None
    enc = load_encodings(src / "encodings.csv") if kind in PE_VARIANTS else None
    return Estimator(kind, model, enc, int(meta.get("rng_seed", 0)),
                     bool(meta.get("include_disabled", False)))
