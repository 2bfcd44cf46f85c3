"""Train/validation/test protocol, metrics and benchmark reports."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import InsufficientDataError, ValidationError
from .features import PE_VARIANTS, VARIANTS, FeatureMatrix, featurizable_channels
from .forest import ForestConfig
from .graph import ChannelGraph, DirectedEdge
from .models import ROSTER, Estimator, heuristic, predict_edges, train_variant
from .spectral import PositionalTable, laplacian_encodings

log = logging.getLogger(__name__)

HIST_BINS = 40
UNDEFINED = "—"


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.10
    val_fraction: float = 0.10
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("test_fraction", "val_fraction"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValidationError(f"{name} must lie in (0, 1)")
        if self.test_fraction + self.val_fraction >= 1.0:
            raise ValidationError("test_fraction + val_fraction must be < 1")


def split(channel_ids: Sequence[str], spec: SplitSpec = SplitSpec()):
    """Seeded channel-level split into (train, val, test).

    Fold sizes are the rounded fractions of the channel count; both
    directions of a channel always share a fold since folds hold channel ids.
    """
    ids = sorted(set(channel_ids))
    n = len(ids)
    if n < 10:
        raise InsufficientDataError(f"need at least 10 channels to split, got {n}")
    n_test = int(round(spec.test_fraction * n))
    n_val = int(round(spec.val_fraction * n))
    if n_test < 1 or n_val < 1 or n_test + n_val >= n:
        raise InsufficientDataError(f"{n} channels too few for fractions {spec}")
    perm = np.random.default_rng(spec.rng_seed).permutation(n)
    shuffled = [ids[i] for i in perm]
    test = sorted(shuffled[:n_test])
    val = sorted(shuffled[n_test:n_test + n_val])
    train = sorted(shuffled[n_test + n_val:])
    return train, val, test


# --- metrics ----------------------------------------------------------------

@dataclass(frozen=True)
class Metrics:
    mae_p: float
    mae_y: float
    r: float
    r_defined: bool
    r2: float


def pearson(a, b) -> tuple[float, bool]:
    """Pearson correlation; ``(0.0, False)`` when either side is constant."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    da = a - a.mean()
    db = b - b.mean()
    sa = math.sqrt(float(np.dot(da, da)))
    sb = math.sqrt(float(np.dot(db, db)))
    if sa == 0.0 or sb == 0.0:
        return 0.0, False
    r = float(np.dot(da, db)) / (sa * sb)
    return max(-1.0, min(1.0, r)), True


def compute_metrics(p_hat, p, capacity) -> Metrics:
    """MAE of shares, MAE in satoshis, Pearson r and R^2 of ``p_hat`` against ``p``.

    R^2 is NaN when ``p`` is constant.
    """
    p_hat = np.asarray(p_hat, dtype=float)
    p = np.asarray(p, dtype=float)
    c = np.asarray(capacity, dtype=float)
    if p_hat.size == 0:
        raise ValidationError("cannot compute metrics on zero predictions")
    if not (p_hat.shape == p.shape == c.shape):
        raise ValidationError("prediction, target and capacity arrays differ in shape")
    err = p - p_hat
    mae_p = float(np.mean(np.abs(err)))
    mae_y = float(np.mean(np.abs(p * c - p_hat * c)))
    r, ok = pearson(p_hat, p)
    ss_tot = float(np.sum((p - p.mean()) ** 2))
    r2 = 1.0 - float(np.sum(err ** 2)) / ss_tot if ss_tot > 0 else float("nan")
    return Metrics(mae_p, mae_y, r, ok, r2)


def confusion_at_half(p_hat, p) -> np.ndarray:
    """2x2 counts: rows actual side (p <= 0.5, p > 0.5), columns predicted side."""
    p_hat = np.asarray(p_hat, dtype=float)
    p = np.asarray(p, dtype=float)
    out = np.zeros((2, 2), dtype=np.int64)
    np.add.at(out, ((p > 0.5).astype(int), (p_hat > 0.5).astype(int)), 1)
    return out


def _by_channel(edges: Sequence[DirectedEdge], values) -> dict[str, dict[str, float]]:
    out: dict[str, dict[str, float]] = {}
    for e, v in zip(edges, values):
        out.setdefault(e.channel_id, {})[e.src] = float(v)
    return out


def side_accuracy(edges: Sequence[DirectedEdge], p_hat, p) -> float:
    """Share of channels whose majority-liquidity side is predicted correctly.

    The predicted side is the direction with the larger ``p_hat``; ties
    count as misses. Channels split exactly in half are skipped.
    """
    pred = _by_channel(edges, p_hat)
    true = _by_channel(edges, p)
    hits = total = 0
    for cid, sides in true.items():
        if len(sides) != 2 or len(pred.get(cid, {})) != 2:
            continue
        a, b = sorted(sides)
        if sides[a] == sides[b]:
            continue
        total += 1
        pa, pb = pred[cid][a], pred[cid][b]
        if pa != pb and (pa > pb) == (sides[a] > sides[b]):
            hits += 1
    return hits / total if total else float("nan")


def antisymmetry_gap(edges: Sequence[DirectedEdge], p_hat) -> float:
    """Mean over channels of ``|p_hat(u,v) + p_hat(v,u) - 1|``."""
    gaps = [abs(sum(s.values()) - 1.0) for s in _by_channel(edges, p_hat).values() if len(s) == 2]
    return float(np.mean(gaps)) if gaps else float("nan")


@dataclass(frozen=True)
class ScreenEntry:
    name: str
    r: float
    defined: bool


def feature_correlations(matrix: FeatureMatrix) -> list[ScreenEntry]:
    if matrix.y is None or len(matrix) < 3:
        raise InsufficientDataError("correlation screening needs at least 3 rows with targets")
    return [ScreenEntry(name, *pearson(matrix.X[:, j], matrix.y))
            for j, name in enumerate(matrix.schema.names)]


def correlation_screen(matrix: FeatureMatrix, threshold: float = 0.1) -> list[ScreenEntry]:
    """Features whose |r| with the target exceeds ``threshold``, strongest first."""
    kept = [s for s in feature_correlations(matrix) if abs(s.r) > threshold]
    return sorted(kept, key=lambda s: (-abs(s.r), s.name))


# --- benchmark --------------------------------------------------------------

@dataclass(frozen=True)
class EvalReport:
    kind: str
    n_test: int
    mae_p: float
    mae_y_sat: float
    r: float
    r_defined: bool
    r2: float
    confusion: np.ndarray
    side_accuracy: float
    antisymmetry_gap: float
    mdi: Optional[Mapping[str, float]] = None


@dataclass(frozen=True)
class BenchmarkConfig:
    forest: ForestConfig = ForestConfig()
    k_pe: int = 16
    rng_seed: int = 0
    include_disabled: bool = False
    kinds: tuple[str, ...] = ROSTER
    # candidate ForestConfig overrides scored on the validation fold; empty disables
    grid: tuple[Mapping, ...] = ()


@dataclass
class BenchmarkResult:
    reports: list[EvalReport]
    edges: tuple[DirectedEdge, ...]
    truth: np.ndarray
    capacities: np.ndarray
    predictions: dict[str, np.ndarray]
    estimators: dict[str, Estimator] = field(default_factory=dict)
    folds: tuple = ()

    def report(self, kind: str) -> EvalReport:
        for r in self.reports:
            if r.kind == kind:
                return r
        raise KeyError(kind)


def fold_edges(graph: ChannelGraph, channel_ids: Sequence[str]):
    """Both directions of each channel with targets and capacities."""
    edges, p, caps = [], [], []
    for cid in channel_ids:
        ch = graph.channels[cid]
        for e in ch.edges:
            edges.append(e)
            p.append(graph.label_p(e))
            caps.append(ch.capacity_sat)
    return tuple(edges), np.array(p, dtype=float), np.array(caps, dtype=float)


def evaluate_estimator(est: Estimator, graph: ChannelGraph, edges, p, caps):
    """EvalReport plus the raw prediction vector (NaN where undefined)."""
    pred = predict_edges(est, graph, edges)
    ok = ~np.isnan(pred)
    if not ok.any():
        raise InsufficientDataError(f"estimator {est.kind} is undefined on every test edge")
    m = compute_metrics(pred[ok], p[ok], caps[ok])
    kept = [e for e, k in zip(edges, ok) if k]
    report = EvalReport(
        est.kind, int(ok.sum()), m.mae_p, m.mae_y, m.r, m.r_defined, m.r2,
        confusion_at_half(pred[ok], p[ok]), side_accuracy(kept, pred[ok], p[ok]),
        antisymmetry_gap(kept, pred[ok]),
        est.model.mdi_by_name() if est.model is not None else None)
    return report, pred


def _select_config(kind, graph, train, val, cfg: BenchmarkConfig, encodings) -> ForestConfig:
    edges, p, caps = fold_edges(graph, val)
    best = None
    for i, override in enumerate(cfg.grid):
        candidate = replace(cfg.forest, **dict(override))
        est = train_variant(kind, graph, train, candidate, cfg.k_pe, cfg.rng_seed, encodings,
                            cfg.include_disabled)
        report, _ = evaluate_estimator(est, graph, edges, p, caps)
        log.info("grid %s candidate %d: val MAE_p %.4f", kind, i, report.mae_p)
        if best is None or report.mae_p < best[0]:
            best = (report.mae_p, candidate)
    return best[1]


def run_benchmark(graph: ChannelGraph, spec: SplitSpec = SplitSpec(),
                  cfg: BenchmarkConfig = BenchmarkConfig(),
                  encodings: Optional[PositionalTable] = None) -> BenchmarkResult:
    """Train every forest variant on the train fold and score the roster on the test fold.

    Only labeled channels with a usable policy on both sides take part, so
    every estimator is scored on the same channels. The validation fold is
    touched only when ``cfg.grid`` is non-empty.
    """
    unknown = [k for k in cfg.kinds if k not in ROSTER]
    if unknown:
        raise ValidationError(f"unknown estimator kinds {unknown}")
    usable = set(featurizable_channels(graph, cfg.include_disabled))
    ids = [c for c in graph.labeled_channel_ids() if c in usable]
    train, val, test = split(ids, spec)
    log.info("split: %d train / %d val / %d test channels", len(train), len(val), len(test))
    edges, p, caps = fold_edges(graph, test)
    if encodings is None and any(k in PE_VARIANTS for k in cfg.kinds):
        encodings = laplacian_encodings(graph, cfg.k_pe, rng_seed=cfg.rng_seed)
    reports, preds, ests = [], {}, {}
    for kind in cfg.kinds:
        if kind in VARIANTS:
            fc = cfg.forest
            if cfg.grid:
                fc = _select_config(kind, graph, train, val, cfg, encodings)
            est = train_variant(kind, graph, train, fc, cfg.k_pe, cfg.rng_seed, encodings,
                                cfg.include_disabled)
        else:
            est = heuristic(kind)
        report, pred = evaluate_estimator(est, graph, edges, p, caps)
        log.info("%s: MAE_p %.4f  R2 %.4f", kind, report.mae_p, report.r2)
        reports.append(report)
        preds[kind] = pred
        ests[kind] = est
    return BenchmarkResult(reports, edges, p, caps, preds, ests, (train, val, test))


# --- report files -----------------------------------------------------------

def _fmt(x: float, defined: bool = True, digits: int = 4) -> str:
    if not defined or x is None or (isinstance(x, float) and math.isnan(x)):
        return UNDEFINED
    return f"{x:.{digits}f}"


RESULT_COLUMNS = ("model", "n_test", "mae_p", "mae_y_sat", "r", "r2", "side_accuracy",
                  "antisymmetry_gap")


def _result_rows(result: BenchmarkResult) -> list[list[str]]:
    rows = []
    for r in result.reports:
        rows.append([r.kind, str(r.n_test), _fmt(r.mae_p, digits=6), _fmt(r.mae_y_sat, digits=1),
                     _fmt(r.r, r.r_defined, 6), _fmt(r.r2, digits=6),
                     _fmt(r.side_accuracy, digits=6), _fmt(r.antisymmetry_gap, digits=6)])
    return rows


def format_table(result: BenchmarkResult) -> str:
    """Aligned plain-text results table."""
    rows = [list(RESULT_COLUMNS)] + _result_rows(result)
    widths = [max(len(row[j]) for row in rows) for j in range(len(RESULT_COLUMNS))]
    lines = []
    for i, row in enumerate(rows):
        cells = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def error_histogram(result: BenchmarkResult, bins: int = HIST_BINS):
    edges = np.linspace(-1.0, 1.0, bins + 1)
    counts = {}
    for kind, pred in result.predictions.items():
        ok = ~np.isnan(pred)
        counts[kind] = np.histogram(pred[ok] - result.truth[ok], bins=edges)[0]
    return edges, counts


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_reports(result: BenchmarkResult, out_dir) -> dict[str, Path]:
    """Write results (CSV and text), error histogram, scatter, MDI and confusion files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / f"{name}.csv" for name in ("results", "histogram", "scatter", "mdi",
                                                      "confusion")}
    paths["table"] = out / "results.txt"
    _write_csv(paths["results"], RESULT_COLUMNS, _result_rows(result))
    paths["table"].write_text(format_table(result), encoding="utf8")

    bin_edges, counts = error_histogram(result)
    kinds = list(counts)
    _write_csv(paths["histogram"], ["bin_lo", "bin_hi", *kinds],
               [[f"{bin_edges[i]:.3f}", f"{bin_edges[i + 1]:.3f}",
                 *(str(int(counts[k][i])) for k in kinds)] for i in range(len(bin_edges) - 1)])

    scatter = []
    for kind, pred in result.predictions.items():
        for e, p, ph in zip(result.edges, result.truth, pred):
            if not np.isnan(ph):
                scatter.append([kind, e.channel_id, e.src, repr(float(p)), repr(float(ph))])
    _write_csv(paths["scatter"], ["model", "channel_id", "src_pub", "p", "p_hat"], scatter)

    mdi_rows = []
    for r in result.reports:
        if r.mdi:
            mdi_rows.extend([r.kind, name, repr(v)] for name, v in r.mdi.items())
    _write_csv(paths["mdi"], ["model", "feature", "importance"], mdi_rows)

    conf_rows = []
    for r in result.reports:
        for actual, label in enumerate(("p<=0.5", "p>0.5")):
            conf_rows.append([r.kind, label, str(r.confusion[actual, 0]), str(r.confusion[actual, 1])])
    _write_csv(paths["confusion"], ["model", "actual", "pred_le_half", "pred_gt_half"], conf_rows)
    return paths
