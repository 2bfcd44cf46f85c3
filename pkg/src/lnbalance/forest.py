"""Random forest regression with MSE splits and mean-decrease-impurity importances."""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass
from typing import Optional, Sequence, Union

import numpy as np
from joblib import Parallel, delayed

from . import _tree
from .errors import CorruptModelError, InsufficientDataError, SchemaMismatchError, ValidationError
from .features import FeatureMatrix, FeatureRow, FeatureSchema

FORMAT_VERSION = 1
_ARRAYS = ("feature", "threshold", "left", "right", "value", "n_samples", "impurity")


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 200
    max_depth: Optional[int] = None
    min_samples_leaf: int = 2
    features_per_split: Union[int, str] = "third"
    bootstrap: bool = True
    rng_seed: int = 0
    n_jobs: int = 1

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValidationError("n_trees must be >= 1")
        if self.min_samples_leaf < 1:
            raise ValidationError("min_samples_leaf must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValidationError("max_depth must be >= 0")
        fps = self.features_per_split
        if isinstance(fps, str):
            if fps not in ("all", "third", "sqrt"):
                raise ValidationError(f"unknown features_per_split rule {fps!r}")
        elif fps < 1:
            raise ValidationError("features_per_split must be >= 1")

    def n_split_features(self, n_features: int) -> int:
        rule = self.features_per_split
        if rule == "all":
            return n_features
        if rule == "third":
            return max(1, math.ceil(n_features / 3))
        if rule == "sqrt":
            return max(1, math.ceil(math.sqrt(n_features)))
        return min(int(rule), n_features)


@dataclass(frozen=True, eq=False)
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray
    impurity: np.ndarray

    @property
    def node_count(self) -> int:
        return self.feature.shape[0]

    def is_leaf(self, node: int) -> bool:
        return self.left[node] == _tree.LEAF


class RandomForestModel:
    """A fitted forest: trees, the schema they were trained under, and MDI."""

    def __init__(self, config: ForestConfig, trees: Sequence[Tree], schema: FeatureSchema,
                 mdi: Optional[np.ndarray] = None):
        self.config = config
        self.trees = list(trees)
        self.schema = schema
        self._pack()
        self.mdi = compute_mdi(self.trees, len(schema)) if mdi is None else np.asarray(mdi, float)

    def _pack(self):
        sizes = [t.node_count for t in self.trees]
        self._offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        self._flat = {name: np.concatenate([getattr(t, name) for t in self.trees])
                      for name in ("feature", "threshold", "left", "right", "value")}

    @property
    def n_features(self) -> int:
        return len(self.schema)

    def predict_raw(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise SchemaMismatchError(
                f"rows have {X.shape[1]} features, model expects {self.n_features}")
        f = self._flat
        return _tree.predict_forest(X, self._offsets, f["feature"], f["threshold"],
                                    f["left"], f["right"], f["value"])

    def predict(self, X) -> np.ndarray:
        """Mean tree output clamped to [0, 1].

        ``X`` may be a raw array or a :class:`FeatureMatrix`; a matrix built
        under a different schema is rejected.
        """
        if isinstance(X, FeatureMatrix):
            check_schema(self.schema, X.schema)
            X = X.X
        return np.clip(self.predict_raw(X), 0.0, 1.0)

    def predict_one(self, row) -> float:
        return float(self.predict(np.asarray(row, dtype=float)[None, :])[0])

    def mdi_by_name(self) -> dict[str, float]:
        return dict(zip(self.schema.names, (float(v) for v in self.mdi)))


def check_schema(expected: FeatureSchema, got: FeatureSchema) -> None:
    if expected.digest != got.digest:
        raise SchemaMismatchError(
            f"feature schema mismatch: model trained on {expected.variant} "
            f"({len(expected)} features), rows built for {got.variant} ({len(got)} features)")


def compute_mdi(trees: Sequence[Tree], n_features: int) -> np.ndarray:
    """Impurity decrease per feature summed over the forest, normalized to 1.

    Falls back to uniform importances when no split reduced impurity.
    """
    total = np.zeros(n_features)
    for t in trees:
        total += _tree.impurity_decrease(t.feature, t.left, t.right, t.n_samples,
                                         t.impurity, n_features)
    total = np.maximum(total, 0.0)
    s = total.sum()
    if s <= 0:
        return np.full(n_features, 1.0 / n_features)
    return total / s


def _as_arrays(rows, schema):
    if isinstance(rows, FeatureMatrix):
        if rows.y is None:
            raise ValidationError("training rows need targets")
        return rows.X, rows.y, rows.schema
    rows = list(rows)
    if not rows:
        raise InsufficientDataError("cannot fit a forest on zero rows")
    widths = {len(r.values) for r in rows}
    if len(widths) != 1:
        raise SchemaMismatchError(f"rows have differing widths {sorted(widths)}")
    if any(r.target_p is None for r in rows):
        raise ValidationError("training rows need targets")
    X = np.vstack([np.asarray(r.values, dtype=float) for r in rows])
    y = np.array([r.target_p for r in rows], dtype=float)
    if schema is None:
        names = tuple(f"f{i}" for i in range(X.shape[1]))
        schema = FeatureSchema("custom", names, ("edge",) * len(names))
    return X, y, schema


def _grow(X, y, order, config: ForestConfig, tree_index: int, n_sub: int) -> Tree:
    n = X.shape[0]
    seed = config.rng_seed + tree_index
    if config.bootstrap:
        sample = np.random.default_rng(seed).integers(0, n, size=n)
    else:
        sample = np.arange(n)
    max_depth = -1 if config.max_depth is None else config.max_depth
    arrays = _tree.grow_tree(X, y, order, sample.astype(np.int64), n_sub, config.min_samples_leaf,
                             max_depth, seed % (2 ** 32))
    return Tree(*arrays)


def fit(rows: Union[FeatureMatrix, Sequence[FeatureRow]], config: ForestConfig = ForestConfig(),
        schema: Optional[FeatureSchema] = None) -> RandomForestModel:
    """Fit a random forest regressor.

    Parameters
    ----------
    rows : FeatureMatrix or sequence of FeatureRow
        Training rows with targets. A plain row sequence may carry ``schema``
        explicitly; otherwise generic names are assigned.
    config : ForestConfig
        Tree count, depth and leaf limits, per-split feature sampling rule
        and seed. Tree ``i`` draws from seed ``rng_seed + i``, so the result
        does not depend on ``n_jobs``.

    Returns
    -------
    RandomForestModel
    """
    X, y, schema = _as_arrays(rows, schema)
    if X.shape[0] < 2:
        raise InsufficientDataError(f"need at least 2 rows, got {X.shape[0]}")
    if X.shape[1] != len(schema):
        raise SchemaMismatchError(f"rows have {X.shape[1]} columns, schema has {len(schema)}")
    X = np.ascontiguousarray(X, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    n_sub = config.n_split_features(X.shape[1])
    order = np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T, dtype=np.int64)
    if config.n_jobs == 1:
        trees = [_grow(X, y, order, config, i, n_sub) for i in range(config.n_trees)]
    else:
        trees = Parallel(n_jobs=config.n_jobs, prefer="threads")(
            delayed(_grow)(X, y, order, config, i, n_sub) for i in range(config.n_trees))
    return RandomForestModel(config, trees, schema)


def predict(model: RandomForestModel, row) -> float:
    return model.predict_one(row)


# --- persistence ------------------------------------------------------------

def _header(model: RandomForestModel) -> dict:
    return {"format": "lnbalance-forest", "version": FORMAT_VERSION,
            "config": asdict(model.config), "schema": model.schema.to_json(),
            "schema_digest": model.schema.digest, "n_trees": len(model.trees)}


def to_bytes(model: RandomForestModel) -> bytes:
    """Serialize deterministically: a zip of a JSON header and raw arrays."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        def put(name, data: bytes):
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, data)

        put("header.json", json.dumps(_header(model), sort_keys=True).encode())
        put("mdi.npy", _npy(model.mdi))
        put("offsets.npy", _npy(model._offsets))
        for name in _ARRAYS:
            put(f"{name}.npy", _npy(np.concatenate([getattr(t, name) for t in model.trees])))
    return buf.getvalue()


def _npy(arr) -> bytes:
    b = io.BytesIO()
    np.save(b, np.ascontiguousarray(arr), allow_pickle=False)
    return b.getvalue()


def from_bytes(data: bytes) -> RandomForestModel:
    try:
        with zipfile.ZipFile(io.BytesIO(data)) as zf:
            header = json.loads(zf.read("header.json"))
            arrays = {name: np.load(io.BytesIO(zf.read(f"{name}.npy")), allow_pickle=False)
                      for name in (*_ARRAYS, "mdi", "offsets")}
    except (zipfile.BadZipFile, KeyError, ValueError, EOFError, OSError) as exc:
        raise CorruptModelError(f"corrupt model file: {exc}") from None
    if header.get("format") != "lnbalance-forest":
        raise CorruptModelError("not a forest model file")
    if header.get("version") != FORMAT_VERSION:
        raise CorruptModelError(
            f"model format version {header.get('version')} unsupported (expected {FORMAT_VERSION})")
    schema = FeatureSchema.from_json(header["schema"])
    if schema.digest != header.get("schema_digest"):
        raise SchemaMismatchError("stored schema does not match its digest")
    offsets = arrays["offsets"]
    if offsets.shape[0] != header["n_trees"] + 1:
        raise CorruptModelError("tree count does not match offsets")
    trees = []
    for t in range(header["n_trees"]):
        lo, hi = int(offsets[t]), int(offsets[t + 1])
        trees.append(Tree(*(arrays[name][lo:hi] for name in _ARRAYS)))
    config = ForestConfig(**header["config"])
    return RandomForestModel(config, trees, schema, mdi=arrays["mdi"])


def save(model: RandomForestModel, path) -> None:
    with open(path, "wb") as f:
        f.write(to_bytes(model))


def load(path) -> RandomForestModel:
    with open(path, "rb") as f:
        return from_bytes(f.read())
