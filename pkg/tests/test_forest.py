import json
import zipfile
import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lnbalance import forest
from lnbalance.errors import CorruptModelError, InsufficientDataError, SchemaMismatchError
from lnbalance.features import FeatureRow, FeatureSchema
from lnbalance.forest import ForestConfig, RandomForestModel, Tree, fit

import oracles

SINGLE = dict(n_trees=1, bootstrap=False, features_per_split="all", min_samples_leaf=1)


def _rows(X, y):
    return [FeatureRow(None, np.asarray(x, float), float(t)) for x, t in zip(X, y)]


def _schema(d):
    names = tuple(f"f{i}" for i in range(d))
    return FeatureSchema("custom", names, ("edge",) * d)


def _fit(X, y, **kw):
    return fit(_rows(X, y), ForestConfig(**kw), _schema(len(X[0])))


def test_constant_target():
    rng = np.random.default_rng(0)
    m = _fit(rng.random((50, 3)), [0.7] * 50, n_trees=10)
    assert np.all(m.predict(rng.random((20, 3))) == 0.7)
    assert all(t.node_count == 1 for t in m.trees)


def test_one_dimensional_threshold():
    m = _fit([[1.0], [2.0]], [0.0, 1.0], **SINGLE)
    t = m.trees[0]
    assert 1.0 <= t.threshold[0] < 2.0
    assert m.predict_one([1.0]) == 0.0 and m.predict_one([2.0]) == 1.0


def test_planted_feature_dominates_mdi():
    rng = np.random.default_rng(1)
    X = rng.random((400, 4))
    y = (X[:, 2] > 0.5).astype(float)
    m = _fit(X, y, n_trees=30)
    assert m.mdi[2] > 0.9
    assert m.mdi_by_name()["f2"] == m.mdi[2]


def test_corrupted_leaf_clamped():
    m = _fit([[0.0], [1.0], [2.0]], [0.1, 0.2, 0.3], **SINGLE)
    t = m.trees[0]
    bad = Tree(t.feature, t.threshold, t.left, t.right, np.full_like(t.value, 1.5),
               t.n_samples, t.impurity)
    broken = RandomForestModel(m.config, [bad], m.schema)
    assert broken.predict_one([0.0]) == 1.0
    assert broken.predict_raw(np.array([[0.0]]))[0] == 1.5


def test_save_load_exact(tmp_path):
    rng = np.random.default_rng(2)
    X = rng.random((200, 5))
    y = rng.random(200)
    m = _fit(X, y, n_trees=15, rng_seed=4)
    forest.save(m, tmp_path / "m.bin")
    back = forest.load(tmp_path / "m.bin")
    Q = rng.random((100, 5))
    assert np.array_equal(m.predict(Q), back.predict(Q))
    assert np.array_equal(m.mdi, back.mdi)
    assert forest.to_bytes(m) == forest.to_bytes(back)


def test_corrupt_files(tmp_path):
    m = _fit([[0.0], [1.0], [2.0], [3.0]], [0, 0, 1, 1], n_trees=3)
    data = forest.to_bytes(m)
    with pytest.raises(CorruptModelError):
        forest.from_bytes(data[: len(data) // 2])
    with pytest.raises(CorruptModelError):
        forest.from_bytes(b"")

    def rewrite(header_update):
        src = zipfile.ZipFile(io.BytesIO(data))
        out = io.BytesIO()
        with zipfile.ZipFile(out, "w") as dst:
            for name in src.namelist():
                blob = src.read(name)
                if name == "header.json":
                    h = json.loads(blob)
                    h.update(header_update)
                    blob = json.dumps(h).encode()
                dst.writestr(name, blob)
        return out.getvalue()

    with pytest.raises(CorruptModelError, match="version"):
        forest.from_bytes(rewrite({"version": 99}))
    with pytest.raises(SchemaMismatchError):
        forest.from_bytes(rewrite({"schema_digest": "0" * 64}))


def test_schema_mismatch_on_predict():
    m = _fit([[0.0, 1.0], [1.0, 0.0], [2.0, 2.0]], [0, 1, 0], n_trees=2)
    with pytest.raises(SchemaMismatchError):
        m.predict(np.zeros((1, 3)))


def test_insufficient_rows():
    with pytest.raises(InsufficientDataError):
        fit([], ForestConfig(n_trees=1))
    with pytest.raises(InsufficientDataError):
        _fit([[0.0]], [1.0], n_trees=1)


def test_determinism_and_jobs():
    rng = np.random.default_rng(3)
    X = rng.random((300, 6))
    y = rng.random(300)
    a = _fit(X, y, n_trees=12, rng_seed=7)
    b = _fit(X, y, n_trees=12, rng_seed=7)
    c = _fit(X, y, n_trees=12, rng_seed=7, n_jobs=3)
    Q = rng.random((50, 6))
    assert np.array_equal(a.predict(Q), b.predict(Q))
    assert np.array_equal(a.predict(Q), c.predict(Q))
    assert np.array_equal(a.mdi, c.mdi)


def test_unbounded_tree_interpolates():
    rng = np.random.default_rng(5)
    X = rng.random((100, 3))
    y = rng.random(100)
    m = _fit(X, y, **SINGLE)
    assert np.abs(m.predict(X) - y).max() == 0.0


datasets = st.integers(0, 2**31).flatmap(lambda seed: st.tuples(
    st.just(seed), st.integers(2, 60), st.integers(1, 5), st.booleans()))


@settings(max_examples=60, deadline=None)
@given(datasets)
def test_root_split_matches_exhaustive(params):
    seed, n, d, discrete = params
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 4, (n, d)).astype(float) if discrete else rng.random((n, d))
    y = rng.random(n)
    m = _fit(X, y, max_depth=1, **SINGLE)
    gain, where = oracles.best_split_exhaustive(X.tolist(), y.tolist())
    t = m.trees[0]
    if not where:
        assert t.node_count == 1
        return
    f, thr = int(t.feature[0]), float(t.threshold[0])
    assert (f, thr) == where[0]
    got = n * t.impurity[0] - t.n_samples[1] * t.impurity[1] - t.n_samples[2] * t.impurity[2]
    assert got == pytest.approx(gain, rel=1e-9, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 6))
def test_mdi_properties(seed, d):
    rng = np.random.default_rng(seed)
    X = rng.random((80, d))
    y = X[:, 0] + 0.1 * rng.random(80)
    m = _fit(X, y, n_trees=5, rng_seed=seed % 1000)
    assert np.all(m.mdi >= 0)
    assert m.mdi.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(m.mdi, oracles.mdi(m.trees, d), atol=1e-12)


def test_mdi_follows_column_permutation():
    rng = np.random.default_rng(8)
    X = rng.random((150, 4))
    y = 2 * X[:, 1] + X[:, 3] + 0.05 * rng.random(150)
    perm = [2, 0, 3, 1]
    # shallow with big leaves: tiny nodes tie across features and break by index
    cfg = dict(SINGLE, max_depth=4, min_samples_leaf=8)
    a = _fit(X, y, **cfg)
    b = _fit(X[:, perm], y, **cfg)
    assert np.allclose(a.mdi[perm], b.mdi, atol=1e-12)
