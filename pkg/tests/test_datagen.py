import statistics

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.sparse.csgraph import connected_components

from lnbalance.datagen import (BalanceSeries, SynthConfig, generate_synthetic, kde_sample,
                               kde_sample_many, labels_from_series, load_series, load_truth,
                               observed_labels, silverman_bandwidth, write_synthetic)
from lnbalance.errors import DataError, ValidationError
from lnbalance.graph import DirectedEdge, MSAT_PER_SAT, load_labels, load_snapshot
from lnbalance.spectral import adjacency_matrix

from conftest import build, nid

CAP = 1_000_000
EDGE = DirectedEdge(nid(0), nid(1), "c0")


def _series(values, cap=CAP):
    return BalanceSeries(EDGE, cap, tuple((60 * i, int(v)) for i, v in enumerate(values)))


def _silverman_reference(x):
    # independent: stdlib stdev and inclusive quartiles (linear interpolation)
    q1, _, q3 = statistics.quantiles(x, n=4, method="inclusive")
    sd = statistics.stdev(x)
    spread = min(sd, (q3 - q1) / 1.34)
    if spread <= 0:
        spread = sd
    return 0.9 * spread * len(x) ** -0.2


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, CAP), min_size=2, max_size=80))
def test_silverman_matches_reference(values):
    x = np.array(values, dtype=float)
    assert silverman_bandwidth(x) == pytest.approx(_silverman_reference(values), rel=1e-9, abs=1e-9)


def test_identical_series_is_exact():
    s = _series([500_000] * 60)
    assert all(kde_sample(s, seed) == 500_000 for seed in range(20))


def test_extreme_series_clamped():
    s = _series([0, CAP] * 30)
    draws = kde_sample_many(s, 5000, 3)
    assert draws.min() >= 0 and draws.max() <= CAP


def test_uniform_series_mean():
    # a long series so its own sample mean sits close to the generating mean
    rng = np.random.default_rng(11)
    s = _series(rng.uniform(0, CAP, size=5000))
    draws = np.array([kde_sample(s, seed) for seed in range(10_000)])
    assert abs(draws.mean() - CAP / 2) <= 0.02 * CAP / 2


def test_series_validation():
    with pytest.raises(ValidationError):
        BalanceSeries(EDGE, CAP, ())
    with pytest.raises(ValidationError):
        BalanceSeries(EDGE, CAP, ((0, CAP + 1),))
    with pytest.raises(ValidationError):
        BalanceSeries(EDGE, CAP, ((5, 1), (5, 2)))


def test_series_file_to_labels(tmp_path):
    g = build(3, [(0, 1, CAP), (1, 2, CAP)])
    p = tmp_path / "series.csv"
    rows = ["channel_id,src_pub,timestamp,balance_sat"]
    rows += [f"c0,{nid(0)},{60 * i},{400_000}" for i in range(60)]
    rows += [f"c1,{nid(2)},{60 * i},{100_000 + 1000 * i}" for i in range(60)]
    p.write_text("\n".join(rows) + "\n")
    series = load_series(g, p)
    assert len(series) == 2
    a = labels_from_series(g, series, 5)
    b = labels_from_series(g, series, 5)
    assert a.labels == b.labels
    assert a.labels[g.edge_between(nid(0), "c0")].y_sat == 400_000
    bad = tmp_path / "bad.csv"
    bad.write_text("channel_id,src_pub,timestamp,balance_sat\nc9,%s,1,5\n" % nid(0))
    with pytest.raises(DataError):
        load_series(g, bad)


def test_two_node_graph():
    g = generate_synthetic(SynthConfig(n_nodes=2, m=1, rng_seed=1))
    assert len(g.channels) == 1
    (cid,) = g.channels
    fwd, rev = g.channels[cid].edges
    assert g.labels[fwd].y_sat + g.labels[rev].y_sat == g.channels[cid].capacity_sat


def test_config_validation():
    with pytest.raises(ValidationError):
        SynthConfig(n_nodes=5, m=5)
    with pytest.raises(ValidationError):
        SynthConfig(signal_strength=1.5)
    with pytest.raises(ValidationError):
        SynthConfig(n_nodes=1)


def _p_values(g):
    return np.array([g.labels[e].p for e in g.edges()])


def test_depleted_tails():
    g = generate_synthetic(SynthConfig(n_nodes=502, m=2, depleted_fraction=1.0, rng_seed=3))
    p = np.array([g.labels[g.channels[c].edges[0]].p for c in g.channels])
    assert len(p) >= 1000
    assert np.mean((p < 0.2) | (p > 0.8)) >= 0.95


def test_no_signal_means_no_htlc_correlation():
    g = generate_synthetic(SynthConfig(n_nodes=1252, m=2, signal_strength=0.0, rng_seed=4))
    edges = list(g.edges())
    assert len(edges) >= 5000
    frac = [min(1.0, g.policy(e).max_htlc_msat / (g.capacity(e) * MSAT_PER_SAT)) for e in edges]
    r = np.corrcoef(frac, [g.labels[e].p for e in edges])[0, 1]
    assert abs(r) <= 0.05


def test_signal_plants_htlc_correlation():
    g = generate_synthetic(SynthConfig(n_nodes=400, signal_strength=0.8, rng_seed=4))
    edges = list(g.edges())
    frac = [min(1.0, g.policy(e).max_htlc_msat / (g.capacity(e) * MSAT_PER_SAT)) for e in edges]
    assert np.corrcoef(frac, [g.labels[e].p for e in edges])[0, 1] > 0.5


@settings(max_examples=15, deadline=None)
@given(st.integers(2, 120), st.integers(1, 3), st.integers(0, 2**32))
def test_generated_graph_invariants(n, m, seed):
    if m >= n:
        m = n - 1
    g = generate_synthetic(SynthConfig(n_nodes=n, m=m, rng_seed=seed))
    _, a = adjacency_matrix(g)
    assert connected_components(a, directed=False)[0] == 1
    for ch in g.channels.values():
        fwd, rev = ch.edges
        assert g.labels[fwd].y_sat + g.labels[rev].y_sat == ch.capacity_sat
        assert g.labels[fwd].p + g.labels[rev].p == pytest.approx(1.0, abs=1e-12)


def test_bimodal_shape():
    g = generate_synthetic(SynthConfig(n_nodes=1000, depleted_fraction=0.3, rng_seed=8))
    counts, _ = np.histogram(_p_values(g), bins=10, range=(0, 1))
    mid = counts[4:6].max()
    assert counts[0] > mid and counts[-1] > mid


def test_same_seed_identical_files(tmp_path):
    cfg = SynthConfig(n_nodes=60, rng_seed=9)
    a = write_synthetic(generate_synthetic(cfg), tmp_path / "a", 0.5, 2)
    b = write_synthetic(generate_synthetic(cfg), tmp_path / "b", 0.5, 2)
    for key in a:
        assert a[key].read_bytes() == b[key].read_bytes()


def test_written_files_load(tmp_path):
    g = generate_synthetic(SynthConfig(n_nodes=50, rng_seed=2))
    paths = write_synthetic(g, tmp_path, 0.6, 1)
    snap = load_snapshot(paths["snapshot"])
    labeled = load_labels(snap, paths["labels"])
    truth = load_truth(snap, paths["truth"])
    assert truth.labels == g.labels
    assert 0 < len(labeled.labels) < len(g.channels)
    for e, lab in labeled.labels.items():
        assert lab.y_sat == g.labels[e].y_sat


def test_observed_labels_fraction():
    g = generate_synthetic(SynthConfig(n_nodes=300, rng_seed=5))
    labs = observed_labels(g, 0.5, 1)
    assert 0.4 < len(labs) / len(g.channels) < 0.6
    assert len({lab.edge.channel_id for lab in labs}) == len(labs)
