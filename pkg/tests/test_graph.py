import json

import pytest
from hypothesis import given, settings, strategies as st

from lnbalance.errors import SnapshotParseError, ValidationError
from lnbalance.graph import (ChannelGraph, attach_labels, capacity_centrality, load_labels,
                             load_snapshot, make_label, normalize_node_id, parse_snapshot,
                             save_labels, save_snapshot, snapshot_to_json)

from conftest import build, nid


def _policy_json(**kw):
    obj = {"time_lock_delta": 40, "min_htlc": "1000", "max_htlc_msat": "990000000",
           "fee_base_msat": "1000", "fee_rate_milli_msat": "1", "disabled": False}
    obj.update(kw)
    return obj


def _snapshot(n_nodes, edges):
    return {
        "nodes": [{"pub_key": nid(i), "alias": f"n{i}", "features": {"9": {"is_known": True}}}
                  for i in range(n_nodes)],
        "edges": [{"channel_id": cid, "capacity": cap, "node1_pub": nid(a), "node2_pub": nid(b),
                   "node1_policy": _policy_json(), "node2_policy": _policy_json()}
                  for cid, a, b, cap in edges],
    }


def test_smallest_snapshot():
    g = parse_snapshot(_snapshot(2, [("1x1x1", 0, 1, "1000000")]))
    assert len(g.nodes) == 2
    assert len(g.channels) == 1
    assert len(list(g.edges())) == 2
    assert g.channels["1x1x1"].capacity_sat == 1_000_000


def test_self_loop_names_record():
    with pytest.raises(ValidationError, match="9x9x9.*self-loop"):
        parse_snapshot(_snapshot(2, [("9x9x9", 1, 1, 1000)]))


def test_zero_capacity_and_duplicates():
    with pytest.raises(ValidationError, match="capacity"):
        parse_snapshot(_snapshot(2, [("a", 0, 1, 0)]))
    with pytest.raises(ValidationError, match="duplicate channel_id a"):
        parse_snapshot(_snapshot(2, [("a", 0, 1, 10), ("a", 0, 1, 20)]))


def test_malformed_file(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(SnapshotParseError):
        load_snapshot(p)
    with pytest.raises(SnapshotParseError):
        parse_snapshot({"nodes": []})


def test_triangle_adjacency():
    g = parse_snapshot(_snapshot(3, [("a", 0, 1, 10), ("b", 1, 2, 10), ("c", 0, 2, 10)]))
    assert all(len(adj) == 2 for adj in g.adjacency.values())


def test_canonical_order_swaps_policies():
    snap = _snapshot(2, [("a", 1, 0, 10)])
    snap["edges"][0]["node1_policy"] = _policy_json(fee_rate_milli_msat="7")
    g = parse_snapshot(snap)
    ch = g.channels["a"]
    assert ch.node_a == nid(0) < ch.node_b
    assert ch.policy_from(nid(1)).fee_rate_ppm == 7


def test_missing_policy_retained():
    snap = _snapshot(2, [("a", 0, 1, 10)])
    snap["edges"][0]["node2_policy"] = None
    g = parse_snapshot(snap)
    fwd, rev = g.channels["a"].edges
    assert g.policy(fwd) is not None and g.policy(rev) is None


def test_node_id_validation():
    assert normalize_node_id(nid(5).upper()) == nid(5)
    with pytest.raises(ValidationError):
        normalize_node_id("02abc")


def test_labels(triangle):
    e = triangle.edge_between(nid(0), "c0")
    assert make_label(triangle, e, 250_000).p == 0.25
    assert make_label(triangle, e, 1_000_000).p == 1.0
    with pytest.raises(ValidationError):
        make_label(triangle, e, 1_000_001)


def test_label_errors(triangle):
    with pytest.raises(ValidationError, match="unknown channel_id"):
        attach_labels(triangle, [("zz", nid(0), 5)])
    with pytest.raises(ValidationError, match="conflicting"):
        attach_labels(triangle, [("c0", nid(0), 5), ("c0", nid(0), 6)])
    with pytest.raises(ValidationError, match="sum to capacity"):
        attach_labels(triangle, [("c0", nid(0), 5), ("c0", nid(1), 6)])


def test_reverse_label_derived_not_materialized(triangle):
    g = attach_labels(triangle, [("c0", nid(0), 300_000)])
    e = g.edge_between(nid(0), "c0")
    assert e.reverse() not in g.labels
    assert g.label_p(e.reverse()) == pytest.approx(0.7, abs=1e-12)


def test_capacity_centrality(triangle):
    single = build(2, [(0, 1, 5000)])
    assert capacity_centrality(single, nid(0)) == 1.0
    assert capacity_centrality(triangle, nid(1)) == pytest.approx(2 / 3, abs=1e-15)
    isolated = build(3, [(0, 1, 5000)])
    assert capacity_centrality(isolated, nid(2)) == 0.0
    with pytest.raises(ValidationError):
        capacity_centrality(triangle, nid(7))


@st.composite
def graphs(draw):
    n = draw(st.integers(2, 8))
    pairs = draw(st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1),
                                    st.integers(1, 10**8)), min_size=1, max_size=15))
    chans = [(i, j, c) for i, j, c in pairs if i != j]
    if not chans:
        chans = [(0, 1, 1000)]
    return build(n, chans)


@settings(max_examples=60, deadline=None)
@given(graphs())
def test_graph_invariants(g):
    # reverse edge present; centrality sums to two
    edge_set = {e for adj in g.adjacency.values() for e in adj}
    assert all(e.reverse() in edge_set for e in edge_set)
    assert sum(capacity_centrality(g, n) for n in g.nodes) == pytest.approx(2.0, abs=1e-12)
    assert g.total_capacity_sat == sum(c.capacity_sat for c in g.channels.values())


@settings(max_examples=30, deadline=None)
@given(graphs())
def test_snapshot_round_trip(g):
    again = parse_snapshot(json.loads(json.dumps(snapshot_to_json(g))))
    assert again == g


def test_file_round_trip(tmp_path, synth200):
    save_snapshot(synth200, tmp_path / "s.json")
    g = load_snapshot(tmp_path / "s.json")
    save_labels(synth200.labels.values(), tmp_path / "l.csv")
    g = load_labels(g, tmp_path / "l.csv")
    assert g == synth200


def test_full_label_pairs_sum_to_one(synth200):
    for cid in synth200.labeled_channel_ids():
        fwd, rev = synth200.channels[cid].edges
        assert synth200.label_p(fwd) + synth200.label_p(rev) == pytest.approx(1.0, abs=1e-9)


def test_graph_is_immutable(triangle):
    with pytest.raises(Exception):
        triangle.nodes = {}
    assert isinstance(triangle, ChannelGraph)
