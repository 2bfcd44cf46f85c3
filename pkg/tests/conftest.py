from pathlib import Path

import pytest

from lnbalance.graph import Channel, ChannelGraph, ChannelPolicy, NodeInfo, make_label

FIXTURE = Path(__file__).parent / "fixtures" / "synth200"


def nid(i: int) -> str:
    return "02" + f"{i:064x}"


def policy(**kw) -> ChannelPolicy:
    base = dict(time_lock_delta=40, min_htlc_msat=1000, max_htlc_msat=500_000_000,
                fee_base_msat=1000, fee_rate_ppm=100)
    base.update(kw)
    return ChannelPolicy(**base)


def build(n_nodes, chans, labels=(), bits=None, policies=None):
    """Small graph from ``chans = [(i, j, capacity), ...]`` over nodes ``nid(0..n-1)``.

    ``policies`` maps a channel index to ``(policy i->j, policy j->i)``;
    ``labels`` lists ``(channel index, src index, y_sat)``.
    """
    bits = bits or {}
    nodes = [NodeInfo(nid(i), frozenset(bits.get(i, ()))) for i in range(n_nodes)]
    channels = []
    for k, (i, j, cap) in enumerate(chans):
        p_ij, p_ji = (policies or {}).get(k, (policy(), policy()))
        a, b, pa, pb = (i, j, p_ij, p_ji) if nid(i) < nid(j) else (j, i, p_ji, p_ij)
        channels.append(Channel(f"c{k}", nid(a), nid(b), cap, pa, pb))
    g = ChannelGraph.build(nodes, channels)
    labs = {}
    for k, src, y in labels:
        e = g.edge_between(nid(src), f"c{k}")
        labs[e] = make_label(g, e, y)
    return g.with_labels(labs)


@pytest.fixture
def triangle():
    return build(3, [(0, 1, 1_000_000), (1, 2, 1_000_000), (0, 2, 1_000_000)])


@pytest.fixture(scope="session")
def synth200():
    from lnbalance.graph import load_labels, load_snapshot

    g = load_snapshot(FIXTURE / "snapshot.json")
    return load_labels(g, FIXTURE / "labels.csv")


# acceptance criteria append (number, passed, detail) here; printed after the run
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, ok, detail in sorted(ACCEPTANCE, key=lambda r: (int(r[0].rstrip('ab')), r[0])):
        terminalreporter.write_line(f"criterion {num:>3}: {'PASS' if ok else 'FAIL'}  {detail}")
