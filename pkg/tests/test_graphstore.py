import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lsttm.graphstore import (
    EXTERNAL,
    INTERNAL,
    ITEM,
    USER,
    ContextFeatures,
    EventRecord,
    InteractionGraph,
    deepwalk_paths,
    temporal_neighbors,
    uniform_neighbors,
)


def click(u, d, t, source=INTERNAL):
    return EventRecord(u, d, t, source, True, ContextFeatures(0, 0))


def test_event_validation():
    with pytest.raises(ValueError):
        EventRecord(0, 0, -1, INTERNAL, True)
    with pytest.raises(ValueError):
        EventRecord(0, 0, 1, "mobile", True)
    with pytest.raises(ValueError):
        EventRecord(0, 0, 1, EXTERNAL, False)
    with pytest.raises(ValueError):
        EventRecord(0, 0, 1, INTERNAL, True, ContextFeatures(24, 0))


def test_short_graph_filters_external_and_unclicked():
    g = InteractionGraph("short")
    assert g.append(click(0, 1, 5, EXTERNAL)) is not None
    assert g.append(EventRecord(0, 1, 5, INTERNAL, False)) is not None
    assert g.append(click(0, 1, 5)) is None
    assert g.n_edges == 1


def test_long_graph_keeps_both_sources():
    g = InteractionGraph("long")
    assert g.extend([click(0, 1, 5), click(0, 7, 6, EXTERNAL)]) == 2
    assert list(g.external_items) == [7]


def test_temporal_neighbors_are_most_recent_oldest_first():
    g = InteractionGraph("short")
    for t, d in [(10, 1), (20, 2), (30, 3), (40, 4)]:
        g.append(click(0, d, t))
    snap = g.snapshot(35)
    assert temporal_neighbors(snap, (USER, 0), 2) == [(ITEM, 2), (ITEM, 3)]
    assert temporal_neighbors(snap, (USER, 0), 10) == [(ITEM, 1), (ITEM, 2), (ITEM, 3)]


def test_snapshot_cutoff_is_inclusive_and_ignores_later_appends():
    g = InteractionGraph("short")
    g.append(click(0, 1, 10))
    snap = g.snapshot(10)
    g.append(click(0, 2, 5))  # out-of-order arrival after the snapshot
    assert snap.neighbors((USER, 0)) == [(ITEM, 1)]
    assert g.snapshot(10).neighbors((USER, 0)) == [(ITEM, 2), (ITEM, 1)]


def test_timestamp_ties_keep_insertion_order():
    g = InteractionGraph("short")
    for d in (5, 3, 9):
        g.append(click(0, d, 100))
    assert g.snapshot(100).neighbors((USER, 0)) == [(ITEM, 5), (ITEM, 3), (ITEM, 9)]


def test_unknown_node_has_no_neighbors():
    snap = InteractionGraph("long").snapshot(0)
    assert temporal_neighbors(snap, (USER, 3), 4) == []
    assert uniform_neighbors(snap, (USER, 3), 4, seed=0) == []


def test_k_must_be_positive():
    snap = InteractionGraph("long").snapshot(0)
    with pytest.raises(ValueError):
        temporal_neighbors(snap, (USER, 0), 0)


def test_uniform_neighbors_are_seeded_and_distinct():
    g = InteractionGraph("long")
    for d in range(50):
        g.append(click(0, d, d))
    snap = g.snapshot(100)
    a = uniform_neighbors(snap, (USER, 0), 10, seed=3)
    assert a == uniform_neighbors(snap, (USER, 0), 10, seed=3)
    assert len(set(a)) == 10
    assert a != uniform_neighbors(snap, (USER, 0), 10, seed=4)


def test_uniform_neighbors_are_roughly_uniform():
    g = InteractionGraph("long")
    for d in range(10):
        g.append(click(0, d, d))
    snap = g.snapshot(100)
    counts = np.zeros(10)
    for s in range(2000):
        for _, d in uniform_neighbors(snap, (USER, 0), 3, seed=s):
            counts[d] += 1
    # each item is picked with probability 3/10
    assert np.all(np.abs(counts / 2000 - 0.3) < 0.05)


def test_deepwalk_paths_follow_edges():
    g = InteractionGraph("long")
    for u, d, t in [(0, 0, 1), (0, 1, 2), (1, 1, 3), (2, 2, 4)]:
        g.append(click(u, d, t))
    snap = g.snapshot(10)
    ps = deepwalk_paths(snap, 2, 5, seed=1)
    assert len(ps) == 2 * len(g.nodes())
    for path in ps.paths:
        assert len(path) == 5
        for a, b in zip(path, path[1:]):
            assert b in snap.neighbors(a)
    assert ps.paths == deepwalk_paths(snap, 2, 5, seed=1).paths


def test_deepwalk_rejects_short_walks():
    g = InteractionGraph("long")
    g.append(click(0, 0, 1))
    with pytest.raises(ValueError):
        deepwalk_paths(g.snapshot(1), 1, 1, seed=0)


def test_deepwalk_isolated_snapshot_is_empty():
    g = InteractionGraph("long")
    g.append(click(0, 0, 100))
    assert len(deepwalk_paths(g.snapshot(50), 3, 4, seed=0)) == 0


def test_edges_round_trip_in_insertion_order():
    g = InteractionGraph("long")
    evs = [click(0, 3, 50), click(1, 2, 10), click(0, 2, 30)]
    g.extend(evs)
    assert [(u, d, t) for _, u, d, t in g.edges()] == [(0, 3, 50), (1, 2, 10), (0, 2, 30)]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 5), st.integers(0, 50)), min_size=1, max_size=40),
       st.integers(0, 60), st.integers(1, 6))
def test_temporal_neighbors_match_brute_force(edges, cutoff, k):
    g = InteractionGraph("short")
    for u, d, t in edges:
        g.append(click(u, d, t))
    snap = g.snapshot(cutoff)
    for u in range(4):
        visible = [(t, i, d) for i, (uu, d, t) in enumerate(edges) if uu == u and t <= cutoff]
        visible.sort()
        expect = [(ITEM, d) for _, _, d in visible[-k:]]
        assert temporal_neighbors(snap, (USER, u), k) == expect
