"""Verification suite for multi-hop connectivity encoding.

The oracle here walks an explicit dense adjacency over the combined
user+item node set: nodes at shortest-path distance exactly h, scored by
how many distance-(h-1) nodes they connect to. It shares no code with
either production path (adjacency-list BFS, masked sparse products), so
agreement is meaningful.
"""

import numpy as np
import pytest

from conftest import make_matrix
from diffcf import dataset, graph
from diffcf.dataset import TAG_TEST, TAG_TRAIN
from diffcf.errors import ContractError, FormatError


def dense_hop_oracle(mat: np.ndarray, user: int, h: int) -> np.ndarray:
    """Normalized hop-h vector from a dense 0/1 interaction matrix."""
    num_users, num_items = mat.shape
    n = num_users + num_items
    adj = np.zeros((n, n), dtype=bool)
    adj[:num_users, num_users:] = mat > 0
    adj[num_users:, :num_users] = mat.T > 0
    dist = np.full(n, -1, dtype=np.int64)
    dist[user] = 0
    frontier = np.zeros(n, dtype=bool)
    frontier[user] = True
    for depth in range(1, h + 1):
        reach = adj[frontier].any(axis=0)
        frontier = reach & (dist < 0)
        dist[frontier] = depth
    prev = dist == h - 1
    level = np.flatnonzero(dist == h)
    counts = adj[level][:, prev].sum(axis=1).astype(np.float64)
    side = num_items if h % 2 == 1 else num_users
    offset = num_users if h % 2 == 1 else 0
    out = np.zeros(side, dtype=np.float32)
    total = counts.sum()
    if total:
        out[level - offset] = (counts / total).astype(np.float32)
    return out


def worked_example_matrix():
    """Three users, five items: user 0 holds {0, 1, 4}, user 1 holds
    {1, 2, 3}, user 2 holds {1, 3, 4}."""
    return make_matrix([[0, 1, 4], [1, 2, 3], [1, 3, 4]], num_items=5)


def random_matrix(rng, max_users=30, max_items=30, p=0.1):
    users = int(rng.integers(1, max_users + 1))
    items = int(rng.integers(1, max_items + 1))
    dense = rng.random((users, items)) < p
    rows = [np.flatnonzero(dense[u]).tolist() for u in range(users)]
    return make_matrix(rows, num_items=items), dense


class TestWorkedExample:
    def test_two_hop_vector(self):
        g = graph.build_bipartite(worked_example_matrix())
        v = graph.encode_hop(g, 0, 2)
        assert v.side == "user"
        np.testing.assert_array_equal(
            v.values, np.array([0, 1 / 3, 2 / 3], dtype=np.float32))

    def test_three_hop_vector(self):
        g = graph.build_bipartite(worked_example_matrix())
        v = graph.encode_hop(g, 0, 3)
        assert v.side == "item"
        np.testing.assert_array_equal(
            v.values, np.array([0, 0, 1 / 3, 2 / 3, 0], dtype=np.float32))

    def test_context_stacks_and_pads(self):
        g = graph.build_bipartite(worked_example_matrix())
        ctx = graph.encode_context(g, 0, hops=(2, 3))
        assert ctx.padded.shape == (2, 5)
        np.testing.assert_array_equal(ctx.padded[0, :3],
                                      np.array([0, 1 / 3, 2 / 3], dtype=np.float32))
        np.testing.assert_array_equal(ctx.padded[0, 3:], 0.0)


class TestReferenceEncoder:
    def test_hop_side_alternates(self):
        assert [graph.hop_side(h) for h in (1, 2, 3, 4)] == \
            ["item", "user", "item", "user"]

    def test_one_hop_is_normalized_neighborhood(self):
        m = worked_example_matrix()
        g = graph.build_bipartite(m)
        v = graph.encode_hop(g, 1, 1)
        np.testing.assert_array_equal(
            v.values, np.array([0, 1 / 3, 1 / 3, 1 / 3, 0], dtype=np.float32))

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            m, dense = random_matrix(rng)
            g = graph.build_bipartite(m)
            for h in (2, 3, 4):
                for u in range(m.num_users):
                    got = graph.encode_hop(g, u, h).values
                    want = dense_hop_oracle(dense, u, h)
                    assert np.array_equal(got, want), (
                        f"user {u} hop {h}: {got} vs {want}")

    def test_exhausted_frontier_is_all_zero(self):
        m = make_matrix([[0], [1]], num_items=2)  # two disjoint pairs
        g = graph.build_bipartite(m)
        assert graph.encode_hop(g, 0, 2).values.sum() == 0.0
        assert graph.encode_hop(g, 0, 3).values.sum() == 0.0

    def test_argument_contracts(self):
        g = graph.build_bipartite(worked_example_matrix())
        with pytest.raises(ContractError):
            graph.hop_frontier(g, 99, 2)
        with pytest.raises(ContractError):
            graph.hop_frontier(g, 0, 0)
        with pytest.raises(ContractError):
            graph.encode_context(g, 0, hops=(1, 2))

    def test_held_out_edges_do_not_leak(self):
        m = make_matrix([[0, 1], [1, 2]], num_items=3,
                        tags=[[TAG_TRAIN, TAG_TEST], [TAG_TRAIN, TAG_TRAIN]])
        g = graph.build_bipartite(m)
        np.testing.assert_array_equal(g.user_adj[0], [0])
        # Without the test edge user 0 shares no item with user 1.
        assert graph.encode_hop(g, 0, 2).values.sum() == 0.0


class TestBatchBuilder:
    def test_matches_reference_both_routes(self):
        rng = np.random.default_rng(1)
        for trial in range(12):
            m, _ = random_matrix(rng)
            g = graph.build_bipartite(m)
            for dense_adj in (False, True):
                ctxs = graph.build_contexts(m, H=4, chunk=7,
                                            dense_adjacency=dense_adj)
                for h in (2, 3, 4):
                    for u in range(m.num_users):
                        got = ctxs.user_vector(u, h)
                        want = graph.encode_hop(g, u, h).values
                        assert np.array_equal(got, want), (
                            f"trial {trial} dense={dense_adj} user {u} hop {h}")

    def test_batch_rows_layout(self):
        m = worked_example_matrix()
        ctxs = graph.build_contexts(m, H=3)
        rows = ctxs.batch_rows(np.array([2, 0]), 2)
        assert rows.shape == (2, 3)
        np.testing.assert_array_equal(rows[1], ctxs.user_vector(0, 2))
        assert ctxs.hop_list == (2, 3)
        assert ctxs.max_dim == 5

    def test_depth_contract(self):
        with pytest.raises(ContractError):
            graph.build_contexts(worked_example_matrix(), H=1)

    def test_train_tag_only_by_default(self):
        m = make_matrix([[0, 1], [1, 2]], num_items=3,
                        tags=[[TAG_TRAIN, TAG_TEST], [TAG_TRAIN, TAG_TRAIN]])
        ctxs = graph.build_contexts(m, H=2)
        assert ctxs.user_vector(0, 2).sum() == 0.0


class TestContextIO:
    def test_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(2)
        m, _ = random_matrix(rng, max_users=20, max_items=15, p=0.2)
        ctxs = graph.build_contexts(m, H=4)
        path = tmp_path / "ctx.cfhc"
        graph.save_contexts(path, ctxs)
        loaded = graph.load_contexts(path)
        assert loaded.num_users == ctxs.num_users
        assert loaded.num_items == ctxs.num_items
        assert loaded.hop_list == ctxs.hop_list
        for h in ctxs.hop_list:
            a, b = ctxs.hops[h], loaded.hops[h]
            assert np.array_equal(a.indptr, b.indptr)
            assert np.array_equal(a.indices, b.indices)
            assert np.array_equal(a.data, b.data)

    def test_bytes_deterministic(self, tmp_path):
        m = worked_example_matrix()
        ctxs = graph.build_contexts(m, H=3)
        a, b = tmp_path / "a.cfhc", tmp_path / "b.cfhc"
        graph.save_contexts(a, ctxs)
        graph.save_contexts(b, ctxs)
        assert a.read_bytes() == b.read_bytes()

    def test_non_contiguous_hops_rejected(self, tmp_path):
        m = worked_example_matrix()
        ctxs = graph.build_contexts(m, H=4)
        partial = graph.HopContexts(ctxs.num_users, ctxs.num_items,
                                    {2: ctxs.hops[2], 4: ctxs.hops[4]})
        with pytest.raises(ContractError):
            graph.save_contexts(tmp_path / "bad.cfhc", partial)

    def test_bad_magic_and_truncation(self, tmp_path):
        m = worked_example_matrix()
        ctxs = graph.build_contexts(m, H=3)
        path = tmp_path / "ctx.cfhc"
        graph.save_contexts(path, ctxs)
        raw = path.read_bytes()
        (tmp_path / "bad.cfhc").write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(FormatError):
            graph.load_contexts(tmp_path / "bad.cfhc")
        (tmp_path / "cut.cfhc").write_bytes(raw[:-5])
        with pytest.raises(FormatError):
            graph.load_contexts(tmp_path / "cut.cfhc")
