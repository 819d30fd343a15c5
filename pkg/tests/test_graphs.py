import numpy as np
import pytest

from pigvae.graphs import (
    DataError,
    FAMILIES,
    Graph,
    Permutation,
    build_edge_features,
    edit_sequence,
    gen_graph,
    pad_batch,
    permute_graph,
    read_dataset,
    sample_mix10,
    topological_distances,
    unpad_batch,
    write_dataset,
)


def path_graph(n):
    adj = np.zeros((n, n), dtype=np.int8)
    for i in range(n - 1):
        adj[i, i + 1] = adj[i + 1, i] = 1
    return Graph(n, np.ones((n, 1), np.float32), adj)


class TestGenGraph:
    def test_er_p0_empty(self):
        g = gen_graph("erdos_renyi", 5, {"p": 0.0}, seed=0)
        assert g.num_edges == 0

    def test_er_p1_complete(self):
        g = gen_graph("erdos_renyi", 5, {"p": 1.0}, seed=0)
        assert g.num_edges == 10

    def test_er_mean_edges_within_3_sigma(self):
        # edge count ~ Binomial(66, 0.5): mean 33, sd of the mean over 1000
        # draws = sqrt(66*0.25/1000)
        counts = [gen_graph("erdos_renyi", 12, {"p": 0.5}, seed=s).num_edges for s in range(1000)]
        mean = np.mean(counts)
        sd_mean = np.sqrt(66 * 0.25 / 1000)
        assert abs(mean - 33.0) < 3 * sd_mean

    def test_ba_edge_count_invariant(self):
        for s in range(25):
            g = gen_graph("barabasi_albert", 20, {"m": 4}, seed=s)
            assert g.num_edges == 4 * (20 - 4)

    def test_ba_connected(self):
        for s in range(25):
            g = gen_graph("barabasi_albert", 16, {"m": 2}, seed=s)
            assert np.all(topological_distances(g, cap=32) < 32)

    def test_seed_determinism(self):
        for fam, params in [
            ("erdos_renyi", {"p": 0.5}),
            ("barabasi_albert", {"m": 3}),
            ("geometric", {"radius": 0.4}),
            ("watts_strogatz", {"k": 4, "rewire": 0.3}),
        ]:
            a = gen_graph(fam, 12, params, seed=99)
            b = gen_graph(fam, 12, params, seed=99)
            assert np.array_equal(a.adjacency, b.adjacency)

    def test_invalid_params_raise(self):
        with pytest.raises(DataError):
            gen_graph("erdos_renyi", 5, {"p": 1.5}, seed=0)
        with pytest.raises(DataError):
            gen_graph("barabasi_albert", 5, {"m": 5}, seed=0)
        with pytest.raises(DataError):
            gen_graph("regular", 5, {"degree": 3}, seed=0)  # n*d odd
        with pytest.raises(DataError):
            gen_graph("no_such_family", 5, {}, seed=0)

    def test_all_families_generate(self):
        for g in sample_mix10(len(FAMILIES) * 4, seed=3):
            assert g.family in FAMILIES
            assert g.n >= 1


class TestPermuteGraph:
    def test_identity(self):
        g = gen_graph("erdos_renyi", 8, {"p": 0.5}, seed=1)
        assert permute_graph(g, Permutation.identity(8)) == g

    def test_involution(self):
        g = gen_graph("erdos_renyi", 9, {"p": 0.4}, seed=2)
        p = Permutation.random(9, np.random.default_rng(0))
        assert permute_graph(permute_graph(g, p), p.inverse()) == g

    def test_hand_relabeled_path(self):
        g = path_graph(3)
        out = permute_graph(g, Permutation(np.array([2, 0, 1])))
        assert set(out.edge_list()) == {(0, 2), (1, 2)}

    def test_size_mismatch(self):
        with pytest.raises(DataError):
            permute_graph(path_graph(3), Permutation(np.array([1, 0])))

    def test_preserves_degrees_edges_spectrum(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            n = int(rng.integers(4, 11))
            g = gen_graph("erdos_renyi", n, {"p": 0.5}, seed=int(rng.integers(1 << 31)))
            gp = permute_graph(g, Permutation.random(n, rng))
            assert g.num_edges == gp.num_edges
            assert sorted(g.degree_sequence()) == sorted(gp.degree_sequence())
            ev1 = np.sort(np.linalg.eigvalsh(g.adjacency.astype(float)))
            ev2 = np.sort(np.linalg.eigvalsh(gp.adjacency.astype(float)))
            np.testing.assert_allclose(ev1, ev2, atol=1e-8)


class TestEditSequence:
    def test_zero_steps(self):
        assert edit_sequence(path_graph(4), 0, seed=0) == []

    def test_edge_count_preserved_and_hamming(self):
        g = gen_graph("erdos_renyi", 10, {"p": 0.5}, seed=4)
        seq = edit_sequence(g, 8, seed=1)
        prev = g
        for i, cur in enumerate(seq, start=1):
            assert cur.num_edges == g.num_edges
            assert int(np.sum(prev.adjacency != cur.adjacency)) == 4  # 2 pairs * symmetry
            assert int(np.sum(g.adjacency != cur.adjacency)) <= 4 * i
            prev = cur

    def test_forced_substitution_on_near_complete(self):
        adj = 1 - np.eye(4, dtype=np.int8)
        adj[0, 1] = adj[1, 0] = 0
        g = Graph(4, np.ones((4, 1), np.float32), adj)
        step = edit_sequence(g, 1, seed=0)[0]
        # the only legal move adds (0,1) and removes one of the 5 others
        assert step.adjacency[0, 1] == 1
        assert step.num_edges == 5


class TestTopologicalDistances:
    def test_complete(self):
        g = gen_graph("erdos_renyi", 6, {"p": 1.0}, seed=0)
        d = topological_distances(g, cap=8)
        assert np.all(d[~np.eye(6, dtype=bool)] == 1)
        assert np.all(np.diag(d) == 0)

    def test_path(self):
        d = topological_distances(path_graph(3), cap=8)
        assert d[0, 2] == 2 and d[2, 0] == 2

    def test_disconnected_clamped(self):
        g = Graph(2, np.ones((2, 1), np.float32), np.zeros((2, 2), np.int8))
        d = topological_distances(g, cap=8)
        assert d[0, 1] == 8

    def test_symmetric(self):
        g = gen_graph("erdos_renyi", 10, {"p": 0.3}, seed=3)
        d = topological_distances(g, cap=8)
        assert np.array_equal(d, d.T)


class TestEdgeFeatures:
    def test_empty_graph_absent_channel(self):
        g = Graph(4, np.ones((4, 1), np.float32), np.zeros((4, 4), np.int8))
        f = build_edge_features(g)
        off = ~np.eye(4, dtype=bool)
        assert np.all(f[:, :, 1][off] == 1) and np.all(f[:, :, 0] == 0)

    def test_complete_graph_present_channel(self):
        g = gen_graph("erdos_renyi", 4, {"p": 1.0}, seed=0)
        f = build_edge_features(g)
        off = ~np.eye(4, dtype=bool)
        assert np.all(f[:, :, 0][off] == 1) and np.all(f[:, :, 1] == 0)

    def test_diagonal_zero(self):
        g = gen_graph("erdos_renyi", 5, {"p": 0.5}, seed=1)
        f = build_edge_features(g, use_topo=True, cap=4)
        assert np.all(f[np.arange(5), np.arange(5), :] == 0)

    def test_topo_bucket_for_path(self):
        f = build_edge_features(path_graph(3), use_topo=True, cap=4)
        assert f.shape[-1] == 6
        assert f[0, 2, 2 + 1] == 1  # distance-2 bucket hot
        assert f[0, 1, 2 + 0] == 1  # distance-1 bucket hot


class TestBatching:
    def test_single_graph(self):
        b = pad_batch([path_graph(3)])
        assert b.mask.all() and b.n_max == 3

    def test_mixed_sizes(self):
        b = pad_batch([path_graph(3), path_graph(5)])
        assert b.n_max == 5
        assert b.mask[0].sum() == 3 and b.mask[1].sum() == 5
        assert np.all(b.node_features[0, 3:] == 0)
        assert np.all(b.edge_features[0, 3:, :, :] == 0)

    def test_round_trip(self):
        rng = np.random.default_rng(5)
        gs = [
            gen_graph("erdos_renyi", int(rng.integers(3, 9)), {"p": 0.5}, seed=i)
            for i in range(10)
        ]
        back = unpad_batch(pad_batch(gs))
        for a, b in zip(gs, back):
            assert a.n == b.n and np.array_equal(a.adjacency, b.adjacency)

    def test_empty_list_raises(self):
        with pytest.raises(DataError):
            pad_batch([])


class TestDatasetIO:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        gs = [
            gen_graph("erdos_renyi", int(rng.integers(3, 12)), {"p": 0.5}, seed=i)
            for i in range(100)
        ]
        path = tmp_path / "g.jsonl"
        write_dataset(path, gs)
        back = read_dataset(path)
        assert len(back) == 100
        for a, b in zip(gs, back):
            assert a.n == b.n and np.array_equal(a.adjacency, b.adjacency)
            assert a.family == b.family

    def test_empty_file_is_empty_dataset(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        assert read_dataset(path) == []

    def test_truncated_line_names_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        write_dataset(path, [path_graph(3)])
        with open(path, "a") as fh:
            fh.write('{"n": 4, "edges": [[0,')
        with pytest.raises(DataError, match="line 3"):
            read_dataset(path)

    def test_wrong_format_rejected(self, tmp_path):
        path = tmp_path / "alien.jsonl"
        path.write_text('{"format": "other", "version": 1}\n')
        with pytest.raises(DataError, match="line 1"):
            read_dataset(path)

    def test_byte_identical_rewrites(self, tmp_path):
        gs = sample_mix10(20, seed=11)
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_dataset(p1, gs)
        write_dataset(p2, gs)
        assert p1.read_bytes() == p2.read_bytes()
