import json

import numpy as np
import pytest

from stagefgl import graphdata as gd
from stagefgl.errors import InvalidArgument, ParseError
from stagefgl.graphdata.model import canonical_edges


def small_cfg(**kw):
    base = dict(node_count=400, class_count=4, p_in=0.05, p_out=0.005, seed=1)
    base.update(kw)
    return gd.SynthConfig(**base)


def test_no_inter_class_edges_when_p_out_zero():
    g = gd.generate_synthetic_mag(small_cfg(class_count=2, p_out=0.0, node_count=200))
    y = g.labels
    assert g.edge_count > 0
    assert np.all(y[g.edges[:, 0]] == y[g.edges[:, 1]])


def test_noiseless_features_identical_within_class():
    g = gd.generate_synthetic_mag(small_cfg(noise_std=0.0, mask_drop=0.0))
    for f in g.features:
        for c in range(g.class_count):
            rows = f[g.labels == c]
            assert np.all(rows == rows[0])


def test_intra_class_density_binomial_bounds():
    g = gd.generate_synthetic_mag(small_cfg())
    sizes = np.bincount(g.labels)
    pairs = int(np.sum(sizes * (sizes - 1) // 2))
    same = g.labels[g.edges[:, 0]] == g.labels[g.edges[:, 1]]
    rate = same.sum() / pairs
    sigma = np.sqrt(0.05 * 0.95 / pairs)
    assert abs(rate - 0.05) <= 3 * sigma


def test_generation_is_bit_identical():
    a = gd.generate_synthetic_mag(small_cfg())
    b = gd.generate_synthetic_mag(small_cfg())
    assert gd.encode(a) == gd.encode(b)
    c = gd.generate_synthetic_mag(small_cfg(seed=2))
    assert gd.encode(a) != gd.encode(c)


def test_graph_invariants():
    g = gd.generate_synthetic_mag(gd.SynthConfig(seed=3))
    assert np.all(g.edges[:, 0] < g.edges[:, 1])
    assert len(np.unique(g.edges, axis=0)) == g.edge_count
    assert g.masks.any(axis=1).all()
    for c, f in enumerate(g.features):
        assert not f[~g.masks[:, c]].any()
    assert g.labels.min() >= 0 and g.labels.max() < g.class_count


def test_canonical_edges():
    e = canonical_edges([[3, 1], [1, 3], [2, 2], [0, 1]], 4)
    np.testing.assert_array_equal(e, [[0, 1], [1, 3]])


@pytest.mark.parametrize("kw", [dict(p_in=0.01, p_out=0.02), dict(class_count=1),
                                dict(modality_dims=(0, 4)), dict(mask_drop=1.0)])
def test_synth_config_violations(kw):
    with pytest.raises(InvalidArgument):
        gd.generate_synthetic_mag(small_cfg(**kw))


def cliques(k, size):
    edges = []
    for c in range(k):
        nodes = range(c * size, (c + 1) * size)
        edges += [(u, v) for u in nodes for v in nodes if u < v]
    n = k * size
    labels = np.repeat(np.arange(k), size)
    return gd.MultimodalGraph([np.ones((n, 2))], np.ones((n, 1), bool), labels,
                              np.array(edges), k, (0,))


def test_communities_recover_disjoint_cliques():
    g = cliques(4, 10)
    p = gd.partition_communities(g, 4, seed=0)
    assert p.cut_size == 0
    for k in range(4):
        assert len(np.unique(g.labels[p.client_nodes[k]])) == 1


@pytest.mark.parametrize("fn", [gd.partition_communities, gd.partition_edgecut])
def test_k_one_rejected(fn):
    with pytest.raises(InvalidArgument):
        fn(cliques(4, 10), 1, seed=0)


def sbm(seed):
    return gd.generate_synthetic_mag(gd.SynthConfig(node_count=400, class_count=4, p_in=0.1,
                                                    p_out=0.001, seed=seed))


def test_communities_beat_random_partitions():
    g = sbm(0)
    p = gd.partition_communities(g, 4, seed=0)
    rng = np.random.default_rng(99)
    cuts = [gd.cut_size(g, rng.permutation(np.arange(g.node_count) % 4)) for _ in range(100)]
    assert p.cut_size < np.mean(cuts)


def test_edgecut_path_graph():
    n = 40
    g = gd.MultimodalGraph([np.ones((n, 1))], np.ones((n, 1), bool), np.zeros(n, int),
                           np.array([(i, i + 1) for i in range(n - 1)]), 2, (0,))
    assert gd.partition_edgecut(g, 2, seed=0).cut_size == 1


@pytest.mark.parametrize("seed", range(6))
def test_refinement_never_increases_cut(seed):
    g = gd.generate_synthetic_mag(gd.SynthConfig(node_count=300, seed=seed))
    part, before = gd.partition_edgecut(g, 3, seed=seed, return_unrefined=True)
    assert part.cut_size <= before


def test_edgecut_competitive_with_communities():
    wins = 0
    for seed in range(10):
        g = sbm(seed)
        wins += gd.partition_edgecut(g, 4, seed).cut_size <= \
            gd.partition_communities(g, 4, seed).cut_size
    assert wins >= 8


@pytest.mark.parametrize("K", [3, 5, 7])
@pytest.mark.parametrize("fn", [gd.partition_communities, gd.partition_edgecut])
def test_partition_balance(K, fn):
    g = gd.generate_synthetic_mag(gd.SynthConfig())
    p = fn(g, K, seed=0)
    sizes = p.sizes()
    assert sizes.max() / sizes.min() <= 1.5
    assert np.all(np.abs(sizes - g.node_count / K) <= 0.2 * g.node_count / K)
    assert sorted(np.concatenate(p.client_nodes).tolist()) == list(range(g.node_count))


def test_local_edges_are_induced():
    g = gd.generate_synthetic_mag(gd.SynthConfig(node_count=300, seed=4))
    p = gd.partition_communities(g, 3, seed=4)
    total = 0
    for k, nodes in enumerate(p.client_nodes):
        inside = set(nodes.tolist())
        expect = {(u, v) for u, v in g.edges.tolist() if u in inside and v in inside}
        got = {(int(nodes[a]), int(nodes[b])) for a, b in p.local_edges[k]}
        assert got == expect
        total += len(got)
    assert total + p.cut_size == g.edge_count


def two_way(alpha):
    g = gd.generate_synthetic_mag(small_cfg())
    return g, gd.apply_feature_drift([g, g.copy()], alpha, seed=5)


def test_drift_alpha_zero_bit_identical():
    g, (a, b) = two_way(0.0)
    for f, h in zip(g.features, a.features):
        assert np.array_equal(f, h)


def test_drift_alpha_one_displacement_matches_vectors():
    g, (a, b) = two_way(1.0)
    v = gd.drift_vectors([g, g], seed=5)
    for c in range(len(g.features)):
        live = g.masks[:, c]
        for cls in range(g.class_count):
            rows = live & (g.labels == cls)
            shift = a.features[c][rows].mean(0) - b.features[c][rows].mean(0)
            assert np.linalg.norm(shift) == pytest.approx(np.linalg.norm(v[0][c] - v[1][c]),
                                                          rel=1e-9)


def test_drift_leaves_masked_rows():
    g, (a, _) = two_way(1.0)
    for c, f in enumerate(a.features):
        assert not f[~g.masks[:, c]].any()


def test_drift_vectors_deterministic():
    g = gd.generate_synthetic_mag(small_cfg())
    v1 = gd.drift_vectors([g, g], 11)
    v2 = gd.drift_vectors([g, g], 11)
    for a, b in zip(v1, v2):
        for x, y in zip(a, b):
            assert np.array_equal(x, y)


def test_drift_rejects_alpha():
    g = gd.generate_synthetic_mag(small_cfg())
    with pytest.raises(InvalidArgument):
        gd.apply_feature_drift([g], 1.5, 0)


def test_modality_noise_counts():
    g = gd.generate_synthetic_mag(small_cfg(node_count=100, mask_drop=0.0, class_count=2))
    same, rep = gd.apply_modality_noise(g, 0.0, 1)
    assert all(len(r) == 0 for r in rep)
    assert all(np.array_equal(f, h) for f, h in zip(g.features, same.features))
    _, rep = gd.apply_modality_noise(g, 0.3, 1)
    assert [len(r) for r in rep] == [30, 30]
    full, rep = gd.apply_modality_noise(g, 1.0, 1)
    assert [len(r) for r in rep] == [100, 100]
    assert all(not np.any(np.all(f == h, axis=1)) for f, h in zip(g.features, full.features))


def test_split_one_class_exact():
    n = 100
    g = gd.MultimodalGraph([np.ones((n, 1))], np.ones((n, 1), bool), np.zeros(n, int),
                           np.zeros((0, 2)), 2, (0,))
    tags = gd.split_train_val_test(g, (0.6, 0.2, 0.2), seed=0)
    assert np.bincount(tags, minlength=3).tolist() == [60, 20, 20]


def test_split_deterministic_and_stratified():
    g = gd.generate_synthetic_mag(gd.SynthConfig(node_count=330, seed=2))
    a = gd.split_train_val_test(g, (0.6, 0.2, 0.2), seed=3)
    assert np.array_equal(a, gd.split_train_val_test(g, (0.6, 0.2, 0.2), seed=3))
    for c in range(g.class_count):
        n_c = np.sum(g.labels == c)
        assert abs(np.sum((g.labels == c) & (a == gd.TRAIN)) - 0.6 * n_c) <= 1


def test_split_tiny_class_goes_to_train():
    labels = np.array([0] * 20 + [1, 1])
    n = len(labels)
    g = gd.MultimodalGraph([np.ones((n, 1))], np.ones((n, 1), bool), labels,
                           np.zeros((0, 2)), 2, (0,))
    tags = gd.split_train_val_test(g, seed=0)
    assert np.all(tags[labels == 1] == gd.TRAIN)


def test_federated_roundtrip(tmp_path):
    cfg = gd.SynthConfig(node_count=200, seed=3)
    g = gd.generate_synthetic_mag(cfg)
    fed = gd.encode_clients(g, gd.partition_communities(g, 2, 0), cfg)
    gd.save(fed, tmp_path / "g.mag", "abc123")
    back, h = gd.load_with_hash(tmp_path / "g.mag")
    assert h == "abc123"
    assert np.array_equal(back.partition.assignment, fed.partition.assignment)
    assert back.graph.edge_count == g.edge_count
    for c_in, c_out in zip(fed.clients, back.clients):
        assert c_in.dims == c_out.dims
        for f, h2 in zip(c_in.features, c_out.features):
            np.testing.assert_allclose(f, h2, rtol=1e-6, atol=1e-6)


def test_decode_truncated_reports_offset():
    buf = gd.encode(gd.generate_synthetic_mag(small_cfg(node_count=40)))
    with pytest.raises(ParseError) as err:
        gd.decode(buf[:-7])
    assert err.value.offset > 0
    with pytest.raises(ParseError):
        gd.decode(b"MAGX" + buf[4:])


def test_client_encoders_change_dimensions():
    cfg = gd.SynthConfig(node_count=400, seed=7)
    g = gd.generate_synthetic_mag(cfg)
    fed = gd.encode_clients(g, gd.partition_communities(g, 4, 7), cfg)
    dims = [c.dims for c in fed.clients]
    for d in dims:
        assert all(abs(a - b) <= cfg.dim_jitter for a, b in zip(d, cfg.modality_dims))
    for k, c in enumerate(fed.clients):
        assert np.array_equal(c.masks, g.masks[fed.partition.client_nodes[k]])


def test_export_jsonl(tmp_path):
    g = gd.generate_synthetic_mag(small_cfg(node_count=40))
    gd.export_jsonl(g, tmp_path / "g.jsonl")
    lines = [json.loads(s) for s in (tmp_path / "g.jsonl").read_text().splitlines()]
    assert [r["type"] for r in lines] == ["node"] * 40 + ["edge"] * g.edge_count
    assert lines[0]["label"] == int(g.labels[0])
