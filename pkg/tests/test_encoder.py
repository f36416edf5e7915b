import numpy as np
import pytest
import scipy.sparse as sp

from plgc.encoder import (
    EncoderConfig,
    EncoderParams,
    encode,
    encode_on_tape,
    identity_adjacency,
    init_encoder,
    load_encoder,
    save_encoder,
)
from plgc.graph import SbmConfig, generate_sbm, normalize_adjacency
from plgc.tensor import Tape, finite_difference_check


CFG = EncoderConfig(hidden_dim=5, embed_dim=3, seed=0)


def test_init_deterministic():
    a = init_encoder(4, CFG)
    b = init_encoder(4, CFG)
    assert np.array_equal(a.w1, b.w1) and np.array_equal(a.w2, b.w2)


def test_init_seeds_differ():
    a = init_encoder(4, CFG)
    b = init_encoder(4, EncoderConfig(hidden_dim=5, embed_dim=3, seed=1))
    assert not np.array_equal(a.w1, b.w1)


def test_init_glorot_bounds():
    for seed in range(100):
        p = init_encoder(6, EncoderConfig(hidden_dim=4, embed_dim=3, seed=seed))
        assert np.all(np.abs(p.w1) <= np.sqrt(6.0 / (6 + 4)))
        assert np.all(np.abs(p.w2) <= np.sqrt(6.0 / (4 + 3)))


def test_output_rows_unit_norm():
    g = generate_sbm(SbmConfig(blocks=2, nodes_per_block=10), 3)
    params = init_encoder(g.feature_dim, CFG)
    z = encode(params, normalize_adjacency(g), g.features)
    assert np.max(np.abs(np.linalg.norm(z, axis=1) - 1.0)) <= 1e-12


def test_identity_adjacency_acts_per_node():
    # with A_hat = I the encoder is a per-row MLP: permuting inputs permutes outputs
    rng = np.random.default_rng(4)
    x = rng.normal(size=(6, 4))
    params = init_encoder(4, CFG)
    adj = identity_adjacency(6)
    z = encode(params, adj, x)
    perm = rng.permutation(6)
    z_perm = encode(params, adj, x[perm])
    assert np.array_equal(z_perm, z[perm])


def test_permutation_equivariance():
    g = generate_sbm(SbmConfig(blocks=2, nodes_per_block=8), 5)
    params = init_encoder(g.feature_dim, CFG)
    adj = normalize_adjacency(g).toarray()
    rng = np.random.default_rng(0)
    perm = rng.permutation(g.num_nodes)
    p = np.eye(g.num_nodes)[perm]
    z = encode(params, sp.csr_matrix(adj), g.features)
    z_perm = encode(params, sp.csr_matrix(p @ adj @ p.T), g.features[perm])
    assert np.max(np.abs(z_perm - z[perm])) <= 1e-10


def test_two_hop_locality():
    # path 0-1-2-3-4: node 0 and node 4 are 4 hops apart; perturbing features
    # of node 4 must leave node 0's embedding bit-identical after 2 layers
    from plgc.graph import Graph

    rng = np.random.default_rng(1)
    feats = rng.normal(size=(5, 3))
    g = Graph(5, [(0, 1), (1, 2), (2, 3), (3, 4)], feats)
    params = init_encoder(3, CFG)
    adj = normalize_adjacency(g)
    z = encode(params, adj, feats)
    feats2 = feats.copy()
    feats2[4] += 10.0
    z2 = encode(params, adj, feats2)
    assert np.array_equal(z[0], z2[0])
    assert not np.array_equal(z[4], z2[4])


def test_deterministic_embeddings():
    g = generate_sbm(SbmConfig(blocks=2, nodes_per_block=10), 6)
    params = init_encoder(g.feature_dim, CFG)
    adj = normalize_adjacency(g)
    assert np.array_equal(encode(params, adj, g.features), encode(params, adj, g.features))


def test_end_to_end_gradients_match_finite_differences():
    from plgc.graph import Graph

    rng = np.random.default_rng(2)
    feats = rng.normal(size=(6, 4))
    g = Graph(6, [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 5)], feats)
    adj = normalize_adjacency(g)
    params = init_encoder(4, CFG)
    target = rng.normal(size=(6, 3))

    def loss_wrt(which):
        def f(m):
            t = Tape()
            w1 = t.var(m if which == "w1" else params.w1)
            w2 = t.var(m if which == "w2" else params.w2)
            x = t.var(m if which == "x" else feats)
            z = encode_on_tape(t, w1, w2, adj, x)
            out = t.sse(z, t.var(target))
            t.backward(out)
            grad = {"w1": w1, "w2": w2, "x": x}[which].grad
            return out.value[0, 0], grad

        return f

    assert finite_difference_check(loss_wrt("w1"), params.w1) <= 1e-4
    assert finite_difference_check(loss_wrt("w2"), params.w2) <= 1e-4
    assert finite_difference_check(loss_wrt("x"), feats) <= 1e-4


def test_save_load_round_trip(tmp_path):
    params = init_encoder(7, EncoderConfig(hidden_dim=4, embed_dim=2, seed=9))
    save_encoder(params, tmp_path)
    back = load_encoder(tmp_path)
    assert np.array_equal(back.w1, params.w1)
    assert np.array_equal(back.w2, params.w2)


def test_params_shape_validation():
    with pytest.raises(ValueError):
        EncoderParams(np.ones((3, 4)), np.ones((5, 2)))
