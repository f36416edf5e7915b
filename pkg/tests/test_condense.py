import numpy as np
import pytest

from plgc.condense import (
    CondensedGraph,
    DivergenceError,
    backbone_objective,
    condense,
    init_condensed,
    load_condensed,
    reconstruct_backbone,
    save_condensed,
    supervised_baseline_condense,
)
from plgc.encoder import EncoderConfig, encode, identity_adjacency, init_encoder
from plgc.graph import Graph, SbmConfig, generate_sbm, inject_label_noise, normalize_adjacency
from plgc.pseudo import Assignment, PrototypeBank, train_pseudo_labels


ENC = EncoderConfig(hidden_dim=16, embed_dim=8, seed=0)


def one_hot(labels, k):
    m = np.zeros((len(labels), k))
    m[np.arange(len(labels)), labels] = 1.0
    return m


class TestInitCondensed:
    def test_identity_assignment_returns_features(self):
        g = generate_sbm(SbmConfig(blocks=2, nodes_per_block=3, feature_dim=4), 0)
        q = Assignment(np.eye(g.num_nodes), hard=True)
        assert np.array_equal(init_condensed(g, q, g.num_nodes), g.features)

    def test_two_nodes_one_prototype_mean(self):
        g = Graph(2, [(0, 1)], np.array([[0.0, 2.0], [2.0, 0.0]]))
        q = Assignment(np.array([[1.0], [1.0]]), hard=True)
        assert np.array_equal(init_condensed(g, q, 1), [[1.0, 1.0]])

    def test_zero_noise_blocks_give_centers(self):
        cfg = SbmConfig(blocks=3, nodes_per_block=10, feature_noise=0.0)
        g = generate_sbm(cfg, 1)
        q = Assignment(one_hot(g.labels, 3), hard=True)
        assert np.allclose(init_condensed(g, q, 3), cfg.centers(), atol=1e-15)

    def test_empty_prototype_errors(self):
        g = generate_sbm(SbmConfig(blocks=2, nodes_per_block=3, feature_dim=4), 0)
        q = Assignment(one_hot(np.zeros(6, dtype=int), 2), hard=True)
        with pytest.raises(ValueError, match="prototype 1"):
            init_condensed(g, q, 2)


def perfect_setup(seed=3, k=4, d=6):
    """A bank that is exactly encodable: protos := encode(theta, I, X0)."""
    rng = np.random.default_rng(seed)
    params = init_encoder(d, ENC)
    x0 = rng.normal(size=(k, d))
    protos = encode(params, identity_adjacency(k), x0)
    return params, PrototypeBank(protos), x0


class TestCondense:
    def test_fixed_point_stays_put(self):
        params, bank, x0 = perfect_setup()
        cg = condense(x0, params, bank, steps=25, lr=0.1)
        assert cg.final_loss == pytest.approx(0.0, abs=1e-24)
        assert np.allclose(cg.features, x0, atol=1e-12)

    def test_sbm_loss_drops_an_order_of_magnitude(self):
        g = generate_sbm(SbmConfig(blocks=3, nodes_per_block=50), 2)
        res = train_pseudo_labels(g, 3, epochs=20, hidden_dim=16, embed_dim=8, seed=2)
        init = init_condensed(g, res.q_full, 3)
        first = condense(init, res.encoder, res.bank, steps=0, lr=0.1).final_loss
        cg = condense(init, res.encoder, res.bank, steps=300, lr=0.1)
        assert cg.final_loss <= 0.1 * first

    def test_loss_monotone_non_increasing(self):
        params, bank, x0 = perfect_setup(seed=9)
        rng = np.random.default_rng(0)
        start = x0 + rng.normal(size=x0.shape)
        cg = condense(start, params, bank, steps=60, lr=0.5)
        hist = np.array(cg.loss_history)
        assert np.all(np.diff(hist) <= 0.0)

    def test_encoder_and_bank_unchanged(self):
        params, bank, x0 = perfect_setup(seed=5)
        before = (params.w1.tobytes(), params.w2.tobytes(), bank.protos.tobytes())
        condense(x0 + 0.3, params, bank, steps=30, lr=0.2)
        after = (params.w1.tobytes(), params.w2.tobytes(), bank.protos.tobytes())
        assert before == after

    def test_joint_permutation_leaves_loss_unchanged(self):
        params, bank, x0 = perfect_setup(seed=7)
        rng = np.random.default_rng(1)
        x = x0 + rng.normal(size=x0.shape)
        perm = rng.permutation(bank.k)
        base = backbone_objective(params, [CondensedGraph(x, bank)])
        permuted = backbone_objective(
            params, [CondensedGraph(x[perm], PrototypeBank(bank.protos[perm]))]
        )
        assert permuted == pytest.approx(base, abs=1e-12)

    def test_embed_width_mismatch(self):
        params = init_encoder(6, ENC)
        bank = PrototypeBank(np.eye(3, 5))
        with pytest.raises(ValueError):
            condense(np.zeros((3, 6)), params, bank, steps=1, lr=0.1)

    def test_divergence_raises_with_advice(self):
        from plgc.condense import _descend
        from plgc.tensor import ContractViolation

        # a landscape where every move explodes: backtracking exhausts its
        # halving budget and must surface the divergence
        x0 = np.zeros((1, 1))

        def loss_and_grad(xs):
            if xs[0][0, 0] != 0.0:
                raise ContractViolation("non-finite")
            return 1.0, [np.ones((1, 1))]

        with pytest.raises(DivergenceError, match="lower lr"):
            _descend([x0], loss_and_grad, steps=1, lr=1.0)


class TestReconstructBackbone:
    def test_reaches_small_loss_on_encodable_prototypes(self):
        params, bank, x0 = perfect_setup(seed=11)
        cg = condense(x0, params, bank, steps=50, lr=0.1)
        assert cg.final_loss <= 1e-4
        theta = reconstruct_backbone([cg], ENC, epochs=400, lr=0.5, seed=99)
        assert backbone_objective(theta, [cg]) <= 1e-3

    def test_duplicated_sources_keep_iterates(self):
        params, bank, x0 = perfect_setup(seed=13)
        cg = condense(x0 + 0.2, params, bank, steps=40, lr=0.1)
        one = reconstruct_backbone([cg], ENC, epochs=120, lr=0.3, seed=5)
        three = reconstruct_backbone([cg, cg, cg], ENC, epochs=120, lr=0.3, seed=5)
        assert np.max(np.abs(one.w1 - three.w1)) <= 1e-9
        assert np.max(np.abs(one.w2 - three.w2)) <= 1e-9

    def test_zero_epochs_returns_seeded_init(self):
        params, bank, x0 = perfect_setup(seed=17)
        cg = condense(x0, params, bank, steps=5, lr=0.1)
        theta = reconstruct_backbone([cg], ENC, epochs=0, lr=0.3, seed=21)
        ref = init_encoder(x0.shape[1], EncoderConfig(ENC.hidden_dim, ENC.embed_dim, 21))
        assert np.array_equal(theta.w1, ref.w1)
        assert np.array_equal(theta.w2, ref.w2)

    def test_objective_never_above_init(self):
        for seed in range(3):
            params, bank, x0 = perfect_setup(seed=seed)
            cg = condense(x0 + 0.5, params, bank, steps=30, lr=0.1)
            init_obj = backbone_objective(
                init_encoder(x0.shape[1], EncoderConfig(ENC.hidden_dim, ENC.embed_dim, seed)),
                [cg],
            )
            theta = reconstruct_backbone([cg], ENC, epochs=50, lr=0.3, seed=seed)
            assert backbone_objective(theta, [cg]) <= init_obj

    def test_dimension_mismatch_across_sources(self):
        params, bank, x0 = perfect_setup(seed=19)
        cg = condense(x0, params, bank, steps=1, lr=0.1)
        other = CondensedGraph(np.zeros((2, 9)), PrototypeBank(np.eye(2, 8)))
        with pytest.raises(ValueError):
            reconstruct_backbone([cg, other], ENC, epochs=1, lr=0.1, seed=0)


class TestSupervisedBaseline:
    def test_clean_zero_noise_matches_class_means(self):
        # p_out = 0 keeps per-class embeddings identical, so the class means
        # stay unit-norm and the synthetic rows can match them exactly
        cfg = SbmConfig(blocks=3, nodes_per_block=20, feature_noise=0.0, p_out=0.0)
        g = generate_sbm(cfg, 4)
        params = init_encoder(g.feature_dim, ENC)
        out = supervised_baseline_condense(g, g.labels, params, per_class=1, steps=100, lr=0.2)
        assert out.final_loss <= 1e-3
        assert out.labels.tolist() == [0, 1, 2]

    def test_fully_shuffled_labels_collapse_class_means(self):
        cfg = SbmConfig(blocks=3, nodes_per_block=40)
        for seed in range(3):
            g = generate_sbm(cfg, seed)
            params = init_encoder(g.feature_dim, ENC)
            z = encode(params, normalize_adjacency(g), g.features)

            def pairwise_mean_distance(labels):
                means = np.stack([z[labels == c].mean(axis=0) for c in range(3)])
                dists = [
                    np.linalg.norm(means[i] - means[j])
                    for i in range(3)
                    for j in range(i + 1, 3)
                ]
                return np.mean(dists)

            noisy = inject_label_noise(g.labels, 1.0, 3, seed + 10)
            assert pairwise_mean_distance(noisy) < pairwise_mean_distance(g.labels)

    def test_single_class_single_row(self):
        cfg = SbmConfig(blocks=3, nodes_per_block=10, feature_noise=0.0)
        g = generate_sbm(cfg, 5)
        flat = Graph(g.num_nodes, g.edges, g.features, labels=np.zeros(g.num_nodes, dtype=np.int64), num_classes=1)
        params = init_encoder(g.feature_dim, ENC)
        out = supervised_baseline_condense(flat, flat.labels, params, per_class=1, steps=200, lr=0.2)
        assert out.features.shape == (1, g.feature_dim)

    def test_class_without_nodes_errors(self):
        g = generate_sbm(SbmConfig(blocks=2, nodes_per_block=5, feature_dim=4), 6)
        labels = np.zeros(g.num_nodes, dtype=np.int64)  # class 1 vanished
        params = init_encoder(g.feature_dim, ENC)
        with pytest.raises(ValueError, match="class 1"):
            supervised_baseline_condense(g, labels, params, per_class=1, steps=1, lr=0.1)


class TestPersistence:
    def test_round_trip(self, tmp_path):
        params, bank, x0 = perfect_setup(seed=23)
        cg = condense(x0, params, bank, steps=10, lr=0.1, source_id=2)
        save_condensed(cg, tmp_path / "c")
        back = load_condensed(tmp_path / "c")
        assert np.array_equal(back.features, cg.features)
        assert np.array_equal(back.bank.protos, cg.bank.protos)
        assert back.source_id == 2
        assert back.final_loss == cg.final_loss
