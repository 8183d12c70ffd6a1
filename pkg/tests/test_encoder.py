import numpy as np
import pytest

from unigraph import autodiff as ad
from unigraph.autodiff import grad_check
from unigraph.encoder import (capsule_layer, encode, encode_batch, input_filter, input_transform, make_batch,
                              prepare_graph, prepare_graphs)
from unigraph.graph import (Graph, complete_graph, conv_filter, cycle_graph, gaussian_features, laplacian,
                            permute, random_graph, spectral_node_features)
from unigraph.kernels import kernel_matrix
from unigraph.losses import FINETUNE, PRETRAIN, LossWeights, total_loss
from unigraph.model import EncoderConfig, Model

from conftest import random_graphs, two_triangles


def identity_model(h, layers=1, moments=1, in_dim=None):
    cfg = EncoderConfig(hidden=h, layers=layers, moments=moments, mlp_depth=1, dropout_rate=0.0)
    m = Model(cfg, seed=0)
    m.add_dataset("toy", in_dim or h, 0)
    for name, p in m.params.items():
        if name.endswith(".W") and p.shape[0] == p.shape[1]:
            p.data = np.eye(p.shape[0])
        elif name.endswith(".b"):
            p.data = np.zeros_like(p.data)
    return m


def calibrate_batch_norm(m, graphs, passes=60):
    # eval mode relies on running statistics; settle them as training would
    batch = make_batch(prepare_graphs(graphs, m.cfg), range(len(graphs)))
    for _ in range(passes):
        encode_batch(m, "toy", batch, train=True, rng=0)


def single_batch(g, x, kind="normalized_laplacian"):
    return make_batch([prepare_graph(g, x, kind)], [0])


# input transformer

def test_input_transform_identity_mlp_laplacian_filter(rng):
    g = random_graph(5, 0.5, rng)
    x = rng.normal(size=(5, 3))
    m = identity_model(3)
    out = input_transform(m, "toy", single_batch(g, x, "laplacian"))
    np.testing.assert_allclose(out.data, laplacian(g) @ x, atol=1e-12)


def test_input_transform_constant_filter_is_plain_mlp(rng):
    g = random_graph(4, 0.6, rng)
    x = np.eye(4)[[0, 2, 1, 2]]
    m = Model(EncoderConfig(hidden=5), seed=3)
    m.add_dataset("toy", 4, 0)
    out = input_transform(m, "toy", single_batch(g, x, lambda lam: 1.0))
    expected = m.mlp("ds.toy.input", ad.Tensor(x), False)
    np.testing.assert_allclose(out.data, expected.data, atol=1e-12)
    np.testing.assert_allclose(input_filter(g, "identity"), np.eye(4))


def test_input_transform_permutation_equivariant(rng):
    m = Model(EncoderConfig(hidden=6), seed=1)
    m.add_dataset("toy", 3, 0)
    g = random_graph(6, 0.5, rng)
    x = rng.normal(size=(6, 3))
    perm = rng.permutation(6)
    a = input_transform(m, "toy", single_batch(g, x)).data
    b = input_transform(m, "toy", single_batch(permute(g, perm), x[np.argsort(perm)])).data
    np.testing.assert_allclose(b[perm], a, atol=1e-10)


def test_prepare_graph_rejects_row_mismatch():
    with pytest.raises(ValueError, match="rows"):
        prepare_graph(complete_graph(3), np.zeros((2, 4)))


def test_input_width_checked(rng):
    m = identity_model(3)
    with pytest.raises(ValueError, match="input features"):
        input_transform(m, "toy", single_batch(complete_graph(3), np.zeros((3, 2))))


# capsule layer

def test_capsule_identity_case(rng):
    g = Graph(4)  # no edges: g(L) = I
    x = rng.normal(size=(4, 3))
    m = identity_model(3)
    b = single_batch(g, x)
    out = capsule_layer(m, 1, ad.Tensor(x), b.conv, b.row_mask)
    np.testing.assert_allclose(out.data, x, atol=1e-12)


def test_capsule_plain_graph_convolution(rng):
    g = random_graph(5, 0.5, rng)
    x = rng.normal(size=(5, 3))
    m = identity_model(3)
    b = single_batch(g, x)
    out = capsule_layer(m, 1, ad.Tensor(x), b.conv, b.row_mask)
    np.testing.assert_allclose(out.data, conv_filter(g) @ x, atol=1e-12)


def test_capsule_single_linear_mlps_closed_form(rng):
    g = random_graph(6, 0.5, rng)
    x = rng.normal(size=(6, 4))
    m = Model(EncoderConfig(hidden=4, layers=1, moments=1, mlp_depth=1), seed=2)
    b = single_batch(g, x)
    out = capsule_layer(m, 1, ad.Tensor(x), b.conv, b.row_mask)
    p = {k: v.data for k, v in m.params.items()}
    inner = conv_filter(g) @ x @ p["enc.1.moment1.lin0.W"] + p["enc.1.moment1.lin0.b"]
    np.testing.assert_allclose(out.data, inner @ p["enc.1.outer.lin0.W"] + p["enc.1.outer.lin0.b"], atol=1e-12)


def test_capsule_two_moments_k2():
    m = identity_model(1, moments=2)
    b = single_batch(complete_graph(2), np.ones((2, 1)))
    out = capsule_layer(m, 1, ad.Tensor(np.ones((2, 1))), b.conv, b.row_mask)
    np.testing.assert_allclose(out.data, [[4.0], [4.0]])


def test_capsule_rejects_wrong_width():
    m = identity_model(3, layers=2)
    b = single_batch(complete_graph(2), np.ones((2, 3)))
    with pytest.raises(ad.ShapeError):
        capsule_layer(m, 2, ad.Tensor(np.ones((2, 3))), b.conv, b.row_mask)


# full encoder

def test_encode_sum_pooling_example():
    m = identity_model(3, layers=1)
    out = encode(m, "toy", Graph(5), x=np.ones((5, 3)), seed=0)
    np.testing.assert_allclose(out.z.data, [[5.0, 5.0, 5.0]])


def test_dense_concatenation_widths():
    cfg = EncoderConfig(hidden=8, layers=5)
    m = Model(cfg)
    for t in range(1, 6):
        assert m.params[f"enc.{t}.moment1.lin0.W"].shape[0] == 8 * t == cfg.layer_input_width(t)
        assert m.params[f"enc.{t}.outer.lin{cfg.mlp_depth - 1}.W"].shape[1] == 8


def test_z_is_column_sum_of_y(rng):
    m = Model(EncoderConfig(hidden=6, layers=3), seed=4)
    m.add_dataset("toy", 2, 0)
    graphs = [g.with_features(rng.normal(size=(g.n, 2))) for g in random_graphs(4, rng)]
    prepared = prepare_graphs(graphs, m.cfg)
    batch = make_batch(prepared, [0, 1, 2, 3])
    out = encode_batch(m, "toy", batch)
    y = out.y.data.reshape(4, batch.max_nodes, 6)
    np.testing.assert_allclose(out.z.data, y.sum(axis=1), atol=1e-8)
    assert np.all(y[batch.mask == 0] == 0)


def test_padding_does_not_change_embeddings(rng):
    m = Model(EncoderConfig(hidden=6), seed=4)
    m.add_dataset("toy", 2, 0)
    graphs = [g.with_features(rng.normal(size=(g.n, 2))) for g in random_graphs(5, rng, (2, 9))]
    prepared = prepare_graphs(graphs, m.cfg)
    together = encode_batch(m, "toy", make_batch(prepared, range(5))).z.data
    alone = np.vstack([encode_batch(m, "toy", make_batch(prepared, [i])).z.data for i in range(5)])
    np.testing.assert_allclose(together, alone, atol=1e-10)


@pytest.mark.parametrize("cfg", [EncoderConfig(), EncoderConfig(hidden=16, layers=7, moments=4),
                                 EncoderConfig(hidden=8, layers=2, moments=1, mlp_depth=3)])
def test_permutation_invariance(cfg, rng):
    m = Model(cfg, seed=11)
    m.add_dataset("toy", 3, 0)
    graphs = [g.with_features(rng.normal(size=(g.n, 3))) for g in random_graphs(20, rng, (3, 9), 0.4)]
    calibrate_batch_norm(m, graphs)
    for g in graphs:
        base = encode(m, "toy", g)
        for _ in range(5):
            perm = rng.permutation(g.n)
            other = encode(m, "toy", permute(g, perm))
            np.testing.assert_allclose(other.z.data, base.z.data, atol=1e-6, rtol=0)
            np.testing.assert_allclose(other.y.data[perm], base.y.data, atol=1e-6, rtol=0)


def test_appendix_pair_separated_by_spectral_features():
    m = Model(EncoderConfig(), seed=5)
    m.add_dataset("spec", 3, 0)
    za = encode(m, "spec", two_triangles(), x=spectral_node_features(two_triangles(), 3)).z.data
    zb = encode(m, "spec", cycle_graph(6), x=spectral_node_features(cycle_graph(6), 3)).z.data
    assert np.linalg.norm(za - zb) > 1e-3


def test_gaussian_features_for_featureless_graphs():
    cfg = EncoderConfig(random_feature_dim=5)
    graphs = [complete_graph(4), cycle_graph(5)]
    a = prepare_graphs(graphs, cfg, seed=3)
    b = prepare_graphs(graphs, cfg, seed=3)
    np.testing.assert_array_equal(a[1].filtered_x, b[1].filtered_x)
    x = gaussian_features(5, 5, 1 / np.sqrt(5), (3, 1))
    np.testing.assert_allclose(a[1].filtered_x, input_filter(graphs[1]) @ x)
    # redraws are seeded and differ from the fixed draw
    np.testing.assert_array_equal(a[1].features_for(7), b[1].features_for(7))
    assert not np.allclose(a[1].features_for(7), a[1].filtered_x)
    assert a[1].features_for(None) is a[1].filtered_x


def test_given_features_are_never_redrawn(rng):
    g = complete_graph(3).with_features(rng.normal(size=(3, 2)))
    p = prepare_graphs([g], EncoderConfig())[0]
    assert not p.random_features
    assert p.features_for(5) is p.filtered_x


# gradients through encoder and losses

def _pipeline(mode, loss_name):
    r = np.random.default_rng(0)
    cfg = EncoderConfig(hidden=4, layers=2, moments=2, mlp_depth=2, dropout_rate=0.3, encoder_dropout_rate=0.2)
    m = Model(cfg, seed=1)
    m.add_dataset("toy", 2, 2)
    graphs = [random_graph(n, 0.6, r).with_features(r.normal(size=(n, 2))) for n in (4, 5, 6)]
    labels = np.array([0, 1, 0])
    kernels = {k: kernel_matrix(graphs, k) for k in ("WL", "SP", "FGSD")}
    batch = make_batch(prepare_graphs(graphs, cfg), [0, 1, 2], labels, kernels)
    only = {"adjacency": LossWeights(lambda_K=0, lambda_class=0),
            "kernel_unsup": LossWeights(lambda_A=0, lambda_class=0, adaptive=False),
            "kernel_adaptive": LossWeights(lambda_A=0, lambda_class=0, finetune_unsup_kernel=False),
            "class": LossWeights(lambda_A=0, lambda_K=0),
            "all": LossWeights()}[loss_name]

    def f():
        out = encode_batch(m, "toy", batch, train=True, rng=17)
        return total_loss(m, "toy", batch, out, mode, only, train=True, rng=17).total

    return f, list(m.params.values())


@pytest.mark.parametrize("mode,loss_name", [(PRETRAIN, "adjacency"), (PRETRAIN, "kernel_unsup"),
                                            (FINETUNE, "kernel_adaptive"), (FINETUNE, "class"),
                                            (FINETUNE, "all")])
def test_pipeline_gradients(mode, loss_name):
    f, params = _pipeline(mode, loss_name)
    assert f().item() > 0
    assert grad_check(f, params) < 1e-4
