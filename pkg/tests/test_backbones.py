import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from rfgnn.models import BackboneConfig, BackboneKind
from rfgnn.services.backbones import (
    NO_DROPOUT,
    BackboneError,
    BackboneParams,
    DropoutState,
    LayerParams,
    StaleCacheError,
    fcn_backward,
    fcn_forward,
    gcn_backward,
    gcn_forward,
    graph_operators,
    head_backward,
    head_forward,
    init_backbone,
    init_fcn,
    init_head,
    rgcn_backward,
    rgcn_forward,
    sgc_backward,
    sgc_forward,
    sgc_precompute,
)
from rfgnn.services.graphstore import MultiRelationGraph, normalize_adjacency
from rfgnn.services.numkit import ParamTensor, cross_entropy, derive_rng, finite_diff_check

N, M, HIDDEN, D, C = 12, 5, 6, 4, 3


def _random_graph(seed: int, relations: int = 1) -> MultiRelationGraph:
    rng = np.random.default_rng(seed)
    edges = []
    for _ in range(relations):
        pairs = [(u, v) for u in range(N) for v in range(u + 1, N) if rng.random() < 0.3]
        edges.append(np.array(pairs, dtype=np.int64).reshape(-1, 2))
    return MultiRelationGraph(
        features=rng.standard_normal((N, M)),
        edges=tuple(edges),
        labels=rng.integers(0, C, size=N),
        train=np.arange(0, 8),
        val=np.arange(8, 10),
        test=np.arange(10, N),
        num_classes=C,
        class_names=tuple(f"c{i}" for i in range(C)),
    )


def _config(kind: BackboneKind, layers: int = 2) -> BackboneConfig:
    return BackboneConfig(kind=kind, layers=layers, hidden=HIDDEN, out_dim=D, sgc_power=2, dropout=0.0)


def _grad_error(params, head, g, embed):
    """Relative error of backbone + head + cross-entropy gradients"""
    tensors = list(params) + [head.w, head.b]

    def forward():
        for p in tensors:
            p.zero_grad()
        z, backward = embed()
        _, hc = head_forward(z, head)
        loss, grad_logits = cross_entropy(hc.logits, g.labels, g.train)
        backward(head_backward(hc, grad_logits))
        return loss

    return finite_diff_check(forward, tensors)


@pytest.mark.parametrize("layers", [1, 2])
def test_gcn_gradients(layers):
    g = _random_graph(0)
    adj = graph_operators(g, BackboneKind.GCN)[0]
    rng = derive_rng(1)
    params = init_backbone(_config(BackboneKind.GCN, layers), M, 1, rng)
    head = init_head(D, C, rng)

    def embed():
        z, cache = gcn_forward(adj, g.features, params)
        return z, lambda grad: gcn_backward(cache, grad)

    assert _grad_error(params.named().values(), head, g, embed) <= 1e-4


def test_sgc_gradients():
    g = _random_graph(2)
    adj = graph_operators(g, BackboneKind.SGC)[0]
    propagated = sgc_precompute(adj, g.features, 2)
    rng = derive_rng(3)
    params = init_backbone(_config(BackboneKind.SGC), M, 1, rng)
    head = init_head(D, C, rng)
    assert len(params.layers) == 1

    def embed():
        z, cache = sgc_forward(propagated, params)
        return z, lambda grad: sgc_backward(cache, grad)

    assert _grad_error(params.named().values(), head, g, embed) <= 1e-4


def test_rgcn_gradients_two_relations():
    g = _random_graph(4, relations=2)
    adjs = graph_operators(g, BackboneKind.RGCN)
    assert len(adjs) == 2
    rng = derive_rng(5)
    params = init_backbone(_config(BackboneKind.RGCN), M, 2, rng)
    head = init_head(D, C, rng)

    def embed():
        z, cache = rgcn_forward(adjs, g.features, params)
        return z, lambda grad: rgcn_backward(cache, grad)

    assert _grad_error(params.named().values(), head, g, embed) <= 1e-4


def test_fcn_gradients():
    g = _random_graph(6)
    rng = derive_rng(7)
    fcn = init_fcn(M, HIDDEN, D, rng)
    # nonzero biases so their gradients are exercised away from the init point
    fcn.b1.value[...] = rng.standard_normal(fcn.b1.shape) * 0.1
    fcn.b2.value[...] = rng.standard_normal(fcn.b2.shape) * 0.1
    head = init_head(D, C, rng)

    def embed():
        z, cache = fcn_forward(g.features, fcn)
        return z, lambda grad: fcn_backward(cache, grad)

    assert _grad_error(fcn.named().values(), head, g, embed) <= 1e-4


def test_head_and_cross_entropy_gradients():
    g = _random_graph(8)
    rng = derive_rng(9)
    head = init_head(M, C, rng)

    def embed():
        return g.features, lambda grad: None

    assert _grad_error([], head, g, embed) <= 1e-4


def test_gcn_input_gradient_matches_finite_differences():
    g = _random_graph(10)
    adj = graph_operators(g, BackboneKind.GCN)[0]
    rng = derive_rng(11)
    params = init_backbone(_config(BackboneKind.GCN), M, 1, rng)
    head = init_head(D, C, rng)
    x = np.array(g.features, copy=True)

    def loss_at(features):
        z, _ = gcn_forward(adj, features, params)
        _, hc = head_forward(z, head)
        return cross_entropy(hc.logits, g.labels, g.train)[0]

    z, cache = gcn_forward(adj, x, params)
    _, hc = head_forward(z, head)
    _, grad_logits = cross_entropy(hc.logits, g.labels, g.train)
    grad_x = gcn_backward(cache, head_backward(hc, grad_logits))

    eps = 1e-6
    for idx in [(0, 0), (3, 2), (11, 4)]:
        plus, minus = x.copy(), x.copy()
        plus[idx] += eps
        minus[idx] -= eps
        numeric = (loss_at(plus) - loss_at(minus)) / (2 * eps)
        assert grad_x[idx] == pytest.approx(numeric, rel=1e-4, abs=1e-8)


def test_rgcn_single_relation_without_self_weight_equals_gcn():
    g = _random_graph(12)
    adj = normalize_adjacency(g.edges[0], g.n)
    rgcn = init_backbone(_config(BackboneKind.RGCN), M, 1, derive_rng(13))
    for layer in rgcn.layers:
        layer.self_weight.value[...] = 0.0
    gcn = BackboneParams(BackboneKind.GCN, [LayerParams(layer.relations) for layer in rgcn.layers])

    z_rgcn, _ = rgcn_forward([adj], g.features, rgcn)
    z_gcn, _ = gcn_forward(adj, g.features, gcn)
    assert_array_equal(z_rgcn, z_gcn)


def test_gcn_matches_dense_reference():
    g = _random_graph(14)
    adj = graph_operators(g, BackboneKind.GCN)[0]
    params = init_backbone(_config(BackboneKind.GCN), M, 1, derive_rng(15))
    a = adj.toarray()
    w0 = params.layers[0].relations[0].value
    w1 = params.layers[1].relations[0].value
    expected = a @ np.maximum(a @ g.features @ w0, 0.0) @ w1
    z, _ = gcn_forward(adj, g.features, params)
    assert_allclose(z, expected, atol=1e-12)


def test_sgc_precompute_matches_dense_power():
    g = _random_graph(16)
    adj = graph_operators(g, BackboneKind.SGC)[0]
    a = adj.toarray()
    assert_allclose(sgc_precompute(adj, g.features, 3), a @ a @ a @ g.features, atol=1e-12)
    with pytest.raises(BackboneError):
        sgc_precompute(adj, g.features, 0)


def test_stale_cache_is_rejected():
    g = _random_graph(17)
    adj = graph_operators(g, BackboneKind.GCN)[0]
    params = init_backbone(_config(BackboneKind.GCN), M, 1, derive_rng(18))
    z, cache = gcn_forward(adj, g.features, params)
    params.layers[0].relations[0].version += 1
    with pytest.raises(StaleCacheError):
        gcn_backward(cache, np.ones_like(z))


def test_rgcn_relation_count_mismatch():
    g = _random_graph(19, relations=2)
    params = init_backbone(_config(BackboneKind.RGCN), M, 3, derive_rng(20))
    with pytest.raises(BackboneError, match="relation count"):
        rgcn_forward(graph_operators(g, BackboneKind.RGCN), g.features, params)


def test_dropout_only_in_training():
    g = _random_graph(21)
    adj = graph_operators(g, BackboneKind.GCN)[0]
    params = init_backbone(_config(BackboneKind.GCN), M, 1, derive_rng(22))
    dropout = DropoutState(0.5, derive_rng(23))

    z_eval, _ = gcn_forward(adj, g.features, params, dropout, training=False)
    z_plain, _ = gcn_forward(adj, g.features, params, NO_DROPOUT)
    z_train, _ = gcn_forward(adj, g.features, params, dropout, training=True)
    assert_array_equal(z_eval, z_plain)
    assert not np.array_equal(z_train, z_plain)


def test_head_outputs_probabilities():
    rng = derive_rng(24)
    head = init_head(D, C, rng)
    probs, _ = head_forward(rng.standard_normal((7, D)), head)
    assert probs.shape == (7, C)
    assert_allclose(probs.sum(axis=1), np.ones(7), atol=1e-12)


def test_init_backbone_dimensions():
    rng = derive_rng(25)
    gcn = init_backbone(_config(BackboneKind.GCN, layers=3), M, 1, rng)
    assert [layer.relations[0].shape for layer in gcn.layers] == [(M, HIDDEN), (HIDDEN, HIDDEN), (HIDDEN, D)]
    rgcn = init_backbone(_config(BackboneKind.RGCN), M, 2, rng)
    assert rgcn.num_relations == 2
    assert rgcn.layers[0].self_weight.shape == (M, HIDDEN)
    assert sorted(rgcn.named()) == sorted([
        "backbone.0.rel0", "backbone.0.rel1", "backbone.0.self",
        "backbone.1.rel0", "backbone.1.rel1", "backbone.1.self",
    ])


def test_rgcn_duplicated_relation_with_halved_weights_matches_single():
    g = _random_graph(26)
    adj = normalize_adjacency(g.edges[0], g.n)
    single = init_backbone(_config(BackboneKind.RGCN), M, 1, derive_rng(27))
    doubled = BackboneParams(
        BackboneKind.RGCN,
        [
            LayerParams(
                [ParamTensor(f"backbone.{li}.rel{k}", 0.5 * layer.relations[0].value) for k in range(2)],
                ParamTensor(f"backbone.{li}.self", layer.self_weight.value.copy()),
            )
            for li, layer in enumerate(single.layers)
        ],
    )

    z_single, _ = rgcn_forward([adj], g.features, single)
    z_doubled, _ = rgcn_forward([adj, adj], g.features, doubled)
    assert_allclose(z_doubled, z_single, atol=1e-12)
