import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from pydantic import ValidationError

from rfgnn.models import BackboneConfig, BackboneKind, TrainConfig, Variant
from rfgnn.services.backbones import graph_operators, init_backbone, init_fcn, init_head
from rfgnn.services.ensemble import (
    BranchError,
    BranchModel,
    BranchSpec,
    BranchTrainingError,
    DegenerateBranchError,
    baseline_spec,
    branch_backward,
    branch_embed,
    branch_forward,
    branch_outputs,
    branch_predict,
    branch_similarity,
    branch_training_graph,
    build_branch_spec,
    ensemble_predict,
    soft_vote,
    train_baseline,
    train_branch,
    train_ensemble,
)
from rfgnn.services.graphstore import MultiRelationGraph, induced_subgraph
from rfgnn.services.checkpoint import load_ensemble, save_ensemble
from rfgnn.services.numkit import EmptySupervisionError, cross_entropy, finite_diff_check

from tests.conftest import small_train_config


def _dense_graph(n: int = 200, m: int = 10, num_edges: int = 10_000, seed: int = 0) -> MultiRelationGraph:
    rng = np.random.default_rng(seed)
    iu, iv = np.triu_indices(n, k=1)
    chosen = rng.choice(iu.size, size=num_edges, replace=False)
    edges = np.stack([iu[chosen], iv[chosen]], axis=1)
    return MultiRelationGraph(
        features=rng.standard_normal((n, m)),
        edges=(edges,),
        labels=rng.integers(0, 2, size=n),
        train=np.arange(0, 20),
        val=np.arange(20, 40),
        test=np.arange(40, n),
    )


# --- branch specs ------------------------------------------------------------------

def test_branch_spec_counts_and_order(small_synthetic):
    cfg = small_train_config(alpha=0.8, beta=0.75, gamma=0.9)
    spec = build_branch_spec(small_synthetic, cfg, 0, Variant.FULL)
    assert spec.sampled_nodes.size == 48
    assert spec.selected_features.size == 9
    assert np.all(np.diff(spec.sampled_nodes) > 0)
    assert np.all(np.diff(spec.selected_features) > 0)
    assert_array_equal(
        np.union1d(spec.selected_features, spec.remaining_features), np.arange(small_synthetic.m)
    )
    assert np.intersect1d(spec.selected_features, spec.remaining_features).size == 0
    assert spec.aligned


def test_kept_edges_lie_in_induced_subgraph(small_synthetic):
    cfg = small_train_config(alpha=0.7, gamma=0.5)
    spec = build_branch_spec(small_synthetic, cfg, 1, Variant.ES)
    sub, index_map = induced_subgraph(small_synthetic, spec.sampled_nodes)
    assert not spec.aligned
    for kept, induced in zip(spec.kept_edges, sub.edges):
        mapped = {tuple(e) for e in index_map[kept]}
        assert mapped <= {tuple(e) for e in induced}


def test_gamma_one_keeps_every_induced_edge(small_synthetic):
    cfg = small_train_config(alpha=0.6, gamma=1.0)
    spec = build_branch_spec(small_synthetic, cfg, 2, Variant.ES)
    sub, _ = induced_subgraph(small_synthetic, spec.sampled_nodes)
    assert [len(e) for e in spec.kept_edges] == [len(e) for e in sub.edges]


def test_variant_e_uses_identity_specs(small_synthetic):
    cfg = small_train_config()
    a = build_branch_spec(small_synthetic, cfg, 0, Variant.E)
    b = build_branch_spec(small_synthetic, cfg, 1, Variant.E)
    assert_array_equal(a.sampled_nodes, np.arange(small_synthetic.n))
    assert_array_equal(a.selected_features, b.selected_features)
    assert a.remaining_features.size == 0
    assert a.seed != b.seed
    assert not a.aligned


def test_branch_specs_are_reproducible(small_synthetic):
    cfg = small_train_config()
    a = build_branch_spec(small_synthetic, cfg, 3)
    b = build_branch_spec(small_synthetic, cfg, 3)
    assert_array_equal(a.sampled_nodes, b.sampled_nodes)
    assert_array_equal(a.selected_features, b.selected_features)
    for ea, eb in zip(a.kept_edges, b.kept_edges):
        assert_array_equal(ea, eb)


def test_degenerate_branch_is_rejected(example_graph):
    with pytest.raises(DegenerateBranchError):
        build_branch_spec(example_graph, small_train_config(alpha=0.01), 0)
    with pytest.raises(DegenerateBranchError):
        build_branch_spec(example_graph, small_train_config(beta=0.1), 0)


def test_sampling_statistics_over_many_specs():
    g = _dense_graph()
    cfg = small_train_config(alpha=0.8, beta=0.8, gamma=0.9, master_seed=0)
    fractions = []
    for i in range(1000):
        spec = build_branch_spec(g, cfg, i, Variant.FULL)
        assert spec.sampled_nodes.size == 160
        assert spec.selected_features.size == 8
        sub, _ = induced_subgraph(g, spec.sampled_nodes)
        fractions.append(len(spec.kept_edges[0]) / len(sub.edges[0]))
    assert 0.895 <= np.mean(fractions) <= 0.905


# --- training ----------------------------------------------------------------------

@pytest.mark.parametrize("kind", [BackboneKind.GCN, BackboneKind.SGC, BackboneKind.RGCN])
def test_full_variant_with_unit_rates_reduces_to_baseline(example_graph, kind):
    cfg = small_train_config(kind, alpha=1.0, beta=1.0, gamma=1.0, branches=1, epochs=8, master_seed=3)
    ensemble = train_ensemble(example_graph, cfg, Variant.FULL)
    baseline = train_baseline(example_graph, cfg)

    scores, classes = ensemble_predict(example_graph, ensemble)
    probs = branch_predict(example_graph, baseline_spec(example_graph, cfg), baseline)
    assert_array_equal(scores, probs)
    assert_array_equal(classes, np.argmax(probs, axis=1))
    assert ensemble.branches[0][1].history == baseline.history


def test_variant_e_single_branch_is_baseline(example_graph):
    cfg = small_train_config(branches=1, epochs=4)
    ensemble = train_ensemble(example_graph, cfg, Variant.E)
    baseline = train_baseline(example_graph, cfg)
    scores, _ = ensemble_predict(example_graph, ensemble)
    assert_array_equal(scores, branch_predict(example_graph, baseline_spec(example_graph, cfg), baseline))


def test_training_loss_decreases(small_synthetic):
    cfg = small_train_config(epochs=40, dropout=0.0, lr=0.005, alpha=1.0, beta=1.0, gamma=1.0)
    model = train_baseline(small_synthetic, cfg)
    assert len(model.history) == 40
    assert model.history[-1] < model.history[0]


def test_aligned_branch_has_fcn_only_in_full(small_synthetic):
    cfg = small_train_config(beta=0.5, branches=2, epochs=2)
    full = train_ensemble(small_synthetic, cfg, Variant.FULL)
    es = train_ensemble(small_synthetic, cfg, Variant.ES)
    for spec, model in full.branches:
        assert model.fcn is not None
        assert model.fcn.in_dim == spec.remaining_features.size
    assert all(model.fcn is None for _, model in es.branches)


def test_serial_and_parallel_training_are_bitwise_equal(small_synthetic):
    cfg = small_train_config(branches=4, epochs=4)
    serial = train_ensemble(small_synthetic, cfg, Variant.FULL, threads=1)
    parallel = train_ensemble(small_synthetic, cfg, Variant.FULL, threads=4)
    for (_, a), (_, b) in zip(serial.branches, parallel.branches):
        pa, pb = a.parameters(), b.parameters()
        assert list(pa) == list(pb)
        for name in pa:
            assert_array_equal(pa[name].value, pb[name].value)
    assert_array_equal(
        ensemble_predict(small_synthetic, serial)[0], ensemble_predict(small_synthetic, parallel)[0]
    )


def test_empty_supervision_names_the_branch(small_synthetic):
    cfg = small_train_config(epochs=1)
    non_train = np.setdiff1d(np.arange(small_synthetic.n), small_synthetic.train)[:10]
    spec = BranchSpec(
        index=5,
        seed=0,
        sampled_nodes=non_train,
        selected_features=np.arange(small_synthetic.m),
        remaining_features=np.zeros(0, dtype=np.int64),
        kept_edges=tuple(np.zeros((0, 2), dtype=np.int64) for _ in range(small_synthetic.k)),
    )
    with pytest.raises(EmptySupervisionError, match="branch 5"):
        train_branch(small_synthetic, spec, cfg)


def test_train_ensemble_annotates_failing_branch(tiny_graph):
    no_train = MultiRelationGraph(
        features=tiny_graph.features, edges=tiny_graph.edges, labels=tiny_graph.labels,
        train=np.array([], dtype=np.int64), val=tiny_graph.val, test=tiny_graph.test,
    )
    with pytest.raises(BranchTrainingError) as info:
        train_ensemble(no_train, small_train_config(branches=2, epochs=1), Variant.E)
    assert info.value.index == 0
    assert isinstance(info.value.cause, EmptySupervisionError)


def test_select_best_val_records_epoch(small_synthetic):
    cfg = small_train_config(epochs=6, select_best_val=True, branches=1)
    ensemble = train_ensemble(small_synthetic, cfg, Variant.FULL)
    model = ensemble.branches[0][1]
    assert 1 <= model.best_epoch <= 6


# --- inference ---------------------------------------------------------------------

def test_soft_vote_sums_and_breaks_ties_low():
    outputs = [np.array([[0.5, 0.5], [0.2, 0.8]]), np.array([[0.5, 0.5], [0.6, 0.4]])]
    scores, classes = soft_vote(outputs)
    assert_allclose(scores, [[1.0, 1.0], [0.8, 1.2]])
    assert_array_equal(classes, [0, 1])
    with pytest.raises(BranchError):
        soft_vote([])


def test_ensemble_scores_sum_to_branch_count(small_synthetic):
    cfg = small_train_config(branches=3, epochs=3)
    ensemble = train_ensemble(small_synthetic, cfg, Variant.FULL)
    scores, classes = ensemble_predict(small_synthetic, ensemble)
    assert scores.shape == (small_synthetic.n, 2)
    assert_allclose(scores.sum(axis=1), np.full(small_synthetic.n, 3.0), atol=1e-9)
    assert_array_equal(classes, np.argmax(scores, axis=1))


def test_branch_similarity_symmetric_unit_diagonal(small_synthetic):
    cfg = small_train_config(branches=3, epochs=3)
    ensemble = train_ensemble(small_synthetic, cfg, Variant.FULL)
    sim = branch_similarity(ensemble, small_synthetic)
    assert sim.shape == (3, 3)
    assert_array_equal(sim, sim.T)
    assert_allclose(np.diag(sim), np.ones(3), atol=1e-12)
    assert np.all(sim <= 1.0 + 1e-12)


def test_branch_embed_width_and_prediction_shape(small_synthetic):
    cfg = small_train_config(branches=1, epochs=2, beta=0.5)
    ensemble = train_ensemble(small_synthetic, cfg, Variant.FULL)
    spec, model = ensemble.branches[0]
    z = branch_embed(small_synthetic, spec, model)
    assert z.shape == (small_synthetic.n, cfg.backbone.out_dim)
    assert len(branch_outputs(small_synthetic, ensemble)) == 1


def test_branch_predict_rejects_feature_mismatch(small_synthetic, tiny_graph):
    cfg = small_train_config(branches=1, epochs=1)
    ensemble = train_ensemble(small_synthetic, cfg, Variant.FULL)
    spec, model = ensemble.branches[0]
    with pytest.raises(BranchError):
        branch_predict(tiny_graph, spec, model)


def test_branch_training_graph_uses_kept_edges(small_synthetic):
    cfg = small_train_config(alpha=0.7, gamma=0.5)
    spec = build_branch_spec(small_synthetic, cfg, 0)
    train_graph = branch_training_graph(small_synthetic, spec)
    assert train_graph.n == spec.sampled_nodes.size
    assert train_graph.num_edges() == sum(len(e) for e in spec.kept_edges)


def test_aligned_branch_gradients(small_synthetic):
    cfg = small_train_config(beta=0.5)
    spec = build_branch_spec(small_synthetic, cfg, 0, Variant.FULL)
    g = branch_training_graph(small_synthetic, spec)
    rng = np.random.default_rng(0)
    model = BranchModel(
        backbone=init_backbone(cfg.backbone, spec.selected_features.size, g.k, rng),
        head=init_head(cfg.backbone.out_dim, g.num_classes, rng),
        fcn=init_fcn(spec.remaining_features.size, cfg.backbone.hidden, cfg.backbone.out_dim, rng),
    )
    operators = graph_operators(g, BackboneKind.GCN)
    x_in = g.features[:, spec.selected_features]
    x_rest = g.features[:, spec.remaining_features]
    params = list(model.parameters().values())

    def forward():
        for p in params:
            p.zero_grad()
        record = branch_forward(model, BackboneKind.GCN, operators, x_in, x_rest)
        loss, grad_logits = cross_entropy(record.logits, g.labels, g.train)
        branch_backward(record, grad_logits)
        return loss

    assert finite_diff_check(forward, params) <= 1e-4


def test_separable_graph_is_fit_on_training_nodes():
    g = MultiRelationGraph(
        features=np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]),
        edges=(np.array([[0, 1], [2, 3]]),),
        labels=np.array([0, 0, 1, 1]),
        train=np.array([0, 2]),
        val=np.array([1]),
        test=np.array([3]),
    )
    cfg = small_train_config(alpha=1.0, beta=1.0, gamma=1.0, epochs=60, lr=0.05, dropout=0.0)
    model = train_baseline(g, cfg)
    probs = branch_predict(g, baseline_spec(g, cfg), model)
    assert_array_equal(np.argmax(probs[g.train], axis=1), g.labels[g.train])


def test_seeded_loss_curve_is_reproducible_and_decreasing(small_synthetic):
    cfg = small_train_config(epochs=10, dropout=0.0, lr=0.005, alpha=1.0, beta=1.0, gamma=1.0)
    first = train_baseline(small_synthetic, cfg).history
    second = train_baseline(small_synthetic, cfg).history
    assert first == second
    assert len(first) == 10
    assert all(b < a for a, b in zip(first, first[1:]))


def test_ensemble_scores_equal_sum_of_saved_branch_outputs(tmp_path, small_synthetic):
    cfg = small_train_config(branches=3, epochs=3, beta=0.5)
    ensemble = train_ensemble(small_synthetic, cfg, Variant.FULL)
    save_ensemble(tmp_path / "ckpt", ensemble)
    loaded = load_ensemble(tmp_path / "ckpt")

    total = np.zeros((small_synthetic.n, small_synthetic.num_classes))
    for spec, model in loaded.branches:
        total += branch_predict(small_synthetic, spec, model)
    scores, _ = ensemble_predict(small_synthetic, ensemble)
    assert_allclose(scores, total, atol=1e-12)


def test_argmax_invariant_under_positive_scaling(rng):
    outputs = [rng.dirichlet(np.ones(3), size=8) for _ in range(4)]
    _, classes = soft_vote(outputs)
    for factor in (0.5, 3.0, 1e3):
        _, scaled = soft_vote([factor * o for o in outputs])
        assert_array_equal(scaled, classes)


def test_train_config_propagates_dropout_to_backbone():
    cfg = TrainConfig(dropout=0.2)
    assert cfg.backbone.dropout == 0.2
    assert TrainConfig(dropout=0.2, backbone=BackboneConfig(dropout=0.2)).backbone.dropout == 0.2


def test_train_config_rejects_conflicting_backbone_dropout():
    with pytest.raises(ValidationError, match="conflicts with dropout"):
        TrainConfig(dropout=0.2, backbone=BackboneConfig(dropout=0.5))
