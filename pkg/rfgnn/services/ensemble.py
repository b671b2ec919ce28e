"""
Random-forest style ensembles of GNN branches.

Each branch trains on a randomized subgraph (node sampling, feature
selection, edge dropping). With aligning on, the backbone embedding is
multiplied elementwise by an FCN embedding of the unselected features
before the softmax head. Branch probabilities are summed (soft vote).
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from rfgnn.models import BackboneKind, TrainConfig, Variant
from rfgnn.services.backbones import (
    NO_DROPOUT,
    BackboneError,
    BackboneParams,
    DropoutState,
    FCNCache,
    FCNParams,
    HeadCache,
    HeadParams,
    StackCache,
    backbone_backward,
    backbone_forward,
    fcn_backward,
    fcn_forward,
    graph_operators,
    head_backward,
    head_forward,
    init_backbone,
    init_fcn,
    init_head,
    prepare_inputs,
)
from rfgnn.services.graphstore import GraphError, MultiRelationGraph, induced_subgraph
from rfgnn.services.numkit import (
    DROPOUT,
    INIT,
    SAMPLING,
    AdamW,
    EmptySupervisionError,
    NumkitError,
    ParamTensor,
    cross_entropy,
    derive_rng,
    derive_seed,
)

logger = logging.getLogger(__name__)


class BranchError(Exception):
    """Custom exception for ensemble branch errors"""
    pass


class DegenerateBranchError(BranchError):
    pass


class BranchTrainingError(BranchError):
    """A branch failed to train; carries the branch index"""

    def __init__(self, index: int, cause: Exception):
        self.index = index
        self.cause = cause
        super().__init__(f"branch {index}: {cause}")


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


@dataclass
class BranchSpec:
    """
    Randomization record of one branch, in original-graph indices.

    kept_edges holds, per relation, the induced-subgraph edges that survived
    edge dropping. seed keys the branch's sampling/init/dropout streams.
    """
    index: int
    seed: int
    sampled_nodes: np.ndarray
    selected_features: np.ndarray
    remaining_features: np.ndarray
    kept_edges: Tuple[np.ndarray, ...]
    aligned: bool = False


@dataclass
class BranchModel:
    backbone: BackboneParams
    head: HeadParams
    fcn: Optional[FCNParams] = None
    history: List[float] = field(default_factory=list)
    best_epoch: Optional[int] = None

    def parameters(self) -> Dict[str, ParamTensor]:
        params = dict(self.backbone.named())
        if self.fcn is not None:
            params.update(self.fcn.named())
        params.update(self.head.named())
        return params


@dataclass
class EnsembleModel:
    branches: List[Tuple[BranchSpec, BranchModel]]
    config: TrainConfig
    variant: Variant
    num_classes: int
    num_nodes: int = 0
    num_features: int = 0
    num_relations: int = 1

    @property
    def size(self) -> int:
        return len(self.branches)


def _identity_spec(g: MultiRelationGraph, index: int, seed: int) -> BranchSpec:
    return BranchSpec(
        index=index,
        seed=seed,
        sampled_nodes=np.arange(g.n, dtype=np.int64),
        selected_features=np.arange(g.m, dtype=np.int64),
        remaining_features=np.zeros(0, dtype=np.int64),
        kept_edges=tuple(np.array(e, copy=True) for e in g.edges),
        aligned=False,
    )


def build_branch_spec(
    g: MultiRelationGraph,
    cfg: TrainConfig,
    branch_index: int,
    variant: Variant = Variant.FULL,
) -> BranchSpec:
    """
    Draw the subgraph of one branch from its own stream.

    round(alpha * N) nodes and round(beta * M) feature columns are sampled
    uniformly without replacement; each induced edge is kept with
    probability gamma. Variant E returns the identity spec.

    Raises:
        DegenerateBranchError: If no node or no feature would be kept
    """
    seed = derive_seed(cfg.master_seed, branch_index)
    if variant == Variant.E:
        return _identity_spec(g, branch_index, seed)

    n_nodes = round_half_up(cfg.alpha * g.n)
    n_features = round_half_up(cfg.beta * g.m)
    if n_nodes == 0 or n_features == 0:
        raise DegenerateBranchError(
            f"degenerate branch {branch_index}: alpha={cfg.alpha} keeps {n_nodes} of {g.n} nodes, "
            f"beta={cfg.beta} keeps {n_features} of {g.m} features"
        )

    rng = derive_rng(seed, SAMPLING)
    nodes = np.sort(rng.choice(g.n, size=n_nodes, replace=False))
    selected = np.sort(rng.choice(g.m, size=n_features, replace=False))
    remaining = np.setdiff1d(np.arange(g.m, dtype=np.int64), selected)

    sub, _ = induced_subgraph(g, nodes)
    kept = []
    for e in sub.edges:
        keep = rng.random(len(e)) < cfg.gamma
        kept.append(nodes[e[keep]].reshape(-1, 2))

    return BranchSpec(
        index=branch_index,
        seed=seed,
        sampled_nodes=nodes.astype(np.int64),
        selected_features=selected.astype(np.int64),
        remaining_features=remaining,
        kept_edges=tuple(kept),
        aligned=variant == Variant.FULL,
    )


def baseline_spec(g: MultiRelationGraph, cfg: TrainConfig) -> BranchSpec:
    """Identity spec on branch 0's streams: the standalone backbone"""
    return _identity_spec(g, 0, derive_seed(cfg.master_seed, 0))


def branch_training_graph(g: MultiRelationGraph, spec: BranchSpec) -> MultiRelationGraph:
    """Induced subgraph on the sampled nodes carrying only the kept edges"""
    sub, index_map = induced_subgraph(g, spec.sampled_nodes)
    if len(spec.kept_edges) != g.k:
        raise BranchError(f"spec has {len(spec.kept_edges)} relations, graph has {g.k}")
    kept = []
    for e in spec.kept_edges:
        mapped = index_map[e]
        if mapped.size and mapped.min() < 0:
            raise BranchError(f"branch {spec.index}: kept edge outside the sampled nodes")
        kept.append(mapped)
    return sub.with_edges(kept)


# --- branch forward/backward ---------------------------------------------------

@dataclass
class BranchPass:
    """Everything one branch forward pass produced"""
    probs: np.ndarray
    z: np.ndarray
    embedding: np.ndarray
    fcn_out: Optional[np.ndarray]
    backbone_cache: StackCache
    fcn_cache: Optional[FCNCache]
    head_cache: HeadCache

    @property
    def logits(self) -> np.ndarray:
        return self.head_cache.logits


def branch_forward(
    model: BranchModel,
    kind: BackboneKind,
    operators: List[sp.csr_matrix],
    x_in: np.ndarray,
    x_rest: np.ndarray,
    dropout: DropoutState = NO_DROPOUT,
    training: bool = False,
) -> BranchPass:
    """Z = G(A, X_sel) * F(X_rest) when the branch has an FCN, else Z = G(A, X_sel)"""
    embedding, backbone_cache = backbone_forward(kind, operators, x_in, model.backbone, dropout, training)
    fcn_out = fcn_cache = None
    z = embedding
    if model.fcn is not None:
        fcn_out, fcn_cache = fcn_forward(x_rest, model.fcn, dropout, training)
        z = embedding * fcn_out
    probs, head_cache = head_forward(z, model.head)
    return BranchPass(probs, z, embedding, fcn_out, backbone_cache, fcn_cache, head_cache)


def branch_backward(record: BranchPass, grad_logits: np.ndarray):
    grad_z = head_backward(record.head_cache, grad_logits)
    if record.fcn_cache is not None:
        fcn_backward(record.fcn_cache, grad_z * record.embedding)
        grad_z = grad_z * record.fcn_out
    backbone_backward(record.backbone_cache, grad_z)


@dataclass
class _GraphInputs:
    operators: List[sp.csr_matrix]
    x_in: np.ndarray
    x_rest: np.ndarray


def _graph_inputs(g: MultiRelationGraph, spec: BranchSpec, cfg: TrainConfig) -> _GraphInputs:
    kind = cfg.backbone.kind
    operators = graph_operators(g, kind)
    x_sel = g.features[:, spec.selected_features]
    x_rest = g.features[:, spec.remaining_features]
    return _GraphInputs(operators, prepare_inputs(kind, operators, x_sel, cfg.backbone.sgc_power), x_rest)


def _snapshot(model: BranchModel) -> Dict[str, np.ndarray]:
    return {name: p.value.copy() for name, p in model.parameters().items()}


def _restore(model: BranchModel, snapshot: Dict[str, np.ndarray]):
    for name, p in model.parameters().items():
        p.value[...] = snapshot[name]
        p.version += 1


def _fit(
    train_graph: MultiRelationGraph,
    spec: BranchSpec,
    cfg: TrainConfig,
    eval_graph: Optional[MultiRelationGraph] = None,
) -> BranchModel:
    kind = cfg.backbone.kind
    train_idx = train_graph.train
    if train_idx.size == 0:
        raise EmptySupervisionError(
            f"empty supervision set: no training node survived node sampling in branch {spec.index}; "
            f"use a larger alpha (currently {cfg.alpha})"
        )

    inputs = _graph_inputs(train_graph, spec, cfg)
    init_rng = derive_rng(spec.seed, INIT)
    model = BranchModel(
        backbone=init_backbone(cfg.backbone, spec.selected_features.size, train_graph.k, init_rng),
        head=init_head(cfg.backbone.out_dim, train_graph.num_classes, init_rng),
    )
    if spec.aligned and spec.remaining_features.size:
        model.fcn = init_fcn(spec.remaining_features.size, cfg.backbone.hidden, cfg.backbone.out_dim, init_rng)

    optimizer = AdamW(
        model.parameters(), cfg.lr,
        beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps, weight_decay=cfg.weight_decay,
    )
    dropout = DropoutState(cfg.dropout, derive_rng(spec.seed, DROPOUT))

    select = cfg.select_best_val and eval_graph is not None and eval_graph.val.size > 0
    eval_inputs = _graph_inputs(eval_graph, spec, cfg) if select else None
    best_acc, best = -1.0, None

    for epoch in range(cfg.epochs):
        optimizer.zero_grad()
        record = branch_forward(model, kind, inputs.operators, inputs.x_in, inputs.x_rest, dropout, training=True)
        loss, grad_logits = cross_entropy(record.logits, train_graph.labels, train_idx)
        branch_backward(record, grad_logits)
        optimizer.step()
        model.history.append(loss)
        logger.debug("branch=%d epoch=%d loss=%.6f", spec.index, epoch + 1, loss)

        if select:
            probs = branch_forward(model, kind, eval_inputs.operators, eval_inputs.x_in, eval_inputs.x_rest).probs
            val = eval_graph.val
            acc = float(np.mean(np.argmax(probs[val], axis=1) == eval_graph.labels[val]))
            if acc > best_acc:
                best_acc, best = acc, _snapshot(model)
                model.best_epoch = epoch + 1

    if best is not None:
        _restore(model, best)
    return model


def train_branch(g: MultiRelationGraph, spec: BranchSpec, cfg: TrainConfig) -> BranchModel:
    """
    Train one branch on its subgraph.

    Loss is the mean cross-entropy over training-mask nodes that survived
    node sampling; the backbone, FCN and head take one joint AdamW step per
    epoch.
    """
    train_graph = branch_training_graph(g, spec)
    logger.info(
        "Training branch=%d nodes=%d features=%d/%d edges=%d aligned=%s",
        spec.index, train_graph.n, spec.selected_features.size, g.m,
        train_graph.num_edges(), model_is_aligned(spec),
    )
    model = _fit(train_graph, spec, cfg, eval_graph=g)
    logger.info("Finished branch=%d final_loss=%.6f", spec.index, model.history[-1])
    return model


def model_is_aligned(spec: BranchSpec) -> bool:
    return spec.aligned and spec.remaining_features.size > 0


def train_baseline(g: MultiRelationGraph, cfg: TrainConfig) -> BranchModel:
    """Standalone backbone: full graph, all features, no aligning"""
    spec = baseline_spec(g, cfg)
    logger.info("Training baseline backbone=%s seed=%d", cfg.backbone.kind.value, cfg.master_seed)
    return _fit(g, spec, cfg, eval_graph=g)


def _check_spec_fits(g: MultiRelationGraph, spec: BranchSpec, model: BranchModel):
    n_sel, n_rest = spec.selected_features.size, spec.remaining_features.size
    if n_sel + n_rest != g.m:
        raise BranchError(f"branch {spec.index}: spec covers {n_sel + n_rest} features, graph has {g.m}")
    if model.backbone.in_dim != n_sel:
        raise BranchError(f"branch {spec.index}: backbone takes {model.backbone.in_dim} features, spec selects {n_sel}")
    if model.fcn is not None and model.fcn.in_dim != n_rest:
        raise BranchError(f"branch {spec.index}: FCN takes {model.fcn.in_dim} features, spec leaves {n_rest}")


def _full_pass(
    g: MultiRelationGraph,
    spec: BranchSpec,
    model: BranchModel,
    operators: Optional[List[sp.csr_matrix]] = None,
) -> BranchPass:
    _check_spec_fits(g, spec, model)
    kind = model.backbone.kind
    if operators is None:
        operators = graph_operators(g, kind)
    x_sel = g.features[:, spec.selected_features]
    x_rest = g.features[:, spec.remaining_features]
    x_in = prepare_inputs(kind, operators, x_sel, model.backbone.sgc_power)
    return branch_forward(model, kind, operators, x_in, x_rest)


def branch_predict(
    g: MultiRelationGraph,
    spec: BranchSpec,
    model: BranchModel,
    operators: Optional[List[sp.csr_matrix]] = None,
) -> np.ndarray:
    """Full-graph inference (all nodes, all edges, no dropout): N x C probabilities"""
    return _full_pass(g, spec, model, operators).probs


def branch_embed(
    g: MultiRelationGraph,
    spec: BranchSpec,
    model: BranchModel,
    operators: Optional[List[sp.csr_matrix]] = None,
) -> np.ndarray:
    """Full-graph aligned embeddings Z_i (N x d)"""
    return _full_pass(g, spec, model, operators).z


def soft_vote(outputs: Sequence[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """Sum branch probability rows; ties go to the lower class index"""
    if len(outputs) == 0:
        raise BranchError("empty ensemble")
    scores = np.array(outputs[0], dtype=np.float64, copy=True)
    for out in outputs[1:]:
        scores += out
    return scores, np.argmax(scores, axis=1)


def _operator_cache(g: MultiRelationGraph, ensemble: EnsembleModel) -> List[sp.csr_matrix]:
    return graph_operators(g, ensemble.config.backbone.kind)


def branch_outputs(g: MultiRelationGraph, ensemble: EnsembleModel) -> List[np.ndarray]:
    operators = _operator_cache(g, ensemble)
    return [branch_predict(g, spec, model, operators) for spec, model in ensemble.branches]


def ensemble_predict(
    g: MultiRelationGraph,
    ensemble: EnsembleModel,
    outputs: Optional[List[np.ndarray]] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    if ensemble.size == 0:
        raise BranchError("empty ensemble")
    if outputs is None:
        outputs = branch_outputs(g, ensemble)
    return soft_vote(outputs)


def branch_similarity(
    ensemble: EnsembleModel,
    g: MultiRelationGraph,
    outputs: Optional[List[np.ndarray]] = None,
) -> np.ndarray:
    """S x S mean (over nodes) cosine similarity between branch outputs"""
    if outputs is None:
        outputs = branch_outputs(g, ensemble)
    s = len(outputs)
    norms = [np.linalg.norm(o, axis=1) for o in outputs]
    sim = np.ones((s, s), dtype=np.float64)
    for i in range(s):
        for j in range(i, s):
            cos = np.sum(outputs[i] * outputs[j], axis=1) / (norms[i] * norms[j])
            sim[i, j] = sim[j, i] = float(np.mean(cos))
    return sim


def train_ensemble(
    g: MultiRelationGraph,
    cfg: TrainConfig,
    variant: Variant,
    threads: int = 1,
) -> EnsembleModel:
    """
    Build S specs and train S branches.

    E: identity specs differing only in seeds. ES: randomized specs without
    aligning. FULL: randomized specs with aligning. Branches may train on a
    thread pool; every branch owns its streams, so the result does not depend
    on scheduling.

    Raises:
        BranchTrainingError: annotated with the failing branch index
    """
    specs = []
    for i in range(cfg.branches):
        try:
            specs.append(build_branch_spec(g, cfg, i, variant))
        except (BranchError, GraphError) as e:
            raise BranchTrainingError(i, e) from e

    def run(i: int) -> BranchModel:
        try:
            return train_branch(g, specs[i], cfg)
        except (BranchError, BackboneError, GraphError, NumkitError) as e:
            raise BranchTrainingError(i, e) from e

    logger.info(
        "Training ensemble variant=%s S=%d backbone=%s seed=%d threads=%d",
        variant.value, cfg.branches, cfg.backbone.kind.value, cfg.master_seed, threads,
    )
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            models = list(pool.map(run, range(cfg.branches)))
    else:
        models = [run(i) for i in range(cfg.branches)]

    return EnsembleModel(
        branches=list(zip(specs, models)),
        config=cfg,
        variant=variant,
        num_classes=g.num_classes,
        num_nodes=g.n,
        num_features=g.m,
        num_relations=g.k,
    )
