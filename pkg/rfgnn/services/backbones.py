"""
Base classifier networks with explicit forward/backward passes.

GCN, SGC and RGCN share one layer stack: each layer computes

    H' = act( sum_k A_k (H W_k) + H W_self )

with one relation and no self weight for GCN, K relations plus a self weight
for RGCN, and a single identity-propagation layer on precomputed A^k X for
SGC. No activation after the last layer. The aligning FCN and the softmax
head live here too.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from rfgnn.models import BackboneConfig, BackboneKind
from rfgnn.services.graphstore import MultiRelationGraph, merged_edges, normalize_adjacency
from rfgnn.services.numkit import (
    DimensionError,
    ParamTensor,
    dropout_mask,
    glorot_uniform,
    matmul,
    relu_backward,
    relu_forward,
    softmax_rows,
    spmm,
    zeros_param,
)


class BackboneError(Exception):
    """Custom exception for backbone errors"""
    pass


class StaleCacheError(BackboneError):
    pass


@dataclass
class DropoutState:
    """Dropout rate plus the generator its masks are drawn from"""
    rate: float
    rng: Optional[np.random.Generator] = None

    def active(self, training: bool) -> bool:
        return training and self.rate > 0.0 and self.rng is not None


NO_DROPOUT = DropoutState(0.0)


@dataclass
class LayerParams:
    relations: List[ParamTensor]
    self_weight: Optional[ParamTensor] = None

    def tensors(self) -> List[ParamTensor]:
        out = list(self.relations)
        if self.self_weight is not None:
            out.append(self.self_weight)
        return out


@dataclass
class BackboneParams:
    kind: BackboneKind
    layers: List[LayerParams]
    sgc_power: int = 1

    @property
    def in_dim(self) -> int:
        return self.layers[0].relations[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].relations[0].shape[1]

    @property
    def num_relations(self) -> int:
        return len(self.layers[0].relations)

    def named(self) -> Dict[str, ParamTensor]:
        return {p.name: p for layer in self.layers for p in layer.tensors()}


@dataclass
class FCNParams:
    """Two affine maps with a rectifier between them"""
    w1: ParamTensor
    b1: ParamTensor
    w2: ParamTensor
    b2: ParamTensor

    @property
    def in_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[1]

    def named(self) -> Dict[str, ParamTensor]:
        return {p.name: p for p in (self.w1, self.b1, self.w2, self.b2)}


@dataclass
class HeadParams:
    w: ParamTensor
    b: ParamTensor

    @property
    def num_classes(self) -> int:
        return self.w.shape[1]

    def named(self) -> Dict[str, ParamTensor]:
        return {self.w.name: self.w, self.b.name: self.b}


def init_backbone(
    cfg: BackboneConfig,
    in_dim: int,
    num_relations: int,
    rng: np.random.Generator,
) -> BackboneParams:
    """
    Glorot-initialized backbone; dims chain in_dim -> hidden -> ... -> out_dim.

    SGC always has a single linear layer. GCN layers are bias-free.
    """
    if in_dim < 1:
        raise BackboneError(f"backbone input dimension must be >= 1, got {in_dim}")
    n_layers = 1 if cfg.kind == BackboneKind.SGC else cfg.layers
    dims = [in_dim] + [cfg.hidden] * (n_layers - 1) + [cfg.out_dim]
    relations = num_relations if cfg.kind == BackboneKind.RGCN else 1

    layers = []
    for li in range(n_layers):
        fan_in, fan_out = dims[li], dims[li + 1]
        rel = [glorot_uniform(fan_in, fan_out, rng, f"backbone.{li}.rel{k}") for k in range(relations)]
        self_weight = None
        if cfg.kind == BackboneKind.RGCN:
            self_weight = glorot_uniform(fan_in, fan_out, rng, f"backbone.{li}.self")
        layers.append(LayerParams(rel, self_weight))
    return BackboneParams(cfg.kind, layers, sgc_power=cfg.sgc_power)


def init_fcn(in_dim: int, hidden: int, out_dim: int, rng: np.random.Generator) -> FCNParams:
    return FCNParams(
        w1=glorot_uniform(in_dim, hidden, rng, "fcn.w1"),
        b1=zeros_param((1, hidden), "fcn.b1"),
        w2=glorot_uniform(hidden, out_dim, rng, "fcn.w2"),
        b2=zeros_param((1, out_dim), "fcn.b2"),
    )


def init_head(d: int, num_classes: int, rng: np.random.Generator) -> HeadParams:
    return HeadParams(
        w=glorot_uniform(d, num_classes, rng, "head.w"),
        b=zeros_param((1, num_classes), "head.b"),
    )


def graph_operators(g: MultiRelationGraph, kind: BackboneKind) -> List[sp.csr_matrix]:
    """Normalized adjacency list: merged relations for GCN/SGC, one per relation for RGCN"""
    if kind == BackboneKind.RGCN:
        return [normalize_adjacency(e, g.n) for e in g.edges]
    return [normalize_adjacency(merged_edges(g), g.n)]


# --- shared layer stack -----------------------------------------------------

@dataclass
class _LayerRecord:
    h_in: np.ndarray
    drop: Optional[np.ndarray]
    relu: Optional[np.ndarray]


@dataclass
class StackCache:
    adjs: List[Optional[sp.csr_matrix]]
    params: BackboneParams
    records: List[_LayerRecord]
    versions: Tuple[int, ...] = field(default_factory=tuple)


def _versions(tensors: Sequence[ParamTensor]) -> Tuple[int, ...]:
    return tuple(p.version for p in tensors)


def _all_tensors(params: BackboneParams) -> List[ParamTensor]:
    return [p for layer in params.layers for p in layer.tensors()]


def _stack_forward(
    adjs: List[Optional[sp.csr_matrix]],
    x: np.ndarray,
    params: BackboneParams,
    dropout: DropoutState,
    training: bool,
) -> Tuple[np.ndarray, StackCache]:
    if x.shape[1] != params.in_dim:
        raise DimensionError(f"backbone expects {params.in_dim} input features, got {x.shape[1]}")
    for adj in adjs:
        if adj is not None and adj.shape[0] != x.shape[0]:
            raise DimensionError(f"adjacency {adj.shape} does not match {x.shape[0]} nodes")

    h = x
    records = []
    last = len(params.layers) - 1
    for li, layer in enumerate(params.layers):
        drop = None
        if dropout.active(training):
            drop = dropout_mask(h.shape, dropout.rate, dropout.rng)
            h_in = h * drop
        else:
            h_in = h

        pre = None
        for adj, w in zip(adjs, layer.relations):
            term = matmul(h_in, w.value)
            if adj is not None:
                term = spmm(adj, term)
            pre = term if pre is None else pre + term
        if layer.self_weight is not None:
            pre = pre + matmul(h_in, layer.self_weight.value)

        if li == last:
            h, relu = pre, None
        else:
            h, relu = relu_forward(pre)
        records.append(_LayerRecord(h_in, drop, relu))

    cache = StackCache(adjs, params, records, _versions(_all_tensors(params)))
    return h, cache


def _stack_backward(cache: StackCache, grad: np.ndarray) -> np.ndarray:
    if _versions(_all_tensors(cache.params)) != cache.versions:
        raise StaleCacheError("backbone parameters changed since the forward pass")

    g = grad
    for layer, rec in zip(reversed(cache.params.layers), reversed(cache.records)):
        if rec.relu is not None:
            g = relu_backward(rec.relu, g)
        g_in = np.zeros_like(rec.h_in)
        for adj, w in zip(cache.adjs, layer.relations):
            agg = g if adj is None else spmm(adj.T, g)
            w.grad += rec.h_in.T @ agg
            g_in += agg @ w.value.T
        if layer.self_weight is not None:
            layer.self_weight.grad += rec.h_in.T @ g
            g_in += g @ layer.self_weight.value.T
        if rec.drop is not None:
            g_in = g_in * rec.drop
        g = g_in
    return g


# --- backbones ---------------------------------------------------------------

def gcn_forward(
    adj: sp.csr_matrix,
    x: np.ndarray,
    params: BackboneParams,
    dropout: DropoutState = NO_DROPOUT,
    training: bool = False,
) -> Tuple[np.ndarray, StackCache]:
    if params.num_relations != 1 or params.layers[0].self_weight is not None:
        raise BackboneError("gcn_forward needs single-relation parameters without self weights")
    return _stack_forward([adj], x, params, dropout, training)


def gcn_backward(cache: StackCache, grad_embedding: np.ndarray) -> np.ndarray:
    """Accumulate parameter gradients; returns the gradient w.r.t. the input features"""
    return _stack_backward(cache, grad_embedding)


def sgc_precompute(adj: sp.csr_matrix, x: np.ndarray, k: int) -> np.ndarray:
    """A^k X by k successive sparse products"""
    if k < 1:
        raise BackboneError(f"SGC power must be >= 1, got {k}")
    out = x
    for _ in range(k):
        out = spmm(adj, out)
    return out


def sgc_forward(
    propagated: np.ndarray,
    params: BackboneParams,
    dropout: DropoutState = NO_DROPOUT,
    training: bool = False,
) -> Tuple[np.ndarray, StackCache]:
    if len(params.layers) != 1:
        raise BackboneError("SGC parameters hold exactly one linear layer")
    return _stack_forward([None], propagated, params, dropout, training)


def sgc_backward(cache: StackCache, grad_embedding: np.ndarray) -> np.ndarray:
    return _stack_backward(cache, grad_embedding)


def rgcn_forward(
    adjs: Sequence[sp.csr_matrix],
    x: np.ndarray,
    params: BackboneParams,
    dropout: DropoutState = NO_DROPOUT,
    training: bool = False,
) -> Tuple[np.ndarray, StackCache]:
    adjs = list(adjs)
    if len(adjs) < 1:
        raise BackboneError("rgcn_forward needs at least one relation")
    if len(adjs) != params.num_relations:
        raise BackboneError(
            f"relation count mismatch: {len(adjs)} adjacencies, parameters for {params.num_relations}"
        )
    if len({a.shape for a in adjs}) != 1:
        raise BackboneError("all relation adjacencies must have the same node count")
    return _stack_forward(adjs, x, params, dropout, training)


def rgcn_backward(cache: StackCache, grad_embedding: np.ndarray) -> np.ndarray:
    return _stack_backward(cache, grad_embedding)


def prepare_inputs(
    kind: BackboneKind,
    operators: List[sp.csr_matrix],
    x: np.ndarray,
    sgc_power: int,
) -> np.ndarray:
    """Per-graph backbone input: A^k X for SGC, X otherwise"""
    if kind == BackboneKind.SGC:
        return sgc_precompute(operators[0], x, sgc_power)
    return x


def backbone_forward(
    kind: BackboneKind,
    operators: List[sp.csr_matrix],
    x_in: np.ndarray,
    params: BackboneParams,
    dropout: DropoutState = NO_DROPOUT,
    training: bool = False,
) -> Tuple[np.ndarray, StackCache]:
    if kind == BackboneKind.SGC:
        return sgc_forward(x_in, params, dropout, training)
    if kind == BackboneKind.RGCN:
        return rgcn_forward(operators, x_in, params, dropout, training)
    return gcn_forward(operators[0], x_in, params, dropout, training)


def backbone_backward(cache: StackCache, grad_embedding: np.ndarray) -> np.ndarray:
    return _stack_backward(cache, grad_embedding)


# --- aligning FCN ------------------------------------------------------------

@dataclass
class FCNCache:
    params: FCNParams
    h0: np.ndarray
    drop0: Optional[np.ndarray]
    relu: np.ndarray
    h1: np.ndarray
    drop1: Optional[np.ndarray]
    versions: Tuple[int, ...]


def fcn_forward(
    x_rest: np.ndarray,
    params: FCNParams,
    dropout: DropoutState = NO_DROPOUT,
    training: bool = False,
) -> Tuple[np.ndarray, FCNCache]:
    """linear -> rectifier -> linear on node features, no graph structure"""
    if x_rest.shape[1] != params.in_dim:
        raise DimensionError(f"FCN expects {params.in_dim} input features, got {x_rest.shape[1]}")

    drop0 = drop1 = None
    h0 = x_rest
    if dropout.active(training):
        drop0 = dropout_mask(h0.shape, dropout.rate, dropout.rng)
        h0 = h0 * drop0
    h1, relu = relu_forward(matmul(h0, params.w1.value) + params.b1.value)
    if dropout.active(training):
        drop1 = dropout_mask(h1.shape, dropout.rate, dropout.rng)
        h1 = h1 * drop1
    out = matmul(h1, params.w2.value) + params.b2.value

    versions = _versions(list(params.named().values()))
    return out, FCNCache(params, h0, drop0, relu, h1, drop1, versions)


def fcn_backward(cache: FCNCache, grad: np.ndarray) -> np.ndarray:
    p = cache.params
    if _versions(list(p.named().values())) != cache.versions:
        raise StaleCacheError("FCN parameters changed since the forward pass")

    p.w2.grad += cache.h1.T @ grad
    p.b2.grad += grad.sum(axis=0, keepdims=True)
    g_h1 = grad @ p.w2.value.T
    if cache.drop1 is not None:
        g_h1 = g_h1 * cache.drop1
    g_pre = relu_backward(cache.relu, g_h1)
    p.w1.grad += cache.h0.T @ g_pre
    p.b1.grad += g_pre.sum(axis=0, keepdims=True)
    g_x = g_pre @ p.w1.value.T
    if cache.drop0 is not None:
        g_x = g_x * cache.drop0
    return g_x


# --- prediction head ---------------------------------------------------------

@dataclass
class HeadCache:
    params: HeadParams
    z: np.ndarray
    logits: np.ndarray
    versions: Tuple[int, ...]


def head_forward(z: np.ndarray, head: HeadParams) -> Tuple[np.ndarray, HeadCache]:
    """softmax(z W + b); the cache keeps the logits for the loss"""
    if z.shape[1] != head.w.shape[0]:
        raise DimensionError(f"head expects embeddings of width {head.w.shape[0]}, got {z.shape[1]}")
    logits = matmul(z, head.w.value) + head.b.value
    return softmax_rows(logits), HeadCache(head, z, logits, _versions([head.w, head.b]))


def head_backward(cache: HeadCache, grad_logits: np.ndarray) -> np.ndarray:
    head = cache.params
    if _versions([head.w, head.b]) != cache.versions:
        raise StaleCacheError("head parameters changed since the forward pass")
    head.w.grad += cache.z.T @ grad_logits
    head.b.grad += grad_logits.sum(axis=0, keepdims=True)
    return grad_logits @ head.w.value.T
