"""GCN component: two blocks of GraphSAGE -> GraphNorm -> dropout -> top-k
pooling, a mean||max readout after each block, and the 3-class
diagnosis head used for pretraining.

Layers operate on a :class:`GraphBatch`, the disjoint union of one or more
brain graphs, so a single graph is simply a batch of one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autodiff as F
from .autodiff import DimensionError, Tensor
from .connectome import BrainGraph
from .params import Params, glorot, make_param

__all__ = [
    "GraphBatch", "GcnConfig", "DegenerateProjectionError", "init_gcn_params",
    "init_pretrain_head", "sage_layer", "graph_norm", "dropout", "topk_pool",
    "pooled_count", "gcn_forward", "pretrain_head", "embedding_dim",
]

GRAPHNORM_EPS = 1e-5


class DegenerateProjectionError(ValueError):
    """Top-k pooling projection vector has zero norm."""


@dataclass
class GraphBatch:
    """Disjoint union of graphs with global node numbering."""

    n_nodes: int
    n_graphs: int
    graph_index: np.ndarray  # (n_nodes,) owning graph of each node
    edges: np.ndarray  # (E, 2) undirected, global ids
    edge_weights: np.ndarray
    _ops: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_graphs(cls, graphs: list[BrainGraph]) -> tuple["GraphBatch", np.ndarray]:
        """Batch graphs; returns the batch and the stacked node features."""
        if not graphs:
            raise ValueError("cannot batch zero graphs")
        sizes = [g.n_nodes for g in graphs]
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        gi = np.repeat(np.arange(len(graphs)), sizes)
        edges = np.concatenate([g.edges + o for g, o in zip(graphs, offsets)], axis=0)
        weights = np.concatenate([g.edge_weights for g in graphs])
        x = np.concatenate([g.node_features for g in graphs], axis=0)
        return cls(int(np.sum(sizes)), len(graphs), gi, edges.reshape(-1, 2), weights), x

    def neighbor_mean_operator(self, weighted: bool = False) -> sp.csr_matrix:
        """Row-normalised adjacency: row i averages i's neighbours (zero row
        for isolated nodes)."""
        key = ("mean", weighted)
        if key not in self._ops:
            n = self.n_nodes
            e = self.edges
            w = self.edge_weights if weighted else np.ones(len(e))
            rows = np.concatenate([e[:, 0], e[:, 1]])
            cols = np.concatenate([e[:, 1], e[:, 0]])
            vals = np.concatenate([w, w])
            adj = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
            deg = np.asarray(adj.sum(axis=1)).ravel()
            inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
            self._ops[key] = (sp.diags(inv) @ adj).tocsr()
        return self._ops[key]

    def sizes(self) -> np.ndarray:
        return np.bincount(self.graph_index, minlength=self.n_graphs)


@dataclass
class GcnConfig:
    d_in: int = 100
    dims: tuple[int, int] = (64, 32)
    ratios: tuple[float, float] = (0.5, 0.5)
    dropout: float = 0.3
    weighted_aggregation: bool = False

    def validate(self) -> None:
        if any(not 0 < r <= 1 for r in self.ratios):
            raise ValueError(f"pool ratios must lie in (0, 1], got {self.ratios}")
        if not 0 <= self.dropout < 1:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")


def embedding_dim(cfg: GcnConfig) -> int:
    return 2 * (cfg.dims[0] + cfg.dims[1])


def init_gcn_params(cfg: GcnConfig, rng: np.random.Generator) -> Params:
    cfg.validate()
    params: Params = {}
    d_prev = cfg.d_in
    for b, d in enumerate(cfg.dims, start=1):
        pre = f"gcn.block{b}"
        params[f"{pre}.sage.w_self"] = make_param(f"{pre}.sage.w_self", glorot(rng, d_prev, d))
        params[f"{pre}.sage.w_neigh"] = make_param(f"{pre}.sage.w_neigh", glorot(rng, d_prev, d))
        params[f"{pre}.sage.bias"] = make_param(f"{pre}.sage.bias", np.zeros((1, d)))
        params[f"{pre}.norm.gamma"] = make_param(f"{pre}.norm.gamma", np.ones((1, d)))
        params[f"{pre}.norm.beta"] = make_param(f"{pre}.norm.beta", np.zeros((1, d)))
        params[f"{pre}.norm.alpha"] = make_param(f"{pre}.norm.alpha", np.ones((1, d)))
        params[f"{pre}.pool.p"] = make_param(f"{pre}.pool.p", rng.normal(0, 1 / np.sqrt(d), (d, 1)))
        d_prev = d
    return params


def init_pretrain_head(in_dim: int, rng: np.random.Generator, n_classes: int = 3) -> Params:
    return {"head3.w": make_param("head3.w", glorot(rng, in_dim, n_classes)),
            "head3.b": make_param("head3.b", np.zeros((1, n_classes)))}


def sage_layer(batch: GraphBatch, h: Tensor, w_self: Tensor, w_neigh: Tensor, bias: Tensor,
               weighted: bool = False, activation: bool = True) -> Tensor:
    """Mean-aggregator GraphSAGE: relu(h W_self + mean_nbr(h) W_neigh + b)."""
    if h.shape[0] != batch.n_nodes:
        raise DimensionError(f"sage_layer: {h.shape[0]} feature rows for {batch.n_nodes} nodes")
    if h.shape[1] != w_self.shape[0] or w_neigh.shape != w_self.shape:
        raise DimensionError(f"sage_layer: features {h.shape} vs weights {w_self.shape}, {w_neigh.shape}")
    agg = F.spmm(batch.neighbor_mean_operator(weighted), h)
    pre = F.add(F.add(F.matmul(h, w_self), F.matmul(agg, w_neigh)), bias)
    return F.relu(pre) if activation else pre


def graph_norm(batch: GraphBatch, h: Tensor, gamma: Tensor, beta: Tensor, alpha: Tensor,
               eps: float = GRAPHNORM_EPS) -> Tensor:
    """Per-graph standardisation with a learnable mean scale ``alpha``.

    The variance is that of the shifted features ``h - alpha * mean``.
    """
    gi, g = batch.graph_index, batch.n_graphs
    mu = F.gather_rows(F.scatter_mean(h, gi, g), gi)
    shifted = F.sub(h, F.mul(mu, alpha))
    var = F.scatter_mean(F.mul(shifted, shifted), gi, g)
    inv_std = F.gather_rows(F.power(F.add(var, F.constant(eps)), -0.5), gi)
    return F.add(F.mul(F.mul(shifted, inv_std), gamma), beta)


def dropout(h: Tensor, rate: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train or rate == 0:
        return h
    keep = rng.random(h.shape) >= rate
    return F.mul(h, F.constant(keep / (1.0 - rate)))


def pooled_count(n: int, ratio: float) -> int:
    """ceil(ratio * n), tolerant of binary rounding, at least 1."""
    return max(1, math.ceil(ratio * n - 1e-9))


def topk_pool(batch: GraphBatch, h: Tensor, p: Tensor, ratio: float
              ) -> tuple[GraphBatch, Tensor, np.ndarray]:
    """Keep the ceil(ratio * N) highest-scoring nodes of each graph.

    score_i = h_i . p / ||p||; kept rows are gated by sigmoid(score).  The
    selection is treated as constant in the backward pass.  Kept indices are
    returned graph by graph, in descending score order (ties: lower index).
    """
    if not 0 < ratio <= 1:
        raise ValueError(f"pool ratio must lie in (0, 1], got {ratio}")
    if p.shape != (h.shape[1], 1):
        raise DimensionError(f"topk_pool: projection {p.shape} for features {h.shape}")
    norm = float(np.sqrt(np.sum(p.data ** 2)))
    if norm == 0.0:
        raise DegenerateProjectionError("top-k projection vector is zero")
    p_len = F.power(F.sum(F.mul(p, p)), 0.5)
    inv_len = F.power(p_len, -1.0)
    score = F.mul(F.matmul(h, p), inv_len)  # (N, 1)

    s = score.data[:, 0]
    gi = batch.graph_index
    nodes = np.arange(batch.n_nodes)
    order = np.lexsort((nodes, -s, gi))
    sizes = batch.sizes()
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    kept_parts = [order[st:st + pooled_count(n, ratio)] for st, n in zip(starts, sizes) if n > 0]
    kept = np.concatenate(kept_parts) if kept_parts else np.zeros(0, dtype=np.int64)

    gate = F.sigmoid(F.gather_rows(score, kept))
    h_new = F.mul(F.gather_rows(h, kept), gate)

    remap = np.full(batch.n_nodes, -1, dtype=np.int64)
    remap[kept] = np.arange(kept.size)
    e = batch.edges
    ok = (remap[e[:, 0]] >= 0) & (remap[e[:, 1]] >= 0)
    new_edges = remap[e[ok]]
    new_edges = np.sort(new_edges, axis=1)
    pooled = GraphBatch(kept.size, batch.n_graphs, gi[kept], new_edges, batch.edge_weights[ok])
    return pooled, h_new, kept


def _readout(batch: GraphBatch, h: Tensor) -> Tensor:
    gi, g = batch.graph_index, batch.n_graphs
    return F.concat_cols([F.scatter_mean(h, gi, g), F.segment_max(h, gi, g)])


def gcn_forward(batch: GraphBatch, x, params: Params, cfg: GcnConfig, train: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
    """Visit embeddings, one row per graph: concat of mean||max readouts of
    both blocks, length 2 * (d1 + d2)."""
    h = x if isinstance(x, Tensor) else F.constant(x)
    if h.shape[1] != cfg.d_in:
        raise DimensionError(f"gcn_forward: node features have {h.shape[1]} columns, expected {cfg.d_in}")
    if train and cfg.dropout > 0 and rng is None:
        raise ValueError("train mode with dropout needs an rng")
    readouts = []
    for b in (1, 2):
        pre = f"gcn.block{b}"
        h = sage_layer(batch, h, params[f"{pre}.sage.w_self"], params[f"{pre}.sage.w_neigh"],
                       params[f"{pre}.sage.bias"], weighted=cfg.weighted_aggregation)
        h = graph_norm(batch, h, params[f"{pre}.norm.gamma"], params[f"{pre}.norm.beta"],
                       params[f"{pre}.norm.alpha"])
        h = dropout(h, cfg.dropout, train, rng)
        batch, h, _ = topk_pool(batch, h, params[f"{pre}.pool.p"], cfg.ratios[b - 1])
        readouts.append(_readout(batch, h))
    return F.concat_cols(readouts)


def pretrain_head(embedding: Tensor, params: Params) -> Tensor:
    """Affine map + softmax to (CN, MCI, AD) probabilities, one row per graph."""
    w, b = params["head3.w"], params["head3.b"]
    if embedding.shape[1] != w.shape[0]:
        raise DimensionError(f"pretrain_head: embedding width {embedding.shape[1]} != {w.shape[0]}")
    return F.softmax_rows(F.add(F.matmul(embedding, w), b))
