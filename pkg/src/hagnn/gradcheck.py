"""Finite-difference checks of every trainable layer on small seeded
instances.  Used by the ``gradcheck`` subcommand and the acceptance suite."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as F
from .autodiff import GradCheckReport, finite_diff_check, tensor
from .connectome import BoldMatrix, EdgeRule, build_graph, pearson_fc
from .gnn import (GcnConfig, GraphBatch, embedding_dim, gcn_forward, graph_norm, init_gcn_params,
                  init_pretrain_head, pretrain_head, sage_layer, topk_pool)
from .temporal import RNN_KINDS, encode_batch, init_temporal_params
from .training import FocalLossConfig, focal_loss_tensor

__all__ = ["CheckResult", "run_gradcheck", "TOLERANCE"]

TOLERANCE = 1e-4
# central differences at h=1e-5 carry ~1e-11 round-off on O(1) losses
ABS_FLOOR = 1e-9


@dataclass
class CheckResult:
    name: str
    report: GradCheckReport
    seconds: float

    @property
    def passed(self) -> bool:
        return self.report.passed


def _graph(rng, n=8, k=3):
    fc = pearson_fc(BoldMatrix(rng.normal(size=(30, n))))
    return GraphBatch.from_graphs([build_graph(fc, EdgeRule("topk", k))])


def _weighted_sum(out, rng):
    # random projection so every output entry matters
    return F.sum(F.mul(out, F.constant(rng.normal(size=out.shape))))


def _cases(seed: int):
    rng = np.random.default_rng(seed)
    batch, x = _graph(rng)
    d = x.shape[1]

    w_self = tensor(rng.normal(size=(d, 5)) * 0.5, name="w_self")
    w_neigh = tensor(rng.normal(size=(d, 5)) * 0.5, name="w_neigh")
    bias = tensor(rng.normal(size=(1, 5)) * 0.1, name="bias")
    h_in = tensor(x, name="h")
    yield "sage", lambda: _weighted_sum(sage_layer(batch, h_in, w_self, w_neigh, bias), np.random.default_rng(1)), \
        [w_self, w_neigh, bias, h_in]

    h = tensor(rng.normal(size=(8, 4)), name="h")
    gamma = tensor(rng.uniform(0.5, 1.5, (1, 4)), name="gamma")
    beta = tensor(rng.normal(size=(1, 4)), name="beta")
    alpha = tensor(rng.uniform(0.2, 1.2, (1, 4)), name="alpha")
    yield "graphnorm", lambda: _weighted_sum(graph_norm(batch, h, gamma, beta, alpha), np.random.default_rng(2)), \
        [h, gamma, beta, alpha]

    hp = tensor(rng.normal(size=(8, 4)), name="h")
    p = tensor(rng.normal(size=(4, 1)), name="p")
    yield "topk_gate", lambda: _weighted_sum(topk_pool(batch, hp, p, 0.5)[1], np.random.default_rng(3)), [hp, p]

    cfg = GcnConfig(d_in=d, dims=(6, 4), ratios=(0.5, 0.5), dropout=0.3)
    gparams = init_gcn_params(cfg, rng)
    gparams.update(init_pretrain_head(embedding_dim(cfg), rng))
    for name, t in gparams.items():
        if ".norm." in name:
            t.data = t.data + 0.3 * rng.normal(size=t.shape)
    onehot = F.constant(np.array([[0.0, 0.0, 1.0]]))
    yield "gcn+pretrain_head", lambda: F.scalar_mul(
        F.sum(F.mul(onehot, F.log(pretrain_head(gcn_forward(batch, x, gparams, cfg), gparams)))), -1.0), \
        list(gparams.values())

    for kind in RNN_KINDS:
        tparams = init_temporal_params(kind, 4, 3, rng)
        for t in tparams.values():
            t.data = t.data + 0.1 * rng.normal(size=t.shape)
        emb = tensor(rng.normal(size=(5, 4)), name="emb")
        rows = [[0, 1, 2], [3, 4], [1]]
        gaps = [[6.0, 14.0, 30.0], [12.0, 3.0], [9.0]]
        targets = [1, 0, 1]

        def fn(tparams=tparams, emb=emb, rows=rows, gaps=gaps):
            prob = F.sigmoid(encode_batch(emb, rows, gaps, tparams))
            return focal_loss_tensor(prob, targets, FocalLossConfig(0.9, 3.0))

        yield f"rnn_{kind}+head", fn, [emb, *tparams.values()]

    logits = tensor(rng.normal(size=(10, 1)), name="logits")
    y = rng.integers(0, 2, 10)
    for a, g in ((0.9, 3.0), (0.25, 0.0), (0.5, 1.0)):
        cfgf = FocalLossConfig(a, g)
        yield f"focal(a={a:g},g={g:g})", lambda cfgf=cfgf: focal_loss_tensor(F.sigmoid(logits), y, cfgf), [logits]


def run_gradcheck(seed: int = 0, tol: float = TOLERANCE) -> list[CheckResult]:
    """Run every check with the given seed; returns one result per layer."""
    results = []
    for name, fn, params in _cases(seed):
        t0 = time.perf_counter()
        report = finite_diff_check(fn, params, tol=tol, atol=ABS_FLOOR)
        results.append(CheckResult(name, report, time.perf_counter() - t0))
    return results
