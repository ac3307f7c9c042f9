"""Recurrent encoder over visit embeddings with the inter-visit distance
appended to every step, followed by a logistic converter head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as F
from .autodiff import DimensionError, Tensor
from .params import Params, glorot, make_param

__all__ = [
    "RNN_KINDS", "GAP_SCALE", "VisitSequenceInput", "init_temporal_params",
    "rnn_cell_step", "encode_batch", "encode_history",
]

RNN_KINDS = ("vanilla", "gru", "lstm")
GAP_SCALE = 12.0  # months -> roughly years

_GATES = {"vanilla": ("cell",), "gru": ("update", "reset", "cand"),
          "lstm": ("input", "forget", "cell", "output")}


@dataclass
class VisitSequenceInput:
    """Embeddings e_1..e_n and gaps g_1..g_n, where g_t is the distance in
    months from visit t to visit t+1 (g_n is the forecast horizon)."""

    embeddings: np.ndarray  # (n, D)
    gaps: np.ndarray  # (n,)

    def __post_init__(self):
        self.embeddings = np.atleast_2d(np.asarray(self.embeddings, dtype=np.float64))
        self.gaps = np.asarray(self.gaps, dtype=np.float64).reshape(-1)
        if self.embeddings.shape[0] == 0:
            raise ValueError("visit sequence is empty")
        if self.gaps.size != self.embeddings.shape[0]:
            raise ValueError("embeddings and gaps must have the same length")
        if np.any(self.gaps <= 0):
            raise ValueError("gaps must be positive")


def init_temporal_params(kind: str, input_dim: int, hidden: int, rng: np.random.Generator) -> Params:
    """``input_dim`` is the visit-embedding width; one gap column is added."""
    if kind not in RNN_KINDS:
        raise ValueError(f"unknown rnn kind {kind!r}; choose from {RNN_KINDS}")
    d = input_dim + 1
    params: Params = {}
    for gate in _GATES[kind]:
        pre = f"rnn.{kind}.{gate}"
        params[f"{pre}.w_x"] = make_param(f"{pre}.w_x", glorot(rng, d, hidden))
        params[f"{pre}.w_h"] = make_param(f"{pre}.w_h", glorot(rng, hidden, hidden))
        bias = np.ones((1, hidden)) if gate == "forget" else np.zeros((1, hidden))
        params[f"{pre}.b"] = make_param(f"{pre}.b", bias)
    params["head.w"] = make_param("head.w", glorot(rng, hidden, 1))
    params["head.b"] = make_param("head.b", np.zeros((1, 1)))
    return params


def rnn_kind(params: Params) -> str:
    kinds = {k.split(".")[1] for k in params if k.startswith("rnn.")}
    if len(kinds) != 1:
        raise ValueError(f"parameter set holds rnn kinds {sorted(kinds)}")
    return kinds.pop()


def _affine(kind, gate, x, h, params):
    pre = f"rnn.{kind}.{gate}"
    return F.add(F.add(F.matmul(x, params[f"{pre}.w_x"]), F.matmul(h, params[f"{pre}.w_h"])),
                 params[f"{pre}.b"])


def rnn_cell_step(kind: str, x: Tensor, state: tuple[Tensor, ...], params: Params) -> tuple[Tensor, ...]:
    """One step for a batch of rows.  ``state`` is ``(h,)`` or ``(h, c)`` for lstm."""
    h = state[0]
    w = params[f"rnn.{kind}.{_GATES[kind][0]}.w_x"]
    if x.shape[1] != w.shape[0] or h.shape[1] != w.shape[1] or x.shape[0] != h.shape[0]:
        raise DimensionError(f"rnn_cell_step: input {x.shape}, state {h.shape}, weights {w.shape}")
    if kind == "vanilla":
        return (F.tanh(_affine(kind, "cell", x, h, params)),)
    if kind == "gru":
        z = F.sigmoid(_affine(kind, "update", x, h, params))
        r = F.sigmoid(_affine(kind, "reset", x, h, params))
        cand = F.tanh(_affine(kind, "cand", x, F.mul(r, h), params))
        return (F.add(F.mul(F.sub(F.constant(1.0), z), h), F.mul(z, cand)),)
    if kind == "lstm":
        c = state[1]
        i = F.sigmoid(_affine(kind, "input", x, h, params))
        f = F.sigmoid(_affine(kind, "forget", x, h, params))
        g = F.tanh(_affine(kind, "cell", x, h, params))
        o = F.sigmoid(_affine(kind, "output", x, h, params))
        c_new = F.add(F.mul(f, c), F.mul(i, g))
        return (F.mul(o, F.tanh(c_new)), c_new)
    raise ValueError(f"unknown rnn kind {kind!r}")


def encode_batch(embeddings: Tensor, visit_rows: Sequence[Sequence[int]],
                 gaps: Sequence[Sequence[float]], params: Params) -> Tensor:
    """Converter logits (B, 1) for B variable-length histories.

    ``visit_rows[b]`` lists the rows of ``embeddings`` holding subject b's
    visits in order; finished sequences carry their state forward unchanged.
    """
    kind = rnn_kind(params)
    b = len(visit_rows)
    if b == 0:
        raise ValueError("empty batch")
    lengths = np.array([len(r) for r in visit_rows])
    if np.any(lengths == 0):
        raise ValueError("every visit history needs at least one visit")
    if any(len(g) != n for g, n in zip(gaps, lengths)):
        raise ValueError("gap list length must match visit count")
    hidden = params["head.w"].shape[0]
    state = tuple(F.constant(np.zeros((b, hidden))) for _ in range(2 if kind == "lstm" else 1))
    for t in range(int(lengths.max())):
        active = lengths > t
        rows = np.array([r[t] if t < len(r) else r[-1] for r in visit_rows])
        gap_col = np.array([[g[t] if t < len(g) else g[-1]] for g in gaps]) / GAP_SCALE
        x = F.concat_cols([F.gather_rows(embeddings, rows), F.constant(gap_col)])
        new = rnn_cell_step(kind, x, state, params)
        if active.all():
            state = new
        else:
            m = F.constant(active[:, None].astype(float))
            keep = F.constant((~active)[:, None].astype(float))
            state = tuple(F.add(F.mul(n_, m), F.mul(s_, keep)) for n_, s_ in zip(new, state))
    return F.add(F.matmul(state[0], params["head.w"]), params["head.b"])


def encode_history(seq: VisitSequenceInput, params: Params) -> float:
    """Converter probability for one visit history."""
    logit = encode_batch(F.constant(seq.embeddings), [list(range(len(seq.gaps)))],
                         [seq.gaps.tolist()], params)
    return float(F.sigmoid(logit).item())
