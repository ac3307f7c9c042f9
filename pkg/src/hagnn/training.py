"""Focal loss, Adam, GCN pretraining and cross-validated HA-GNN training."""

from __future__ import annotations

import json
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as F
from .autodiff import DimensionError, Tape, Tensor
from .cohort import Subject, kfold_split, pretrain_split
from .connectome import EdgeRule, build_graph, parse_edge_rule
from .gnn import (GcnConfig, GraphBatch, embedding_dim, gcn_forward, init_gcn_params,
                  init_pretrain_head, pretrain_head)
from .metrics import (TRANSITIONS, UndefinedMetricError, accuracy, auc_roc, balanced_accuracy,
                      roc_curve)
from .params import Params, copy_params
from .temporal import RNN_KINDS, encode_batch, init_temporal_params

__all__ = [
    "FocalLossConfig", "TrainConfig", "Adam", "AdamState", "adam_step", "focal_loss",
    "focal_loss_tensor", "cross_entropy_tensor", "derive_rng", "prepare_graphs", "Sample",
    "make_samples", "PretrainResult", "pretrain_gcn", "FoldResult", "MetricsReport",
    "CVResult", "train_ha_gnn", "predict_proba", "evaluate_fold", "aggregate_metrics",
    "PipelineResult", "run_pipeline", "SplitError", "PROB_CLAMP",
]

PROB_CLAMP = 1e-7


class SplitError(ValueError):
    pass


def derive_rng(seed: int, stage: str, *extra: int) -> np.random.Generator:
    """Independent stream per (seed, stage name, extra ints)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(stage.encode()), *extra]))


# ---------------------------------------------------------------------------
# losses


@dataclass(frozen=True)
class FocalLossConfig:
    alpha: float = 0.9  # weight of the converter (positive) class
    gamma: float = 3.0

    def __post_init__(self):
        if not 0 < self.alpha <= 1 or self.gamma < 0:
            raise ValueError(f"need alpha in (0, 1] and gamma >= 0, got {self.alpha}, {self.gamma}")


def focal_loss(p_converter, targets, config: FocalLossConfig = FocalLossConfig()) -> float:
    """Mean binary focal loss from converter probabilities (numpy version)."""
    p = np.clip(np.asarray(p_converter, dtype=np.float64).reshape(-1), PROB_CLAMP, 1 - PROB_CLAMP)
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    pos = -config.alpha * (1 - p) ** config.gamma * np.log(p)
    neg = -(1 - config.alpha) * p ** config.gamma * np.log(1 - p)
    return float(np.mean(np.where(y == 1, pos, neg)))


def focal_loss_tensor(prob: Tensor, targets, config: FocalLossConfig = FocalLossConfig()) -> Tensor:
    """Differentiable mean focal loss; ``prob`` is (B, 1) converter probability."""
    y = np.asarray(targets, dtype=np.float64).reshape(-1, 1)
    if prob.shape != y.shape:
        raise DimensionError(f"focal loss: probabilities {prob.shape} vs targets {y.shape}")
    p = F.clip(prob, PROB_CLAMP, 1 - PROB_CLAMP)
    p_t = F.add(F.mul(p, F.constant(2 * y - 1)), F.constant(1 - y))  # y p + (1-y)(1-p)
    alpha_t = F.constant(np.where(y == 1, config.alpha, 1 - config.alpha))
    one_minus = F.sub(F.constant(1.0), p_t)
    weight = F.mul(alpha_t, F.power(one_minus, config.gamma))
    per = F.mul(weight, F.log(p_t))
    return F.scalar_mul(F.sum(per), -1.0 / y.shape[0])


def cross_entropy_tensor(probs: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer class targets."""
    t = np.asarray(targets, dtype=np.int64)
    onehot = np.zeros(probs.shape)
    onehot[np.arange(t.size), t] = 1.0
    logp = F.log(F.clip(probs, PROB_CLAMP, 1.0))
    return F.scalar_mul(F.sum(F.mul(logp, F.constant(onehot))), -1.0 / t.size)


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: Params, grads: dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam update applied in place to ``params``."""
    state.t += 1
    bc1 = 1 - beta1 ** state.t
    bc2 = 1 - beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise DimensionError(f"adam: gradient {g.shape} for parameter {name} {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state


class Adam:
    """Adam over a named parameter set; ``lr_scale`` maps name prefixes to
    learning-rate multipliers (0 freezes a group)."""

    def __init__(self, params: Params, lr: float = 1e-3, lr_scale: dict[str, float] | None = None):
        self.params = params
        self.lr = lr
        self.lr_scale = dict(lr_scale or {})
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        if not self.lr_scale:
            grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
            adam_step(self.params, grads, self.state, self.lr)
            return
        self.state.t += 1
        t = self.state.t
        groups: dict[float, dict] = {}
        for k, p in self.params.items():
            scale = next((v for pre, v in self.lr_scale.items() if k.startswith(pre)), 1.0)
            if p.grad is not None and scale > 0:
                groups.setdefault(scale, {})[k] = p
        for scale, group in groups.items():
            self.state.t = t - 1
            adam_step(group, {k: p.grad for k, p in group.items()}, self.state, self.lr * scale)
        self.state.t = t


# ---------------------------------------------------------------------------
# data


def prepare_graphs(subjects: Sequence[Subject], rule: EdgeRule | str = EdgeRule("topk", 10)) -> None:
    """Build ``visit.graph`` from ``visit.fc`` for every visit, in place."""
    if isinstance(rule, str):
        rule = parse_edge_rule(rule)
    for s in subjects:
        for v in s.visits:
            if v.fc is None:
                raise ValueError(f"{s.id}: visit without FC matrix")
            v.graph = build_graph(v.fc, rule)


@dataclass
class Sample:
    subject_id: str
    graphs: list
    gaps: np.ndarray
    label: int
    transition: tuple


def make_samples(subjects: Sequence[Subject], prefix_augment: bool = False) -> list[Sample]:
    """One sample per subject: its first n visits, target = label of visit n+1.

    With ``prefix_augment`` every shorter prefix is added as well.
    """
    out = []
    for s in subjects:
        offsets = np.array([v.month_offset for v in s.visits])
        gaps = np.diff(offsets)
        ends = range(1, len(s.visits)) if prefix_augment else [len(s.visits) - 1]
        for n in ends:
            visits = s.visits[: n + 1]
            label = int(visits[-1].diagnosis > visits[-2].diagnosis)
            out.append(Sample(s.id, [v.graph for v in visits[:n]], gaps[:n], label,
                              (visits[-2].diagnosis, visits[-1].diagnosis)))
    return out


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    epochs: int = 60
    lr: float = 1e-3
    batch_size: int = 16
    rnn: str = "lstm"
    gcn_dims: tuple[int, int] = (64, 32)
    pool_ratios: tuple[float, float] = (0.5, 0.5)
    dropout: float = 0.3
    hidden: int = 32
    seed: int = 0
    patience: int = 10
    val_fraction: float = 0.15
    alpha: float = 0.9
    gamma: float = 3.0
    prefix_augment: bool = False
    pretrain_epochs: int = 40
    pretrain_lr: float = 1e-3
    pretrain_batch: int = 32
    edge_rule: str = "topk:10"
    weighted_aggregation: bool = False
    gcn_lr_scale: float = 0.1  # multiplier on lr for pretrained GCN weights

    def validate(self) -> None:
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.lr <= 0 or self.pretrain_lr <= 0 or self.batch_size < 1 or self.hidden < 1:
            raise ValueError("lr, batch size and hidden size must be positive")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.rnn not in RNN_KINDS:
            raise ValueError(f"unknown rnn kind {self.rnn!r}; choose from {RNN_KINDS}")
        if self.patience < 1 or self.gcn_lr_scale < 0:
            raise ValueError("patience must be >= 1 and gcn_lr_scale >= 0")
        parse_edge_rule(self.edge_rule)
        self.gcn_config(1).validate()
        FocalLossConfig(self.alpha, self.gamma)

    def gcn_config(self, d_in: int) -> GcnConfig:
        return GcnConfig(d_in=d_in, dims=tuple(self.gcn_dims), ratios=tuple(self.pool_ratios),
                         dropout=self.dropout, weighted_aggregation=self.weighted_aggregation)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gcn_dims"] = list(self.gcn_dims)
        d["pool_ratios"] = list(self.pool_ratios)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        for key in ("gcn_dims", "pool_ratios"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def _node_dim(subjects: Sequence[Subject]) -> int:
    return subjects[0].visits[0].graph.node_features.shape[1]


# ---------------------------------------------------------------------------
# pretraining


@dataclass
class PretrainResult:
    gcn: Params
    head: Params
    history: list[float]
    holdout_accuracy: float | None = None


def _visit_batch(visits):
    batch, x = GraphBatch.from_graphs([v.graph for v in visits])
    return batch, x, np.array([int(v.diagnosis) for v in visits])


def _predict_diagnosis(visits, gcn, head, gcfg, batch_size=64) -> np.ndarray:
    preds = []
    for i in range(0, len(visits), batch_size):
        batch, x, _ = _visit_batch(visits[i:i + batch_size])
        probs = pretrain_head(gcn_forward(batch, x, gcn, gcfg, train=False), head)
        preds.append(probs.data.argmax(axis=1))
    return np.concatenate(preds)


def pretrain_gcn(subjects: Sequence[Subject], config: TrainConfig,
                 holdout_fraction: float = 0.0) -> PretrainResult:
    """Train GCN + 3-class head on single visits (every visit of every
    subject is one sample).  ``holdout_fraction`` of visits is kept aside
    and scored for reporting only."""
    if not subjects:
        raise ValueError("pretraining set is empty")
    config.validate()
    gcfg = config.gcn_config(_node_dim(subjects))
    rng = derive_rng(config.seed, "pretrain")
    gcn = init_gcn_params(gcfg, rng)
    head = init_pretrain_head(embedding_dim(gcfg), rng)
    visits = [v for s in subjects for v in s.visits]
    order = rng.permutation(len(visits))
    n_hold = int(round(holdout_fraction * len(visits)))
    held = [visits[i] for i in sorted(order[:n_hold])]
    train = [visits[i] for i in sorted(order[n_hold:])]

    params = {**gcn, **head}
    opt = Adam(params, config.pretrain_lr)
    history = []
    for _ in range(config.pretrain_epochs):
        perm = rng.permutation(len(train))
        total = 0.0
        for i in range(0, len(train), config.pretrain_batch):
            chunk = [train[j] for j in perm[i:i + config.pretrain_batch]]
            batch, x, y = _visit_batch(chunk)
            opt.zero_grad()
            with Tape() as tape:
                probs = pretrain_head(gcn_forward(batch, x, gcn, gcfg, train=True, rng=rng), head)
                loss = cross_entropy_tensor(probs, y)
            tape.backward(loss, leaves=list(params.values()))
            opt.step()
            total += loss.item() * len(chunk)
        history.append(total / max(len(train), 1))
    for p in params.values():
        p.grad = None
    acc = None
    if held:
        pred = _predict_diagnosis(held, gcn, head, gcfg)
        acc = float(np.mean(pred == np.array([int(v.diagnosis) for v in held])))
    return PretrainResult(gcn, head, history, acc)


# ---------------------------------------------------------------------------
# HA-GNN


def _forward(samples: Sequence[Sample], params: Params, gcfg: GcnConfig, train: bool,
             rng: np.random.Generator | None) -> Tensor:
    graphs = [g for s in samples for g in s.graphs]
    batch, x = GraphBatch.from_graphs(graphs)
    emb = gcn_forward(batch, x, params, gcfg, train=train, rng=rng)
    rows, start = [], 0
    for s in samples:
        rows.append(list(range(start, start + len(s.graphs))))
        start += len(s.graphs)
    return F.sigmoid(encode_batch(emb, rows, [s.gaps for s in samples], params))


def predict_proba(samples: Sequence[Sample], params: Params, gcfg: GcnConfig,
                  batch_size: int = 64) -> np.ndarray:
    out = []
    for i in range(0, len(samples), batch_size):
        out.append(_forward(samples[i:i + batch_size], params, gcfg, False, None).data[:, 0])
    return np.concatenate(out) if out else np.zeros(0)


def _carve_validation(samples: Sequence[Sample], fraction: float, rng) -> tuple[list, list]:
    """Stratified subject-level carve-out of a validation set."""
    val_ids: set[str] = set()
    if fraction <= 0:
        return list(samples), []
    for label in (0, 1):
        ids = sorted({s.subject_id for s in samples if s.label == label})
        n = int(round(fraction * len(ids)))
        if len(ids) >= 2:
            n = min(max(n, 1), len(ids) - 1)
        else:
            n = 0
        chosen = rng.permutation(len(ids))[:n]
        val_ids.update(ids[i] for i in chosen)
    train = [s for s in samples if s.subject_id not in val_ids]
    val = [s for s in samples if s.subject_id in val_ids]
    return train, val


@dataclass
class FoldResult:
    index: int
    params: Params
    test_ids: list[str]
    train_ids: list[str]
    val_ids: list[str]
    seen_ids: list[str]
    probs: np.ndarray
    labels: np.ndarray
    transitions: list
    metrics: dict
    epochs_run: int
    history: list[dict]


def evaluate_fold(probs, labels, transitions) -> dict:
    """Per-fold metrics; transition columns are None when undefined."""
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels, dtype=int)
    pred = (probs >= 0.5).astype(int)
    out = {"acc": accuracy(pred, labels)}
    try:
        out["auc_roc"] = auc_roc(probs, labels)
        out["ba"] = balanced_accuracy(pred, labels)
    except UndefinedMetricError:
        out["auc_roc"] = out["ba"] = None
    for key, pair in TRANSITIONS.items():
        hits = [p for p, t, y in zip(pred, transitions, labels) if y == 1 and tuple(t) == pair]
        out[key] = float(np.mean(hits)) if hits else None
    out["n_test"] = int(labels.size)
    out["n_converters"] = int(labels.sum())
    return out


def _train_fold(index: int, train_samples: list[Sample], test_samples: list[Sample],
                pretrained: Params | None, cfg: TrainConfig, d_in: int, on_epoch=None) -> FoldResult:
    rng = derive_rng(cfg.seed, "fold", index)
    gcfg = cfg.gcn_config(d_in)
    focal = FocalLossConfig(cfg.alpha, cfg.gamma)
    test_ids = {s.subject_id for s in test_samples}
    if not test_samples:
        raise SplitError(f"fold {index} has no test subjects")
    if test_ids & {s.subject_id for s in train_samples}:
        raise SplitError(f"fold {index}: test subjects leak into training")

    train, val = _carve_validation(train_samples, cfg.val_fraction, rng)
    gcn = copy_params(pretrained) if pretrained is not None else init_gcn_params(gcfg, rng)
    temporal = init_temporal_params(cfg.rnn, embedding_dim(gcfg), cfg.hidden, rng)
    params = {**gcn, **temporal}
    scale = {"gcn.": cfg.gcn_lr_scale} if pretrained is not None and cfg.gcn_lr_scale != 1.0 else None
    opt = Adam(params, cfg.lr, scale)

    best = (math.inf, {k: p.data.copy() for k, p in params.items()})
    stale, epochs_run, history = 0, 0, []
    seen: set[str] = set()
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(train))
        total = 0.0
        for i in range(0, len(train), cfg.batch_size):
            chunk = [train[j] for j in perm[i:i + cfg.batch_size]]
            seen.update(s.subject_id for s in chunk)
            opt.zero_grad()
            with Tape() as tape:
                prob = _forward(chunk, params, gcfg, True, rng)
                loss = focal_loss_tensor(prob, [s.label for s in chunk], focal)
            tape.backward(loss, leaves=list(params.values()))
            opt.step()
            total += loss.item() * len(chunk)
        epochs_run = epoch + 1
        if on_epoch is not None:
            on_epoch(epochs_run, params)
        if not val:
            # nothing to stop on: keep the last epoch
            history.append({"epoch": epochs_run, "train_loss": total / len(train), "val_loss": None})
            best = (math.inf, {k: p.data.copy() for k, p in params.items()})
            continue
        val_loss = focal_loss(predict_proba(val, params, gcfg), [s.label for s in val], focal)
        history.append({"epoch": epochs_run, "train_loss": total / len(train), "val_loss": val_loss})
        if val_loss < best[0]:
            best = (val_loss, {k: p.data.copy() for k, p in params.items()})
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    for k, p in params.items():
        p.data = best[1][k]
        p.grad = None

    probs = predict_proba(test_samples, params, gcfg)
    labels = np.array([s.label for s in test_samples])
    transitions = [tuple(int(d) for d in s.transition) for s in test_samples]
    metrics = evaluate_fold(probs, labels, transitions)
    return FoldResult(index, params, sorted(test_ids), sorted({s.subject_id for s in train}),
                      sorted({s.subject_id for s in val}), sorted(seen), probs, labels,
                      transitions, metrics, epochs_run, history)


def _fold_job(args):
    return _train_fold(*args)


@dataclass
class MetricsReport:
    per_fold: list[dict]
    mean: dict
    std: dict

    def to_dict(self) -> dict:
        return {"per_fold": self.per_fold, "mean": self.mean, "std": self.std}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(d["per_fold"], d["mean"], d["std"])


def aggregate_metrics(folds: Sequence[FoldResult]) -> MetricsReport:
    """Mean and population std across folds for acc / auc_roc / ba; the
    transition columns are pooled over every fold's test predictions."""
    per_fold = [dict(f.metrics, fold=f.index) for f in folds]
    mean, std = {}, {}
    for key in ("acc", "auc_roc", "ba"):
        vals = [m[key] for m in per_fold if m[key] is not None]
        mean[key] = float(np.mean(vals)) if vals else None
        std[key] = float(np.std(vals)) if vals else None
    for key, pair in TRANSITIONS.items():
        hits = [int(p >= 0.5) for f in folds for p, t, y in zip(f.probs, f.transitions, f.labels)
                if y == 1 and tuple(t) == pair]
        mean[key] = float(np.mean(hits)) if hits else None
        vals = [m[key] for m in per_fold if m[key] is not None]
        std[key] = float(np.std(vals)) if vals else None
    return MetricsReport(per_fold, mean, std)


@dataclass
class CVResult:
    folds: list[FoldResult]
    report: MetricsReport

    def roc_points(self, k: int):
        f = self.folds[k]
        return roc_curve(f.probs, f.labels)


def train_ha_gnn(subjects: Sequence[Subject], folds: Sequence[Sequence[str]],
                 pretrained: Params | None, config: TrainConfig, parallel_folds: int = 1) -> CVResult:
    """k-fold training and evaluation.  Each fold initialises the GCN from
    ``pretrained`` (fresh when None) and owns an RNG stream derived from the
    fold index, so running folds in parallel does not change results."""
    config.validate()
    by_id = {s.id: s for s in subjects}
    all_ids = set(by_id)
    fold_sets = [set(f) for f in folds]
    if set().union(*fold_sets) != all_ids or sum(len(f) for f in fold_sets) != len(all_ids):
        raise SplitError("folds must partition the subject set")
    d_in = _node_dim(subjects)
    jobs = []
    for k, test in enumerate(folds):
        if not test:
            raise SplitError(f"fold {k} has no test subjects")
        train_subj = [s for s in subjects if s.id not in fold_sets[k]]
        test_subj = [by_id[i] for i in sorted(test)]
        jobs.append((k, make_samples(train_subj, config.prefix_augment), make_samples(test_subj),
                     pretrained, config, d_in))
    if parallel_folds > 1:
        with ProcessPoolExecutor(max_workers=parallel_folds) as pool:
            results = list(pool.map(_fold_job, jobs))
    else:
        results = [_fold_job(j) for j in jobs]
    return CVResult(results, aggregate_metrics(results))


# ---------------------------------------------------------------------------
# full pipeline


@dataclass
class PipelineResult:
    pretrain_ids: list[str]
    folds: list[list[str]]
    pretrain: PretrainResult | None
    cv: CVResult
    config: TrainConfig
    hyperopt_trials: list[dict] = field(default_factory=list)


def run_pipeline(subjects: Sequence[Subject], config: TrainConfig, pretrain: bool = True,
                 pretrain_fraction: float = 0.2, k: int = 5, parallel_folds: int = 1,
                 hyperopt_budget: int = 0, pretrained: Params | None = None) -> PipelineResult:
    """Split off the pretraining subjects, pretrain (optional), tune
    (optional) and run k-fold training on the remaining subjects.

    The pretraining subjects are excluded from cross-validation whether or
    not pretraining runs, so both variants see the same folds.
    """
    config.validate()
    if hyperopt_budget:
        from .hyperopt import check_budget
        check_budget(hyperopt_budget)
    if any(v.graph is None for s in subjects for v in s.visits):
        prepare_graphs(subjects, config.edge_rule)
    pre_set, main = pretrain_split(list(subjects), pretrain_fraction, seed=config.seed)
    pre_result = None
    if pretrain and pretrained is None:
        pre_result = pretrain_gcn(pre_set, config)
        pretrained = pre_result.gcn
    elif not pretrain:
        pretrained = None
    trials: list[dict] = []
    if hyperopt_budget:
        from .hyperopt import tune_hyperparameters
        config, trials = tune_hyperparameters(main, pretrained, config, hyperopt_budget)
    folds = kfold_split(main, k, seed=config.seed)
    cv = train_ha_gnn(main, folds, pretrained, config, parallel_folds)
    return PipelineResult([s.id for s in pre_set], folds, pre_result, cv, config, trials)

