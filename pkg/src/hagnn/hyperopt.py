"""Gaussian-process Bayesian optimisation with expected improvement."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.stats import norm

__all__ = ["Real", "Choice", "HyperoptError", "BayesOptResult", "bayes_opt",
           "DEFAULT_SPACE", "tune_hyperparameters"]

NOISE = 1e-4
LENGTH_SCALES = (0.05, 0.1, 0.2, 0.4, 0.8)


@dataclass(frozen=True)
class Real:
    low: float
    high: float
    log: bool = False

    def from_unit(self, u: float) -> float:
        if self.log:
            return float(math.exp(math.log(self.low) + u * (math.log(self.high) - math.log(self.low))))
        return float(self.low + u * (self.high - self.low))


@dataclass(frozen=True)
class Choice:
    values: tuple

    def from_unit(self, u: float):
        i = min(int(u * len(self.values)), len(self.values) - 1)
        return self.values[i]


class HyperoptError(RuntimeError):
    def __init__(self, config: dict, cause: BaseException):
        super().__init__(f"objective failed for {config}: {cause!r}")
        self.config = config


@dataclass
class BayesOptResult:
    best_config: dict
    best_value: float
    history: list[tuple[dict, float]] = field(default_factory=list)


def _rbf(a: np.ndarray, b: np.ndarray, ls: float) -> np.ndarray:
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    return np.exp(-0.5 * d2 / ls ** 2)


def _fit(x: np.ndarray, y: np.ndarray):
    """Pick the length scale with the best log marginal likelihood."""
    best = None
    for ls in LENGTH_SCALES:
        k = _rbf(x, x, ls) + NOISE * np.eye(len(x))
        c = cho_factor(k, lower=True)
        alpha = cho_solve(c, y)
        lml = -0.5 * y @ alpha - np.log(np.diag(c[0])).sum()
        if best is None or lml > best[0]:
            best = (lml, ls, c, alpha)
    return best[1:]


def _expected_improvement(x_obs, y_obs, cand) -> np.ndarray:
    mu_y, sd_y = y_obs.mean(), y_obs.std()
    sd_y = sd_y if sd_y > 0 else 1.0
    y = (y_obs - mu_y) / sd_y
    ls, c, alpha = _fit(x_obs, y)
    ks = _rbf(cand, x_obs, ls)
    mu = ks @ alpha
    v = cho_solve(c, ks.T)
    var = np.clip(1.0 - (ks * v.T).sum(1), 1e-12, None)
    sigma = np.sqrt(var)
    z = (mu - y.max()) / sigma
    return (mu - y.max()) * norm.cdf(z) + sigma * norm.pdf(z)


def check_budget(budget: int, n_initial: int = 5) -> None:
    if budget < n_initial:
        raise ValueError(f"budget must be at least {n_initial}, got {budget}")


def bayes_opt(space: Mapping[str, Real | Choice], objective: Callable[[dict], float], budget: int,
              seed: int = 0, n_initial: int = 5, n_candidates: int = 1000) -> BayesOptResult:
    """Maximise ``objective`` over a bounded box.

    ``n_initial`` seeded random points are evaluated first; each later round
    fits the GP surrogate (RBF kernel, unit signal variance, noise 1e-4, on
    standardised targets) and evaluates the EI maximiser among
    ``n_candidates`` seeded uniform samples.
    """
    check_budget(budget, n_initial)
    names = list(space)
    rng = np.random.default_rng(seed)

    def decode(u):
        return {k: space[k].from_unit(float(ui)) for k, ui in zip(names, u)}

    xs: list[np.ndarray] = []
    ys: list[float] = []
    history = []

    def evaluate(u):
        cfg = decode(u)
        try:
            val = float(objective(cfg))
        except Exception as exc:
            raise HyperoptError(cfg, exc) from exc
        xs.append(np.asarray(u, dtype=float))
        ys.append(val)
        history.append((cfg, val))

    for _ in range(n_initial):
        evaluate(rng.random(len(names)))
    while len(ys) < budget:
        cand = rng.random((n_candidates, len(names)))
        ei = _expected_improvement(np.array(xs), np.array(ys), cand)
        evaluate(cand[int(np.argmax(ei))])
    best = int(np.argmax(ys))
    return BayesOptResult(history[best][0], ys[best], history)


DEFAULT_SPACE = {
    "lr": Real(1e-4, 1e-2, log=True),
    "hidden": Choice((32, 64, 128)),
    "dropout": Real(0.1, 0.5),
    "pool_ratio": Real(0.3, 0.8),
}


def tune_hyperparameters(subjects: Sequence, pretrained, config, budget: int,
                         space: Mapping[str, Real | Choice] = DEFAULT_SPACE):
    """Search the training hyperparameters by validation balanced accuracy
    on one stratified inner split of ``subjects``.  Returns the updated
    config and the list of trials."""
    from .cohort import kfold_split
    from .training import _node_dim, _train_fold, derive_rng, make_samples

    check_budget(budget)
    inner = kfold_split(subjects, 5, seed=int(derive_rng(config.seed, "hyperopt").integers(2**31)))
    val_ids = set(inner[0])
    train = make_samples([s for s in subjects if s.id not in val_ids], config.prefix_augment)
    val = make_samples([s for s in subjects if s.id in val_ids])
    d_in = _node_dim(subjects)

    def apply(cfg: dict):
        return replace(config, lr=cfg["lr"], hidden=int(cfg["hidden"]), dropout=cfg["dropout"],
                       pool_ratios=(cfg["pool_ratio"], cfg["pool_ratio"]))

    def objective(cfg: dict) -> float:
        fold = _train_fold(0, train, val, pretrained, apply(cfg), d_in)
        return fold.metrics["ba"] if fold.metrics["ba"] is not None else 0.5

    result = bayes_opt(space, objective, budget, seed=config.seed)
    trials = [{"config": c, "val_ba": v} for c, v in result.history]
    return apply(result.best_config), trials
