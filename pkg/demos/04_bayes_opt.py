"""
Bayesian optimisation on a toy objective
========================================

Five random probes, then each step fits a Gaussian-process surrogate and
evaluates the candidate with the largest expected improvement.
"""

import numpy as np

from hagnn.hyperopt import Choice, Real, bayes_opt


def objective(cfg):
    # peak at lr = 1e-3, hidden = 64
    return -(np.log10(cfg["lr"]) + 3) ** 2 - 0.1 * (cfg["hidden"] != 64)


space = {"lr": Real(1e-5, 1e-1, log=True), "hidden": Choice((32, 64, 128))}
res = bayes_opt(space, objective, budget=20, seed=0)
for i, (cfg, val) in enumerate(res.history):
    tag = "random" if i < 5 else "EI"
    print(f"{i:2d} {tag:6s} lr={cfg['lr']:.2e} hidden={cfg['hidden']:3d}  f={val:+.4f}")
print("best:", res.best_config, round(res.best_value, 4))
