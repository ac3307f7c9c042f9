"""
The tape and the finite-difference check
========================================

Build a tiny expression on the tape, backpropagate, and compare with
central differences.  Then run the whole layer suite.
"""

import numpy as np

from hagnn import autodiff as F
from hagnn.autodiff import Tape, finite_diff_check, tensor
from hagnn.gradcheck import run_gradcheck

rng = np.random.default_rng(0)
w = tensor(rng.normal(size=(3, 2)), requires_grad=True, name="w")
x = F.constant(rng.normal(size=(4, 3)))

with Tape() as tape:
    loss = F.sum(F.tanh(F.matmul(x, w)))
tape.backward(loss, leaves=[w])
print("loss", loss.item())
print("dloss/dw\n", w.grad)

# same gradient by hand: d tanh(z) = 1 - tanh(z)^2
z = x.data @ w.data
print("max diff to hand-derived:", np.abs(x.data.T @ (1 - np.tanh(z) ** 2) - w.grad).max())

report = finite_diff_check(lambda: F.sum(F.tanh(F.matmul(x, w))), [w])
print(report)

for r in run_gradcheck(seed=0):
    print(f"{r.name:22s} passed={r.passed}  rel err {r.report.max_rel_err:.1e}  ({r.seconds:.2f}s)")
