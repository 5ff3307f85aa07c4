"""
A numpy autodiff core and its finite-difference oracle
======================================================

Every model in the package is built from a few dozen differentiable
primitives.  This script builds a small expression, runs reverse mode and
compares the result against central differences.
"""

import numpy as np

from mirl import diffcore as dc

rng = np.random.default_rng(0)

# Leaves that need gradients are Tensors with requires_grad=True.
x = dc.Tensor(rng.normal(size=(4, 6)), requires_grad=True)
w = dc.Tensor(rng.normal(size=(6, 3)) * 0.5, requires_grad=True)
g = dc.Tensor(np.ones(3), requires_grad=True)
b = dc.Tensor(np.zeros(3), requires_grad=True)


def f():
    h = dc.layer_norm(dc.gelu(dc.matmul(x, w)), g, b)
    return dc.cross_entropy(h, np.array([0, 2, 1, 2]), smoothing=0.1)


loss = f()
loss.backward()
print("loss", loss.item())
print("dL/dw row 0", w.grad[0])

# grad_check perturbs each entry by +-h in float64 and compares.
report = dc.grad_check(f, {"x": x, "w": w, "g": g, "b": b}, h=1e-4)
for name, err in report.errors.items():
    print(f"{name:>2}: max relative error {err:.2e}")
print("all within 1e-5:", report.ok)

# A deliberately wrong backward rule is caught.
bad = lambda: dc._make(x.data ** 2, [x], lambda grad: [3 * x.data * grad]).sum()
print("wrong rule passes?", dc.grad_check(bad, {"x": x}).ok)
