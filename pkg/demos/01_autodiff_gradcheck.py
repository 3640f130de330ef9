"""Build a small tanh layer on the tape and check its gradients numerically."""
import numpy as np

from fewshot import autodiff as ad
from fewshot.autodiff import Parameter, grad_check

rng = np.random.default_rng(0)
W = Parameter("W", rng.normal(size=(4, 3)))
b = Parameter("b", rng.normal(size=3))
x = rng.normal(size=(5, 4))


def loss(tape):
    h = ad.tanh(x @ tape.param(W) + tape.param(b))
    return ad.sum(h * h)


report = grad_check(loss, [W, b], step=1e-5, tol=1e-4)
print(report)
assert report.passed
