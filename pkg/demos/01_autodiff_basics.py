"""A tour of the tensor engine: forward ops, gradients, gradient checking.

Run:  python demos/01_autodiff_basics.py
"""

import numpy as np

from msdalab import autodiff as ad
from msdalab.autodiff import Tensor

print("== tensors and tracked operations ==")
w = ad.parameter([[0.5, -0.2], [0.1, 0.4]])
x = Tensor([[1.0, 2.0]])
y = ad.matmul(x, w)
print("x @ w =", y.data)

loss = ad.tsum(ad.mul(y, y))
ad.backward(loss)
print("d(sum((xW)^2))/dW =\n", w.grad)

print("\n== the tape records only tracked work ==")
tape = ad.active_tape()
tape.clear()
with ad.no_grad():
    ad.matmul(x, w)
print("records under no_grad:", len(tape))
ad.matmul(x, w)
print("records when tracked:  ", len(tape))
tape.clear()

print("\n== convolution and pooling ==")
img = ad.parameter(np.random.default_rng(0).uniform(0, 1, (1, 1, 6, 6)))
kernel = ad.parameter(np.random.default_rng(1).normal(size=(2, 1, 3, 3)) * 0.3)
feat = ad.relu(ad.conv2d(img, kernel, stride=1))
pooled = ad.global_avg_pool(feat)
print("conv output shape:", feat.shape, "-> pooled:", pooled.shape)

print("\n== gradient checking ==")


def objective():
    feat = ad.relu(ad.conv2d(img, kernel, stride=1))
    return ad.tsum(ad.mul(feat, feat))


err = ad.finite_difference_check(objective, [img, kernel], eps=1e-5)
print(f"max relative error vs central differences: {err:.2e}")
assert err < 1e-4, "gradient check failed"
print("analytic gradients agree with finite differences")
