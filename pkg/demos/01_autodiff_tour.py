"""
A short tour of the autodiff core
=================================

Builds a tiny critic, checks one gradient against finite differences and
takes the gradient of a gradient norm, which is what the penalty term needs.
"""

import numpy as np

from pctgan.ndgrad import Conv2d, Linear, Tensor, backward, global_sum_pool, grad, leaky_relu, reshape, tsum

rng = np.random.default_rng(0)

# a two layer critic on 8x8 two-channel images
conv = Conv2d(2, 4, kernel=4, stride=2, padding=1, spectral=True, rng=rng, dtype=np.float64)
head = Linear(4, 1, spectral=True, rng=rng, dtype=np.float64)


def critic(x):
    return reshape(head(global_sum_pool(leaky_relu(conv(x), 0.2))), (x.shape[0],))


x = Tensor(rng.standard_normal((3, 2, 8, 8)), requires_grad=True)
score = critic(x)
print("scores:", score.data)

# first-order: d(sum score)/dx, checked on one coordinate
(gx,) = grad(tsum(score), [x])
conv.sn.frozen = head.sn.frozen = True   # keep sigma fixed while probing
h = 1e-6
x.data[0, 0, 3, 3] += h
up = float(tsum(critic(x)).data)
x.data[0, 0, 3, 3] -= 2 * h
down = float(tsum(critic(x)).data)
x.data[0, 0, 3, 3] += h
print("analytic %.8f  numeric %.8f" % (gx.data[0, 0, 3, 3], (up - down) / (2 * h)))

# second-order: the gradient norm is itself differentiable
(gx,) = grad(tsum(critic(x)), [x], create_graph=True)
norm2 = tsum(gx * gx)
backward(norm2)
print("d|grad|^2/dW has shape", conv.weight.grad.shape)
