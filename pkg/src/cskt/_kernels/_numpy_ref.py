"""NumPy reference implementations of the hot kernels.

These are the fallback backend and the semantic reference for the compiled
core: same signatures, same in-place conventions. Shapes follow the kernel
contract documented in ``cskt._kernels``.
"""

import numpy as np


def relu_fwd(x):
    return np.maximum(x, 0.0)


def relu_bwd(x, g):
    return np.where(x > 0.0, g, 0.0)


def sigmoid_fwd(x):
    return 1.0 / (1.0 + np.exp(-x))


def sigmoid_bwd(y, g):
    return g * y * (1.0 - y)


def softmax_fwd(x):
    # x: (rows, n); softmax along axis 1 with max-subtraction.
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(y, g):
    s = (g * y).sum(axis=1, keepdims=True)
    return y * (g - s)


def layer_norm_fwd(x, gain, bias, eps):
    # x: (rows, n); gain, bias: (n,). Returns (y, xhat, inv_std).
    # overflow on wildly diverged inputs is reported downstream as non-finite
    with np.errstate(over="ignore", invalid="ignore"):
        mu = x.mean(axis=1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv_std
        y = xhat * gain + bias
    return y, xhat, inv_std[:, 0]


def layer_norm_bwd(g, xhat, inv_std, gain):
    # Returns (gx, ggain, gbias).
    n = xhat.shape[1]
    gxhat = g * gain
    t1 = gxhat.sum(axis=1, keepdims=True)
    t2 = (gxhat * xhat).sum(axis=1, keepdims=True)
    gx = (inv_std[:, None] / n) * (n * gxhat - t1 - xhat * t2)
    ggain = (g * xhat).sum(axis=0)
    gbias = g.sum(axis=0)
    return gx, ggain, gbias


def adamw_update(p, g, m, v, t, lr, beta1, beta2, eps, wd):
    # In-place decoupled-weight-decay adaptive update; t is the 1-based step.
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    p -= lr * ((m / bc1) / (np.sqrt(v / bc2) + eps) + wd * p)
