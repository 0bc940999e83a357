"""Shared oracles for the test suite: finite differences and small fixtures."""

import numpy as np

from squeezect import ops


def numeric_grad(f, x, h=1e-6):
    """Central differences of scalar ``f`` with respect to every entry of ``x`` (modified in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


# Each case returns (inputs, scalar loss closure, analytic grads) for a probe vector r.

def conv_case(rng):
    n, cin, cout = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    k = int(rng.choice([1, 2, 3]))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    size = int(rng.integers(k + 1, 7))
    x = rng.standard_normal((n, cin, size, size))
    w = rng.standard_normal((cout, cin, k, k))
    b = rng.standard_normal(cout)
    y, cols = ops.conv2d_forward(x, w, b, stride, pad)
    r = rng.standard_normal(y.shape)
    dx, dw, db = ops.conv2d_backward(x.shape, w, r, cols, stride, pad)
    loss = lambda: float(np.sum(ops.conv2d_forward(x, w, b, stride, pad)[0] * r))
    return {"x": (x, dx), "w": (w, dw), "b": (b, db)}, loss


def conv_transpose_case(rng):
    n, cin, cout = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    k = int(rng.choice([2, 3, 4]))
    stride = int(rng.integers(1, k + 1))
    size = int(rng.integers(1, 4))
    x = rng.standard_normal((n, cin, size, size))
    w = rng.standard_normal((cin, cout, k, k))
    b = rng.standard_normal(cout)
    y = ops.conv_transpose2d_forward(x, w, b, stride)
    r = rng.standard_normal(y.shape)
    dx, dw, db = ops.conv_transpose2d_backward(x, w, r, stride)
    loss = lambda: float(np.sum(ops.conv_transpose2d_forward(x, w, b, stride) * r))
    return {"x": (x, dx), "w": (w, dw), "b": (b, db)}, loss


def batchnorm_case(rng):
    n, c, s = int(rng.integers(2, 4)), int(rng.integers(1, 4)), int(rng.integers(2, 4))
    x = rng.standard_normal((n, c, s, s)) * 2 + 1
    gamma = rng.standard_normal(c)
    beta = rng.standard_normal(c)

    def fwd():
        return ops.batchnorm_forward(x, gamma, beta, np.zeros(c), np.ones(c), True)

    y, cache = fwd()
    r = rng.standard_normal(y.shape)
    dx, dg, db = ops.batchnorm_backward(r, gamma, cache)
    loss = lambda: float(np.sum(fwd()[0] * r))
    return {"x": (x, dx), "gamma": (gamma, dg), "beta": (beta, db)}, loss


def _away_from_zero(rng, shape, margin=1e-2):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, margin * np.sign(x + 1e-300) + x, x)


def elu_case(rng):
    x = _away_from_zero(rng, (2, 3, 4, 4))
    y = ops.elu(x)
    r = rng.standard_normal(y.shape)
    dx = ops.elu_backward(y, r)
    return {"x": (x, dx)}, lambda: float(np.sum(ops.elu(x) * r))


def relu_case(rng):
    x = _away_from_zero(rng, (2, 3, 4, 4))
    r = rng.standard_normal(x.shape)
    dx = ops.relu_backward(x, r)
    return {"x": (x, dx)}, lambda: float(np.sum(ops.relu(x) * r))


def maxpool_case(rng):
    n, c = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    size = int(rng.integers(4, 8))
    window, stride, pad = 3, 2, int(rng.integers(0, 2))
    # distinct values spaced far beyond the probe step keep the argmax stable
    x = rng.permutation(n * c * size * size).reshape(n, c, size, size) * 0.1
    x = x.astype(np.float64)
    y, arg = ops.maxpool2d_forward(x, window, stride, pad)
    r = rng.standard_normal(y.shape)
    dx = ops.maxpool2d_backward(x.shape, r, arg)
    return {"x": (x, dx)}, lambda: float(np.sum(ops.maxpool2d_forward(x, window, stride, pad)[0] * r))


def gap_case(rng):
    x = rng.standard_normal((int(rng.integers(1, 3)), 3, int(rng.integers(1, 5)), 4))
    y = ops.global_avg_pool(x)
    r = rng.standard_normal(y.shape)
    dx = ops.global_avg_pool_backward(x.shape, r)
    return {"x": (x, dx)}, lambda: float(np.sum(ops.global_avg_pool(x) * r))


def dense_case(rng):
    n, d, k = int(rng.integers(1, 4)), int(rng.integers(1, 6)), int(rng.integers(1, 4))
    x, w, b = rng.standard_normal((n, d)), rng.standard_normal((k, d)), rng.standard_normal(k)
    r = rng.standard_normal((n, k))
    dx, dw, db = ops.dense_backward(x, w, r)
    loss = lambda: float(np.sum(ops.dense_forward(x, w, b) * r))
    return {"x": (x, dx), "w": (w, dw), "b": (b, db)}, loss


def softmax_ce_case(rng):
    n, k = int(rng.integers(1, 5)), int(rng.integers(2, 5))
    logits = rng.standard_normal((n, k)) * 3
    labels = rng.integers(0, k, n)
    _, d = ops.softmax_cross_entropy(logits, labels)
    return {"logits": (logits, d)}, lambda: ops.softmax_cross_entropy(logits, labels)[0]


GRAD_CASES = {
    "conv": conv_case,
    "conv_transpose": conv_transpose_case,
    "batchnorm": batchnorm_case,
    "elu": elu_case,
    "relu": relu_case,
    "maxpool": maxpool_case,
    "gap": gap_case,
    "dense": dense_case,
    "softmax_ce": softmax_ce_case,
}


def gradcheck(case, seed):
    """Worst relative error over every differentiable input of one random instance."""
    rng = np.random.default_rng(seed)
    tensors, loss = case(rng)
    return max(rel_error(analytic, numeric_grad(loss, value)) for value, analytic in tensors.values())
