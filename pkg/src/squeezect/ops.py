"""Forward and backward kernels for the layer primitives.

All functions work on plain ``numpy`` arrays in (N, C, H, W) layout and keep the
dtype of their inputs, so the same code runs in float32 for training and in
float64 for gradient checks.
"""

from __future__ import annotations

import numba
import numpy as np


class ShapeError(ValueError):
    """Raised when tensor extents do not conform."""


def _check_rank4(x, what="input"):
    if x.ndim != 4:
        raise ShapeError(f"{what}: expected rank-4 (N, C, H, W) array, got shape {x.shape}")


def conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


# --------------------------------------------------------------------------
# im2col / col2im
# --------------------------------------------------------------------------

def im2col(x, kh, kw, stride=1, padding=0):
    """Unfold sliding windows into columns of shape (N, C*kh*kw, Ho*Wo)."""
    n, c, h, w = x.shape
    ho = conv_out_size(h, kh, stride, padding)
    wo = conv_out_size(w, kw, stride, padding)
    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        return x.reshape(n, c, h * w), ho, wo
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for u in range(kh):
        for v in range(kw):
            cols[:, :, u, v] = x[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride]
    return cols.reshape(n, c * kh * kw, ho * wo), ho, wo


def col2im(cols, shape, kh, kw, ho, wo, stride=1, padding=0):
    """Adjoint of :func:`im2col`: scatter-add columns back into an (N, C, H, W) array."""
    n, c, h, w = shape
    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        return cols.reshape(n, c, h, w)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    hp, wp = h + 2 * padding, w + 2 * padding
    # the padded buffer must cover every window even when the input is cropped
    hp = max(hp, (ho - 1) * stride + kh)
    wp = max(wp, (wo - 1) * stride + kw)
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for u in range(kh):
        for v in range(kw):
            out[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += cols[:, :, u, v]
    return out[:, :, padding:padding + h, padding:padding + w]


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def _check_conv(x, w, b):
    _check_rank4(x)
    if w.ndim != 4:
        raise ShapeError(f"weights: expected (Cout, Cin, kH, kW), got shape {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"channels: input has {x.shape[1]}, weights expect Cin={w.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"bias: expected length Cout={w.shape[0]}, got shape {b.shape}")


def conv2d_forward(x, w, b=None, stride=1, padding=0):
    """Cross-correlation ``y[n,o,i,j] = b[o] + sum w[o,c,u,v] * xpad[n,c,i*s+u,j*s+v]``.

    Returns ``(y, cols)``; ``cols`` is the unfolded input reused by the backward pass.
    """
    _check_conv(x, w, b)
    cout, _, kh, kw = w.shape
    ho = conv_out_size(x.shape[2], kh, stride, padding)
    wo = conv_out_size(x.shape[3], kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"height/width: kernel {kh}x{kw} does not fit input {x.shape[2]}x{x.shape[3]}")
    cols, ho, wo = im2col(x, kh, kw, stride, padding)
    y = np.matmul(w.reshape(cout, -1), cols)
    if b is not None:
        y += b[:, None]
    return y.reshape(x.shape[0], cout, ho, wo), cols


def conv2d_backward(x_shape, w, dy, cols, stride=1, padding=0, need_dx=True):
    """Gradients ``(dx, dw, db)`` of :func:`conv2d_forward`; ``dx`` is ``None`` unless ``need_dx``."""
    n, cout, ho, wo = dy.shape
    _, cin, kh, kw = w.shape
    exp_ho = conv_out_size(x_shape[2], kh, stride, padding)
    exp_wo = conv_out_size(x_shape[3], kw, stride, padding)
    if (n, cout, ho, wo) != (x_shape[0], w.shape[0], exp_ho, exp_wo):
        raise ShapeError(f"upstream gradient: expected {(x_shape[0], w.shape[0], exp_ho, exp_wo)}, got {dy.shape}")
    dyf = dy.reshape(n, cout, ho * wo)
    db = dyf.sum(axis=(0, 2))
    dw = np.matmul(dyf, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    if not need_dx:
        return None, dw, db
    dcols = np.matmul(w.reshape(cout, -1).T, dyf)
    dx = col2im(dcols, x_shape, kh, kw, ho, wo, stride, padding)
    return dx, dw, db


def conv2d_naive(x, w, b=None, stride=1, padding=0):
    """Direct sliding-window convolution, kept as a reference for the GEMM path."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = conv_out_size(h, kh, stride, padding)
    wo = conv_out_size(wd, kw, stride, padding)
    y = np.zeros((n, cout, ho, wo), dtype=np.result_type(x, w))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
            y[:, :, i, j] = np.tensordot(patch, w, axes=([1, 2, 3], [1, 2, 3]))
    if b is not None:
        y += b[None, :, None, None]
    return y


def conv_transpose_out_size(size, kernel, stride, padding):
    return (size - 1) * stride + kernel - 2 * padding


def conv_transpose2d_forward(x, w, b=None, stride=1, padding=0):
    """Transposed convolution, the adjoint of :func:`conv2d_forward` with weights ``w``.

    ``w`` keeps the layout of the convolution it transposes, (Cconv_out, Cconv_in, k, k),
    so an input with ``w.shape[0]`` channels is mapped to ``w.shape[1]`` channels.
    ``b`` has one entry per output channel.
    """
    _check_rank4(x)
    if w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"channels: input has {x.shape[1]}, weights expect {w.shape[0]}")
    cin, cout, kh, kw = w.shape
    n, _, h, wd = x.shape
    ho = conv_transpose_out_size(h, kh, stride, padding)
    wo = conv_transpose_out_size(wd, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"height/width: transposed output extent {ho}x{wo} is not positive")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"bias: expected length {cout}, got shape {b.shape}")
    xf = x.reshape(n, cin, h * wd)
    cols = np.matmul(w.reshape(cin, -1).T, xf)
    y = col2im(cols, (n, cout, ho, wo), kh, kw, h, wd, stride, padding)
    if b is not None:
        y = y + b[None, :, None, None]
    return np.ascontiguousarray(y)


def conv_transpose2d_backward(x, w, dy, stride=1, padding=0):
    cin, cout, kh, kw = w.shape
    n, _, h, wd = x.shape
    dcols, ho, wo = im2col(dy, kh, kw, stride, padding)
    if (ho, wo) != (h, wd):
        raise ShapeError(f"upstream gradient: shape {dy.shape} does not match input {x.shape}")
    xf = x.reshape(n, cin, h * wd)
    dx = np.matmul(w.reshape(cin, -1), dcols).reshape(x.shape)
    dw = np.matmul(xf, dcols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    db = dy.sum(axis=(0, 2, 3))
    return dx, dw, db


# --------------------------------------------------------------------------
# normalization and activations
# --------------------------------------------------------------------------

def batchnorm_forward(x, gamma, beta, running_mean, running_var, training,
                      eps=1e-5, momentum=0.9):
    """Per-channel batch normalization.

    In training mode ``running_mean``/``running_var`` are updated in place with
    ``running = momentum * running + (1 - momentum) * batch``.
    Returns ``(y, cache)``; ``cache`` is ``None`` in inference mode.
    """
    _check_rank4(x)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"channels: input has {c}, parameters have {gamma.shape[0]}")
    m = x.shape[0] * x.shape[2] * x.shape[3]
    if m == 0:
        raise ShapeError("batch: no elements to normalize")
    if training:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * unbiased
        y = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
        return y, (xhat, inv_std)
    inv_std = 1.0 / np.sqrt(running_var + eps)
    scale = (gamma * inv_std).astype(x.dtype)
    shift = (beta - running_mean * gamma * inv_std).astype(x.dtype)
    return x * scale[None, :, None, None] + shift[None, :, None, None], None


def batchnorm_backward(dy, gamma, cache):
    xhat, inv_std = cache
    m = dy.shape[0] * dy.shape[2] * dy.shape[3]
    dbeta = dy.sum(axis=(0, 2, 3))
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dxhat_sum = dbeta * gamma
    dxhat_xhat_sum = dgamma * gamma
    dx = (dy * gamma[None, :, None, None]
          - (dxhat_sum[None, :, None, None] + xhat * dxhat_xhat_sum[None, :, None, None]) / m)
    dx *= inv_std[None, :, None, None]
    return dx, dgamma, dbeta


def elu(x, alpha=1.0):
    """``x`` for positive inputs, ``alpha * (exp(x) - 1)`` otherwise."""
    y = np.minimum(x, 0)
    np.exp(y, out=y)
    y -= 1
    if alpha != 1.0:
        y *= alpha
    if alpha <= 1.0:
        # alpha * (exp(x) - 1) >= x for x <= 0 whenever alpha <= 1
        return np.maximum(y, x, out=y)
    return np.where(x > 0, x, y)


def elu_backward(y, dy, alpha=1.0):
    """Gradient from the ELU *output* ``y``; ``y > 0`` exactly where ``x > 0``."""
    if alpha == 1.0:
        g = np.minimum(y, 0)
        g += 1
    else:
        g = np.where(y > 0, 1, y + alpha).astype(dy.dtype)
    g *= dy
    return g


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, dy):
    return dy * (x > 0)


# --------------------------------------------------------------------------
# pooling, concatenation, dense head
# --------------------------------------------------------------------------

@numba.njit(cache=True)
def _maxpool_kernel(x, window, stride, padding, ho, wo, with_argmax):
    n, c, h, w = x.shape
    y = np.empty((n, c, ho, wo), dtype=x.dtype)
    arg = np.empty((n, c, ho, wo) if with_argmax else (0, 0, 0, 0), dtype=np.int64)
    for b in range(n):
        for ch in range(c):
            plane = (b * c + ch) * h * w
            for i in range(ho):
                r0 = i * stride - padding
                for j in range(wo):
                    c0 = j * stride - padding
                    best = -np.inf
                    best_idx = -1
                    for u in range(window):
                        r = r0 + u
                        if r < 0 or r >= h:
                            continue
                        for v in range(window):
                            cc = c0 + v
                            if cc < 0 or cc >= w:
                                continue
                            val = x[b, ch, r, cc]
                            # strict comparison keeps the first maximum in scan order
                            if val > best or best_idx < 0:
                                best = val
                                best_idx = r * w + cc
                    y[b, ch, i, j] = best
                    if with_argmax:
                        arg[b, ch, i, j] = plane + best_idx
    return y, arg


@numba.njit(cache=True)
def _scatter_add(index, values, size):
    out = np.zeros(size, dtype=values.dtype)
    for k in range(index.size):
        out[index[k]] += values[k]
    return out


def maxpool2d_forward(x, window, stride, padding=0, with_argmax=True):
    """Max pooling; returns ``(y, argmax)`` with ``argmax`` the flat index into ``x``.

    Padding never wins. Ties go to the first maximum in row-major scan order.
    """
    _check_rank4(x)
    n, c, h, w = x.shape
    if window > h + 2 * padding or window > w + 2 * padding:
        raise ShapeError(f"height/width: window {window} larger than input {h}x{w}")
    if padding >= window:
        raise ShapeError(f"padding {padding} must be smaller than window {window}")
    ho = conv_out_size(h, window, stride, padding)
    wo = conv_out_size(w, window, stride, padding)
    y, arg = _maxpool_kernel(np.ascontiguousarray(x), window, stride, padding, ho, wo, with_argmax)
    return y, (arg if with_argmax else None)


def maxpool2d_backward(x_shape, dy, arg):
    """Route ``dy`` to the recorded maxima; overlapping windows accumulate."""
    dx = _scatter_add(arg.ravel(), np.ascontiguousarray(dy).ravel(), int(np.prod(x_shape)))
    return dx.reshape(x_shape)


def concat_depth(xs):
    if not xs:
        raise ShapeError("concat: no inputs")
    for x in xs:
        _check_rank4(x)
    ref = xs[0].shape
    for i, x in enumerate(xs[1:], 1):
        if x.shape[0] != ref[0] or x.shape[2:] != ref[2:]:
            raise ShapeError(f"height/width: concat input {i} has shape {x.shape}, expected (N,H,W) of {ref}")
    if len(xs) == 1:
        return xs[0]
    return np.concatenate(xs, axis=1)


def concat_depth_backward(dy, channels):
    splits = np.cumsum(channels)[:-1]
    return np.split(dy, splits, axis=1)


def global_avg_pool(x):
    _check_rank4(x)
    return x.mean(axis=(2, 3), keepdims=True)


def global_avg_pool_backward(x_shape, dy):
    h, w = x_shape[2:]
    return np.broadcast_to(dy / (h * w), x_shape).copy()


def dense_forward(x, w, b):
    """``y = x @ w.T + b`` for a batch of row vectors ``x`` (N, D) and ``w`` (K, D)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"dense: input {x.shape}, weights {w.shape}, bias {b.shape} do not conform")
    return x @ w.T + b


def dense_backward(x, w, dy):
    return dy @ w, dy.T @ x, dy.sum(axis=0)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood and its gradient with respect to ``logits``."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels: expected {n} entries, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsum - z[rows, labels]))
    d = np.exp(z - logsum[:, None])
    d[rows, labels] -= 1
    return loss, d / n
