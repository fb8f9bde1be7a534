"""Differentiable primitives (NCHW layout)."""
import numpy as np

from . import kernels
from .tensor import ShapeError, Tensor, accumulate, make_node

BN_EPS = 1e-5
BN_MOMENTUM = 0.99


def _check_4d(x, what):
    if x.data.ndim != 4:
        raise ShapeError(f"{what}: expected a 4D (B, C, H, W) tensor, got shape {x.shape}")


def out_size(n, k, stride):
    pad = k // 2
    return (n + 2 * pad - k) // stride + 1


def conv2d(x, w, b=None, stride=1, groups=1):
    """Zero same-padded 2D convolution; ``w`` has shape ``(F, C // groups, k, k)``."""
    _check_4d(x, "conv2d")
    B, C, H, W = x.shape
    F, cg, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got weight shape {w.shape}")
    if cg * groups != C or F % groups:
        raise ShapeError(f"conv2d: input shape {x.shape} does not match weight shape {w.shape} (groups={groups})")
    pad = k // 2
    ho, wo = out_size(H, k, stride), out_size(W, k, stride)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input shape {x.shape} too small for weight shape {w.shape}")
    N = B * ho * wo
    # pixel-major columns: (N, C*k*k)
    if k == 1 and stride == 1:
        cols = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(N, C)
    else:
        cols = kernels.im2col(x.data, k, stride, pad, ho, wo)
    fg, rows = F // groups, cg * k * k
    wmat = w.data.reshape(groups, fg, rows)
    if groups == 1:
        out2 = cols @ wmat[0].T
    else:
        colsg = cols.reshape(N, groups, rows).transpose(1, 0, 2)
        out2 = np.matmul(colsg, wmat.transpose(0, 2, 1)).transpose(1, 0, 2).reshape(N, F)
    if b is not None:
        out2 += b.data
    out = out2.reshape(B, ho, wo, F).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(N, F)
        if b is not None:
            accumulate(b, g2.sum(axis=0))
        if groups == 1:
            if w.requires_grad:
                accumulate(w, (g2.T @ cols).reshape(w.shape))
            if x.requires_grad:
                dcols = g2 @ wmat[0]
        else:
            gg = g2.reshape(N, groups, fg).transpose(1, 0, 2)
            if w.requires_grad:
                accumulate(w, np.matmul(gg.transpose(0, 2, 1), colsg).reshape(w.shape))
            if x.requires_grad:
                dcols = np.matmul(gg, wmat).transpose(1, 0, 2).reshape(N, C * k * k)
        if x.requires_grad:
            if k == 1 and stride == 1:
                dx = dcols.reshape(B, H, W, C).transpose(0, 3, 1, 2)
            else:
                dx = kernels.col2im(dcols, B, C, H, W, k, stride, pad, ho, wo)
            accumulate(x, dx)

    parents = (x, w) if b is None else (x, w, b)
    return make_node(out, parents, backward)


def relu(x):
    mask = x.data > 0
    out = x.data * mask

    def backward(g):
        accumulate(x, g * mask)

    return make_node(out, (x,), backward)


def batchnorm(x, gamma, beta, running_mean, running_var, training, momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel batch normalization.

    ``running_mean`` / ``running_var`` are numpy arrays updated in place when
    ``training`` is true.
    """
    _check_4d(x, "batchnorm")
    xd = x.data
    shape = (1, -1, 1, 1)
    if training:
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * var
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.reshape(shape).astype(xd.dtype)) * inv_std.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)
    m = xd.shape[0] * xd.shape[2] * xd.shape[3]

    def backward(g):
        accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        accumulate(beta, g.sum(axis=(0, 2, 3)))
        if not x.requires_grad:
            return
        dxhat = g * gamma.data.reshape(shape)
        if training:
            s1 = dxhat.sum(axis=(0, 2, 3)).reshape(shape)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(shape)
            dx = (inv_std.reshape(shape) / m) * (m * dxhat - s1 - xhat * s2)
        else:
            dx = dxhat * inv_std.reshape(shape)
        accumulate(x, dx)

    return make_node(out, (x, gamma, beta), backward)


def interp_matrix(n_in, n_out, dtype=np.float64):
    """Corner-aligned linear interpolation matrix of shape ``(n_out, n_in)``."""
    R = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1 or n_out == 1:
        R[:, 0] = 1.0
        return R.astype(dtype)
    src = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    frac = src - i0
    i1 = np.minimum(i0 + 1, n_in - 1)
    rows = np.arange(n_out)
    np.add.at(R, (rows, i0), 1.0 - frac)
    np.add.at(R, (rows, i1), frac)
    return R.astype(dtype)


def _apply_separable(a, ry, rx):
    # out[..., Y, X] = sum_{h, w} ry[Y, h] a[..., h, w] rx[X, w], as two 2D GEMMs
    lead = a.shape[:-2]
    h, w = a.shape[-2:]
    t = a.reshape(-1, w) @ rx.T  # (..., h, X)
    t = np.ascontiguousarray(t.reshape(-1, h, rx.shape[0]).transpose(0, 2, 1)).reshape(-1, h) @ ry.T
    return t.reshape(*lead, rx.shape[0], ry.shape[0]).swapaxes(-1, -2)


def resize_array(a, out_h, out_w):
    """Bilinear (corner-aligned) resize of the last two axes of a numpy array."""
    h, w = a.shape[-2:]
    if (h, w) == (out_h, out_w):
        return a
    ry = interp_matrix(h, out_h, a.dtype)
    rx = interp_matrix(w, out_w, a.dtype)
    return _apply_separable(a, ry, rx)


def bilinear_resize(x, out_h, out_w):
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bilinear_resize: output size must be positive, got {(out_h, out_w)}")
    _check_4d(x, "bilinear_resize")
    h, w = x.shape[2:]
    if (h, w) == (out_h, out_w):
        return x
    ry = interp_matrix(h, out_h, x.dtype)
    rx = interp_matrix(w, out_w, x.dtype)
    out = _apply_separable(x.data, ry, rx)

    def backward(g):
        accumulate(x, _apply_separable(g, ry.T, rx.T))

    return make_node(out, (x,), backward)


def concat_channels(xs):
    if len(xs) == 1:
        return xs[0]
    ref = xs[0].shape
    for t in xs[1:]:
        if t.data.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: shape {t.shape} incompatible with {ref}")
    sizes = [t.shape[1] for t in xs]
    out = np.concatenate([t.data for t in xs], axis=1)

    def backward(g):
        start = 0
        for t, c in zip(xs, sizes):
            if t.requires_grad:
                accumulate(t, g[:, start : start + c])
            start += c

    return make_node(out, xs, backward)


def split_channels(x, size):
    """Split along channels into equal chunks of ``size`` channels."""
    C = x.shape[1]
    if C % size:
        raise ShapeError(f"split_channels: {C} channels not divisible by {size}")
    outs = []
    for start in range(0, C, size):
        sl = slice(start, start + size)

        def backward(g, sl=sl):
            full = np.zeros_like(x.data)
            full[:, sl] = g
            accumulate(x, full)

        outs.append(make_node(x.data[:, sl], (x,), backward))
    return outs


def add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        accumulate(a, g)
        accumulate(b, g)

    return make_node(a.data + b.data, (a, b), backward)


def scale(lam, x):
    """``lam * x`` with ``lam`` a one-element trainable tensor."""
    s = lam.data.reshape(())

    def backward(g):
        accumulate(x, g * s)
        accumulate(lam, np.asarray((g * x.data).sum(), dtype=lam.dtype).reshape(lam.shape))

    return make_node(x.data * s, (lam, x), backward)


STRATEGIES = ("trainable", "add", "replace")


def residual_mix(f, delta, strategy, lam=None):
    """Combine old features ``f`` with an update ``delta``.

    trainable: ``f + lam * delta``; add: ``f + delta``; replace: ``delta``.
    """
    if f.shape != delta.shape:
        raise ShapeError(f"residual_mix: shape mismatch {f.shape} vs {delta.shape}")
    if strategy == "trainable":
        if lam is None:
            raise ValueError("residual_mix: trainable strategy needs a lambda parameter")
        return add(f, scale(lam, delta))
    if strategy == "add":
        return add(f, delta)
    if strategy == "replace":
        return delta
    raise ValueError(f"residual_mix: unknown strategy {strategy!r}; expected one of {STRATEGIES}")


def sum_all(x):
    def backward(g):
        accumulate(x, np.broadcast_to(g, x.shape).astype(x.dtype))

    return make_node(np.asarray(x.data.sum()), (x,), backward)


def weighted_sum(x, weights):
    """Scalar ``sum(x * weights)`` with constant ``weights``."""

    def backward(g):
        accumulate(x, g * weights)

    return make_node(np.asarray((x.data * weights).sum()), (x,), backward)


def constant(a):
    return Tensor(np.asarray(a))
