"""Neural-network primitives on top of the autodiff tensor core.

Convolutions run as one BLAS contraction over an ``as_strided`` patch view
(im2col); their backward recomputes the patch view from the saved padded
input instead of keeping the large column matrix alive.  Softmax and the
norms are numerically stabilized: softmax subtracts the row max, norms floor
the variance at 1e-12.
"""

from __future__ import annotations

import threading

import numpy as np
from scipy.special import erf

from .errors import ConfigurationError, ContractError, DimensionError
from .tensor import Tensor, _needs_grad, _send, _wrap

_VAR_FLOOR = 1e-12
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _conv_geometry(h: int, w: int, kh: int, kw: int, stride: int, padding: int):
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    num = h + 2 * padding - kh
    if num % stride != 0 or (w + 2 * padding - kw) % stride != 0:
        raise ConfigurationError(
            f"conv output extent not integral: input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}")
    return num // stride + 1, (w + 2 * padding - kw) // stride + 1


def _fill_columns(xp: np.ndarray, kh: int, kw: int, stride: int,
                  ho: int, wo: int) -> np.ndarray:
    """Channels-first column matrix (C*kh*kw, B*Ho*Wo) via kh*kw block copies."""
    b_sz, c = xp.shape[0], xp.shape[1]
    cols = np.empty((c, kh, kw, b_sz, ho, wo))
    xpt = xp.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xpt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(c * kh * kw, b_sz * ho * wo)


def conv2d(x: Tensor, k: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (B,C,H,W) with kernels (O,C,kh,kw)."""
    x, k = _wrap(x), _wrap(k)
    if x.ndim != 4 or k.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input/kernel, got {x.shape}, {k.shape}")
    b_sz, c, h, w = x.shape
    o, kc, kh, kw = k.shape
    if kc != c:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs kernel {k.shape}")
    ho, wo = _conv_geometry(h, w, kh, kw, stride, padding)

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = _fill_columns(xp, kh, kw, stride, ho, wo)
    kmat = k.data.reshape(o, c * kh * kw)
    out = np.ascontiguousarray(
        (kmat @ cols).reshape(o, b_sz, ho, wo).transpose(1, 0, 2, 3))
    if bias is not None:
        out += bias.data.reshape(1, o, 1, 1)

    parents = (x, k) if bias is None else (x, k, bias)

    def backward_fn(g):
        g2d = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, b_sz * ho * wo)
        cols_b = _fill_columns(xp, kh, kw, stride, ho, wo)
        _send(k, (g2d @ cols_b.T).reshape(o, c, kh, kw))
        dcols = (kmat.T @ g2d).reshape(c, kh, kw, b_sz, ho, wo)
        dxpt = np.zeros((c,) + xp.shape[:1] + xp.shape[2:])
        for i in range(kh):
            for j in range(kw):
                dxpt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    dcols[:, i, j]
        dxp = dxpt.transpose(1, 0, 2, 3)
        if padding:
            dxp = dxp[:, :, padding:padding + h, padding:padding + w]
        _send(x, np.ascontiguousarray(dxp))
        if bias is not None:
            _send(bias, g.sum(axis=(0, 2, 3)))

    return Tensor.from_op(out, parents, backward_fn)


def depthwise_conv2d(x: Tensor, k: Tensor, bias: Tensor | None = None,
                     stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel convolution: channel c sees only kernel slice (c,0,:,:)."""
    x, k = _wrap(x), _wrap(k)
    if x.ndim != 4 or k.ndim != 4 or k.shape[1] != 1:
        raise DimensionError(
            f"depthwise_conv2d expects (B,C,H,W) and (C,1,kh,kw), got {x.shape}, {k.shape}")
    b_sz, c, h, w = x.shape
    kc, _, kh, kw = k.shape
    if kc != c:
        raise DimensionError(f"depthwise channel mismatch: input {x.shape} vs kernel {k.shape}")
    ho, wo = _conv_geometry(h, w, kh, kw, stride, padding)

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    kern = k.data[:, 0]
    out = np.zeros((b_sz, c, ho, wo))
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] * \
                kern[None, :, i, j, None, None]
    if bias is not None:
        out += bias.data.reshape(1, c, 1, 1)

    parents = (x, k) if bias is None else (x, k, bias)

    def backward_fn(g):
        dk = np.zeros_like(kern)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
                dk[:, i, j] = (g * patch).sum(axis=(0, 2, 3))
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    g * kern[None, :, i, j, None, None]
        if padding:
            dxp_c = dxp[:, :, padding:padding + h, padding:padding + w]
        else:
            dxp_c = dxp
        _send(x, dxp_c)
        _send(k, dk[:, None])
        if bias is not None:
            _send(bias, g.sum(axis=(0, 2, 3)))

    return Tensor.from_op(out, parents, backward_fn)


# ---------------------------------------------------------------------------
# channels-last fast path (used inside the denoisers; same math as above)
# ---------------------------------------------------------------------------

_SCRATCH = threading.local()


def _scratch(tag: str, shape: tuple[int, ...]) -> np.ndarray:
    """Reusable per-thread work buffer; valid only until the next same-tag call.

    Only for temporaries consumed before the op returns - graph data must own
    its storage.
    """
    pool = getattr(_SCRATCH, "pool", None)
    if pool is None:
        pool = _SCRATCH.pool = {}
    buf = pool.get(tag)
    size = int(np.prod(shape))
    if buf is None or buf.size < size:
        buf = pool[tag] = np.empty(size)
    return buf[:size].reshape(shape)


def conv2d_nhwc(x: Tensor, k: Tensor, bias: Tensor | None = None,
                stride: int = 1, padding: int = 0) -> Tensor:
    """conv2d on (B,H,W,C) activations; kernels stay canonical (O,C,kh,kw).

    Channels-last makes every im2col block copy contiguous over C, which is
    what the training loop spends most of its time on in NCHW.
    """
    x, k = _wrap(x), _wrap(k)
    b_sz, h, w, c = x.shape
    o, kc, kh, kw = k.shape
    if kc != c:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs kernel {k.shape}")
    ho, wo = _conv_geometry(h, w, kh, kw, stride, padding)
    if padding:
        xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    else:
        xp = x.data

    def fill():
        cols = _scratch("conv_cols", (b_sz, ho, wo, kh, kw, c))
        for i in range(kh):
            for j in range(kw):
                cols[:, :, :, i, j, :] = \
                    xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
        return cols.reshape(b_sz * ho * wo, kh * kw * c)

    kmat = np.ascontiguousarray(k.data.transpose(2, 3, 1, 0)).reshape(kh * kw * c, o)
    out = (fill() @ kmat).reshape(b_sz, ho, wo, o)
    if bias is not None:
        out += bias.data

    parents = (x, k) if bias is None else (x, k, bias)

    def backward_fn(g):
        g2d = g.reshape(b_sz * ho * wo, o)
        if _needs_grad(k):
            _send(k, np.ascontiguousarray(
                (fill().T @ g2d).reshape(kh, kw, c, o).transpose(3, 2, 0, 1)))
        if _needs_grad(x):
            if stride == 1:
                # dX is itself a correlation: pad g by (k-1-p) and run the
                # flipped/transposed kernel through the same fill+gemm path.
                gp = np.pad(g, ((0, 0), (kh - 1 - padding, kh - 1 - padding),
                                (kw - 1 - padding, kw - 1 - padding), (0, 0)))
                gcols = _scratch("conv_gcols", (b_sz, h, w, kh, kw, o))
                for i in range(kh):
                    for j in range(kw):
                        gcols[:, :, :, i, j, :] = gp[:, i:i + h, j:j + w, :]
                kflip = np.ascontiguousarray(
                    k.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1)).reshape(
                        kh * kw * o, c)
                dx = (gcols.reshape(b_sz * h * w, kh * kw * o) @ kflip).reshape(
                    b_sz, h, w, c)
                _send(x, dx)
            else:
                dcols_flat = _scratch("conv_dcols", (b_sz * ho * wo, kh * kw * c))
                np.matmul(g2d, kmat.T, out=dcols_flat)
                dcols = dcols_flat.reshape(b_sz, ho, wo, kh, kw, c)
                if padding:
                    dxp = _scratch("conv_dxp", xp.shape)
                    dxp[:] = 0.0
                else:
                    dxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, i:i + stride * ho:stride,
                            j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
                if padding:
                    dxp = np.ascontiguousarray(
                        dxp[:, padding:padding + h, padding:padding + w, :])
                _send(x, dxp)
        if bias is not None:
            _send(bias, g.sum(axis=(0, 1, 2)))

    return Tensor.from_op(out, parents, backward_fn)


def depthwise_conv2d_nhwc(x: Tensor, k: Tensor, bias: Tensor | None = None,
                          stride: int = 1, padding: int = 0) -> Tensor:
    """depthwise_conv2d on (B,H,W,C); kernels canonical (C,1,kh,kw)."""
    x, k = _wrap(x), _wrap(k)
    b_sz, h, w, c = x.shape
    kc, _, kh, kw = k.shape
    if kc != c:
        raise DimensionError(f"depthwise channel mismatch: input {x.shape} vs kernel {k.shape}")
    ho, wo = _conv_geometry(h, w, kh, kw, stride, padding)
    if padding:
        xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    else:
        xp = x.data
    kern = k.data[:, 0]
    out = np.zeros((b_sz, ho, wo, c))
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] * \
                kern[:, i, j]
    if bias is not None:
        out += bias.data

    parents = (x, k) if bias is None else (x, k, bias)

    def backward_fn(g):
        dk = np.zeros_like(kern)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
                dk[:, i, j] = (g * patch).sum(axis=(0, 1, 2))
                dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += \
                    g * kern[:, i, j]
        if padding:
            dxp = np.ascontiguousarray(dxp[:, padding:padding + h, padding:padding + w, :])
        _send(x, dxp)
        _send(k, dk[:, None])
        if bias is not None:
            _send(bias, g.sum(axis=(0, 1, 2)))

    return Tensor.from_op(out, parents, backward_fn)


def pad2d_replicate_nhwc(x: Tensor, pad: int) -> Tensor:
    """Edge-replicating pad of the two middle axes of (B,H,W,C)."""
    x = _wrap(x)
    out = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)), mode="edge")

    def _fold(g, axis):
        n = g.shape[axis]
        index = [slice(None)] * g.ndim

        def take(a, b):
            index[axis] = slice(a, b)
            return g[tuple(index)]

        first = take(0, pad + 1).sum(axis=axis, keepdims=True)
        last = take(n - pad - 1, n).sum(axis=axis, keepdims=True)
        return np.concatenate([first, take(pad + 1, n - pad - 1), last], axis=axis)

    def backward_fn(g):
        _send(x, _fold(_fold(g, 1), 2))

    return Tensor.from_op(out, (x,), backward_fn)


def group_norm_nhwc(x: Tensor, groups: int, gain: Tensor, bias: Tensor) -> Tensor:
    """group_norm on (B,H,W,C) with per-channel affine.

    Group moments come from single-pass einsum reductions (no squared
    temporary), which matters on the memory-bound training path.
    """
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    b, h, w, c = x.shape
    if c % groups:
        raise ConfigurationError(f"groups {groups} does not divide channels {c}")
    n = h * w * (c // groups)
    xg = x.data.reshape(b, h * w, groups, c // groups)
    s1 = np.einsum("blgd->bg", xg)
    s2 = np.einsum("blgd,blgd->bg", xg, xg)
    mean = (s1 / n)[:, None, :, None]
    var = (s2 / n)[:, None, :, None] - mean * mean
    live = var > _VAR_FLOOR
    inv_std = 1.0 / np.sqrt(np.maximum(var, _VAR_FLOOR))
    xhat = ((xg - mean) * inv_std).reshape(b, h, w, c)
    out = xhat * gain.data + bias.data

    def backward_fn(g):
        gh = (g * gain.data).reshape(b, h * w, groups, c // groups)
        xh = xhat.reshape(b, h * w, groups, c // groups)
        gh_mean = (np.einsum("blgd->bg", gh) / n)[:, None, :, None]
        mix = (np.einsum("blgd,blgd->bg", gh, xh) / n)[:, None, :, None]
        dx = inv_std * (gh - gh_mean - xh * (mix * live))
        _send(x, dx.reshape(b, h, w, c))
        _send(gain, np.einsum("bhwc,bhwc->c", g, xhat))
        _send(bias, g.sum(axis=(0, 1, 2)))

    return Tensor.from_op(out, (x, gain, bias), backward_fn)


def upsample_nearest2x_nhwc(x: Tensor) -> Tensor:
    x = _wrap(x)
    b, h, w, c = x.shape
    out = x.data.repeat(2, axis=1).repeat(2, axis=2)

    def backward_fn(g):
        _send(x, g.reshape(b, h, 2, w, 2, c).sum(axis=(2, 4)))

    return Tensor.from_op(out, (x,), backward_fn)


def pad2d_replicate(x: Tensor, pad: int) -> Tensor:
    """Edge-replicating pad of the two trailing axes; keeps constant fields constant."""
    x = _wrap(x)
    if x.ndim != 4:
        raise DimensionError(f"pad2d_replicate expects 4-d input, got {x.shape}")
    if x.shape[-1] <= pad or x.shape[-2] <= pad:
        raise DimensionError(f"pad {pad} too large for input {x.shape}")
    out = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="edge")

    def _fold(g, axis):
        n = g.shape[axis]
        index = [slice(None)] * g.ndim

        def take(a, b):
            index[axis] = slice(a, b)
            return g[tuple(index)]

        first = take(0, pad + 1).sum(axis=axis, keepdims=True)
        last = take(n - pad - 1, n).sum(axis=axis, keepdims=True)
        mid = take(pad + 1, n - pad - 1)
        return np.concatenate([first, mid, last], axis=axis)

    def backward_fn(g):
        _send(x, _fold(_fold(g, -2), -1))

    return Tensor.from_op(out, (x,), backward_fn)


def upsample_nearest2x(x: Tensor) -> Tensor:
    x = _wrap(x)
    if x.ndim != 4:
        raise DimensionError(f"upsample_nearest2x expects 4-d input, got {x.shape}")
    b, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward_fn(g):
        _send(x, g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)))

    return Tensor.from_op(out, (x,), backward_fn)


# ---------------------------------------------------------------------------
# normalization and activations
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Shift-stabilized softmax along ``axis``; rows sum to one."""
    x = _wrap(x)
    if x.shape[axis] == 0:
        raise DimensionError(f"softmax over zero-length axis {axis} of {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        _send(x, y * (g - inner))

    return Tensor.from_op(y, (x,), backward_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, axis: int = -1) -> Tensor:
    """Normalize ``axis`` to zero mean / unit variance, then apply affine.

    Variance is floored at 1e-12, so constant slices map to ``bias``.
    """
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    if x.shape[axis] == 0:
        raise DimensionError(f"layer_norm over zero-length axis {axis} of {x.shape}")
    mean = x.data.mean(axis=axis, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=axis, keepdims=True)
    live = var > _VAR_FLOOR
    inv_std = 1.0 / np.sqrt(np.maximum(var, _VAR_FLOOR))
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def backward_fn(g):
        gh = g * gain.data
        term = xhat * ((gh * xhat).mean(axis=axis, keepdims=True) * live)
        _send(x, inv_std * (gh - gh.mean(axis=axis, keepdims=True) - term))
        from .tensor import _unbroadcast
        _send(gain, _unbroadcast(g * xhat, gain.shape))
        _send(bias, _unbroadcast(g, bias.shape))

    return Tensor.from_op(out, (x, gain, bias), backward_fn)


def group_norm(x: Tensor, groups: int, gain: Tensor, bias: Tensor) -> Tensor:
    """Per-(sample, group) normalization of (B,C,H,W) with per-channel affine."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    if x.ndim != 4:
        raise DimensionError(f"group_norm expects (B,C,H,W), got {x.shape}")
    b, c, h, w = x.shape
    if c % groups != 0:
        raise ConfigurationError(f"groups {groups} does not divide channels {c}")
    xg = x.data.reshape(b, groups, -1)
    mean = xg.mean(axis=2, keepdims=True)
    centered = xg - mean
    var = (centered * centered).mean(axis=2, keepdims=True)
    live = var > _VAR_FLOOR
    inv_std = 1.0 / np.sqrt(np.maximum(var, _VAR_FLOOR))
    xhat = (centered * inv_std).reshape(b, c, h, w)
    out = xhat * gain.data.reshape(1, c, 1, 1) + bias.data.reshape(1, c, 1, 1)

    def backward_fn(g):
        gh = (g * gain.data.reshape(1, c, 1, 1)).reshape(b, groups, -1)
        xhat_g = xhat.reshape(b, groups, -1)
        term = xhat_g * ((gh * xhat_g).mean(axis=2, keepdims=True) * live)
        dx = inv_std * (gh - gh.mean(axis=2, keepdims=True) - term)
        _send(x, dx.reshape(b, c, h, w))
        _send(gain, (g * xhat).sum(axis=(0, 2, 3)))
        _send(bias, g.sum(axis=(0, 2, 3)))

    return Tensor.from_op(out, (x, gain, bias), backward_fn)


def gelu(x: Tensor) -> Tensor:
    x = _wrap(x)
    phi = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * phi

    def backward_fn(g):
        density = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        _send(x, g * (phi + x.data * density))

    return Tensor.from_op(out, (x,), backward_fn)


def silu(x: Tensor) -> Tensor:
    x = _wrap(x)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig

    def backward_fn(g):
        _send(x, g * sig * (1.0 + x.data * (1.0 - sig)))

    return Tensor.from_op(out, (x,), backward_fn)


# ---------------------------------------------------------------------------
# lookup / linear
# ---------------------------------------------------------------------------

def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` (V,D) at integer ``ids``; grads scatter-add."""
    table = _wrap(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractError("embedding_lookup ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(
            f"embedding id out of range [0,{table.shape[0]}): {ids.min()}..{ids.max()}")
    out = table.data[ids]

    def backward_fn(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        _send(table, dt)

    return Tensor.from_op(out, (table,), backward_fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x (..., in) @ weight (in, out) [+ bias (out,)].

    Leading axes are folded into one gemm; the fold is a reshape view, so
    this is strictly cheaper than a batched matmul.
    """
    from .tensor import matmul, reshape
    if x.ndim == 2:
        out = matmul(x, weight)
    else:
        lead = x.shape[:-1]
        folded = matmul(reshape(x, -1, x.shape[-1]), weight)
        out = reshape(folded, lead + (weight.shape[-1],))
    if bias is not None:
        out = out + bias
    return out
