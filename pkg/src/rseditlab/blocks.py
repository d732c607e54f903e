"""Denoiser building blocks: attention variants, FFNs, adaLN, embeddings.

Modules register parameters by attribute assignment (insertion order is the
canonical checkpoint order).  Construction is seeded through an explicit
numpy Generator so identical configs produce bit-identical models.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError
from . import ops
from .tensor import Tensor, concat, index_select, matmul, reshape, permute, split

TIMESTEP_FEATURE_DIM = 256


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------

class Module:
    """Minimal parameter container; children discovered from attributes."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{key}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def _param(rng: np.random.Generator, shape, std: float) -> Tensor:
    if std == 0.0:
        return Tensor(np.zeros(shape), requires_grad=True)
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True,
                 std: float | None = None, zero_init: bool = False):
        scale = 0.0 if zero_init else (std if std is not None else d_in ** -0.5)
        self.weight = _param(rng, (d_in, d_out), scale)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class Conv2d(Module):
    """Conv layer with canonical (O,C,kh,kw) weights; NCHW or NHWC activations."""

    def __init__(self, rng, c_in: int, c_out: int, k: int, stride: int = 1,
                 padding: int = 0, zero_init: bool = False,
                 channels_last: bool = False):
        std = 0.0 if zero_init else np.sqrt(2.0 / (c_in * k * k))
        self.weight = _param(rng, (c_out, c_in, k, k), std)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)
        self.stride, self.padding = stride, padding
        self.channels_last = channels_last

    def __call__(self, x: Tensor) -> Tensor:
        op = ops.conv2d_nhwc if self.channels_last else ops.conv2d
        return op(x, self.weight, self.bias, self.stride, self.padding)


class GroupNorm(Module):
    def __init__(self, groups: int, channels: int, channels_last: bool = False):
        self.gain = Tensor(np.ones(channels), requires_grad=True)
        self.bias = Tensor(np.zeros(channels), requires_grad=True)
        self.groups = groups
        self.channels_last = channels_last

    def __call__(self, x: Tensor) -> Tensor:
        op = ops.group_norm_nhwc if self.channels_last else ops.group_norm
        return op(x, self.groups, self.gain, self.bias)


def norm_tokens(x: Tensor) -> Tensor:
    """Affine-free layer norm over the channel axis (modulation adds affine)."""
    d = x.shape[-1]
    return ops.layer_norm(x, Tensor(np.ones(d)), Tensor(np.zeros(d)))


# ---------------------------------------------------------------------------
# fixed sinusoidal tables
# ---------------------------------------------------------------------------

def timestep_features(t: np.ndarray, dim: int = TIMESTEP_FEATURE_DIM) -> np.ndarray:
    """Classic sin/cos features of integer timesteps, shape (B, dim)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    angles = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def sincos_pos_embed_2d(grid_h: int, grid_w: int, d: int) -> np.ndarray:
    """Position embedding (N,d) indexed by (row, col) only.

    Rows use the first d/2 features, columns the second; each half splits
    into sin and cos quarters, so d must be divisible by 4.
    """
    if d % 4 != 0:
        raise ConfigurationError(f"2d sin-cos embedding needs d divisible by 4, got {d}")
    quarter = d // 4
    freqs = np.exp(-np.log(10000.0) * np.arange(quarter) / quarter)
    rows, cols = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    out = np.empty((grid_h * grid_w, d))
    for offset, coord in ((0, rows.reshape(-1)), (2 * quarter, cols.reshape(-1))):
        angles = coord[:, None] * freqs[None, :]
        out[:, offset:offset + quarter] = np.sin(angles)
        out[:, offset + quarter:offset + 2 * quarter] = np.cos(angles)
    return out


class TimestepEmbedding(Module):
    """Sinusoidal features refined by a two-layer MLP to width d."""

    def __init__(self, rng, d: int):
        self.fc1 = Linear(rng, TIMESTEP_FEATURE_DIM, d)
        self.fc2 = Linear(rng, d, d)

    def __call__(self, t: np.ndarray) -> Tensor:
        feats = Tensor(timestep_features(t))
        return self.fc2(ops.silu(self.fc1(feats)))


class TextEmbeddingTable(Module):
    """Learned embedding over the closed instruction vocabulary."""

    def __init__(self, rng, vocab_size: int, text_dim: int):
        self.table = _param(rng, (vocab_size, text_dim), 0.02)
        self.vocab_size = vocab_size

    def __call__(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids)
        if ids.size == 0:
            raise ContractError("instruction token sequence is empty")
        return ops.embedding_lookup(self.table, ids)


# ---------------------------------------------------------------------------
# patch <-> token layout
# ---------------------------------------------------------------------------

def patchify(z: Tensor, p: int) -> Tensor:
    """(B,c,h,w) or (c,h,w) -> (B,N,c*p*p) / (N,c*p*p), row-major patch order."""
    squeeze = z.ndim == 3
    if squeeze:
        z = reshape(z, (1,) + z.shape)
    b, c, h, w = z.shape
    if h % p or w % p:
        raise ConfigurationError(f"patch size {p} does not divide latent {h}x{w}")
    gh, gw = h // p, w // p
    out = reshape(z, b, c, gh, p, gw, p)
    out = permute(out, 0, 2, 4, 1, 3, 5)
    out = reshape(out, b, gh * gw, c * p * p)
    return reshape(out, out.shape[1:]) if squeeze else out


def unpatchify(tokens: Tensor, p: int, c: int, grid_h: int, grid_w: int) -> Tensor:
    """Inverse of :func:`patchify`."""
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = reshape(tokens, (1,) + tokens.shape)
    b, n, width = tokens.shape
    if n != grid_h * grid_w or width != c * p * p:
        raise DimensionError(
            f"unpatchify: tokens {tokens.shape} inconsistent with "
            f"grid {grid_h}x{grid_w}, c={c}, p={p}")
    out = reshape(tokens, b, grid_h, grid_w, c, p, p)
    out = permute(out, 0, 3, 1, 4, 2, 5)
    out = reshape(out, b, c, grid_h * p, grid_w * p)
    return reshape(out, out.shape[1:]) if squeeze else out


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, l, d = x.shape
    return permute(reshape(x, b, l, heads, d // heads), 0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, l, dh = x.shape
    return reshape(permute(x, 0, 2, 1, 3), b, l, h * dh)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor,
                         bias: Tensor | None = None) -> Tensor:
    """(B,H,L,dh) x (B,H,M,dh) attention; optional additive score bias."""
    scale = q.shape[-1] ** -0.5
    scores = matmul(q, permute(k, 0, 1, 3, 2)) * scale
    if bias is not None:
        scores = scores + bias
    return matmul(ops.softmax(scores, axis=-1), v)


class MultiHeadSelfAttention(Module):
    """Standard global self-attention; permutation-equivariant over tokens."""

    def __init__(self, rng, d: int, heads: int):
        if d % heads:
            raise ConfigurationError(f"hidden dim {d} not divisible by heads {heads}")
        self.wq = Linear(rng, d, d)
        self.wk = Linear(rng, d, d)
        self.wv = Linear(rng, d, d)
        self.wo = Linear(rng, d, d)
        self.heads = heads

    def __call__(self, x: Tensor, bias: Tensor | None = None) -> Tensor:
        if x.ndim != 3 or x.shape[1] < 1:
            raise DimensionError(f"attention expects (B,L>=1,d), got {x.shape}")
        q = _split_heads(self.wq(x), self.heads)
        k = _split_heads(self.wk(x), self.heads)
        v = _split_heads(self.wv(x), self.heads)
        return self.wo(_merge_heads(scaled_dot_attention(q, k, v, bias)))


def relative_position_index(window: int) -> np.ndarray:
    """(w^2, w^2) indices into a (2w-1)^2 relative-offset table."""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window),
                                  indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + window - 1
    return rel[0] * (2 * window - 1) + rel[1]


class MultiHeadWindowAttention(Module):
    """Self-attention restricted to non-overlapping spatial windows.

    Tokens are laid out stream-major over one or two (grid_h, grid_w) grids;
    a window jointly contains the tokens of every stream at the same spatial
    window, so two-stream inputs attend over 2*w^2 tokens per window.  A
    learned relative-position bias (zero-initialized, shared across streams
    at equal spatial offsets) is the only extra parameter cost.
    """

    def __init__(self, rng, d: int, heads: int, window: int):
        self.inner = MultiHeadSelfAttention(rng, d, heads)
        self.rel_bias = Tensor(np.zeros(((2 * window - 1) ** 2, heads)),
                               requires_grad=True)
        self.window = window
        self.heads = heads
        self._rel_index = relative_position_index(window)

    def _window_bias(self, streams: int) -> Tensor:
        per_head = ops.embedding_lookup(self.rel_bias, self._rel_index.reshape(-1))
        w2 = self.window * self.window
        bias = permute(reshape(per_head, w2, w2, self.heads), 2, 0, 1)
        if streams > 1:
            rows = concat([bias] * streams, axis=2)
            bias = concat([rows] * streams, axis=1)
        return reshape(bias, (1,) + bias.shape)

    def __call__(self, x: Tensor, grid_h: int, grid_w: int, streams: int = 1) -> Tensor:
        b, l, d = x.shape
        w = self.window
        if grid_h % w or grid_w % w:
            raise ConfigurationError(
                f"window {w} does not divide token grid {grid_h}x{grid_w}")
        if l != streams * grid_h * grid_w:
            raise DimensionError(
                f"token count {l} != streams {streams} x grid {grid_h}x{grid_w}")
        nh, nw = grid_h // w, grid_w // w
        t = reshape(x, b, streams, nh, w, nw, w, d)
        t = permute(t, 0, 2, 4, 1, 3, 5, 6)
        t = reshape(t, b * nh * nw, streams * w * w, d)
        t = self.inner(t, bias=self._window_bias(streams))
        t = reshape(t, b, nh, nw, streams, w, w, d)
        t = permute(t, 0, 3, 1, 4, 2, 5, 6)
        return reshape(t, b, l, d)

    def gather_forward(self, x: Tensor, sites: np.ndarray, grid_h: int,
                       grid_w: int, streams: int = 1) -> Tensor:
        """Order-independent path: windows formed from per-token (row, col).

        ``sites`` has shape (L, 2) giving each token's grid coordinates; the
        reshape fast path equals this with canonical stream-major row-major
        ordering.
        """
        b, l, d = x.shape
        w = self.window
        win_of = (sites[:, 0] // w) * (grid_w // w) + sites[:, 1] // w
        order = np.argsort(win_of, kind="stable")
        inverse = np.argsort(order, kind="stable")
        per_window = streams * w * w
        num_windows = l // per_window
        gathered = index_select(x, 1, order)
        t = reshape(gathered, b * num_windows, per_window, d)

        # Each window may see its tokens in a different order, so the
        # relative-position bias is built per window from actual sites.
        grouped = sites[order].reshape(num_windows, per_window, 2)
        rel = grouped[:, :, None, :] - grouped[:, None, :, :] + w - 1
        idx = rel[..., 0] * (2 * w - 1) + rel[..., 1]
        per_head = ops.embedding_lookup(self.rel_bias, idx.reshape(-1))
        bias = permute(reshape(per_head, num_windows, per_window, per_window,
                               self.heads), 0, 3, 1, 2)
        bias = index_select(bias, 0, np.tile(np.arange(num_windows), b))

        t = self.inner(t, bias=bias)
        t = reshape(t, b, l, d)
        return index_select(t, 1, inverse)


class CrossAttention(Module):
    """Queries from tokens, keys/values from instruction embeddings."""

    def __init__(self, rng, d: int, text_dim: int, heads: int):
        if d % heads:
            raise ConfigurationError(f"hidden dim {d} not divisible by heads {heads}")
        self.wq = Linear(rng, d, d)
        self.wk = Linear(rng, text_dim, d)
        self.wv = Linear(rng, text_dim, d)
        self.wo = Linear(rng, d, d, zero_init=True)
        self.heads = heads

    def __call__(self, x: Tensor, text: Tensor) -> Tensor:
        if text.ndim != 3 or text.shape[1] < 1:
            raise ContractError(f"cross attention needs (B,M>=1,text_dim), got {text.shape}")
        q = _split_heads(self.wq(x), self.heads)
        k = _split_heads(self.wk(text), self.heads)
        v = _split_heads(self.wv(text), self.heads)
        return self.wo(_merge_heads(scaled_dot_attention(q, k, v)))


# ---------------------------------------------------------------------------
# feed-forward variants
# ---------------------------------------------------------------------------

class PointwiseFFN(Module):
    def __init__(self, rng, d: int, hidden: int):
        self.fc1 = Linear(rng, d, hidden)
        self.fc2 = Linear(rng, hidden, d)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


def dwconv_ffn_hidden(d: int, pointwise_hidden: int) -> int:
    """Hidden width making the depthwise FFN parameter-neutral.

    The 3x3 depthwise kernels add 10 parameters per hidden channel, so the
    width shrinks from the pointwise value h to h*(2d+1)/(2d+11); the whole
    backbone's parameter overhead is then just the window bias tables.
    """
    return max(1, (pointwise_hidden * (2 * d + 1)) // (2 * d + 11))


class DWConvFFN(Module):
    """linear -> gelu -> per-stream depthwise 3x3 over the token grid -> linear.

    Replicate padding keeps constant token fields constant through the
    convolution.
    """

    def __init__(self, rng, d: int, hidden: int):
        self.fc1 = Linear(rng, d, hidden)
        self.dw_kernel = _param(rng, (hidden, 1, 3, 3), np.sqrt(2.0 / 9.0))
        self.dw_bias = Tensor(np.zeros(hidden), requires_grad=True)
        self.fc2 = Linear(rng, hidden, d)
        self.hidden = hidden

    def __call__(self, x: Tensor, grid_h: int, grid_w: int, streams: int = 1) -> Tensor:
        b, l, d = x.shape
        if l != streams * grid_h * grid_w:
            raise ContractError(
                f"depthwise FFN needs grid-shaped tokens: {l} != "
                f"{streams}x{grid_h}x{grid_w}")
        h = ops.gelu(self.fc1(x))
        # stream-major tokens reshape to per-stream grids without copying
        h = reshape(h, b * streams, grid_h, grid_w, self.hidden)
        h = ops.depthwise_conv2d_nhwc(ops.pad2d_replicate_nhwc(h, 1),
                                      self.dw_kernel, self.dw_bias)
        h = reshape(h, b, l, self.hidden)
        return self.fc2(h)


# ---------------------------------------------------------------------------
# adaLN
# ---------------------------------------------------------------------------

class AdaLNModulation(Module):
    """Timestep-conditioned shift/scale/gate pairs for two sub-blocks.

    Zero-initialized, so every modulated residual block is the identity at
    initialization.
    """

    def __init__(self, rng, d: int):
        self.proj = Linear(rng, d, 6 * d, zero_init=True)

    def __call__(self, t_emb: Tensor) -> list[Tensor]:
        mod = self.proj(ops.silu(t_emb))
        b, d6 = mod.shape
        pieces = split(mod, 6, axis=1)
        return [reshape(p, b, 1, d6 // 6) for p in pieces]


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return norm_tokens(x) * (scale + 1.0) + shift
