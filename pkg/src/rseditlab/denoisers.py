"""Assembled denoisers: mini U-Net, mini DiT, and the windowed DiT+ variant.

All three map (noisy latent, timestep, instruction ids, source latent) to a
latent-shaped noise estimate.  Variant definitions are fixed: DiT pairs 2D
sin-cos position embeddings with global attention and a pointwise FFN; DiT+
drops the position embedding and uses window attention with a depthwise-conv
FFN (its only parameter overhead is the per-block window bias table); the
U-Net runs three conv resolutions with group norm, timestep addition and
text cross-attention at the two coarsest resolutions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from . import ops
from .blocks import (AdaLNModulation, Conv2d, CrossAttention, DWConvFFN,
                     GroupNorm, Linear, Module, MultiHeadSelfAttention,
                     MultiHeadWindowAttention, PointwiseFFN, TextEmbeddingTable,
                     TimestepEmbedding, dwconv_ffn_hidden, modulate,
                     norm_tokens, patchify, unpatchify, _param)
from .conditioning import (ConditioningLayout, condition_dit_channel,
                           condition_dit_token, condition_unet_channel,
                           condition_unet_token, extract_noisy_stream)
from .tensor import Tensor, concat, permute, reshape, split

POINTWISE = "pointwise"
DWCONV = "dwconv"
SINCOS_2D = "sincos_2d"
POS_NONE = "none"
GLOBAL_ATTENTION = "global"
WINDOW_ATTENTION = "window"


@dataclass
class BlockConfig:
    """Shared architecture knobs for every denoiser family."""

    hidden_dim: int = 128
    heads: int = 4
    depth: int = 4
    patch_size: int = 2
    window_size: int = 4
    attention: str = GLOBAL_ATTENTION
    ffn_kind: str = POINTWISE
    pos_embed: str = SINCOS_2D
    text_dim: int = 64
    unet_widths: tuple[int, ...] = (64, 128, 256)
    unet_res_blocks: int = 2
    gn_groups: int = 8

    def __post_init__(self):
        self.unet_widths = tuple(self.unet_widths)

    def validate(self) -> None:
        if self.hidden_dim % self.heads:
            raise ConfigurationError(
                f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if self.ffn_kind not in (POINTWISE, DWCONV):
            raise ConfigurationError(f"unknown ffn_kind {self.ffn_kind!r}")
        if self.pos_embed not in (SINCOS_2D, POS_NONE):
            raise ConfigurationError(f"unknown pos_embed {self.pos_embed!r}")
        if self.attention not in (GLOBAL_ATTENTION, WINDOW_ATTENTION):
            raise ConfigurationError(f"unknown attention {self.attention!r}")
        if len(self.unet_widths) != 3:
            raise ConfigurationError("unet_widths must list three resolutions")
        for w in self.unet_widths:
            if w % self.gn_groups or w % self.heads:
                raise ConfigurationError(
                    f"unet width {w} must be divisible by gn_groups "
                    f"{self.gn_groups} and heads {self.heads}")

    @property
    def ffn_hidden(self) -> int:
        base = 4 * self.hidden_dim
        return dwconv_ffn_hidden(self.hidden_dim, base) if self.ffn_kind == DWCONV \
            else base


# ---------------------------------------------------------------------------
# DiT family
# ---------------------------------------------------------------------------

class DiTBlock(Module):
    """adaLN-modulated attention + text cross-attention + adaLN-modulated FFN."""

    def __init__(self, rng, cfg: BlockConfig):
        d = cfg.hidden_dim
        self.ada = AdaLNModulation(rng, d)
        if cfg.attention == WINDOW_ATTENTION:
            self.attn = MultiHeadWindowAttention(rng, d, cfg.heads, cfg.window_size)
        else:
            self.attn = MultiHeadSelfAttention(rng, d, cfg.heads)
        self.cross = CrossAttention(rng, d, cfg.text_dim, cfg.heads)
        if cfg.ffn_kind == DWCONV:
            self.ffn = DWConvFFN(rng, d, cfg.ffn_hidden)
        else:
            self.ffn = PointwiseFFN(rng, d, cfg.ffn_hidden)

    def __call__(self, x: Tensor, t_emb: Tensor, text: Tensor,
                 grid_h: int, grid_w: int, streams: int) -> Tensor:
        shift1, scale1, gate1, shift2, scale2, gate2 = self.ada(t_emb)
        h = modulate(x, shift1, scale1)
        if isinstance(self.attn, MultiHeadWindowAttention):
            h = self.attn(h, grid_h, grid_w, streams)
        else:
            h = self.attn(h)
        x = x + gate1 * h
        x = x + self.cross(norm_tokens(x), text)
        h = modulate(x, shift2, scale2)
        if isinstance(self.ffn, DWConvFFN):
            h = self.ffn(h, grid_h, grid_w, streams)
        else:
            h = self.ffn(h)
        return x + gate2 * h


class DiTDenoiser(Module):
    """Transformer denoiser over patch tokens, token- or channel-fused."""

    def __init__(self, rng, cfg: BlockConfig, layout: ConditioningLayout,
                 latent_shape: tuple[int, int, int], vocab_size: int):
        from .blocks import sincos_pos_embed_2d

        c, h, w = latent_shape
        p = cfg.patch_size
        if h % p or w % p:
            raise ConfigurationError(f"patch size {p} does not divide latent {h}x{w}")
        self.cfg = cfg
        self.layout = layout
        self.latent_shape = tuple(latent_shape)
        self.grid_h, self.grid_w = h // p, w // p
        if cfg.attention == WINDOW_ATTENTION:
            if self.grid_h % cfg.window_size or self.grid_w % cfg.window_size:
                raise ConfigurationError(
                    f"window {cfg.window_size} does not divide token grid "
                    f"{self.grid_h}x{self.grid_w}")

        d = cfg.hidden_dim
        in_feats = (2 * c if layout is ConditioningLayout.DIT_CHANNEL_N_2D else c) * p * p
        self.patch_embed = Linear(rng, in_feats, d)
        self.t_embed = TimestepEmbedding(rng, d)
        self.text_embed = TextEmbeddingTable(rng, vocab_size, cfg.text_dim)
        if layout.token_streams == 2:
            self.stream_embed = _param(rng, (2, d), 0.02)
        else:
            self.stream_embed = None
        self.blocks = [DiTBlock(rng, cfg) for _ in range(cfg.depth)]
        self.final_mod = Linear(rng, d, 2 * d, zero_init=True)
        self.head = Linear(rng, d, p * p * c, zero_init=True)
        if cfg.pos_embed == SINCOS_2D:
            self.pos = sincos_pos_embed_2d(self.grid_h, self.grid_w, d)
        else:
            self.pos = None

    def __call__(self, z_t: Tensor, t: np.ndarray, text_ids: np.ndarray,
                 z_src: Tensor, site_order: np.ndarray | None = None) -> Tensor:
        cfg = self.cfg
        text = self.text_embed(text_ids)
        t_emb = self.t_embed(t)
        if self.layout is ConditioningLayout.DIT_CHANNEL_N_2D:
            x = condition_dit_channel(z_t, z_src, self.patch_embed,
                                      cfg.patch_size, self.pos, site_order)
            streams = 1
        else:
            x = condition_dit_token(z_t, z_src, self.patch_embed, cfg.patch_size,
                                    self.pos, self.stream_embed, site_order)
            streams = 2
        for block in self.blocks:
            x = block(x, t_emb, text, self.grid_h, self.grid_w, streams)
        mod = self.final_mod(ops.silu(t_emb))
        shift, scale = [reshape(s, s.shape[0], 1, cfg.hidden_dim)
                        for s in split(mod, 2, axis=1)]
        x = norm_tokens(x) * (scale + 1.0) + shift
        x = self.head(x)
        if streams == 2:
            x = extract_noisy_stream(x)
        if site_order is not None:
            from .tensor import index_select
            x = index_select(x, 1, np.argsort(site_order))
        c = self.latent_shape[0]
        return unpatchify(x, cfg.patch_size, c, self.grid_h, self.grid_w)


# ---------------------------------------------------------------------------
# U-Net family
# ---------------------------------------------------------------------------

class ResBlock(Module):
    """Channels-last residual conv block with additive timestep conditioning."""

    def __init__(self, rng, c_in: int, c_out: int, t_dim: int, groups: int):
        self.norm1 = GroupNorm(groups, c_in, channels_last=True)
        self.conv1 = Conv2d(rng, c_in, c_out, 3, padding=1, channels_last=True)
        self.t_proj = Linear(rng, t_dim, c_out)
        self.norm2 = GroupNorm(groups, c_out, channels_last=True)
        self.conv2 = Conv2d(rng, c_out, c_out, 3, padding=1, zero_init=True,
                            channels_last=True)
        self.skip = Conv2d(rng, c_in, c_out, 1, channels_last=True) \
            if c_in != c_out else None

    def __call__(self, x: Tensor, t_emb: Tensor) -> Tensor:
        h = self.conv1(ops.silu(self.norm1(x)))
        bias = ops.silu(self.t_proj(t_emb))
        h = h + reshape(bias, bias.shape[0], 1, 1, bias.shape[1])
        h = self.conv2(ops.silu(self.norm2(h)))
        return h + (self.skip(x) if self.skip is not None else x)


class UNetAttnSite(Module):
    """Attention over flattened spatial tokens at one U-Net resolution.

    Channel layout: text cross-attention only.  Token layout: the two
    batch-stacked streams are regrouped into one joint sequence (noisy half
    first, learned stream offsets), jointly self-attended, split back, then
    both streams cross-attend the text.
    """

    def __init__(self, rng, channels: int, text_dim: int, heads: int,
                 groups: int, joint: bool):
        if joint:
            self.norm_joint = GroupNorm(groups, channels, channels_last=True)
            self.stream_embed = _param(rng, (2, channels), 0.02)
            self.joint_attn = MultiHeadSelfAttention(rng, channels, heads)
            self.joint_attn.wo = Linear(rng, channels, channels, zero_init=True)
        else:
            self.norm_joint = None
            self.stream_embed = None
            self.joint_attn = None
        self.norm_cross = GroupNorm(groups, channels, channels_last=True)
        self.cross = CrossAttention(rng, channels, text_dim, heads)
        self.joint = joint

    def __call__(self, x: Tensor, text: Tensor) -> Tensor:
        b, h, w, c = x.shape
        if self.joint:
            tokens = reshape(self.norm_joint(x), b, h * w, c)
            noisy, src = split(tokens, 2, axis=0)
            se_noisy, se_src = split(reshape(self.stream_embed, 2, 1, c), 2, axis=0)
            joint_seq = concat([noisy + se_noisy, src + se_src], axis=1)
            out_noisy, out_src = split(self.joint_attn(joint_seq), 2, axis=1)
            delta = concat([out_noisy, out_src], axis=0)
            x = x + reshape(delta, b, h, w, c)
        tokens = reshape(self.norm_cross(x), b, h * w, c)
        return x + reshape(self.cross(tokens, text), b, h, w, c)


class UNetDenoiser(Module):
    """Three-resolution conv denoiser with skip connections."""

    def __init__(self, rng, cfg: BlockConfig, layout: ConditioningLayout,
                 latent_shape: tuple[int, int, int], vocab_size: int):
        c = latent_shape[0]
        w1, w2, w3 = cfg.unet_widths
        d = cfg.hidden_dim
        g = cfg.gn_groups
        joint = layout is ConditioningLayout.UNET_TOKEN
        self.cfg = cfg
        self.layout = layout
        self.latent_shape = tuple(latent_shape)

        self.t_embed = TimestepEmbedding(rng, d)
        self.text_embed = TextEmbeddingTable(rng, vocab_size, cfg.text_dim)
        in_ch = c if joint else 2 * c
        self.conv_in = Conv2d(rng, in_ch, w1, 3, padding=1, channels_last=True)
        nb = cfg.unet_res_blocks
        self.enc1 = [ResBlock(rng, w1, w1, d, g) for _ in range(nb)]
        self.pool1 = Conv2d(rng, w1, w2, 2, stride=2, channels_last=True)
        self.enc2 = [ResBlock(rng, w2, w2, d, g) for _ in range(nb)]
        self.attn_enc2 = UNetAttnSite(rng, w2, cfg.text_dim, cfg.heads, g, joint)
        self.pool2 = Conv2d(rng, w2, w3, 2, stride=2, channels_last=True)
        self.bottom = [ResBlock(rng, w3, w3, d, g) for _ in range(nb)]
        self.attn_bottom = UNetAttnSite(rng, w3, cfg.text_dim, cfg.heads, g, joint)
        self.up2 = Conv2d(rng, w3, w2, 3, padding=1, channels_last=True)
        self.dec2 = [ResBlock(rng, 2 * w2, w2, d, g)] + \
            [ResBlock(rng, w2, w2, d, g) for _ in range(nb - 1)]
        self.attn_dec2 = UNetAttnSite(rng, w2, cfg.text_dim, cfg.heads, g, joint)
        self.up1 = Conv2d(rng, w2, w1, 3, padding=1, channels_last=True)
        self.dec1 = [ResBlock(rng, 2 * w1, w1, d, g)] + \
            [ResBlock(rng, w1, w1, d, g) for _ in range(nb - 1)]
        self.norm_out = GroupNorm(g, w1, channels_last=True)
        self.conv_out = Conv2d(rng, w1, c, 3, padding=1, zero_init=True,
                               channels_last=True)

    def __call__(self, z_t: Tensor, t: np.ndarray, text_ids: np.ndarray,
                 z_src: Tensor) -> Tensor:
        joint = self.layout is ConditioningLayout.UNET_TOKEN
        t_emb = self.t_embed(t)
        text = self.text_embed(text_ids)
        if joint:
            x = condition_unet_token(z_t, z_src)
            t_emb = concat([t_emb, t_emb], axis=0)
            text = concat([text, text], axis=0)
        else:
            x = condition_unet_channel(z_t, z_src)
        x = permute(x, 0, 2, 3, 1)

        x = self.conv_in(x)
        for blk in self.enc1:
            x = blk(x, t_emb)
        s1 = x
        x = self.pool1(x)
        for blk in self.enc2:
            x = blk(x, t_emb)
        x = self.attn_enc2(x, text)
        s2 = x
        x = self.pool2(x)
        for blk in self.bottom:
            x = blk(x, t_emb)
        x = self.attn_bottom(x, text)
        x = self.up2(ops.upsample_nearest2x_nhwc(x))
        x = concat([x, s2], axis=-1)
        for blk in self.dec2:
            x = blk(x, t_emb)
        x = self.attn_dec2(x, text)
        x = self.up1(ops.upsample_nearest2x_nhwc(x))
        x = concat([x, s1], axis=-1)
        for blk in self.dec1:
            x = blk(x, t_emb)
        eps = self.conv_out(ops.silu(self.norm_out(x)))
        eps = permute(eps, 0, 3, 1, 2)
        if joint:
            eps, _ = split(eps, 2, axis=0)
        return eps


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def build_unet(cfg: BlockConfig, layout: ConditioningLayout,
               latent_shape: tuple[int, int, int], vocab_size: int,
               seed: int) -> UNetDenoiser:
    cfg.validate()
    if layout not in (ConditioningLayout.UNET_CHANNEL, ConditioningLayout.UNET_TOKEN):
        raise ConfigurationError(f"U-Net cannot use layout {layout.value}")
    rng = np.random.default_rng(seed)
    return UNetDenoiser(rng, cfg, layout, latent_shape, vocab_size)


def build_dit(cfg: BlockConfig, layout: ConditioningLayout,
              latent_shape: tuple[int, int, int], vocab_size: int,
              seed: int) -> DiTDenoiser:
    cfg.validate()
    if layout not in (ConditioningLayout.DIT_TOKEN_2N_D,
                      ConditioningLayout.DIT_CHANNEL_N_2D):
        raise ConfigurationError(f"DiT cannot use layout {layout.value}")
    if cfg.attention != GLOBAL_ATTENTION:
        raise ConfigurationError("DiT is defined with global attention")
    if cfg.ffn_kind != POINTWISE:
        raise ConfigurationError("DiT is defined with a pointwise FFN")
    if cfg.pos_embed != SINCOS_2D:
        raise ConfigurationError("DiT is defined with 2D sin-cos position embeddings")
    rng = np.random.default_rng(seed)
    return DiTDenoiser(rng, cfg, layout, latent_shape, vocab_size)


def build_ditplus(cfg: BlockConfig, latent_shape: tuple[int, int, int],
                  vocab_size: int, seed: int) -> DiTDenoiser:
    cfg.validate()
    if cfg.attention != WINDOW_ATTENTION:
        raise ConfigurationError("DiT+ is defined with window attention")
    if cfg.ffn_kind != DWCONV:
        raise ConfigurationError("DiT+ is defined with a depthwise-conv FFN")
    if cfg.pos_embed != POS_NONE:
        raise ConfigurationError("DiT+ removes the position embedding")
    rng = np.random.default_rng(seed)
    return DiTDenoiser(rng, cfg, ConditioningLayout.DITPLUS_TOKEN,
                       latent_shape, vocab_size)


def variant_config(layout: ConditioningLayout, base: BlockConfig | None = None) -> BlockConfig:
    """BlockConfig with the variant-defining fields pinned for ``layout``."""
    from dataclasses import replace
    cfg = base if base is not None else BlockConfig()
    if layout is ConditioningLayout.DITPLUS_TOKEN:
        return replace(cfg, attention=WINDOW_ATTENTION, ffn_kind=DWCONV,
                       pos_embed=POS_NONE)
    return replace(cfg, attention=GLOBAL_ATTENTION, ffn_kind=POINTWISE,
                   pos_embed=SINCOS_2D)


def build_denoiser(cfg: BlockConfig, layout: ConditioningLayout,
                   latent_shape: tuple[int, int, int], vocab_size: int,
                   seed: int):
    if layout.backbone == "unet":
        return build_unet(cfg, layout, latent_shape, vocab_size, seed)
    if layout.backbone == "dit":
        return build_dit(cfg, layout, latent_shape, vocab_size, seed)
    return build_ditplus(cfg, latent_shape, vocab_size, seed)
