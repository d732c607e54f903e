"""Closed-form parameter and FLOPs accounting per (backbone, layout, size).

Parameter formulas mirror the builders exactly (verified against model
enumeration in the tests).  FLOPs count multiply-accumulates times two and
exclude normalization, activations, softmax exponentials, and bias adds;
attention splits into projection terms (L d^2) and score/value terms (L^2 d,
or L k d within windows of k tokens).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .blocks import TIMESTEP_FEATURE_DIM, dwconv_ffn_hidden
from .conditioning import ConditioningLayout
from .denoisers import BlockConfig, DWCONV, WINDOW_ATTENTION
from .errors import ConfigurationError

COMPONENTS = ("attention", "ffn", "patch_embed", "conv_stages", "embeddings")


@dataclass
class ProfileConfig:
    layout: ConditioningLayout
    block: BlockConfig
    latent_shape: tuple[int, int, int]
    vocab_size: int
    text_len: int = 4


@dataclass
class CostReport:
    total_params: int = 0
    total_flops: int = 0
    params_by_component: dict = field(default_factory=dict)
    flops_by_component: dict = field(default_factory=dict)
    attention_score_flops: int = 0

    def validate(self) -> None:
        for mapping, total in ((self.params_by_component, self.total_params),
                               (self.flops_by_component, self.total_flops)):
            if mapping:
                if any(v < 0 for v in mapping.values()):
                    raise ConfigurationError("negative cost component")
                if sum(mapping.values()) != total:
                    raise ConfigurationError("component sums do not match total")

    def merged_with(self, other: "CostReport") -> "CostReport":
        return CostReport(
            total_params=self.total_params or other.total_params,
            total_flops=self.total_flops or other.total_flops,
            params_by_component=self.params_by_component or other.params_by_component,
            flops_by_component=self.flops_by_component or other.flops_by_component,
            attention_score_flops=self.attention_score_flops or
            other.attention_score_flops,
        )

    def as_dict(self) -> dict:
        return {
            "total_params": int(self.total_params),
            "total_flops": int(self.total_flops),
            "params_by_component": {k: int(v) for k, v in
                                    self.params_by_component.items()},
            "flops_by_component": {k: int(v) for k, v in
                                   self.flops_by_component.items()},
            "attention_score_flops": int(self.attention_score_flops),
        }

    def format_table(self, title: str) -> str:
        lines = [title, f"{'component':<14}{'params':>14}{'flops':>18}"]
        for comp in COMPONENTS:
            lines.append(f"{comp:<14}{self.params_by_component.get(comp, 0):>14,}"
                         f"{self.flops_by_component.get(comp, 0):>18,}")
        lines.append(f"{'total':<14}{self.total_params:>14,}{self.total_flops:>18,}")
        return "\n".join(lines)


# -- parameter formulas (must track the builders) ---------------------------

def _linear(d_in: int, d_out: int) -> int:
    return d_in * d_out + d_out


def _mhsa(d: int) -> int:
    return 4 * _linear(d, d)


def _cross(d: int, text_dim: int) -> int:
    return 2 * _linear(d, d) + 2 * _linear(text_dim, d)


def _t_embed(d: int) -> int:
    return _linear(TIMESTEP_FEATURE_DIM, d) + _linear(d, d)


def _gn(channels: int) -> int:
    return 2 * channels


def _conv(c_in: int, c_out: int, k: int) -> int:
    return c_out * c_in * k * k + c_out


def _res_block(c_in: int, c_out: int, d: int) -> int:
    total = _gn(c_in) + _conv(c_in, c_out, 3) + _linear(d, c_out) + \
        _gn(c_out) + _conv(c_out, c_out, 3)
    if c_in != c_out:
        total += _conv(c_in, c_out, 1)
    return total


def _dit_params(cfg: ProfileConfig) -> dict:
    b = cfg.block
    d = b.hidden_dim
    c, h, w = cfg.latent_shape
    p = b.patch_size
    two_stream = cfg.layout.token_streams == 2
    in_feats = (c if two_stream else 2 * c) * p * p

    attn = _mhsa(d)
    if b.attention == WINDOW_ATTENTION:
        attn += (2 * b.window_size - 1) ** 2 * b.heads
    attn += _cross(d, b.text_dim)
    if b.ffn_kind == DWCONV:
        hid = b.ffn_hidden
        ffn = _linear(d, hid) + 9 * hid + hid + _linear(hid, d)
    else:
        ffn = _linear(d, b.ffn_hidden) + _linear(b.ffn_hidden, d)
    ada = _linear(d, 6 * d)

    comp = {
        "attention": b.depth * attn,
        "ffn": b.depth * ffn,
        "patch_embed": _linear(in_feats, d) + _linear(d, p * p * c),
        "conv_stages": 0,
        "embeddings": _t_embed(d) + cfg.vocab_size * b.text_dim +
        (2 * d if two_stream else 0) + b.depth * ada + _linear(d, 2 * d),
    }
    return comp


def _unet_params(cfg: ProfileConfig) -> dict:
    b = cfg.block
    d = b.hidden_dim
    c = cfg.latent_shape[0]
    w1, w2, w3 = b.unet_widths
    nb = b.unet_res_blocks
    joint = cfg.layout is ConditioningLayout.UNET_TOKEN
    in_ch = c if joint else 2 * c

    def attn_site(width: int) -> int:
        total = _gn(width) + _cross(width, b.text_dim)
        if joint:
            total += _gn(width) + 2 * width + _mhsa(width)
        return total

    conv_stages = (
        nb * _res_block(w1, w1, d) + _conv(w1, w2, 2) +
        nb * _res_block(w2, w2, d) + _conv(w2, w3, 2) +
        nb * _res_block(w3, w3, d) + _conv(w3, w2, 3) +
        _res_block(2 * w2, w2, d) + (nb - 1) * _res_block(w2, w2, d) +
        _conv(w2, w1, 3) +
        _res_block(2 * w1, w1, d) + (nb - 1) * _res_block(w1, w1, d)
    )
    comp = {
        "attention": attn_site(w2) * 2 + attn_site(w3),
        "ffn": 0,
        "patch_embed": _conv(in_ch, w1, 3) + _gn(w1) + _conv(w1, c, 3),
        "conv_stages": conv_stages,
        "embeddings": _t_embed(d) + cfg.vocab_size * b.text_dim,
    }
    return comp


def count_params(cfg: ProfileConfig) -> CostReport:
    """Exact analytic parameter count, broken down by component."""
    cfg.block.validate()
    if cfg.layout.backbone == "unet":
        comp = _unet_params(cfg)
    else:
        comp = _dit_params(cfg)
    report = CostReport(total_params=sum(comp.values()),
                        params_by_component=comp)
    report.validate()
    return report


# -- FLOPs -------------------------------------------------------------------

def _dit_flops(cfg: ProfileConfig, latent_shape) -> tuple[dict, int]:
    b = cfg.block
    d = b.hidden_dim
    c, h, w = latent_shape
    p = b.patch_size
    n = (h // p) * (w // p)
    streams = cfg.layout.token_streams
    length = streams * n
    m = cfg.text_len
    in_feats = (c if streams == 2 else 2 * c) * p * p

    if b.attention == WINDOW_ATTENTION:
        k_win = streams * b.window_size ** 2
        scores = 4 * length * k_win * d
    else:
        scores = 4 * length * length * d
    attn = b.depth * (8 * length * d * d + scores)
    cross = b.depth * (4 * length * d * d + 4 * m * b.text_dim * d +
                       4 * length * m * d)
    hid = b.ffn_hidden
    ffn = b.depth * 4 * length * d * hid
    if b.ffn_kind == DWCONV:
        ffn += b.depth * 18 * length * hid
    embeddings = 2 * (TIMESTEP_FEATURE_DIM * d + d * d) + \
        b.depth * 12 * d * d + 4 * d * d
    patch = 2 * length * in_feats * d + 2 * length * d * (p * p * c)
    comp = {
        "attention": attn + cross,
        "ffn": ffn,
        "patch_embed": patch,
        "conv_stages": 0,
        "embeddings": embeddings,
    }
    return comp, b.depth * scores


def _unet_flops(cfg: ProfileConfig, latent_shape) -> tuple[dict, int]:
    b = cfg.block
    d = b.hidden_dim
    c, h, w = latent_shape
    w1, w2, w3 = b.unet_widths
    nb = b.unet_res_blocks
    joint = cfg.layout is ConditioningLayout.UNET_TOKEN
    streams = 2 if joint else 1
    in_ch = c if joint else 2 * c
    m = cfg.text_len

    def conv_f(hw: int, c_in: int, c_out: int, k: int) -> int:
        return 2 * hw * c_out * c_in * k * k

    def res_f(hw: int, c_in: int, c_out: int) -> int:
        total = conv_f(hw, c_in, c_out, 3) + conv_f(hw, c_out, c_out, 3) + \
            2 * d * c_out
        if c_in != c_out:
            total += conv_f(hw, c_in, c_out, 1)
        return total

    hw1, hw2, hw3 = h * w, h * w // 4, h * w // 16
    conv_stages = streams * (
        nb * res_f(hw1, w1, w1) + conv_f(hw2, w1, w2, 2) +
        nb * res_f(hw2, w2, w2) + conv_f(hw3, w2, w3, 2) +
        nb * res_f(hw3, w3, w3) + conv_f(hw2, w3, w2, 3) +
        res_f(hw2, 2 * w2, w2) + (nb - 1) * res_f(hw2, w2, w2) +
        conv_f(hw1, w2, w1, 3) +
        res_f(hw1, 2 * w1, w1) + (nb - 1) * res_f(hw1, w1, w1)
    )

    score_total = 0

    def site_f(hw: int, width: int) -> int:
        nonlocal score_total
        total = streams * (4 * hw * width * width +
                           4 * m * b.text_dim * width + 4 * hw * m * width)
        if joint:
            length = 2 * hw
            joint_scores = 4 * length * length * width
            total += 8 * length * width * width + joint_scores
            score_total += joint_scores
        return total

    attention = site_f(hw2, w2) * 2 + site_f(hw3, w3)
    comp = {
        "attention": attention,
        "ffn": 0,
        "patch_embed": streams * (conv_f(hw1, in_ch, w1, 3) + conv_f(hw1, w1, c, 3)),
        "conv_stages": conv_stages,
        "embeddings": 2 * (TIMESTEP_FEATURE_DIM * d + d * d),
    }
    return comp, score_total


def estimate_flops(cfg: ProfileConfig,
                   latent_shape: tuple[int, int, int] | None = None) -> CostReport:
    """Forward-pass FLOPs for one sample at the given latent resolution."""
    cfg.block.validate()
    shape = latent_shape if latent_shape is not None else cfg.latent_shape
    if cfg.layout.backbone == "unet":
        comp, scores = _unet_flops(cfg, shape)
    else:
        comp, scores = _dit_flops(cfg, shape)
    report = CostReport(total_flops=sum(comp.values()),
                        flops_by_component=comp,
                        attention_score_flops=scores)
    report.validate()
    return report


def profile(cfg: ProfileConfig,
            latent_shape: tuple[int, int, int] | None = None) -> CostReport:
    return count_params(cfg).merged_with(estimate_flops(cfg, latent_shape))


# -- presets -------------------------------------------------------------------

def toy_profile(layout: ConditioningLayout) -> ProfileConfig:
    """Training-scale dims: 32x32 RGB images, factor-2 codec, d=128 blocks."""
    from .denoisers import variant_config
    return ProfileConfig(layout=layout, block=variant_config(layout),
                         latent_shape=(12, 16, 16), vocab_size=20, text_len=4)


def paper_scale_profile(layout: ConditioningLayout) -> ProfileConfig:
    """Profiling-only preset at production dims: 64x64x4 latents, XL-class
    transformer widths, SD-class U-Net widths.  Toy training dims distort the
    compute ratios; the conditioning-cost structure is asserted here."""
    from .denoisers import variant_config
    block = variant_config(layout, BlockConfig(
        hidden_dim=1152, heads=16, depth=28, patch_size=2, window_size=8,
        text_dim=1152, unet_widths=(320, 640, 1280), unet_res_blocks=2,
        gn_groups=8))
    return ProfileConfig(layout=layout, block=block,
                         latent_shape=(4, 64, 64), vocab_size=20, text_len=16)
