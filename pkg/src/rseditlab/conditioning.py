"""Fusion strategies for injecting the source-image latent into a denoiser.

Five layouts: U-Net channel concat, U-Net dual-stream token concat, DiT token
concat (doubled sequence), DiT channel concat (doubled patch features), and
the windowed DiT+ token concat.  Every concatenation puts the noisy latent
first; the denoised estimate is always read back from the noisy stream.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor, concat, index_select, reshape, split
from .blocks import Linear, patchify


class ConditioningLayout(Enum):
    UNET_CHANNEL = "unet_channel"
    UNET_TOKEN = "unet_token"
    DIT_TOKEN_2N_D = "dit_token"
    DIT_CHANNEL_N_2D = "dit_channel"
    DITPLUS_TOKEN = "ditplus"

    @property
    def backbone(self) -> str:
        return {"unet_channel": "unet", "unet_token": "unet",
                "dit_token": "dit", "dit_channel": "dit",
                "ditplus": "ditplus"}[self.value]

    @property
    def token_streams(self) -> int:
        """Streams carried through transformer token sequences."""
        return 2 if self in (ConditioningLayout.UNET_TOKEN,
                             ConditioningLayout.DIT_TOKEN_2N_D,
                             ConditioningLayout.DITPLUS_TOKEN) else 1

    @staticmethod
    def parse(name: str) -> "ConditioningLayout":
        try:
            return ConditioningLayout(name)
        except ValueError:
            raise ContractError(
                f"unknown layout {name!r}; expected one of "
                f"{[l.value for l in ConditioningLayout]}")


def _check_same_shape(z_t: Tensor, z_src: Tensor) -> None:
    if z_t.shape != z_src.shape:
        raise DimensionError(
            f"noisy and source latents differ in shape: {z_t.shape} vs {z_src.shape}")


def condition_unet_channel(z_t: Tensor, z_src: Tensor) -> Tensor:
    """Channel-axis concatenation, noisy first: (B,C,h,w) x2 -> (B,2C,h,w)."""
    _check_same_shape(z_t, z_src)
    return concat([z_t, z_src], axis=-3)


def condition_unet_token(z_t: Tensor, z_src: Tensor) -> Tensor:
    """Stack the two streams on the batch axis for shared-weight conv stages.

    (B,C,h,w) x2 -> (2B,C,h,w) with the noisy half first; attention sites
    regroup the halves into joint (B, 2L, C) token sequences.
    """
    _check_same_shape(z_t, z_src)
    return concat([z_t, z_src], axis=0)


def condition_dit_token(z_t: Tensor, z_src: Tensor, patch_embed: Linear,
                        patch_size: int, pos: np.ndarray | None,
                        stream_embed: Tensor,
                        site_order: np.ndarray | None = None) -> Tensor:
    """Fig-style (2N,d) fusion: separately patchified, shared embed weights.

    Corresponding spatial sites of both streams receive identical position
    embeddings, then a learned per-stream offset disambiguates them.
    ``site_order`` permutes the patch flatten order of both streams (position
    embeddings follow their sites).
    """
    _check_same_shape(z_t, z_src)
    toks_t = patch_embed(patchify(z_t, patch_size))
    toks_s = patch_embed(patchify(z_src, patch_size))
    if site_order is not None:
        toks_t = index_select(toks_t, 1, site_order)
        toks_s = index_select(toks_s, 1, site_order)
    if pos is not None:
        pos_rows = pos if site_order is None else pos[site_order]
        pos_t = Tensor(pos_rows[None])
        toks_t = toks_t + pos_t
        toks_s = toks_s + pos_t
    se = reshape(stream_embed, 2, 1, stream_embed.shape[-1])
    se_t, se_s = split(se, 2, axis=0)
    return concat([toks_t + se_t, toks_s + se_s], axis=1)


def condition_dit_channel(z_t: Tensor, z_src: Tensor, patch_embed: Linear,
                          patch_size: int, pos: np.ndarray | None,
                          site_order: np.ndarray | None = None) -> Tensor:
    """(N,2d)-style fusion: channel concat before patchify, N unchanged."""
    _check_same_shape(z_t, z_src)
    stacked = concat([z_t, z_src], axis=-3)
    toks = patch_embed(patchify(stacked, patch_size))
    if site_order is not None:
        toks = index_select(toks, 1, site_order)
    if pos is not None:
        pos_rows = pos if site_order is None else pos[site_order]
        toks = toks + Tensor(pos_rows[None])
    return toks


def extract_noisy_stream(tokens: Tensor) -> Tensor:
    """First half of a (.., 2N, d) sequence: the noisy-stream tokens."""
    axis = tokens.ndim - 2
    if tokens.shape[axis] % 2 != 0:
        raise ContractError(
            f"two-stream sequence must have even length, got {tokens.shape[axis]}")
    noisy, _ = split(tokens, 2, axis=axis)
    return noisy
