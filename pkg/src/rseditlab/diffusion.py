"""Noise schedule, forward noising, training objective, and guided sampling.

The denoiser is epsilon-parameterized throughout: training regresses the
injected Gaussian noise, sampling reconstructs latents from predicted noise.
Classifier-free guidance uses two scales (text and image) over three
conditioning branches; branches whose combination coefficient is zero are
never evaluated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codec import CodecConfig, decode, encode
from .errors import ConfigurationError, ContractError, DimensionError
from .tensor import Tensor, backward, no_grad

ANCESTRAL = "ancestral"
DETERMINISTIC = "deterministic"

# Fraction of samples with only the text / only the image / both conditions
# dropped during training (InstructPix2Pix-style guidance preparation).
COND_DROP_TEXT = 0.05
COND_DROP_IMAGE = 0.05
COND_DROP_BOTH = 0.05

NULL_TOKEN = 0


@dataclass
class NoiseSchedule:
    """Per-timestep beta and cumulative alpha-bar tables."""

    beta: np.ndarray
    alpha_bar: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.beta)


@dataclass
class GuidanceConfig:
    text_scale: float = 5.0
    image_scale: float = 1.5
    sampler: str = DETERMINISTIC
    steps: int = 50

    def validate(self, schedule_steps: int) -> None:
        if self.text_scale < 0 or self.image_scale < 0:
            raise ConfigurationError("guidance scales must be non-negative")
        if self.sampler not in (ANCESTRAL, DETERMINISTIC):
            raise ConfigurationError(f"unknown sampler {self.sampler!r}")
        if not 1 <= self.steps <= schedule_steps:
            raise ConfigurationError(
                f"sampler steps {self.steps} outside [1, {schedule_steps}]")


def make_schedule(total_steps: int, beta_start: float = 1e-3,
                  beta_end: float = 0.2) -> NoiseSchedule:
    """Linear beta schedule; alpha_bar is the running product of (1 - beta)."""
    if total_steps < 1:
        raise ConfigurationError(f"schedule needs at least one step, got {total_steps}")
    if not (0.0 < beta_start < 1.0) or not (0.0 < beta_end < 1.0):
        raise ConfigurationError(
            f"betas must lie in (0,1): start={beta_start}, end={beta_end}")
    if total_steps > 1 and beta_start >= beta_end:
        raise ConfigurationError(
            f"beta_start {beta_start} must be below beta_end {beta_end}")
    beta = np.linspace(beta_start, beta_end, total_steps)
    alpha_bar = np.cumprod(1.0 - beta)
    return NoiseSchedule(beta=beta, alpha_bar=alpha_bar)


def _check_t(t: np.ndarray, total: int) -> np.ndarray:
    t = np.asarray(t)
    if t.size and (t.min() < 0 or t.max() >= total):
        raise ContractError(f"timestep out of range [0,{total}): {t.min()}..{t.max()}")
    return t


def q_sample(z0: np.ndarray, t, eps: np.ndarray,
             schedule: NoiseSchedule) -> np.ndarray:
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps, broadcasting batched t."""
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if z0.shape != eps.shape:
        raise DimensionError(f"z0 {z0.shape} and eps {eps.shape} differ")
    t = _check_t(t, schedule.steps)
    abar = schedule.alpha_bar[t]
    if t.ndim:
        abar = abar.reshape((-1,) + (1,) * (z0.ndim - 1))
    return np.sqrt(abar) * z0 + np.sqrt(1.0 - abar) * eps


def apply_conditioning_dropout(z_src: np.ndarray, token_ids: np.ndarray,
                               rng: np.random.Generator):
    """Per-sample drops: text -> all-null ids, image -> zero latent."""
    z_src = z_src.copy()
    token_ids = token_ids.copy()
    u = rng.random(len(z_src))
    drop_text = (u < COND_DROP_TEXT) | \
        (u >= COND_DROP_TEXT + COND_DROP_IMAGE) & \
        (u < COND_DROP_TEXT + COND_DROP_IMAGE + COND_DROP_BOTH)
    drop_image = (u >= COND_DROP_TEXT) & \
        (u < COND_DROP_TEXT + COND_DROP_IMAGE + COND_DROP_BOTH)
    token_ids[drop_text] = NULL_TOKEN
    z_src[drop_image] = 0.0
    return z_src, token_ids


def noise_prediction_loss(denoiser, z0: np.ndarray, z_src: np.ndarray,
                          token_ids: np.ndarray, schedule: NoiseSchedule,
                          rng: np.random.Generator,
                          cond_dropout: bool = True) -> Tensor:
    """Mean over the batch of the summed squared noise-prediction error."""
    if len(z0) == 0:
        raise ContractError("training batch is empty")
    b = len(z0)
    t = rng.integers(0, schedule.steps, size=b)
    eps = rng.standard_normal(z0.shape)
    if cond_dropout:
        z_src, token_ids = apply_conditioning_dropout(z_src, token_ids, rng)
    z_t = q_sample(z0, t, eps, schedule)
    eps_hat = denoiser(Tensor(z_t), t, token_ids, Tensor(z_src))
    diff = eps_hat - Tensor(eps)
    return (diff * diff).sum() * (1.0 / b)


def training_loss(samples, denoiser, schedule: NoiseSchedule,
                  codec: CodecConfig, rng: np.random.Generator) -> Tensor:
    """Objective over edit samples: encode targets/sources, then regress eps."""
    if not samples:
        raise ContractError("training batch is empty")
    z0 = np.stack([encode(s.target, codec) for s in samples])
    z_src = np.stack([encode(s.source, codec) for s in samples])
    ids = np.stack([s.token_ids for s in samples])
    return noise_prediction_loss(denoiser, z0, z_src, ids, schedule, rng)


def cfg_combine(eps_full: np.ndarray, eps_img_only: np.ndarray,
                eps_uncond: np.ndarray, text_scale: float,
                image_scale: float) -> np.ndarray:
    """uncond + s_I (img - uncond) + s_T (full - img)."""
    if not (eps_full.shape == eps_img_only.shape == eps_uncond.shape):
        raise DimensionError(
            f"guidance branches differ in shape: {eps_full.shape}, "
            f"{eps_img_only.shape}, {eps_uncond.shape}")
    return eps_uncond + image_scale * (eps_img_only - eps_uncond) \
        + text_scale * (eps_full - eps_img_only)


def _branch_coefficients(text_scale: float, image_scale: float):
    """cfg_combine rewritten as one affine combination per branch."""
    return {
        "full": text_scale,
        "img": image_scale - text_scale,
        "uncond": 1.0 - image_scale,
    }


def sampler_timesteps(schedule: NoiseSchedule, steps: int) -> np.ndarray:
    """Strictly decreasing subset of timesteps ending at 0."""
    return np.unique(np.round(np.linspace(schedule.steps - 1, 0, steps))
                     .astype(int))[::-1]


def requires_trained(denoiser) -> None:
    head = getattr(denoiser, "head", None) or getattr(denoiser, "conv_out", None)
    if head is not None and not np.any(head.weight.data):
        raise ContractError(
            "denoiser output head is all-zero (untrained model); "
            "train or load a checkpoint first")


def sample_edit_batch(sources: np.ndarray, token_ids: np.ndarray, denoiser,
                      codec: CodecConfig, schedule: NoiseSchedule,
                      guidance: GuidanceConfig, seed: int) -> np.ndarray:
    """Sample edited images for a batch of sources; deterministic in seed."""
    guidance.validate(schedule.steps)
    requires_trained(denoiser)
    b = len(sources)
    z_src = np.stack([encode(img, codec) for img in sources])
    null_ids = np.full_like(token_ids, NULL_TOKEN)
    zero_src = np.zeros_like(z_src)
    coeffs = _branch_coefficients(guidance.text_scale, guidance.image_scale)

    rng = np.random.default_rng(seed)
    z = rng.standard_normal(z_src.shape)
    ts = sampler_timesteps(schedule, guidance.steps)
    abar = schedule.alpha_bar

    with no_grad():
        for i, t in enumerate(ts):
            t_vec = np.full(b, t)
            z_t = Tensor(z)
            eps = np.zeros_like(z)
            if coeffs["full"]:
                eps = eps + coeffs["full"] * \
                    denoiser(z_t, t_vec, token_ids, Tensor(z_src)).data
            if coeffs["img"]:
                eps = eps + coeffs["img"] * \
                    denoiser(z_t, t_vec, null_ids, Tensor(z_src)).data
            if coeffs["uncond"]:
                eps = eps + coeffs["uncond"] * \
                    denoiser(z_t, t_vec, null_ids, Tensor(zero_src)).data

            abar_t = abar[t]
            abar_prev = abar[ts[i + 1]] if i + 1 < len(ts) else 1.0
            x0 = (z - np.sqrt(1.0 - abar_t) * eps) / np.sqrt(abar_t)
            if guidance.sampler == DETERMINISTIC:
                z = np.sqrt(abar_prev) * x0 + np.sqrt(1.0 - abar_prev) * eps
            else:
                beta_eff = 1.0 - abar_t / abar_prev
                mean = (z - beta_eff / np.sqrt(1.0 - abar_t) * eps) / \
                    np.sqrt(1.0 - beta_eff)
                if i + 1 < len(ts):
                    var = (1.0 - abar_prev) / (1.0 - abar_t) * beta_eff
                    mean = mean + np.sqrt(var) * rng.standard_normal(z.shape)
                z = mean

    return np.stack([np.clip(decode(lat, codec), 0.0, 1.0) for lat in z])


def sample_edit(source: np.ndarray, token_ids: np.ndarray, denoiser,
                codec: CodecConfig, schedule: NoiseSchedule,
                guidance: GuidanceConfig, seed: int) -> np.ndarray:
    """Edit a single source image; thin wrapper over the batched sampler."""
    out = sample_edit_batch(source[None], np.asarray(token_ids)[None], denoiser,
                            codec, schedule, guidance, seed)
    return out[0]
