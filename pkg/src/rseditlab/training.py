"""Seeded, resumable training driver.

Every step rebuilds its RNG from (run seed, step index), so a resumed run
replays the exact draw sequence of an uninterrupted one; checkpoints carry
model parameters plus optimizer moments.  The loss log (step, loss) is
byte-deterministic; wall-clock timings go to a separate file outside the
determinism contract.
"""

from __future__ import annotations

import time
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, load_model_state, model_state, save_checkpoint
from .codec import derive_codec_constants, encode
from .config import RunConfig, write_config
from .conditioning import ConditioningLayout
from .corpus import load_split
from .denoisers import build_denoiser, variant_config
from .diffusion import make_schedule, noise_prediction_loss
from .errors import ConfigurationError
from .optim import Adam
from .tensor import backward

_TRAIN_STREAM = 1


def config_for_layout(layout: str, base: RunConfig | None = None) -> RunConfig:
    """RunConfig with the block fields pinned to the layout's variant."""
    cfg = base if base is not None else RunConfig()
    cfg.layout = layout
    cfg.block = variant_config(ConditioningLayout.parse(layout), cfg.block)
    return cfg


def build_model(cfg: RunConfig):
    return build_denoiser(cfg.block, cfg.layout_kind, cfg.latent_shape,
                          cfg.vocab_size, seed=cfg.seed)


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(_TRAIN_STREAM, step)))


def checkpoint_path(run_dir, step: int) -> Path:
    return Path(run_dir) / f"ckpt-{step:06d}.bin"


def latest_checkpoint(run_dir) -> Path | None:
    candidates = sorted(Path(run_dir).glob("ckpt-*.bin"))
    return candidates[-1] if candidates else None


def smoothed_loss(losses, window: int = 50) -> float:
    losses = list(losses)
    if not losses:
        raise ConfigurationError("no losses to smooth")
    return float(np.mean(losses[-window:]))


def _write_loss_log(path: Path, rows) -> None:
    with open(path, "w") as fh:
        fh.write("step,loss\n")
        for step, loss in rows:
            fh.write(f"{step},{loss!r}\n")


def _read_loss_log(path: Path) -> list[tuple[int, float]]:
    rows = []
    if path.exists():
        for line in path.read_text().splitlines()[1:]:
            step, loss = line.split(",")
            rows.append((int(step), float(loss)))
    return rows


def train(cfg: RunConfig, corpus_dir, run_dir, resume: bool = False,
          max_steps: int | None = None) -> dict:
    """Train per config; returns paths and the in-memory loss history.

    ``max_steps`` optionally stops early (still checkpointing), which lets a
    caller split one deterministic trajectory across invocations.
    """
    cfg.validate()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    target_steps = min(max_steps, cfg.train_steps) if max_steps else cfg.train_steps

    samples = load_split(corpus_dir, "train")
    if len(samples) != cfg.corpus.train_samples:
        raise ConfigurationError(
            f"corpus has {len(samples)} train samples, config expects "
            f"{cfg.corpus.train_samples}")

    if cfg.codec_channel_mean is None or cfg.codec_channel_std is None:
        stack = np.stack([s.source for s in samples] +
                         [s.target for s in samples])
        cfg.set_codec(derive_codec_constants(stack, cfg.codec_spatial_factor))
    codec = cfg.codec_config()
    write_config(cfg, run_dir)
    digest = cfg.digest()

    z0 = np.stack([encode(s.target, codec) for s in samples])
    z_src = np.stack([encode(s.source, codec) for s in samples])
    ids = np.stack([s.token_ids for s in samples])

    model = build_model(cfg)
    opt = Adam(dict(model.named_parameters()), lr=cfg.optimizer.lr,
               beta1=cfg.optimizer.beta1, beta2=cfg.optimizer.beta2,
               eps=cfg.optimizer.eps)
    schedule = make_schedule(cfg.schedule.steps, cfg.schedule.beta_start,
                             cfg.schedule.beta_end)

    loss_path = run_dir / "loss_log.csv"
    timing_path = run_dir / "timing.csv"
    start_step = 0
    losses: list[tuple[int, float]] = []
    if resume:
        ckpt = latest_checkpoint(run_dir)
        if ckpt is not None:
            header, arrays = load_checkpoint(ckpt)
            if header["config_digest"] != digest:
                raise ConfigurationError(
                    f"checkpoint {ckpt} belongs to config "
                    f"{header['config_digest']}, current is {digest}")
            load_model_state(model, arrays)
            opt.load_state_arrays(arrays)
            start_step = header["step"]
            losses = [r for r in _read_loss_log(loss_path) if r[0] < start_step]

    def flush(step: int) -> None:
        arrays = dict(model_state(model))
        arrays.update(opt.state_arrays())
        save_checkpoint(checkpoint_path(run_dir, step), step, digest, arrays)
        _write_loss_log(loss_path, losses)

    timing_rows = []
    t_start = time.monotonic()
    for step in range(start_step, target_steps):
        rng = step_rng(cfg.seed, step)
        idx = rng.choice(len(samples), size=cfg.batch_size, replace=False)
        loss = noise_prediction_loss(model, z0[idx], z_src[idx], ids[idx],
                                     schedule, rng)
        backward(loss)
        opt.step()
        opt.zero_grad()
        losses.append((step, loss.item()))
        timing_rows.append((step, time.monotonic() - t_start))
        done = step + 1
        if done % cfg.checkpoint_every == 0 or done == target_steps:
            flush(done)

    with open(timing_path, "a") as fh:
        if fh.tell() == 0:
            fh.write("step,elapsed_seconds\n")
        for step, elapsed in timing_rows:
            fh.write(f"{step},{elapsed:.3f}\n")

    final = checkpoint_path(run_dir, target_steps)
    return {
        "run_dir": str(run_dir),
        "checkpoint": str(final),
        "loss_log": str(loss_path),
        "losses": [loss for _, loss in losses],
        "steps": target_steps,
    }
