"""Held-out evaluation: sample edits, derive damage masks, score change F1.

Predicted masks come from per-footprint mean-change classification against
thresholds calibrated on the corpus generator's own transforms.  The report
always includes the copy-source identity baseline (zero pixel change, so
every footprint classifies as damage level 1).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, load_model_state
from .config import RunConfig, read_config
from .corpus import (calibrate_change_thresholds, load_split,
                     predicted_damage_mask)
from .diffusion import GuidanceConfig, make_schedule, sample_edit_batch
from .errors import ConfigurationError, InputError
from .imageio import save_image
from .metrics import (ConfusionCounts, VIESample, aggregate_vie,
                      confusion_counts, f1_dam, f1_per_class, f1_weighted)
from .parallel import thread_map
from .training import build_model

_EVAL_STREAM = 2


def eval_seed(seed: int, batch_index: int) -> int:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(_EVAL_STREAM, batch_index))
    return int(ss.generate_state(1)[0])


def _metric_block(total: ConfusionCounts) -> dict:
    per_class = f1_per_class(total)
    return {
        "per_class_f1": [None if np.isnan(v) else float(v) for v in per_class],
        "f1_dam": f1_dam(per_class),
        "f1_weighted": f1_weighted(per_class, total.n),
        "f1_weighted_pct": 100.0 * f1_weighted(per_class, total.n),
        "confusion": {
            "tp": total.tp.tolist(), "fp": total.fp.tolist(),
            "fn": total.fn.tolist(), "n": total.n.tolist(),
        },
    }


def load_vie_scores(path) -> list[VIESample]:
    samples = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            samples.append(VIESample(sc=float(rec["sc"]), pq=float(rec["pq"])))
    if not samples:
        raise InputError(f"no rating records in {path}")
    return samples


def grid_image(source: np.ndarray, edited: np.ndarray,
               target: np.ndarray) -> np.ndarray:
    """source | edited | target side by side with 2px white separators."""
    sep = np.ones((3, source.shape[1], 2))
    return np.concatenate([source, sep, edited, sep, target], axis=2)


def evaluate_run(run_dir, corpus_dir, out_dir, checkpoint: str | None = None,
                 guidance: GuidanceConfig | None = None,
                 seed: int | None = None,
                 scores_path: str | None = None,
                 write_grids: bool = True) -> dict:
    run_dir = Path(run_dir)
    cfg = read_config(run_dir)
    ckpt_path = Path(checkpoint) if checkpoint else None
    if ckpt_path is None:
        from .training import latest_checkpoint
        ckpt_path = latest_checkpoint(run_dir)
    if ckpt_path is None or not ckpt_path.exists():
        raise ConfigurationError(f"no checkpoint found under {run_dir}")
    header, arrays = load_checkpoint(ckpt_path)
    if header["config_digest"] != cfg.digest():
        raise ConfigurationError(
            f"checkpoint digest {header['config_digest']} does not match "
            f"run config digest {cfg.digest()}")

    model = build_model(cfg)
    load_model_state(model, arrays)
    codec = cfg.codec_config()
    schedule = make_schedule(cfg.schedule.steps, cfg.schedule.beta_start,
                             cfg.schedule.beta_end)
    guidance = guidance if guidance is not None else cfg.guidance
    guidance.validate(schedule.steps)
    seed = cfg.seed if seed is None else seed

    samples = load_split(corpus_dir, "eval")
    usable = [s for s in samples if s.mask is not None]
    skipped = len(samples) - len(usable)

    batches = [usable[i:i + cfg.batch_size]
               for i in range(0, len(usable), cfg.batch_size)]

    def run_batch(item):
        index, batch = item
        sources = np.stack([s.source for s in batch])
        ids = np.stack([s.token_ids for s in batch])
        return sample_edit_batch(sources, ids, model, codec, schedule,
                                 guidance, seed=eval_seed(seed, index))

    edited_batches = thread_map(run_batch, list(enumerate(batches)))
    edited = [img for batch in edited_batches for img in batch]

    thresholds = calibrate_change_thresholds(cfg.corpus)
    total = ConfusionCounts()
    baseline_total = ConfusionCounts()
    rows = []
    out_dir = Path(out_dir)
    grids_dir = out_dir / "grids"
    if write_grids:
        grids_dir.mkdir(parents=True, exist_ok=True)
    else:
        out_dir.mkdir(parents=True, exist_ok=True)

    for sample, img in zip(usable, edited):
        pred = predicted_damage_mask(sample.source, img, sample.mask, thresholds)
        base = predicted_damage_mask(sample.source, sample.source, sample.mask,
                                     thresholds)
        total = total + confusion_counts(pred, sample.mask)
        baseline_total = baseline_total + confusion_counts(base, sample.mask)
        rows.append({
            "sample_id": sample.sample_id,
            "instruction": sample.instruction,
            "mean_change": float(np.abs(img - sample.source).mean()),
        })
        if write_grids:
            save_image(grids_dir / f"{sample.sample_id}.png",
                       grid_image(sample.source, img, sample.target))

    report = {
        "run": {
            "config_digest": cfg.digest(),
            "layout": cfg.layout,
            "checkpoint_step": header["step"],
            "seed": seed,
            "guidance": {"text_scale": guidance.text_scale,
                         "image_scale": guidance.image_scale,
                         "sampler": guidance.sampler,
                         "steps": guidance.steps},
            "preset_note": "toy-scale shape-world corpus; values are "
                           "corpus-specific, not comparable across corpora",
        },
        "metrics": _metric_block(total),
        "identity_baseline": _metric_block(baseline_total),
        "change_thresholds": [float(t) for t in thresholds],
        "samples": rows,
        "skipped_samples": skipped,
        "vie": None,
    }
    if scores_path:
        report["vie"] = aggregate_vie(load_vie_scores(scores_path))

    report_path = out_dir / "report.json"
    report_path.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    return report
