"""Command-line driver: generate | train | sample | evaluate | profile.

Exit codes: 0 success; 2 usage or configuration errors; 1 runtime failures.
Failures print a machine-readable JSON object to stderr:
``{"error": {"type": ..., "message": ...}}``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import RunConfig, read_config
from .conditioning import ConditioningLayout
from .corpus import encode_instruction, generate_corpus
from .diffusion import GuidanceConfig, make_schedule, sample_edit
from .errors import ConfigurationError, EditLabError
from .profiling import count_params, estimate_flops, paper_scale_profile, toy_profile
from .training import config_for_layout, train
from .tuning import apply_allocator_tuning

LAYOUT_CHOICES = [l.value for l in ConditioningLayout]


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rseditlab",
        description="Desk-scale text-guided satellite image editing testbed")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="RunConfig JSON file")
        p.add_argument("--seed", type=int, help="override config seed")

    gen = sub.add_parser("generate", help="write the synthetic editing corpus")
    common(gen)
    gen.add_argument("--out", type=Path, help="corpus output directory")

    tr = sub.add_parser("train", help="train one conditioning variant")
    common(tr)
    tr.add_argument("--corpus", type=Path, help="corpus directory")
    tr.add_argument("--out", type=Path, help="run output directory")
    tr.add_argument("--layout", choices=LAYOUT_CHOICES)
    tr.add_argument("--steps", type=int, help="optimizer steps")
    tr.add_argument("--batch", type=int, help="batch size")
    tr.add_argument("--resume", action="store_true",
                    help="continue from the latest checkpoint in --out")

    sa = sub.add_parser("sample", help="edit one image with a trained model")
    common(sa)
    sa.add_argument("--run", type=Path, help="training run directory")
    sa.add_argument("--checkpoint", type=Path, help="explicit checkpoint file")
    sa.add_argument("--source", type=Path, help="source PNG")
    sa.add_argument("--instruction", type=str, help='e.g. "DESTROY ALL"')
    sa.add_argument("--out", type=Path, help="edited PNG path")
    sa.add_argument("--steps", type=int, help="sampler steps")
    sa.add_argument("--guidance-text", type=float)
    sa.add_argument("--guidance-image", type=float)
    sa.add_argument("--sampler", choices=["ancestral", "deterministic"])

    ev = sub.add_parser("evaluate", help="score a checkpoint on the eval split")
    common(ev)
    ev.add_argument("--run", type=Path, help="training run directory")
    ev.add_argument("--checkpoint", type=Path)
    ev.add_argument("--corpus", type=Path)
    ev.add_argument("--out", type=Path)
    ev.add_argument("--steps", type=int, help="sampler steps")
    ev.add_argument("--guidance-text", type=float)
    ev.add_argument("--guidance-image", type=float)
    ev.add_argument("--sampler", choices=["ancestral", "deterministic"])
    ev.add_argument("--scores", type=Path,
                    help="JSONL of external {sample_id, sc, pq} ratings")
    ev.add_argument("--no-grids", action="store_true")

    pr = sub.add_parser("profile", help="parameter/FLOPs accounting")
    common(pr)
    pr.add_argument("--layout", choices=LAYOUT_CHOICES, required=False)
    pr.add_argument("--preset", choices=["toy", "paper_scale"], default="toy")
    pr.add_argument("--out", type=Path, help="write the JSON report here")
    return parser


def _require(value, flag: str):
    if value is None:
        raise ConfigurationError(f"missing required option {flag}")
    return value


def _load_config(args) -> RunConfig:
    if args.config:
        cfg = read_config(args.config)
    else:
        cfg = RunConfig()
    if getattr(args, "layout", None):
        cfg = config_for_layout(args.layout, cfg)
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "steps", None) is not None and args.command == "train":
        cfg.train_steps = args.steps
    if getattr(args, "batch", None) is not None:
        cfg.batch_size = args.batch
    cfg.validate()
    return cfg


def _guidance_from(cfg: RunConfig, args) -> GuidanceConfig:
    g = GuidanceConfig(text_scale=cfg.guidance.text_scale,
                       image_scale=cfg.guidance.image_scale,
                       sampler=cfg.guidance.sampler,
                       steps=cfg.guidance.steps)
    if args.guidance_text is not None:
        g.text_scale = args.guidance_text
    if args.guidance_image is not None:
        g.image_scale = args.guidance_image
    if args.steps is not None:
        g.steps = args.steps
    if getattr(args, "sampler", None):
        g.sampler = args.sampler
    return g


def _cmd_generate(args) -> int:
    cfg = _load_config(args)
    out = _require(args.out, "--out")
    summary = generate_corpus(cfg.corpus, cfg.seed, out)
    print(json.dumps({"corpus": str(out), **summary}))
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    corpus = _require(args.corpus, "--corpus")
    out = _require(args.out, "--out")
    if not Path(corpus).exists():
        raise ConfigurationError(f"corpus directory {corpus} does not exist")
    result = train(cfg, corpus, out, resume=args.resume)
    print(json.dumps({"run_dir": result["run_dir"],
                      "checkpoint": result["checkpoint"],
                      "final_loss": result["losses"][-1]}))
    return 0


def _cmd_sample(args) -> int:
    from .checkpoint import load_checkpoint, load_model_state
    from .imageio import load_image, save_image
    from .training import build_model, latest_checkpoint

    run = _require(args.run, "--run")
    source_path = _require(args.source, "--source")
    instruction = _require(args.instruction, "--instruction")
    out = _require(args.out, "--out")
    cfg = read_config(run)
    if args.seed is not None:
        cfg.seed = args.seed
    ckpt = args.checkpoint or latest_checkpoint(run)
    if ckpt is None:
        raise ConfigurationError(f"no checkpoint found under {run}")
    header, arrays = load_checkpoint(ckpt)
    model = build_model(cfg)
    load_model_state(model, arrays)
    schedule = make_schedule(cfg.schedule.steps, cfg.schedule.beta_start,
                             cfg.schedule.beta_end)
    guidance = _guidance_from(cfg, args)
    edited = sample_edit(load_image(source_path), encode_instruction(instruction),
                         model, cfg.codec_config(), schedule, guidance,
                         seed=cfg.seed)
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    save_image(out, edited)
    print(json.dumps({"edited": str(out), "seed": cfg.seed,
                      "checkpoint_step": header["step"]}))
    return 0


def _cmd_evaluate(args) -> int:
    from .evaluation import evaluate_run

    run = _require(args.run, "--run")
    corpus = _require(args.corpus, "--corpus")
    out = _require(args.out, "--out")
    if not Path(run).exists():
        raise ConfigurationError(f"run directory {run} does not exist")
    cfg = read_config(run)
    guidance = _guidance_from(cfg, args)
    report = evaluate_run(run, corpus, out,
                          checkpoint=args.checkpoint,
                          guidance=guidance, seed=args.seed,
                          scores_path=args.scores,
                          write_grids=not args.no_grids)
    print(json.dumps({"report": str(Path(out) / "report.json"),
                      "f1_dam": report["metrics"]["f1_dam"],
                      "baseline_f1_dam": report["identity_baseline"]["f1_dam"]}))
    return 0


def _cmd_profile(args) -> int:
    layout = ConditioningLayout.parse(_require(args.layout, "--layout"))
    preset = toy_profile(layout) if args.preset == "toy" \
        else paper_scale_profile(layout)
    report = count_params(preset).merged_with(estimate_flops(preset))
    payload = {"layout": layout.value, "preset": args.preset, **report.as_dict()}
    text = json.dumps(payload, sort_keys=True, indent=2)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    print(text)
    print(report.format_table(f"[{layout.value} @ {args.preset}]"),
          file=sys.stderr)
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "train": _cmd_train,
    "sample": _cmd_sample,
    "evaluate": _cmd_evaluate,
    "profile": _cmd_profile,
}


def main(argv=None) -> int:
    apply_allocator_tuning()
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except EditLabError as exc:
        payload = {"error": {"type": type(exc).__name__, "message": str(exc)}}
        print(json.dumps(payload), file=sys.stderr)
        return 2 if isinstance(exc, ConfigurationError) else 1
    except FileNotFoundError as exc:
        payload = {"error": {"type": "FileNotFoundError", "message": str(exc)}}
        print(json.dumps(payload), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
