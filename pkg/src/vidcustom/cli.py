"""Command-line entry point: ``vidcustom <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import torch

from .config import ConfigError, RunConfig, parse_override

COMMANDS = ("pretrain-base", "make-fixtures", "train-subject", "train-motion", "compose", "generate-subject",
            "generate-motion", "fine-tune", "analyze-weights", "evaluate", "plot-report")


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def load_config(args) -> RunConfig:
    """CLI flag > config file > default."""
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    for item in args.set or ():
        cfg = parse_override(cfg, item)
    if args.seed is not None:
        cfg = cfg.updated(seed=args.seed)
    if getattr(args, "base", None):
        cfg = cfg.updated(base_checkpoint=str(args.base))
    return cfg


def _run_record(cfg: RunConfig) -> dict:
    from .storage import version_string

    return {"config": cfg.to_dict(), "version": version_string(), "seed": cfg.seed}


def _write_json(path, payload) -> None:
    from .storage import write_text_atomic

    write_text_atomic(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _log(out: Path, name: str):
    from .training import JsonlLog

    return JsonlLog(out / name)


def cmd_pretrain_base(args, cfg):
    from .backbone import pretrain_base, save_base
    from .training import JsonlLog

    if args.steps is not None:
        cfg = cfg.updated(pretrain_steps=args.steps)
    out = Path(args.out)
    log = JsonlLog(out.parent / f"{out.name}.log.jsonl")
    model = pretrain_base(cfg, log=log, progress=lambda m: print(m, file=sys.stderr))
    ck = save_base(out, model, cfg)
    print(f"base checkpoint {out} ({ck.content_hash[:12]})")


def cmd_make_fixtures(args, cfg):
    """Write the synthetic subject images and motion clip to disk for the demo workflow."""
    from PIL import Image
    import numpy as np

    from . import synthetic
    from .data import latent_to_pixels
    from .storage import save_tensor

    out = Path(args.out)
    subj = synthetic.subject_fixture()
    sdir = out / "subject"
    sdir.mkdir(parents=True, exist_ok=True)
    for name, img in zip(subj.names, subj.images):
        save_tensor(sdir / f"{name}.tensor", img[0])
    mot = synthetic.motion_fixture(cfg.frames)
    mdir = out / "motion"
    mdir.mkdir(parents=True, exist_ok=True)
    for name, video in zip(mot.names, mot.videos):
        save_tensor(mdir / f"{name}.tensor", video)
    (mdir / "captions.txt").write_text("".join(f"{n}\t{c}\n" for n, c in zip(mot.names, mot.captions)))
    pdir = out / "preview"
    pdir.mkdir(exist_ok=True)
    for name, img in zip(subj.names, subj.images):
        Image.fromarray(np.ascontiguousarray(latent_to_pixels(img[0]))).save(pdir / f"{name}.png")
    print(f"fixtures written to {out}")


def cmd_train_subject(args, cfg):
    from .backbone import build_backbone
    from .data import ingest_subject
    from .subject import save_subject, train_subject

    if args.class_word:
        cfg = cfg.updated(class_word=args.class_word)
    dataset = ingest_subject(args.data, cfg.latent_hw, cfg.latent_channels, cfg.class_word, cfg.prompt_template)
    out = Path(args.out)
    bb = build_backbone(cfg)
    model = train_subject(bb, dataset, cfg, _log(out.parent, f"{out.name}.log.jsonl"))
    ck = save_subject(out, model, cfg)
    print(f"subject checkpoint {out} ({ck.content_hash[:12]}) probe loss "
          f"{model.probes['initial']:.4f} -> {model.probes['final']:.4f}")


def cmd_train_motion(args, cfg):
    from .backbone import build_backbone
    from .data import ingest_motion
    from .motion import save_motion, train_motion

    dataset = ingest_motion(args.data, cfg.frames, cfg.latent_hw, cfg.latent_channels)
    out = Path(args.out)
    bb = build_backbone(cfg)
    model = train_motion(bb, dataset, cfg, _log(out.parent, f"{out.name}.log.jsonl"))
    ck = save_motion(out, model, cfg)
    print(f"motion checkpoint {out} ({ck.content_hash[:12]}) probe loss "
          f"{model.probes['initial']:.4f} -> {model.probes['final']:.4f}")


def _generate(args, cfg, use_subject, use_motion):
    from .backbone import build_backbone
    from .compose import generate, write_generation
    from .motion import load_motion
    from .subject import load_subject

    bb = build_backbone(cfg)
    subject = motion = None
    hashes = {}
    if use_subject:
        subject, hashes["subject"] = load_subject(args.subject, bb, cfg.strict)
    if use_motion:
        motion, hashes["motion"] = load_motion(args.motion, bb, cfg.strict)
    gen = generate(bb, args.prompt, cfg, cfg.seed, subject, motion, getattr(args, "guidance", None),
                   hashes=hashes)
    gen.metadata.update(_run_record(cfg))
    out = write_generation(args.out, gen, cfg, frames=not args.no_frames)
    print(f"video written to {out}")


def cmd_compose(args, cfg):
    _generate(args, cfg, True, True)


def cmd_generate_subject(args, cfg):
    _generate(args, cfg, True, False)


def cmd_generate_motion(args, cfg):
    _generate(args, cfg, False, True)


def cmd_fine_tune(args, cfg):
    from .analysis import fine_tune_for_analysis
    from .backbone import build_backbone
    from .data import ingest_motion, ingest_subject
    from .storage import save_checkpoint, version_string

    bb = build_backbone(cfg)
    if args.kind == "subject":
        dataset = ingest_subject(args.data, cfg.latent_hw, cfg.latent_channels, cfg.class_word, cfg.prompt_template)
    else:
        dataset = ingest_motion(args.data, cfg.frames, cfg.latent_hw, cfg.latent_channels)
    out = Path(args.out)
    before, after = fine_tune_for_analysis(bb, dataset, args.domain, cfg, _log(out.parent, f"{out.name}.log.jsonl"))
    meta = {"kind": "fine_tune", "domain": args.domain, "version": version_string(), "seed": cfg.seed}
    save_checkpoint(out, {f"unet.{k}": v for k, v in after.items()}, "base", cfg.to_dict(), meta)
    if args.before_out:
        save_checkpoint(args.before_out, {f"unet.{k}": v for k, v in before.items()}, "base", cfg.to_dict(),
                        dict(meta, kind="fine_tune_baseline"))
    print(f"fine-tuned checkpoint {out}")


def _unet_state(path) -> tuple[dict, str]:
    from .storage import load_checkpoint

    ck = load_checkpoint(path)
    state = {k[len("unet."):]: v for k, v in ck.by_role("base").items() if k.startswith("unet.")}
    if not state:
        raise CliError(f"{path} holds no UNet weights")
    return state, ck.content_hash


def cmd_analyze_weights(args, cfg):
    from .analysis import analyze
    from .backbone import build_backbone
    from .unet import enumerate_layers

    before, h_before = _unet_state(args.before)
    after, h_after = _unet_state(args.after)
    layers = enumerate_layers(build_backbone(cfg, base=None).unet)
    report = analyze(before, after, layers, args.domain,
                     {"before": h_before, "after": h_after, **_run_record(cfg)})
    out = Path(args.out)
    _write_json(out, report.to_dict())
    out.with_suffix(".txt").write_text(report.to_text())
    ranking = report.ranking()
    print(f"analysis written to {out}; top category: {ranking[0] if ranking else 'n/a'}")


def cmd_evaluate(args, cfg):
    from .metrics import default_providers, evaluate_run, format_report

    providers = default_providers(cfg.seed)
    records, agg = evaluate_run(args.videos, args.prompts, args.references, providers,
                                cfg.latent_hw, cfg.latent_channels)
    text = format_report(records, agg, providers)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    _write_json(out.with_suffix(".run.json"), _run_record(cfg))
    print(f"report for {len(records)} videos written to {out}")


def cmd_plot_report(args, cfg):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    panels = []
    if args.analysis:
        panels.append(("analysis", json.loads(Path(args.analysis).read_text())))
    for log in args.log or ():
        recs = [json.loads(line) for line in Path(log).read_text().splitlines() if line.strip()]
        panels.append(("log", (Path(log).name, recs)))
    if not panels:
        raise CliError("plot-report needs --analysis and/or --log")
    fig, axes = plt.subplots(1, len(panels), figsize=(5 * len(panels), 3.5), squeeze=False)
    for ax, (kind, data) in zip(axes[0], panels):
        if kind == "analysis":
            means = data["per_category_mean"]
            cats = list(means)
            ax.bar(range(len(cats)), [means[c] for c in cats], color="tab:blue")
            ax.set_xticks(range(len(cats)), [c.replace("_", "\n") for c in cats])
            ax.set_ylabel("mean weight change rate")
            ax.set_title(f"{data['domain']} parameters")
        else:
            name, recs = data
            for stage in dict.fromkeys(r.get("stage", "train") for r in recs):
                ys = [r["loss"] for r in recs if r.get("stage", "train") == stage]
                ax.plot(range(len(ys)), ys, label=stage, lw=0.8)
            ax.set_yscale("log")
            ax.set_xlabel("step")
            ax.set_ylabel("loss")
            ax.set_title(name)
            ax.legend(fontsize=7)
    fig.tight_layout()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out)
    plt.close(fig)
    print(f"plot written to {out}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vidcustom", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True)
        p.set_defaults(fn=fn)
        return p

    p = add("pretrain-base", cmd_pretrain_base, "pretrain the toy backbone on the synthetic world")
    p.add_argument("--steps", type=int)
    add("make-fixtures", cmd_make_fixtures, "write the synthetic subject and motion fixtures")

    p = add("train-subject", cmd_train_subject, "textual identity + identity adapter")
    p.add_argument("--data", required=True, help="directory of subject images")
    p.add_argument("--class-word")
    p.add_argument("--base")

    p = add("train-motion", cmd_train_motion, "motion adapter with appearance guidance")
    p.add_argument("--data", required=True, help="directory of videos plus captions.txt")
    p.add_argument("--base")

    for name, fn, subj, mot in (("compose", cmd_compose, True, True),
                                ("generate-subject", cmd_generate_subject, True, False),
                                ("generate-motion", cmd_generate_motion, False, True)):
        p = add(name, fn, f"sample with {'subject ' if subj else ''}{'motion ' if mot else ''}adapters")
        if subj:
            p.add_argument("--subject", required=True)
        if mot:
            p.add_argument("--motion", required=True)
            p.add_argument("--guidance", help="guidance image (image file or latent .tensor)")
        p.add_argument("--prompt", required=True)
        p.add_argument("--no-frames", action="store_true", help="skip the PNG frame dump")
        p.add_argument("--base")

    p = add("fine-tune", cmd_fine_tune, "full fine-tune of one parameter domain for weight analysis")
    p.add_argument("--data", required=True)
    p.add_argument("--kind", choices=("subject", "motion"), default="subject")
    p.add_argument("--domain", choices=("spatial", "temporal"), default="spatial")
    p.add_argument("--before-out", help="also write the unmodified base here")
    p.add_argument("--base")

    p = add("analyze-weights", cmd_analyze_weights, "per-layer weight change rates")
    p.add_argument("--before", required=True)
    p.add_argument("--after", required=True)
    p.add_argument("--domain", choices=("spatial", "temporal"), required=True)

    p = add("evaluate", cmd_evaluate, "CLIP-T / CLIP-I / DINO-I / temporal consistency")
    p.add_argument("--videos", required=True)
    p.add_argument("--prompts", required=True)
    p.add_argument("--references", required=True)

    p = add("plot-report", cmd_plot_report, "bar chart of category means and training curves")
    p.add_argument("--analysis")
    p.add_argument("--log", action="append")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = load_config(args)
        torch.manual_seed(cfg.seed)
        args.fn(args, cfg)
        return 0
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (CliError, ConfigError) as exc:
        print(f"vidcustom: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - one-line diagnostic for any failure
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"vidcustom: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
