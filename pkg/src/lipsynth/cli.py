"""Command-line surface: data synthesis, training, adaptation, inference.

Every subcommand takes its tunables from a config file (``--config``,
key=value lines) overridden by repeatable ``--set key=value`` flags and a
final ``--seed``.  Relative output paths resolve under ``$LIPSYNTH_ROOT``
when that variable is set.  Failures print one line,
``error:{code}: {message}``, and exit 2.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

from .clipio import ClipStore, resolve_waveform, save_clip
from .config import RunConfig
from .errors import LipsynthError, ValidationError
from .toyface import random_speakers, synthesize_clip

OUTPUT_ROOT_ENV = "LIPSYNTH_ROOT"


def _out_path(raw: str) -> Path:
    path = Path(raw)
    root = os.environ.get(OUTPUT_ROOT_ENV, "")
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def _load_config(args: argparse.Namespace) -> RunConfig:
    config = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got '{item}'")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    return config.with_overrides(overrides)


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default="",
                        help="config file of key=value lines")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    parser.add_argument("--seed", type=int, default=None,
                        help="seed for all randomness in this command")


def cmd_synth_data(args: argparse.Namespace) -> int:
    out = _out_path(args.out)
    speakers = random_speakers(args.speakers, args.seed or 0)
    if args.gains:
        gains = [float(g) for g in args.gains.split(",")]
        if len(gains) != args.speakers:
            raise ValidationError(
                f"--gains lists {len(gains)} values for {args.speakers} "
                f"speakers")
        speakers = [dataclasses.replace(spec, mouth_gain=gain,
                                        mouth_rest_open=0.0)
                    for spec, gain in zip(speakers, gains)]
    index = 0
    for clip_of_speaker in range(args.clips_per_speaker):
        for speaker_index, spec in enumerate(speakers):
            clip = synthesize_clip(spec, args.duration,
                                   seed=(args.seed or 0) * 100003 + index,
                                   size=args.size)
            name = f"spk{speaker_index}_clip{clip_of_speaker:04d}"
            save_clip(clip, out / name)
            index += 1
    print(f"wrote {index} clips ({args.speakers} speakers) to {out}")
    return 0


def cmd_train_syncnet(args: argparse.Namespace) -> int:
    from .pipeline import save_syncnet
    from .syncnet import train_syncnet

    config = _load_config(args)
    store = ClipStore.from_dir(_out_path(args.data))
    if store.size != config.image_size:
        config = config.with_overrides({"image_size": str(store.size)})
    result = train_syncnet(store, config)
    path = save_syncnet(result.model, config, _out_path(args.out))
    print(f"trained {config.steps} steps, final loss "
          f"{result.final_loss:.4f}; wrote {path}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    from .pipeline import (load_syncnet, save_backbone, save_discriminator)
    from .training import train_generalized

    config = _load_config(args)
    store = ClipStore.from_dir(_out_path(args.data))
    if store.size != config.image_size:
        config = config.with_overrides({"image_size": str(store.size)})
    syncnet = None
    if args.syncnet:
        syncnet, _ = load_syncnet(_out_path(args.syncnet))
    out_dir = _out_path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def checkpoint_hook(result, step, reason):
        save_backbone(result.backbone, config,
                      out_dir / f"backbone_step{step:06d}.ckpt")

    with open(out_dir / "loss.tsv", "w") as log_stream:
        result = train_generalized(
            store, config, syncnet=syncnet, log_stream=log_stream,
            on_checkpoint=checkpoint_hook)
    backbone_path = save_backbone(result.backbone, config,
                                  out_dir / "backbone.ckpt")
    save_discriminator(result.discriminator, config,
                       out_dir / "discriminator.ckpt")
    print(f"trained {config.steps} steps; wrote {backbone_path}")
    return 0


def cmd_personalize(args: argparse.Namespace) -> int:
    from .personalization import personalize
    from .pipeline import (load_backbone, load_discriminator, load_syncnet,
                           save_adapter)
    from .training import Discriminator

    backbone, base_config = load_backbone(_out_path(args.base))
    config = _load_config(args)
    # carry the base architecture; tune only the adaptation knobs
    merged = base_config.with_overrides({
        "lambda_person": repr(args.lambda_p),
        "epochs": str(args.epochs),
        "seed": str(config.seed),
        "lambda_sync": repr(config.lambda_sync),
        "lr_personal": repr(config.lr_personal),
        "widen_delta_scope":
            "true" if config.widen_delta_scope else "false",
    })
    if args.discriminator:
        discriminator, _ = load_discriminator(_out_path(args.discriminator))
    else:
        import torch
        torch.manual_seed(merged.seed)
        discriminator = Discriminator(merged.image_size,
                                      base=merged.disc_base,
                                      cap=merged.disc_max)
    syncnet = None
    if args.syncnet:
        syncnet, _ = load_syncnet(_out_path(args.syncnet))
    person = ClipStore.from_dir(_out_path(args.person_dir))
    general = ClipStore.from_dir(_out_path(args.general_dir))

    result = personalize(backbone, discriminator, person, general, merged,
                         syncnet=syncnet)
    if args.person_id:
        result.adapter.person_id = args.person_id
    path = save_adapter(result.adapter, merged, _out_path(args.out))
    dw_norm, dp_norm = result.adapter.delta_norms()
    print(f"adapted on {person.total_seconds():.1f}s of personal data "
          f"(|dW map| {dw_norm:.2e}, |dP| {dp_norm:.2e}); wrote {path}")
    return 0


def cmd_infer(args: argparse.Namespace) -> int:
    from .clipio import load_clip
    from .pipeline import infer, infer_to_dir, load_adapter, load_backbone

    backbone, config = load_backbone(_out_path(args.ckpt))
    adapter = None
    if args.adapter:
        adapter = load_adapter(_out_path(args.adapter), backbone, config)
    template = load_clip(_out_path(args.template))
    waveform = resolve_waveform(_out_path(args.audio))
    result = infer(backbone, template, waveform, config, adapter=adapter,
                   reference_index=args.ref_index, seed=args.seed or 0,
                   loop_template=args.loop_template,
                   feather_px=args.feather)
    out = infer_to_dir(result, _out_path(args.out))
    print(f"wrote {result.manifest['n_frames']} frames to {out} "
          f"(reference frame {result.reference_index})")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    from .pipeline import (load_adapter, load_backbone, load_syncnet,
                           self_driven_report)
    from .plots import plot_metrics_report

    backbone, config = load_backbone(_out_path(args.ckpt))
    adapter = None
    if args.adapter:
        adapter = load_adapter(_out_path(args.adapter), backbone, config)
    syncnet = None
    if args.syncnet:
        syncnet, _ = load_syncnet(_out_path(args.syncnet))
    store = ClipStore.from_dir(_out_path(args.data))
    report, _ = self_driven_report(backbone, store, config, adapter=adapter,
                                   syncnet=syncnet, seed=args.seed or 0)
    out_dir = _out_path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "report.tsv"
    report_path.write_text(report.to_tsv())
    figures = plot_metrics_report(report_path, out_dir)
    stats = report.aggregate()
    summary = "  ".join(f"{name} {stats[name][0]:.4f}"
                        for name in ("ssim", "psnr", "lmd", "mouth_corr"))
    print(f"evaluated {len(report.per_clip)} clips: {summary}")
    print(f"wrote {report_path} and {len(figures)} figures")
    return 0


def cmd_plot_metrics(args: argparse.Namespace) -> int:
    from .plots import plot_loss_curves, plot_metrics_report

    out_dir = _out_path(args.out_dir)
    written = []
    if args.loss:
        written.append(plot_loss_curves(_out_path(args.loss),
                                        out_dir / "loss_curves.png"))
    if args.report:
        written.extend(plot_metrics_report(_out_path(args.report), out_dir))
    if not written:
        raise ValidationError("nothing to plot: pass --loss and/or --report")
    print(f"wrote {len(written)} figures to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lipsynth",
        description="Audio-driven mouth inpainting on procedural toy faces.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a toy clip dataset")
    p.add_argument("--speakers", type=int, default=2)
    p.add_argument("--clips-per-speaker", type=int, required=True)
    p.add_argument("--duration", type=float, default=2.0,
                   help="clip length in seconds")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--gains", default="",
                   help="comma-separated per-speaker mouth gains")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train-syncnet", help="train the sync scorer")
    _add_config_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_syncnet)

    p = sub.add_parser("train", help="train the generalized backbone")
    _add_config_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--syncnet", default="",
                   help="sync scorer checkpoint (required when "
                        "lambda_sync > 0)")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("personalize", help="adapt a trained base to one "
                                           "speaker")
    _add_config_args(p)
    p.add_argument("--base", required=True, help="backbone checkpoint")
    p.add_argument("--person-dir", required=True)
    p.add_argument("--general-dir", required=True)
    p.add_argument("--discriminator", default="")
    p.add_argument("--syncnet", default="")
    p.add_argument("--lambda-p", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--person-id", default="")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_personalize)

    p = sub.add_parser("infer", help="drive a template clip with audio")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--adapter", default="")
    p.add_argument("--template", required=True, help="template clip dir")
    p.add_argument("--audio", required=True,
                   help="wav / .f32 / clip dir with driving audio")
    p.add_argument("--ref-index", type=int, default=None,
                   help="template reference frame (default: seeded random)")
    p.add_argument("--loop-template", action="store_true",
                   help="extend the template to the audio length by "
                        "palindromic looping instead of trimming the audio")
    p.add_argument("--feather", type=int, default=2,
                   help="blend feather width in pixels")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate",
                       help="self-driven metrics of a model on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--adapter", default="")
    p.add_argument("--syncnet", default="")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot-metrics",
                       help="render loss curves / report figures")
    p.add_argument("--loss", default="", help="training loss.tsv")
    p.add_argument("--report", default="", help="evaluation report.tsv")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_plot_metrics)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except LipsynthError as exc:
        print(f"error:{exc.code}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
