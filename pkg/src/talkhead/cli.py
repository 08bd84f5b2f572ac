"""Command-line entry point: ``talkhead <command> [options]``.

Exit codes: 0 success, 2 configuration, 3 file I/O, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from collections import Counter
from pathlib import Path

import numpy as np
import torch

from . import gradcheck as gc
from .config import GlobalConfig, apply_overrides, config_from_dict, load_config
from .data import CorpusManifest, TensorCorpus, load_corpus, read_wav, write_synthetic_corpus
from .encoders import log_mel
from .errors import DataIOError, InputError, NumericError, TalkHeadError
from .mesh_graph import MotionSequence, read_ptkm, write_ptkm
from .metrics import build_report
from .model import Batch
from .training import Trainer, load_checkpoint, model_from_checkpoint, save_checkpoint

ABLATION_FLAGS = {
    "adv": "disable_adv", "cos": "disable_cos", "orth": "disable_orth", "info": "disable_info",
    "cts": "disable_cts", "e-g": "disable_e_g", "audio-disent": "disable_audio_disent",
    "motion-disent": "disable_motion_disent",
}


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config document")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-path override, repeatable; beats the config file")
    p.add_argument("--seed", type=int, help="shorthand for train.seed and data.seed")


def _ablation_args(p: argparse.ArgumentParser) -> None:
    for flag, field in ABLATION_FLAGS.items():
        names = [f"--disable-{flag}"] + (["--disable-e_g"] if flag == "e-g" else [])
        p.add_argument(*names, dest=field, action="store_true")


def _overrides(args) -> list[str]:
    out = list(args.overrides)
    if args.seed is not None:
        out += [f"train.seed={args.seed}", f"data.seed={args.seed}"]
    for field in ABLATION_FLAGS.values():
        if getattr(args, field, False):
            out.append(f"train.ablations.{field}=true")
    return out


def _config(args) -> GlobalConfig:
    return load_config(args.config, _overrides(args))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="talkhead", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write the synthetic corpus")
    _config_args(p)
    p.add_argument("--out", help="corpus directory (default paths.corpus_dir)")

    p = sub.add_parser("train", help="stage 1 then stage 2 training")
    _config_args(p)
    _ablation_args(p)
    p.add_argument("--manifest", help="corpus manifest (default paths.manifest)")
    p.add_argument("--resume", metavar="PATH", help="continue from a checkpoint")
    p.add_argument("--stop-after", type=int, metavar="STEP",
                   help="stop once this many steps are done and checkpoint")

    p = sub.add_parser("generate", help="animate a mesh from audio")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--audio", required=True, help="mono 16-bit WAV")
    p.add_argument("--identity", type=int, required=True)
    p.add_argument("--style-reference", help="PTKM sequence supplying the motion style")
    p.add_argument("--output", required=True, help="PTKM file to write")

    p = sub.add_parser("eval", help="score a checkpoint on a corpus split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", help="corpus manifest (default paths.manifest of the checkpoint)")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--json", help="also write the report as JSON")
    p.add_argument("--ground-truth", action="store_true",
                   help="score the ground truth against itself (sanity check)")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--only", action="append", choices=sorted(gc.CHECKS), help="run a subset")
    return parser


# -- commands ----------------------------------------------------------------

def cmd_synth_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out or cfg.paths.corpus_dir)
    manifest = write_synthetic_corpus(out, cfg.data)
    splits = Counter(e.split for e in manifest.entries)
    print(f"wrote {len(manifest.entries)} sequences ({cfg.data.n_styles} styles) to {out}")
    print("  " + "  ".join(f"{s}={splits.get(s, 0)}" for s in ("train", "val", "test")))
    print(f"  manifest: {out / 'manifest.json'}")
    return 0


def cmd_train(args) -> int:
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        data = ckpt.config
        if args.config:
            data = load_config(args.config).to_dict()
        cfg = config_from_dict(apply_overrides(data, _overrides(args))).validate()
    else:
        ckpt, cfg = None, _config(args)
    manifest = args.manifest or cfg.paths.manifest
    corpus = TensorCorpus.from_manifest(manifest, cfg.model.n_mels)
    run_dir = Path(cfg.paths.checkpoint_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    log = run_dir / "loss_log.tsv"
    if ckpt is None:
        log.unlink(missing_ok=True)
        trainer = Trainer(cfg, corpus, log_path=log)
    else:
        trainer = Trainer.from_checkpoint(ckpt, corpus, cfg, log_path=log)
    end = cfg.train.total_steps if args.stop_after is None else min(args.stop_after, cfg.train.total_steps)

    if trainer.step < cfg.train.stage1_steps:
        trainer.run(min(end, cfg.train.stage1_steps))
        if trainer.step == cfg.train.stage1_steps:
            save_checkpoint(run_dir / "stage1.ptkc", trainer.checkpoint())
    trainer.run(end)
    name = "final.ptkc" if trainer.step == cfg.train.total_steps else f"step{trainer.step}.ptkc"
    save_checkpoint(run_dir / name, trainer.checkpoint())
    last = trainer.history[-1] if trainer.history else {}
    print(f"trained to step {trainer.step}/{cfg.train.total_steps}; checkpoint {run_dir / name}")
    if last:
        print("  last losses: " + " ".join(f"{k}={last[k]:.4g}" for k in ("motion", "adv", "cts", "total")))
    return 0


def _frames_for(samples: int, sample_rate: int, fps: float) -> int:
    return int(round(samples / sample_rate * fps))


def cmd_generate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = config_from_dict(ckpt.config)
    model = model_from_checkpoint(ckpt)
    if not 0 <= args.identity < model.num_identities:
        raise InputError(f"identity {args.identity} outside [0, {model.num_identities})")
    clip = read_wav(args.audio)
    if clip.sample_rate != cfg.model.sample_rate:
        raise DataIOError(f"audio must be sampled at {cfg.model.sample_rate} Hz, got {clip.sample_rate}")
    mel = log_mel(torch.from_numpy(clip.samples), cfg.model.n_mels)[None]
    frames = _frames_for(len(clip.samples), clip.sample_rate, cfg.data.fps)
    identity = torch.tensor([args.identity])
    ref = None
    if args.style_reference:
        seq = read_ptkm(args.style_reference, expected_vertices=model.topology.vertex_count)
        ref = torch.from_numpy(seq.frames)[None]
    out = model.generate(mel, identity, frames, style_reference=ref)
    write_ptkm(args.output, MotionSequence(out[0].numpy(), cfg.data.fps))
    print(f"wrote {frames} frames x {model.topology.vertex_count} vertices to {args.output}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = config_from_dict(ckpt.config)
    model = model_from_checkpoint(ckpt)
    manifest = CorpusManifest.load(args.manifest or cfg.paths.manifest)
    entries = [e for e in manifest.entries if e.split == args.split]
    examples = list(load_corpus(manifest, args.split))
    preds, gts, templates, codes = [], [], [], []
    with torch.no_grad():
        for ex in examples:
            mel = log_mel(torch.from_numpy(ex.audio.samples), cfg.model.n_mels)[None]
            gt = torch.from_numpy(ex.motion.frames)[None]
            identity = torch.tensor([ex.identity.index])
            if args.ground_truth:
                pred = gt
            else:
                pred = model.generate(mel, identity, gt.shape[1])
            codes.append(model.encode(Batch(mel, gt, identity))["s"][0].numpy())
            preds.append(pred[0].numpy())
            gts.append(ex.motion.frames)
            templates.append(ex.template)
    if not examples:
        print(f"split {args.split!r} is empty")
        return 0
    report = build_report(preds, gts, np.stack(templates), model.topology.lip_mask,
                          model.topology.upper_face_mask, [Path(e.mesh).stem for e in entries],
                          [e.identity for e in entries], np.stack(codes))
    print(report.to_table())
    if args.json:
        Path(args.json).write_text(report.to_json())
    return 0


def cmd_gradcheck(args) -> int:
    results = gc.run_all(args.only)
    print(gc.format_table(results))
    ok = all(r.passed for r in results) and gc.negative_control() and (args.only or not gc.missing_losses())
    if not ok:
        raise NumericError("gradient check failed")
    return 0


COMMANDS = {"synth-data": cmd_synth_data, "train": cmd_train, "generate": cmd_generate,
            "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(1)
    try:
        return COMMANDS[args.command](args)
    except TalkHeadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataIOError.exit_code


if __name__ == "__main__":
    sys.exit(main())
