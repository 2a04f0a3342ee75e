"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime fault.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import __version__
from .config import ConfigError, RunConfig, coerce, parse_config_text
from .critic import TrainingFault
from .data import (
    FaceDataset,
    InsufficientData,
    ManifestError,
    load_image,
    load_manifest,
    make_verification_pairs,
    prepare_hr,
    save_image,
    synth_toy_dataset,
    to_model,
    to_uint8,
    upsample_bilinear,
)
from .engine import PHASES, CheckpointError, Trainer
from .metrics import evaluate_sr, verification_accuracy, write_reports
from .recognizer import cosine_similarity
from .topology import topology_report

log = logging.getLogger("fhgan")

ARCH_KEYS = ("num_blocks", "num_layers", "growth_rate", "base", "llfe_channels", "bottleneck_channels",
             "upscale_factor", "upsample_channels", "kernel_size", "crop", "critic_widths",
             "embedding_dim", "recognizer_widths", "perceptual_widths")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="fhgan", description="Identity-preserving face hallucination toolkit")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("topology", parents=[common], help="print connectivity, channel and parameter accounting")

    t = sub.add_parser("train", parents=[common], help="run one training phase")
    t.add_argument("--phase", required=True, choices=PHASES)
    t.add_argument("--manifest")
    t.add_argument("--checkpoint", help="resume from / initialise with this checkpoint")

    h = sub.add_parser("hallucinate", parents=[common], help="super-resolve a directory of LR images")
    h.add_argument("--checkpoint", required=True)
    h.add_argument("--input", required=True, help="directory of LR PNGs")
    h.add_argument("--hr-dir", help="optional directory of matching HR PNGs for comparison grids")

    for name, help_ in (("evaluate", "PSNR/SSIM/verification report vs bilinear baseline"),
                        ("verify", "face verification accuracy on HR, SR and bilinear inputs")):
        e = sub.add_parser(name, parents=[common], help=help_)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--manifest")
        e.add_argument("--split", default="test", choices=("train", "val", "test", "all"))

    toy = sub.add_parser("toy", parents=[common], help="write the procedural toy dataset")
    toy.add_argument("--identities", type=int, default=8)
    toy.add_argument("--images", type=int, default=6)
    toy.add_argument("--holdout", type=int, default=2)
    return p


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    for flag, key in (("seed", "seed"), ("out", "out_dir"), ("manifest", "manifest"), ("checkpoint", "checkpoint")):
        v = getattr(args, flag, None)
        if v is not None:
            out[key] = v
    return out


def explicit_values(args) -> dict:
    """Keys set by the config file or command line (not defaults)."""
    values = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        values.update(parse_config_text(path.read_text(encoding="utf-8"), str(path)))
    values.update(_overrides(args))
    return coerce(values)


def resolve_config(args) -> RunConfig:
    return RunConfig(**explicit_values(args))


def _echo_config(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")


def load_models(checkpoint: str):
    """Trainer restored from ``checkpoint`` with every network in eval mode."""
    trainer = Trainer.load(checkpoint)
    for m in (trainer.generator, trainer.critic, trainer.recognizer):
        m.eval()
    return trainer


def _dataset(cfg: RunConfig, split: Optional[str]) -> FaceDataset:
    if not cfg.manifest:
        raise ConfigError("no manifest given (--manifest or manifest = ...)")
    return FaceDataset(load_manifest(cfg.manifest), None if split == "all" else split)


# --- commands ---------------------------------------------------------------

def cmd_topology(cfg: RunConfig, args) -> int:
    report = topology_report(cfg.network_spec())
    print(report)
    if args.out:
        _echo_config(cfg, Path(cfg.out_dir))
        (Path(cfg.out_dir) / "topology.txt").write_text(report + "\n", encoding="utf-8")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    out = Path(cfg.out_dir)
    train = _dataset(cfg, "train")
    if cfg.checkpoint:
        trainer = Trainer.load(cfg.checkpoint)
        explicit = explicit_values(args)
        changed = [k for k in ARCH_KEYS if k in explicit and explicit[k] != getattr(trainer.cfg, k)]
        if changed:
            raise ConfigError(f"architecture keys differ from checkpoint: {', '.join(changed)}")
        trainer.cfg = trainer.cfg.updated(explicit)
        if trainer.num_classes != train.num_classes:
            raise ConfigError(f"checkpoint has {trainer.num_classes} classes, manifest has {train.num_classes}")
    else:
        trainer = Trainer(cfg, train.num_classes)
    _echo_config(trainer.cfg, out)
    log_path = out / f"{args.phase}_log.jsonl"
    every = trainer.cfg.checkpoint_every
    with log_path.open("a", encoding="utf-8") as fh:
        def on_step(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            it = trainer.state.iteration
            if every and it % every == 0:
                trainer.save(out / f"{args.phase}_{it:07d}.ckpt")
            if it % 50 == 0:
                log.info("%s step %d %s", args.phase, it, {k: round(v, 5) for k, v in rec.items()
                                                            if isinstance(v, float)})

        records = trainer.run(args.phase, train, on_step=on_step)
    final = trainer.save(out / f"{args.phase}.ckpt")
    print(f"{args.phase}: {len(records)} steps, checkpoint {final}, log {log_path}")
    return 0


def cmd_hallucinate(cfg: RunConfig, args) -> int:
    src = Path(args.input)
    if not src.is_dir():
        raise FileNotFoundError(f"input directory not found: {src}")
    files = sorted(src.glob("*.png"))
    out = Path(cfg.out_dir)
    _echo_config(cfg, out)
    if not files:
        log.warning("no PNG files in %s; nothing to do", src)
        return 0
    trainer = load_models(cfg.checkpoint)
    for f in files:
        lr = to_model(load_image(f))[None]
        with torch.no_grad():
            sr = trainer.generator(lr)[0]
        save_image(out / f.name, sr)
        if args.hr_dir and (Path(args.hr_dir) / f.name).is_file():
            hr = to_model(load_image(Path(args.hr_dir) / f.name))
            up = upsample_bilinear(lr)[0]
            tiles = [to_uint8(up), to_uint8(sr)]
            if hr.shape == sr.shape:
                tiles.append(to_uint8(hr))
            from PIL import Image

            Image.fromarray(np.concatenate(tiles, axis=1)).save(out / f"grid_{f.name}")
    print(f"wrote {len(files)} images to {out}")
    return 0


def _verification(cfg: RunConfig, ds: FaceDataset):
    try:
        return make_verification_pairs(ds.records, cfg.verification_pairs, cfg.sub_seed("eval"))
    except InsufficientData as e:
        log.warning("skipping verification: %s", e)
        return []


def cmd_evaluate(cfg: RunConfig, args) -> int:
    ds = _dataset(cfg, args.split)
    trainer = load_models(cfg.checkpoint)
    pairs = [ds[i] for i in range(len(ds))]
    ver = _verification(cfg, ds)
    with torch.no_grad():
        reports = [
            evaluate_sr(trainer.generator, trainer.recognizer.embed, pairs, ver, name="model",
                        ssim_window=cfg.ssim_window),
            evaluate_sr(upsample_bilinear, trainer.recognizer.embed, pairs, ver, name="bilinear",
                        ssim_window=cfg.ssim_window),
        ]
    out = Path(cfg.out_dir)
    _echo_config(cfg, out)
    txt, js = write_reports(reports, out)
    for r in reports:
        print(r.summary())
    print(f"report: {txt} {js}")
    return 0


def cmd_verify(cfg: RunConfig, args) -> int:
    ds = _dataset(cfg, args.split)
    trainer = load_models(cfg.checkpoint)
    pairs = make_verification_pairs(ds.records, cfg.verification_pairs, cfg.sub_seed("eval"))
    embed = trainer.recognizer.embed
    sources = {
        "hr": lambda hr: hr,
        "sr": lambda hr: trainer.generator(_down(hr)),
        "bilinear": lambda hr: upsample_bilinear(_down(hr)),
    }
    results = {}
    with torch.no_grad():
        for name, make in sources.items():
            cache = {}

            def emb(path):
                if path not in cache:
                    cache[path] = embed(make(prepare_hr(load_image(path))[None]))[0]
                return cache[path]

            sims = [(float(cosine_similarity(emb(p.image_a), emb(p.image_b))), p.same_identity) for p in pairs]
            acc, thr = verification_accuracy(sims)
            results[name] = {"accuracy": acc, "threshold": thr, "pairs": len(sims)}
            print(f"[{name}] verification ACC {acc:.4f} (threshold {thr:.4f}, {len(sims)} pairs)")
    out = Path(cfg.out_dir)
    _echo_config(cfg, out)
    (out / "verify.json").write_text(json.dumps(results, indent=2), encoding="utf-8")
    return 0


def _down(hr):
    from .data import downsample_bilinear_x4

    return downsample_bilinear_x4(hr)


def cmd_toy(cfg: RunConfig, args) -> int:
    manifest, recs = synth_toy_dataset(cfg.out_dir, args.identities, args.images, cfg.seed, args.holdout)
    print(f"wrote {len(recs)} images, manifest {manifest}")
    return 0


COMMANDS = {
    "topology": cmd_topology,
    "train": cmd_train,
    "hallucinate": cmd_hallucinate,
    "evaluate": cmd_evaluate,
    "verify": cmd_verify,
    "toy": cmd_toy,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"fhgan: error: {e}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, UsageError) as e:
        print(f"fhgan: config error: {e}", file=sys.stderr)
        return 1
    except (FileNotFoundError, ManifestError, InsufficientData, CheckpointError, TrainingFault,
            ValueError, OSError) as e:
        print(f"fhgan: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
