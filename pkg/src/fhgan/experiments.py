"""Desk-scale experiment drivers shared by the acceptance suite and demo scripts."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import RunConfig, desk_config
from .data import FaceDataset, load_manifest, synth_toy_dataset, to_uint8, upsample_bilinear
from .engine import Trainer
from .metrics import psnr
from .recognizer import FaceRecognizer


def stack(ds: FaceDataset) -> tuple[torch.Tensor, torch.Tensor]:
    pairs = [ds[i] for i in range(len(ds))]
    return torch.stack([p.hr for p in pairs]), torch.stack([p.lr for p in pairs])


def mean_psnr(hr: torch.Tensor, sr: torch.Tensor) -> float:
    return float(np.mean([psnr(to_uint8(a), to_uint8(b)) for a, b in zip(hr, sr)]))


@dataclass
class ConvergenceResult:
    model_psnr: float
    bilinear_psnr: float
    initial_pixel: float
    final_pixel: float
    log: list


def convergence_run(workdir, steps: int = 500, seed: int = 0, **overrides) -> ConvergenceResult:
    """Pixel-loss-only generator training on an 8-image toy set, scored against bilinear."""
    manifest, _ = synth_toy_dataset(Path(workdir) / "toy8", 4, 2, seed=seed)
    ds = FaceDataset(load_manifest(manifest))
    cfg = desk_config(seed=seed, steps=steps, pretrain_lambda_pixel=1.0, pretrain_lambda_perceptual=0.0,
                      pretrain_lambda_adversarial=0.0, pretrain_lambda_identity=0.0, **overrides)
    trainer = Trainer(cfg, ds.num_classes)
    log = trainer.run("gan_pretrain", ds)
    hr, lr = stack(ds)
    with torch.no_grad():
        sr = trainer.generator(lr)
    return ConvergenceResult(mean_psnr(hr, sr), mean_psnr(hr, upsample_bilinear(lr)),
                             log[0]["pixel"], log[-1]["pixel"], log)


@torch.no_grad()
def embedding_distance(recognizer: FaceRecognizer, generator, ds: FaceDataset) -> float:
    """Mean ||FR(HR) - FR(G(LR))|| over ``ds`` with ``recognizer`` in eval mode."""
    recognizer.eval()
    hr, lr = stack(ds)
    return float((recognizer.embed(hr) - recognizer.embed(generator(lr))).norm(dim=1).mean())


@dataclass
class AblationResult:
    seed: int
    distance_with_identity: float
    distance_without_identity: float

    @property
    def identity_helps(self) -> bool:
        return self.distance_with_identity < self.distance_without_identity


def identity_ablation(
    workdir,
    seed: int,
    identity_weight: float = 1.0,
    fr_steps: int = 200,
    gan_steps: int = 100,
    joint_steps: int = 100,
    num_identities: int = 6,
    images_per_identity: int = 6,
    holdout: int = 2,
    **overrides,
) -> AblationResult:
    """Joint training with and without the identity term from one shared pretrained state.

    Distances are measured on held-out images with the reference recognizer
    frozen at the end of pretraining, so both arms use the same yardstick.
    """
    manifest, _ = synth_toy_dataset(Path(workdir) / f"toy_ablation_{seed}", num_identities,
                                    images_per_identity, seed=seed, holdout_per_identity=holdout)
    recs = load_manifest(manifest)
    train, test = FaceDataset(recs, "train"), FaceDataset(recs, "test")
    test.class_index = train.class_index
    base = desk_config(seed=seed, fr_decay_epochs=(10**6,), pretrain_lambda_perceptual=0.0,
                       pretrain_lambda_adversarial=0.0, pretrain_lambda_identity=0.0, **overrides)
    trainer = Trainer(base, train.num_classes)
    trainer.run("fr_pretrain", train, steps=fr_steps)
    trainer.run("gan_pretrain", train, steps=gan_steps)
    reference = copy.deepcopy(trainer.recognizer).eval()

    distances = {}
    for w in (identity_weight, 0.0):
        arm = Trainer.from_bundle(trainer.bundle())
        arm.cfg = arm.cfg.updated({"lambda_identity": w})
        arm.run("joint", train, steps=joint_steps)
        distances[w] = embedding_distance(reference, arm.generator, test)
    return AblationResult(seed, distances[identity_weight], distances[0.0])
