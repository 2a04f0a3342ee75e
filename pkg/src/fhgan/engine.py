"""Training loops for the three networks, learning-rate schedules and checkpoints.

Randomness inside a step is a pure function of ``(seed, phase, iteration)``,
so resuming from a checkpoint replays an uninterrupted run exactly.
"""

from __future__ import annotations

import contextlib
import hashlib
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional

import numpy as np
import torch
import torch.nn as nn

from .config import RunConfig, build_critic
from .critic import TrainingFault, critic_loss, gradient_penalty, sample_interpolates
from .data import FaceDataset, TrainingBatch, sample_training_batch
from .generator import DSNet
from .losses import (
    FeatureExtractor,
    LossBreakdown,
    LossWeights,
    adversarial_g_term,
    identity_loss,
    perceptual_loss,
    pixel_loss,
    total_loss,
)
from .recognizer import FaceRecognizer, fr_batch_loss

log = logging.getLogger(__name__)

PHASES = ("fr_pretrain", "gan_pretrain", "joint")
CHECKPOINT_MAGIC = b"FHGANCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class Schedule:
    gan_lr: float = 1e-3
    gan_decay_steps: tuple = (30000, 45000)
    gan_total_steps: int = 56000
    fr_lr: float = 1e-2
    fr_decay_epochs: tuple = (15, 18)
    fr_epochs: int = 20
    joint_lr: float = 1e-4
    joint_epochs: int = 4

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "Schedule":
        return cls(cfg.gan_lr, cfg.gan_decay_steps, cfg.gan_total_steps, cfg.fr_lr,
                   cfg.fr_decay_epochs, cfg.fr_epochs, cfg.joint_lr, cfg.joint_epochs)


def lr_schedule(phase: str, t: float, schedule: Schedule = Schedule()) -> float:
    """Learning rate at iteration ``t`` (gan_pretrain) or epoch ``t`` (fr_pretrain, joint)."""
    if phase == "gan_pretrain":
        return schedule.gan_lr * 0.1 ** sum(t >= s for s in schedule.gan_decay_steps)
    if phase == "fr_pretrain":
        return schedule.fr_lr * 0.1 ** sum(t >= e for e in schedule.fr_decay_epochs)
    if phase == "joint":
        return schedule.joint_lr
    raise ValueError(f"unknown phase {phase!r}")


@dataclass
class TrainState:
    phase: str = "gan_pretrain"
    iteration: int = 0
    epoch: int = 0
    lrs: dict = field(default_factory=dict)
    seed: int = 0


@contextlib.contextmanager
def frozen(*modules: nn.Module):
    """Temporarily disable gradients for every parameter of ``modules``."""
    saved = [(p, p.requires_grad) for m in modules for p in m.parameters()]
    for p, _ in saved:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in saved:
            p.requires_grad_(flag)


def _check_finite(value: torch.Tensor, what: str) -> None:
    if not torch.isfinite(value).all():
        raise TrainingFault(f"non-finite {what}: {value.detach().flatten()[:4].tolist()}")


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for g in opt.param_groups:
        g["lr"] = lr


class Trainer:
    """Owns the generator, critic, recognizer, optimizers and :class:`TrainState`."""

    def __init__(self, cfg: RunConfig, num_classes: int, dtype: torch.dtype = torch.float32):
        self.cfg = cfg
        self.num_classes = num_classes
        self.schedule = Schedule.from_config(cfg)
        torch.manual_seed(cfg.sub_seed("init"))
        self.generator = DSNet(cfg.network_spec()).to(dtype)
        self.critic = build_critic(cfg).to(dtype)
        self.recognizer = FaceRecognizer(cfg.arcface(num_classes), cfg.recognizer_widths).to(dtype)
        self.phi = FeatureExtractor(cfg.perceptual_widths, seed=cfg.sub_seed("perceptual")).to(dtype)
        # recognizer batch norm uses batch statistics only inside fr_step
        self.recognizer.eval()
        betas = (cfg.adam_beta1, cfg.adam_beta2)
        self.opt_g = torch.optim.Adam(self.generator.parameters(), lr=cfg.gan_lr, betas=betas, eps=cfg.adam_eps)
        self.opt_d = torch.optim.Adam(self.critic.parameters(), lr=cfg.gan_lr, betas=betas, eps=cfg.adam_eps)
        self.opt_fr = torch.optim.SGD(self.recognizer.parameters(), lr=cfg.fr_lr, momentum=cfg.sgd_momentum)
        self.state = TrainState(seed=cfg.seed)

    # --- per-step randomness ------------------------------------------------

    def _seed(self, stream: str, *extra: int) -> int:
        ss = np.random.SeedSequence([self.cfg.sub_seed(stream), PHASES.index(self.state.phase),
                                     self.state.iteration, *extra])
        return int(ss.generate_state(1)[0])

    def batch(self, dataset: FaceDataset, batch_size: Optional[int] = None) -> TrainingBatch:
        return sample_training_batch(dataset, batch_size or self.cfg.batch_size, self._seed("data"))

    def labels(self, dataset: FaceDataset, identities) -> torch.Tensor:
        return torch.tensor([dataset.class_index[i] for i in identities], dtype=torch.long)

    # --- single updates -----------------------------------------------------

    def critic_step(self, batch: TrainingBatch, k: int = 0) -> float:
        """One Adam update of the critic on the WGAN-GP loss (generator frozen)."""
        with torch.no_grad():
            sr = self.generator(batch.lr.to(self._dtype))
        hr = batch.hr.to(self._dtype)
        gen = torch.Generator().manual_seed(self._seed("gan", k))
        penalty = gradient_penalty(self.critic, sample_interpolates(hr, sr, gen), self.cfg.gp_weight)
        loss = critic_loss(self.critic, hr, sr, penalty)
        _check_finite(loss, "critic loss")
        self.opt_d.zero_grad(set_to_none=True)
        loss.backward()
        self.opt_d.step()
        return loss.item()

    def generator_losses(self, batch: TrainingBatch, weights: LossWeights) -> LossBreakdown:
        hr = batch.hr.to(self._dtype)
        sr = self.generator(batch.lr.to(self._dtype))
        parts = {}
        terms = {
            "perceptual": (weights.perceptual, lambda: perceptual_loss(self.phi, hr, sr)),
            "adversarial": (weights.adversarial, lambda: adversarial_g_term(self.critic, sr)),
            "identity": (weights.identity, lambda: identity_loss(self.recognizer.embed, hr, sr)),
        }
        for name, (w, fn) in terms.items():
            if w > 0:
                parts[name] = fn()
            else:
                # reported for the log, kept out of the graph
                with torch.no_grad():
                    parts[name] = fn()
        return total_loss(pixel_loss(hr, sr), parts["perceptual"], parts["adversarial"],
                          parts["identity"], weights)

    def generator_step(self, batch: TrainingBatch, weights: LossWeights) -> LossBreakdown:
        """One Adam update of the generator on the weighted total (critic, recognizer frozen)."""
        with frozen(self.critic, self.recognizer):
            bd = self.generator_losses(batch, weights)
            _check_finite(bd.total, "generator loss")
            self.opt_g.zero_grad(set_to_none=True)
            bd.total.backward()
            self.opt_g.step()
        return bd

    def fr_step(self, hr_batch, sr_batch, labels_hr, labels_sr) -> float:
        """One momentum-SGD update of backbone and class weights on the ArcFace loss."""
        self.recognizer.train()
        try:
            loss = fr_batch_loss(self.recognizer, hr_batch.to(self._dtype), sr_batch.detach().to(self._dtype),
                                 labels_hr, labels_sr)
        finally:
            self.recognizer.eval()
        _check_finite(loss, "recognizer loss")
        self.opt_fr.zero_grad(set_to_none=True)
        loss.backward()
        self.opt_fr.step()
        return loss.item()

    def joint_step(self, batch: TrainingBatch, labels: torch.Tensor, weights: LossWeights) -> dict:
        """``n_critic`` critic updates, one generator update, then one recognizer update."""
        d_losses = [self.critic_step(batch, k) for k in range(self.cfg.n_critic)]
        bd = self.generator_step(batch, weights)
        with torch.no_grad():
            sr = self.generator(batch.lr.to(self._dtype))
        h, s = batch.hr_half, batch.sr_half
        fr = self.fr_step(batch.hr[h], sr[s], labels[h], labels[s])
        return {"critic": d_losses[-1], **bd.as_dict(), "fr": fr, "sub_updates": len(d_losses) + 2}

    @property
    def _dtype(self) -> torch.dtype:
        return next(self.generator.parameters()).dtype

    # --- phases -------------------------------------------------------------

    def phase_length(self, phase: str, dataset_size: int) -> int:
        if self.cfg.steps > 0:
            return self.cfg.steps
        if phase == "gan_pretrain":
            return self.schedule.gan_total_steps
        bs = self.cfg.fr_batch_size if phase == "fr_pretrain" else self.cfg.batch_size
        epochs = self.schedule.fr_epochs if phase == "fr_pretrain" else self.schedule.joint_epochs
        return math.ceil(epochs * dataset_size / bs)

    def run(self, phase: str, dataset: FaceDataset, steps: Optional[int] = None,
            on_step: Optional[Callable[[dict], None]] = None) -> list[dict]:
        """Advance ``phase`` until its length (or ``steps`` more iterations); returns log records."""
        if phase not in PHASES:
            raise ValueError(f"unknown phase {phase!r}")
        if self.state.phase != phase:
            self.state.phase, self.state.iteration, self.state.epoch = phase, 0, 0
        end = self.phase_length(phase, len(dataset))
        if steps is not None:
            end = min(end, self.state.iteration + steps)
        records = []
        while self.state.iteration < end:
            rec = self.step(dataset)
            records.append(rec)
            if on_step:
                on_step(rec)
        return records

    def step(self, dataset: FaceDataset) -> dict:
        st = self.state
        bs = self.cfg.fr_batch_size if st.phase == "fr_pretrain" else self.cfg.batch_size
        st.epoch = st.iteration * bs // max(len(dataset), 1)
        t = st.iteration if st.phase == "gan_pretrain" else st.epoch
        lr = lr_schedule(st.phase, t, self.schedule)
        rec: dict = {"phase": st.phase, "iteration": st.iteration, "epoch": st.epoch, "lr": lr}
        if st.phase == "fr_pretrain":
            _set_lr(self.opt_fr, lr)
            batch = self.batch(dataset, bs)
            labels = self.labels(dataset, batch.identities)
            h, s = batch.hr_half, batch.sr_half
            rec["fr"] = self.fr_step(batch.hr[h], batch.hr[s], labels[h], labels[s])
        elif st.phase == "gan_pretrain":
            _set_lr(self.opt_g, lr)
            _set_lr(self.opt_d, lr)
            batch = self.batch(dataset)
            weights = self.cfg.loss_weights("gan_pretrain")
            if weights.adversarial > 0:
                rec["critic"] = [self.critic_step(batch, k) for k in range(self.cfg.n_critic)][-1]
            rec.update(self.generator_step(batch, weights).as_dict())
        else:
            for opt in (self.opt_g, self.opt_d, self.opt_fr):
                _set_lr(opt, lr)
            batch = self.batch(dataset)
            rec.update(self.joint_step(batch, self.labels(dataset, batch.identities),
                                       self.cfg.loss_weights("joint")))
        st.lrs = {"generator": self.opt_g.param_groups[0]["lr"], "critic": self.opt_d.param_groups[0]["lr"],
                  "recognizer": self.opt_fr.param_groups[0]["lr"]}
        st.iteration += 1
        return rec

    # --- checkpoint bundle --------------------------------------------------

    def bundle(self) -> dict:
        return {
            "config": self.cfg.to_text(),
            "config_digest": self.cfg.digest(),
            "num_classes": self.num_classes,
            "dtype": str(self._dtype).replace("torch.", ""),
            "generator": self.generator.state_dict(),
            "critic": self.critic.state_dict(),
            "recognizer": self.recognizer.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "opt_fr": self.opt_fr.state_dict(),
            "state": asdict(self.state),
        }

    @classmethod
    def from_bundle(cls, bundle: dict) -> "Trainer":
        from .config import load_config_text

        cfg = load_config_text(bundle["config"])
        if cfg.digest() != bundle["config_digest"]:
            raise CheckpointError("config digest mismatch")
        trainer = cls(cfg, bundle["num_classes"], getattr(torch, bundle["dtype"]))
        trainer.generator.load_state_dict(bundle["generator"])
        trainer.critic.load_state_dict(bundle["critic"])
        trainer.recognizer.load_state_dict(bundle["recognizer"])
        trainer.opt_g.load_state_dict(bundle["opt_g"])
        trainer.opt_d.load_state_dict(bundle["opt_d"])
        trainer.opt_fr.load_state_dict(bundle["opt_fr"])
        trainer.state = TrainState(**bundle["state"])
        return trainer

    def save(self, path) -> Path:
        return save_checkpoint(self.bundle(), path)

    @classmethod
    def load(cls, path) -> "Trainer":
        return cls.from_bundle(load_checkpoint(path))


def save_checkpoint(bundle: dict, path) -> Path:
    """Write ``magic | header length | JSON header | torch payload``; header carries a SHA-256."""
    buf = io.BytesIO()
    torch.save(bundle, buf)
    payload = buf.getvalue()
    header = json.dumps({
        "version": CHECKPOINT_VERSION,
        "payload_bytes": len(payload),
        "sha256": hashlib.sha256(payload).hexdigest(),
        "config_digest": bundle.get("config_digest"),
        "contents": sorted(bundle),
    }).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(CHECKPOINT_MAGIC + struct.pack("<I", len(header)) + header + payload)
    tmp.replace(path)
    return path


def read_checkpoint_header(path) -> tuple[dict, bytes]:
    data = Path(path).read_bytes()
    n = len(CHECKPOINT_MAGIC)
    if data[:n] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if len(data) < n + 4:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<I", data[n:n + 4])
    try:
        header = json.loads(data[n + 4:n + 4 + hlen])
    except (ValueError, UnicodeDecodeError):
        raise CheckpointError(f"{path}: corrupt header") from None
    return header, data[n + 4 + hlen:]


def load_checkpoint(path) -> dict:
    header, payload = read_checkpoint_header(path)
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {header.get('version')} != {CHECKPOINT_VERSION}")
    if len(payload) != header["payload_bytes"] or hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CheckpointError(f"{path}: payload digest mismatch (truncated or corrupted)")
    return torch.load(io.BytesIO(payload), weights_only=True)
