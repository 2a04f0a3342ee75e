import copy
import math

import pytest
import torch
import torch.nn as nn

from fhgan.config import desk_config
from fhgan.critic import TrainingFault
from fhgan.data import FaceDataset, TrainingBatch, load_manifest
from fhgan.engine import (
    CHECKPOINT_MAGIC,
    CheckpointError,
    Schedule,
    Trainer,
    load_checkpoint,
    lr_schedule,
    save_checkpoint,
)
from fhgan.losses import LossWeights
from fhgan.recognizer import PairingViolation

TINY = dict(llfe_channels=8, bottleneck_channels=8, upsample_channels=4, growth_rate=4,
            critic_widths=(4, 4, 4, 4, 4), recognizer_widths=(4, 8), embedding_dim=8,
            perceptual_widths=(4, 4), batch_size=4, fr_batch_size=4)


def tiny_trainer(**kw):
    return Trainer(desk_config(**{**TINY, **kw}), num_classes=4)


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    from fhgan.data import synth_toy_dataset

    manifest, _ = synth_toy_dataset(tmp_path_factory.mktemp("eng"), 4, 3, seed=5)
    return FaceDataset(load_manifest(manifest))


def params(module):
    return [p.detach().clone() for p in module.parameters()]


def same(a, b):
    return all(torch.equal(x, y) for x, y in zip(a, b))


# --- schedules --------------------------------------------------------------

def test_gan_schedule():
    assert lr_schedule("gan_pretrain", 0) == 1e-3
    assert lr_schedule("gan_pretrain", 29_999) == 1e-3
    assert lr_schedule("gan_pretrain", 30_000) == pytest.approx(1e-4)
    assert lr_schedule("gan_pretrain", 50_000) == pytest.approx(1e-5)
    assert lr_schedule("gan_pretrain", 55_999) == pytest.approx(1e-5)
    assert Schedule().gan_total_steps == 56_000


def test_fr_and_joint_schedule():
    assert lr_schedule("fr_pretrain", 0) == pytest.approx(1e-2)
    assert lr_schedule("fr_pretrain", 16) == pytest.approx(1e-3)
    assert lr_schedule("fr_pretrain", 19) == pytest.approx(1e-4)
    assert Schedule().fr_epochs == 20
    assert lr_schedule("joint", 0) == lr_schedule("joint", 3) == 1e-4
    assert Schedule().joint_epochs == 4
    with pytest.raises(ValueError):
        lr_schedule("warmup", 0)


def test_phase_length_follows_schedule():
    tr = tiny_trainer()
    assert tr.phase_length("gan_pretrain", 100) == 56_000
    assert tr.phase_length("fr_pretrain", 100) == math.ceil(20 * 100 / 4)
    assert tr.phase_length("joint", 100) == 4 * 25


# --- critic step --------------------------------------------------------------

class ScalarCritic(nn.Module):
    """D(x) = a * mean(x)."""

    def __init__(self, a):
        super().__init__()
        self.a = nn.Parameter(torch.tensor(a))

    def forward(self, x):
        return self.a * x.flatten(1).mean(dim=1)


def _scalar_batch():
    hr = torch.full((2, 3, 112, 112), 0.5)
    lr = torch.zeros(2, 3, 28, 28)
    return TrainingBatch(hr, lr, [0, 1], [0], [1])


@pytest.mark.parametrize("a0", [0.5, -2.0, 400.0])
def test_critic_step_moves_against_gradient(a0):
    tr = tiny_trainer()
    tr.critic = ScalarCritic(a0)
    tr.opt_d = torch.optim.Adam(tr.critic.parameters(), lr=1e-2)
    batch = _scalar_batch()
    with torch.no_grad():
        sr = tr.generator(batch.lr)
    n = 3 * 112 * 112
    # analytic dL/da: mean D(sr) - mean D(hr) is a*(m_sr - m_hr); penalty 10*(|a|/sqrt(n) - 1)^2
    grad = (sr.mean() - batch.hr.mean()).item() + 20 * (abs(a0) / math.sqrt(n) - 1) * math.copysign(1, a0) / math.sqrt(n)
    tr.critic_step(batch)
    moved = tr.critic.a.item() - a0
    assert moved != 0 and math.copysign(1, moved) == -math.copysign(1, grad)


def test_critic_step_zero_lr_and_generator_untouched(toy):
    tr = tiny_trainer()
    batch = tr.batch(toy)
    g0 = params(tr.generator)
    for grp in tr.opt_d.param_groups:
        grp["lr"] = 0.0
    d0 = params(tr.critic)
    tr.critic_step(batch)
    assert same(d0, params(tr.critic))
    assert same(g0, params(tr.generator))


def test_critic_step_deterministic(toy):
    a, b = tiny_trainer(), tiny_trainer()
    batch = a.batch(toy)
    assert a.critic_step(batch) == b.critic_step(batch)
    assert same(params(a.critic), params(b.critic))


def test_critic_step_non_finite_aborts(toy):
    tr = tiny_trainer()
    batch = tr.batch(toy)
    batch.hr[0, 0, 0, 0] = float("nan")
    with pytest.raises(TrainingFault):
        tr.critic_step(batch)


# --- generator step -------------------------------------------------------------

def test_generator_step_overfits_one_batch(toy):
    tr = tiny_trainer()
    batch = tr.batch(toy)
    w = LossWeights(1, 0, 0, 0)
    losses = [tr.generator_step(batch, w).pixel.item() for _ in range(200)]
    assert losses[-1] <= 0.5 * losses[0]


def test_generator_step_freezes_others_and_keeps_identity(toy):
    tr = tiny_trainer()
    batch = tr.batch(toy)
    d0, r0 = params(tr.critic), params(tr.recognizer)
    w = LossWeights(1.0, 0.3, 0.2, 0.7)
    for _ in range(3):
        bd = tr.generator_step(batch, w)
        manual = w.pixel * bd.pixel + w.perceptual * bd.perceptual + w.adversarial * bd.adversarial + w.identity * bd.identity
        assert bd.total.item() == manual.item()
    assert same(d0, params(tr.critic)) and same(r0, params(tr.recognizer))
    assert all(p.requires_grad for p in tr.critic.parameters())


def test_generator_step_zero_lr(toy):
    tr = tiny_trainer()
    for grp in tr.opt_g.param_groups:
        grp["lr"] = 0.0
    g0 = params(tr.generator)
    tr.generator_step(tr.batch(toy), LossWeights())
    assert same(g0, params(tr.generator))


# --- recognizer step ------------------------------------------------------------

def test_fr_step_learns_three_classes():
    torch.manual_seed(0)
    gen = torch.Generator().manual_seed(0)
    protos = torch.randn(3, 3, 16, 16, generator=gen)
    tr = Trainer(desk_config(**{**TINY, "embedding_dim": 16, "recognizer_widths": (8, 16)}), num_classes=3)

    def draw(cls, n):
        return protos[cls] + 0.3 * torch.randn(n, 3, 16, 16, generator=gen)

    for step in range(300):
        a = step % 3
        b = (a + 1 + step // 3 % 2) % 3
        loss = tr.fr_step(draw(a, 3), draw(b, 3), [a] * 3, [b] * 3)
        assert math.isfinite(loss)
    x = torch.cat([draw(c, 10) for c in range(3)])
    y = torch.arange(3).repeat_interleave(10)
    with torch.no_grad():
        assert torch.equal(tr.recognizer.classify(x), y)


def test_fr_step_zero_lr_and_pairing(toy):
    tr = tiny_trainer()
    batch = tr.batch(toy)
    labels = tr.labels(toy, batch.identities)
    for grp in tr.opt_fr.param_groups:
        grp["lr"] = 0.0
    r0 = params(tr.recognizer)
    h, s = batch.hr_half, batch.sr_half
    tr.fr_step(batch.hr[h], batch.hr[s], labels[h], labels[s])
    assert same(r0, params(tr.recognizer))
    with pytest.raises(PairingViolation):
        tr.fr_step(batch.hr[h], batch.hr[h], labels[h], labels[h])


# --- joint step -----------------------------------------------------------------

def test_joint_step_sub_updates(toy):
    tr = tiny_trainer()
    batch = tr.batch(toy)
    rec = tr.joint_step(batch, tr.labels(toy, batch.identities), LossWeights())
    assert rec["sub_updates"] == 3
    tr3 = tiny_trainer(n_critic=3)
    assert tr3.joint_step(batch, tr3.labels(toy, batch.identities), LossWeights())["sub_updates"] == 5


def test_joint_without_identity_matches_generator_step(toy):
    a, b = tiny_trainer(), tiny_trainer()
    batch = a.batch(toy)
    w = LossWeights(1.0, 0.05, 0.001, 0.0)
    a.joint_step(batch, a.labels(toy, batch.identities), w)
    b.critic_step(batch)
    b.generator_step(batch, w)
    assert same(params(a.generator), params(b.generator))


def test_joint_smoke_50_steps(toy):
    tr = tiny_trainer(steps=50)
    logs = tr.run("joint", toy)
    assert len(logs) == 50
    for rec in logs:
        assert all(math.isfinite(rec[k]) for k in ("critic", "pixel", "perceptual", "adversarial", "identity", "total", "fr"))


# --- checkpoints / determinism ------------------------------------------------

def test_checkpoint_roundtrip(tmp_path, toy):
    tr = tiny_trainer(steps=2)
    tr.run("joint", toy)
    path = tr.save(tmp_path / "c.ckpt")
    back = Trainer.load(path)
    for name in ("generator", "critic", "recognizer"):
        sa, sb = getattr(tr, name).state_dict(), getattr(back, name).state_dict()
        assert sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)
    assert back.state == tr.state
    assert back.cfg == tr.cfg


def test_checkpoint_corruption_and_version(tmp_path):
    tr = tiny_trainer()
    path = tr.save(tmp_path / "c.ckpt")
    data = path.read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(data[:-100])
    with pytest.raises(CheckpointError, match="digest"):
        load_checkpoint(tmp_path / "trunc.ckpt")
    flipped = bytearray(data)
    flipped[-10] ^= 0xFF
    (tmp_path / "flip.ckpt").write_bytes(bytes(flipped))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "flip.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"hello")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.ckpt")
    patched = data.replace(b'"version": 1', b'"version": 9', 1)
    assert patched != data and patched.startswith(CHECKPOINT_MAGIC)
    (tmp_path / "v9.ckpt").write_bytes(patched)
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v9.ckpt")


def test_same_seed_same_log(toy):
    a = tiny_trainer(steps=4).run("joint", toy)
    b = tiny_trainer(steps=4).run("joint", toy)
    assert a == b
    c = tiny_trainer(steps=4, seed=1).run("joint", toy)
    assert a != c


@pytest.mark.parametrize("phase", ["gan_pretrain", "joint", "fr_pretrain"])
def test_resume_replays_trajectory(tmp_path, toy, phase):
    full = tiny_trainer(steps=6, pretrain_lambda_adversarial=0.01)
    expected = full.run(phase, toy)
    part = tiny_trainer(steps=6, pretrain_lambda_adversarial=0.01)
    first = part.run(phase, toy, steps=3)
    path = part.save(tmp_path / f"{phase}.ckpt")
    del part
    resumed = Trainer.load(path)
    rest = resumed.run(phase, toy)
    assert first + rest == expected
