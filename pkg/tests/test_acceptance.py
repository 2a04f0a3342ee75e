"""End-to-end acceptance checks, one test per criterion.

Each check prints a single ``criterion N: PASS|FAIL`` line; the lines are
repeated in the pytest terminal summary. Run on its own with
``pytest tests/test_acceptance.py -s``.
"""

import contextlib
import math
import time

import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F

from fd import central_diff, rel_error
from fhgan.config import desk_config
from fhgan.critic import Critic, gradient_penalty
from fhgan.data import FaceDataset, load_manifest, synth_toy_dataset
from fhgan.engine import Trainer
from fhgan.experiments import convergence_run, identity_ablation
from fhgan.generator import DSNet, SparseBlock
from fhgan.losses import FeatureExtractor, identity_loss, perceptual_loss, pixel_loss
from fhgan.metrics import psnr, ssim, verification_accuracy
from fhgan.recognizer import ArcFaceConfig, Backbone, arcface_loss, l2_normalize
from fhgan.topology import BlockSpec, NetworkSpec, depth_accounting, parameter_count, predecessors

RESULTS: dict[int, str] = {}

ABLATION_SEEDS = (0, 1, 2)
ABLATION_IDENTITY_WEIGHT = 1000.0


@contextlib.contextmanager
def criterion(n: int, name: str, budget: float):
    start = time.perf_counter()
    try:
        yield
        elapsed = time.perf_counter() - start
        assert elapsed < budget, f"took {elapsed:.1f}s, budget {budget:.0f}s"
    except BaseException as exc:
        RESULTS[n] = f"criterion {n:2d}: FAIL  {name} ({exc})"
        print("\n" + RESULTS[n])
        raise
    RESULTS[n] = f"criterion {n:2d}: PASS  {name} ({elapsed:.1f}s)"
    print("\n" + RESULTS[n])


def brute_predecessors(l, c):
    out = []
    for p in range(l - 1, -1, -1):
        d = l - p
        while d % c == 0:
            d //= c
        if d == 1:
            out.append(p)
    return tuple(out)


def test_criterion_01_topology_oracle():
    with criterion(1, "topology oracle", 1.0):
        for c in (2, 3):
            for l in range(1, 65):
                assert predecessors(l, c) == brute_predecessors(l, c)
        assert depth_accounting(NetworkSpec()) == 41


def test_criterion_02_parameter_reduction():
    with criterion(2, "parameter reduction", 1.0):
        g, c0, k = 32, 64, 9

        def by_hand(preds):
            return sum(sum(c0 if p == 0 else g for p in ps) * g * k for ps in preds)

        sparse = by_hand([brute_predecessors(l, 2) for l in range(1, 7)])
        dense = by_hand([tuple(range(l)) for l in range(1, 7)])
        assert (sparse, dense) == (156_672, 248_832)
        assert parameter_count(BlockSpec(), "sparse") == sparse
        assert parameter_count(BlockSpec(), "dense") == dense
        assert sparse / dense == pytest.approx(0.630, abs=5e-4)
        for b in range(1, 7):
            spec = NetworkSpec(num_blocks=b)
            assert parameter_count(spec, "sparse") < parameter_count(spec, "dense")


def test_criterion_03_gradient_suite(float64):
    tol = 1e-4
    with criterion(3, "gradient suite vs finite differences", 120.0):
        torch.manual_seed(0)
        spec = NetworkSpec(num_blocks=2, llfe_channels=6, bottleneck_channels=6, upscale_factor=2,
                           upsample_channels=3, block=BlockSpec(num_layers=3, growth_rate=4))
        net = DSNet(spec)
        with torch.no_grad():
            for m in net.modules():
                if isinstance(m, nn.Conv2d):
                    m.bias.normal_(0, 0.1)  # move off the zero-bias init so biases are exercised
        x = torch.randn(1, 3, 8, 8, requires_grad=True)
        net(x).sum().backward()
        f = lambda: net(x).sum()
        assert rel_error(x.grad, central_diff(f, x)) < tol
        with torch.no_grad():
            for name, p in net.named_parameters():
                assert rel_error(p.grad, central_diff(f, p)) < tol, name

        cfg = ArcFaceConfig(scale=64.0, margin=0.5, num_classes=3, embedding_dim=4)
        emb = l2_normalize(torch.randn(5, 4))
        labels = torch.tensor([0, 1, 2, 0, 1])
        weights = torch.randn(3, 4, requires_grad=True)
        arcface_loss(emb, labels, weights, cfg).backward()
        fd = central_diff(lambda: arcface_loss(emb, labels, weights, cfg), weights)
        assert rel_error(weights.grad, fd) < tol

        hr = torch.randn(2, 3, 8, 8)
        phi = FeatureExtractor((3, 4), seed=1)
        backbone = Backbone(embedding_dim=4, widths=(2, 4)).eval()
        embed = lambda t: l2_normalize(backbone(t))
        for loss in (lambda s: pixel_loss(hr, s), lambda s: perceptual_loss(phi, hr, s),
                     lambda s: identity_loss(embed, hr, s)):
            sr = torch.randn(2, 3, 8, 8, requires_grad=True)
            loss(sr).backward()
            assert rel_error(sr.grad, central_diff(lambda: loss(sr), sr)) < tol

        critic = Critic(8, (3, 4))
        xc = torch.randn(2, 3, 8, 8, requires_grad=True)
        critic(xc).sum().backward()
        assert rel_error(xc.grad, central_diff(lambda: critic(xc).sum(), xc)) < tol


class LinearCritic(nn.Module):
    def __init__(self, w):
        super().__init__()
        self.w = w

    def forward(self, x):
        return x.flatten(1) @ self.w.flatten()


def test_criterion_04_gradient_penalty_linear_critic(float64):
    with criterion(4, "WGAN-GP on a linear critic", 5.0):
        torch.manual_seed(0)
        for norm in (0.5, 1.0, 3.0):
            w = torch.randn(3, 6, 6)
            w = w * norm / w.norm()
            x = torch.rand(4, 3, 6, 6)
            gp = gradient_penalty(LinearCritic(w), x).item()
            assert gp == pytest.approx(10 * (norm - 1) ** 2, abs=1e-6)


def test_criterion_05_arcface_reduction(float64):
    with criterion(5, "ArcFace reduction", 5.0):
        gen = torch.Generator().manual_seed(0)
        cfg = ArcFaceConfig(scale=1.0, margin=0.0, num_classes=3, embedding_dim=4)
        for _ in range(20):
            emb = l2_normalize(torch.randn(4, 4, generator=gen))
            w = torch.randn(3, 4, generator=gen)
            y = torch.randint(0, 3, (4,), generator=gen)
            logits = (emb @ (w / w.norm(dim=1, keepdim=True)).T).tolist()
            oracle = np.mean([math.log(sum(math.exp(v) for v in row)) - row[t]
                              for row, t in zip(logits, y.tolist())])
            assert arcface_loss(emb, y, w, cfg).item() == pytest.approx(oracle, abs=1e-10)

        cfg = ArcFaceConfig(scale=64.0, margin=0.5, num_classes=3, embedding_dim=3)
        w = torch.eye(3)
        assert arcface_loss(torch.eye(3), torch.arange(3), w, cfg).item() < 1e-12


def test_criterion_06_metrics():
    with criterion(6, "metric correctness", 10.0):
        a = np.full((32, 32, 3), 100, np.uint8)
        assert psnr(a, a + 16) == pytest.approx(24.05, abs=0.01)
        assert psnr(a, a) == math.inf
        assert ssim(a, np.full_like(a, 110)) == pytest.approx(0.9955, abs=5e-4)
        rng = np.random.default_rng(0)
        img = rng.integers(0, 256, (40, 40, 3), dtype=np.uint8)
        assert ssim(img, img) == 1.0

        sims = [(float(s), bool(g)) for s, g in zip(rng.normal(size=40), rng.random(40) < 0.5)]
        sims += [(sims[0][0], not sims[0][1])]  # a tie across classes
        acc, _ = verification_accuracy(sims)
        scores = sorted({s for s, _ in sims})
        grid = [-math.inf] + scores + [(p + q) / 2 for p, q in zip(scores, scores[1:])]
        best = max(np.mean([(s > t) == g for s, g in sims]) for t in grid)
        assert acc == best


def test_criterion_07_desk_convergence(tmp_path):
    with criterion(7, "desk-scale convergence beats bilinear", 15 * 60.0):
        res = convergence_run(tmp_path, steps=500, seed=0)
        print(f"\n  model {res.model_psnr:.2f} dB vs bilinear {res.bilinear_psnr:.2f} dB")
        assert res.model_psnr > res.bilinear_psnr


def test_criterion_08_identity_loss_ablation(tmp_path):
    with criterion(8, "identity loss reduces embedding distance", 30 * 60.0):
        results = [identity_ablation(tmp_path, seed, identity_weight=ABLATION_IDENTITY_WEIGHT)
                   for seed in ABLATION_SEEDS]
        for r in results:
            print(f"\n  seed {r.seed}: with {r.distance_with_identity:.4f} "
                  f"without {r.distance_without_identity:.4f}")
        assert sum(r.identity_helps for r in results) * 2 > len(results)


TINY = dict(llfe_channels=8, bottleneck_channels=8, upsample_channels=4, growth_rate=4,
            critic_widths=(4, 4, 4, 4, 4), recognizer_widths=(4, 8), embedding_dim=8,
            perceptual_widths=(4, 4), batch_size=4, fr_batch_size=4, pretrain_lambda_adversarial=0.01)


def test_criterion_09_determinism_and_resume(tmp_path):
    with criterion(9, "determinism and checkpoint resume", 10 * 60.0):
        manifest, _ = synth_toy_dataset(tmp_path / "toy", 4, 2, seed=1)
        ds = FaceDataset(load_manifest(manifest))
        for phase in ("fr_pretrain", "gan_pretrain", "joint"):
            cfg = desk_config(steps=8, **TINY)
            a = Trainer(cfg, ds.num_classes).run(phase, ds)
            assert a == Trainer(cfg, ds.num_classes).run(phase, ds)
            part = Trainer(cfg, ds.num_classes)
            head = part.run(phase, ds, steps=4)
            resumed = Trainer.load(part.save(tmp_path / f"{phase}.ckpt"))
            assert head + resumed.run(phase, ds) == a


def test_criterion_10_sparse_connectivity():
    with criterion(10, "sparse connectivity behaviour", 10.0):
        torch.manual_seed(0)
        block = SparseBlock(BlockSpec(num_layers=6, growth_rate=4, input_channels=5))
        x = torch.randn(2, 5, 9, 9)
        _, pre = block.trace(x)
        for l in range(1, 7):
            for j in range(l):
                _, probe = block.trace(x, zero=[j], at=l)
                same = torch.equal(probe[l - 1], pre[l - 1])
                assert same == (j not in predecessors(l)), (l, j)
