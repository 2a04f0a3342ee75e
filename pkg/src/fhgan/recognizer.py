"""Face recognizer: a small residual embedding backbone and the ArcFace loss."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .critic import TrainingFault


class DegenerateEmbedding(ValueError):
    pass


class PairingViolation(ValueError):
    """HR and SR halves of a recognizer batch share an identity."""


@dataclass(frozen=True)
class ArcFaceConfig:
    scale: float = 64.0
    margin: float = 0.5
    num_classes: int = 2
    embedding_dim: int = 512

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if not 0 <= self.margin < math.pi / 2:
            raise ValueError("margin must lie in [0, pi/2)")
        if self.num_classes < 1 or self.embedding_dim < 1:
            raise ValueError("num_classes and embedding_dim must be positive")


class ResidualUnit(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.BatchNorm2d(cin),
            nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
            nn.BatchNorm2d(cout),
            nn.PReLU(cout, init=0.25),
            nn.Conv2d(cout, cout, 3, padding=1, bias=False),
            nn.BatchNorm2d(cout),
        )
        self.skip = (
            nn.Identity() if cin == cout and stride == 1
            else nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout))
        )

    def forward(self, x):
        return self.skip(x) + self.body(x)


class Backbone(nn.Module):
    """Stem conv, pre-activation residual units, global average pool and a
    fully connected embedding layer followed by feature batch norm.

    Batch statistics are only used in training mode; evaluate in ``eval()``.
    """

    def __init__(
        self,
        embedding_dim: int = 64,
        widths: Sequence[int] = (16, 32, 64, 64),
        in_channels: int = 3,
    ):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(in_channels, widths[0], 3, stride=2, padding=1, bias=False),
                                  nn.BatchNorm2d(widths[0]), nn.PReLU(widths[0], init=0.25))
        units = []
        cin = widths[0]
        for i, w in enumerate(widths):
            units.append(ResidualUnit(cin, w, stride=1 if i == 0 else 2))
            cin = w
        self.units = nn.Sequential(*units)
        self.fc = nn.Linear(cin, embedding_dim, bias=False)
        self.feature_norm = nn.BatchNorm1d(embedding_dim)
        self.embedding_dim = embedding_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Unnormalized embedding."""
        h = self.units(self.stem(x))
        return self.feature_norm(self.fc(h.mean(dim=(2, 3))))


def l2_normalize(v: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    norms = v.norm(dim=-1, keepdim=True)
    if torch.any(norms <= eps):
        raise DegenerateEmbedding("zero-norm embedding before normalization")
    return v / norms


class FaceRecognizer(nn.Module):
    """Embedding backbone plus ArcFace class weights (one row per class)."""

    def __init__(self, cfg: ArcFaceConfig, widths: Sequence[int] = (16, 32, 64, 64)):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg.embedding_dim, widths)
        w = torch.randn(cfg.num_classes, cfg.embedding_dim)
        self.class_weights = nn.Parameter(w / w.norm(dim=1, keepdim=True))

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        return l2_normalize(self.backbone(images))

    forward = embed

    def classify(self, images: torch.Tensor) -> torch.Tensor:
        """Index of the nearest class weight (largest cosine)."""
        return (self.embed(images) @ F.normalize(self.class_weights, dim=1).T).argmax(dim=1)


def target_logit(cos: torch.Tensor, margin: float) -> torch.Tensor:
    """cos(theta + m), falling back to cos(theta) - m*sin(m) past theta = pi - m."""
    if margin == 0:
        return cos
    sin = torch.sqrt(torch.clamp(1.0 - cos * cos, min=1e-12))
    shifted = cos * math.cos(margin) - sin * math.sin(margin)
    return torch.where(cos > math.cos(math.pi - margin), shifted, cos - margin * math.sin(margin))


def arcface_loss(
    embeddings: torch.Tensor,
    labels: torch.Tensor,
    weights: torch.Tensor,
    cfg: ArcFaceConfig,
    tol: float = 1e-4,
) -> torch.Tensor:
    """Mean additive-angular-margin softmax loss.

    ``embeddings`` (N x d) must already be unit norm; ``weights`` (n x d) are
    normalized here so every logit is a scaled cosine.
    """
    if not torch.isfinite(embeddings).all():
        raise TrainingFault("non-finite embeddings")
    norms = embeddings.norm(dim=1)
    if torch.any((norms - 1).abs() > tol):
        raise ValueError("embeddings must be L2-normalized")
    labels = torch.as_tensor(labels, dtype=torch.long, device=embeddings.device)
    if labels.numel() and (labels.min() < 0 or labels.max() >= weights.shape[0]):
        raise ValueError("label out of range")
    cos = embeddings @ F.normalize(weights, dim=1).T
    cos = cos.clamp(-1.0, 1.0)
    tgt = cos.gather(1, labels[:, None])
    logits = cos.scatter(1, labels[:, None], target_logit(tgt, cfg.margin)) * cfg.scale
    return F.cross_entropy(logits, labels)


def fr_batch_loss(
    recognizer: FaceRecognizer,
    hr_batch: torch.Tensor,
    sr_batch: torch.Tensor,
    labels_hr,
    labels_sr,
) -> torch.Tensor:
    """ArcFace loss over the concatenation of identity-disjoint HR and SR halves."""
    labels_hr = torch.as_tensor(labels_hr, dtype=torch.long)
    labels_sr = torch.as_tensor(labels_sr, dtype=torch.long)
    if hr_batch.shape[1:] != sr_batch.shape[1:]:
        raise ValueError("hr and sr images differ in shape")
    shared = set(labels_hr.tolist()) & set(labels_sr.tolist())
    if shared:
        raise PairingViolation(f"identities {sorted(shared)} appear in both batch halves")
    images = torch.cat([hr_batch, sr_batch])
    labels = torch.cat([labels_hr, labels_sr])
    return arcface_loss(recognizer.embed(images), labels, recognizer.class_weights, recognizer.cfg)


def cosine_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Dot product of unit embeddings along the last axis."""
    return (a * b).sum(dim=-1)
