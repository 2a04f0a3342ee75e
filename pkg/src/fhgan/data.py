"""Manifests, HR/LR pair construction, batch sampling and a procedural toy dataset.

Images live in the model range [-1, 1]; ``to_model``/``to_uint8`` convert
to and from 8-bit RGB.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

log = logging.getLogger(__name__)

HR_SIZE = 112
SCALE = 4
SPLITS = ("train", "val", "test")
MANIFEST_HEADER = ["path", "identity_id", "split"]


class ManifestError(ValueError):
    pass


class InsufficientData(ValueError):
    pass


@dataclass(frozen=True)
class ManifestRecord:
    image_path: str
    identity_id: int
    split: str


@dataclass
class ImagePair:
    hr: torch.Tensor
    lr: torch.Tensor
    identity_id: int


@dataclass(frozen=True)
class VerificationPair:
    image_a: str
    image_b: str
    same_identity: bool


def load_manifest(path) -> list[ManifestRecord]:
    """Parse a ``path,identity_id,split`` CSV; relative paths resolve against its directory."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    records, seen = [], {}
    with path.open(newline="", encoding="utf-8") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if [h.strip() for h in header or []] != MANIFEST_HEADER:
            raise ManifestError(f"{path}:1: header must be {','.join(MANIFEST_HEADER)}")
        for lineno, row in enumerate(rows, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise ManifestError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            img, ident, split = (c.strip() for c in row)
            try:
                ident = int(ident)
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: identity_id {ident!r} is not an integer") from None
            if ident < 0:
                raise ManifestError(f"{path}:{lineno}: negative identity_id {ident}")
            if split not in SPLITS:
                raise ManifestError(f"{path}:{lineno}: unknown split {split!r}")
            full = img if os.path.isabs(img) else str(path.parent / img)
            if full in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate path {img!r} (first on line {seen[full]})")
            seen[full] = lineno
            records.append(ManifestRecord(full, ident, split))
    return records


def write_manifest(path, records: Sequence[ManifestRecord]) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in records:
            # relative record paths are taken from the cwd; the file stores them relative to itself
            rel = os.path.relpath(Path(r.image_path).absolute(), path.parent.absolute())
            w.writerow([rel, r.identity_id, r.split])


def to_model(img_u8: np.ndarray) -> torch.Tensor:
    """H x W x 3 uint8 -> 3 x H x W float32 in [-1, 1]."""
    arr = np.asarray(img_u8, dtype=np.float32)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1) / 127.5 - 1.0))


def to_uint8(img: torch.Tensor) -> np.ndarray:
    """3 x H x W model-range tensor -> H x W x 3 uint8 (clamped, rounded)."""
    arr = ((img.detach().to(torch.float64).cpu().numpy() + 1.0) * 127.5).round()
    return np.clip(arr, 0, 255).astype(np.uint8).transpose(1, 2, 0)


def prepare_hr(image) -> torch.Tensor:
    """Center-crop an aligned RGB image (H x W x 3 uint8 or PIL) to 112 x 112 in model range."""
    arr = np.asarray(image.convert("RGB") if isinstance(image, Image.Image) else image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 RGB image, got shape {arr.shape}")
    h, w = arr.shape[:2]
    if h < HR_SIZE or w < HR_SIZE:
        raise ValueError(f"image {h}x{w} is smaller than {HR_SIZE}x{HR_SIZE}")
    top, left = (h - HR_SIZE) // 2, (w - HR_SIZE) // 2
    return to_model(arr[top:top + HR_SIZE, left:left + HR_SIZE])


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def save_image(path, img: torch.Tensor) -> None:
    Image.fromarray(to_uint8(img)).save(path)


def downsample_bilinear_x4(hr: torch.Tensor, factor: int = SCALE) -> torch.Tensor:
    """Bilinear downscale with pixel-center sampling (no anti-aliasing prefilter).

    Accepts C x H x W or N x C x H x W.
    """
    if hr.shape[-1] % factor or hr.shape[-2] % factor:
        raise ValueError(f"spatial dims {tuple(hr.shape[-2:])} not divisible by {factor}")
    x = hr[None] if hr.dim() == 3 else hr
    out = F.interpolate(x, scale_factor=1 / factor, mode="bilinear", align_corners=False,
                        recompute_scale_factor=False, antialias=False)
    return out[0] if hr.dim() == 3 else out


def upsample_bilinear(lr: torch.Tensor, factor: int = SCALE) -> torch.Tensor:
    """Bilinear upscaling baseline (N x C x h x w)."""
    return F.interpolate(lr, scale_factor=factor, mode="bilinear", align_corners=False)


class FaceDataset:
    """Records plus lazily loaded, cached HR/LR tensors."""

    def __init__(self, records: Sequence[ManifestRecord], split: Optional[str] = "train"):
        self.records = [r for r in records if split is None or r.split == split]
        self._cache: dict[int, ImagePair] = {}
        ids = sorted({r.identity_id for r in self.records})
        self.class_index = {ident: i for i, ident in enumerate(ids)}

    def __len__(self) -> int:
        return len(self.records)

    @property
    def num_classes(self) -> int:
        return len(self.class_index)

    def __getitem__(self, i: int) -> ImagePair:
        if i not in self._cache:
            rec = self.records[i]
            hr = prepare_hr(load_image(rec.image_path))
            self._cache[i] = ImagePair(hr, downsample_bilinear_x4(hr), rec.identity_id)
        return self._cache[i]


@dataclass
class TrainingBatch:
    hr: torch.Tensor  # N x 3 x 112 x 112
    lr: torch.Tensor  # N x 3 x 28 x 28
    identities: list[int]
    hr_half: list[int]  # positions whose HR images feed the recognizer
    sr_half: list[int]  # positions whose SR images feed the recognizer; identity-disjoint from hr_half

    def __len__(self):
        return len(self.identities)


def sample_indices(records: Sequence[ManifestRecord], batch_size: int, seed) -> tuple[list[int], list[int], list[int]]:
    """Pick ``batch_size`` record indices split into identity-disjoint halves.

    Identities are shuffled and dealt into two groups; the first
    ``ceil(N/2)`` samples come from the first group, the rest from the second.
    Returns (indices, hr_half positions, sr_half positions).
    """
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2")
    by_id: dict[int, list[int]] = {}
    for i, r in enumerate(records):
        by_id.setdefault(r.identity_id, []).append(i)
    if len(by_id) < 2:
        raise InsufficientData("need at least two identities for identity-disjoint batch halves")
    rng = np.random.default_rng(seed)
    ids = sorted(by_id)
    order = rng.permutation(len(ids))
    cut = (len(ids) + 1) // 2
    groups = [[ids[k] for k in order[:cut]], [ids[k] for k in order[cut:]]]
    n_first = (batch_size + 1) // 2
    picked = []
    for group, n in zip(groups, (n_first, batch_size - n_first)):
        pool = [i for ident in group for i in by_id[ident]]
        picked.extend(int(i) for i in rng.choice(pool, size=n, replace=n > len(pool)))
    return picked, list(range(n_first)), list(range(n_first, batch_size))


def sample_training_batch(dataset: FaceDataset, batch_size: int, seed) -> TrainingBatch:
    idx, hr_half, sr_half = sample_indices(dataset.records, batch_size, seed)
    pairs = [dataset[i] for i in idx]
    return TrainingBatch(
        hr=torch.stack([p.hr for p in pairs]),
        lr=torch.stack([p.lr for p in pairs]),
        identities=[p.identity_id for p in pairs],
        hr_half=hr_half,
        sr_half=sr_half,
    )


def make_verification_pairs(records: Sequence[ManifestRecord], num_pairs: int, seed) -> list[VerificationPair]:
    """Balanced genuine/impostor pairs (genuine count = ceil(num_pairs / 2))."""
    by_id: dict[int, list[str]] = {}
    for r in records:
        by_id.setdefault(r.identity_id, []).append(r.image_path)
    multi = sorted(i for i, paths in by_id.items() if len(paths) >= 2)
    if len(by_id) < 2 or not multi:
        raise InsufficientData("need >= 2 identities and at least one with >= 2 images")
    rng = np.random.default_rng(seed)
    ids = sorted(by_id)
    n_gen = (num_pairs + 1) // 2
    pairs = []
    for _ in range(n_gen):
        paths = by_id[multi[rng.integers(len(multi))]]
        a, b = rng.choice(len(paths), size=2, replace=False)
        pairs.append(VerificationPair(paths[a], paths[b], True))
    for _ in range(num_pairs - n_gen):
        ia, ib = rng.choice(len(ids), size=2, replace=False)
        pa, pb = by_id[ids[ia]], by_id[ids[ib]]
        pairs.append(VerificationPair(pa[rng.integers(len(pa))], pb[rng.integers(len(pb))], False))
    return pairs


# --- procedural toy faces -------------------------------------------------

def _soft_ellipse(yy, xx, cy, cx, ry, rx, sharp=1.5):
    d = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
    return 1.0 / (1.0 + np.exp((d - 1.0) * min(ry, rx) * sharp))


def _identity_layout(rng: np.random.Generator) -> dict:
    return {
        "bg": rng.uniform(20, 235, 3),
        "bg_tilt": rng.uniform(-40, 40, 3),
        "skin": rng.uniform(60, 230, 3),
        "face_r": (rng.uniform(36, 46), rng.uniform(26, 36)),
        "eye_dx": rng.uniform(9, 17),
        "eye_y": rng.uniform(-14, -6),
        "eye_r": rng.uniform(2.5, 5.5),
        "eye_col": rng.uniform(0, 120, 3),
        "mouth_y": rng.uniform(12, 22),
        "mouth_w": rng.uniform(6, 15),
        "mouth_col": rng.uniform(80, 200, 3) * np.array([1.0, 0.5, 0.5]),
        "hair_col": rng.uniform(0, 200, 3),
        "hair_h": rng.uniform(4, 16),
        "stripe_f": rng.uniform(0.15, 0.5),
    }


def render_toy_face(layout: dict, rng: np.random.Generator) -> np.ndarray:
    """Render one 112 x 112 uint8 image of an identity with per-image jitter."""
    n = HR_SIZE
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    cy = n / 2 + rng.uniform(-3, 3)
    cx = n / 2 + rng.uniform(-3, 3)
    img = layout["bg"] + layout["bg_tilt"] * ((xx - n / 2) / n)[..., None]
    ry, rx = layout["face_r"]
    face = _soft_ellipse(yy, xx, cy, cx, ry, rx)[..., None]
    img = img * (1 - face) + layout["skin"] * face
    hair = _soft_ellipse(yy, xx, cy - ry + layout["hair_h"] / 2, cx, layout["hair_h"], rx * 0.95)[..., None]
    stripes = 0.5 + 0.5 * np.sin(xx * layout["stripe_f"])[..., None]
    img = img * (1 - hair) + (layout["hair_col"] * (0.7 + 0.3 * stripes)) * hair
    for side in (-1, 1):
        eye = _soft_ellipse(yy, xx, cy + layout["eye_y"], cx + side * layout["eye_dx"],
                            layout["eye_r"], layout["eye_r"] * 1.3, sharp=2.0)[..., None]
        img = img * (1 - eye) + layout["eye_col"] * eye
    mouth = _soft_ellipse(yy, xx, cy + layout["mouth_y"], cx, 2.0, layout["mouth_w"], sharp=2.0)[..., None]
    img = img * (1 - mouth) + layout["mouth_col"] * mouth
    img = img * rng.uniform(0.9, 1.1) + rng.normal(0, 2.0, img.shape)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def synth_toy_dataset(
    out_dir,
    num_identities: int,
    images_per_identity: int,
    seed: int = 0,
    holdout_per_identity: int = 0,
) -> tuple[Path, list[ManifestRecord]]:
    """Write procedurally generated faces plus ``manifest.csv`` into ``out_dir``.

    The last ``holdout_per_identity`` images of every identity go to the
    ``test`` split, the rest to ``train``.
    """
    if num_identities < 1 or images_per_identity < 1:
        raise ValueError("counts must be positive")
    if not 0 <= holdout_per_identity < images_per_identity:
        raise ValueError("holdout_per_identity must be in [0, images_per_identity)")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    root = np.random.SeedSequence(seed)
    records = []
    for ident, child in enumerate(root.spawn(num_identities)):
        id_seq, *img_seqs = child.spawn(images_per_identity + 1)
        layout = _identity_layout(np.random.default_rng(id_seq))
        for k, s in enumerate(img_seqs):
            arr = render_toy_face(layout, np.random.default_rng(s))
            name = f"id{ident:04d}_{k:03d}.png"
            Image.fromarray(arr).save(out / name)
            split = "test" if k >= images_per_identity - holdout_per_identity else "train"
            records.append(ManifestRecord(str(out / name), ident, split))
    manifest = out / "manifest.csv"
    write_manifest(manifest, records)
    return manifest, records
