"""PSNR, SSIM and cosine-threshold verification accuracy.

PSNR/SSIM are computed on 8-bit RGB (mean over channels), which is the
convention stamped into every :class:`MetricReport`.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view

from .data import ImagePair, VerificationPair, downsample_bilinear_x4, load_image, prepare_hr, to_uint8
from .recognizer import cosine_similarity

PSNR_IDENTICAL = math.inf
CONVENTION = "rgb-8bit-mean-over-channels"


def psnr(reference: np.ndarray, test: np.ndarray, max_value: float = 255.0) -> float:
    reference = np.asarray(reference, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if reference.shape != test.shape:
        raise ValueError(f"shape mismatch {reference.shape} vs {test.shape}")
    mse = np.mean((reference - test) ** 2)
    if mse == 0:
        return PSNR_IDENTICAL
    return float(10.0 * np.log10(max_value ** 2 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable weighted average over every fully contained window
    rows = sliding_window_view(img, len(g), axis=0) @ g
    return sliding_window_view(rows, len(g), axis=1) @ g


def _block_mean(img: np.ndarray, size: int) -> np.ndarray:
    h, w = (img.shape[0] // size) * size, (img.shape[1] // size) * size
    return img[:h, :w].reshape(h // size, size, w // size, size).mean(axis=(1, 3))


def ssim(
    reference: np.ndarray,
    test: np.ndarray,
    window: str = "gaussian",
    data_range: float = 255.0,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """Mean SSIM over windows and channels.

    ``window="gaussian"``: 11x11 Gaussian (sigma 1.5) at every valid position.
    ``window="block8"``: non-overlapping 8x8 uniform windows.
    Inputs are H x W or H x W x C.
    """
    x = np.asarray(reference, dtype=np.float64)
    y = np.asarray(test, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    if window == "gaussian":
        g = gaussian_window()
        filt = lambda a: _filter_valid(a, g)
        size = len(g)
    elif window == "block8":
        size = 8
        filt = lambda a: _block_mean(a, size)
    else:
        raise ValueError(f"unknown window {window!r}")
    if x.shape[0] < size or x.shape[1] < size:
        raise ValueError(f"image {x.shape[:2]} smaller than {size}x{size} window")
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    vals = []
    for c in range(x.shape[2]):
        a, b = x[..., c], y[..., c]
        mu_a, mu_b = filt(a), filt(b)
        var_a = filt(a * a) - mu_a ** 2
        var_b = filt(b * b) - mu_b ** 2
        cov = filt(a * b) - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
        den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def verification_accuracy(similarities: Sequence[tuple[float, bool]]) -> tuple[float, float]:
    """Best accuracy of ``score > t`` over midpoint thresholds, with the lowest such ``t``."""
    if not similarities:
        raise ValueError("empty similarity list")
    scores = np.array([s for s, _ in similarities], dtype=np.float64)
    same = np.array([bool(l) for _, l in similarities])
    if same.all() or not same.any():
        raise ValueError("need both genuine and impostor pairs")
    u = np.unique(scores)
    thresholds = np.concatenate([[-np.inf], u, (u[:-1] + u[1:]) / 2, [np.inf]])
    thresholds.sort()
    best_acc, best_t = -1.0, None
    for t in thresholds:
        acc = float(np.mean((scores > t) == same))
        if acc > best_acc:
            best_acc, best_t = acc, float(t)
    return best_acc, best_t


@dataclass
class MetricReport:
    name: str
    psnr: list[float]
    ssim: list[float]
    mean_psnr: float
    mean_ssim: float
    verification_accuracy: Optional[float] = None
    threshold: Optional[float] = None
    num_images: int = 0
    num_pairs: int = 0
    convention: str = CONVENTION
    ssim_window: str = "gaussian"

    def summary(self) -> str:
        lines = [
            f"[{self.name}] images={self.num_images} convention={self.convention} ssim_window={self.ssim_window}",
            f"  mean PSNR {self.mean_psnr:.4f} dB   mean SSIM {self.mean_ssim:.4f}",
        ]
        if self.verification_accuracy is not None:
            lines.append(f"  verification ACC {self.verification_accuracy:.4f} "
                         f"(threshold {self.threshold:.4f}, {self.num_pairs} pairs)")
        return "\n".join(lines)


def _mean(vals: Sequence[float]) -> float:
    return float(sum(vals) / len(vals)) if vals else math.nan


@torch.no_grad()
def evaluate_sr(
    generator: Callable[[torch.Tensor], torch.Tensor],
    recognizer: Optional[Callable[[torch.Tensor], torch.Tensor]],
    pairs: Sequence[ImagePair],
    verification: Sequence[VerificationPair] = (),
    name: str = "model",
    ssim_window: str = "gaussian",
    batch_size: int = 16,
) -> MetricReport:
    """Hallucinate every LR input, score it against HR, then run verification on SR images."""
    p_vals, s_vals = [], []
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        sr = generator(torch.stack([p.lr for p in chunk]))
        for p, out in zip(chunk, sr):
            ref, test = to_uint8(p.hr), to_uint8(out)
            p_vals.append(psnr(ref, test))
            s_vals.append(ssim(ref, test, window=ssim_window))
    acc = thr = None
    if verification and recognizer is not None:
        cache: dict[str, torch.Tensor] = {}

        def emb(path):
            if path not in cache:
                hr = prepare_hr(load_image(path))
                cache[path] = recognizer(generator(downsample_bilinear_x4(hr)[None]))[0]
            return cache[path]

        sims = [(float(cosine_similarity(emb(v.image_a), emb(v.image_b))), v.same_identity)
                for v in verification]
        acc, thr = verification_accuracy(sims)
    return MetricReport(
        name=name, psnr=p_vals, ssim=s_vals, mean_psnr=_mean(p_vals), mean_ssim=_mean(s_vals),
        verification_accuracy=acc, threshold=thr, num_images=len(pairs),
        num_pairs=len(verification), ssim_window=ssim_window,
    )


def write_reports(reports: Sequence[MetricReport], out_dir, stem: str = "metrics") -> tuple[Path, Path]:
    """Write ``<stem>.txt`` (summaries) and ``<stem>.json`` (per-image records + summary blocks)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    txt = out / f"{stem}.txt"
    txt.write_text("\n".join(r.summary() for r in reports) + "\n", encoding="utf-8")
    payload = []
    for r in reports:
        d = asdict(r)
        records = [{"index": i, "psnr": _json_float(p), "ssim": s} for i, (p, s) in enumerate(zip(r.psnr, r.ssim))]
        for k in ("psnr", "ssim"):
            d.pop(k)
        d["mean_psnr"] = _json_float(d["mean_psnr"])
        payload.append({"records": records, "summary": d})
    js = out / f"{stem}.json"
    js.write_text(json.dumps(payload, indent=2), encoding="utf-8")
    return txt, js


def _json_float(v: float):
    return "inf" if v == math.inf else v
