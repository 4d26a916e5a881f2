"""PSNR/SSIM on the luma plane, with the two-level aggregation protocol:
per-view scores are averaged within each scene, scene means are averaged
(unweighted) across the dataset.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP_DB = 100.0


def psnr(ref: np.ndarray, test: np.ndarray) -> float:
    """10*log10(1/MSE) for images in [0, 1]; capped at 100 dB."""
    if ref.shape != test.shape:
        raise ValueError(f"extent mismatch: {ref.shape} vs {test.shape}")
    mse = float(np.mean((ref.astype(np.float64) - test.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Normalized 2-D Gaussian, centered at (size-1)/2."""
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _local_mean(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    k = win.shape[0]
    return np.tensordot(sliding_window_view(img, (k, k)), win, axes=([2, 3], [0, 1]))


def ssim(ref: np.ndarray, test: np.ndarray, k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean local SSIM: 11x11 Gaussian window (sigma 1.5), valid-region
    averaging (no padded border), biased local variances."""
    if ref.shape != test.shape:
        raise ValueError(f"extent mismatch: {ref.shape} vs {test.shape}")
    ref = np.squeeze(np.asarray(ref, dtype=np.float64))
    test = np.squeeze(np.asarray(test, dtype=np.float64))
    if ref.ndim != 2:
        raise ValueError("ssim expects single-channel images")
    win = gaussian_window()
    k = win.shape[0]
    if min(ref.shape) < k:
        raise ValueError(f"image {ref.shape} smaller than the {k}x{k} window")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu1 = _local_mean(ref, win)
    mu2 = _local_mean(test, win)
    s11 = _local_mean(ref * ref, win) - mu1 * mu1
    s22 = _local_mean(test * test, win) - mu2 * mu2
    s12 = _local_mean(ref * test, win) - mu1 * mu2
    num = (2 * mu1 * mu2 + c1) * (2 * s12 + c2)
    den = (mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2)
    return float(np.mean(num / den))


@dataclass
class SceneScore:
    name: str
    psnr_per_view: list[float] = field(default_factory=list)
    ssim_per_view: list[float] = field(default_factory=list)

    @property
    def psnr_db(self) -> float:
        return float(np.mean(self.psnr_per_view))

    @property
    def ssim(self) -> float:
        return float(np.mean(self.ssim_per_view))


def score_scene(name: str, ref_views: np.ndarray, test_views: np.ndarray, shave: int = 0) -> SceneScore:
    """Per-view luma PSNR/SSIM; ``shave`` trims a border before scoring."""
    if ref_views.shape != test_views.shape:
        raise ValueError(f"extent mismatch: {ref_views.shape} vs {test_views.shape}")
    score = SceneScore(name)
    for rv, tv in zip(ref_views, test_views):
        r = np.squeeze(rv)
        t = np.squeeze(tv)
        if shave:
            r = r[shave:-shave, shave:-shave]
            t = t[shave:-shave, shave:-shave]
        score.psnr_per_view.append(psnr(r, t))
        score.ssim_per_view.append(ssim(r, t))
    return score


def aggregate(scores: list[SceneScore]) -> dict:
    """Unweighted mean of scene means (a scene with many views does not
    outweigh one with few)."""
    if not scores:
        raise ValueError("no scenes to aggregate")
    return {
        "psnr_db": float(np.mean([s.psnr_db for s in scores])),
        "ssim": float(np.mean([s.ssim for s in scores])),
        "scenes": len(scores),
    }


def write_report_csv(path, scores: list[SceneScore]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["scene", "view", "psnr_db", "ssim"])
        for s in scores:
            for i, (p, q) in enumerate(zip(s.psnr_per_view, s.ssim_per_view)):
                wr.writerow([s.name, i, f"{p:.6f}", f"{q:.6f}"])
            wr.writerow([s.name, "mean", f"{s.psnr_db:.6f}", f"{s.ssim:.6f}"])


def report_json(scores: list[SceneScore], meta: dict | None = None) -> dict:
    out = {
        "scenes": [
            {
                "name": s.name,
                "psnr_db": s.psnr_db,
                "ssim": s.ssim,
                "per_view": [
                    {"view": i, "psnr_db": p, "ssim": q}
                    for i, (p, q) in enumerate(zip(s.psnr_per_view, s.ssim_per_view))
                ],
            }
            for s in scores
        ],
        "dataset": aggregate(scores),
    }
    if meta:
        out.update(meta)
    return out
