"""Fidelity, perceptual and identity metrics.

Images are (3, H, W) arrays (numpy or torch) with values in [0, 1].
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from scipy import ndimage

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
_C1 = 0.01 ** 2
_C2 = 0.03 ** 2


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def psnr(a, b) -> float:
    a, b = _np(a), _np(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _gauss_taps() -> np.ndarray:
    r = SSIM_WINDOW // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    return k / k.sum()


def _filter(img: np.ndarray) -> np.ndarray:
    taps = _gauss_taps()
    out = ndimage.correlate1d(img, taps, axis=0, mode="reflect")
    return ndimage.correlate1d(out, taps, axis=1, mode="reflect")


def ssim(a, b) -> float:
    """Mean SSIM over channels with an 11x11 Gaussian window (sigma 1.5).

    Local statistics are filtered with reflect padding; the mean skips a border of
    half a window, so windows never straddle the image edge.
    """
    a, b = _np(a), _np(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"image {a.shape[-2:]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    pad = SSIM_WINDOW // 2
    vals = []
    for x, y in zip(a, b):
        mx, my = _filter(x), _filter(y)
        vx = _filter(x * x) - mx * mx
        vy = _filter(y * y) - my * my
        cxy = _filter(x * y) - mx * my
        num = (2 * mx * my + _C1) * (2 * cxy + _C2)
        den = (mx * mx + my * my + _C1) * (vx + vy + _C2)
        vals.append((num / den)[pad:-pad, pad:-pad].mean())
    return float(np.mean(vals))


def ids(a, b, embedder) -> float:
    """Cosine similarity of identity embeddings."""
    ea, eb = embed_images(embedder, [a, b])
    return float(np.dot(ea, eb))


def embed_images(embedder, images) -> np.ndarray:
    batch = torch.stack([torch.as_tensor(_np(x), dtype=torch.float32) for x in images])
    with torch.no_grad():
        return embedder(batch).double().numpy()


def lmd(a, b, landmark_fn: Callable) -> float:
    """Mean L2 distance between corresponding landmarks (pixels)."""
    pa = np.asarray(landmark_fn(a), dtype=np.float64)
    pb = np.asarray(landmark_fn(b), dtype=np.float64)
    if pa.shape != pb.shape or pa.ndim != 2 or pa.shape[1] != 2:
        raise ValueError(f"landmark count mismatch: {pa.shape} vs {pb.shape}")
    return float(np.linalg.norm(pa - pb, axis=1).mean())


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(set_a, set_b, shrinkage: float = 0.0, tol: float = 1e-8) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2)) between embedding sets.

    The cross term uses tr((A^1/2 B A^1/2)^1/2), which equals tr((AB)^1/2) and only needs
    symmetric eigendecompositions. ``shrinkage`` blends each covariance toward a scaled
    identity.
    """
    a, b = _np(set_a), _np(set_b)
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]
    if len(a) < 2 or len(b) < 2:
        raise ValueError("need at least two samples per set")
    if a.shape[1] != b.shape[1]:
        raise ValueError("embedding dimensions differ")
    mu_a, mu_b = a.mean(0), b.mean(0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    if shrinkage:
        p = cov_a.shape[0]
        cov_a = (1 - shrinkage) * cov_a + shrinkage * np.trace(cov_a) / p * np.eye(p)
        cov_b = (1 - shrinkage) * cov_b + shrinkage * np.trace(cov_b) / p * np.eye(p)
    for name, c in (("a", cov_a), ("b", cov_b)):
        if np.linalg.eigvalsh((c + c.T) / 2).min() < -1e-6 * max(1.0, np.trace(c)):
            raise ValueError(f"covariance of set {name} is not positive semi-definite")
    ra = _sqrtm_psd(cov_a)
    cross = np.trace(_sqrtm_psd(ra @ cov_b @ ra))
    value = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * cross)
    if value < -tol:
        raise ValueError(f"negative Frechet distance {value}")
    return max(value, 0.0)


def fixed_landmarks(image=None, count: int = 5) -> np.ndarray:
    """Landmark stub: the same five canonical 64x64 face points for any input."""
    base = np.array([[21.0, 24.0], [42.0, 24.0], [31.5, 34.0], [25.0, 42.0], [38.0, 42.0]])
    return base[:count].copy()


def centroid_landmarks(image) -> np.ndarray:
    """Darkness-weighted centroids in three fixed regions (left eye, right eye, mouth).

    A crude detector for the toy faces; coordinates scale with image size.
    """
    x = _np(image)
    h, w = x.shape[-2:]
    dark = (1.0 - x.mean(axis=0)) ** 4
    boxes = [(0.2, 0.5, 0.1, 0.5), (0.2, 0.5, 0.5, 0.9), (0.55, 0.85, 0.25, 0.75)]
    pts = []
    for y0, y1, x0, x1 in boxes:
        ys, xs = slice(int(y0 * h), int(y1 * h)), slice(int(x0 * w), int(x1 * w))
        patch = dark[ys, xs]
        yy, xx = np.mgrid[ys, xs]
        total = patch.sum() + 1e-12
        pts.append([(patch * xx).sum() / total, (patch * yy).sum() / total])
    return np.asarray(pts)


LANDMARKS: dict[str, Callable] = {"fixed": fixed_landmarks, "centroid": centroid_landmarks}


def get_landmark_fn(name: str) -> Callable:
    try:
        return LANDMARKS[name]
    except KeyError:
        raise KeyError(f"unknown landmark plugin {name!r}; registered: {sorted(LANDMARKS)}") from None


@dataclass
class MetricReport:
    records: list[dict] = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)

    KEYS = ("psnr", "ssim", "feat_dist", "ids", "lmd")

    def recompute(self) -> dict:
        agg = {f"mean_{k}": float(np.mean([r[k] for r in self.records])) for k in self.KEYS}
        agg["count"] = len(self.records)
        return agg

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps({"records": self.records, "aggregates": self.aggregates}, indent=1, sort_keys=True)
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["name", *self.KEYS])
            writer.writeheader()
            for r in self.records:
                writer.writerow({k: r[k] for k in ["name", *self.KEYS]})


def evaluate(restored: Sequence, reference: Sequence, embedder, extractor,
             landmark_fn: Callable = fixed_landmarks, names: Sequence[str] | None = None) -> MetricReport:
    """Per-image metrics plus corpus means and the embedding Frechet distance."""
    from .features import feature_distance

    if len(restored) != len(reference):
        raise ValueError("restored and reference sets differ in size")
    names = list(names) if names is not None else [f"{i:05d}" for i in range(len(restored))]
    ra = torch.stack([torch.as_tensor(_np(x), dtype=torch.float32) for x in restored])
    rb = torch.stack([torch.as_tensor(_np(x), dtype=torch.float32) for x in reference])
    with torch.no_grad():
        fd = feature_distance(extractor, ra, rb).double().numpy()
        ea = embedder(ra).double().numpy()
        eb = embedder(rb).double().numpy()
    records = []
    for i, name in enumerate(names):
        records.append({
            "name": name,
            "psnr": psnr(ra[i], rb[i]),
            "ssim": ssim(ra[i], rb[i]),
            "feat_dist": float(fd[i]),
            "ids": float(np.dot(ea[i], eb[i])),
            "lmd": lmd(ra[i], rb[i], landmark_fn),
        })
    report = MetricReport(records)
    report.aggregates = report.recompute()
    if len(records) >= 2:
        report.aggregates["frechet_distance"] = frechet_distance(ea, eb, shrinkage=0.1 if len(ea) <= ea.shape[1] else 0.0)
    return report
