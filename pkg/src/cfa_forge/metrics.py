"""PSNR / SSIM, full-image reconstruction from central crops, and evaluation reports."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import ImageRgb, list_images, read_image
from .errors import DatasetError, ShapeError
from .io import atomic_write_bytes

PSNR_CAP = 99.0
PEAK = 255.0
C1 = (PEAK * 0.01) ** 2
C2 = (PEAK * 0.03) ** 2
SSIM_RULE = "global statistics over all pixels and channels (no window)"


def _as_255(img):
    px = img.pixels if isinstance(img, ImageRgb) else np.asarray(img)
    return px.astype(np.float64) * PEAK


def _pair(ref, rec):
    a, b = _as_255(ref), _as_255(rec)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(ref, rec) -> float:
    """10 log10(255^2 / MSE) with inputs in [0, 1]; identical images give the 99 dB cap."""
    a, b = _pair(ref, rec)
    err = float(np.mean((a - b) ** 2))
    if err == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(PEAK * PEAK / err))


def ssim(ref, rec) -> float:
    """Single-window SSIM using the global mean, variance, and covariance of both images."""
    a, b = _pair(ref, rec)
    if np.array_equal(a, b):
        return 1.0
    mu_a, mu_b = a.mean(), b.mean()
    da, db = a - mu_a, b - mu_b
    var_a, var_b = np.mean(da * da), np.mean(db * db)
    cov = np.mean(da * db)
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a**2 + mu_b**2 + C1) * (var_a + var_b + C2)
    return float(num / den)


def reconstruct_image(model, img, n, batch=256) -> ImageRgb:
    """Reconstruct a full image tile by tile.

    The image is reflect-padded by ``n`` on every side (plus enough to make
    both dimensions multiples of ``n``); each ``n x n`` tile is reconstructed
    from its ``3n x 3n`` context and only the central crop is kept.
    ``model.predict`` maps a batch of RGB contexts to RGB reconstructions.
    """
    px = img.pixels if isinstance(img, ImageRgb) else np.asarray(img, dtype=np.float32)
    h, w = px.shape[:2]
    rows, cols = -(-h // n), -(-w // n)
    extra_h, extra_w = rows * n - h, cols * n - w
    mode = "reflect" if min(h, w) > n + max(extra_h, extra_w) else "symmetric"
    padded = np.pad(px, ((n, n + extra_h), (n, n + extra_w), (0, 0)), mode=mode)
    out = np.empty((rows * n, cols * n, 3), dtype=np.float32)
    coords = [(r, c) for r in range(rows) for c in range(cols)]
    for start in range(0, len(coords), batch):
        chunk = coords[start:start + batch]
        ctx = np.stack([padded[r * n:r * n + 3 * n, c * n:c * n + 3 * n] for r, c in chunk])
        rec = np.asarray(model.predict(ctx), dtype=np.float32)
        for (r, c), tile in zip(chunk, rec):
            out[r * n:(r + 1) * n, c * n:(c + 1) * n] = tile[n:2 * n, n:2 * n]
    out = np.clip(out[:h, :w], 0.0, 1.0)
    return ImageRgb(out, getattr(img, "source_id", ""))


@dataclass
class MetricReport:
    images: list = field(default_factory=list)  # [{"id", "psnr", "ssim"}]
    metadata: dict = field(default_factory=dict)

    @property
    def mean_psnr(self):
        return float(np.mean([r["psnr"] for r in self.images])) if self.images else float("nan")

    @property
    def mean_ssim(self):
        return float(np.mean([r["ssim"] for r in self.images])) if self.images else float("nan")

    def to_dict(self):
        return {
            "images": [{"id": r["id"], "psnr": r["psnr"], "ssim": r["ssim"]} for r in self.images],
            "mean_psnr": self.mean_psnr,
            "mean_ssim": self.mean_ssim,
            "metadata": dict(sorted(self.metadata.items())),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def write(self, path):
        atomic_write_bytes(path, self.to_json().encode())


def evaluate(model, images, n, metadata=None, batch=256) -> MetricReport:
    """Per-image PSNR/SSIM on stitched reconstructions; ``images`` is a directory or a list."""
    if isinstance(images, (str, Path)):
        images = [read_image(p) for p in list_images(images)]
    images = sorted(images, key=lambda im: im.source_id)
    if not images:
        raise DatasetError("no images to evaluate")
    rows = []
    for img in images:
        rec = reconstruct_image(model, img, n, batch)
        rows.append({"id": img.source_id, "psnr": psnr(img, rec), "ssim": ssim(img, rec)})
    meta = {"ssim_rule": SSIM_RULE, "psnr_cap_db": PSNR_CAP}
    meta.update(metadata or {})
    return MetricReport(rows, meta)
