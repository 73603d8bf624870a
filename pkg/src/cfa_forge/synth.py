"""Synthetic "dead leaves" color images.

Occluding disks with power-law radii reproduce the scale-invariant edge
statistics of natural photographs, which makes them a reasonable stand-in
training corpus when no photo collection is at hand. Each disk carries a
luminance-dominated color with a small chroma offset and a linear shading
ramp; rendering is 2x supersampled so edges are anti-aliased.
"""

from __future__ import annotations

import numpy as np


def dead_leaves(height, width, rng=None, n_disks=None, r_min=3.0, r_max=None, chroma=0.12, supersample=2):
    """Return a ``height x width x 3`` float32 image in [0, 1]."""
    rng = np.random.default_rng(rng)
    s = supersample
    hh, ww = height * s, width * s
    r_max = r_max if r_max is not None else max(height, width) / 4
    if n_disks is None:
        # mean disk area for the r^-3 law, then enough disks to cover the canvas ~5 times
        mean_r2 = 2 * r_min**2 * np.log(r_max / r_min) / (1 - (r_min / r_max) ** 2)
        canvas = (height + 2 * r_max) * (width + 2 * r_max)
        n_disks = int(5 * canvas / (np.pi * mean_r2)) + 1
    img = np.empty((hh, ww, 3), dtype=np.float32)
    img[...] = rng.uniform(0.1, 0.9)

    # density ~ r^-3 via inverse-CDF sampling between r_min and r_max
    u = rng.uniform(size=n_disks)
    radii = 1.0 / np.sqrt((1 - u) / r_min**2 + u / r_max**2) * s
    cy = rng.uniform(-r_max * s, hh + r_max * s, size=n_disks)
    cx = rng.uniform(-r_max * s, ww + r_max * s, size=n_disks)
    lum = rng.uniform(0.05, 0.95, size=n_disks)
    tint = rng.normal(0.0, chroma, size=(n_disks, 3))
    ramp = rng.normal(0.0, 0.15, size=(n_disks, 2))
    for i in range(n_disks):  # later disks occlude earlier ones
        r = radii[i]
        y0, y1 = max(int(cy[i] - r), 0), min(int(cy[i] + r) + 1, hh)
        x0, x1 = max(int(cx[i] - r), 0), min(int(cx[i] + r) + 1, ww)
        if y0 >= y1 or x0 >= x1:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1]
        dy, dx = (yy - cy[i]) / r, (xx - cx[i]) / r
        inside = dy * dy + dx * dx <= 1.0
        shade = lum[i] + ramp[i, 0] * dy + ramp[i, 1] * dx
        color = shade[..., None] + tint[i]
        region = img[y0:y1, x0:x1]
        region[inside] = color[inside]
    img = img.reshape(height, s, width, s, 3).mean(axis=(1, 3))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def write_corpus(out_dir, count, height, width, seed=0):
    """Write ``count`` dead-leaves images as binary PPM files; returns their paths."""
    from pathlib import Path

    from .data import encode_ppm

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(seed).spawn(count)
    paths = []
    for i, ss in enumerate(seeds):
        img = dead_leaves(height, width, np.random.default_rng(ss))
        path = out / f"leaves_{i:04d}.ppm"
        path.write_bytes(encode_ppm(np.round(img * 255).astype(np.uint8)))
        paths.append(path)
    return paths
