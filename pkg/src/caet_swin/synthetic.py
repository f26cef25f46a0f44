"""Two-class synthetic chest volumes standing in for the private clinical corpus.

Every sample is a stack of 512x512 slices: air outside an elliptical body,
two elliptical lungs, and one nodule spanning 2..25 slices.  Class 0 nodules
are smooth ground-glass Gaussian blobs.  Class 1 adds a solid core, pixel
speckle and elongation, each multiplied by ``separability``.  This is a test
fixture with an obvious visual signal, not a model of real pathology.

All random draws happen in the same order for both classes, so at
``separability=0`` the two classes are identically distributed.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import (AIR_HU, HU_CLAMP, DatasetManifest, ManifestEntry, NoduleAnnotation, Volume,
                   save_mask, save_volume)

BODY_HU = 40.0
LUNG_HU = -860.0
NOISE_HU = 20.0
GGO_HU = 250.0
CORE_HU = 600.0
SPECKLE_HU = 120.0
MARGIN_SLICES = 1


def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def synth_sample(index: int, label: int, separability: float, seed: int, side: int = 512):
    """Build one ``(Volume, mask, NoduleAnnotation)`` triple, deterministic in its arguments."""
    if not 0 <= separability <= 1:
        raise ValueError("separability must lie in [0, 1]")
    rng = np.random.default_rng([seed, index])
    k = side / 512
    n_nod = int(rng.integers(2, 26))
    depth = n_nod + 2 * MARGIN_SLICES
    radius = rng.uniform(10, 28) * k
    amp = GGO_HU * rng.uniform(0.8, 1.2)
    stretch = rng.uniform(0, 1)
    theta = rng.uniform(0, np.pi)
    side_lung = int(rng.integers(0, 2))
    u_row, u_col = rng.uniform(-1, 1, size=2)

    sep = separability if label == 1 else 0.0
    ecc = 1 + 0.8 * sep * stretch
    c = side / 2
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float32)
    body = _ellipse(yy, xx, c, c, 0.42 * side, 0.47 * side)
    lung_cx = (c - 0.2 * side, c + 0.2 * side)
    lung_r = (0.3 * side, 0.14 * side)
    lungs = _ellipse(yy, xx, c, lung_cx[0], *lung_r) | _ellipse(yy, xx, c, lung_cx[1], *lung_r)

    # Nodule centre: inside the chosen lung with room for the stretched blob.
    reach = radius * ecc
    cy = c + u_row * max(lung_r[0] - reach - 4 * k, 0) * 0.7
    cx = lung_cx[side_lung] + u_col * max(lung_r[1] - reach - 4 * k, 0) * 0.7
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    dy, dx = yy - cy, xx - cx
    along, across = dy * cos_t + dx * sin_t, -dy * sin_t + dx * cos_t

    base = np.where(body, np.float32(BODY_HU), np.float32(AIR_HU))
    base = np.where(lungs, np.float32(LUNG_HU), base)
    vol = np.empty((depth, side, side), dtype=np.float32)
    z_mid = (n_nod - 1) / 2
    half = n_nod / 2
    for z in range(depth):
        sl = base + rng.standard_normal((side, side), dtype=np.float32) * np.float32(NOISE_HU)
        speck = rng.standard_normal((side, side), dtype=np.float32)
        zn = z - MARGIN_SLICES
        if 0 <= zn < n_nod:
            r_z = radius * np.sqrt(max(1 - ((zn - z_mid) / half) ** 2, 0.05))
            rr = (along / (r_z * ecc)) ** 2 + (across / (r_z / np.sqrt(ecc))) ** 2
            inside = rr <= 1
            blob = amp * np.exp(-2 * rr)
            blob = blob + sep * CORE_HU * np.exp(-8 * rr) + sep * SPECKLE_HU * speck * inside
            sl = sl + np.where(lungs, blob, 0).astype(np.float32)
        vol[z] = np.clip(sl, *HU_CLAMP)
    mask = np.broadcast_to(lungs, vol.shape).copy()

    box = int(min(224 * k, np.ceil(4 * radius * ecc + 16 * k)))
    r0 = int(np.clip(round(cy - box / 2), 0, side - box))
    c0 = int(np.clip(round(cx - box / 2), 0, side - box))
    ann = NoduleAnnotation(MARGIN_SLICES, MARGIN_SLICES + n_nod - 1, (r0, c0, box, box))
    return Volume(vol, (1.0, 0.7, 0.7)), mask, ann


def generate_synthetic_dataset(n_per_class: int, separability: float, seed: int, out) -> DatasetManifest:
    """Write ``2 * n_per_class`` samples plus ``manifest.json`` under ``out``.

    Labels alternate 0, 1, 0, 1, ... so any prefix is balanced.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    out = Path(out)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(2 * n_per_class):
        label = i % 2
        vol, mask, ann = synth_sample(i, label, separability, seed)
        sid = f"s{i:04d}"
        vp, mp = f"volumes/{sid}.vol", f"masks/{sid}.msk"
        save_volume(out / vp, vol)
        save_mask(out / mp, mask)
        entries.append(ManifestEntry(sid, vp, mp, ann, label))
    manifest = DatasetManifest(entries, out, {"generator": "synthetic", "n_per_class": n_per_class,
                                              "separability": separability, "seed": seed})
    manifest.save(out / "manifest.json")
    return manifest
