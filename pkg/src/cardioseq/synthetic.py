"""Synthetic two-class texture dataset generator.

Class 0 (non-ischemic stand-in) images are smooth mixtures of
low-frequency sinusoidal plane waves; class 1 (ischemic stand-in) uses
high-frequency waves, giving fine-grained texture.  The classes are
separable by local frequency content but share the same value range, so a
model has to learn structure rather than brightness.  Deterministic per
(seed, label, index).
"""

from __future__ import annotations

import os

import numpy as np

from . import data as D
from .rng import DeterministicRng

LOW_WAVELENGTHS = (32.0, 96.0)    # pixels per cycle: smooth, class 0
HIGH_WAVELENGTHS = (2.0, 6.0)     # pixels per cycle: fine texture, class 1


def texture_image(gen: np.random.Generator, wavelengths: tuple,
                  side: int = D.PATCH_SIZE) -> np.ndarray:
    """Sum of 4 random plane waves per channel, mapped into uint8."""
    yy, xx = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    field = np.zeros((side, side, 3))
    for _ in range(4):
        lam = gen.uniform(*wavelengths)
        angle = gen.uniform(0.0, np.pi)
        phase = gen.uniform(0.0, 2 * np.pi)
        k = 2 * np.pi / lam
        wave = np.sin(k * (np.cos(angle) * xx + np.sin(angle) * yy) + phase)
        amp = gen.uniform(0.5, 1.0, size=3)
        field += wave[..., None] * amp[None, None, :]
    field /= np.abs(field).max() + 1e-9
    u8 = np.clip((field * 0.5 + 0.5) * 255.0, 0, 255).astype(np.uint8)
    return u8


def generate_texture_dataset(out_dir, n_ischemic: int = 51,
                             n_non_ischemic: int = 43, seed: int = 1,
                             fmt: str = "png") -> str:
    """Write the patch files plus a `manifest.csv`; returns the manifest path.

    Counts default to the 51/94 vs 43/94 class balance used throughout the
    test fixtures.
    """
    if fmt not in ("png", "r96a"):
        raise ValueError(f"format must be 'png' or 'r96a', got '{fmt}'")
    os.makedirs(out_dir, exist_ok=True)
    rng = DeterministicRng(seed)
    rows = []
    plan = [(0, n_non_ischemic, LOW_WAVELENGTHS),
            (1, n_ischemic, HIGH_WAVELENGTHS)]
    for label, count, wavelengths in plan:
        for i in range(count):
            gen = rng.substream("synthetic", label, i)
            img = texture_image(gen, wavelengths)
            name = f"patch_{label}_{i:03d}.{fmt}"
            path = os.path.join(out_dir, name)
            if fmt == "png":
                D.write_png(path, img)
            else:
                D.write_r96a(path, img)
            rows.append(f"{name},{label}")
    manifest = os.path.join(out_dir, "manifest.csv")
    with open(manifest, "w", encoding="utf-8", newline="") as fh:
        fh.write("path,label\n")
        fh.write("\n".join(rows) + "\n")
    return manifest
