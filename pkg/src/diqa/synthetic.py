"""Small generated corpora for smoke tests and desk-scale experiments.

Each distorted image is a smooth reference texture plus white noise whose
strength grows with the target score, so quality is visible in every patch.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import save_image, write_manifest


def smooth_texture(size: int, rng: np.random.Generator, cells: int = 4) -> np.ndarray:
    """Bilinearly upsampled coarse random grid, ``[3, size, size]`` in [0.2, 0.8]."""
    coarse = rng.random((3, cells + 1, cells + 1))
    pos = np.linspace(0, cells, size)
    i0 = np.minimum(pos.astype(int), cells - 1)
    f = pos - i0
    rows = coarse[:, i0, :] * (1 - f)[None, :, None] + coarse[:, i0 + 1, :] * f[None, :, None]
    img = rows[:, :, i0] * (1 - f)[None, None, :] + rows[:, :, i0 + 1] * f[None, None, :]
    return 0.2 + 0.6 * img


def distort(reference: np.ndarray, score: float, rng: np.random.Generator) -> np.ndarray:
    sigma = 0.4 * score / 100.0
    return np.clip(reference + rng.normal(0.0, sigma, reference.shape), 0.0, 1.0)


def make_corpus(directory: str | Path, n_images: int = 8, size: int = 64, seed: int = 0,
                splits: tuple[int, int, int] | None = (4, 2, 2)) -> Path:
    """Write PNG images, ``manifest.csv`` and ``dataset.txt`` into ``directory``.

    Targets are spread evenly over [5, 95]; every image has its own reference
    group.  Returns the manifest path.
    """
    out = Path(directory)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    scores = np.linspace(5.0, 95.0, n_images)[rng.permutation(n_images)]
    rows = []
    for i, score in enumerate(scores):
        ref = smooth_texture(size, rng)
        dist = distort(ref, score, rng)
        ref_name, dist_name = f"images/ref{i:03d}.png", f"images/dist{i:03d}.png"
        save_image(out / ref_name, ref)
        save_image(out / dist_name, dist)
        rows.append({
            "id": f"img{i:03d}",
            "distorted_path": dist_name,
            "reference_path": ref_name,
            "raw_score": f"{score:.4f}",
            "reference_group": f"ref{i:03d}",
            "group": "noise_low" if score < 50 else "noise_high",
        })
    write_manifest(out / "manifest.csv", rows)
    lines = ["name=synthetic", "scale_min=0", "scale_max=100", "orientation=higher_is_worse"]
    if splits is not None:
        lines += [f"train_groups={splits[0]}", f"val_groups={splits[1]}", f"test_groups={splits[2]}"]
    (out / "dataset.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out / "manifest.csv"
