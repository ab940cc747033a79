"""Image-level prediction, correlation reports, patch-count sweeps and quality maps."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image

from . import streams
from .data import ImageCache, ImageRecord, crop_patches, dense_coords, random_coords
from .metrics import lcc, logistic_fit, srocc
from .model import QualityNet
from .pooling import ImagePrediction, pool_average, pool_weighted

CHUNK = 256


def predict_image(record: ImageRecord, model: QualityNet, n_patches: int = 32, mode: str = "random",
                  seed: int = 0, cache: ImageCache | None = None,
                  ref_transform: Callable[[np.ndarray], np.ndarray] | None = None) -> ImagePrediction:
    """Sample patches (eval mode, no dropout noise) and pool them into one score."""
    cache = cache or ImageCache()
    cfg = model.config
    dist, ref = cache.pair(record, cfg.task == "fr")
    _, h, w = dist.shape
    if mode == "dense":
        coords = dense_coords(h, w)
    elif mode == "random":
        coords = random_coords(h, w, n_patches, streams.image_stream(seed, "eval", record.id))
    else:
        raise ValueError(f"unknown patch mode {mode!r}")

    ys, alphas = [], []
    for start in range(0, len(coords), CHUNK):
        c = coords[start:start + CHUNK]
        out = model.forward(crop_patches(dist, c), None if ref is None else crop_patches(ref, c),
                            train=False, ref_transform=ref_transform)
        ys.append(out.quality.data)
        if out.weight is not None:
            alphas.append(out.weight.data)
    y = np.concatenate(ys).astype(np.float64)
    if alphas:
        a = np.concatenate(alphas).astype(np.float64)
        q_hat, p = pool_weighted(y, a)
        return ImagePrediction(record.id, q_hat.item(), y, coords, p.data, a, mode, (h, w))
    return ImagePrediction(record.id, pool_average(y).item(), y, coords, mode=mode, image_shape=(h, w))


@dataclass
class EvalReport:
    ids: list[str]
    targets: np.ndarray
    predictions: np.ndarray
    lcc: float
    srocc: float
    groups: dict[str, tuple[float, float, int]] = field(default_factory=dict)
    logistic: bool = False

    @property
    def n(self) -> int:
        return len(self.ids)

    def summary(self) -> str:
        return f"lcc={self.lcc:.6f},srocc={self.srocc:.6f},n={self.n}"


def _correlations(pred: np.ndarray, target: np.ndarray, logistic: bool) -> tuple[float, float]:
    mapped = logistic_fit(pred, target) if logistic else pred
    return lcc(mapped, target), srocc(pred, target)


def group_key(record: ImageRecord, group_by: str | None) -> str | None:
    if group_by is None:
        return None
    if group_by in ("group", "distortion", "type"):
        return record.group
    if group_by == "reference":
        return record.reference_group
    raise ValueError(f"cannot group by {group_by!r}")


def evaluate(records: Sequence[ImageRecord], model: QualityNet, n_patches: int = 32, mode: str = "random",
             seed: int = 0, cache: ImageCache | None = None, group_by: str | None = None,
             logistic: bool = False, ref_transform=None) -> EvalReport:
    cache = cache or ImageCache()
    preds = [predict_image(r, model, n_patches, mode, seed, cache, ref_transform) for r in records]
    pred = np.array([p.q_hat for p in preds])
    target = np.array([r.mapped_score for r in records])
    r_lcc, r_srocc = _correlations(pred, target, logistic)
    groups = {}
    if group_by is not None:
        keys = [group_key(r, group_by) or "" for r in records]
        for key in sorted(set(keys)):
            idx = [i for i, k in enumerate(keys) if k == key]
            try:
                g_lcc, g_srocc = _correlations(pred[idx], target[idx], logistic)
            except ValueError:
                g_lcc = g_srocc = float("nan")
            groups[key] = (g_lcc, g_srocc, len(idx))
    return EvalReport([r.id for r in records], target, pred, r_lcc, r_srocc, groups, logistic)


def write_report(report: EvalReport, path: str | os.PathLike) -> None:
    """Per-image rows followed by a ``#``-prefixed summary block."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "target", "prediction"])
        for rid, t, p in zip(report.ids, report.targets, report.predictions):
            writer.writerow([rid, repr(float(t)), repr(float(p))])
        fh.write(f"# {report.summary()}\n")
        for key, (g_lcc, g_srocc, n) in report.groups.items():
            fh.write(f"# group={key},lcc={g_lcc:.6f},srocc={g_srocc:.6f},n={n}\n")


def read_report(path: str | os.PathLike) -> tuple[list[str], np.ndarray, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
    return ([r["id"] for r in rows], np.array([float(r["target"]) for r in rows]),
            np.array([float(r["prediction"]) for r in rows]))


def repeat_seed(seed: int, repeat: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(repeat)]).generate_state(1)[0])


def np_sweep(records: Sequence[ImageRecord], model: QualityNet, np_values: Sequence[int], repeats: int = 3,
             seed: int = 0, mode: str = "random", cache: ImageCache | None = None) -> list[tuple[int, float, float]]:
    """Rows of ``(Np, mean SROCC, mean LCC)`` over ``repeats`` random patch draws (one draw in dense mode)."""
    cache = cache or ImageCache()
    rows = []
    for n in np_values:
        runs = 1 if mode == "dense" else repeats
        s, l = [], []
        for r in range(runs):
            rep = evaluate(records, model, n, mode, repeat_seed(seed, r), cache)
            s.append(rep.srocc)
            l.append(rep.lcc)
        rows.append((int(n), float(np.mean(s)), float(np.mean(l))))
    return rows


def sample_reference_features(records: Sequence[ImageRecord], model: QualityNet, n_samples: int = 4000,
                              seed: int = 0, cache: ImageCache | None = None) -> np.ndarray:
    """Extractor outputs for ``n_samples`` random reference patches spread over ``records``."""
    cache = cache or ImageCache()
    refs = sorted({r.reference_path for r in records if r.reference_path})
    if not refs:
        raise ValueError("no reference images to sample features from")
    rng = streams.stream(seed, "pca")
    per_image = -(-n_samples // len(refs))
    feats = []
    for path in refs:
        img = cache(path)
        coords = random_coords(img.shape[1], img.shape[2], per_image, rng)
        for start in range(0, len(coords), CHUNK):
            feats.append(model.features(crop_patches(img, coords[start:start + CHUNK])).data)
    return np.concatenate(feats)[:n_samples]


class UnsupportedModeError(ValueError):
    """Quality maps need the dense, non-overlapping patch grid."""


def prediction_grids(prediction: ImagePrediction) -> tuple[np.ndarray, np.ndarray | None]:
    if prediction.mode != "dense":
        raise UnsupportedModeError("quality maps require a dense-mode prediction")
    h, w = prediction.image_shape
    rows, cols = h // 32, w // 32
    quality = prediction.patch_qualities.reshape(rows, cols)
    weight = None
    if prediction.stabilized_weights is not None:
        weight = prediction.stabilized_weights.reshape(rows, cols)
    return quality, weight


def to_gray8(grid: np.ndarray) -> np.ndarray:
    """Min-max normalise to 0..255; a constant grid renders as mid-gray 128."""
    lo, hi = float(grid.min()), float(grid.max())
    if hi == lo:
        return np.full(grid.shape, 128, dtype=np.uint8)
    return np.rint((grid - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_grid_csv(path: str | os.PathLike, grid: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in grid:
            writer.writerow([repr(float(v)) for v in row])


def read_grid_csv(path: str | os.PathLike) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)])


def export_maps(prediction: ImagePrediction, out_dir: str | os.PathLike, stem: str | None = None) -> dict[str, Path]:
    """Write the local quality (and weight) grid as CSV and 8-bit grayscale PNG."""
    quality, weight = prediction_grids(prediction)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = stem or prediction.image_id
    written = {}
    for kind, grid in (("quality", quality), ("weight", weight)):
        if grid is None:
            continue
        csv_path, png_path = out / f"{stem}_{kind}.csv", out / f"{stem}_{kind}.png"
        write_grid_csv(csv_path, grid)
        Image.fromarray(to_gray8(grid), "L").save(png_path)
        written[f"{kind}_csv"], written[f"{kind}_png"] = csv_path, png_path
    return written
