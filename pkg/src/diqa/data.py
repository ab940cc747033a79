"""Dataset manifests, score mapping, reference-disjoint splits and patch sampling."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .model import PATCH_SIZE

MANIFEST_COLUMNS = ("id", "distorted_path", "reference_path", "raw_score", "reference_group")
IMAGES_PER_BATCH = 4
PATCHES_PER_IMAGE = 32
SUPPORTED_FORMATS = ("PNG", "BMP")


class DataError(ValueError):
    """Malformed manifest, descriptor or image."""


@dataclass(frozen=True)
class ScoreScale:
    min: float = 0.0
    max: float = 100.0
    orientation: str = "higher_is_worse"

    def __post_init__(self):
        if not self.max > self.min:
            raise DataError(f"score scale needs max > min, got [{self.min}, {self.max}]")
        if self.orientation not in ("higher_is_better", "higher_is_worse"):
            raise DataError(f"unknown score orientation {self.orientation!r}")


def map_score(raw: float, scale: ScoreScale) -> float:
    """Affine map onto [0, 100] where 100 is the most distorted."""
    if not scale.min <= raw <= scale.max:
        raise DataError(f"score {raw} outside [{scale.min}, {scale.max}]")
    frac = (raw - scale.min) / (scale.max - scale.min)
    if scale.orientation == "higher_is_better":
        frac = 1.0 - frac
    return 100.0 * frac


@dataclass(frozen=True)
class Descriptor:
    scale: ScoreScale = ScoreScale()
    train_groups: int | None = None
    val_groups: int | None = None
    test_groups: int | None = None
    name: str = ""

    @property
    def split_counts(self) -> tuple[int, int, int] | None:
        counts = (self.train_groups, self.val_groups, self.test_groups)
        return None if any(c is None for c in counts) else counts  # type: ignore[return-value]


def read_key_values(path: str | os.PathLike) -> dict[str, str]:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are skipped."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    values = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def load_descriptor(path: str | os.PathLike) -> Descriptor:
    kv = read_key_values(path)
    try:
        scale = ScoreScale(
            float(kv.get("scale_min", 0.0)),
            float(kv.get("scale_max", 100.0)),
            kv.get("orientation", "higher_is_worse"),
        )

        def opt(key):
            return int(kv[key]) if kv.get(key, "") != "" else None

        return Descriptor(scale, opt("train_groups"), opt("val_groups"), opt("test_groups"), kv.get("name", ""))
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


@dataclass(frozen=True)
class ImageRecord:
    id: str
    distorted_path: str
    reference_path: str | None
    raw_score: float
    mapped_score: float
    reference_group: str
    split: str = "unassigned"
    group: str | None = None

    @property
    def target(self) -> float:
        return self.mapped_score


def load_manifest(path: str | os.PathLike, descriptor: Descriptor | None = None,
                  require_reference: bool = False) -> list[ImageRecord]:
    """Read a manifest CSV; relative image paths resolve against the manifest's directory.

    Optional extra columns: ``group`` (e.g. distortion type) and ``split``.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    scale = (descriptor or Descriptor()).scale
    base = path.parent
    with path.open(newline="", encoding="utf-8") as fh:
        lines = [(n, line) for n, line in enumerate(fh, 1) if line.strip() and not line.lstrip().startswith("#")]
    if not lines:
        raise DataError(f"{path}: empty manifest")
    reader = csv.reader([line for _, line in lines])
    header = [h.strip() for h in next(reader)]
    missing = [c for c in MANIFEST_COLUMNS if c not in header]
    if missing:
        raise DataError(f"{path}:{lines[0][0]}: header lacks columns {missing}")

    records, seen = [], set()
    for (lineno, _), row in zip(lines[1:], reader):
        if len(row) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        fields = {k: v.strip() for k, v in zip(header, row)}
        rid = fields["id"]
        if not rid:
            raise DataError(f"{path}:{lineno}: empty id")
        if rid in seen:
            raise DataError(f"{path}:{lineno}: duplicate id {rid!r}")
        seen.add(rid)
        try:
            raw = float(fields["raw_score"])
        except ValueError:
            raise DataError(f"{path}:{lineno}: raw_score {fields['raw_score']!r} is not a number") from None
        try:
            mapped = map_score(raw, scale)
        except DataError as exc:
            raise DataError(f"{path}:{lineno} (id {rid}): {exc}") from None
        ref = fields["reference_path"] or None
        if require_reference and ref is None:
            raise DataError(f"{path}:{lineno} (id {rid}): full-reference data needs reference_path")
        split = fields.get("split") or "unassigned"
        if split not in ("train", "val", "test", "unassigned"):
            raise DataError(f"{path}:{lineno}: unknown split {split!r}")
        records.append(ImageRecord(
            id=rid,
            distorted_path=str(base / fields["distorted_path"]),
            reference_path=str(base / ref) if ref else None,
            raw_score=raw,
            mapped_score=mapped,
            reference_group=fields["reference_group"] or rid,
            split=split,
            group=fields.get("group") or None,
        ))
    return records


def write_manifest(path: str | os.PathLike, rows: Iterable[dict]) -> None:
    rows = list(rows)
    extra = [k for k in ("group", "split") if any(k in r for r in rows)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(MANIFEST_COLUMNS) + extra, restval="")
        writer.writeheader()
        writer.writerows(rows)


def split_by_reference(records: Sequence[ImageRecord], counts: tuple[int, int, int],
                       rng: np.random.Generator) -> list[ImageRecord]:
    """Tag records train/val/test so that each reference group lands in exactly one split."""
    groups = sorted({r.reference_group for r in records})
    if any(c < 0 for c in counts) or sum(counts) > len(groups):
        raise DataError(f"split counts {counts} exceed the {len(groups)} available reference groups")
    order = [groups[i] for i in rng.permutation(len(groups))]
    n_train, n_val, n_test = counts
    tag = {}
    for g in order[:n_train]:
        tag[g] = "train"
    for g in order[n_train:n_train + n_val]:
        tag[g] = "val"
    for g in order[n_train + n_val:n_train + n_val + n_test]:
        tag[g] = "test"
    return [replace(r, split=tag.get(r.reference_group, "unassigned")) for r in records]


def by_split(records: Iterable[ImageRecord], split: str) -> list[ImageRecord]:
    return [r for r in records if r.split == split]


# -- images -----------------------------------------------------------------------

def load_image(path: str | os.PathLike) -> np.ndarray:
    """Decode a PNG or BMP into a float32 ``[3, H, W]`` array scaled to [0, 1]."""
    try:
        img = Image.open(path)
        img.load()
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    if img.format not in SUPPORTED_FORMATS:
        raise DataError(f"{path}: unsupported format {img.format}; expected PNG or BMP")
    if img.mode == "L":
        arr = np.asarray(img, dtype=np.uint8)
        arr = np.repeat(arr[None], 3, axis=0)
    elif img.mode in ("RGB", "RGBA", "P", "LA", "1"):
        arr = np.asarray(img.convert("RGB"), dtype=np.uint8).transpose(2, 0, 1)
    else:
        raise DataError(f"{path}: unsupported bit depth / mode {img.mode}")
    return np.ascontiguousarray(arr, dtype=np.float32) / np.float32(255.0)


def save_image(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write a ``[3,H,W]`` array in [0,1] (quantised to 8 bit); format from the suffix."""
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, "RGB").save(path)


class ImageCache:
    """Decoded images keyed by path."""

    def __init__(self):
        self._images: dict[str, np.ndarray] = {}

    def __call__(self, path: str) -> np.ndarray:
        img = self._images.get(path)
        if img is None:
            img = self._images[path] = load_image(path)
        return img

    def pair(self, record: ImageRecord, need_reference: bool) -> tuple[np.ndarray, np.ndarray | None]:
        dist = self(record.distorted_path)
        if not need_reference:
            return dist, None
        if record.reference_path is None:
            raise DataError(f"record {record.id} has no reference image")
        ref = self(record.reference_path)
        if ref.shape != dist.shape:
            raise DataError(f"record {record.id}: reference {ref.shape} and distorted {dist.shape} sizes differ")
        return dist, ref


# -- patches ----------------------------------------------------------------------

def dense_coords(height: int, width: int, size: int = PATCH_SIZE) -> np.ndarray:
    """Top-left corners of all non-overlapping patches, row-major."""
    if height < size or width < size:
        raise DataError(f"image {height}x{width} is smaller than one {size}x{size} patch")
    rows, cols = np.meshgrid(np.arange(height // size) * size, np.arange(width // size) * size, indexing="ij")
    return np.stack([rows.ravel(), cols.ravel()], axis=1)


def random_coords(height: int, width: int, n: int, rng: np.random.Generator, size: int = PATCH_SIZE) -> np.ndarray:
    """``n`` uniform top-left corners; distinct whenever the image offers at least ``n`` positions."""
    if height < size or width < size:
        raise DataError(f"image {height}x{width} is smaller than one {size}x{size} patch")
    span_r, span_c = height - size + 1, width - size + 1
    total = span_r * span_c
    flat = rng.choice(total, size=n, replace=total < n)
    return np.stack([flat // span_c, flat % span_c], axis=1)


def crop_patches(image: np.ndarray, coords: np.ndarray, size: int = PATCH_SIZE) -> np.ndarray:
    out = np.empty((len(coords), image.shape[0], size, size), dtype=image.dtype)
    for i, (r, c) in enumerate(coords):
        out[i] = image[:, r:r + size, c:c + size]
    return out


def sample_patches(image: np.ndarray, n: int, mode: str = "random",
                   rng: np.random.Generator | None = None) -> list[tuple[np.ndarray, tuple[int, int]]]:
    """List of ``(patch, (row, col))``; dense mode ignores ``n``."""
    _, h, w = image.shape
    if mode == "dense":
        coords = dense_coords(h, w)
    elif mode == "random":
        if rng is None:
            raise ValueError("random patch sampling needs a generator")
        coords = random_coords(h, w, n, rng)
    else:
        raise ValueError(f"unknown patch mode {mode!r}")
    patches = crop_patches(image, coords)
    return [(p, (int(r), int(c))) for p, (r, c) in zip(patches, coords)]


@dataclass
class PatchBatch:
    """Patches of a few whole images, grouped per image: ``distorted[i, j]`` is patch j of image i."""

    ids: list[str]
    distorted: np.ndarray               # [B, Np, 3, 32, 32]
    targets: np.ndarray                 # [B]
    coords: np.ndarray                  # [B, Np, 2]
    reference: np.ndarray | None = None

    @property
    def n_images(self) -> int:
        return self.distorted.shape[0]

    @property
    def n_patches(self) -> int:
        return self.distorted.shape[1]


def build_batch(records: Sequence[ImageRecord], cache: ImageCache, need_reference: bool,
                rng: np.random.Generator | None = None, n_patches: int = PATCHES_PER_IMAGE,
                coords: Sequence[np.ndarray] | None = None) -> PatchBatch:
    """Crop aligned patches for each record, either at fresh random or at the given coordinates."""
    dist, refs, all_coords = [], [], []
    for i, rec in enumerate(records):
        d, r = cache.pair(rec, need_reference)
        c = coords[i] if coords is not None else random_coords(d.shape[1], d.shape[2], n_patches, rng)
        dist.append(crop_patches(d, c))
        if need_reference:
            refs.append(crop_patches(r, c))
        all_coords.append(np.asarray(c))
    return PatchBatch(
        ids=[r.id for r in records],
        distorted=np.stack(dist),
        targets=np.array([r.mapped_score for r in records], dtype=np.float64),
        coords=np.stack(all_coords),
        reference=np.stack(refs) if need_reference else None,
    )


def build_minibatch(records: Sequence[ImageRecord], cache: ImageCache, need_reference: bool,
                    rng: np.random.Generator) -> PatchBatch:
    """Training unit: 4 images x 32 random patches (128 patches)."""
    if len(records) != IMAGES_PER_BATCH:
        raise DataError(f"a training mini-batch holds exactly {IMAGES_PER_BATCH} images, got {len(records)}")
    return build_batch(records, cache, need_reference, rng, PATCHES_PER_IMAGE)


def freeze_coords(records: Sequence[ImageRecord], cache: ImageCache, rng: np.random.Generator,
                  n_patches: int = PATCHES_PER_IMAGE) -> dict[str, np.ndarray]:
    """Draw patch positions once, e.g. for the validation set."""
    frozen = {}
    for rec in records:
        _, h, w = cache(rec.distorted_path).shape
        frozen[rec.id] = random_coords(h, w, n_patches, rng)
    return frozen
