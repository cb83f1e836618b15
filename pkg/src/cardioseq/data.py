"""Manifest-driven dataset handling: strict image loading, normalization,
deterministic splitting, lossless-first augmentation, and batch iteration.

File formats accepted: 8-bit RGB PNG, or the raw patch format ``R96A``
(4 magic bytes ``R96A`` followed by 96*96*3 bytes of row-major RGB).
Images whose dimensions differ from the expected patch size are rejected
outright; silent resizing would hide data corruption.
"""

from __future__ import annotations

import csv
import hashlib
import io
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DataError
from .rng import DeterministicRng
from .tensor import Tensor

PATCH_SIZE = 96
R96A_MAGIC = b"R96A"
_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


@dataclass(frozen=True)
class ManifestEntry:
    path: str          # as written in the manifest
    label: int         # 0 = non-ischemic, 1 = ischemic
    resolved: str      # path joined with the manifest's directory


@dataclass
class Sample:
    pixels: Tensor     # (size, size, 3) float32 in [-1, 1]
    label: int
    source_path: str


@dataclass
class DatasetSplit:
    train: list
    test: list
    seed: int


@dataclass
class AugmentationConfig:
    horizontal_flip: bool = True
    vertical_flip: bool = True
    rotations: frozenset = frozenset({90, 180, 270})
    zoom_range: tuple = (0.9, 1.1)
    # max |angle| in degrees for lossy arbitrary-angle rotation; None = off
    arbitrary_rotation: Optional[float] = None

    def __post_init__(self):
        self.rotations = frozenset(int(r) for r in self.rotations)
        if not self.rotations <= {90, 180, 270}:
            raise DataError(f"rotations must be within {{90, 180, 270}}, "
                            f"got {sorted(self.rotations)}")
        lo, hi = self.zoom_range
        if not (0.0 < lo <= hi <= 2.0):
            raise DataError(f"zoom_range must satisfy 0 < lo <= hi <= 2, "
                            f"got [{lo}, {hi}]")


IDENTITY_AUGMENTATION = AugmentationConfig(
    horizontal_flip=False, vertical_flip=False, rotations=frozenset(),
    zoom_range=(1.0, 1.0))


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def load_manifest(path) -> list[ManifestEntry]:
    """Parse a `path,label` CSV; entries keep file order.

    Paths resolve relative to the manifest's own directory.  Errors name
    the offending 1-based row (header = row 1).
    """
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise DataError(f"manifest not found: {path}")
    base = os.path.dirname(os.path.abspath(path))
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
    except UnicodeDecodeError as exc:
        raise DataError(f"manifest {path} is not valid UTF-8: {exc}") from exc
    if not rows or rows[0] != ["path", "label"]:
        raise DataError(
            f"manifest {path} row 1: header must be exactly 'path,label'")
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    for rownum, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 2:
            raise DataError(
                f"manifest {path} row {rownum}: expected 2 fields, got {len(row)}")
        p, label_text = row[0].strip(), row[1].strip()
        if not p:
            raise DataError(f"manifest {path} row {rownum}: empty path")
        if label_text not in ("0", "1"):
            raise DataError(
                f"manifest {path} row {rownum}: label must be 0 or 1, "
                f"got '{label_text}'")
        if p in seen:
            raise DataError(f"manifest {path} row {rownum}: duplicate path '{p}'")
        seen.add(p)
        entries.append(ManifestEntry(p, int(label_text), os.path.join(base, p)))
    return entries


# ---------------------------------------------------------------------------
# image loading
# ---------------------------------------------------------------------------

def _decode_r96a(raw: bytes, path: str) -> np.ndarray:
    body = raw[len(R96A_MAGIC):]
    want = PATCH_SIZE * PATCH_SIZE * 3
    if len(body) != want:
        raise DataError(
            f"{path}: R96A payload is {len(body)} bytes, expected {want}")
    return np.frombuffer(body, dtype=np.uint8).reshape(PATCH_SIZE, PATCH_SIZE, 3)


def _decode_png(raw: bytes, path: str) -> np.ndarray:
    try:
        img = Image.open(io.BytesIO(raw))
        img.load()
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"{path}: cannot decode PNG: {exc}") from exc
    if img.mode != "RGB":
        raise DataError(
            f"{path}: expected 8-bit RGB, got mode '{img.mode}'")
    return np.asarray(img, dtype=np.uint8)


def load_image(entry: ManifestEntry, size: int = PATCH_SIZE) -> Sample:
    """Decode, validate dimensions, normalize to [-1, 1] via v/127.5 - 1."""
    path = entry.resolved
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if raw.startswith(R96A_MAGIC):
        arr = _decode_r96a(raw, path)
    elif raw.startswith(_PNG_MAGIC):
        arr = _decode_png(raw, path)
    else:
        raise DataError(f"{path}: neither PNG nor R96A (unrecognized magic)")
    if arr.shape != (size, size, 3):
        raise DataError(
            f"{path}: image is {arr.shape[0]}x{arr.shape[1]}x{arr.shape[2]}, "
            f"expected {size}x{size}x3")
    pixels = (arr.astype(np.float32) / np.float32(127.5)) - np.float32(1.0)
    return Sample(Tensor(pixels), entry.label, entry.path)


def write_r96a(path, pixels_u8: np.ndarray):
    if pixels_u8.shape != (PATCH_SIZE, PATCH_SIZE, 3) or pixels_u8.dtype != np.uint8:
        raise DataError("R96A writer needs a 96x96x3 uint8 array")
    with open(path, "wb") as fh:
        fh.write(R96A_MAGIC)
        fh.write(pixels_u8.tobytes())


def write_png(path, pixels_u8: np.ndarray):
    if pixels_u8.ndim != 3 or pixels_u8.shape[2] != 3 or pixels_u8.dtype != np.uint8:
        raise DataError("PNG writer needs an HxWx3 uint8 array")
    Image.fromarray(pixels_u8, mode="RGB").save(path, format="PNG")


# ---------------------------------------------------------------------------
# split
# ---------------------------------------------------------------------------

def split_dataset(manifest: list[ManifestEntry], train_count: int,
                  seed: int, stratified: bool = False) -> DatasetSplit:
    """Seeded shuffle; first train_count entries train, rest test.

    With stratified=True the train set instead takes per-class quotas
    proportional to class prevalence (largest-remainder rounding), filled
    in shuffled order.
    """
    n = len(manifest)
    if not 0 < train_count < n:
        raise DataError(
            f"train_count must be in (0, {n}) for a {n}-entry manifest, "
            f"got {train_count}")
    gen = DeterministicRng(seed).substream("split")
    order = gen.permutation(n)
    shuffled = [manifest[i] for i in order]
    if not stratified:
        return DatasetSplit(shuffled[:train_count], shuffled[train_count:], seed)

    counts = {0: 0, 1: 0}
    for e in manifest:
        counts[e.label] += 1
    quota = {}
    frac = {}
    for label in (0, 1):
        exact = train_count * counts[label] / n
        quota[label] = int(exact)
        frac[label] = exact - quota[label]
    short = train_count - sum(quota.values())
    for label in sorted((0, 1), key=lambda l: (-frac[l], l))[:short]:
        quota[label] += 1
    train, test = [], []
    taken = {0: 0, 1: 0}
    for e in shuffled:
        if taken[e.label] < quota[e.label]:
            train.append(e)
            taken[e.label] += 1
        else:
            test.append(e)
    return DatasetSplit(train, test, seed)


def split_hash(split: DatasetSplit) -> str:
    """Digest of the ordered train/test membership, for run logs."""
    h = hashlib.sha256()
    for part in (split.train, split.test):
        for e in part:
            h.update(e.path.encode("utf-8"))
            h.update(b"\x00")
            h.update(str(e.label).encode())
        h.update(b"\x01")
    return h.hexdigest()


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def _resample_bilinear(img: np.ndarray, out_side: int) -> np.ndarray:
    """Square bilinear resample with pixel-center alignment."""
    h = img.shape[0]
    coords = (np.arange(out_side) + 0.5) * (h / out_side) - 0.5
    coords = np.clip(coords, 0.0, h - 1.0)
    lo = np.floor(coords).astype(np.int64)
    hi = np.minimum(lo + 1, h - 1)
    w = (coords - lo).astype(img.dtype)
    rows = img[lo] * (1 - w)[:, None, None] + img[hi] * w[:, None, None]
    out = (rows[:, lo] * (1 - w)[None, :, None]
           + rows[:, hi] * w[None, :, None])
    return out


def _zoom(img: np.ndarray, factor: float) -> np.ndarray:
    """Resample to round(side*factor) then center-crop (>1) or zero-pad (<1)
    back to the original side; factor 1 is the exact identity."""
    side = img.shape[0]
    target = int(round(side * factor))
    if target == side:
        return img
    resampled = _resample_bilinear(img, target)
    if target > side:
        off = (target - side) // 2
        return np.ascontiguousarray(resampled[off:off + side, off:off + side])
    out = np.zeros_like(img)
    off = (side - target) // 2
    out[off:off + target, off:off + target] = resampled
    return out


def _rotate_arbitrary(img: np.ndarray, degrees: float) -> np.ndarray:
    """Bilinear rotation about the image center; outside samples become 0."""
    side = img.shape[0]
    theta = np.deg2rad(degrees)
    c, s = np.cos(theta), np.sin(theta)
    center = (side - 1) / 2.0
    jj, ii = np.meshgrid(np.arange(side), np.arange(side))
    x = jj - center
    y = ii - center
    src_x = c * x + s * y + center
    src_y = -s * x + c * y + center
    inside = (src_x >= 0) & (src_x <= side - 1) & (src_y >= 0) & (src_y <= side - 1)
    sx = np.clip(src_x, 0, side - 1)
    sy = np.clip(src_y, 0, side - 1)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    x1 = np.minimum(x0 + 1, side - 1)
    y1 = np.minimum(y0 + 1, side - 1)
    wx = (sx - x0)[..., None].astype(img.dtype)
    wy = (sy - y0)[..., None].astype(img.dtype)
    out = (img[y0, x0] * (1 - wy) * (1 - wx) + img[y0, x1] * (1 - wy) * wx
           + img[y1, x0] * wy * (1 - wx) + img[y1, x1] * wy * wx)
    out[~inside] = 0.0
    return out


def augment(sample: Sample, cfg: AugmentationConfig,
            gen: np.random.Generator) -> Sample:
    """Randomized flip / rotation / zoom; label and shape unchanged.

    Draw order is fixed (h-flip, v-flip, right-angle rotation, arbitrary
    angle, zoom) so a given substream always yields the same transform.
    The caller derives ``gen`` from (seed, "augment", sample_index, epoch),
    making results independent of processing order.
    """
    img = sample.pixels.values
    if cfg.horizontal_flip and gen.random() < 0.5:
        img = img[:, ::-1, :]
    if cfg.vertical_flip and gen.random() < 0.5:
        img = img[::-1, :, :]
    if cfg.rotations:
        options = [0] + sorted(cfg.rotations)
        choice = options[int(gen.integers(len(options)))]
        if choice:
            img = np.rot90(img, k=choice // 90)
    if cfg.arbitrary_rotation is not None:
        angle = float(gen.uniform(-cfg.arbitrary_rotation, cfg.arbitrary_rotation))
        img = _rotate_arbitrary(np.ascontiguousarray(img), angle)
    lo, hi = cfg.zoom_range
    factor = float(gen.uniform(lo, hi)) if hi > lo else float(lo)
    img = _zoom(np.ascontiguousarray(img), factor)
    return Sample(Tensor(np.ascontiguousarray(img)), sample.label,
                  sample.source_path)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def batch_iter(items: list, batch_size: int, shuffle_seed: int, epoch: int):
    """Deterministic per-epoch shuffle into batches; the final partial batch
    is emitted, so every item appears exactly once per epoch."""
    if not items:
        raise DataError("batch_iter over an empty collection")
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    gen = DeterministicRng(shuffle_seed).substream("batch", epoch)
    order = gen.permutation(len(items))
    for start in range(0, len(items), batch_size):
        yield [items[i] for i in order[start:start + batch_size]]
