"""Slide loading, Otsu tissue detection and fixed-grid tiling.

Slides are 8-bit RGB rasters held as ``(H, W, 3)`` uint8 arrays; cancer masks
are ``(H, W)`` uint8 arrays normalised to ``{0, 255}``.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

PATCH_SIZE = 512
MIN_TISSUE_FRACTION = 0.10

# Rec.601 luma weights, scaled to integers so rounding is exact.
_LUMA_WEIGHTS = (299, 587, 114)


class SlideError(ValueError):
    """Raised for malformed slides, masks or manifests."""


@dataclass(frozen=True)
class PatchRef:
    slide_id: str
    x: int
    y: int
    size: int = PATCH_SIZE

    def window(self, array: np.ndarray) -> np.ndarray:
        """Slice this patch out of a slide-sized array."""
        return array[self.y:self.y + self.size, self.x:self.x + self.size]


@dataclass
class SlideManifestEntry:
    slide_id: str
    patient_id: str
    rs_score: int
    grade: int | None
    image_path: str
    mask_path: str

    def __post_init__(self):
        self.rs_score = int(self.rs_score)
        if not 0 <= self.rs_score <= 100:
            raise SlideError(f"{self.slide_id}: rs_score {self.rs_score} outside 0..100")
        if self.grade in ("", None):
            self.grade = None
        else:
            self.grade = int(self.grade)
            if self.grade not in (1, 2, 3):
                raise SlideError(f"{self.slide_id}: grade must be 1, 2, 3 or empty")


MANIFEST_FIELDS = ("slide_id", "patient_id", "rs_score", "grade", "image_path", "mask_path")


def read_manifest(path: str | Path) -> list[SlideManifestEntry]:
    """Read a slide manifest from CSV or JSON.

    Relative image and mask paths are resolved against the manifest's directory.
    """
    path = Path(path)
    if path.suffix.lower() == ".json":
        records = json.loads(path.read_text())
        if not isinstance(records, list):
            raise SlideError(f"{path}: expected a JSON array of slide records")
    else:
        with path.open(newline="") as fh:
            records = list(csv.DictReader(fh))
    entries = []
    for rec in records:
        missing = [f for f in MANIFEST_FIELDS if f not in rec]
        if missing:
            raise SlideError(f"{path}: record missing fields {missing}")
        rec = {f: rec[f] for f in MANIFEST_FIELDS}
        for key in ("image_path", "mask_path"):
            p = Path(rec[key])
            if not p.is_absolute():
                rec[key] = str(path.parent / p)
        entries.append(SlideManifestEntry(**rec))
    ids = [e.slide_id for e in entries]
    if len(set(ids)) != len(ids):
        raise SlideError(f"{path}: duplicate slide_id")
    return entries


def write_manifest(entries: Iterable[SlideManifestEntry], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
        writer.writeheader()
        for e in entries:
            row = asdict(e)
            row["grade"] = "" if e.grade is None else e.grade
            writer.writerow(row)


def load_slide(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return np.ascontiguousarray(arr)


def load_mask(path: str | Path, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Load a cancer mask and normalise nonzero pixels to 255."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.uint8)
    if shape is not None and arr.shape != tuple(shape):
        raise SlideError(f"{path}: mask shape {arr.shape} != slide shape {tuple(shape)}")
    return np.where(arr > 0, 255, 0).astype(np.uint8)


def save_png(array: np.ndarray, path: str | Path) -> None:
    # Fixed PNG settings keep files byte-identical across runs.
    Image.fromarray(array).save(path, format="PNG", optimize=False, compress_level=6)


def tile_slide(
    slide: np.ndarray | tuple[int, int],
    patch_size: int = PATCH_SIZE,
    stride: int | None = None,
    slide_id: str = "",
) -> list[PatchRef]:
    """Enumerate patches row-major from (0, 0); partial edge tiles are dropped.

    ``slide`` may be the image array or a ``(height, width)`` tuple.
    """
    stride = patch_size if stride is None else stride
    if patch_size <= 0 or stride <= 0:
        raise SlideError("patch_size and stride must be positive")
    height, width = slide.shape[:2] if isinstance(slide, np.ndarray) else slide
    if width < patch_size or height < patch_size:
        warnings.warn(
            f"slide {slide_id or '<anon>'} ({width}x{height}) smaller than one "
            f"{patch_size}px patch; no tiles produced",
            stacklevel=2,
        )
        return []
    return [
        PatchRef(slide_id, x, y, patch_size)
        for y in range(0, height - patch_size + 1, stride)
        for x in range(0, width - patch_size + 1, stride)
    ]


def luminance(rgb: np.ndarray) -> np.ndarray:
    """round(0.299 R + 0.587 G + 0.114 B) per pixel, as uint8 (half rounds up)."""
    rgb = np.asarray(rgb)
    if rgb.shape[-1] != 3:
        raise SlideError(f"expected trailing RGB axis, got shape {rgb.shape}")
    c = rgb.astype(np.int32)
    wr, wg, wb = _LUMA_WEIGHTS
    lum = (wr * c[..., 0] + wg * c[..., 1] + wb * c[..., 2] + 500) // 1000
    return np.clip(lum, 0, 255).astype(np.uint8)


def histogram256(gray: np.ndarray) -> np.ndarray:
    return np.bincount(np.asarray(gray, dtype=np.uint8).ravel(), minlength=256).astype(np.int64)


def otsu_threshold(hist: Sequence[int] | np.ndarray) -> int:
    """Otsu threshold over a 256-bin histogram.

    Classes are ``{<= t}`` and ``{> t}``. Between-class variance is compared as
    exact rationals, so ties resolve to the smallest ``t`` deterministically.
    A histogram with all mass in one bin returns that bin.
    """
    h = np.asarray(hist, dtype=np.int64)
    if h.shape != (256,) or (h < 0).any():
        raise SlideError("histogram must be 256 nonnegative counts")
    nonzero = np.flatnonzero(h)
    if nonzero.size == 0:
        raise SlideError("histogram is empty")
    if nonzero.size == 1:
        return int(nonzero[0])

    n_total = int(h.sum())
    s_total = int((h * np.arange(256)).sum())
    cum_n = np.cumsum(h).tolist()
    cum_s = np.cumsum(h * np.arange(256)).tolist()
    # sigma_B^2 * N^2 = (S*n0 - N*s0)^2 / (n0 * (N - n0)); the N^2 factor is constant.
    best_t, best = 0, Fraction(0)
    for t in range(256):
        n0 = cum_n[t]
        n1 = n_total - n0
        if n0 == 0 or n1 == 0:
            continue
        score = Fraction((s_total * n0 - n_total * cum_s[t]) ** 2, n0 * n1)
        if score > best:
            best_t, best = t, score
    return best_t


def slide_threshold(slide: np.ndarray) -> int:
    """One Otsu threshold for the whole slide's luminance histogram."""
    return otsu_threshold(histogram256(luminance(slide)))


def tissue_fraction(patch: np.ndarray, threshold: int) -> float:
    """Fraction of pixels at or below ``threshold`` luminance (tissue is darker)."""
    lum = patch if patch.ndim == 2 else luminance(patch)
    return float(np.count_nonzero(lum <= threshold)) / lum.size


def is_tissue(patch: np.ndarray, threshold: int, min_fraction: float = MIN_TISSUE_FRACTION) -> bool:
    return tissue_fraction(patch, threshold) >= min_fraction


def tissue_patches(
    slide: np.ndarray,
    slide_id: str = "",
    patch_size: int = PATCH_SIZE,
    stride: int | None = None,
    min_fraction: float = MIN_TISSUE_FRACTION,
) -> tuple[list[PatchRef], int]:
    """Tile a slide and keep tissue patches. Returns ``(refs, threshold)``."""
    lum = luminance(slide)
    threshold = otsu_threshold(histogram256(lum))
    refs = [
        ref for ref in tile_slide(slide, patch_size, stride, slide_id)
        if tissue_fraction(ref.window(lum), threshold) >= min_fraction
    ]
    logger.debug("slide %s: threshold %d, %d tissue patches", slide_id, threshold, len(refs))
    return refs, threshold
