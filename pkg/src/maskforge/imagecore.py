"""Pixel-grid types and bit-exact image/mask file I/O.

Images are float64 arrays of shape (H, W, 3) with channels in [0, 1].
Binary masks are bool arrays of shape (H, W). Label masks are uint8
arrays of shape (H, W) holding class ids 0..20 or 255 (ignore).
Pixel (x, y) maps to flat index ``y * width + x`` everywhere.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

NUM_CLASSES = 21
IGNORE_LABEL = 255
BACKGROUND = 0

PathLike = Union[str, Path]

# VOC colour palette; index 255 (ignore) is drawn white.
VOC_PALETTE = [
    0, 0, 0, 128, 0, 0, 0, 128, 0, 128, 128, 0, 0, 0, 128, 128, 0, 128,
    0, 128, 128, 128, 128, 128, 64, 0, 0, 192, 0, 0, 64, 128, 0, 192, 128, 0,
    64, 0, 128, 192, 0, 128, 64, 128, 128, 192, 128, 128, 0, 64, 0, 128, 64, 0,
    0, 192, 0, 128, 192, 0, 0, 64, 128,
]
VOC_PALETTE = VOC_PALETTE + [0, 0, 0] * (255 - NUM_CLASSES) + [255, 255, 255]

_RASTER_FORMATS = {"PNG", "PPM"}
_MASK_FORMATS = {"PNG", "PPM"}  # Pillow reports PGM files as PPM


class ImageIOError(Exception):
    """Base class for raster read/write failures."""


class UnsupportedFormatError(ImageIOError):
    pass


class CorruptImageError(ImageIOError):
    pass


class LabelRangeError(ValueError):
    pass


def _open(path: PathLike, allowed: set) -> Image.Image:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    try:
        img = Image.open(path)
    except UnidentifiedImageError as exc:
        raise UnsupportedFormatError(f"{path}: not a recognised raster file") from exc
    except (OSError, SyntaxError, ValueError) as exc:
        raise CorruptImageError(f"{path}: corrupt header ({exc})") from exc
    if img.format not in allowed:
        raise UnsupportedFormatError(f"{path}: format {img.format} is not supported")
    try:
        img.load()
    except (OSError, SyntaxError, ValueError) as exc:
        raise CorruptImageError(f"{path}: corrupt image data ({exc})") from exc
    return img


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def as_image(pixels) -> np.ndarray:
    """Validate and freeze an (H, W, 3) float array with values in [0, 1]."""
    a = np.array(pixels, dtype=np.float64)
    if a.ndim != 3 or a.shape[2] != 3 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"expected an (H, W, 3) image, got shape {a.shape}")
    if not np.all((a >= 0.0) & (a <= 1.0)):
        raise ValueError("image channels must lie in [0, 1]")
    return _frozen(a)


def as_binary_mask(values) -> np.ndarray:
    a = np.asarray(values)
    if a.ndim != 2 or a.size == 0:
        raise ValueError(f"expected a non-empty (H, W) mask, got shape {a.shape}")
    if a.dtype != bool:
        if not np.all((a == 0) | (a == 1)):
            raise ValueError("binary mask values must be 0 or 1")
        a = a.astype(bool)
    return _frozen(a.copy())


def as_label_mask(labels) -> np.ndarray:
    a = np.asarray(labels)
    if a.ndim != 2 or a.size == 0:
        raise ValueError(f"expected a non-empty (H, W) label mask, got shape {a.shape}")
    check_labels(a)
    return _frozen(a.astype(np.uint8))


def check_labels(labels: np.ndarray, where: str = "label mask") -> None:
    bad = (labels > 20) & (labels != IGNORE_LABEL) | (labels < 0)
    if np.any(bad):
        first = int(np.asarray(labels)[bad].flat[0])
        raise LabelRangeError(f"{where}: label {first} outside {{0..20, 255}}")


def foreground_fraction(mask: np.ndarray) -> float:
    """Fraction of pixels set in a binary mask."""
    mask = np.asarray(mask)
    return int(np.count_nonzero(mask)) / mask.size


def binarize(labels: np.ndarray, category: Optional[int] = None) -> np.ndarray:
    """Foreground = ``category`` if given, else any object class (1..20)."""
    if category is None:
        return (labels != BACKGROUND) & (labels != IGNORE_LABEL)
    return labels == category


def load_image(path: PathLike) -> np.ndarray:
    img = _open(path, _RASTER_FORMATS)
    if img.mode in ("RGBA", "LA", "P", "L", "1"):
        img = img.convert("RGB")
    elif img.mode != "RGB":
        raise UnsupportedFormatError(f"{path}: pixel mode {img.mode} is not 8-bit RGB")
    return as_image(np.asarray(img, dtype=np.uint8) / 255.0)


def save_image(image: np.ndarray, path: PathLike) -> None:
    """Write an RGB image as 8-bit PNG (or PPM for a .ppm suffix)."""
    data = np.rint(np.asarray(image) * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path)


def load_binary_mask(path: PathLike) -> np.ndarray:
    img = _open(path, _MASK_FORMATS)
    if img.mode not in ("L", "1", "P"):
        raise UnsupportedFormatError(f"{path}: binary masks must be 8-bit grayscale, got {img.mode}")
    return as_binary_mask(np.asarray(img) != 0)


def save_binary_mask(mask: np.ndarray, path: PathLike) -> None:
    data = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path)


def write_label_mask(labels: np.ndarray, path: PathLike) -> None:
    """Write a label mask as an indexed PNG carrying the VOC palette."""
    labels = np.asarray(labels)
    check_labels(labels, str(path))
    img = Image.fromarray(labels.astype(np.uint8), mode="P")
    img.putpalette(VOC_PALETTE)
    img.save(path, format="PNG")


def read_label_mask(path: PathLike) -> np.ndarray:
    img = _open(path, {"PNG"})
    if img.mode not in ("P", "L"):
        raise UnsupportedFormatError(f"{path}: label masks must be indexed or grayscale, got {img.mode}")
    labels = np.asarray(img, dtype=np.uint8)
    check_labels(labels, str(path))
    return as_label_mask(labels)


@dataclass(frozen=True)
class ManifestRecord:
    image: Path
    category: int
    coarse_mask: Optional[Path] = None
    gt_mask: Optional[Path] = None

    @property
    def stem(self) -> str:
        return self.image.stem


def load_manifest(path: PathLike) -> list[ManifestRecord]:
    """Read a JSON manifest; relative paths resolve against its directory."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, list):
        raise ValueError(f"{path}: manifest must be a JSON array")
    base = path.parent
    records = []
    problems = []
    for i, entry in enumerate(raw):
        if not isinstance(entry, dict) or "image" not in entry or "category" not in entry:
            problems.append(f"record {i}: needs 'image' and 'category'")
            continue
        category = entry["category"]
        if not isinstance(category, int) or isinstance(category, bool) or not 1 <= category <= 20:
            problems.append(f"record {i}: category must be one integer in 1..20, got {category!r}")
            continue
        paths = {}
        for key in ("image", "coarse_mask", "gt_mask"):
            if entry.get(key) is None:
                paths[key] = None
                continue
            p = Path(entry[key])
            p = p if p.is_absolute() else base / p
            if not p.is_file():
                problems.append(f"record {i}: {key} not found: {p}")
            paths[key] = p
        records.append(ManifestRecord(paths["image"], category, paths["coarse_mask"], paths["gt_mask"]))
    if problems:
        raise ValueError(f"{path}: invalid manifest\n  " + "\n  ".join(problems))
    stems = [r.stem for r in records]
    if len(set(stems)) != len(stems):
        raise ValueError(f"{path}: image file stems must be unique")
    return records


def write_manifest(records: list[ManifestRecord], path: PathLike) -> None:
    path = Path(path)
    out = []
    for r in records:
        entry = {"image": _rel(r.image, path.parent), "category": r.category}
        if r.coarse_mask is not None:
            entry["coarse_mask"] = _rel(r.coarse_mask, path.parent)
        if r.gt_mask is not None:
            entry["gt_mask"] = _rel(r.gt_mask, path.parent)
        out.append(entry)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(out, fh, indent=1)
        fh.write("\n")


def _rel(p: Path, base: Path) -> str:
    try:
        return Path(p).resolve().relative_to(base.resolve()).as_posix()
    except ValueError:
        return str(p)
