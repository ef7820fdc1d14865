"""Seeded synthetic dataset: coloured shapes on textured backgrounds with corrupted coarse masks.

Each category has its own object colour. Backgrounds are blocky two-tone
textures. Every image also carries "distractor" patches whose colours
belong to no category; one usually touches the object and is swallowed
by the coarse mask, others sit elsewhere in the background. Coarse masks
are the object shifted, dilated, punched with holes and merged with the
adjacent distractor, the kind of error single-image GrabCut cannot undo
but cross-image learning can.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imagecore import ManifestRecord, save_binary_mask, save_image, write_label_mask, write_manifest

CATEGORY_COLORS = {
    3: (0.85, 0.20, 0.15),  # bird
    8: (0.20, 0.75, 0.25),  # cat
    15: (0.90, 0.80, 0.15),  # person
}
BACKGROUND_COLORS = [(0.15, 0.25, 0.65), (0.45, 0.45, 0.50), (0.45, 0.30, 0.15)]
DISTRACTOR_COLORS = [(0.60, 0.25, 0.70), (0.15, 0.60, 0.60)]
NOISE = 0.04


@dataclass
class SyntheticImage:
    image_id: str
    image: np.ndarray
    gt: np.ndarray  # uint8 labels
    coarse: np.ndarray  # bool
    category: int


def _shape_mask(rng, size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size]
    cy, cx = rng.uniform(0.35, 0.65, 2) * size
    ry, rx = rng.uniform(0.14, 0.24, 2) * size
    kind = rng.integers(3)
    if kind == 0:
        m = ((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2 <= 1.0
    elif kind == 1:
        m = (np.abs(ys - cy) <= ry) & (np.abs(xs - cx) <= rx)
    else:
        m = (np.abs(ys - cy) / ry + np.abs(xs - cx) / rx) <= 1.2
    return m


def _texture(rng, size: int) -> np.ndarray:
    a, b = rng.choice(len(BACKGROUND_COLORS), 2, replace=False)
    block = int(rng.integers(3, 7))
    cells = rng.random((size // block + 1, size // block + 1)) < 0.5
    pattern = np.kron(cells, np.ones((block, block), dtype=bool))[:size, :size]
    img = np.where(pattern[..., None], BACKGROUND_COLORS[a], BACKGROUND_COLORS[b])
    return img


def _blob(rng, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size]
    return ((ys - cy) ** 2 + (xs - cx) ** 2) <= r * r


def make_image(seed: int, category: int, size: int = 32, image_id: str = "img") -> SyntheticImage:
    rng = np.random.default_rng(seed)
    obj = _shape_mask(rng, size)
    img = _texture(rng, size)

    # Distractor glued to the object boundary, plus free-floating ones.
    ys, xs = np.nonzero(obj)
    edge = np.flatnonzero(ndimage.binary_dilation(obj) & ~obj)
    anchor = edge[rng.integers(len(edge))]
    ay, ax = divmod(int(anchor), size)
    oy, ox = ys.mean(), xs.mean()
    d = np.array([ay - oy, ax - ox])
    d = d / (np.linalg.norm(d) + 1e-9)
    r = rng.uniform(0.09, 0.13) * size
    glued = _blob(rng, size, ay + d[0] * r * 0.8, ax + d[1] * r * 0.8, r) & ~obj
    colour_idx = rng.integers(len(DISTRACTOR_COLORS))
    img[glued] = DISTRACTOR_COLORS[colour_idx]
    for _ in range(int(rng.integers(1, 3))):
        for _attempt in range(20):
            cy, cx = rng.uniform(0.1, 0.9, 2) * size
            free = _blob(rng, size, cy, cx, rng.uniform(0.07, 0.11) * size)
            if not (free & ndimage.binary_dilation(obj | glued, iterations=3)).any():
                img[free] = DISTRACTOR_COLORS[rng.integers(len(DISTRACTOR_COLORS))]
                break

    colour = np.array(CATEGORY_COLORS[category]) + rng.normal(0, 0.04, 3)
    img[obj] = colour
    img = np.clip(img + rng.normal(0, NOISE, img.shape), 0.0, 1.0)
    img = np.rint(img * 255.0) / 255.0  # exactly what an 8-bit PNG stores

    # Coarse mask: shifted, dilated object with holes, merged with the glued distractor.
    shift = rng.integers(-2, 3, 2)
    coarse = np.roll(obj, tuple(shift), axis=(0, 1))
    coarse = ndimage.binary_dilation(coarse, iterations=int(rng.integers(1, 3)))
    coarse |= ndimage.binary_dilation(glued)
    for _ in range(int(rng.integers(1, 4))):
        hy, hx = ys[rng.integers(len(ys))], xs[rng.integers(len(xs))]
        coarse &= ~_blob(rng, size, hy, hx, rng.uniform(1.0, 2.5))

    gt = np.where(obj, category, 0).astype(np.uint8)
    return SyntheticImage(image_id, img, gt, coarse, category)


def make_dataset(n_images: int = 36, size: int = 32, seed: int = 0) -> list:
    cats = sorted(CATEGORY_COLORS)
    ss = np.random.SeedSequence(seed)
    seeds = ss.generate_state(n_images)
    return [
        make_image(int(seeds[i]), cats[i % len(cats)], size, image_id=f"syn_{i:03d}")
        for i in range(n_images)
    ]


def write_dataset(out_dir, n_images: int = 36, size: int = 32, seed: int = 0) -> Path:
    """Write images/, gt/, coarse/ and manifest.json; returns the manifest path."""
    out = Path(out_dir)
    for sub in ("images", "gt", "coarse"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    records = []
    for item in make_dataset(n_images, size, seed):
        img_p = out / "images" / f"{item.image_id}.png"
        gt_p = out / "gt" / f"{item.image_id}.png"
        co_p = out / "coarse" / f"{item.image_id}.png"
        save_image(item.image, img_p)
        write_label_mask(item.gt, gt_p)
        save_binary_mask(item.coarse, co_p)
        records.append(ManifestRecord(img_p, item.category, co_p, gt_p))
    manifest = out / "manifest.json"
    write_manifest(records, manifest)
    return manifest
