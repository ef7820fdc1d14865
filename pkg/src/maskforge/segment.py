"""Pixel-classifier backends for the refinement loop, plus the saliency coarse-mask source.

A backend has two methods:

    train(examples) -> model
    predict(model, image, image_id) -> label mask (same size, labels 0..20)

``AppearanceBackend`` is a trainable per-class colour/position GMM
classifier, ``OracleBackend`` replays stored ground truth, and
``ExchangeBackend`` hands training data to an external model through a
directory and reads its predictions back.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional, Protocol, Sequence

import numpy as np

from .gmm import fit_gmm, log_density
from .imagecore import (
    IGNORE_LABEL,
    NUM_CLASSES,
    as_label_mask,
    read_label_mask,
    save_image,
    write_label_mask,
)

MAX_PIXELS_PER_CLASS = 50_000


class TrainingExample(NamedTuple):
    image_id: str
    image: np.ndarray
    mask: np.ndarray
    category: int = 0


class SegmenterBackend(Protocol):
    def train(self, examples: Sequence[TrainingExample]): ...

    def predict(self, model, image: np.ndarray, image_id: str) -> np.ndarray: ...


# -- appearance model -------------------------------------------------------


@dataclass(frozen=True)
class AppearanceModel:
    classes: tuple
    priors: np.ndarray
    gmms: tuple
    majority_filter: bool = True


def pixel_features(image: np.ndarray) -> np.ndarray:
    """(H*W, 5) rows of (r, g, b, x / width, y / height)."""
    h, w = image.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w]
    return np.column_stack([image.reshape(-1, 3), (xs / w).ravel(), (ys / h).ravel()])


def train_appearance(
    examples: Sequence,
    n_components: int = 5,
    seed: int = 0,
    max_pixels: int = MAX_PIXELS_PER_CLASS,
    majority_filter: bool = True,
) -> AppearanceModel:
    """Fit one GMM per observed class; ignore pixels are skipped.

    ``examples`` holds (image, mask) pairs or ``TrainingExample`` records.
    """
    feats = {}
    for ex in examples:
        image, mask = (ex.image, ex.mask) if isinstance(ex, TrainingExample) else ex
        mask = np.asarray(mask)
        if mask.shape != image.shape[:2]:
            raise ValueError("training mask and image dimensions differ")
        f = pixel_features(image)
        flat = mask.ravel()
        for c in np.unique(flat):
            if c == IGNORE_LABEL:
                continue
            feats.setdefault(int(c), []).append(f[flat == c])
    if not feats:
        raise ValueError("no labelled pixels to train on")
    classes = tuple(sorted(feats))
    counts = np.array([sum(len(a) for a in feats[c]) for c in classes], dtype=float)
    gmms = []
    for c in classes:
        x = np.concatenate(feats[c])
        if len(x) > max_pixels:
            rng = np.random.default_rng([seed, c])
            x = x[np.sort(rng.choice(len(x), max_pixels, replace=False))]
        k = n_components if len(x) >= n_components else 1
        gmms.append(fit_gmm(x, k, seed=seed + c, max_iter=100, tol=1e-5))
    return AppearanceModel(classes, counts / counts.sum(), tuple(gmms), majority_filter)


def class_scores(model: AppearanceModel, image: np.ndarray) -> np.ndarray:
    """(H*W, C) log prior + log density per observed class."""
    f = pixel_features(image)
    return np.column_stack([np.log(p) + log_density(g, f) for p, g in zip(model.priors, model.gmms)])


def majority_filter(labels: np.ndarray) -> np.ndarray:
    """Most frequent label in each clipped 3x3 window; ties go to the lower id."""
    h, w = labels.shape
    values = np.unique(labels)
    padded = np.pad(labels.astype(np.int16), 1, constant_values=-1)
    counts = np.zeros((len(values), h, w), dtype=np.int16)
    for i, v in enumerate(values):
        hit = padded == v
        for dy in range(3):
            for dx in range(3):
                counts[i] += hit[dy:dy + h, dx:dx + w]
    return values[np.argmax(counts, axis=0)].astype(np.uint8)


def predict_appearance(model: AppearanceModel, image: np.ndarray, smooth: Optional[bool] = None) -> np.ndarray:
    h, w = image.shape[:2]
    idx = np.argmax(class_scores(model, image), axis=1)
    labels = np.asarray(model.classes, dtype=np.uint8)[idx].reshape(h, w)
    if model.majority_filter if smooth is None else smooth:
        labels = majority_filter(labels)
    return as_label_mask(labels)


class AppearanceBackend:
    def __init__(self, n_components: int = 5, seed: int = 0, majority_filter: bool = True):
        self.n_components = n_components
        self.seed = seed
        self.majority_filter = majority_filter

    def train(self, examples):
        return train_appearance(examples, self.n_components, self.seed, majority_filter=self.majority_filter)

    def predict(self, model, image, image_id=None):
        return predict_appearance(model, image)


class OracleBackend:
    """Replays stored ground truth; ignore pixels come back as background."""

    def __init__(self, ground_truth: dict):
        self.ground_truth = ground_truth

    def train(self, examples):
        return None

    def predict(self, model, image, image_id):
        gt = np.asarray(self.ground_truth[image_id])
        if gt.shape != image.shape[:2]:
            raise ValueError(f"{image_id}: stored ground truth has the wrong size")
        return as_label_mask(np.where(gt == IGNORE_LABEL, 0, gt))


# -- external exchange -----------------------------------------------------


class MissingPredictionError(FileNotFoundError):
    pass


def export_round(round_dir, examples: Sequence[TrainingExample]) -> Path:
    """Write ``train_manifest.json``, ``labels/`` and ``images/`` for an external trainer."""
    round_dir = Path(round_dir)
    for sub in ("labels", "images", "predictions"):
        (round_dir / sub).mkdir(parents=True, exist_ok=True)
    records = []
    for ex in examples:
        write_label_mask(ex.mask, round_dir / "labels" / f"{ex.image_id}.png")
        save_image(ex.image, round_dir / "images" / f"{ex.image_id}.png")
        records.append(
            {
                "image": f"images/{ex.image_id}.png",
                "category": int(ex.category) if ex.category else 1,
                "gt_mask": f"labels/{ex.image_id}.png",
            }
        )
    with open(round_dir / "train_manifest.json", "w", encoding="utf-8") as fh:
        json.dump(records, fh, indent=1)
        fh.write("\n")
    return round_dir


def import_prediction(round_dir, image_id: str, shape) -> np.ndarray:
    path = Path(round_dir) / "predictions" / f"{image_id}.png"
    if not path.is_file():
        raise MissingPredictionError(f"missing prediction for {image_id}: expected {path}")
    labels = read_label_mask(path)
    if labels.shape != tuple(shape):
        raise ValueError(f"{path}: prediction is {labels.shape[1]}x{labels.shape[0]}, expected {shape[1]}x{shape[0]}")
    if np.any(labels == IGNORE_LABEL):
        raise ValueError(f"{path}: predictions may not contain the ignore label")
    return labels


class ExchangeBackend:
    """Each ``train`` call opens ``<root>/round_<k>/``; predictions are read from it."""

    def __init__(self, root, start_round: int = 0):
        self.root = Path(root)
        self.next_round = start_round

    def train(self, examples):
        round_dir = export_round(self.root / f"round_{self.next_round}", examples)
        self.next_round += 1
        return round_dir

    def predict(self, model, image, image_id):
        return import_prediction(model, image_id, image.shape[:2])


# -- saliency coarse masks ---------------------------------------------------


@dataclass(frozen=True)
class SaliencyParams:
    center_prior_sigma: float = 0.3  # fraction of the image diagonal
    threshold_mode: str = "otsu"
    fixed_threshold: float = 0.5

    def __post_init__(self):
        if not self.center_prior_sigma > 0:
            raise ValueError("center_prior_sigma must be positive")
        if self.threshold_mode not in ("otsu", "fixed"):
            raise ValueError("threshold_mode must be 'otsu' or 'fixed'")
        if not 0.0 <= self.fixed_threshold <= 1.0:
            raise ValueError("fixed_threshold must lie in [0, 1]")


def saliency_map(image: np.ndarray, center_prior_sigma: float = 0.3) -> np.ndarray:
    """Contrast to the mean border colour, weighted by a Gaussian centre prior, scaled to [0, 1]."""
    h, w = image.shape[:2]
    frame = np.concatenate([image[0], image[-1], image[1:-1, 0], image[1:-1, -1]])
    contrast = np.linalg.norm(image - frame.mean(axis=0), axis=2)
    ys, xs = np.mgrid[0:h, 0:w]
    d2 = (xs - (w - 1) / 2.0) ** 2 + (ys - (h - 1) / 2.0) ** 2
    sigma = center_prior_sigma * np.hypot(w, h)
    sal = contrast * np.exp(-d2 / (2.0 * sigma**2))
    peak = sal.max()
    return sal / peak if peak > 0 else np.zeros_like(sal)


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    hist, edges = np.histogram(values, bins=bins, range=(0.0, 1.0))
    hist = hist.astype(float)
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    m0 = np.cumsum(hist * centers)
    mt = m0[-1]
    with np.errstate(invalid="ignore", divide="ignore"):
        between = (mt * w0 / w0[-1] - m0) ** 2 / (w0 * w1)
    between = np.nan_to_num(between[:-1], nan=-1.0, posinf=-1.0)
    if between.max() <= 0:
        return 1.0
    return float(edges[1:][np.argmax(between)])


def coarse_saliency_mask(image: np.ndarray, params: SaliencyParams = SaliencyParams()) -> np.ndarray:
    h, w = image.shape[:2]
    if h < 2 or w < 2:
        raise ValueError("saliency needs an image of at least 2x2")
    sal = saliency_map(image, params.center_prior_sigma)
    t = otsu_threshold(sal) if params.threshold_mode == "otsu" else params.fixed_threshold
    return sal > t


def check_label_output(labels: np.ndarray, shape) -> None:
    """Conformance rule shared by every backend."""
    labels = np.asarray(labels)
    if labels.shape != tuple(shape):
        raise AssertionError(f"backend returned shape {labels.shape}, expected {tuple(shape)}")
    if labels.min() < 0 or labels.max() >= NUM_CLASSES:
        raise AssertionError("backend returned labels outside 0..20")
