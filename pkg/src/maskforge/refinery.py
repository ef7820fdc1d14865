"""Recursive pseudo-label refinement.

Round 0 turns coarse masks into GrabCut-enhanced, category-labelled
masks. Each later round trains a backend on the active records, predicts
every record, then post-processes each prediction in a fixed order:
drop foreign categories, optionally re-run GrabCut, and finally judge
coverage to set the record's active flag for the next round.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .evalmetrics import EvalReport, evaluate
from .grabcut import DegenerateMaskError, GrabCutParams, run_grabcut
from .imagecore import IGNORE_LABEL, as_label_mask, read_label_mask, write_label_mask
from .segment import SaliencyParams, TrainingExample, coarse_saliency_mask

log = logging.getLogger(__name__)

SEMANTIC, BINARY = "semantic", "binary"
FOREGROUND_LABEL = 1  # the single object label in binary mode


@dataclass(frozen=True)
class RefinementConfig:
    rounds: int = 5
    low_coverage: float = 0.01
    high_coverage: float = 0.80
    apply_grabcut_between_rounds: bool = True
    grabcut: GrabCutParams = field(default_factory=GrabCutParams)
    mode: str = SEMANTIC
    seed: int = 0

    def problems(self) -> list:
        out = []
        if self.rounds < 1:
            out.append("rounds must be >= 1")
        if not 0.0 <= self.low_coverage < self.high_coverage <= 1.0:
            out.append("need 0 <= low_coverage < high_coverage <= 1")
        if self.mode not in (SEMANTIC, BINARY):
            out.append(f"mode must be '{SEMANTIC}' or '{BINARY}'")
        return out

    def __post_init__(self):
        bad = self.problems()
        if bad:
            raise ValueError("; ".join(bad))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Sample:
    image_id: str
    image: np.ndarray
    category: int
    coarse_mask: Optional[np.ndarray] = None
    gt: Optional[np.ndarray] = None


@dataclass
class ImageRecord:
    image_id: str
    category: int
    mask: np.ndarray
    active: bool
    history: list = field(default_factory=list)  # [{"round", "fraction", "active"}]


@dataclass
class RefinementState:
    records: list
    round_index: int = 0

    def active_records(self) -> list:
        return [r for r in self.records if r.active]


class NoActiveRecordsError(RuntimeError):
    pass


# -- per-image rules ----------------------------------------------------------


def assign_semantic_labels(mask: np.ndarray, category: int) -> np.ndarray:
    """Foreground pixels take the image's category, everything else background."""
    if not 1 <= category <= 20:
        raise ValueError(f"category {category} outside 1..20")
    return as_label_mask(np.where(np.asarray(mask, dtype=bool), category, 0))


def object_fraction(labels: np.ndarray) -> float:
    labels = np.asarray(labels)
    return int(np.count_nonzero((labels != 0) & (labels != IGNORE_LABEL))) / labels.size


def coverage_filter(labels: np.ndarray, low: float, high: float) -> bool:
    """True (keep) unless the object fraction is strictly below ``low`` or strictly above ``high``."""
    if not low < high:
        raise ValueError("low must be below high")
    f = object_fraction(labels)
    return not (f < low or f > high)


def suppress_foreign(pred: np.ndarray, category: int) -> np.ndarray:
    """Keep only ``category`` pixels; other classes become background, ignore stays."""
    if not 1 <= category <= 20:
        raise ValueError(f"category {category} outside 1..20")
    pred = np.asarray(pred)
    keep = (pred == category) | (pred == IGNORE_LABEL)
    return as_label_mask(np.where(keep, pred, 0))


def reenhance(image: np.ndarray, pred: np.ndarray, category: int, params: GrabCutParams) -> np.ndarray:
    """GrabCut the category region of a suppressed prediction; degenerate masks pass through."""
    fg = np.asarray(pred) == category
    if fg.all() or not fg.any():
        return as_label_mask(pred)
    return assign_semantic_labels(run_grabcut(image, fg, params), category)


def _label_for(record_category: int, config: RefinementConfig) -> int:
    return FOREGROUND_LABEL if config.mode == BINARY else record_category


def _init_one(image, coarse, label, config: RefinementConfig):
    coarse = np.asarray(coarse, dtype=bool)
    try:
        enhanced = run_grabcut(image, coarse, config.grabcut)
    except DegenerateMaskError:
        enhanced = coarse
    labels = assign_semantic_labels(enhanced, label)
    return labels, coverage_filter(labels, config.low_coverage, config.high_coverage)


def _post_one(image, pred, label, config: RefinementConfig):
    labels = suppress_foreign(pred, label)
    if config.apply_grabcut_between_rounds:
        labels = reenhance(image, labels, label, config.grabcut)
    return labels, coverage_filter(labels, config.low_coverage, config.high_coverage)


def _starmap(fn, jobs: int, *columns):
    if jobs <= 1:
        return [fn(*args) for args in zip(*columns)]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, *columns))


# -- rounds ---------------------------------------------------------------------


CoarseSource = Union[str, SaliencyParams]


def init_state(
    samples: Sequence[Sample],
    coarse_source: CoarseSource = "manifest",
    config: RefinementConfig = RefinementConfig(),
    jobs: int = 1,
) -> RefinementState:
    """Coarse mask -> GrabCut -> category labels -> coverage flag, for every sample."""
    coarse = []
    for s in samples:
        if isinstance(coarse_source, SaliencyParams):
            coarse.append(coarse_saliency_mask(s.image, coarse_source))
        elif s.coarse_mask is not None:
            coarse.append(s.coarse_mask)
        else:
            raise ValueError(f"{s.image_id}: no coarse mask available")
    labels = [_label_for(s.category, config) for s in samples]
    outs = _starmap(_init_one, jobs, [s.image for s in samples], coarse, labels, [config] * len(samples))
    records = []
    for s, (mask, keep) in zip(samples, outs):
        frac = object_fraction(mask)
        log.info("stage=init image=%s fraction=%.4f active=%s", s.image_id, frac, keep)
        records.append(
            ImageRecord(s.image_id, s.category, mask, keep, [{"round": 0, "fraction": frac, "active": keep}])
        )
    return RefinementState(records, 0)


def run_round(
    state: RefinementState,
    backend,
    samples: Sequence[Sample],
    config: RefinementConfig,
    jobs: int = 1,
) -> RefinementState:
    """Train on active records, predict all, post-process, update masks and flags."""
    by_id = {s.image_id: s for s in samples}
    active = state.active_records()
    if not active:
        raise NoActiveRecordsError(f"round {state.round_index + 1}: no active records to train on")
    examples = [
        TrainingExample(r.image_id, by_id[r.image_id].image, r.mask, _label_for(r.category, config))
        for r in active
    ]
    model = backend.train(examples)
    preds = [backend.predict(model, by_id[r.image_id].image, r.image_id) for r in state.records]
    labels = [_label_for(r.category, config) for r in state.records]
    images = [by_id[r.image_id].image for r in state.records]
    outs = _starmap(_post_one, jobs, images, preds, labels, [config] * len(images))
    k = state.round_index + 1
    records = []
    for r, (mask, keep) in zip(state.records, outs):
        frac = object_fraction(mask)
        log.info("stage=round%d image=%s fraction=%.4f active=%s", k, r.image_id, frac, keep)
        records.append(replace(r, mask=mask, active=keep, history=r.history + [{"round": k, "fraction": frac, "active": keep}]))
    return RefinementState(records, k)


def _eval_gt(gt: np.ndarray, config: RefinementConfig) -> np.ndarray:
    if config.mode == BINARY:
        return np.where(gt == IGNORE_LABEL, IGNORE_LABEL, (gt != 0).astype(np.uint8)).astype(np.uint8)
    return gt


def evaluate_state(state: RefinementState, samples: Sequence[Sample], config: RefinementConfig) -> Optional[EvalReport]:
    by_id = {s.image_id: s for s in samples}
    pairs = [(r.mask, _eval_gt(by_id[r.image_id].gt, config)) for r in state.records if by_id[r.image_id].gt is not None]
    return evaluate(pairs) if pairs else None


def write_snapshot(state: RefinementState, samples, out_dir, config: RefinementConfig) -> Path:
    snap = Path(out_dir) / f"round_{state.round_index}"
    (snap / "masks").mkdir(parents=True, exist_ok=True)
    for r in state.records:
        write_label_mask(r.mask, snap / "masks" / f"{r.image_id}.png")
    doc = {
        "round": state.round_index,
        "mode": config.mode,
        "records": [
            {"image_id": r.image_id, "category": r.category, "active": r.active, "history": r.history}
            for r in state.records
        ],
    }
    with open(snap / "state.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
    report = evaluate_state(state, samples, config)
    if report is not None:
        report.write(snap / "eval.json")
    return snap


def load_snapshot(snap_dir) -> RefinementState:
    snap = Path(snap_dir)
    with open(snap / "state.json", encoding="utf-8") as fh:
        doc = json.load(fh)
    records = [
        ImageRecord(
            rec["image_id"],
            rec["category"],
            read_label_mask(snap / "masks" / f"{rec['image_id']}.png"),
            rec["active"],
            rec["history"],
        )
        for rec in doc["records"]
    ]
    return RefinementState(records, doc["round"])


def run_refinement(
    samples: Sequence[Sample],
    backend,
    config: RefinementConfig,
    out_dir=None,
    coarse_source: CoarseSource = "manifest",
    jobs: int = 1,
    snapshot_init: bool = False,
    state: Optional[RefinementState] = None,
):
    """Initialise (unless ``state`` is given) and run ``config.rounds`` rounds.

    Returns the final state and the snapshot directories written, one per
    round (plus round 0 when ``snapshot_init``).
    """
    snaps = []
    if state is None:
        state = init_state(samples, coarse_source, config, jobs)
        if out_dir is not None and snapshot_init:
            snaps.append(write_snapshot(state, samples, out_dir, config))
    for _ in range(config.rounds):
        state = run_round(state, backend, samples, config, jobs)
        if out_dir is not None:
            snaps.append(write_snapshot(state, samples, out_dir, config))
    return state, snaps
