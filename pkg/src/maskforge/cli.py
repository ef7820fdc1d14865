"""Command-line front end: ``maskforge <subcommand>``.

Exit codes: 0 success, 1 invalid input or config, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import imagecore as ic
from .evalmetrics import evaluate
from .grabcut import DegenerateMaskError, GrabCutParams, run_grabcut
from .refinery import (
    BINARY,
    SEMANTIC,
    RefinementConfig,
    Sample,
    load_snapshot,
    run_refinement,
)
from .segment import (
    AppearanceBackend,
    ExchangeBackend,
    OracleBackend,
    SaliencyParams,
    TrainingExample,
    MissingPredictionError,
    coarse_saliency_mask,
)

log = logging.getLogger("maskforge")

BACKENDS = ("appearance", "oracle", "external-exchange")
COARSE_SOURCES = ("external", "saliency")


class ValidationError(Exception):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("\n".join(self.problems))


@dataclass
class PipelineConfig:
    manifest: str = "manifest.json"
    output: str = "out"
    coarse_source: str = "external"  # masks named in the manifest, or native saliency
    saliency: dict = field(default_factory=lambda: asdict(SaliencyParams()))
    backend: str = "appearance"
    exchange_dir: Optional[str] = None
    appearance: dict = field(default_factory=lambda: {"n_components": 5, "majority_filter": True})
    refinement: dict = field(default_factory=lambda: _refinement_dict(RefinementConfig()))
    seed: Optional[int] = None

    def problems(self) -> list:
        out = []
        if self.coarse_source not in COARSE_SOURCES:
            out.append(f"coarse_source must be one of {COARSE_SOURCES}, got {self.coarse_source!r}")
        if self.backend not in BACKENDS:
            out.append(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if not Path(self.manifest).is_file():
            out.append(f"manifest not found: {self.manifest}")
        else:
            try:
                records = ic.load_manifest(self.manifest)
            except (ValueError, json.JSONDecodeError) as exc:
                out.append(str(exc))
            else:
                if self.coarse_source == "external":
                    missing = [r.stem for r in records if r.coarse_mask is None]
                    if missing:
                        out.append(f"no coarse_mask in manifest for: {', '.join(missing)}")
                if self.backend == "oracle":
                    missing = [r.stem for r in records if r.gt_mask is None]
                    if missing:
                        out.append(f"oracle backend needs gt_mask for: {', '.join(missing)}")
        for name, build in (("saliency", self.saliency_params), ("refinement", self.refinement_config)):
            try:
                build()
            except (TypeError, ValueError) as exc:
                out.append(f"{name}: {exc}")
        return out

    def saliency_params(self) -> SaliencyParams:
        return SaliencyParams(**self.saliency)

    def refinement_config(self) -> RefinementConfig:
        raw = dict(self.refinement)
        gc = dict(raw.pop("grabcut", {}))
        seed = self.seed or 0
        gc["seed"] = seed
        return RefinementConfig(grabcut=GrabCutParams(**gc), **{**raw, "seed": seed})


def _refinement_dict(cfg: RefinementConfig) -> dict:
    d = asdict(cfg)
    d.pop("seed")
    d["grabcut"].pop("seed")
    return d


# -- shared helpers -----------------------------------------------------------------


def _resolve(base: Path, p: Optional[str]) -> Optional[str]:
    if p is None:
        return None
    q = Path(p)
    return str(q if q.is_absolute() else (base / q))


def _seed_fallback(seed: Optional[int]) -> int:
    if seed is not None:
        return seed
    env = os.environ.get("MASKFORGE_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise ValidationError([f"MASKFORGE_SEED must be an integer, got {env!r}"])


def _grabcut_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("grabcut")
    g.add_argument("--gamma", type=float)
    g.add_argument("--gmm-components", type=int, dest="n_components")
    g.add_argument("--max-iterations", type=int)
    g.add_argument("--connectivity", type=int, choices=(4, 8))
    g.add_argument("--convergence-tol", type=float)
    g.add_argument("--hard-constraint-weight", type=float)


_GRABCUT_FIELDS = ("gamma", "n_components", "max_iterations", "connectivity", "convergence_tol", "hard_constraint_weight")


def _grabcut_overrides(args) -> dict:
    return {k: getattr(args, k) for k in _GRABCUT_FIELDS if getattr(args, k, None) is not None}


def _saliency_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("saliency")
    g.add_argument("--center-prior-sigma", type=float)
    g.add_argument("--threshold-mode", choices=("otsu", "fixed"))
    g.add_argument("--fixed-threshold", type=float)


def _saliency_overrides(args) -> dict:
    keys = ("center_prior_sigma", "threshold_mode", "fixed_threshold")
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


def load_samples(records) -> list:
    samples = []
    for r in records:
        image = ic.load_image(r.image)
        coarse = ic.load_binary_mask(r.coarse_mask) if r.coarse_mask else None
        gt = ic.read_label_mask(r.gt_mask) if r.gt_mask else None
        for name, m in (("coarse mask", coarse), ("ground truth", gt)):
            if m is not None and m.shape != image.shape[:2]:
                raise ValidationError([f"{r.stem}: {name} size {m.shape} differs from image {image.shape[:2]}"])
        samples.append(Sample(r.stem, image, r.category, coarse, gt))
    return samples


def _make_backend(cfg: PipelineConfig, samples, start_round: int = 0):
    seed = cfg.seed or 0
    if cfg.backend == "appearance":
        return AppearanceBackend(cfg.appearance.get("n_components", 5), seed, cfg.appearance.get("majority_filter", True))
    if cfg.backend == "oracle":
        missing = [s.image_id for s in samples if s.gt is None]
        if missing:
            raise ValidationError([f"oracle backend needs ground truth for: {', '.join(missing)}"])
        return OracleBackend({s.image_id: s.gt for s in samples})
    root = cfg.exchange_dir or str(Path(cfg.output) / "exchange")
    return ExchangeBackend(root, start_round)


def _write_json(path: Path, doc) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


# -- subcommands ----------------------------------------------------------------------


def cmd_enhance(args) -> int:
    image = ic.load_image(args.image)
    coarse = ic.load_binary_mask(args.coarse_mask)
    if coarse.shape != image.shape[:2]:
        raise ValidationError([f"{args.coarse_mask}: mask size {coarse.shape} differs from image {image.shape[:2]}"])
    if coarse.all() or not coarse.any():
        raise ValidationError(
            [f"{args.coarse_mask}: coarse mask must contain both foreground and background pixels"]
        )
    params = GrabCutParams(seed=_seed_fallback(args.seed), **_grabcut_overrides(args))
    out = run_grabcut(image, coarse, params)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    ic.save_binary_mask(out, args.out)
    log.info("stage=enhance image=%s fraction=%.4f", Path(args.image).stem, ic.foreground_fraction(out))
    return 0


def cmd_saliency(args) -> int:
    image = ic.load_image(args.image)
    mask = coarse_saliency_mask(image, SaliencyParams(**_saliency_overrides(args)))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    ic.save_binary_mask(mask, args.out)
    log.info("stage=saliency image=%s fraction=%.4f", Path(args.image).stem, ic.foreground_fraction(mask))
    return 0


def build_pipeline_config(args) -> PipelineConfig:
    """Config file values, then flag overrides; paths resolved against the config file."""
    raw = {}
    base = Path.cwd()
    if args.config:
        cfg_path = Path(args.config)
        if not cfg_path.is_file():
            raise ValidationError([f"config not found: {cfg_path}"])
        with open(cfg_path, encoding="utf-8") as fh:
            raw = json.load(fh)
        base = cfg_path.resolve().parent
    known = set(PipelineConfig.__dataclass_fields__)
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ValidationError([f"unknown config keys: {', '.join(unknown)}"])
    cfg = PipelineConfig(**raw)
    defaults = PipelineConfig()
    cfg.saliency = {**defaults.saliency, **cfg.saliency}
    cfg.appearance = {**defaults.appearance, **cfg.appearance}
    cfg.refinement = {**defaults.refinement, **cfg.refinement}
    cfg.refinement["grabcut"] = {**defaults.refinement["grabcut"], **cfg.refinement.get("grabcut", {})}
    cfg.manifest = _resolve(base, cfg.manifest)
    cfg.output = _resolve(base, cfg.output)
    cfg.exchange_dir = _resolve(base, cfg.exchange_dir)

    if args.manifest:
        cfg.manifest = str(Path(args.manifest).resolve())
    if args.output:
        cfg.output = str(Path(args.output).resolve())
    if args.exchange_dir:
        cfg.exchange_dir = str(Path(args.exchange_dir).resolve())
    for name in ("coarse_source", "backend"):
        if getattr(args, name) is not None:
            setattr(cfg, name, getattr(args, name))
    cfg.saliency.update(_saliency_overrides(args))
    if args.gmm_components_appearance is not None:
        cfg.appearance["n_components"] = args.gmm_components_appearance
    if args.majority_filter is not None:
        cfg.appearance["majority_filter"] = args.majority_filter
    for name in ("rounds", "low_coverage", "high_coverage", "mode"):
        if getattr(args, name) is not None:
            cfg.refinement[name] = getattr(args, name)
    if args.grabcut_between_rounds is not None:
        cfg.refinement["apply_grabcut_between_rounds"] = args.grabcut_between_rounds
    cfg.refinement["grabcut"].update(_grabcut_overrides(args))
    cfg.seed = _seed_fallback(args.seed if args.seed is not None else cfg.seed)
    problems = cfg.problems()
    if problems:
        raise ValidationError(problems)
    return cfg


def _summary(snaps, mode: str) -> dict:
    rounds = []
    for snap in snaps:
        with open(snap / "state.json", encoding="utf-8") as fh:
            state = json.load(fh)
        entry = {"round": state["round"], "active": sum(r["active"] for r in state["records"])}
        if (snap / "eval.json").is_file():
            with open(snap / "eval.json", encoding="utf-8") as fh:
                ev = json.load(fh)
            entry["mean_iou"] = ev["mean_iou"]
            entry["mean_binary_iou"] = ev["mean_binary_iou"]
        rounds.append(entry)
    return {"mode": mode, "rounds": rounds}


def _run(cfg: PipelineConfig, jobs: int, resume_from: Optional[str]) -> int:
    records = ic.load_manifest(cfg.manifest)
    rcfg = cfg.refinement_config()
    samples = load_samples(records)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", asdict(cfg))

    state = None
    snaps = []
    if resume_from is not None:
        state = load_snapshot(resume_from)
        ids = {s.image_id for s in samples}
        unknown = [r.image_id for r in state.records if r.image_id not in ids]
        if unknown:
            raise ValidationError([f"snapshot records not in manifest: {', '.join(unknown)}"])
    coarse = cfg.saliency_params() if cfg.coarse_source == "saliency" else "manifest"
    backend = _make_backend(cfg, samples, state.round_index if state else 0)
    if state is None:
        state, snaps = run_refinement(samples, backend, rcfg, out, coarse, jobs, snapshot_init=True)
    else:
        state, snaps = run_refinement(samples, backend, rcfg, out, coarse, jobs, state=state)
    _write_json(out / "summary.json", _summary(snaps, rcfg.mode))
    return 0


def cmd_pipeline(args) -> int:
    cfg = build_pipeline_config(args)
    return _run(cfg, args.jobs, None)


def cmd_refine(args) -> int:
    cfg = build_pipeline_config(args)
    snap = Path(args.from_snapshot)
    if not (snap / "state.json").is_file():
        raise ValidationError([f"not a snapshot directory (no state.json): {snap}"])
    return _run(cfg, args.jobs, str(snap))


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise ValidationError([f"not a directory: {d}"])
    preds = {p.stem: p for p in sorted(pred_dir.glob("*.png"))}
    gts = {p.stem: p for p in sorted(gt_dir.glob("*.png"))}
    common = sorted(set(preds) & set(gts))
    if not common:
        raise ValidationError([f"no matching file stems between {pred_dir} and {gt_dir}"])
    pairs = []
    for stem in common:
        pred = ic.read_label_mask(preds[stem])
        gt = ic.read_label_mask(gts[stem])
        if pred.shape != gt.shape:
            raise ValidationError([f"{stem}: prediction size {pred.shape} differs from ground truth {gt.shape}"])
        if args.mode == BINARY:
            pred = (pred != 0).astype(np.uint8)
            gt = np.where(gt == ic.IGNORE_LABEL, gt, gt != 0).astype(np.uint8)
        pairs.append((pred, gt))
    report = evaluate(pairs)
    doc = report.to_dict()
    doc["images"] = len(common)
    doc["unmatched_predictions"] = sorted(set(preds) - set(gts))
    doc["unmatched_ground_truth"] = sorted(set(gts) - set(preds))
    for stem in doc["unmatched_predictions"] + doc["unmatched_ground_truth"]:
        log.warning("stage=eval image=%s unmatched", stem)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    _write_json(Path(args.out), doc)
    log.info("stage=eval images=%d mean_iou=%.4f", len(common), report.mean_iou)
    return 0


def cmd_segment(args) -> int:
    """Train a backend on manifest masks and predict every manifest image."""
    records = ic.load_manifest(args.manifest)
    samples = load_samples(records)
    seed = _seed_fallback(args.seed)
    examples = []
    for s in samples:
        if args.train_masks:
            path = Path(args.train_masks) / f"{s.image_id}.png"
            if not path.is_file():
                continue
            mask = ic.read_label_mask(path)
        elif s.gt is not None:
            mask = s.gt
        else:
            continue
        examples.append(TrainingExample(s.image_id, s.image, mask, s.category))
    if not examples:
        raise ValidationError(["no training masks found"])
    if args.backend == "oracle":
        backend = OracleBackend({s.image_id: s.gt for s in samples if s.gt is not None})
    else:
        backend = AppearanceBackend(args.gmm_components_appearance or 5, seed, args.majority_filter is not False)
    model = backend.train(examples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for s in samples:
        pred = backend.predict(model, s.image, s.image_id)
        ic.write_label_mask(pred, out / f"{s.image_id}.png")
        log.info("stage=segment image=%s", s.image_id)
    return 0


# -- parser ---------------------------------------------------------------------------


def _pipeline_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--manifest")
    p.add_argument("--output")
    p.add_argument("--coarse-source", choices=COARSE_SOURCES)
    p.add_argument("--backend", choices=BACKENDS)
    p.add_argument("--exchange-dir")
    p.add_argument("--rounds", type=int)
    p.add_argument("--low-coverage", type=float)
    p.add_argument("--high-coverage", type=float)
    p.add_argument("--mode", choices=(SEMANTIC, BINARY))
    p.add_argument("--grabcut-between-rounds", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--appearance-components", type=int, dest="gmm_components_appearance")
    p.add_argument("--majority-filter", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, default=1)
    _grabcut_args(p)
    _saliency_args(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maskforge", description="Coarse-to-fine pseudo-label segmentation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("enhance", help="GrabCut-enhance one coarse mask")
    p.add_argument("--image", required=True)
    p.add_argument("--coarse-mask", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    _grabcut_args(p)
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("saliency", help="coarse mask from colour contrast and a centre prior")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    _saliency_args(p)
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser("pipeline", help="coarse -> enhance -> rounds -> reports")
    _pipeline_args(p)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("refine", help="continue rounds from an existing snapshot")
    _pipeline_args(p)
    p.add_argument("--from", dest="from_snapshot", required=True, help="round_<k> snapshot directory")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("eval", help="dataset-level metrics for a prediction directory")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=(SEMANTIC, BINARY), default=SEMANTIC)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("segment", help="train a backend and predict manifest images")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--backend", choices=("appearance", "oracle"), default="appearance")
    p.add_argument("--train-masks", help="directory of <stem>.png label masks (default: manifest gt_mask)")
    p.add_argument("--appearance-components", type=int, dest="gmm_components_appearance")
    p.add_argument("--majority-filter", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_segment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s %(message)s",
        force=True,
    )
    try:
        return args.func(args)
    except MissingPredictionError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        print("write the predictions, then continue with `maskforge refine --from <last round_k>`", file=sys.stderr)
        return 2
    except ValidationError as exc:
        for problem in exc.problems:
            print(f"error: {problem}", file=sys.stderr)
        return 1
    except (FileNotFoundError, ic.ImageIOError, ic.LabelRangeError, DegenerateMaskError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
