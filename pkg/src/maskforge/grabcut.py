"""GrabCut mask enhancement: alternate colour-model learning and min-cut.

Energy of a foreground mask ``a`` under colour models (fg, bg):

    E(a) = sum_p -log p_{a_p}(z_p) + sum_{p~q, a_p != a_q} gamma * exp(-beta |z_p - z_q|^2) / dist(p, q)

Source side of the cut is foreground. Because -log densities can be
negative, each pixel's two t-links are shifted by their minimum; the
network keeps the removed total in ``offset`` so that
E(a) == cut capacity(a) + offset for labelings without definite pixels.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .gmm import Gmm, assign_component, em_iterations, fit_gmm, from_hard_assignment, log_density
from .maxflow import FlowNetwork, max_flow

BGD, FGD, PR_BGD, PR_FGD = 0, 1, 2, 3

# EM budget for the initial colour models and for each re-learning step.
INIT_EM_ITERS = 50
RELEARN_EM_ITERS = 10
EM_TOL = 1e-5


@dataclass(frozen=True)
class GrabCutParams:
    gamma: float = 50.0
    n_components: int = 5
    max_iterations: int = 10
    connectivity: int = 8
    convergence_tol: float = 1e-3
    seed: int = 0
    hard_constraint_weight: Optional[float] = None  # None: 9*gamma + largest data term

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.n_components < 1:
            raise ValueError("n_components must be >= 1")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")
        if self.convergence_tol < 0:
            raise ValueError("convergence_tol must be >= 0")
        if self.hard_constraint_weight is not None and self.hard_constraint_weight <= 0:
            raise ValueError("hard_constraint_weight must be positive")


class DegenerateMaskError(ValueError):
    pass


def neighbor_pairs(height: int, width: int, connectivity: int = 8):
    """Row-major index pairs (p, q) and their distances, each unordered pair once."""
    idx = np.arange(height * width).reshape(height, width)
    steps = [((0, 1), 1.0), ((1, 0), 1.0)]
    if connectivity == 8:
        steps += [((1, 1), np.sqrt(2.0)), ((1, -1), np.sqrt(2.0))]
    ps, qs, ds = [], [], []
    for (dy, dx), dist in steps:
        y0, y1 = 0, height - dy
        x0, x1 = max(0, -dx), width - max(0, dx)
        if y1 <= y0 or x1 <= x0:
            continue
        p = idx[y0:y1, x0:x1].ravel()
        q = idx[y0 + dy:y1 + dy, x0 + dx:x1 + dx].ravel()
        ps.append(p)
        qs.append(q)
        ds.append(np.full(p.size, dist))
    if not ps:
        return np.zeros(0, int), np.zeros(0, int), np.zeros(0)
    return np.concatenate(ps), np.concatenate(qs), np.concatenate(ds)


def _pair_sqdiff(image: np.ndarray, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    z = image.reshape(-1, 3)
    return np.sum((z[p] - z[q]) ** 2, axis=1)


def compute_beta(image: np.ndarray, connectivity: int = 8) -> float:
    """1 / (2 * mean squared colour difference over neighbour pairs); 0 for flat images."""
    h, w = image.shape[:2]
    if h * w < 2:
        raise ValueError("beta needs at least two pixels")
    p, q, _ = neighbor_pairs(h, w, connectivity)
    mean = float(np.mean(_pair_sqdiff(image, p, q)))
    return 0.0 if mean == 0.0 else 1.0 / (2.0 * mean)


def _nlinks(image: np.ndarray, params: GrabCutParams):
    h, w = image.shape[:2]
    p, q, dist = neighbor_pairs(h, w, params.connectivity)
    beta = compute_beta(image, params.connectivity)
    weights = params.gamma * np.exp(-beta * _pair_sqdiff(image, p, q)) / dist
    return p, q, weights


def labeling_from_mask(mask: np.ndarray) -> np.ndarray:
    """Coarse mask -> trimap with everything probable (nothing clamped)."""
    return np.where(np.asarray(mask, dtype=bool), PR_FGD, PR_BGD).astype(np.uint8)


def _data_terms(image: np.ndarray, fg: Gmm, bg: Gmm):
    z = image.reshape(-1, 3)
    return -log_density(fg, z), -log_density(bg, z)


def build_energy(
    image: np.ndarray,
    labeling: np.ndarray,
    fg: Gmm,
    bg: Gmm,
    params: GrabCutParams,
    _nl=None,
) -> FlowNetwork:
    """Graph whose s-t cuts price foreground masks by the GrabCut energy."""
    h, w = image.shape[:2]
    if labeling.shape != (h, w):
        raise ValueError(f"labeling shape {labeling.shape} does not match image {(h, w)}")
    d_fg, d_bg = _data_terms(image, fg, bg)
    base = np.minimum(d_fg, d_bg)
    src = d_bg - base  # paid when the pixel ends up background
    snk = d_fg - base  # paid when the pixel ends up foreground
    lab = labeling.ravel()
    definite_fg = lab == FGD
    definite_bg = lab == BGD
    hard = params.hard_constraint_weight
    if hard is None:
        hard = 9.0 * params.gamma + float(max(src.max(), snk.max()))
    src = np.where(definite_fg, hard, np.where(definite_bg, 0.0, src))
    snk = np.where(definite_bg, hard, np.where(definite_fg, 0.0, snk))
    p, q, wts = _nl if _nl is not None else _nlinks(image, params)
    offset = float(base[~(definite_fg | definite_bg)].sum())
    return FlowNetwork(h * w, src, snk, p, q, wts, wts.copy(), offset)


def energy_of(image: np.ndarray, mask: np.ndarray, fg: Gmm, bg: Gmm, params: GrabCutParams, _nl=None) -> float:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != image.shape[:2]:
        raise ValueError("mask and image dimensions differ")
    d_fg, d_bg = _data_terms(image, fg, bg)
    a = mask.ravel()
    data = float(np.sum(np.where(a, d_fg, d_bg)))
    p, q, wts = _nl if _nl is not None else _nlinks(image, params)
    smooth = float(np.sum(wts[a[p] != a[q]]))
    return data + smooth


def _fit(px: np.ndarray, k: int, seed: int) -> Gmm:
    return fit_gmm(px, min(k, len(px)), seed=seed, max_iter=INIT_EM_ITERS, tol=EM_TOL)


def relearn(prev: Gmm, px: np.ndarray, k: int, seed: int) -> Gmm:
    """Re-estimate a side's colour model from its current pixels.

    Candidates: the classic GrabCut step (hard component assignment under
    ``prev``, per-component refit, then EM) and EM warm-started at ``prev``.
    The better-scoring one wins, and never scores below ``prev`` itself, so
    the data term of the current mask cannot grow.
    """
    if prev is None or prev.n_components != min(k, len(px)):
        return _fit(px, k, seed)
    baseline = float(np.sum(log_density(prev, px)))
    labels = assign_component(prev, px)
    hard = em_iterations(px, from_hard_assignment(px, labels, prev.n_components), RELEARN_EM_ITERS, EM_TOL)
    warm = em_iterations(px, prev, RELEARN_EM_ITERS, EM_TOL)
    best = max((hard, warm), key=lambda g: g.log_likelihoods[-1])
    return best if best.log_likelihoods[-1] >= baseline else prev


@dataclass
class GrabCutResult:
    mask: np.ndarray
    energies: list = field(default_factory=list)  # energy after each completed iteration
    fg: Optional[Gmm] = None  # colour models that produced ``mask``
    bg: Optional[Gmm] = None
    iterations: int = 0
    stopped_on_empty_side: bool = False


def grabcut(image: np.ndarray, labeling: np.ndarray, params: GrabCutParams = GrabCutParams()) -> GrabCutResult:
    """Run GrabCut from a four-state labeling; definite pixels never change side."""
    h, w = image.shape[:2]
    labeling = np.asarray(labeling, dtype=np.uint8)
    if labeling.shape != (h, w):
        raise ValueError(f"labeling shape {labeling.shape} does not match image {(h, w)}")
    mask = (labeling == FGD) | (labeling == PR_FGD)
    if mask.all() or not mask.any():
        raise DegenerateMaskError("initial mask needs at least one foreground and one background pixel")
    z = image.reshape(-1, 3)
    nl = _nlinks(image, params)
    definite = (labeling == FGD) | (labeling == BGD)
    result = GrabCutResult(mask=mask)
    fg = bg = None
    for it in range(params.max_iterations):
        flat = mask.ravel()
        fg = relearn(fg, z[flat], params.n_components, params.seed)
        bg = relearn(bg, z[~flat], params.n_components, params.seed + 1)
        net = build_energy(image, labeling, fg, bg, params, _nl=nl)
        cut = max_flow(net)
        new_mask = cut.source_side.reshape(h, w)
        new_mask = np.where(definite, labeling == FGD, new_mask)
        result.iterations = it + 1
        if new_mask.all() or not new_mask.any():
            result.stopped_on_empty_side = True
            break
        result.fg, result.bg = fg, bg
        mask = new_mask
        energy = energy_of(image, mask, fg, bg, params, _nl=nl)
        result.mask = mask
        result.energies.append(energy)
        if len(result.energies) >= 2:
            prev = result.energies[-2]
            if prev - energy < params.convergence_tol * abs(prev):
                break
    return result


def run_grabcut(image: np.ndarray, init_mask: np.ndarray, params: GrabCutParams = GrabCutParams()) -> np.ndarray:
    """Enhance a coarse binary mask; returns the final foreground mask."""
    return grabcut(image, labeling_from_mask(init_mask), params).mask
