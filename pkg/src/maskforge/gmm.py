"""Full-covariance Gaussian mixtures fitted by EM.

Covariances are kept above an eigenvalue floor ``eps``. The M-step
projects each weighted scatter matrix onto {S : S >= eps*I} by clipping
its eigenvalues, which is the exact constrained maximiser; EM therefore
never lowers the training log-likelihood.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

DEFAULT_EPS = 1e-3
KMEANS_ITERS = 5
_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class Gmm:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, d)
    covariances: np.ndarray  # (K, d, d)
    log_likelihoods: tuple = field(default=(), compare=False)

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def to_json(self) -> str:
        return json.dumps(
            {
                "weights": self.weights.tolist(),
                "means": self.means.tolist(),
                "covariances": self.covariances.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "Gmm":
        raw = json.loads(text)
        return cls(
            np.array(raw["weights"], dtype=float),
            np.array(raw["means"], dtype=float),
            np.array(raw["covariances"], dtype=float),
        )


def floor_covariance(cov: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Symmetrise ``cov`` and raise every eigenvalue to at least ``eps``."""
    cov = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(cov)
    if vals[0] >= eps:
        return cov
    vals = np.maximum(vals, eps)
    out = (vecs * vals) @ vecs.T
    return 0.5 * (out + out.T)


def component_log_densities(model: Gmm, samples: np.ndarray) -> np.ndarray:
    """Return (N, K) array of log(pi_k) + log N(x_n; mu_k, Sigma_k)."""
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    n, d = x.shape
    out = np.empty((n, model.n_components))
    with np.errstate(divide="ignore"):
        log_w = np.log(model.weights)
    for k in range(model.n_components):
        chol = np.linalg.cholesky(model.covariances[k])
        diff = x - model.means[k]
        sol = np.linalg.solve(chol, diff.T)  # L^-1 (x - mu)
        maha = np.einsum("ij,ij->j", sol, sol)
        log_det = 2.0 * np.sum(np.log(np.diag(chol)))
        out[:, k] = log_w[k] - 0.5 * (d * _LOG_2PI + log_det + maha)
    return out


def _logsumexp(a: np.ndarray) -> np.ndarray:
    m = np.max(a, axis=1)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return m + np.log(np.sum(np.exp(a - m[:, None]), axis=1))


def log_density(model: Gmm, samples: np.ndarray) -> np.ndarray | float:
    """log sum_k pi_k N(x; mu_k, Sigma_k), for one sample or an (N, d) batch."""
    samples = np.asarray(samples, dtype=float)
    out = _logsumexp(component_log_densities(model, samples))
    return float(out[0]) if samples.ndim == 1 else out


def assign_component(model: Gmm, samples: np.ndarray) -> np.ndarray | int:
    """Index of the most probable weighted component; ties go to the lowest index."""
    samples = np.asarray(samples, dtype=float)
    idx = np.argmax(component_log_densities(model, samples), axis=1)
    return int(idx[0]) if samples.ndim == 1 else idx


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers)


def _kmeans(x: np.ndarray, centers: np.ndarray, iters: int) -> np.ndarray:
    labels = np.zeros(len(x), dtype=int)
    for _ in range(iters + 1):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = np.argmin(d2, axis=1)
        for j in range(len(centers)):
            members = x[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    return labels


def from_hard_assignment(x: np.ndarray, labels: np.ndarray, k: int, eps: float = DEFAULT_EPS) -> Gmm:
    """Per-component sample weight, mean and (floored) covariance.

    Components left without members take the overall mean and covariance
    with zero weight; EM revives or reinitialises them.
    """
    n, d = x.shape
    overall_cov = floor_covariance(np.cov(x.T, bias=True).reshape(d, d), eps)
    weights = np.zeros(k)
    means = np.tile(x.mean(axis=0), (k, 1))
    covs = np.tile(overall_cov, (k, 1, 1))
    for j in range(k):
        members = x[labels == j]
        if len(members) == 0:
            continue
        weights[j] = len(members) / n
        means[j] = members.mean(axis=0)
        diff = members - means[j]
        covs[j] = floor_covariance(diff.T @ diff / len(members), eps)
    return Gmm(weights, means, covs)


def _m_step(x: np.ndarray, resp: np.ndarray, log_dens_x: np.ndarray, eps: float) -> Gmm:
    n, d = x.shape
    k = resp.shape[1]
    nk = resp.sum(axis=0)
    weights = nk / n
    means = np.empty((k, d))
    covs = np.empty((k, d, d))
    dead = nk <= 1e-10 * n
    for j in range(k):
        if dead[j]:
            continue
        means[j] = resp[:, j] @ x / nk[j]
        diff = x - means[j]
        covs[j] = floor_covariance((resp[:, j, None] * diff).T @ diff / nk[j], eps)
    if np.any(dead):
        # Reseed empty components at the worst-explained samples.
        overall = floor_covariance(np.cov(x.T, bias=True).reshape(d, d), eps)
        order = np.argsort(log_dens_x, kind="stable")
        for slot, j in enumerate(np.flatnonzero(dead)):
            means[j] = x[order[slot % n]]
            covs[j] = overall
            weights[j] = 1.0 / n
        weights = weights / weights.sum()
    return Gmm(weights, means, covs)


def em_iterations(
    x: np.ndarray,
    init: Gmm,
    max_iter: int,
    tol: float,
    eps: float = DEFAULT_EPS,
) -> Gmm:
    """Run EM from ``init``; the returned model records the log-likelihood trace.

    Trace entry 0 is the likelihood of ``init``; entry i follows the i-th
    M-step. Stops once the relative improvement drops below ``tol``;
    ``tol=0`` always runs ``max_iter`` iterations.
    """
    model = init
    comp = component_log_densities(model, x)
    ll_x = _logsumexp(comp)
    trace = [float(ll_x.sum())]
    for _ in range(max_iter):
        resp = np.exp(comp - ll_x[:, None])
        model = _m_step(x, resp, ll_x, eps)
        comp = component_log_densities(model, x)
        ll_x = _logsumexp(comp)
        trace.append(float(ll_x.sum()))
        prev, cur = trace[-2], trace[-1]
        if tol > 0 and (cur - prev) < tol * abs(prev):
            break
    return Gmm(model.weights, model.means, model.covariances, tuple(trace))


def fit_gmm(
    samples,
    n_components: int = 5,
    seed: int = 0,
    max_iter: int = 100,
    tol: float = 1e-6,
    eps: float = DEFAULT_EPS,
) -> Gmm:
    """Fit a K-component GMM: k-means++ seeding, 5 k-means rounds, then EM."""
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    if n_components < 1:
        raise ValueError("need at least one mixture component")
    if len(x) < n_components:
        raise ValueError(f"{len(x)} samples cannot support {n_components} components")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(x, n_components, rng)
    labels = _kmeans(x, centers, KMEANS_ITERS)
    init = from_hard_assignment(x, labels, n_components, eps)
    if np.any(init.weights == 0.0):
        ll_x = _logsumexp(component_log_densities(init, x))
        init = _m_step(x, np.eye(n_components)[labels], ll_x, eps)
    return em_iterations(x, init, max_iter, tol, eps)
