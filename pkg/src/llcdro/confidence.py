"""Label confidence from local label consistency in feature space.

Pipeline: cosine kNN graph over penultimate features -> fraction of neighbours
sharing the noisy label -> two-component 1-D Gaussian mixture fitted by EM ->
posterior of the higher-mean component. The classification-loss baseline feeds
normalised losses through the same mixture.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

log = logging.getLogger(__name__)

NORM_EPS = 1e-12
DEGENERATE_GAP = 1e-6


@dataclass(frozen=True)
class GmmConfig:
    max_iter: int = 100
    tol: float = 1e-6
    variance_floor: float = 1e-6


@dataclass
class NeighborGraph:
    neighbors: np.ndarray  # (N, k_eff) int indices, most similar first
    k: int


@dataclass
class Gmm1D:
    means: np.ndarray        # (2,), sorted ascending
    variances: np.ndarray    # (2,)
    weights: np.ndarray      # (2,)
    degenerate: bool = False
    n_iter: int = 0
    log_likelihoods: list[float] = field(default_factory=list)


@dataclass
class ConfidenceState:
    scores: np.ndarray
    gmm: Gmm1D
    w: np.ndarray


SIM_DECIMALS = 12


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("vectors must have the same length")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < NORM_EPS or nb < NORM_EPS:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _unit_rows(features: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(features, axis=1, keepdims=True)
    # zero-norm rows become zero vectors, hence similarity 0 to everything
    return np.where(norms < NORM_EPS, 0.0, features / np.where(norms < NORM_EPS, 1.0, norms))


def knn(features: np.ndarray, k: int, block: int = 1024) -> NeighborGraph:
    """Top-k cosine neighbours per row, self excluded, ties to the smaller index."""
    features = np.asarray(features, dtype=float)
    n = features.shape[0]
    if n < 2:
        raise ValueError("knn needs at least two samples")
    if k < 1:
        raise ValueError("k must be >= 1")
    k_eff = min(k, n - 1)
    u = _unit_rows(features)
    out = np.empty((n, k_eff), dtype=np.int64)
    for start in range(0, n, block):
        stop = min(n, start + block)
        # rounding absorbs last-bit BLAS noise so parallel vectors tie exactly
        sim = np.round(u[start:stop] @ u.T, SIM_DECIMALS)
        rows = np.arange(stop - start)
        sim[rows, np.arange(start, stop)] = -np.inf
        out[start:stop] = _top_k_rows(sim, k_eff)
    return NeighborGraph(out, k)


def _top_k_rows(sim: np.ndarray, k: int) -> np.ndarray:
    """Per-row indices of the k largest values, ties at the cut going to smaller indices.

    Output rows are ordered by decreasing value, then increasing index.
    """
    m, n = sim.shape
    if k == n:
        return np.argsort(-sim, axis=1, kind="stable")
    idx = np.argpartition(-sim, k - 1, axis=1)[:, :k]
    vals = np.take_along_axis(sim, idx, axis=1)
    kth = vals.min(axis=1, keepdims=True)
    # the partition is only ambiguous where more values equal the cut than it kept
    n_at = (sim == kth).sum(axis=1)
    kept_at = (vals == kth).sum(axis=1)
    for r in np.nonzero(n_at > kept_at)[0]:
        row = sim[r]
        above = np.nonzero(row > kth[r, 0])[0]
        at = np.nonzero(row == kth[r, 0])[0][: k - above.size]
        idx[r] = np.concatenate([above, at])
    # index order first, so the stable value sort settles inner ties by index
    idx.sort(axis=1)
    vals = np.take_along_axis(sim, idx, axis=1)
    order = np.argsort(-vals, axis=1, kind="stable")
    return np.take_along_axis(idx, order, axis=1)


def llc_scores(graph: NeighborGraph, noisy_labels: np.ndarray, normalize: bool = True) -> np.ndarray:
    """Count of neighbours whose noisy label matches, divided by the list length if ``normalize``."""
    labels = np.asarray(noisy_labels)
    if graph.neighbors.shape[0] != len(labels):
        raise ValueError("graph and labels cover different sample counts")
    same = (labels[graph.neighbors] == labels[:, None]).sum(axis=1).astype(float)
    if normalize:
        return same / graph.neighbors.shape[1]
    return same


def loss_based_scores(losses: np.ndarray) -> np.ndarray:
    """Min-max normalise and flip so that a smaller loss gives a larger score."""
    losses = np.asarray(losses, dtype=float)
    if not np.isfinite(losses).all() or (losses < 0).any():
        raise ValueError("losses must be finite and nonnegative")
    lo, hi = losses.min(), losses.max()
    if hi - lo <= 0:
        return np.full(losses.shape, 0.5)
    return (hi - losses) / (hi - lo)


def _log_normal(x: np.ndarray, mean: np.ndarray, var: np.ndarray) -> np.ndarray:
    return -0.5 * (np.log(2 * np.pi * var) + (x - mean) ** 2 / var)


def _component_logpdf(gmm_means, gmm_vars, gmm_weights, x):
    x = np.asarray(x, dtype=float)[..., None]
    return np.log(gmm_weights) + _log_normal(x, gmm_means, gmm_vars)


def gmm_log_likelihood(gmm: Gmm1D, x: np.ndarray) -> float:
    lp = _component_logpdf(gmm.means, gmm.variances, gmm.weights, x)
    return float(np.logaddexp(lp[..., 0], lp[..., 1]).sum())


def fit_gmm(scores: np.ndarray, cfg: GmmConfig = GmmConfig()) -> Gmm1D:
    """EM for a two-component 1-D mixture from a quartile start."""
    x = np.asarray(scores, dtype=float).ravel()
    if x.size < 2:
        raise ValueError("fit_gmm needs at least two scores")
    floor = cfg.variance_floor
    means = np.percentile(x, [25.0, 75.0])
    var0 = max(float(x.var()), floor)
    variances = np.array([var0, var0])
    weights = np.array([0.5, 0.5])
    if np.ptp(x) == 0:
        return Gmm1D(means, variances, weights, degenerate=True)

    lls: list[float] = []
    it = 0
    for it in range(1, cfg.max_iter + 1):
        lp = _component_logpdf(means, variances, weights, x)
        norm = np.logaddexp(lp[:, 0], lp[:, 1])
        lls.append(float(norm.sum()))
        if len(lls) > 1 and abs(lls[-1] - lls[-2]) < cfg.tol:
            break
        resp = np.exp(lp - norm[:, None])
        nk = resp.sum(axis=0)
        if (nk <= 0).any():
            break
        weights = nk / x.size
        means = (resp * x[:, None]).sum(axis=0) / nk
        variances = np.maximum((resp * (x[:, None] - means) ** 2).sum(axis=0) / nk, floor)
    else:
        lls.append(gmm_log_likelihood(Gmm1D(means, variances, weights), x))

    order = np.argsort(means, kind="stable")
    means, variances, weights = means[order], variances[order], weights[order]
    degenerate = bool(abs(means[1] - means[0]) < DEGENERATE_GAP or min(weights) <= 0.0)
    return Gmm1D(means, variances, weights, degenerate=degenerate, n_iter=it, log_likelihoods=lls)


def posterior_clean(gmm: Gmm1D, score) -> np.ndarray:
    """Responsibility of the higher-mean component; 1 everywhere for a degenerate fit."""
    s = np.asarray(score, dtype=float)
    if gmm.degenerate:
        return np.ones_like(s)
    lp = _component_logpdf(gmm.means, gmm.variances, gmm.weights, s)
    return np.exp(lp[..., 1] - np.logaddexp(lp[..., 0], lp[..., 1]))


def monotone_posterior(gmm: Gmm1D, scores: np.ndarray) -> np.ndarray:
    """``posterior_clean`` made nondecreasing in the score.

    With unequal variances the raw posterior can turn down in the far tails. It is
    monotone between the two means, so above the low mean we take a running max and
    below it a running min, both anchored at the low mean.
    """
    s = np.asarray(scores, dtype=float)
    if gmm.degenerate:
        return np.ones_like(s)
    anchor = float(gmm.means[0])
    w_anchor = float(posterior_clean(gmm, anchor))
    uniq, inv = np.unique(s, return_inverse=True)
    raw = posterior_clean(gmm, uniq)
    out = raw.copy()
    hi = uniq >= anchor
    if hi.any():
        out[hi] = np.maximum.accumulate(np.maximum(raw[hi], w_anchor))
    lo = ~hi
    if lo.any():
        out[lo] = np.minimum.accumulate(np.minimum(raw[lo], w_anchor)[::-1])[::-1]
    return out[inv].reshape(s.shape)


def confidence_from_scores(scores: np.ndarray, cfg: GmmConfig = GmmConfig()) -> ConfidenceState:
    gmm = fit_gmm(scores, cfg)
    if gmm.degenerate:
        log.debug("degenerate mixture; trusting all given labels")
    return ConfidenceState(np.asarray(scores, float), gmm, monotone_posterior(gmm, scores))


def estimate(features: np.ndarray, noisy_labels: np.ndarray, k: int,
             cfg: GmmConfig = GmmConfig(), normalize: bool = True) -> ConfidenceState:
    """kNN -> LLC -> GMM -> per-sample clean probability."""
    graph = knn(features, k)
    return confidence_from_scores(llc_scores(graph, noisy_labels, normalize=normalize), cfg)


def estimate_from_losses(losses: np.ndarray, cfg: GmmConfig = GmmConfig()) -> ConfidenceState:
    return confidence_from_scores(loss_based_scores(losses), cfg)


def debug_rows(state: ConfidenceState, corrupted: Optional[np.ndarray] = None) -> list[dict]:
    rows = []
    for i, (s, w) in enumerate(zip(state.scores, state.w)):
        row = {"sample_id": i, "llc_score": float(s), "w": float(w)}
        if corrupted is not None:
            row["corrupted"] = int(corrupted[i])
        rows.append(row)
    return rows
