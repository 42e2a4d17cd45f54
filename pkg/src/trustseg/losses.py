"""Segmentation objectives over soft segmentations q of shape (H, W, K).

All losses are sums over pixels; any per-pixel normalization is the
caller's business. Label maps use :data:`UNLABELED` (255) for pixels that
carry no label.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

__all__ = [
    "UNLABELED",
    "PROB_FLOOR",
    "LossError",
    "NoiseModel",
    "uniform_transition",
    "ce",
    "pce",
    "robust_ce",
    "forward_corrected_ce",
    "mixed_robust_kl",
    "kl_onehot",
    "bilinear_potts_grid",
]

UNLABELED = 255
PROB_FLOOR = 1e-12


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseModel:
    """Uniform label-flip model: keep with prob 1-eps, else any other class."""

    epsilon: float
    n_classes: int

    def __post_init__(self):
        k = self.n_classes
        if k < 2:
            raise LossError("noise model needs at least two classes")
        if not (0.0 <= self.epsilon < (k - 1) / k):
            raise LossError(f"epsilon must lie in [0, {(k - 1) / k:.4g}), got {self.epsilon}")

    @property
    def a(self) -> float:
        return self.epsilon / (self.n_classes - 1)

    @property
    def b(self) -> float:
        return 1.0 - self.n_classes * self.a

    def transition(self) -> np.ndarray:
        return uniform_transition(self.epsilon, self.n_classes)


def uniform_transition(epsilon: float, k: int) -> np.ndarray:
    """T[l, k] = P(observed k | true l) for the uniform flip model."""
    off = epsilon / (k - 1)
    return np.full((k, k), off) + np.eye(k) * (1.0 - epsilon - off)


def _check_map(q: Tensor, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != q.shape[:-1]:
        raise LossError(f"label map {labels.shape} does not match q {q.shape[:-1]}")
    return labels


def _seed_mask(seeds: np.ndarray) -> np.ndarray:
    return np.asarray(seeds) != UNLABELED


def ce(q: Tensor, labels: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """-sum log q_i[y_i] over all pixels (or those in ``mask``)."""
    labels = _check_map(q, labels)
    return dc.neg(dc.tsum(dc.pick(dc.log_prob(q, PROB_FLOOR), labels, mask)))


def pce(q: Tensor, seeds: np.ndarray) -> Tensor:
    """Partial cross-entropy over the labeled (seed) pixels only."""
    seeds = _check_map(q, seeds)
    mask = _seed_mask(seeds)
    if not mask.any():
        raise LossError("partial cross-entropy needs at least one seed pixel")
    return ce(q, seeds, mask)


def _robust_terms(q: Tensor, labels: np.ndarray, noise: NoiseModel, mask) -> Tensor:
    if noise.epsilon == 0.0:
        return dc.neg(dc.tsum(dc.pick(dc.log_prob(q, PROB_FLOOR), labels, mask)))
    picked = dc.pick(q, labels, mask)
    return dc.neg(dc.tsum(dc.log(dc.add(dc.scale(picked, noise.b), noise.a))))


def robust_ce(q: Tensor, labels: np.ndarray, noise: NoiseModel) -> Tensor:
    """sum_i -log(a + b q_i[y_i]); bounded by -log a per pixel when eps > 0."""
    labels = _check_map(q, labels)
    if noise.n_classes != q.shape[-1]:
        raise LossError("noise model class count does not match q")
    return _robust_terms(q, labels, noise, None)


def forward_corrected_ce(q: Tensor, labels: np.ndarray, transition: np.ndarray) -> Tensor:
    """Cross-entropy of the noise-corrected prediction T^T q_i."""
    labels = _check_map(q, labels)
    T = np.asarray(transition, dtype=np.float64)
    k = q.shape[-1]
    if T.shape != (k, k):
        raise LossError(f"transition matrix must be {k}x{k}")
    if np.any(T < 0) or not np.allclose(T.sum(axis=1), 1.0, atol=1e-12):
        raise LossError("transition matrix rows must be distributions")
    flat = dc.reshape(q, (-1, k))
    corrected = dc.matmul(flat, T)
    picked = dc.pick(corrected, labels.reshape(-1))
    if np.any(picked.data <= 0):
        raise LossError("corrected probability of an observed label is zero")
    return dc.neg(dc.tsum(dc.log(picked)))


def mixed_robust_kl(q: Tensor, labels: np.ndarray, seeds: np.ndarray, noise: NoiseModel) -> Tensor:
    """Robust term on non-seed pixels plus plain cross-entropy on seeds.

    ``labels`` must label every pixel; on seed pixels the seed label is used.
    """
    labels = _check_map(q, labels)
    seeds = _check_map(q, seeds)
    if np.any(labels == UNLABELED):
        raise LossError("labels must cover every pixel")
    smask = _seed_mask(seeds)
    target = np.where(smask, seeds, labels)
    parts = []
    if smask.any():
        parts.append(ce(q, target, smask))
    if (~smask).any():
        parts.append(_robust_terms(q, target, noise, ~smask))
    total = parts[0]
    for p in parts[1:]:
        total = dc.add(total, p)
    return total


def kl_onehot(p: np.ndarray, q) -> float:
    """KL(p || q) for a hard labeling p: -sum_i log q_i[p_i] (q floored)."""
    qd = q.data if isinstance(q, Tensor) else np.asarray(q, dtype=np.float64)
    p = np.asarray(p)
    if p.shape != qd.shape[:-1]:
        raise LossError("labeling does not match q")
    picked = np.take_along_axis(qd, p[..., None].astype(np.int64), axis=-1)[..., 0]
    return float(-np.log(np.maximum(picked, PROB_FLOOR)).sum())


def bilinear_potts_grid(q: Tensor, crf) -> Tensor:
    """sum_k (1 - q^k)^T W q^k over the sparse neighbourhood of ``crf``.

    Each unordered neighbour pair enters W once, so on one-hot inputs the
    value is exactly the Potts pairwise energy sum w_ij [s_i != s_j].
    """
    h, w, k = q.shape
    if (h, w) != (crf.height, crf.width):
        raise LossError(f"q is {h}x{w} but the CRF is {crf.height}x{crf.width}")
    if len(crf.weights) == 0:
        return dc.scale(dc.tsum(q), 0.0)
    flat = dc.reshape(q, (h * w, k))
    qi = dc.take_rows(flat, crf.edge_i)
    qj = dc.take_rows(flat, crf.edge_j)
    agree = dc.tsum(dc.mul(qi, qj), axis=1)
    # sum_ij w_ij (1 - <q_i, q_j>)
    return dc.sub(float(crf.weights.sum()), dc.tsum(dc.mul(agree, crf.weights)))
