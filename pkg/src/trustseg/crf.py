"""Grid Potts CRF: 8-neighbour affinities, energy and alpha-expansion."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .losses import PROB_FLOOR, UNLABELED
from .maxflow import SINK, FlowGraph

__all__ = [
    "CRFError",
    "GridCRF",
    "grid_pairs",
    "build_affinities",
    "make_crf",
    "potts_energy",
    "pairwise_energy",
    "alpha_expansion",
    "stage_a_unaries",
    "stage_a_init",
    "stage_a_solve",
    "labels_in_seeds",
    "brute_force_minimizer",
]

# (dy, dx) offsets covering each unordered 8-neighbour pair once
_OFFSETS = ((0, 1), (1, 0), (1, 1), (1, -1))
IMPROVE_TOL = 1e-9


class CRFError(ValueError):
    pass


@dataclass
class GridCRF:
    height: int
    width: int
    n_labels: int
    edge_i: np.ndarray
    edge_j: np.ndarray
    weights: np.ndarray
    unary: np.ndarray | None = None
    allowed: tuple[int, ...] | None = None
    seeds: np.ndarray | None = None

    @property
    def n_pixels(self) -> int:
        return self.height * self.width

    def allowed_labels(self) -> tuple[int, ...]:
        return tuple(range(self.n_labels)) if self.allowed is None else self.allowed

    def unary_table(self) -> np.ndarray:
        if self.unary is None:
            return np.zeros((self.n_pixels, self.n_labels))
        return self.unary

    def seed_vector(self) -> np.ndarray:
        if self.seeds is None:
            return np.full(self.n_pixels, UNLABELED, dtype=np.int64)
        return np.asarray(self.seeds).reshape(-1).astype(np.int64)

    def with_terms(self, unary=None, seeds=None, allowed=None) -> "GridCRF":
        """Copy sharing the affinity arrays, with new unaries/seeds/labels."""
        return replace(
            self,
            unary=unary,
            seeds=seeds,
            allowed=None if allowed is None else tuple(sorted(int(a) for a in allowed)),
        )

    def validate(self) -> None:
        n = self.n_pixels
        if self.unary is not None and self.unary.shape != (n, self.n_labels):
            raise CRFError(f"unary table must be ({n}, {self.n_labels})")
        if np.any(self.weights < 0):
            raise CRFError("affinities must be non-negative")
        allowed = self.allowed_labels()
        if not allowed:
            raise CRFError("allowed label set is empty")
        if min(allowed) < 0 or max(allowed) >= self.n_labels:
            raise CRFError("allowed labels out of range")
        seeds = self.seed_vector()
        if seeds.shape != (n,):
            raise CRFError("seed map does not match the CRF size")
        seeded = seeds[seeds != UNLABELED]
        if seeded.size and not np.isin(seeded, allowed).all():
            raise CRFError("seed label outside the allowed label set")


def grid_pairs(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Flat indices (i, j) of every unordered 8-connected pixel pair."""
    idx = np.arange(height * width).reshape(height, width)
    ii, jj = [], []
    for dy, dx in _OFFSETS:
        x0, x1 = max(0, -dx), width - max(0, dx)
        a = idx[0 : height - dy, x0:x1]
        b = idx[dy:height, x0 + dx : x1 + dx]
        ii.append(a.ravel())
        jj.append(b.ravel())
    return np.concatenate(ii), np.concatenate(jj)


def build_affinities(image, sigma_color: float, w_scale: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gaussian colour affinities w_ij = w_scale exp(-|I_i - I_j|^2 / 2 sigma^2)."""
    if sigma_color <= 0:
        raise CRFError("sigma_color must be positive")
    if w_scale < 0:
        raise CRFError("w_scale must be non-negative")
    img = np.asarray(getattr(image, "data", image), dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    h, w = img.shape[:2]
    ei, ej = grid_pairs(h, w)
    flat = img.reshape(h * w, -1)
    d2 = ((flat[ei] - flat[ej]) ** 2).sum(axis=1)
    weights = w_scale * np.exp(-d2 / (2.0 * sigma_color**2))
    return ei, ej, weights


def make_crf(image, n_labels: int, sigma_color: float = 0.15, w_scale: float = 2.0) -> GridCRF:
    img = np.asarray(getattr(image, "data", image))
    ei, ej, w = build_affinities(img, sigma_color, w_scale)
    return GridCRF(img.shape[0], img.shape[1], n_labels, ei, ej, w)


def pairwise_energy(crf: GridCRF, s: np.ndarray) -> float:
    s = np.asarray(s).reshape(-1)
    return float(crf.weights[s[crf.edge_i] != s[crf.edge_j]].sum())


def potts_energy(crf: GridCRF, s: np.ndarray) -> float:
    """Unary plus Potts pairwise energy; +inf if a seed is violated."""
    s = np.asarray(s)
    if s.shape not in ((crf.height, crf.width), (crf.n_pixels,)):
        raise CRFError(f"labeling shape {s.shape} does not match the CRF")
    s = s.reshape(-1).astype(np.int64)
    if s.min() < 0 or s.max() >= crf.n_labels:
        raise CRFError("labels out of range")
    seeds = crf.seed_vector()
    seeded = seeds != UNLABELED
    if np.any(s[seeded] != seeds[seeded]):
        return float("inf")
    e = pairwise_energy(crf, s)
    if crf.unary is not None:
        e += float(crf.unary[np.arange(crf.n_pixels), s].sum())
    return e


def _expansion_move(crf: GridCRF, s: np.ndarray, alpha: int, unary: np.ndarray, seeds: np.ndarray) -> np.ndarray:
    """Best labeling within one alpha-expansion of ``s`` (exact, via min-cut).

    Binary variable x_p: 0 = switch to alpha (source side), 1 = keep s_p.
    """
    n = crf.n_pixels
    e0 = unary[:, alpha].copy()
    e1 = unary[np.arange(n), s]
    si, sj = s[crf.edge_i], s[crf.edge_j]
    w = crf.weights
    # pairwise table: E00 = 0, E01 = w[s_j != a], E10 = w[s_i != a], E11 = w[s_i != s_j]
    b = w * (sj != alpha)
    c = w * (si != alpha)
    d = w * (si != sj)
    delta = e1 - e0
    np.add.at(delta, crf.edge_i, c)
    np.add.at(delta, crf.edge_j, d - c)
    edge_cap = b + c - d  # >= 0 because Potts is a metric

    g = FlowGraph()
    g.add_node(n)
    g.add_tweights(np.arange(n), np.maximum(delta, 0.0), np.maximum(-delta, 0.0))
    keep = edge_cap > 0
    g.add_edges(crf.edge_i[keep], crf.edge_j[keep], edge_cap[keep])
    # seeds whose label is not alpha must keep their label
    locked = np.flatnonzero((seeds != UNLABELED) & (seeds != alpha))
    if locked.size:
        g.add_tweights(locked, 0.0, g.infinite_capacity())
    g.solve()
    sides = g.cut_sides()
    return np.where(sides == SINK, s, alpha)


def alpha_expansion(
    crf: GridCRF,
    init: np.ndarray,
    max_sweeps: int = 5,
    energy_log: list | None = None,
) -> np.ndarray:
    """Minimize the Potts energy by alpha-expansion moves from ``init``.

    Labels are visited in ascending order within a sweep; the sweep loop
    stops early when no move lowers the energy by more than 1e-9.
    """
    crf.validate()
    allowed = crf.allowed_labels()
    shape = np.asarray(init).shape
    s = np.asarray(init).reshape(-1).astype(np.int64).copy()
    if s.shape != (crf.n_pixels,):
        raise CRFError("initial labeling does not match the CRF")
    if not np.isin(s, allowed).all():
        raise CRFError("initial labeling uses labels outside the allowed set")
    seeds = crf.seed_vector()
    unary = crf.unary_table()
    energy = potts_energy(crf, s)
    if not np.isfinite(energy):
        raise CRFError("initial labeling violates the seeds")
    if energy_log is not None:
        energy_log.append(energy)
    for _ in range(max_sweeps):
        improved = False
        for alpha in allowed:
            cand = _expansion_move(crf, s, alpha, unary, seeds)
            e = potts_energy(crf, cand)
            if e < energy - IMPROVE_TOL:
                s, energy = cand, e
                improved = True
            if energy_log is not None:
                energy_log.append(energy)
        if not improved:
            break
    return s.reshape(shape)


def labels_in_seeds(seeds: np.ndarray) -> tuple[int, ...]:
    seeds = np.asarray(seeds)
    return tuple(int(v) for v in np.unique(seeds[seeds != UNLABELED]))


def stage_a_unaries(q: np.ndarray, lam: float) -> np.ndarray:
    """lam * (-log q), with q floored before the log."""
    q = np.asarray(getattr(q, "data", q), dtype=np.float64)
    k = q.shape[-1]
    return lam * -np.log(np.maximum(q.reshape(-1, k), PROB_FLOOR))


def stage_a_init(unary: np.ndarray, seeds: np.ndarray, allowed) -> np.ndarray:
    """Per-pixel unary argmin over ``allowed`` (lowest label on ties), seeds imposed."""
    allowed = np.asarray(sorted(allowed), dtype=np.int64)
    s = allowed[np.argmin(unary[:, allowed], axis=1)]
    sv = np.asarray(seeds).reshape(-1)
    return np.where(sv != UNLABELED, sv, s).astype(np.int64)


def stage_a_solve(
    crf_base: GridCRF,
    q,
    seeds: np.ndarray,
    lam: float,
    init: np.ndarray | None = None,
    max_sweeps: int = 5,
    allowed=None,
    energy_log: list | None = None,
) -> np.ndarray:
    """Hard labeling minimizing lam*KL(s||q) + Potts(s) under hard seeds.

    Labels are restricted to those present in the seeds unless ``allowed``
    is given. Without ``init`` the search starts from the per-pixel unary
    argmin, which for lam > 0 is the argmax of q.
    """
    if lam < 0:
        raise CRFError("lambda must be non-negative")
    qd = np.asarray(getattr(q, "data", q), dtype=np.float64)
    h, w = crf_base.height, crf_base.width
    if qd.shape != (h, w, crf_base.n_labels):
        raise CRFError(f"q has shape {qd.shape}, expected {(h, w, crf_base.n_labels)}")
    seeds = np.asarray(seeds).reshape(h, w)
    if allowed is None:
        allowed = labels_in_seeds(seeds)
    if not allowed:
        raise CRFError("allowed label set is empty")
    unary = stage_a_unaries(qd, lam)
    crf = crf_base.with_terms(unary=unary, seeds=seeds, allowed=allowed)
    crf.validate()
    if init is None:
        init = stage_a_init(unary, seeds, crf.allowed)
    else:
        init = np.asarray(init).reshape(-1).astype(np.int64)
        if not np.isin(init, crf.allowed).all():
            init = np.where(np.isin(init, crf.allowed), init, stage_a_init(unary, seeds, crf.allowed))
        sv = seeds.reshape(-1)
        init = np.where(sv != UNLABELED, sv, init)
    out = alpha_expansion(crf, init, max_sweeps=max_sweeps, energy_log=energy_log)
    return out.reshape(h, w)


def brute_force_minimizer(crf: GridCRF) -> tuple[float, np.ndarray]:
    """Exhaustive minimum of the Potts energy over the allowed labels (tiny CRFs)."""
    n = crf.n_pixels
    allowed = np.asarray(crf.allowed_labels(), dtype=np.int64)
    L = len(allowed)
    if L**n > 2_000_000:
        raise CRFError("instance too large for brute force")
    codes = np.arange(L**n, dtype=np.int64)
    digits = (codes[:, None] // (L ** np.arange(n))) % L
    labs = allowed[digits]
    energy = np.zeros(len(codes))
    if crf.unary is not None:
        energy += crf.unary[np.arange(n)[None, :], labs].sum(axis=1)
    diff = labs[:, crf.edge_i] != labs[:, crf.edge_j]
    energy += diff @ crf.weights
    seeds = crf.seed_vector()
    seeded = np.flatnonzero(seeds != UNLABELED)
    if seeded.size:
        bad = np.any(labs[:, seeded] != seeds[seeded], axis=1)
        energy[bad] = np.inf
    best = int(np.argmin(energy))
    return float(energy[best]), labs[best]
