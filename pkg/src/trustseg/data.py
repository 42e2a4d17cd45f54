"""Synthetic scribble-segmentation scenes and noisy-label classification sets."""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .losses import UNLABELED
from .pixmap import read_pgm, read_ppm, write_pgm, write_ppm

__all__ = [
    "DataError",
    "SegSample",
    "NoisyClsSample",
    "SCRIBBLE_RATIOS",
    "class_palette",
    "gen_scenes",
    "gen_scribbles",
    "with_scribbles",
    "gen_noisy_cls",
    "noisy_cls_arrays",
    "write_dataset",
    "read_dataset",
    "DatasetInfo",
]

SCRIBBLE_RATIOS = (0.0, 0.3, 0.5, 0.8, 1.0)
# full-length scribble of a segment = SCRIBBLE_DENSITY * sqrt(area) pixels
SCRIBBLE_DENSITY = 1.6
MIN_VISIBLE = 30
_EIGHT = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


class DataError(ValueError):
    pass


@dataclass
class SegSample:
    image: np.ndarray  # (H, W, 3) floats on the 1/255 grid
    gt: np.ndarray  # (H, W) int labels
    scribbles: np.ndarray | None = None  # (H, W), UNLABELED where no seed

    @property
    def seed_mask(self) -> np.ndarray:
        if self.scribbles is None:
            return np.zeros(self.gt.shape, dtype=bool)
        return self.scribbles != UNLABELED


@dataclass
class NoisyClsSample:
    features: np.ndarray
    label: int
    observed: int


def class_palette(n_classes: int, spread: float = 0.22) -> np.ndarray:
    """Fixed, well-separated mean colours, class 0 being the background."""
    rng = np.random.default_rng(12345)
    centre = np.full(3, 0.5)
    best = None
    for _ in range(200):
        dirs = rng.normal(size=(n_classes, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        cols = centre + spread * dirs
        d = np.linalg.norm(cols[:, None] - cols[None], axis=-1)
        sep = d[np.triu_indices(n_classes, 1)].min() if n_classes > 1 else 1.0
        if best is None or sep > best[0]:
            best = (sep, cols)
    return np.clip(best[1], 0.0, 1.0)


def _shape_mask(rng, h: int, w: int, min_size: int, max_size: int) -> np.ndarray:
    sh = int(rng.integers(min_size, max_size + 1))
    sw = int(rng.integers(min_size, max_size + 1))
    sh, sw = min(sh, h - 2), min(sw, w - 2)
    y0 = int(rng.integers(1, h - sh))
    x0 = int(rng.integers(1, w - sw))
    mask = np.zeros((h, w), dtype=bool)
    if rng.random() < 0.5:
        mask[y0 : y0 + sh, x0 : x0 + sw] = True
    else:
        yy, xx = np.mgrid[0:h, 0:w]
        cy, cx = y0 + (sh - 1) / 2, x0 + (sw - 1) / 2
        mask = ((yy - cy) / (sh / 2)) ** 2 + ((xx - cx) / (sw / 2)) ** 2 <= 1.0
    return mask


def gen_scenes(
    n: int,
    height: int = 64,
    width: int = 64,
    n_classes: int = 4,
    noise_std: float = 0.1,
    seed: int = 0,
    color_jitter: float = 0.06,
    palette: np.ndarray | None = None,
    max_retries: int = 50,
) -> list[SegSample]:
    """Background plus 1..K-1 rectangles/ellipses, one per foreground class."""
    if n_classes < 2:
        raise DataError("need at least two classes (background + one shape)")
    if n_classes > UNLABELED:
        raise DataError(f"class ids must stay below the unlabeled sentinel {UNLABELED}")
    if height < 8 or width < 8:
        raise DataError("scenes must be at least 8x8")
    rng = np.random.default_rng(seed)
    pal = class_palette(n_classes) if palette is None else np.asarray(palette, dtype=np.float64)
    min_size = max(4, min(height, width) // 6)
    max_size = max(min_size, min(height, width) // 2)
    out = []
    for _ in range(n):
        for _attempt in range(max_retries):
            m = int(rng.integers(1, n_classes))
            classes = rng.choice(np.arange(1, n_classes), size=m, replace=False)
            gt = np.zeros((height, width), dtype=np.int64)
            for c in classes:
                gt[_shape_mask(rng, height, width, min_size, max_size)] = c
            counts = np.bincount(gt.ravel(), minlength=n_classes)
            if all(counts[c] >= MIN_VISIBLE for c in classes) and counts[0] >= MIN_VISIBLE:
                break
        else:
            raise DataError("could not place shapes; image too small for the requested classes")
        means = pal + rng.normal(0.0, color_jitter, size=pal.shape)
        img = means[gt] + rng.normal(0.0, noise_std, size=(height, width, 3)) * (noise_std > 0)
        img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
        out.append(SegSample(img, gt))
    return out


def _random_walk(rng, region: np.ndarray, length: int) -> list[tuple[int, int]]:
    ys, xs = np.nonzero(region)
    k = int(rng.integers(len(ys)))
    y, x = int(ys[k]), int(xs[k])
    h, w = region.shape
    path = [(y, x)]
    seen = {(y, x)}
    direction = _EIGHT[int(rng.integers(8))]
    attempts = 0
    while len(seen) < length and attempts < 20 * length:
        attempts += 1
        ny, nx = y + direction[0], x + direction[1]
        ok = 0 <= ny < h and 0 <= nx < w and region[ny, nx]
        if not ok or rng.random() < 0.15:
            options = [
                d
                for d in _EIGHT
                if 0 <= y + d[0] < h and 0 <= x + d[1] < w and region[y + d[0], x + d[1]]
            ]
            if not options:
                break
            fresh = [d for d in options if (y + d[0], x + d[1]) not in seen]
            pool = fresh or options
            direction = pool[int(rng.integers(len(pool)))]
            ny, nx = y + direction[0], x + direction[1]
        y, x = ny, nx
        if (y, x) not in seen:
            seen.add((y, x))
            path.append((y, x))
    return path


def gen_scribbles(sample: SegSample, ratio: float, seed: int = 0) -> np.ndarray:
    """Random-walk scribble inside each connected segment; ratio scales its length.

    ratio = 0 gives a single click per segment. Labels are copied from the
    ground truth, so seeds are always correct.
    """
    if not 0.0 <= ratio <= 1.0:
        raise DataError("scribble ratio must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    gt = np.asarray(sample.gt)
    seeds = np.full(gt.shape, UNLABELED, dtype=np.int64)
    for c in np.unique(gt):
        if c == UNLABELED:
            continue
        comps, n_comp = ndimage.label(gt == c, structure=np.ones((3, 3)))
        for j in range(1, n_comp + 1):
            seg = comps == j
            area = int(seg.sum())
            region = seg
            for it in (2, 1):
                er = ndimage.binary_erosion(seg, structure=np.ones((3, 3)), iterations=it)
                if er.any():
                    region = er
                    break
            full = SCRIBBLE_DENSITY * np.sqrt(area)
            length = max(1, int(round(ratio * full)))
            for y, x in _random_walk(rng, region, length):
                seeds[y, x] = c
    return seeds


def with_scribbles(samples: list[SegSample], ratio: float, seed: int = 0) -> list[SegSample]:
    """Copies of ``samples`` carrying scribbles at ``ratio``; per-sample seeds derive from ``seed``."""
    return [replace(s, scribbles=gen_scribbles(s, ratio, seed=seed * 100003 + i)) for i, s in enumerate(samples)]


def gen_noisy_cls(
    n: int,
    n_classes: int = 10,
    corruption_rate: float = 0.5,
    seed: int = 0,
    dim: int = 20,
    separation: float = 2.5,
    centers_seed: int = 777,
    modes: int = 1,
) -> list[NoisyClsSample]:
    """Gaussian-blob classes; observed labels flipped to a uniformly random other class."""
    x, y, yo = noisy_cls_arrays(n, n_classes, corruption_rate, seed, dim, separation, centers_seed, modes)
    return [NoisyClsSample(x[i], int(y[i]), int(yo[i])) for i in range(n)]


def noisy_cls_arrays(
    n: int,
    n_classes: int = 10,
    corruption_rate: float = 0.5,
    seed: int = 0,
    dim: int = 20,
    separation: float = 2.5,
    centers_seed: int = 777,
    modes: int = 1,
):
    """Array form of :func:`gen_noisy_cls`: (features, true labels, observed labels).

    Each class is a mixture of ``modes`` unit-variance blobs with equal weight.
    """
    if not 0.0 <= corruption_rate < 1.0:
        raise DataError("corruption rate must lie in [0, 1)")
    if modes < 1:
        raise DataError("modes must be >= 1")
    centers = np.random.default_rng(centers_seed).normal(0.0, separation / np.sqrt(2.0), size=(n_classes, modes, dim))
    rng = np.random.default_rng(seed)
    y = rng.integers(0, n_classes, size=n)
    x = centers[y, 0] + rng.normal(size=(n, dim))
    if modes > 1:
        x += centers[y, rng.integers(0, modes, size=n)] - centers[y, 0]
    flip = rng.random(n) < corruption_rate
    shift = rng.integers(1, n_classes, size=n)
    observed = np.where(flip, (y + shift) % n_classes, y)
    return x, y, observed


# -- on-disk layout ------------------------------------------------------------


@dataclass
class DatasetInfo:
    root: Path
    n_classes: int
    height: int
    width: int
    train: list[str]
    val: list[str]


def _ratio_dir(ratio: float) -> str:
    return f"scribbles_r{int(round(ratio * 100))}"


def write_dataset(
    root: str | os.PathLike,
    train: list[SegSample],
    val: list[SegSample],
    n_classes: int,
    seed: int = 0,
    ratios=SCRIBBLE_RATIOS,
) -> DatasetInfo:
    """Write images/, gt/, scribbles_rR/ and manifest.txt under ``root``."""
    root = Path(root)
    for sub in ["images", "gt", *(_ratio_dir(r) for r in ratios)]:
        (root / sub).mkdir(parents=True, exist_ok=True)
    names_tr, names_va = [], []
    samples = [(s, "train") for s in train] + [(s, "val") for s in val]
    for i, (s, split) in enumerate(samples):
        if np.any(s.gt >= UNLABELED):
            raise DataError(f"ground-truth label collides with the unlabeled sentinel {UNLABELED}")
        name = f"{i:03d}"
        write_ppm(root / "images" / f"{name}.ppm", s.image)
        write_pgm(root / "gt" / f"{name}.pgm", s.gt)
        for r in ratios:
            write_pgm(root / _ratio_dir(r) / f"{name}.pgm", gen_scribbles(s, r, seed=seed * 100003 + i))
        (names_tr if split == "train" else names_va).append(name)
    h, w = train[0].gt.shape if train else val[0].gt.shape
    lines = [
        "# trustseg synthetic scribble dataset",
        f"classes={n_classes}",
        f"height={h}",
        f"width={w}",
        f"seed={seed}",
        "ratios=" + ",".join(str(int(round(r * 100))) for r in ratios),
    ]
    lines += [f"sample {n} train" for n in names_tr] + [f"sample {n} val" for n in names_va]
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")
    return DatasetInfo(root, n_classes, h, w, names_tr, names_va)


def _read_manifest(root: Path) -> DatasetInfo:
    path = root / "manifest.txt"
    if not path.exists():
        raise DataError(f"no manifest.txt under {root}")
    meta, train, val = {}, [], []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("sample "):
            _, name, split = line.split()
            (train if split == "train" else val).append(name)
        elif "=" in line:
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
        else:
            raise DataError(f"bad manifest line: {line!r}")
    try:
        return DatasetInfo(root, int(meta["classes"]), int(meta["height"]), int(meta["width"]), train, val)
    except KeyError as exc:
        raise DataError(f"manifest lacks {exc}") from None


def read_dataset(root: str | os.PathLike, ratio: float | None = 1.0):
    """Load (info, train samples, val samples); train samples carry scribbles at ``ratio``."""
    root = Path(root)
    info = _read_manifest(root)

    def load(name: str, with_seeds: bool) -> SegSample:
        img = read_ppm(root / "images" / f"{name}.ppm").astype(np.float64) / 255.0
        gt = read_pgm(root / "gt" / f"{name}.pgm").astype(np.int64)
        seeds = None
        if with_seeds and ratio is not None:
            p = root / _ratio_dir(ratio) / f"{name}.pgm"
            if not p.exists():
                raise DataError(f"no scribbles for ratio {ratio} ({p})")
            seeds = read_pgm(p).astype(np.int64)
        return SegSample(img, gt, seeds)

    return info, [load(n, True) for n in info.train], [load(n, False) for n in info.val]
