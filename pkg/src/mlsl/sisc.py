"""Patch-aggregated pseudo-labels with class-balanced selection.

Each target image is cut into overlapping sub-images, every sub-image is
segmented on its own, and the per-patch softmax outputs are summed back into
a full-size accumulator together with per-pixel coverage counts. Dividing by
the counts gives a probability map whose confident pixels are consistent
across spatial contexts; the most confident fraction of each predicted class
becomes the pseudo-label map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from mlsl.grid import IGNORE, AccumVolume, GeometryError, Rect, argmax_labels, crop

Predictor = Callable[[np.ndarray], np.ndarray]

COVERAGE_MODES = ("grid-plus-random", "random-only")
AGGREGATIONS = ("probability-sum", "relative-frequency")


@dataclass(frozen=True)
class SiscConfig:
    k: int = 50
    patch_h: int = 512
    patch_w: int = 512
    seed: int = 0
    coverage_mode: str = "grid-plus-random"
    aggregation: str = "probability-sum"

    def __post_init__(self):
        if self.k < 0 or (self.k == 0 and self.coverage_mode == "random-only"):
            raise ValueError(f"patch count k={self.k} leaves nothing to sample")
        if self.patch_h < 1 or self.patch_w < 1:
            raise ValueError("patch dims must be >= 1")
        if self.coverage_mode not in COVERAGE_MODES:
            raise ValueError(f"coverage_mode must be one of {COVERAGE_MODES}")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")


@dataclass(frozen=True)
class SelectionConfig:
    """Per-round portion schedule: ``min(start + round * step, cap)``."""

    start: float = 0.2
    step: float = 0.05
    cap: float = 0.5

    def __post_init__(self):
        if not (0.0 <= self.start <= self.cap <= 1.0):
            raise ValueError("need 0 <= start <= cap <= 1")
        if self.step < 0:
            raise ValueError("step must be >= 0")

    def portion(self, round_index: int) -> float:
        return min(self.start + round_index * self.step, self.cap)


def grid_tiling(height: int, width: int, patch_h: int, patch_w: int) -> list[Rect]:
    """Fewest patch-sized rects covering every pixel; the last row/column is
    pulled back inside the image, so it overlaps its neighbour."""
    if patch_h > height or patch_w > width:
        raise GeometryError(f"patch {patch_h}x{patch_w} larger than image {height}x{width}")
    tops = [min(i * patch_h, height - patch_h) for i in range(math.ceil(height / patch_h))]
    lefts = [min(j * patch_w, width - patch_w) for j in range(math.ceil(width / patch_w))]
    return [Rect(t, l, patch_h, patch_w) for t in tops for l in lefts]


def sample_patches(height: int, width: int, cfg: SiscConfig, rng=None) -> list[Rect]:
    """Patch placements for one image.

    ``rng`` defaults to a generator seeded from ``cfg.seed``.
    """
    if cfg.patch_h > height or cfg.patch_w > width:
        raise GeometryError(f"patch {cfg.patch_h}x{cfg.patch_w} larger than image {height}x{width}")
    rng = np.random.default_rng(cfg.seed if rng is None else rng)
    rects = []
    if cfg.coverage_mode == "grid-plus-random":
        rects = grid_tiling(height, width, cfg.patch_h, cfg.patch_w)
    tops = rng.integers(0, height - cfg.patch_h + 1, size=cfg.k)
    lefts = rng.integers(0, width - cfg.patch_w + 1, size=cfg.k)
    rects += [Rect(int(t), int(l), cfg.patch_h, cfg.patch_w) for t, l in zip(tops, lefts)]
    return rects


def aggregate(
    predict: Predictor,
    image: np.ndarray,
    patches: list[Rect],
    aggregation: str = "probability-sum",
    num_classes: int | None = None,
) -> AccumVolume:
    """Segment each patch independently and accumulate into a full-size volume.

    ``predict`` maps an (N, h, w, 3) batch to (N, h, w, C) probabilities.
    Same-sized patches are predicted as one batch. In relative-frequency mode
    each patch votes 1 for its argmax class instead of adding probabilities.
    """
    if aggregation not in AGGREGATIONS:
        raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
    height, width = image.shape[:2]
    acc = None
    if num_classes is not None:
        acc = AccumVolume.empty(height, width, num_classes)
    by_size: dict[tuple[int, int], list[int]] = {}
    for i, r in enumerate(patches):
        by_size.setdefault((r.h, r.w), []).append(i)
    outputs: list[np.ndarray | None] = [None] * len(patches)
    for idxs in by_size.values():
        batch = np.stack([crop(image, patches[i]) for i in idxs])
        probs = predict(batch)
        for i, p in zip(idxs, probs):
            outputs[i] = p
    for r, p in zip(patches, outputs):
        if acc is None:
            acc = AccumVolume.empty(height, width, p.shape[-1])
        if aggregation == "relative-frequency":
            votes = np.zeros_like(p)
            np.put_along_axis(votes, argmax_labels(p)[..., None], 1.0, axis=-1)
            p = votes
        acc.add(r, p)
    if acc is None:
        raise ValueError("no patches and no num_classes: cannot size the accumulator")
    return acc


def normalize(acc: AccumVolume) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel mean over covering patches, plus the coverage mask.

    Uncovered pixels come back all-zero with ``covered == False``.
    """
    covered = acc.counts > 0
    probs = np.zeros_like(acc.sums)
    probs[covered] = acc.sums[covered] / acc.counts[covered][:, None]
    return probs, covered


def select_class_balanced(probs: np.ndarray, covered: np.ndarray | None, portion: float) -> np.ndarray:
    """Keep the most confident ``portion`` of each predicted class.

    For every class, the covered pixels whose argmax is that class are ranked
    by confidence (their max probability). The cut is the nearest-rank
    confidence at position ``ceil(portion * n)``; every pixel at or above it
    is labeled, so ties at the cut are all kept. Everything else is IGNORE.
    """
    if not 0.0 <= portion <= 1.0:
        raise ValueError(f"portion must be in [0, 1], got {portion}")
    if covered is None:
        covered = np.ones(probs.shape[:-1], dtype=bool)
    pred = argmax_labels(probs)
    conf = probs.max(axis=-1)
    out = np.full(pred.shape, IGNORE, dtype=np.int64)
    for c in range(probs.shape[-1]):
        members = covered & (pred == c)
        n = int(members.sum())
        # guard against p*n landing a hair above an integer
        keep = math.ceil(portion * n - 1e-9)
        if keep <= 0:
            continue
        ranked = np.sort(conf[members])[::-1]
        cut = ranked[keep - 1]
        out[members & (conf >= cut)] = c
    return out


def sisc_labels(
    predict: Predictor, image: np.ndarray, cfg: SiscConfig, portion: float, rng=None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sample patches, aggregate, normalize and select.

    Returns ``(pseudo_labels, probs, covered)``.
    """
    patches = sample_patches(image.shape[0], image.shape[1], cfg, rng)
    probs, covered = normalize(aggregate(predict, image, patches, cfg.aggregation))
    return select_class_balanced(probs, covered, portion), probs, covered


def single_inference_labels(predict: Predictor, image: np.ndarray, portion: float) -> np.ndarray:
    """Baseline: one whole-image forward pass, then the same selection."""
    probs = predict(image[None])[0]
    return select_class_balanced(probs, None, portion)
