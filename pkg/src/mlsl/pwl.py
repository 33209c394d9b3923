"""Image-level weak labels from class-size statistics.

Source ground truth gives a mean relative size per class (averaged only over
images where the class occurs). A target image gets weak label 1 for class i
when its pseudo-labeled fraction of class i beats ``eta`` times that mean.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from mlsl.grid import IGNORE, check_labels


@dataclass(frozen=True)
class PwlConfig:
    eta: float = 0.05

    def __post_init__(self):
        if not np.isfinite(self.eta) or self.eta < 0:
            raise ValueError(f"eta must be finite and >= 0, got {self.eta}")


@dataclass(frozen=True)
class ClassSizeStats:
    m: np.ndarray
    presence_counts: np.ndarray
    n_images: int

    @property
    def num_classes(self) -> int:
        return len(self.m)

    def to_json(self, source_manifest_hash: str | None = None) -> dict:
        return {
            "C": self.num_classes,
            "N": self.n_images,
            "m": [float(v) for v in self.m],
            "presence_counts": [int(v) for v in self.presence_counts],
            "source_manifest_hash": source_manifest_hash,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ClassSizeStats":
        m = np.asarray(doc["m"], dtype=np.float64)
        counts = np.asarray(doc["presence_counts"], dtype=np.int64)
        if len(m) != doc["C"] or len(counts) != doc["C"]:
            raise ValueError("stats vectors do not match C")
        return cls(m, counts, int(doc["N"]))

    def save(self, path: Path | str, source_manifest_hash: str | None = None) -> None:
        Path(path).write_text(json.dumps(self.to_json(source_manifest_hash), indent=2))

    @classmethod
    def load(cls, path: Path | str) -> "ClassSizeStats":
        return cls.from_json(json.loads(Path(path).read_text()))


def _class_counts(labels: np.ndarray, num_classes: int) -> np.ndarray:
    valid = labels[labels != IGNORE]
    return np.bincount(valid.ravel(), minlength=num_classes)[:num_classes]


def compute_source_stats(labelmaps, num_classes: int) -> ClassSizeStats:
    """Mean relative class size over the images containing each class.

    Each image contributes its own pixel fraction, so mixed image sizes are
    fine. Fractions are summed exactly as rationals, which makes the result
    the correctly rounded value of the fixed-size formula too.
    """
    totals = [Fraction(0)] * num_classes
    presence = np.zeros(num_classes, dtype=np.int64)
    n = 0
    for labels in labelmaps:
        labels = np.asarray(labels)
        check_labels(labels, num_classes)
        area = labels.shape[0] * labels.shape[1]
        counts = _class_counts(labels, num_classes)
        for i in np.nonzero(counts)[0]:
            totals[i] += Fraction(int(counts[i]), area)
            presence[i] += 1
        n += 1
    m = np.array(
        [float(totals[i] / int(presence[i])) if presence[i] else 0.0 for i in range(num_classes)]
    )
    return ClassSizeStats(m, presence, n)


def class_fraction(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Fraction of all pixels (IGNORE included in the denominator) per class."""
    labels = np.asarray(labels)
    return _class_counts(labels, num_classes) / labels.size


def generate_pwl(h_t: np.ndarray, stats: ClassSizeStats | np.ndarray, eta: float) -> np.ndarray:
    """Weak label ``c_i = 1`` iff ``h_t[i] > eta * m[i]`` (strict)."""
    m = stats.m if isinstance(stats, ClassSizeStats) else np.asarray(stats, dtype=np.float64)
    h_t = np.asarray(h_t, dtype=np.float64)
    if h_t.shape != m.shape:
        raise ValueError(f"h_t {h_t.shape} and class sizes {m.shape} disagree")
    return (h_t > eta * m).astype(np.int64)


def source_image_labels(gt: np.ndarray, num_classes: int) -> np.ndarray:
    """Presence indicator of each class in a ground-truth map."""
    return (_class_counts(np.asarray(gt), num_classes) > 0).astype(np.int64)
