"""Confusion matrices, IoU, pseudo-label quality and report files."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mlsl.grid import IGNORE


def confusion(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """C x C counts, rows = ground truth, cols = prediction; IGNORE gt skipped."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} disagree")
    keep = gt != IGNORE
    idx = gt[keep].astype(np.int64) * num_classes + pred[keep].astype(np.int64)
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


@dataclass
class MetricReport:
    per_class_iou: list  # float per class, None where the union is empty
    miou: float
    subset_miou: float | None = None
    subset: list | None = None

    def as_dict(self) -> dict:
        d = {"miou": self.miou, "per_class_iou": self.per_class_iou}
        if self.subset is not None:
            d["subset"] = self.subset
            d["subset_miou"] = self.subset_miou
        return d


def miou(cm: np.ndarray, subset=None) -> MetricReport:
    """Per-class IoU and their mean over classes with a non-empty union."""
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    iou = [float(tp[c] / union[c]) if union[c] > 0 else None for c in range(len(tp))]

    def mean_over(classes):
        vals = [iou[c] for c in classes if iou[c] is not None]
        return float(np.mean(vals)) if vals else 0.0

    report = MetricReport(iou, mean_over(range(len(tp))))
    if subset is not None:
        report.subset = sorted(int(c) for c in subset)
        report.subset_miou = mean_over(report.subset)
    return report


@dataclass
class PseudoQuality:
    """Pseudo-label counts against hidden ground truth; add to merge images."""

    correct: np.ndarray
    labeled: np.ndarray
    gt_pixels: np.ndarray
    total_pixels: int = 0

    def __add__(self, other: "PseudoQuality") -> "PseudoQuality":
        return PseudoQuality(
            self.correct + other.correct,
            self.labeled + other.labeled,
            self.gt_pixels + other.gt_pixels,
            self.total_pixels + other.total_pixels,
        )

    @property
    def per_class_precision(self) -> list:
        return [float(c / n) if n else None for c, n in zip(self.correct, self.labeled)]

    @property
    def per_class_recall(self) -> list:
        return [float(c / n) if n else None for c, n in zip(self.correct, self.gt_pixels)]

    @property
    def precision(self) -> float | None:
        n = int(self.labeled.sum())
        return float(self.correct.sum() / n) if n else None

    @property
    def mean_precision(self) -> float | None:
        vals = [p for p in self.per_class_precision if p is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def coverage(self) -> float:
        return float(self.labeled.sum() / self.total_pixels) if self.total_pixels else 0.0

    def as_dict(self) -> dict:
        return {
            "per_class_precision": self.per_class_precision,
            "per_class_recall": self.per_class_recall,
            "precision": self.precision,
            "mean_precision": self.mean_precision,
            "coverage": self.coverage,
        }


def pseudo_quality(pseudo: np.ndarray, gt: np.ndarray, num_classes: int) -> PseudoQuality:
    pseudo = np.asarray(pseudo)
    gt = np.asarray(gt)
    if pseudo.shape != gt.shape:
        raise ValueError(f"pseudo-labels {pseudo.shape} and ground truth {gt.shape} disagree")
    lab = pseudo != IGNORE
    hit = lab & (pseudo == gt)
    return PseudoQuality(
        correct=np.bincount(pseudo[hit], minlength=num_classes)[:num_classes],
        labeled=np.bincount(pseudo[lab], minlength=num_classes)[:num_classes],
        gt_pixels=np.bincount(gt[gt != IGNORE], minlength=num_classes)[:num_classes],
        total_pixels=int(pseudo.size),
    )


# -- reports ---------------------------------------------------------------


@dataclass
class RoundMetrics:
    round: int
    report: MetricReport
    pseudo: PseudoQuality | None = None
    si_pseudo: PseudoQuality | None = None
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        d = {"round": self.round, **self.report.as_dict()}
        if self.pseudo is not None:
            d["pseudo"] = self.pseudo.as_dict()
        if self.si_pseudo is not None:
            d["si_pseudo"] = self.si_pseudo.as_dict()
        d.update(self.extra)
        return d


def _fmt(v) -> str:
    return "-" if v is None else f"{100 * v:.2f}"


def comparison_table(baseline: MetricReport, rounds: list[RoundMetrics]) -> str:
    """Plain-text table: source-only row, then one row per adapted round."""
    header = f"{'model':<14}{'mIoU':>8}{'SISC prec':>11}{'SI prec':>9}{'coverage':>10}"
    lines = [header, "-" * len(header)]
    lines.append(f"{'source-only':<14}{_fmt(baseline.miou):>8}{'-':>11}{'-':>9}{'-':>10}")
    for rm in rounds:
        prec = rm.pseudo.mean_precision if rm.pseudo else None
        si = rm.si_pseudo.mean_precision if rm.si_pseudo else None
        cov = rm.pseudo.coverage if rm.pseudo else None
        lines.append(f"{'round ' + str(rm.round):<14}{_fmt(rm.report.miou):>8}{_fmt(prec):>11}{_fmt(si):>9}{_fmt(cov):>10}")
    return "\n".join(lines) + "\n"


def miou_svg(values: list[float], width: int = 360, height: int = 200) -> str:
    """Line chart of mIoU (in points) over rounds; index 0 is the source-only model."""
    pad = 30
    n = len(values)
    lo, hi = min(values), max(values)
    if hi - lo < 1e-9:
        lo, hi = lo - 0.01, hi + 0.01
    xs = [pad + (width - 2 * pad) * (i / max(n - 1, 1)) for i in range(n)]
    ys = [height - pad - (height - 2 * pad) * (v - lo) / (hi - lo) for v in values]
    pts = " ".join(f"{x:.1f},{y:.1f}" for x, y in zip(xs, ys))
    dots = "".join(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="3"/>' for x, y in zip(xs, ys))
    labels = "".join(
        f'<text x="{x:.1f}" y="{height - 8}" font-size="10" text-anchor="middle">{"src" if i == 0 else i - 1}</text>'
        for i, x in enumerate(xs)
    )
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">'
        f'<text x="{pad}" y="16" font-size="12">mIoU per round ({100 * lo:.1f} to {100 * hi:.1f})</text>'
        f'<polyline fill="none" stroke="black" points="{pts}"/>{dots}{labels}</svg>\n'
    )


def emit_report(out_dir: Path | str, baseline: MetricReport, rounds: list[RoundMetrics]) -> dict:
    """Write metrics/round_r.json per round and report/{table.txt,miou.svg,summary.json}."""
    if not rounds:
        raise ValueError("need at least one round to report")
    out = Path(out_dir)
    (out / "metrics").mkdir(parents=True, exist_ok=True)
    (out / "report").mkdir(parents=True, exist_ok=True)
    for rm in rounds:
        (out / "metrics" / f"round_{rm.round}.json").write_text(json.dumps(rm.as_dict(), indent=2))
    summary = {
        "source_only": baseline.as_dict(),
        "rounds": [rm.as_dict() for rm in rounds],
    }
    (out / "report" / "summary.json").write_text(json.dumps(summary, indent=2))
    (out / "report" / "table.txt").write_text(comparison_table(baseline, rounds))
    (out / "report" / "miou.svg").write_text(miou_svg([baseline.miou] + [rm.report.miou for rm in rounds]))
    return summary
