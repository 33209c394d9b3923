"""Source training and the alternating generate / adapt self-training loop."""

from __future__ import annotations

import json
import logging
import math
import os
import shutil
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from mlsl.bench import Dataset, load_labelmap, save_labelmap
from mlsl.grid import IGNORE, argmax_labels
from mlsl.losses import LossConfig, LossValue, bce, seg_ce
from mlsl.metrics import (
    MetricReport,
    PseudoQuality,
    RoundMetrics,
    confusion,
    emit_report,
    miou,
    pseudo_quality,
)
from mlsl.model import ClsHead, Pass, SegNet, TrainingDiverged, add_grads, digest, save_checkpoint, sgd_step
from mlsl.pwl import ClassSizeStats, PwlConfig, class_fraction, generate_pwl, source_image_labels
from mlsl.sisc import SelectionConfig, SiscConfig, single_inference_labels, sisc_labels

log = logging.getLogger(__name__)

MODES = ("si", "sisc", "sisc+pwl", "relfreq")

# independent RNG streams derived from the master seed
_STREAMS = {"init": 0, "patches": 1, "batches": 2, "source": 3}


def rng_stream(seed: int, purpose: str, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _STREAMS[purpose], *keys]))


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 2
    rounds: int = 3
    steps_per_round: int | None = None  # None: one pass over the target set
    source_epochs: int = 10
    source_crop: int | None = None  # train the base model on random square crops
    seed: int = 0
    mode: str = "sisc+pwl"
    features: int = 16
    depth: int = 3
    head_depth: int = 32
    head_hidden: int = 16
    sisc: SiscConfig = field(default_factory=SiscConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    pwl: PwlConfig = field(default_factory=PwlConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1 or self.rounds < 1 or self.source_epochs < 0:
            raise ValueError("batch_size and rounds must be >= 1, source_epochs >= 0")
        if self.steps_per_round is not None and self.steps_per_round < 0:
            raise ValueError("steps_per_round must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.source_crop is not None and self.source_crop < 1:
            raise ValueError("source_crop must be >= 1")

    @property
    def adapt_lambda(self) -> float:
        """Weak-label loss weight during adaptation; only sisc+pwl uses the head."""
        return self.loss.lambda_fcl if self.mode == "sisc+pwl" else 0.0

    def snapshot(self) -> dict:
        return asdict(self)


def init_models(cfg: TrainConfig, num_classes: int) -> tuple[SegNet, ClsHead]:
    rng = rng_stream(cfg.seed, "init")
    net = SegNet.init(num_classes, cfg.features, cfg.depth, rng=rng)
    head = ClsHead.init(net.latent_channels, num_classes, cfg.head_depth, cfg.head_hidden, rng=rng)
    return net, head


# -- one optimisation step ---------------------------------------------------


def _batch_terms(p: Pass, targets, weak, lambda_fcl: float, reduction: str):
    """Seg and cls values plus upstream gradients for every image of a pass.

    ``targets`` holds one label map (or pseudo-label map) per image; IGNORE
    pixels are silent. ``weak`` holds the image-level vectors.
    """
    seg_vals, cls_vals = [], []
    dprobs = np.zeros_like(p._probs)
    dscores = None
    for i, y in enumerate(targets):
        v, g = seg_ce(p._probs[i], y, reduction)
        seg_vals.append(v)
        dprobs[i] = g
    if lambda_fcl > 0:
        dscores = np.zeros_like(p._scores)
        for i, c in enumerate(weak):
            v, g = bce(p._scores[i], c)
            cls_vals.append(v)
            dscores[i] = lambda_fcl * g
    return seg_vals, cls_vals, dprobs, dscores


def _check_finite(value: float, net, head, what: str) -> None:
    if not math.isfinite(value):
        err = TrainingDiverged(f"non-finite {what} loss")
        err.last_good = (net, head)
        raise err


def _apply(net: SegNet, head: ClsHead, seg_grads, head_grads, lr: float) -> tuple[SegNet, ClsHead]:
    try:
        new_net = net.with_params(sgd_step(net.params, seg_grads, lr))
        new_head = head.with_params(sgd_step(head.params, head_grads, lr)) if head_grads else head
    except TrainingDiverged as err:
        err.last_good = (net, head)
        raise
    return new_net, new_head


# -- source training -------------------------------------------------------


def source_loss(net: SegNet, head: ClsHead, source: Dataset, cfg: TrainConfig, chunk: int = 16) -> float:
    """Mean per-image source composite loss over the whole set."""
    lam = cfg.loss.lambda_fcl
    weak = [source_image_labels(y, net.num_classes) for y in source.labels]
    total = 0.0
    for s in range(0, len(source), chunk):
        p = Pass(net, head if lam > 0 else None, source.images[s : s + chunk])
        seg, cls, _, _ = _batch_terms(p, source.labels[s : s + chunk], weak[s : s + chunk], lam, cfg.loss.reduction)
        total += sum(seg) + lam * sum(cls)
    return total / len(source)


def _random_crops(images, labels, size, rng):
    n, h, w = labels.shape
    if size > h or size > w:
        raise ValueError(f"crop {size} larger than images {h}x{w}")
    tops = rng.integers(0, h - size + 1, size=n)
    lefts = rng.integers(0, w - size + 1, size=n)
    xs = np.stack([im[t : t + size, l : l + size] for im, t, l in zip(images, tops, lefts)])
    ys = np.stack([y[t : t + size, l : l + size] for y, t, l in zip(labels, tops, lefts)])
    return xs, ys


def train_source(
    net: SegNet, head: ClsHead, source: Dataset, cfg: TrainConfig, loss_log: Path | None = None
) -> tuple[SegNet, ClsHead, list[float]]:
    """Minimise the source composite loss (pixel CE + lambda * image-level BCE).

    With ``cfg.source_crop`` every image is replaced by a random square crop
    each time it is drawn, and its image-level label is taken from the crop.
    Returns the trained models and the mean loss of each epoch.
    """
    if source.labels is None:
        raise ValueError("source dataset needs ground-truth labels")
    lam = cfg.loss.lambda_fcl
    rng = rng_stream(cfg.seed, "source")
    epoch_means = []
    fh = open(loss_log, "a") if loss_log else None
    try:
        step = 0
        for epoch in range(cfg.source_epochs):
            order = rng.permutation(len(source))
            running = []
            for s in range(0, len(order), cfg.batch_size):
                idx = order[s : s + cfg.batch_size]
                xs, ys = source.images[idx], source.labels[idx]
                if cfg.source_crop is not None:
                    xs, ys = _random_crops(xs, ys, cfg.source_crop, rng)
                weak = [source_image_labels(y, net.num_classes) for y in ys]
                p = Pass(net, head if lam > 0 else None, xs)
                seg, cls, dprobs, dscores = _batch_terms(p, ys, weak, lam, cfg.loss.reduction)
                value = LossValue(sum(seg), 0.0, sum(cls), 0.0, lam)
                _check_finite(value.total, net, head, "source")
                seg_grads, head_grads = p.backward(dprobs, dscores)
                net, head = _apply(net, head, seg_grads, head_grads, cfg.lr)
                running.append(value.total)
                if fh:
                    fh.write(json.dumps({"epoch": epoch, "step": step, **value.as_dict()}) + "\n")
                step += 1
            epoch_means.append(float(np.mean(running)))
            log.info("source epoch %d: loss %.4f", epoch, epoch_means[-1])
    finally:
        if fh:
            fh.close()
    return net, head, epoch_means


# -- step 1: pseudo-label generation -----------------------------------------


def pseudo_labels_for(net: SegNet, image: np.ndarray, cfg: TrainConfig, portion: float, rng) -> np.ndarray:
    if cfg.mode == "si":
        return single_inference_labels(net.predict, image, portion)
    sisc_cfg = cfg.sisc
    if cfg.mode == "relfreq":
        sisc_cfg = replace(sisc_cfg, aggregation="relative-frequency")
    labels, _, _ = sisc_labels(net.predict, image, sisc_cfg, portion, rng)
    return labels


@dataclass
class PseudoStore:
    path: Path
    names: list
    labels: list
    weak: list

    @classmethod
    def load(cls, path: Path | str, names: list, num_classes: int) -> "PseudoStore":
        path = Path(path)
        labels, weak = [], []
        for name in names:
            labels.append(load_labelmap(path / f"{name}.png", num_classes))
            side = json.loads((path / f"{name}.json").read_text())
            weak.append(np.asarray(side["pwl"], dtype=np.int64))
        return cls(path, list(names), labels, weak)


def store_digest(path: Path | str) -> str:
    import hashlib

    h = hashlib.sha256()
    for f in sorted(Path(path).iterdir()):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def generate_round(
    net: SegNet,
    target: Dataset,
    cfg: TrainConfig,
    round_index: int,
    store_dir: Path | str,
    stats: ClassSizeStats,
    threads: int = 1,
) -> PseudoStore:
    """Step 1: with the model frozen, write pseudo-labels and weak labels.

    The store is assembled in a temporary sibling directory and renamed into
    place, so a failure leaves no partial store behind.
    """
    store_dir = Path(store_dir)
    if store_dir.exists():
        raise FileExistsError(f"pseudo-label store {store_dir} already exists")
    store_dir.parent.mkdir(parents=True, exist_ok=True)
    portion = cfg.selection.portion(round_index)
    num_classes = net.num_classes

    def one(i: int):
        rng = rng_stream(cfg.seed, "patches", round_index, i)
        return pseudo_labels_for(net, target.images[i], cfg, portion, rng)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            all_labels = list(pool.map(one, range(len(target))))
    else:
        all_labels = [one(i) for i in range(len(target))]

    tmp = Path(tempfile.mkdtemp(dir=store_dir.parent, prefix=f".{store_dir.name}.tmp"))
    try:
        weak = []
        for name, labels in zip(target.names, all_labels):
            h_t = class_fraction(labels, num_classes)
            c = generate_pwl(h_t, stats, cfg.pwl.eta)
            weak.append(c)
            save_labelmap(labels, tmp / f"{name}.png")
            sidecar = {
                "image": name,
                "round": round_index,
                "portion": portion,
                "per_class_pixels": np.bincount(labels[labels != IGNORE], minlength=num_classes).tolist(),
                "selected_fraction": float(np.mean(labels != IGNORE)),
                "h_t": h_t.tolist(),
                "pwl": c.tolist(),
                "mode": cfg.mode,
                "sisc": asdict(cfg.sisc),
                "selection": asdict(cfg.selection),
                "eta": cfg.pwl.eta,
                "seed": cfg.seed,
            }
            (tmp / f"{name}.json").write_text(json.dumps(sidecar, indent=2))
        os.replace(tmp, store_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return PseudoStore(store_dir, list(target.names), all_labels, weak)


# -- step 2: adaptation ------------------------------------------------------


def adapt_round(
    net: SegNet,
    head: ClsHead,
    source: Dataset,
    target: Dataset,
    store: PseudoStore,
    cfg: TrainConfig,
    round_index: int,
    loss_log: Path | None = None,
) -> tuple[SegNet, ClsHead]:
    """Step 2: SGD on source ground truth plus frozen target pseudo-labels.

    Every step stacks ``batch_size // 2`` source and as many target images
    (at least one each) and minimises the summed composite losses of both
    domains.
    """
    lam = cfg.adapt_lambda
    num_classes = net.num_classes
    per_side = max(1, cfg.batch_size // 2)
    steps = cfg.steps_per_round
    if steps is None:
        steps = math.ceil(len(target) / per_side)
    src_weak = [source_image_labels(y, num_classes) for y in source.labels]
    rng = rng_stream(cfg.seed, "batches", round_index)
    tgt_order = np.concatenate([rng.permutation(len(target)) for _ in range(math.ceil(steps * per_side / len(target)) or 1)])
    src_idx = rng.integers(0, len(source), size=steps * per_side)
    fh = open(loss_log, "a") if loss_log else None
    try:
        for step in range(steps):
            si = src_idx[step * per_side : (step + 1) * per_side]
            ti = tgt_order[step * per_side : (step + 1) * per_side]
            images = np.concatenate([source.images[si], target.images[ti]])
            targets = [source.labels[i] for i in si] + [store.labels[i] for i in ti]
            weak = [src_weak[i] for i in si] + [store.weak[i] for i in ti]
            p = Pass(net, head if lam > 0 else None, images)
            seg, cls, dprobs, dscores = _batch_terms(p, targets, weak, lam, cfg.loss.reduction)
            n = len(si)
            value = LossValue(
                seg_src=sum(seg[:n]),
                seg_tgt=sum(seg[n:]),
                cls_src=sum(cls[:n]),
                cls_tgt=sum(cls[n:]),
                lambda_fcl=lam,
            )
            _check_finite(value.total, net, head, "adaptation")
            seg_grads, head_grads = p.backward(dprobs, dscores)
            net, head = _apply(net, head, seg_grads, head_grads, cfg.lr)
            if fh:
                fh.write(json.dumps({"round": round_index, "step": step, **value.as_dict()}) + "\n")
    finally:
        if fh:
            fh.close()
    return net, head


# -- evaluation & the full loop ---------------------------------------------------


def predict_labels(net: SegNet, images: np.ndarray, chunk: int = 16) -> np.ndarray:
    return np.concatenate([argmax_labels(net.predict(images[s : s + chunk])) for s in range(0, len(images), chunk)])


def evaluate(net: SegNet, data: Dataset, subset=None) -> MetricReport:
    preds = predict_labels(net, data.images)
    cm = confusion(preds, data.labels, net.num_classes)
    return miou(cm, subset)


def score_store(store: PseudoStore, hidden_labels: np.ndarray, num_classes: int) -> PseudoQuality:
    q = None
    for labels, gt in zip(store.labels, hidden_labels):
        part = pseudo_quality(labels, gt, num_classes)
        q = part if q is None else q + part
    return q


def si_quality(net: SegNet, target: Dataset, hidden_labels: np.ndarray, portion: float) -> PseudoQuality:
    q = None
    for img, gt in zip(target.images, hidden_labels):
        part = pseudo_quality(single_inference_labels(net.predict, img, portion), gt, net.num_classes)
        q = part if q is None else q + part
    return q


@dataclass
class RoundState:
    round: int
    checkpoint: Path
    store: Path
    metrics: dict


def run_mlsl(
    cfg: TrainConfig,
    source: Dataset,
    target: Dataset,
    target_val: Dataset,
    run_dir: Path | str,
    net: SegNet,
    head: ClsHead,
    stats: ClassSizeStats | None = None,
    hidden_target_labels: np.ndarray | None = None,
    compare_si: bool = False,
    subset=None,
    threads: int = 1,
    snapshot: dict | None = None,
) -> list[RoundState]:
    """Alternate pseudo-label generation and adaptation for ``cfg.rounds`` rounds.

    ``hidden_target_labels`` (evaluation only) lets each round report
    pseudo-label quality; with ``compare_si`` the single-inference baseline
    at the same portion is scored too. Completed rounds stay on disk if a
    later round fails. ``snapshot`` replaces the config written to the run
    directory (the CLI stores its full run config there).
    """
    run = Path(run_dir)
    for sub in ("checkpoints", "pseudo", "metrics"):
        (run / sub).mkdir(parents=True, exist_ok=True)
    (run / "config.snapshot.json").write_text(json.dumps(snapshot or cfg.snapshot(), indent=2))
    if stats is None:
        from mlsl.pwl import compute_source_stats

        stats = compute_source_stats(source.labels, net.num_classes)
    loss_log = run / "loss_log.jsonl"
    baseline = evaluate(net, target_val, subset)
    states: list[RoundState] = []
    history: list[RoundMetrics] = []
    for r in range(cfg.rounds):
        before = digest(net, head)
        store = generate_round(net, target, cfg, r, run / "pseudo" / f"round_{r}", stats, threads)
        if digest(net, head) != before:
            raise RuntimeError("pseudo-label generation modified the model")
        pq = si = None
        if hidden_target_labels is not None:
            pq = score_store(store, hidden_target_labels, net.num_classes)
            if compare_si:
                si = si_quality(net, target, hidden_target_labels, cfg.selection.portion(r))
        store_before = store_digest(store.path)
        net, head = adapt_round(net, head, source, target, store, cfg, r, loss_log)
        if store_digest(store.path) != store_before:
            raise RuntimeError("adaptation modified the pseudo-label store")
        ckpt = run / "checkpoints" / f"round_{r}.bin"
        save_checkpoint(ckpt, net, head, seed=cfg.seed)
        rm = RoundMetrics(r, evaluate(net, target_val, subset), pq, si, {"portion": cfg.selection.portion(r)})
        history.append(rm)
        emit_report(run, baseline, history)
        states.append(RoundState(r, ckpt, store.path, rm.as_dict()))
        log.info("round %d: target mIoU %.4f", r, rm.report.miou)
    return states
