"""Seeded reference benchmark: source-only vs SISC vs SISC+PWL adaptation.

Run with ``mlsl benchmark --out DIR``. Everything below is deterministic for
a fixed config, so the numbers it writes double as regression floors.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import replace
from pathlib import Path

from mlsl.bench import SMALL_A, SMALL_B, DomainShiftSpec, gen_dataset, load_dataset, load_manifest
from mlsl.config import DataConfig, RunConfig, save_config
from mlsl.losses import LossConfig
from mlsl.model import save_checkpoint
from mlsl.pwl import PwlConfig, compute_source_stats
from mlsl.sisc import SiscConfig
from mlsl.trainer import TrainConfig, evaluate, init_models, run_mlsl, train_source

log = logging.getLogger(__name__)


def reference_config() -> RunConfig:
    """Desk-scale settings.

    Images are 64x64, so patches are 32x32 and K=25 keeps roughly the same
    number of patches per pixel as 50 patches of 512x512 on a 1024x2048
    image. Plain SGD on this tiny network needs a far larger step than the
    deep-network default of 1e-4.
    """
    train = TrainConfig(
        lr=0.1,
        batch_size=2,
        rounds=3,
        steps_per_round=None,
        source_epochs=60,
        source_crop=32,
        seed=0,
        mode="sisc",
        sisc=SiscConfig(k=25, patch_h=32, patch_w=32, seed=0),
        pwl=PwlConfig(eta=0.05),
        loss=LossConfig(lambda_fcl=0.025),
    )
    return RunConfig(train=train, data=DataConfig(n_source=200, n_target=200, n_val=50, seed=0))


def synthesize(out: Path, cfg: RunConfig) -> dict[str, Path]:
    """Write the source, source-val, target-train and target-val splits."""
    d = cfg.data
    ident = DomainShiftSpec.identity()
    # distinct seeds per split so no scene is shared
    splits = {
        "source": (ident, d.n_source, d.seed * 4 + 0),
        "target-train": (cfg.shift, d.n_target, d.seed * 4 + 1),
        "target-val": (cfg.shift, d.n_val, d.seed * 4 + 2),
        "source-val": (ident, d.n_val, d.seed * 4 + 3),
    }
    paths = {}
    for name, (shift, n, seed) in splits.items():
        gen_dataset(out / name, cfg.scene, shift, n, seed, domain=name)
        paths[name] = out / name / "manifest.json"
    return paths


def run_benchmark(out_dir: Path | str, cfg: RunConfig | None = None, threads: int = 1) -> dict:
    cfg = cfg or reference_config()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.snapshot.json")
    t0 = time.perf_counter()

    manifests = {k: load_manifest(v) for k, v in synthesize(out / "data", cfg).items()}
    source = load_dataset(manifests["source"])
    source_val = load_dataset(manifests["source-val"])
    target = load_dataset(manifests["target-train"])
    target_val = load_dataset(manifests["target-val"])
    hidden = load_dataset(manifests["target-train"], hidden=True).labels
    num_classes = manifests["source"].num_classes

    tc = cfg.train
    net, head = init_models(tc, num_classes)
    net, head, epoch_losses = train_source(net, head, source, tc, out / "source_loss_log.jsonl")
    save_checkpoint(out / "source.bin", net, head, seed=tc.seed)
    stats = compute_source_stats(source.labels, num_classes)
    stats.save(out / "stats.json", manifests["source"].digest())

    src_only_source = evaluate(net, source_val)
    src_only_target = evaluate(net, target_val)

    runs = {}
    for mode in ("sisc", "sisc+pwl"):
        states = run_mlsl(
            replace(tc, mode=mode), source, target, target_val, out / mode, net, head, stats,
            hidden_target_labels=hidden, compare_si=(mode == "sisc"), threads=threads,
        )
        runs[mode] = [s.metrics for s in states]

    sisc_r0 = runs["sisc"][0]
    results = {
        "source_epoch_losses": epoch_losses,
        "source_only": {
            "source_val_miou": src_only_source.miou,
            "target_val_miou": src_only_target.miou,
            "target_per_class_iou": src_only_target.per_class_iou,
        },
        "domain_gap": src_only_source.miou - src_only_target.miou,
        "sisc_final_miou": runs["sisc"][-1]["miou"],
        "sisc_margin": runs["sisc"][-1]["miou"] - src_only_target.miou,
        "round0_precision": {
            "sisc": sisc_r0["pseudo"]["mean_precision"],
            "si": sisc_r0["si_pseudo"]["mean_precision"],
            "sisc_overall": sisc_r0["pseudo"]["precision"],
            "si_overall": sisc_r0["si_pseudo"]["precision"],
        },
        "small_object_iou": {
            mode: [runs[mode][-1]["per_class_iou"][c] for c in (SMALL_A, SMALL_B)] for mode in runs
        },
        "rounds": runs,
    }
    results["runtime_s"] = time.perf_counter() - t0
    (out / "results.json").write_text(json.dumps(results, indent=2))
    log.info("benchmark finished in %.1fs", results["runtime_s"])
    return results


def format_results(results: dict) -> str:
    pct = lambda v: f"{100 * v:6.2f}"  # noqa: E731
    so = results["source_only"]
    rp = results["round0_precision"]
    lines = [
        f"source-only  source-val mIoU {pct(so['source_val_miou'])}",
        f"source-only  target-val mIoU {pct(so['target_val_miou'])}   (gap {pct(results['domain_gap'])})",
    ]
    for mode, rounds in results["rounds"].items():
        per_round = " ".join(pct(r["miou"]) for r in rounds)
        lines.append(f"{mode:<12} target-val mIoU per round {per_round}")
    lines.append(f"round-0 pseudo-label mean precision  SISC {pct(rp['sisc'])}  SI {pct(rp['si'])}")
    for mode, (a, b) in results["small_object_iou"].items():
        lines.append(f"{mode:<12} small-object IoU  a {pct(a)}  b {pct(b)}")
    lines.append(f"runtime {results['runtime_s']:.1f}s")
    return "\n".join(lines) + "\n"
