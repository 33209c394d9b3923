"""``mlsl`` command line: synth, train-source, adapt, predict, eval, sweep, benchmark.

Exit codes: 0 ok, 1 I/O failure, 2 usage or validation error, 3 training
diverged (the last finite checkpoint is kept).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from mlsl.bench import (
    CLASS_NAMES,
    ManifestError,
    hidden_label_paths,
    load_dataset,
    load_labelmap,
    load_manifest,
    save_labelmap,
)
from mlsl.benchmark import format_results, reference_config, run_benchmark, synthesize
from mlsl.config import ConfigError, RunConfig, load_config, override, save_config
from mlsl.grid import GeometryError, InvalidLabelError
from mlsl.metrics import confusion, miou
from mlsl.model import ClsHead, TrainingDiverged, load_checkpoint, save_checkpoint
from mlsl.pwl import compute_source_stats
from mlsl.trainer import MODES, init_models, predict_labels, rng_stream, run_mlsl, train_source

log = logging.getLogger("mlsl")

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3
SWEEP_PARAMS = ("lambda", "eta", "k", "patch")


class UsageError(ValueError):
    pass


# -- argument helpers --------------------------------------------------------


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def parse_patch(text: str) -> tuple[int, int]:
    """``512`` or ``256x512`` (height x width)."""
    try:
        parts = [int(p) for p in str(text).lower().split("x")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad patch size {text!r}") from None
    if len(parts) == 1:
        parts *= 2
    if len(parts) != 2 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"bad patch size {text!r}")
    return parts[0], parts[1]


def parse_schedule(text: str) -> tuple[float, float, float]:
    try:
        start, step, cap = (float(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("portion schedule must be start,step,cap") from None
    return start, step, cap


def parse_subset(text: str | None) -> list[int] | None:
    """Comma-separated class indices or names."""
    if not text:
        return None
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if tok in CLASS_NAMES:
            out.append(CLASS_NAMES.index(tok))
        else:
            try:
                out.append(int(tok))
            except ValueError:
                raise UsageError(f"unknown class {tok!r} in --subset") from None
    return out


def resolve_threads(flag: int | None, cfg: RunConfig) -> int:
    if flag is not None:
        return flag
    env = os.environ.get("MLSL_THREADS")
    if env:
        try:
            return _positive_int(env)
        except (ValueError, argparse.ArgumentTypeError):
            raise UsageError(f"MLSL_THREADS must be a positive integer, got {env!r}") from None
    return cfg.threads


def resolve_manifest(path: str | None, root: str | None, domain: str) -> Path:
    """A manifest file, a directory holding one, or ``<root>/<domain>``."""
    if path is None:
        if root is None:
            raise UsageError(f"no {domain} data given")
        path = str(Path(root) / domain)
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    if not p.is_file():
        raise UsageError(f"manifest not found: {p}")
    return p.resolve()


# -- config assembly ---------------------------------------------------------


def _base_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        s = args.seed
        cfg = dataclasses.replace(
            cfg,
            train=dataclasses.replace(cfg.train, seed=s, sisc=dataclasses.replace(cfg.train.sisc, seed=s)),
            data=dataclasses.replace(cfg.data, seed=s),
        )
    return cfg


def _apply_train_flags(cfg: RunConfig, args) -> RunConfig:
    t = cfg.train
    t = override(
        t,
        lr=getattr(args, "lr", None),
        batch_size=getattr(args, "batch_size", None),
        source_epochs=getattr(args, "epochs", None),
        source_crop=getattr(args, "crop", None),
        rounds=getattr(args, "rounds", None),
        steps_per_round=getattr(args, "steps", None),
        mode=getattr(args, "mode", None),
    )
    patch = getattr(args, "patch", None)
    t = dataclasses.replace(
        t,
        sisc=override(
            t.sisc,
            k=getattr(args, "k", None),
            patch_h=patch[0] if patch else None,
            patch_w=patch[1] if patch else None,
        ),
        pwl=override(t.pwl, eta=getattr(args, "eta", None)),
        loss=override(t.loss, lambda_fcl=getattr(args, "lambda_fcl", None)),
    )
    sched = getattr(args, "portion_schedule", None)
    if sched:
        t = dataclasses.replace(t, selection=type(t.selection)(*sched))
    return dataclasses.replace(cfg, train=t)


# -- commands ----------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _base_config(args)
    cfg = dataclasses.replace(
        cfg,
        data=override(cfg.data, n_source=args.n_source, n_target=args.n_target, n_val=args.n_val),
    )
    for name in ("n_source", "n_target", "n_val"):
        if getattr(cfg.data, name) < 1:
            raise UsageError(f"--{name.replace('_', '-')} must be >= 1")
    out = Path(args.out)
    paths = synthesize(out, cfg)
    cfg = dataclasses.replace(cfg, paths=override(cfg.paths, data=str(out.resolve())))
    save_config(cfg, out / "config.snapshot.json")
    for name, p in paths.items():
        print(f"{name}: {p}")
    return EXIT_OK


def cmd_train_source(args) -> int:
    cfg = _apply_train_flags(_base_config(args), args)
    manifest_path = resolve_manifest(args.data or cfg.paths.source, cfg.paths.data, "source")
    manifest = load_manifest(manifest_path)
    if not manifest.has_labels:
        raise UsageError(f"{manifest_path}: source training needs labelled data")
    source = load_dataset(manifest)
    out = Path(args.out)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    cfg = dataclasses.replace(cfg, paths=override(cfg.paths, source=str(manifest_path), out=str(out.resolve())))
    save_config(cfg, out / "config.snapshot.json")

    tc = cfg.train
    net, head = init_models(tc, manifest.num_classes)
    ckpt = out / "checkpoints" / "source.bin"
    try:
        net, head, losses = train_source(net, head, source, tc, out / "loss_log.jsonl")
    except TrainingDiverged as err:
        last_net, last_head = err.last_good
        save_checkpoint(out / "checkpoints" / "last_finite.bin", last_net, last_head, seed=tc.seed)
        raise
    save_checkpoint(ckpt, net, head, seed=tc.seed)
    stats = compute_source_stats(source.labels, manifest.num_classes)
    stats.save(out / "stats.json", manifest.digest())
    if losses:
        print(f"epochs {len(losses)}: loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def _adapt_inputs(args, cfg: RunConfig):
    p = cfg.paths
    root = p.data
    src = resolve_manifest(args.source_data or p.source, root, "source")
    tgt = resolve_manifest(args.target_data or p.target, root, "target-train")
    val_flag = args.val_data or p.val
    if val_flag is None and root is None:
        # a synth layout keeps target-val next to target-train
        sibling = tgt.parent.parent / "target-val"
        val_flag = str(sibling) if sibling.is_dir() else None
    val = resolve_manifest(val_flag, root, "target-val")
    ckpt = args.ckpt or p.ckpt
    if ckpt is None:
        raise UsageError("--ckpt is required")
    ckpt = Path(ckpt)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    paths = dataclasses.replace(p, source=str(src), target=str(tgt), val=str(val), ckpt=str(ckpt.resolve()))
    return dataclasses.replace(cfg, paths=paths)


def run_adapt(cfg: RunConfig, out: Path, score_pseudo: bool, subset, threads: int) -> list:
    p = cfg.paths
    source_m, target_m, val_m = (load_manifest(x) for x in (p.source, p.target, p.val))
    if target_m.domain != "target-train":
        raise UsageError(f"{p.target}: expected a target-train manifest, got {target_m.domain}")
    if not source_m.has_labels or not val_m.has_labels:
        raise UsageError("source and validation manifests need labels")
    net, head, header = load_checkpoint(p.ckpt)
    if net.num_classes != source_m.num_classes:
        raise UsageError(f"checkpoint has {net.num_classes} classes, data has {source_m.num_classes}")
    tc = dataclasses.replace(cfg.train, features=net.features, depth=net.depth)
    if head is None:
        head = ClsHead.init(net.latent_channels, net.num_classes, tc.head_depth, tc.head_hidden, rng=rng_stream(tc.seed, "init"))
    source, target, val = load_dataset(source_m), load_dataset(target_m), load_dataset(val_m)
    hidden = None
    if score_pseudo:
        if not all(x.is_file() for x in hidden_label_paths(target_m)):
            raise UsageError("--score-pseudo needs the evaluation labels next to the target manifest")
        hidden = load_dataset(target_m, hidden=True).labels
    stats = compute_source_stats(source.labels, net.num_classes)
    out.mkdir(parents=True, exist_ok=True)
    snap = dataclasses.replace(cfg, train=tc, paths=dataclasses.replace(p, out=str(out.resolve())))
    try:
        states = run_mlsl(
            tc, source, target, val, out, net, head, stats,
            hidden_target_labels=hidden, compare_si=score_pseudo, subset=subset, threads=threads,
            snapshot=snap.to_json(),
        )
    except TrainingDiverged as err:
        last_net, last_head = err.last_good
        save_checkpoint(out / "checkpoints" / "last_finite.bin", last_net, last_head, seed=tc.seed)
        raise
    return states


def cmd_adapt(args) -> int:
    cfg = _adapt_inputs(args, _apply_train_flags(_base_config(args), args))
    states = run_adapt(cfg, Path(args.out), args.score_pseudo, parse_subset(args.subset), resolve_threads(args.threads, cfg))
    for s in states:
        print(f"round {s.round}: target-val mIoU {100 * s.metrics['miou']:.2f}")
    print(f"report: {Path(args.out) / 'report' / 'table.txt'}")
    return EXIT_OK


def cmd_predict(args) -> int:
    net, _, _ = load_checkpoint(args.ckpt)
    manifest = load_manifest(resolve_manifest(args.data, None, "target-val"))
    data = load_dataset(manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    preds = predict_labels(net, data.images)
    for name, pred in zip(data.names, preds):
        save_labelmap(pred, out / f"{name}.png")
    print(f"{len(preds)} predictions written to {out}")
    return EXIT_OK


def evaluate_dir(pred_dir: Path, manifest_path: Path, subset=None) -> dict:
    manifest = load_manifest(manifest_path)
    if manifest.has_labels:
        gt_paths = manifest.label_paths()
    else:
        gt_paths = hidden_label_paths(manifest)
    names = [Path(e["image"]).stem for e in manifest.entries]
    missing = [n for n in names if not (pred_dir / f"{n}.png").is_file()]
    if missing:
        raise UsageError(f"{pred_dir}: missing predictions for {', '.join(missing)}")
    C = manifest.num_classes
    cm = np.zeros((C, C), dtype=np.int64)
    for name, gp in zip(names, gt_paths):
        pred = load_labelmap(pred_dir / f"{name}.png", C)
        cm += confusion(pred, load_labelmap(gp, C), C)
    return miou(cm, subset).as_dict()


def cmd_eval(args) -> int:
    report = evaluate_dir(Path(args.pred_dir), resolve_manifest(args.gt_manifest, None, "target-val"), parse_subset(args.subset))
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def _sweep_value(param: str, text: str):
    if param in ("lambda", "eta"):
        v = float(text)
        if v < 0:
            raise UsageError(f"{param} must be >= 0")
        return v
    if param == "k":
        return _nonneg_int(text)
    return parse_patch(text)


def sweep_table(param: str, rows: list[tuple[str, dict]]) -> str:
    header = f"{param:>10} | {'source-only':>11} | {'final mIoU':>10} | per-round mIoU"
    lines = [header, "-" * len(header)]
    for label, res in rows:
        rounds = " ".join(f"{100 * m:.2f}" for m in res["rounds"])
        lines.append(f"{label:>10} | {100 * res['source_only']:11.2f} | {100 * res['rounds'][-1]:10.2f} | {rounds}")
    return "\n".join(lines) + "\n"


def cmd_sweep(args) -> int:
    base = _adapt_inputs(args, _apply_train_flags(_base_config(args), args))
    threads = resolve_threads(args.threads, base)
    subset = parse_subset(args.subset)
    out = Path(args.out)
    values = [(text, _sweep_value(args.param, text)) for text in args.values]
    if len({t for t, _ in values}) != len(values):
        raise UsageError("--values must be distinct")
    rows = []
    for text, v in values:
        t = base.train
        if args.param == "lambda":
            t = dataclasses.replace(t, loss=dataclasses.replace(t.loss, lambda_fcl=v))
        elif args.param == "eta":
            t = dataclasses.replace(t, pwl=dataclasses.replace(t.pwl, eta=v))
        elif args.param == "k":
            t = dataclasses.replace(t, sisc=dataclasses.replace(t.sisc, k=v))
        else:
            t = dataclasses.replace(t, sisc=dataclasses.replace(t.sisc, patch_h=v[0], patch_w=v[1]))
        run_dir = out / f"{args.param}={text}"
        run_adapt(dataclasses.replace(base, train=t), run_dir, args.score_pseudo, subset, threads)
        summary = json.loads((run_dir / "report" / "summary.json").read_text())
        rows.append((text, {"source_only": summary["source_only"]["miou"], "rounds": [r["miou"] for r in summary["rounds"]]}))
    table = sweep_table(args.param, rows)
    (out / "sweep.json").write_text(json.dumps({"param": args.param, "rows": [{"value": t, **r} for t, r in rows]}, indent=2))
    (out / "sweep_table.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    cfg = load_config(args.config) if args.config else reference_config()
    results = run_benchmark(args.out, cfg, threads=resolve_threads(args.threads, cfg))
    print(format_results(results), end="")
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run config JSON; flags override its values")
    p.add_argument("--seed", type=int, help="master seed for every random stream")
    p.add_argument("--threads", type=_positive_int, help="worker cap (default: $MLSL_THREADS or config)")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_adapt_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--source-data", help="source manifest or its directory")
    p.add_argument("--target-data", help="target-train manifest or its directory")
    p.add_argument("--val-data", help="labelled target-val manifest (default: sibling target-val)")
    p.add_argument("--ckpt", help="starting checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--rounds", type=_positive_int)
    p.add_argument("--steps", type=_nonneg_int, help="SGD steps per round (default: one target pass)")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=_positive_int)
    p.add_argument("--lambda", dest="lambda_fcl", type=float, help="weak-label loss weight")
    p.add_argument("--eta", type=float, help="weak-label threshold factor")
    p.add_argument("--k", type=_nonneg_int, help="random patches per image")
    p.add_argument("--patch", type=parse_patch, help="patch size, e.g. 512 or 256x512")
    p.add_argument("--portion-schedule", type=parse_schedule, metavar="START,STEP,CAP")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--subset", help="classes for the subset mIoU, by index or name")
    p.add_argument("--score-pseudo", action="store_true", help="score pseudo-labels against the hidden target labels")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mlsl", description="Multi-level self-supervised domain adaptation on synthetic scenes.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic source and target splits")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n-source", type=int)
    p.add_argument("--n-target", type=int)
    p.add_argument("--n-val", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-source", help="train the base model on labelled source data")
    _add_common(p)
    p.add_argument("--data", help="source manifest or its directory")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=_nonneg_int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=_positive_int)
    p.add_argument("--crop", type=_positive_int, help="train on random square crops of this size")
    p.set_defaults(func=cmd_train_source)

    p = sub.add_parser("adapt", help="run the self-training rounds on the target domain")
    _add_common(p)
    _add_adapt_flags(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("predict", help="write argmax label maps for a manifest")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score a directory of label maps against a manifest")
    _add_common(p)
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-manifest", required=True)
    p.add_argument("--subset")
    p.add_argument("--out", help="also write the report JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="repeat adapt over values of one parameter")
    _add_common(p)
    _add_adapt_flags(p)
    p.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    p.add_argument("--values", required=True, nargs="+")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("benchmark", help="run the seeded reference benchmark")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingDiverged as e:
        print(f"mlsl: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, ConfigError, ManifestError, GeometryError, InvalidLabelError, ValueError) as e:
        print(f"mlsl: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"mlsl: I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
