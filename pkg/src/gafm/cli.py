"""Batch command-line frontend: ``gafm <command> ...``.

Exit codes: 0 success, 1 gradient-check failure, 2 usage or validation
error, 3 numeric divergence during training.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .checks import SCOPES, checks_for
from .config import ConfigFileError, RunConfig, load_config
from .datapipe import DataError, assign_labels, build_manifest, read_manifest
from .model import GafmConfig, GafmNetwork, Vnn, to_feature_extractor
from .plotting import report_svg
from .tensor import ConfigError, ShapeError, precision
from .training import (
    DivergenceError,
    EvalMetrics,
    Standardizer,
    _vnn_predict,
    evaluate_predictions,
    extract_features,
    train_phase1,
    train_phase2,
)

__all__ = ["main", "build_parser", "EXIT_OK", "EXIT_CHECK", "EXIT_USAGE", "EXIT_DIVERGED"]

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("gafm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits 2 already; keep the message format uniform
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _threads() -> int:
    raw = os.environ.get("GAFM_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise UsageError(f"GAFM_THREADS must be a positive integer, got {raw!r}")
    return n


@contextmanager
def _limited_threads():
    with threadpool_limits(limits=_threads()):
        yield


def _existing(path: Optional[str], what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} {p} does not exist")
    return p


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# commands


def cmd_prepare_data(args) -> int:
    for flag in ("survey", "clusters", "raster", "images"):
        _existing(getattr(args, flag), f"--{flag}")
    manifest = build_manifest(args.survey, args.clusters, args.raster, args.images, seed=args.seed)
    out = Path(args.out)
    side = manifest.write(out)
    report = assign_labels(manifest.clusters)
    print(f"clusters: {len(manifest.cluster_ids)}")
    print(f"images: {len(manifest)}")
    print(report.summary())
    print(f"manifest: {out} sha256 {_sha256(out)}")
    print(f"stats: {side}")
    return EXIT_OK


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config)
    for name in ("seed", "epochs"):
        value = getattr(args, name, None)
        if value is None:
            continue
        if name == "epochs":
            setattr(cfg, "epochs_phase1" if args.command == "train-phase1" else "epochs_phase2", value)
        else:
            cfg.seed = value
    cfg.paths = {"--manifest": args.manifest}
    cfg.validate()
    return cfg


def _load_manifest_images(manifest, cfg_input: int, dtype):
    x = manifest.load_images(dtype)
    if x.shape[2:] != (cfg_input, cfg_input):
        raise UsageError(f"images are {x.shape[2]}x{x.shape[3]} but input_size is {cfg_input}")
    return x


def _write_report(out: Path, stem: str, report, title: str) -> None:
    (out / f"{stem}_report.csv").write_text(report.to_csv())
    (out / f"{stem}_loss.svg").write_text(report_svg(report.train_losses, report.val_losses, title))


def cmd_train_phase1(args) -> int:
    cfg = _run_config(args)
    manifest = read_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with precision(cfg.precision):
        net = GafmNetwork(cfg.model_config(), seed=cfg.seed)
    x = _load_manifest_images(manifest, cfg.input_size, net.stem_conv.weight.dtype)
    report = train_phase1(net, manifest, cfg.train_config(1), images=x)
    _write_report(out, "phase1", report, "phase 1: nightlight MSE")
    meta = {
        "kind": "phase1",
        "model": cfg.model_config().to_dict(),
        "precision": cfg.precision,
        "seed": cfg.seed,
        "channel_mean": list(manifest.channel_mean),
        "channel_std": list(manifest.channel_std),
        "metrics": report.metrics,
    }
    save_checkpoint(net.state_dict(), out / "phase1.ckpt", meta)
    m = report.metrics
    print(f"phase1: {len(report.epochs)} epochs, best epoch {m['best_epoch']}, "
          f"val R2 {m['val_r2']:.4f}, train R2 {m['train_r2']:.4f}")
    return EXIT_OK


def _load_network(path: Path) -> tuple[GafmNetwork, dict]:
    state = load_checkpoint(path)
    meta = state.meta
    if meta.get("kind") != "phase1" or "model" not in meta:
        raise CheckpointError(f"{path} is not a phase-1 network checkpoint")
    with precision(meta.get("precision", "single")):
        net = GafmNetwork(GafmConfig(**meta["model"]), seed=0)
    _load_into(net, state, path)
    net.eval()
    return net, meta


def _load_into(module, state, path) -> None:
    try:
        module.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from None


def cmd_train_phase2(args) -> int:
    cfg = _run_config(args)
    ckpt = args.checkpoint or cfg.phase1_checkpoint
    if ckpt is None:
        raise UsageError("train-phase2 needs a phase-1 checkpoint (--checkpoint or phase1_checkpoint)")
    ckpt = _existing(ckpt, "phase-1 checkpoint")
    net, meta = _load_network(ckpt)
    manifest = read_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    extractor = to_feature_extractor(net)
    with precision(meta.get("precision", "single")):
        vnn = Vnn(extractor.feature_dim, cfg.vnn_hidden, seed=cfg.seed)
    x = _load_manifest_images(manifest, net.config.input_size, net.stem_conv.weight.dtype)
    result = train_phase2(extractor, vnn, manifest, cfg.train_config(2), images=x)
    _write_report(out, "phase2", result.report, "phase 2: income MAE (standardized)")
    (out / "phase2_folds.csv").write_text(result.folds_csv())
    vmeta = {
        "kind": "vnn",
        "in_features": vnn.in_features,
        "hidden": list(cfg.vnn_hidden),
        "precision": meta.get("precision", "single"),
        "standardizer": result.standardizer.to_meta(),
        "k": cfg.k,
        "seed": cfg.seed,
        "phase1_sha256": _sha256(ckpt),
    }
    save_checkpoint(vnn.state_dict(), out / "vnn.ckpt", vmeta)
    print(f"phase2: {cfg.k}-fold R2 " + " ".join(f"{r:.4f}" for r in result.fold_r2))
    print(f"phase2: mean R2 {result.mean_r2:.4f}, pooled R2 {result.pooled_r2:.4f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    manifest_path = _existing(args.manifest, "--manifest")
    ckpt = _existing(args.checkpoint, "--checkpoint")
    vnn_path = _existing(args.vnn, "--vnn")
    net, meta = _load_network(ckpt)
    vstate = load_checkpoint(vnn_path)
    vmeta = vstate.meta
    if vmeta.get("kind") != "vnn":
        raise CheckpointError(f"{vnn_path} is not a VNN checkpoint")
    if "phase1_sha256" in vmeta and vmeta["phase1_sha256"] != _sha256(ckpt):
        raise CheckpointError(f"{vnn_path} was trained on a different phase-1 checkpoint than {ckpt}")
    with precision(vmeta.get("precision", "single")):
        vnn = Vnn(int(vmeta["in_features"]), tuple(vmeta["hidden"]), seed=0)
    _load_into(vnn, vstate, vnn_path)
    vnn.eval()
    manifest = read_manifest(manifest_path)
    x = _load_manifest_images(manifest, net.config.input_size, net.stem_conv.weight.dtype)
    feats = extract_features(to_feature_extractor(net), x)
    preds = _vnn_predict(vnn, Standardizer.from_meta(vmeta["standardizer"]), feats)
    metrics: EvalMetrics = evaluate_predictions(manifest, preds, k=int(vmeta.get("k", 5)),
                                                seed=int(vmeta.get("seed", 0)))
    text = metrics.to_csv()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    checks = checks_for(args.scope)
    failures = []
    width = max(len(c.name) for c in checks)
    print(f"{'check':<{width}}  {'tolerance':>9}  {'max_rel_err':>11}  result")
    for c in checks:
        rep = c.run(c.tolerance)
        status = "PASS" if rep.passed else "FAIL"
        print(f"{c.name:<{width}}  {c.tolerance:>9.0e}  {rep.max_rel_error:>11.3e}  {status}")
        if not rep.passed:
            failures.append((c.name, rep.max_rel_error))
    if failures:
        worst = max(failures, key=lambda f: f[1])
        print(f"FAILED {len(failures)}/{len(checks)} checks; worst: {worst[0]} "
              f"(max relative error {worst[1]:.3e})", file=sys.stderr)
        return EXIT_CHECK
    print(f"all {len(checks)} checks passed")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synth import synth_generate

    corpus = synth_generate(args.out, n_clusters=args.clusters, images_per_cluster=args.images_per_cluster,
                            image_size=args.size, seed=args.seed, noise=args.noise)
    print(f"wrote {len(corpus.truth)} clusters to {corpus.root}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gafm", description="Gated attention feature fusion: data prep, training, evaluation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("prepare-data", help="build a training manifest from survey, raster and images")
    s.add_argument("--survey", required=True)
    s.add_argument("--clusters", required=True)
    s.add_argument("--raster", required=True)
    s.add_argument("--images", required=True, help="directory of <cluster_id>_<k>.ppm files")
    s.add_argument("--out", required=True, help="manifest CSV path (stats sidecar written next to it)")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_prepare_data)

    for name, func in (("train-phase1", cmd_train_phase1), ("train-phase2", cmd_train_phase2)):
        s = sub.add_parser(name, help="nightlight pretraining" if name.endswith("1") else "income regression")
        s.add_argument("--manifest", required=True)
        s.add_argument("--config", help="key=value run configuration file")
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--seed", type=int)
        s.add_argument("--epochs", type=int)
        if name == "train-phase2":
            s.add_argument("--checkpoint", help="phase-1 checkpoint (overrides phase1_checkpoint)")
        s.set_defaults(func=func)

    s = sub.add_parser("evaluate", help="per-fold and pooled income metrics")
    s.add_argument("--manifest", required=True)
    s.add_argument("--checkpoint", required=True, help="phase-1 checkpoint")
    s.add_argument("--vnn", required=True, help="VNN checkpoint from train-phase2")
    s.add_argument("--out", help="metrics CSV path (also printed to stdout)")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    s.add_argument("--scope", choices=SCOPES, default="ops")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="write a synthetic corpus with known ground truth")
    s.add_argument("--out", required=True)
    s.add_argument("--clusters", type=int, default=200)
    s.add_argument("--images-per-cluster", type=int, default=2)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise", type=float, default=0.02)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        with _limited_threads():
            return args.func(args)
    except DivergenceError as exc:
        print(f"gafm: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, ConfigFileError, DataError, CheckpointError, ConfigError, ShapeError, ValueError) as exc:
        print(f"gafm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
