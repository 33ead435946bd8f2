"""Losses, metrics, optimizer, scheduler, folds and the two training phases."""

from __future__ import annotations

import copy
import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from . import ops
from .datapipe import Manifest
from .model import FeatureExtractor, GafmNetwork, Vnn
from .nn import Module
from .tensor import ShapeError, Tape, Tensor, backward

__all__ = [
    "DivergenceError",
    "UndefinedMetricError",
    "MissingGradientError",
    "mse_loss",
    "mae_loss",
    "r2_score",
    "AdamState",
    "adam_step",
    "PlateauScheduler",
    "scheduler_step",
    "FoldPlan",
    "make_folds",
    "TrainConfig",
    "EpochRecord",
    "TrainReport",
    "Phase2Result",
    "Standardizer",
    "dihedral_augment",
    "predict",
    "extract_features",
    "train_phase1",
    "fit_income_cv",
    "train_phase2",
    "evaluate_predictions",
    "EvalMetrics",
]

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, history: Sequence[float] = ()):
        super().__init__(message)
        self.history = list(history)


class UndefinedMetricError(ValueError):
    """R^2 is undefined for constant targets."""


class MissingGradientError(RuntimeError):
    """A parameter handed to the optimizer has no gradient."""


mse_loss = ops.mse_loss
mae_loss = ops.mae_loss


def r2_score(pred: Sequence[float], actual: Sequence[float]) -> float:
    """1 - SS_res / SS_tot. Can be negative; never exceeds 1."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    actual = np.asarray(actual, dtype=np.float64).ravel()
    if pred.shape != actual.shape:
        raise ShapeError(f"r2_score: {pred.shape} predictions vs {actual.shape} actuals")
    if actual.size < 2:
        raise UndefinedMetricError("r2_score needs at least two samples")
    centered = actual - actual.mean()
    ss_tot = float(np.dot(centered, centered))
    if ss_tot == 0.0:
        raise UndefinedMetricError("r2_score is undefined when every actual value is identical")
    resid = actual - pred
    return 1.0 - float(np.dot(resid, resid)) / ss_tot


# ---------------------------------------------------------------------------
# optimizer and scheduler


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: Mapping[str, Tensor]) -> None:
    """One bias-corrected Adam update in place; gradients are cleared afterwards."""
    for name, p in params.items():
        if p.grad is None:
            raise MissingGradientError(f"parameter {name!r} has no gradient")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= step.astype(p.dtype, copy=False)
        p.grad = None


@dataclass
class PlateauScheduler:
    patience: int = 10
    factor: float = 0.1
    min_lr: float = 1e-6
    threshold: float = 1e-4
    best: float = math.inf
    bad_epochs: int = 0


def scheduler_step(s: PlateauScheduler, val_loss: float, current_lr: float) -> float:
    """Return the learning rate for the next epoch."""
    if val_loss < s.best - s.threshold:
        s.best = val_loss
        s.bad_epochs = 0
        return current_lr
    s.bad_epochs += 1
    if s.bad_epochs > s.patience:
        s.bad_epochs = 0
        return max(current_lr * s.factor, s.min_lr)
    return current_lr


# ---------------------------------------------------------------------------
# folds


@dataclass
class FoldPlan:
    k: int
    assignment: np.ndarray  # fold index per sample
    seed: int

    def indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == fold)

    def sizes(self) -> list:
        return np.bincount(self.assignment, minlength=self.k).tolist()


def make_folds(n: int, k: int, seed: int = 0) -> FoldPlan:
    """Seeded shuffle, then deal samples round-robin into ``k`` folds."""
    if k < 2:
        raise ValueError(f"k must be at least 2, got {k}")
    if k > n:
        raise ValueError(f"cannot split {n} samples into {k} folds")
    order = np.random.default_rng(seed).permutation(n)
    assignment = np.empty(n, dtype=np.int64)
    assignment[order] = np.arange(n) % k
    return FoldPlan(k, assignment, seed)


# ---------------------------------------------------------------------------
# reports


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 100
    k: int = 5
    seed: int = 0
    val_fold: int = 0
    patience: int = 10
    factor: float = 0.1
    threshold: float = 1e-4
    min_lr: float = 1e-6
    precision: str = "single"
    augment: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.k < 2:
            raise ValueError("k must be at least 2")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    metrics: dict = field(default_factory=dict)

    def add(self, train_loss: float, val_loss: float, lr: float) -> None:
        self.epochs.append(EpochRecord(len(self.epochs) + 1, train_loss, val_loss, lr))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for e in self.epochs:
            w.writerow([e.epoch, repr(e.train_loss), repr(e.val_loss), repr(e.lr)])
        return buf.getvalue()

    @property
    def train_losses(self) -> list:
        return [e.train_loss for e in self.epochs]

    @property
    def val_losses(self) -> list:
        return [e.val_loss for e in self.epochs]


# ---------------------------------------------------------------------------
# batching helpers


def _batches(idx: np.ndarray, batch_size: int) -> list:
    n_batches = max(1, math.ceil(len(idx) / batch_size))
    return [b for b in np.array_split(idx, n_batches) if len(b)]


def dihedral_augment(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random flip / 90-degree rotation per image (NCHW, square)."""
    out = np.empty_like(x)
    codes = rng.integers(0, 8, size=len(x))
    for i, c in enumerate(codes):
        img = x[i]
        if c & 1:
            img = img[:, :, ::-1]
        if c & 2:
            img = img[:, ::-1, :]
        if c & 4:
            img = img.transpose(0, 2, 1)
        out[i] = img
    return out


def predict(model: Module, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Eval-mode forward in batches without recording; returns a flat array."""
    out = [model(Tensor(x[i : i + batch_size]), False).data for i in range(0, len(x), batch_size)]
    return np.concatenate(out).reshape(len(x), -1).squeeze(-1)


def extract_features(extractor: FeatureExtractor, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = [extractor(Tensor(x[i : i + batch_size]), False).data for i in range(0, len(x), batch_size)]
    return np.concatenate(out)


def _named(module: Module) -> dict:
    return dict(module.named_parameters())


def _check_finite(loss: float, history: Sequence[float], what: str) -> None:
    if not math.isfinite(loss):
        raise DivergenceError(f"{what} became non-finite ({loss}); last finite losses: "
                              f"{[round(h, 6) for h in history[-5:]]}", history)


def _train_epochs(model: Module, x: np.ndarray, y: np.ndarray, train_idx: np.ndarray,
                  val_idx: Optional[np.ndarray], config: TrainConfig, loss_fn,
                  rng: np.random.Generator, label: str, augment: bool = False) -> TrainReport:
    """Minibatch Adam with plateau scheduling; keeps the best-validation state."""
    adam = AdamState(lr=config.lr)
    sched = PlateauScheduler(config.patience, config.factor, config.min_lr, config.threshold)
    params = _named(model)
    report = TrainReport()
    best_state, best_val = None, math.inf
    history: list = []  # finite batch losses, reported on divergence
    for epoch in range(1, config.epochs + 1):
        total, count = 0.0, 0
        for b in _batches(rng.permutation(train_idx), config.batch_size):
            xb = dihedral_augment(x[b], rng) if augment else x[b]
            with Tape(), np.errstate(over="ignore", invalid="ignore"):
                pred = model(Tensor(xb), True)
                loss = loss_fn(pred, Tensor(y[b].reshape(-1, 1).astype(x.dtype)))
                value = float(loss.data)
                _check_finite(value, history, f"{label} training loss")
                history.append(value)
                backward(loss)
            adam_step(adam, params)
            total += value * len(b)
            count += len(b)
        train_loss = total / count
        if val_idx is not None and len(val_idx):
            with np.errstate(over="ignore", invalid="ignore"):
                pv = predict(model, x[val_idx])
                val_loss = float(loss_fn(Tensor(pv.reshape(-1, 1)), Tensor(y[val_idx].reshape(-1, 1))).data)
        else:
            val_loss = train_loss
        _check_finite(val_loss, history, f"{label} validation loss")
        report.add(train_loss, val_loss, adam.lr)
        if val_loss < best_val:
            best_val, best_state, report.best_epoch = val_loss, model.state_dict(), epoch
        adam.lr = scheduler_step(sched, val_loss, adam.lr)
        log.info("%s epoch %d train %.6f val %.6f lr %.2e", label, epoch, train_loss, val_loss, adam.lr)
    model.load_state_dict(best_state)
    return report


# ---------------------------------------------------------------------------
# phase 1


def train_phase1(net: GafmNetwork, manifest: Manifest, config: TrainConfig,
                 images: Optional[np.ndarray] = None) -> TrainReport:
    """Regress nightlight intensity from images with MSE.

    One cluster-level fold (``config.val_fold`` of a ``config.k``-fold plan) is
    held out for validation and best-checkpoint selection. The network is left
    holding the best-validation weights.
    """
    if len(manifest) == 0:
        raise ValueError("phase 1 needs a non-empty manifest")
    dt = np.float64 if config.precision == "double" else np.float32
    x = manifest.load_images(dt) if images is None else images
    y = manifest.targets()
    groups = manifest.group_index()
    plan = make_folds(int(groups.max()) + 1, config.k, config.seed)
    val_mask = plan.assignment[groups] == config.val_fold
    train_idx, val_idx = np.flatnonzero(~val_mask), np.flatnonzero(val_mask)
    rng = np.random.default_rng(config.seed)
    report = _train_epochs(net, x, y, train_idx, val_idx, config, mse_loss, rng, "phase1",
                           augment=config.augment)
    net.eval()
    pv = predict(net, x[val_idx])
    report.metrics = {
        "val_r2": r2_score(pv, y[val_idx]),
        "val_mse": float(np.mean((pv - y[val_idx]) ** 2)),
        "train_r2": r2_score(predict(net, x[train_idx]), y[train_idx]),
        "best_epoch": report.best_epoch,
    }
    return report


# ---------------------------------------------------------------------------
# phase 2


@dataclass
class Standardizer:
    """Affine z-scoring of features and income, fitted on training rows only."""

    feature_mean: np.ndarray
    feature_std: np.ndarray
    target_mean: float
    target_std: float

    @classmethod
    def fit(cls, features: np.ndarray, target: np.ndarray) -> "Standardizer":
        fs = features.std(axis=0)
        ts = float(target.std())
        return cls(features.mean(axis=0), np.where(fs > 0, fs, 1.0),
                   float(target.mean()), ts if ts > 0 else 1.0)

    def features(self, f: np.ndarray) -> np.ndarray:
        return (f - self.feature_mean) / self.feature_std

    def target(self, y: np.ndarray) -> np.ndarray:
        return (y - self.target_mean) / self.target_std

    def inverse_target(self, z: np.ndarray) -> np.ndarray:
        return z * self.target_std + self.target_mean

    def to_meta(self) -> dict:
        return {
            "feature_mean": [float(v) for v in self.feature_mean],
            "feature_std": [float(v) for v in self.feature_std],
            "target_mean": self.target_mean,
            "target_std": self.target_std,
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "Standardizer":
        return cls(np.asarray(meta["feature_mean"]), np.asarray(meta["feature_std"]),
                   float(meta["target_mean"]), float(meta["target_std"]))


@dataclass
class Phase2Result:
    report: TrainReport  # per-epoch record of the final all-data fit
    fold_r2: list
    mean_r2: float
    pooled_r2: float
    standardizer: Standardizer
    oof_predictions: np.ndarray

    def folds_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fold", "r2"])
        for i, r in enumerate(self.fold_r2):
            w.writerow([i, repr(r)])
        w.writerow(["mean", repr(self.mean_r2)])
        w.writerow(["pooled", repr(self.pooled_r2)])
        return buf.getvalue()


def _fit_vnn(vnn: Vnn, f: np.ndarray, y: np.ndarray, config: TrainConfig, seed: int) -> tuple:
    std = Standardizer.fit(f, y)
    fz = std.features(f).astype(vnn.fc1.weight.dtype)
    yz = std.target(y)
    idx = np.arange(len(f))
    # no inner validation split: the plateau scheduler watches the training loss
    report = _train_epochs(vnn, fz, yz, idx, None, config, mae_loss,
                           np.random.default_rng(seed), "phase2")
    return report, std


def _vnn_predict(vnn: Vnn, std: Standardizer, f: np.ndarray) -> np.ndarray:
    z = predict(vnn, std.features(f).astype(vnn.fc1.weight.dtype))
    return std.inverse_target(z.astype(np.float64))


def fit_income_cv(features: np.ndarray, incomes: np.ndarray, groups: np.ndarray,
                  vnn: Vnn, config: TrainConfig) -> Phase2Result:
    """k-fold (grouped by cluster) MAE training of fresh copies of ``vnn``.

    Each fold restarts from ``vnn``'s initial weights. Afterwards ``vnn`` is fit
    on every row and left holding those weights.
    """
    features = np.asarray(features, dtype=np.float64)
    incomes = np.asarray(incomes, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != vnn.in_features:
        raise ShapeError(f"features {features.shape} do not match VNN input dim {vnn.in_features}")
    initial = vnn.state_dict()
    plan = make_folds(int(groups.max()) + 1, config.k, config.seed)
    row_fold = plan.assignment[groups]
    oof = np.empty_like(incomes)
    fold_r2 = []
    for fold in range(config.k):
        vnn.load_state_dict(initial)
        tr, te = np.flatnonzero(row_fold != fold), np.flatnonzero(row_fold == fold)
        _, std = _fit_vnn(vnn, features[tr], incomes[tr], config, config.seed + 1 + fold)
        oof[te] = _vnn_predict(vnn, std, features[te])
        fold_r2.append(r2_score(oof[te], incomes[te]))
    vnn.load_state_dict(initial)
    report, std = _fit_vnn(vnn, features, incomes, config, config.seed)
    report.metrics = {"mean_r2": float(np.mean(fold_r2)), "pooled_r2": r2_score(oof, incomes)}
    return Phase2Result(report, fold_r2, float(np.mean(fold_r2)), r2_score(oof, incomes), std, oof)


def train_phase2(extractor: FeatureExtractor, vnn: Vnn, manifest: Manifest, config: TrainConfig,
                 images: Optional[np.ndarray] = None) -> Phase2Result:
    """Income regression on frozen extractor features.

    The extractor only runs in eval mode outside any tape, so neither its
    weights nor its batch-norm statistics can change.
    """
    if extractor.feature_dim != vnn.in_features:
        raise ShapeError(f"extractor emits {extractor.feature_dim} features, VNN expects {vnn.in_features}")
    dt = extractor.stem_conv.weight.dtype
    x = manifest.load_images(dt) if images is None else images
    feats = extract_features(extractor, x)
    return fit_income_cv(feats, manifest.incomes(), manifest.group_index(), vnn, config)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalMetrics:
    fold_r2: list
    fold_mae: list
    pooled_r2: float
    mae: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fold", "r2", "mae"])
        for i, (r, m) in enumerate(zip(self.fold_r2, self.fold_mae)):
            w.writerow([i, repr(r), repr(m)])
        w.writerow(["pooled", repr(self.pooled_r2), repr(self.mae)])
        return buf.getvalue()


def evaluate_predictions(manifest: Manifest, predictions: np.ndarray, k: int = 5,
                         seed: int = 0) -> EvalMetrics:
    """R^2 and MAE of income predictions per cluster fold and pooled."""
    y = manifest.incomes()
    p = np.asarray(predictions, dtype=np.float64).ravel()
    if p.shape != y.shape:
        raise ShapeError(f"{p.shape[0]} predictions for {y.shape[0]} manifest rows")
    groups = manifest.group_index()
    plan = make_folds(int(groups.max()) + 1, k, seed)
    row_fold = plan.assignment[groups]
    fold_r2, fold_mae = [], []
    for fold in range(k):
        sel = row_fold == fold
        fold_r2.append(r2_score(p[sel], y[sel]))
        fold_mae.append(float(np.mean(np.abs(p[sel] - y[sel]))))
    return EvalMetrics(fold_r2, fold_mae, r2_score(p, y), float(np.mean(np.abs(p - y))))


def clone(module: Module) -> Module:
    """Deep copy with independent parameter storage."""
    return copy.deepcopy(module)
