from pathlib import Path

import numpy as np
import pytest

from gafm import Tensor, precision
from gafm.datapipe import Manifest, ManifestEntry
from gafm.model import GafmConfig, GafmNetwork, Vnn, to_feature_extractor
from gafm.training import (
    AdamState,
    DivergenceError,
    MissingGradientError,
    PlateauScheduler,
    TrainConfig,
    TrainReport,
    UndefinedMetricError,
    adam_step,
    evaluate_predictions,
    fit_income_cv,
    make_folds,
    predict,
    r2_score,
    scheduler_step,
    train_phase1,
    train_phase2,
)


def fake_manifest(targets, incomes=None, clusters=None):
    n = len(targets)
    incomes = incomes if incomes is not None else np.arange(n, dtype=float)
    clusters = clusters if clusters is not None else [f"c{i:03d}" for i in range(n)]
    entries = [ManifestEntry(Path(f"/nonexistent/{i}.ppm"), clusters[i], float(targets[i]), float(incomes[i]))
               for i in range(n)]
    return Manifest(entries, [0.0] * 3, [1.0] * 3, 0)


# --------------------------------------------------------------------- metric


def test_r2_values():
    assert r2_score([1, 2, 3], [1, 2, 3]) == 1.0
    assert r2_score([2, 2, 2], [1, 2, 3]) == 0.0
    assert abs(r2_score([1, 2, 4], [1, 2, 3]) - 0.5) < 1e-12
    assert r2_score([3, 2, 1], [1, 2, 3]) < 0


def test_r2_undefined():
    with pytest.raises(UndefinedMetricError):
        r2_score([1, 2], [5, 5])
    with pytest.raises(UndefinedMetricError):
        r2_score([1], [1])


# --------------------------------------------------------------------- Adam


def _param(v):
    return Tensor(np.array(v, dtype=np.float64), requires_grad=True)


def test_adam_hand_step():
    p = _param([0.0])
    p.grad = np.array([0.5])
    adam_step(AdamState(lr=0.001), {"p": p})
    assert abs(p.data[0] + 0.001) < 1e-8
    assert p.grad is None


def test_adam_zero_gradient_no_change():
    p = _param([1.5, -2.0])
    st = AdamState()
    for _ in range(5):
        p.grad = np.zeros(2)
        adam_step(st, {"p": p})
    assert np.array_equal(p.data, [1.5, -2.0])
    assert st.t == 5


def test_adam_zero_lr_bit_identical():
    p = _param([0.3, 0.7])
    before = p.data.tobytes()
    p.grad = np.array([1.0, -4.0])
    adam_step(AdamState(lr=0.0), {"p": p})
    assert p.data.tobytes() == before


def test_adam_converges_on_square():
    p = _param([1.0])
    st = AdamState(lr=0.01)
    for _ in range(500):
        p.grad = 2 * p.data
        adam_step(st, {"p": p})
    assert abs(p.data[0]) < 0.05


def test_adam_missing_gradient():
    with pytest.raises(MissingGradientError, match="w"):
        adam_step(AdamState(), {"w": _param([1.0])})


# --------------------------------------------------------------------- scheduler


def test_scheduler_improving_keeps_lr():
    s, lr = PlateauScheduler(patience=2), 1e-3
    for loss in (1.0, 0.9, 0.8, 0.7, 0.6):
        lr = scheduler_step(s, loss, lr)
    assert lr == 1e-3


def test_scheduler_walkthrough():
    s, lr = PlateauScheduler(patience=2, factor=0.1), 1e-3
    history = []
    for _ in range(4):
        lr = scheduler_step(s, 1.0, lr)
        history.append(lr)
    # epoch 1 sets best, epochs 2-4 are the three non-improving ones
    assert history[:3] == [1e-3] * 3
    assert history[3] == pytest.approx(1e-4)


def test_scheduler_min_lr_and_monotone():
    s, lr = PlateauScheduler(patience=0, factor=0.1, min_lr=1e-6), 1e-3
    seen = [lr]
    for _ in range(20):
        lr = scheduler_step(s, 5.0, lr)
        seen.append(lr)
    assert min(seen) == 1e-6
    assert all(b <= a for a, b in zip(seen, seen[1:]))


def test_scheduler_threshold():
    s = PlateauScheduler(patience=0, threshold=0.1)
    scheduler_step(s, 1.0, 1.0)
    assert scheduler_step(s, 0.95, 1.0) < 1.0


# --------------------------------------------------------------------- folds


def test_folds_partition():
    plan = make_folds(10, 5, seed=0)
    idx = [plan.indices(f) for f in range(5)]
    assert all(len(i) == 2 for i in idx)
    assert sorted(np.concatenate(idx).tolist()) == list(range(10))


def test_folds_determinism_and_seed():
    a, b, c = make_folds(20, 4, 1), make_folds(20, 4, 1), make_folds(20, 4, 2)
    assert np.array_equal(a.assignment, b.assignment)
    assert not np.array_equal(a.assignment, c.assignment)
    assert sorted(a.sizes()) == sorted(c.sizes())


def test_folds_round_robin_sizes():
    assert sorted(make_folds(7, 3).sizes(), reverse=True) == [3, 2, 2]


@pytest.mark.parametrize("n,k", [(3, 4), (5, 1)])
def test_folds_invalid(n, k):
    with pytest.raises(ValueError):
        make_folds(n, k)


# --------------------------------------------------------------------- reports


def test_report_csv():
    r = TrainReport()
    r.add(1.0, 2.0, 1e-3)
    r.add(0.5, 1.0, 1e-3)
    lines = r.to_csv().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,lr"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["1", "2"]


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(k=1)


# --------------------------------------------------------------------- phase 1


def test_phase1_constant_target_convergence():
    x1 = np.random.default_rng(0).standard_normal((1, 3, 16, 16)).astype(np.float32)
    x = np.repeat(x1, 64, axis=0)
    m = fake_manifest(np.full(64, 0.7))
    net = GafmNetwork(GafmConfig.tiny(), seed=0)
    cfg = TrainConfig(epochs=30, batch_size=32, augment=False)
    report = _phase1_no_metrics(net, m, cfg, x)
    pred = predict(net, x1)
    assert abs(pred[0] - 0.7) < 0.05, (pred, report.train_losses[-3:])


def _phase1_no_metrics(net, m, cfg, x):
    # all targets equal, so R^2 is undefined; drive the training loop directly
    from gafm.training import _train_epochs, mse_loss

    idx = np.arange(len(x))
    return _train_epochs(net, x, m.targets(), idx[:48], idx[48:], cfg, mse_loss,
                         np.random.default_rng(0), "phase1")


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    from gafm.datapipe import build_manifest
    from gafm.synth import synth_generate

    c = synth_generate(tmp_path_factory.mktemp("tr"), n_clusters=30, images_per_cluster=2, image_size=16, seed=3)
    return build_manifest(c.survey_csv, c.clusters_csv, c.raster_file, c.image_dir, seed=3)


def _run_phase1(manifest, epochs=12, seed=0):
    net = GafmNetwork(GafmConfig.tiny(), seed=seed)
    report = train_phase1(net, manifest, TrainConfig(epochs=epochs, batch_size=16, seed=seed))
    return net, report


def test_phase1_report_and_best_checkpoint(small_corpus):
    net, report = _run_phase1(small_corpus)
    assert [e.epoch for e in report.epochs] == list(range(1, 13))
    best = min(report.val_losses)
    assert report.val_losses[report.best_epoch - 1] == best
    assert {"val_r2", "val_mse", "train_r2", "best_epoch"} <= set(report.metrics)
    assert all(v >= 0 for v in report.train_losses + report.val_losses)


def test_phase1_loss_trend(small_corpus):
    _, report = _run_phase1(small_corpus, epochs=20)
    losses = report.train_losses
    for start in range(0, len(losses) - 9):
        window = losses[start : start + 10]
        assert window[-1] <= window[0] * 1.2, window
    assert losses[-1] < losses[0]


def test_phase1_deterministic(small_corpus):
    na, ra = _run_phase1(small_corpus, epochs=3)
    nb, rb = _run_phase1(small_corpus, epochs=3)
    assert ra.to_csv() == rb.to_csv()
    for (ka, va), (kb, vb) in zip(na.state_dict().items(), nb.state_dict().items()):
        assert ka == kb and va.tobytes() == vb.tobytes()


def test_phase1_nonfinite_aborts():
    x = np.random.default_rng(0).standard_normal((20, 3, 16, 16)).astype(np.float32)
    x[3, 0, 0, 0] = np.nan
    m = fake_manifest(np.linspace(0, 1, 20))
    with pytest.raises(DivergenceError, match="non-finite"):
        train_phase1(GafmNetwork(GafmConfig.tiny()), m, TrainConfig(epochs=2, batch_size=4, augment=False), images=x)


def test_phase1_empty_manifest():
    with pytest.raises(ValueError):
        train_phase1(GafmNetwork(GafmConfig.tiny()), fake_manifest([]), TrainConfig(epochs=1))


# --------------------------------------------------------------------- phase 2


def linear_oracle(n=2000, dim=8, seed=0):
    """Income exactly linear in the features; default phase-2 settings (lr 1e-3, 50 epochs)."""
    r = np.random.default_rng(seed)
    feats = r.standard_normal((n, dim))
    income = feats @ r.standard_normal(dim) * 40 + 300
    with precision("double"):
        v = Vnn(dim, (64, 32), seed=seed)
    return fit_income_cv(feats, income, np.arange(n), v, TrainConfig(epochs=50, batch_size=32))


def test_linear_recoverability_oracle():
    res = linear_oracle()
    assert len(res.fold_r2) == 5
    assert min(res.fold_r2) > 0.99, res.fold_r2


def test_phase2_report_shape_and_frozen_extractor(small_corpus):
    net, _ = _run_phase1(small_corpus, epochs=2)
    ext = to_feature_extractor(net)
    before = {k: v.copy() for k, v in net.state_dict().items()}
    vnn = Vnn(ext.feature_dim, (16, 8), seed=1)
    res = train_phase2(ext, vnn, small_corpus, TrainConfig(epochs=5, batch_size=16))
    for k, v in net.state_dict().items():
        assert v.tobytes() == before[k].tobytes(), k
    lines = res.folds_csv().splitlines()
    assert lines[0] == "fold,r2"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["0", "1", "2", "3", "4", "mean", "pooled"]
    assert res.mean_r2 == pytest.approx(np.mean(res.fold_r2))
    assert len(res.report.epochs) == 5


def test_phase2_dim_mismatch(small_corpus):
    from gafm import ShapeError

    ext = to_feature_extractor(GafmNetwork(GafmConfig.tiny()))
    with pytest.raises(ShapeError):
        train_phase2(ext, Vnn(ext.feature_dim + 1), small_corpus, TrainConfig(epochs=1))


def test_cv_groups_keep_clusters_together():
    r = np.random.default_rng(1)
    groups = np.repeat(np.arange(20), 3)
    feats = r.standard_normal((60, 4))
    income = feats[:, 0] * 10 + 50
    res = fit_income_cv(feats, income, groups, Vnn(4, (8, 4)), TrainConfig(epochs=2, batch_size=16))
    plan = make_folds(20, 5, 0)
    for fold in range(5):
        assert len(set(groups[plan.assignment[groups] == fold])) == 4
    assert res.oof_predictions.shape == (60,)


# --------------------------------------------------------------------- evaluation


def test_evaluate_perfect_oracle():
    inc = np.linspace(10, 500, 30)
    m = fake_manifest(np.zeros(30), inc)
    ev = evaluate_predictions(m, inc)
    assert ev.pooled_r2 == 1.0 and ev.mae == 0.0
    assert all(r == 1.0 for r in ev.fold_r2)
    lines = ev.to_csv().splitlines()
    assert lines[0] == "fold,r2,mae" and lines[-1].startswith("pooled,1.0,0.0")
