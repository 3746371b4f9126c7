import math

import numpy as np
import pytest

from painlarks import tensor as T
from painlarks.data import Dataset, as_feature_dataset, generate_synthetic
from painlarks.models import ModelConfig
from painlarks.training import (Adam, History, HistoryRow, OptimizerConfig, TrainingDiverged, adam_step,
                                confusion_matrix, cross_entropy_loss, evaluate_metrics, format_report,
                                lr_schedule, predict_proba, run_kfold_experiment, train_model)

TOY = {"blocks": "2:8,8:8,8:8", "lstm_hidden": "8"}


def toy_cfg(kind="stgcn_lstm"):
    return ModelConfig.from_flat({"kind": kind, **TOY})


@pytest.fixture(scope="module")
def synth16():
    return generate_synthetic(8, seed=0)


def brute_force_metrics(pred, lab):
    """Independent confusion-matrix metrics written out longhand."""
    n = len(lab)
    tp = sum(1 for p, l in zip(pred, lab) if p == 1 and l == 1)
    tn = sum(1 for p, l in zip(pred, lab) if p == 0 and l == 0)
    fp = sum(1 for p, l in zip(pred, lab) if p == 1 and l == 0)
    fn = sum(1 for p, l in zip(pred, lab) if p == 0 and l == 1)

    def prf(tp_c, fp_c, fn_c):
        p = tp_c / (tp_c + fp_c) if tp_c + fp_c else 0.0
        r = tp_c / (tp_c + fn_c) if tp_c + fn_c else 0.0
        return p, r, (2 * p * r / (p + r) if p + r else 0.0)

    p1, r1, f1 = prf(tp, fp, fn)
    p0, r0, f0 = prf(tn, fn, fp)
    s1, s0 = tp + fn, tn + fp
    return ([[tn, fp], [fn, tp]], (tp + tn) / n,
            (s0 * p0 + s1 * p1) / n, (s0 * r0 + s1 * r1) / n, (s0 * f0 + s1 * f1) / n)


# ---------------------------------------------------------------- loss


def test_loss_uniform_is_ln2():
    loss = cross_entropy_loss(T.Tensor(np.zeros((3, 2))), [0, 1, 1])
    assert abs(loss.item() - math.log(2)) <= 1e-15


def test_loss_saturated_is_stable():
    loss = cross_entropy_loss(T.Tensor(np.array([[1000.0, 0.0]])), [0])
    assert math.isfinite(loss.item()) and abs(loss.item()) <= 1e-12
    wrong = cross_entropy_loss(T.Tensor(np.array([[1000.0, 0.0]])), [1])
    assert abs(wrong.item() - 1000.0) <= 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_loss_gradient_is_softmax_minus_onehot(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(scale=3.0, size=(7, 2))
    y = rng.integers(0, 2, size=7)
    x = T.Tensor(z, requires_grad=True)
    T.backward(cross_entropy_loss(x, y))
    e = np.exp(z - z.max(axis=1, keepdims=True))
    expected = (e / e.sum(axis=1, keepdims=True) - np.eye(2)[y]) / len(y)
    assert np.max(np.abs(x.grad - expected)) <= 1e-8


def test_loss_is_nonnegative_and_checks_labels():
    rng = np.random.default_rng(0)
    for _ in range(20):
        assert cross_entropy_loss(T.Tensor(rng.normal(size=(4, 2))), rng.integers(0, 2, 4)).item() > 0
    with pytest.raises(ValueError):
        cross_entropy_loss(T.Tensor(np.zeros((2, 2))), [0, 2])


# ---------------------------------------------------------------- schedule and Adam


def test_schedule_values():
    cfg = OptimizerConfig()
    assert lr_schedule(cfg, 0) == 1e-4
    assert abs(lr_schedule(cfg, 1000) - 9.6e-5) <= 1e-18
    assert abs(lr_schedule(cfg, 500) - 1e-4 * 0.96 ** 0.5) <= 1e-18
    lrs = [lr_schedule(cfg, s) for s in range(10001)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        lr_schedule(cfg, -1)


def test_config_defaults_and_validation():
    cfg = OptimizerConfig()
    assert (cfg.lr0, cfg.beta1, cfg.beta2, cfg.eps, cfg.epochs) == (1e-4, 0.9, 0.999, 1e-8, 150)
    assert cfg.batch_size_for("hybrid") == 8 and cfg.batch_size_for("stgcn_lstm") == 10
    with pytest.raises(ValueError):
        OptimizerConfig(lr0=0.0)
    with pytest.raises(ValueError):
        OptimizerConfig(decay_rate=1.5)


def test_adam_first_step_magnitude():
    cfg = OptimizerConfig()
    p = np.zeros(5)
    moments = [(np.zeros(5), np.zeros(5))]
    adam_step([p], [np.ones(5)], moments, cfg, 1)
    assert np.max(np.abs(np.abs(p) - cfg.lr0)) / cfg.lr0 <= 1e-6


def test_adam_zero_gradient_is_bit_identical():
    rng = np.random.default_rng(0)
    p = rng.normal(size=(3, 4))
    before = p.copy()
    moments = [(np.zeros_like(p), np.zeros_like(p))]
    for step in range(1, 50):
        adam_step([p], [np.zeros_like(p)], moments, OptimizerConfig(), step)
    assert np.array_equal(p, before)


def test_adam_descends_quadratic():
    theta = T.Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam([("theta", theta)], OptimizerConfig(lr0=1e-2))
    for _ in range(100):
        opt.zero_grad()
        T.backward(T.tsum(T.mul(theta, theta)))
        opt.step()
    assert abs(theta.data[0]) < 1.0


def test_adam_nan_names_parameter():
    p = np.zeros(2)
    with pytest.raises(TrainingDiverged, match="encoder.w"):
        adam_step([p], [np.array([0.0, np.nan])], [(np.zeros(2), np.zeros(2))], OptimizerConfig(), 1,
                  names=["encoder.w"])


# ---------------------------------------------------------------- training loop


def test_training_is_deterministic(synth16, tmp_path):
    opt = OptimizerConfig(lr0=3e-3, epochs=3)
    _, h1 = train_model(toy_cfg(), synth16, opt, seed=4)
    _, h2 = train_model(toy_cfg(), synth16, opt, seed=4)
    h1.to_csv(tmp_path / "a.csv")
    h2.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert h1.rows == h2.rows


def test_lr_at_global_step(synth16):
    opt = OptimizerConfig(lr0=1e-3, decay_steps=3, epochs=3)
    _, h = train_model(toy_cfg("stgcn"), synth16, opt, seed=0)
    # 16 clips at batch 10 -> 2 updates per epoch
    assert h.column("step") == [2, 4, 6]
    for row in h.rows:
        assert row.lr == lr_schedule(opt, row.step - 1)


def test_adam_wrapper_tracks_schedule():
    w = T.Tensor(np.ones(3), requires_grad=True)
    opt = Adam([("w", w)], OptimizerConfig(lr0=1.0, decay_steps=1, decay_rate=0.5))
    lrs = []
    for _ in range(4):
        lrs.append(opt.lr)
        opt.zero_grad()
        T.backward(T.tsum(w))
        opt.step()
    assert lrs == [lr_schedule(opt.cfg, g) for g in range(4)] == [1.0, 0.5, 0.25, 0.125]


@pytest.mark.parametrize("seed", range(5))
def test_loss_mostly_decreases_first_ten_epochs(synth16, seed):
    opt = OptimizerConfig(lr0=1e-3, epochs=11, batch_size=16)
    _, h = train_model(toy_cfg(), synth16, opt, seed=seed)
    losses = h.column("train_loss")
    assert sum(b <= a for a, b in zip(losses, losses[1:])) >= 8


def test_divergence_raises_with_history():
    feats = as_feature_dataset(generate_synthetic(8, seed=0))
    feats.clips[3].frames[5, 7] = np.nan  # bypasses the clip validation on purpose
    with pytest.raises(TrainingDiverged) as err:
        train_model(toy_cfg("hybrid"), feats, OptimizerConfig(epochs=3), seed=0)
    assert isinstance(err.value.history, History)
    assert "epoch 1" in str(err.value)


def test_empty_training_set():
    with pytest.raises(ValueError):
        train_model(toy_cfg(), Dataset([]), OptimizerConfig(epochs=1))


def test_callback_stops_and_best_snapshot(synth16):
    feats = as_feature_dataset(synth16)
    model, h = train_model(toy_cfg("hybrid"), feats, OptimizerConfig(lr0=1e-2, epochs=50), seed=0,
                           callback=lambda r: r.epoch == 5)
    assert len(h) == 5 and h.monitor == "train"
    best = h.rows[h.best_epoch - 1]
    assert best.val_accuracy == max(h.column("val_accuracy"))
    p = predict_proba(model, feats.X)
    assert np.all((p >= 0) & (p <= 1)) and np.max(np.abs(p.sum(axis=1) - 1)) <= 1e-12
    assert np.mean(np.argmax(p, axis=1) == feats.y) == best.val_accuracy


def test_history_csv_format(tmp_path):
    h = History([HistoryRow(1, 2, 1e-4, 0.5, 0.75, 0.5), HistoryRow(2, 4, 9e-5, 0.25, 1.0, 1.0)])
    h.to_csv(tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().splitlines() == [
        "epoch,step,lr,train_loss,val_accuracy", "1,2,0.0001,0.5,0.75", "2,4,9e-05,0.25,1.0"]


# ---------------------------------------------------------------- metrics


def test_metrics_hand_example():
    pred = [1] * 9 + [0] * 8 + [1] + [0] * 2
    lab = [1] * 9 + [0] * 8 + [0] + [1] * 2
    r = evaluate_metrics(pred, lab)
    assert r.confusion.tolist() == [[8, 1], [2, 9]]
    assert r.accuracy == 0.85 and abs(r.recall - 0.85) <= 1e-12
    assert abs(r.per_class[1]["precision"] - 0.9) <= 1e-12
    assert abs(r.per_class[1]["recall"] - 9 / 11) <= 1e-12


def test_metrics_perfect():
    r = evaluate_metrics([0, 1, 1, 0], [0, 1, 1, 0])
    assert (r.accuracy, r.precision, r.recall, r.f1) == (1.0, 1.0, 1.0, 1.0)


def test_metrics_against_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        lab = rng.integers(0, 2, n)
        pred = rng.integers(0, 2, n)
        r = evaluate_metrics(pred, lab)
        cm, acc, p, rec, f = brute_force_metrics(pred.tolist(), lab.tolist())
        assert r.confusion.tolist() == cm
        assert abs(r.accuracy - acc) <= 1e-12 and abs(r.precision - p) <= 1e-12
        assert abs(r.recall - rec) <= 1e-12 and abs(r.f1 - f) <= 1e-12
        assert abs(r.recall - r.accuracy) <= 1e-12
        assert r.confusion.sum() == n


def test_metrics_relabel_invariance():
    rng = np.random.default_rng(1)
    for _ in range(100):
        lab, pred = rng.integers(0, 2, 25), rng.integers(0, 2, 25)
        a, b = evaluate_metrics(pred, lab), evaluate_metrics(1 - pred, 1 - lab)
        for m in ("accuracy", "precision", "recall", "f1"):
            assert abs(getattr(a, m) - getattr(b, m)) <= 1e-12


def test_zero_prediction_class_is_flagged():
    r = evaluate_metrics([0, 0, 0, 0], [0, 1, 0, 1])
    assert r.per_class[1]["precision"] == 0.0
    assert any("class 1" in f for f in r.flags)
    assert "flag class 1" in format_report(r)


def test_confusion_orientation():
    assert confusion_matrix([1, 1, 0], [0, 1, 1]).tolist() == [[0, 1], [1, 1]]


# ---------------------------------------------------------------- k-fold


@pytest.fixture(scope="module")
def kfold_serial():
    data = generate_synthetic(10, seed=1)
    opt = OptimizerConfig(lr0=3e-3, epochs=2)
    return data, opt, run_kfold_experiment(toy_cfg("stgcn"), data, opt, k=5, seed=0)


def test_kfold_report_structure(kfold_serial):
    _, _, rep = kfold_serial
    assert len(rep.per_fold) == 5
    assert all(r.n == 4 for r in rep.per_fold) and rep.n == 20
    for m in ("accuracy", "precision", "recall", "f1"):
        assert abs(rep.mean[m] - np.mean([r.metrics()[m] for r in rep.per_fold])) <= 1e-12
    text = format_report(rep, "kfold")
    assert sum(1 for l in text.splitlines() if l.startswith("fold ") and " n=" in l) == 5
    assert "\nmean accuracy=" in text and "\npooled " in text


def test_kfold_serial_equals_parallel(kfold_serial):
    data, opt, rep = kfold_serial
    par = run_kfold_experiment(toy_cfg("stgcn"), data, opt, k=5, seed=0, workers=2)
    assert format_report(par) == format_report(rep)
    for a, b in zip(par.per_fold, rep.per_fold):
        assert np.array_equal(a.confusion, b.confusion)
