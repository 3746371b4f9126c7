"""Loss, Adam with exponential decay, the training loop, metrics and k-fold runs."""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import Dataset, DataError, augment_image, holdout_split, kfold_partitions, smote_oversample
from .graph import FacialGraph
from .models import ModelConfig, build_model
from .tensor import Tensor

logger = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    """Loss or gradient became non-finite; ``history`` holds the epochs completed."""

    def __init__(self, message: str, history: "History | None" = None):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class OptimizerConfig:
    lr0: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_rate: float = 0.96
    decay_steps: int = 1000
    epochs: int = 150
    batch_size: int | None = None  # None: 8 for hybrid, 10 for the STGCN models
    smote: bool = True
    smote_k: int = 5
    augment: bool = True

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.decay_rate <= 1:
            raise ValueError("decay_rate must lie in (0, 1]")
        if self.decay_steps < 1 or self.epochs < 1:
            raise ValueError("decay_steps and epochs must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def batch_size_for(self, kind: str) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 8 if kind == "hybrid" else 10


# ---------------------------------------------------------------- loss and optimizer


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy over the batch."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise T.ShapeError(f"expected logits [B, C], got {list(logits.shape)}")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError(f"labels must lie in [0, {logits.shape[1]})")
    return T.neg(T.mean(T.pick(T.log_softmax(logits), labels)))


def lr_schedule(cfg: OptimizerConfig, step: int) -> float:
    """Continuous exponential decay: ``lr0 * decay_rate ** (step / decay_steps)``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return cfg.lr0 * cfg.decay_rate ** (step / cfg.decay_steps)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], moments, cfg: OptimizerConfig,
              step: int, names: Sequence[str] | None = None):
    """One in-place Adam update; ``step`` counts from 1 and uses ``lr_schedule(step - 1)``."""
    if step < 1:
        raise ValueError("Adam steps count from 1")
    for k, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            name = names[k] if names is not None else f"#{k}"
            raise TrainingDiverged(f"non-finite gradient in parameter {name}")
    lr = lr_schedule(cfg, step - 1)
    c1 = 1.0 - cfg.beta1 ** step
    c2 = 1.0 - cfg.beta2 ** step
    for p, g, (m, v) in zip(params, grads, moments):
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return params, moments


class Adam:
    def __init__(self, named_params, cfg: OptimizerConfig):
        self.names, self.params = zip(*named_params) if named_params else ((), ())
        self.cfg = cfg
        self.moments = [(np.zeros_like(p.data), np.zeros_like(p.data)) for p in self.params]
        self.step_count = 0

    @property
    def lr(self) -> float:
        """Learning rate the next update will use."""
        return lr_schedule(self.cfg, self.step_count)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.step_count += 1
        adam_step([p.data for p in self.params], [p.grad for p in self.params],
                  self.moments, self.cfg, self.step_count, self.names)


# ---------------------------------------------------------------- training loop


@dataclass
class HistoryRow:
    epoch: int
    step: int
    lr: float
    train_loss: float
    val_accuracy: float
    train_accuracy: float
    val_loss: float = float("nan")


@dataclass
class History:
    rows: list[HistoryRow] = field(default_factory=list)
    best_epoch: int = 0
    monitor: str = "val"

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.rows]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "step", "lr", "train_loss", "val_accuracy"])
            for r in self.rows:
                w.writerow([r.epoch, r.step, repr(r.lr), repr(r.train_loss), repr(r.val_accuracy)])


def resolve_config(model_cfg: ModelConfig, dataset: Dataset) -> ModelConfig:
    """Fill ``feature_dim`` from the data for the precomputed-feature path."""
    if model_cfg.kind == "hybrid" and model_cfg.backbone == "precomputed_features":
        dim = dataset.clips[0].frames.shape[-1]
        if dataset.clips[0].frames.ndim != 2:
            raise DataError("precomputed_features expects [T, D] feature clips")
        if model_cfg.feature_dim is None:
            return replace(model_cfg, feature_dim=dim)
        if model_cfg.feature_dim != dim:
            raise DataError(f"feature_dim={model_cfg.feature_dim} but data has D={dim}")
    return model_cfg


def predict_logits(model, X: np.ndarray, batch_size: int = 32) -> np.ndarray:
    outs = []
    with T.no_grad():
        for s in range(0, len(X), batch_size):
            outs.append(model(X[s:s + batch_size]).data)
    return np.concatenate(outs, axis=0)


def predict_proba(model, X: np.ndarray, batch_size: int = 32) -> np.ndarray:
    z = predict_logits(model, X, batch_size)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict(model, X: np.ndarray, batch_size: int = 32) -> np.ndarray:
    return np.argmax(predict_logits(model, X, batch_size), axis=1)


def _augment_batch(xb: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    out = np.empty_like(xb)
    for b in range(xb.shape[0]):
        clip_seed = int(rng.integers(2 ** 63))
        for t in range(xb.shape[1]):
            # same seed for every frame keeps one crop/rotation per clip
            out[b, t] = augment_image(xb[b, t], seed=clip_seed)
    return out


def train_model(model_cfg: ModelConfig, dataset: Dataset, opt_cfg: OptimizerConfig = OptimizerConfig(),
                seed: int = 0, val_set: Dataset | None = None, graph: FacialGraph | None = None,
                callback: Callable[[HistoryRow], bool] | None = None):
    """Train a fresh model and return ``(model, history)``.

    The returned model carries the parameters of the epoch with the best
    validation accuracy, ties broken by the lower validation loss. Without ``val_set`` the
    training set itself is the monitor. For the STGCN models the training set
    is first balanced with SMOTE when ``opt_cfg.smote`` is set. ``callback``
    sees each epoch's row and may return True to stop.
    """
    if len(dataset) == 0:
        raise DataError("empty training set")
    model_cfg = resolve_config(model_cfg, dataset)
    train = dataset
    if model_cfg.kind != "hybrid" and opt_cfg.smote:
        counts = dataset.class_counts
        if min(counts.values()) > 0 and counts[0] != counts[1]:
            train = smote_oversample(dataset, k=opt_cfg.smote_k, seed=[seed, 2])
    monitor = val_set if val_set is not None and len(val_set) else train

    model = build_model(model_cfg, graph, seed=seed)
    opt = Adam(list(model.named_parameters()), opt_cfg)
    shuffle_rng = np.random.default_rng([seed, 1])
    aug_rng = np.random.default_rng([seed, 3])
    augment = opt_cfg.augment and model_cfg.backbone == "toy_convnext" and model_cfg.kind == "hybrid"
    X, y = train.X, train.y
    Xm, ym = monitor.X, monitor.y
    bs = opt_cfg.batch_size_for(model_cfg.kind)
    history = History(monitor="val" if monitor is not train else "train")
    best_key, best_state = (-1.0, -math.inf), None

    for epoch in range(1, opt_cfg.epochs + 1):
        order = shuffle_rng.permutation(len(X))
        loss_sum, correct = 0.0, 0
        for s in range(0, len(order), bs):
            idx = order[s:s + bs]
            xb = X[idx]
            if augment:
                xb = _augment_batch(xb, aug_rng)
            logits = model(xb)
            loss = cross_entropy_loss(logits, y[idx])
            lval = loss.item()
            if not math.isfinite(lval):
                T.new_tape()
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", history)
            opt.zero_grad()
            T.backward(loss)
            try:
                opt.step()
            except TrainingDiverged as exc:
                exc.history = history
                raise
            loss_sum += lval * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == y[idx]))
        zm = predict_logits(model, Xm)
        acc = float(np.mean(np.argmax(zm, axis=1) == ym))
        zm = zm - zm.max(axis=1, keepdims=True)
        mloss = float(np.mean(np.log(np.exp(zm).sum(axis=1)) - zm[np.arange(len(ym)), ym]))
        row = HistoryRow(epoch, opt.step_count, lr_schedule(opt_cfg, opt.step_count - 1),
                         loss_sum / len(X), acc, correct / len(X), mloss)
        history.rows.append(row)
        logger.debug("epoch %d loss %.5f monitor-acc %.4f", epoch, row.train_loss, acc)
        # small validation sets saturate early; ties go to the lower monitor loss
        if (acc, -mloss) > best_key:
            best_key, best_state = (acc, -mloss), model.state_dict()
            history.best_epoch = epoch
        if callback is not None and callback(row):
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    return model, history


# ---------------------------------------------------------------- metrics


@dataclass
class EvalReport:
    confusion: np.ndarray  # rows: true label, columns: predicted label
    accuracy: float
    precision: float
    recall: float
    f1: float
    per_class: dict = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)
    per_fold: list["EvalReport"] = field(default_factory=list)
    mean: dict | None = None

    @property
    def n(self) -> int:
        return int(self.confusion.sum())

    def metrics(self) -> dict[str, float]:
        return {"accuracy": self.accuracy, "precision": self.precision,
                "recall": self.recall, "f1": self.f1}


def confusion_matrix(predictions, labels, num_classes: int = 2) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels, dtype=np.int64), np.asarray(predictions, dtype=np.int64)), 1)
    return cm


def report_from_confusion(cm: np.ndarray) -> EvalReport:
    total = int(cm.sum())
    if total < 1:
        raise ValueError("empty confusion matrix")
    flags, per_class = [], {}
    wp = wr = wf = 0.0
    for c in range(cm.shape[0]):
        tp = int(cm[c, c])
        predicted = int(cm[:, c].sum())
        support = int(cm[c, :].sum())
        if predicted == 0:
            flags.append(f"class {c}: no predicted samples, precision set to 0")
        p = tp / predicted if predicted else 0.0
        r = tp / support if support else 0.0
        f = 2 * p * r / (p + r) if p + r > 0 else 0.0
        per_class[c] = {"precision": p, "recall": r, "f1": f, "support": support}
        wp += support * p
        wr += support * r
        wf += support * f
    return EvalReport(cm, float(np.trace(cm)) / total, wp / total, wr / total, wf / total,
                      per_class, flags)


def evaluate_metrics(predictions, labels) -> EvalReport:
    """Accuracy plus support-weighted precision, recall and F1."""
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if predictions.shape != labels.shape or predictions.size < 1:
        raise ValueError("predictions and labels must be non-empty and equally long")
    return report_from_confusion(confusion_matrix(predictions, labels))


# ---------------------------------------------------------------- k-fold


def _run_fold(args):
    fold, model_cfg, train, test, opt_cfg, fold_seed, graph, val_fraction = args
    val = None
    if val_fraction > 0:
        train, val = holdout_split(train, val_fraction, seed=fold_seed)
    try:
        model, _ = train_model(model_cfg, train, opt_cfg, fold_seed, val_set=val, graph=graph)
    except TrainingDiverged as exc:
        raise TrainingDiverged(f"fold {fold + 1}: {exc}", exc.history) from None
    return evaluate_metrics(predict(model, test.X), test.y)


def run_kfold_experiment(model_cfg: ModelConfig, dataset: Dataset, opt_cfg: OptimizerConfig = OptimizerConfig(),
                         k: int = 5, seed: int = 0, workers: int = 1, graph: FacialGraph | None = None,
                         val_fraction: float = 0.125) -> EvalReport:
    """Train one model per stratified fold; fold ``f`` uses seed ``seed ^ f``.

    ``val_fraction`` of each fold's training part is held out for model
    selection. The returned report's top-level numbers come from the pooled
    confusion matrix; ``mean`` holds the per-fold averages.
    """
    folds = kfold_partitions(dataset, k=k, seed=seed)
    jobs = [(f, model_cfg, tr, te, opt_cfg, seed ^ f, graph, val_fraction)
            for f, (tr, te) in enumerate(folds)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(_run_fold, jobs))
    else:
        reports = [_run_fold(j) for j in jobs]
    pooled = report_from_confusion(sum(r.confusion for r in reports))
    pooled.per_fold = reports
    pooled.mean = {m: float(np.mean([r.metrics()[m] for r in reports]))
                   for m in ("accuracy", "precision", "recall", "f1")}
    return pooled


# ---------------------------------------------------------------- report text


def _pct(x: float) -> str:
    return f"{100.0 * x:.2f}"


def _line(r: EvalReport) -> str:
    cm = r.confusion
    return (f"n={r.n} tn={cm[0, 0]} fp={cm[0, 1]} fn={cm[1, 0]} tp={cm[1, 1]} "
            f"accuracy={_pct(r.accuracy)} precision={_pct(r.precision)} "
            f"recall={_pct(r.recall)} f1={_pct(r.f1)}")


def format_report(report: EvalReport, title: str = "evaluation") -> str:
    """Plain-text report; metrics are percentages with two decimals."""
    lines = [f"# painlarks report: {title}"]
    if report.per_fold:
        lines.append(f"folds {len(report.per_fold)}")
        for i, r in enumerate(report.per_fold, 1):
            lines.append(f"fold {i} {_line(r)}")
            lines.extend(f"fold {i} flag {fl}" for fl in r.flags)
        m = report.mean
        lines.append(f"mean accuracy={_pct(m['accuracy'])} precision={_pct(m['precision'])} "
                     f"recall={_pct(m['recall'])} f1={_pct(m['f1'])}")
        lines.append(f"pooled {_line(report)}")
    else:
        lines.append(f"metrics {_line(report)}")
        lines.extend(f"flag {fl}" for fl in report.flags)
    return "\n".join(lines) + "\n"
