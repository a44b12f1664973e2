"""Epoch orchestration: minibatch updates, validation scoring, threshold scheduling."""

from __future__ import annotations

import logging
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import autodiff as ad
from ..data_io import aggregate_recording
from .losses import PwlConfig, bce_loss, pwl_loss
from .metrics import compute_metrics, confusion_counts
from .optim import AdamState, adam_step
from .sapt import ThresholdScheduler, default_grid, sapt_update

log = logging.getLogger(__name__)

LOSSES = ("pwl", "bce")
THRESHOLDS = ("sapt", "fixed")
REPORT_COLUMNS = ("epoch", "train_loss", "val_f1", "val_acc", "val_sens", "val_spec", "tau",
                  "train_acc", "val_loss")


class TrainingError(RuntimeError):
    pass


@dataclass
class SaptConfig:
    grid_start: float = 0.05
    grid_stop: float = 0.95
    grid_step: float = 0.05
    beta_ewma: float = 0.3
    gamma_interval: int = 10
    initial_tau: float = 0.5
    subsample_fraction: float = 1.0

    def scheduler(self, seed: int = 0) -> ThresholdScheduler:
        return ThresholdScheduler(default_grid(self.grid_start, self.grid_stop, self.grid_step),
                                  self.beta_ewma, self.gamma_interval, self.initial_tau,
                                  self.subsample_fraction, seed)

    def problems(self) -> list:
        out = []
        if not 0 <= self.grid_start <= self.grid_stop <= 1 or self.grid_step <= 0:
            out.append("sapt grid needs 0 <= grid_start <= grid_stop <= 1 and grid_step > 0")
        if not 0 <= self.initial_tau <= 1:
            out.append("sapt.initial_tau must lie in [0, 1]")
        if not out:
            out += self.scheduler().problems()
        return out


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    loss: str = "pwl"
    threshold: str = "sapt"
    fixed_tau: float = 0.5
    eval_batch_size: int = 64
    aggregation: str = "mean"

    def problems(self) -> list:
        out = []
        if self.epochs < 1:
            out.append("train.epochs must be >= 1")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            out.append("train.batch_size and train.eval_batch_size must be >= 1")
        if self.lr < 0:
            out.append("train.lr must be non-negative")
        if self.loss not in LOSSES:
            out.append(f"train.loss must be one of {LOSSES}, got {self.loss!r}")
        if self.threshold not in THRESHOLDS:
            out.append(f"train.threshold must be one of {THRESHOLDS}, got {self.threshold!r}")
        if not 0 <= self.fixed_tau <= 1:
            out.append("train.fixed_tau must lie in [0, 1]")
        if self.aggregation not in ("mean", "max"):
            out.append("train.aggregation must be 'mean' or 'max'")
        return out


@dataclass
class TrainingReport:
    rows: list
    tau_history: list
    final_tau: float
    validation: dict
    test_clip: dict | None
    test_recording: dict | None
    frozen: list
    trainable: list
    smoothed_f1: dict = field(default_factory=dict)

    def metrics_json(self) -> dict:
        return {
            "tau": self.final_tau,
            "validation": self.validation,
            "test": {"clip": self.test_clip, "recording": self.test_recording},
            "tau_history": [{"epoch": e, "tau": t} for e, t in self.tau_history],
            "frozen_parameters": self.frozen,
        }


def predict_proba(model, X, batch_size: int = 64, threads: int = 1) -> np.ndarray:
    """Eval-mode probabilities; batches may run on worker threads, results kept in order."""
    if len(X) == 0:
        return np.zeros(0)
    chunks = [X[i:i + batch_size] for i in range(0, len(X), batch_size)]

    def run(chunk):
        with ad.no_grad():
            return model.forward(chunk, train=False).data.astype(np.float64)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return np.concatenate(parts)


def _bce_value(scores, labels) -> float:
    return float(bce_loss(ad.Tensor(np.asarray(scores, dtype=np.float64)), labels).data)


def evaluate_scores(scores, labels, tau: float) -> dict:
    counts = confusion_counts(scores, labels, tau)
    out = compute_metrics(counts).to_dict()
    out.update(counts.to_dict())
    out["tau"] = tau
    return out


def recording_scores(scores, record_ids, record_labels: dict, mode: str = "mean"):
    grouped = OrderedDict()
    for s, r in zip(scores, record_ids):
        grouped.setdefault(r, []).append(s)
    probs = np.array([aggregate_recording(v, 0.5, mode)[0] for v in grouped.values()])
    labels = np.array([record_labels[r] for r in grouped])
    return list(grouped), probs, labels


def train(model, data: dict, cfg: TrainConfig = TrainConfig(), pwl: PwlConfig = PwlConfig(),
          sapt: SaptConfig = SaptConfig(), seed: int = 0, threads: int = 1,
          on_epoch=None) -> TrainingReport:
    """Train ``model`` in place on ``data['train']``, scoring ``data['val']`` each epoch.

    ``data`` maps split names to ClipSets; ``test`` is optional and scored
    once at the end with the final threshold.
    """
    train_set, val_set = data.get("train"), data.get("val")
    if train_set is None or len(train_set) == 0:
        raise TrainingError("training set is empty")
    if val_set is None or len(val_set) == 0:
        raise TrainingError("validation set is empty")

    scheduler = sapt.scheduler(seed)
    tau = scheduler.current_tau if cfg.threshold == "sapt" else cfg.fixed_tau
    opt = AdamState(lr=cfg.lr)
    trainable = model.trainable_names()
    rows = []
    n = len(train_set)

    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng([seed, epoch]).permutation(n)
        losses, train_scores, train_labels = [], [], []
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            y = train_set.y[idx]
            try:
                probs = model.forward(train_set.X[idx], train=True)
                if cfg.loss == "pwl":
                    delta = tau if pwl.delta_source == "track_sapt" else pwl.fixed_delta
                    loss = pwl_loss(probs, y, pwl, delta)
                else:
                    loss = bce_loss(probs, y)
                model.zero_grad()
                ad.backward(loss)
            except FloatingPointError as exc:
                raise TrainingError(f"non-finite value at epoch {epoch}, batch {b}: {exc}") from None
            adam_step(model.params, opt, trainable)
            losses.append(float(loss.data) * len(idx))
            train_scores.append(probs.data.astype(np.float64))
            train_labels.append(y)

        val_scores = predict_proba(model, val_set.X, cfg.eval_batch_size, threads)
        val = evaluate_scores(val_scores, val_set.y, tau)
        train_acc = evaluate_scores(np.concatenate(train_scores), np.concatenate(train_labels), tau)["accuracy"]
        row = {"epoch": epoch, "train_loss": sum(losses) / n, "val_f1": val["f1"],
               "val_acc": val["accuracy"], "val_sens": val["sensitivity"],
               "val_spec": val["specificity"], "tau": tau, "train_acc": train_acc,
               "val_loss": _bce_value(val_scores, val_set.y)}
        rows.append(row)
        log.info("epoch %d loss %.4f val_f1 %.3f val_acc %.3f tau %.2f", epoch, row["train_loss"],
                 row["val_f1"], row["val_acc"], tau)
        if on_epoch is not None:
            on_epoch(row)

        if cfg.threshold == "sapt":
            sapt_update(scheduler, val_scores, val_set.y, epoch)
            tau = scheduler.current_tau

    val_scores = predict_proba(model, val_set.X, cfg.eval_batch_size, threads)
    validation = evaluate_scores(val_scores, val_set.y, tau)
    test_clip = test_rec = None
    test_set = data.get("test")
    if test_set is not None and len(test_set):
        scores = predict_proba(model, test_set.X, cfg.eval_batch_size, threads)
        test_clip = evaluate_scores(scores, test_set.y, tau)
        _, rprobs, rlabels = recording_scores(scores, test_set.record_ids, test_set.record_labels,
                                              cfg.aggregation)
        test_rec = evaluate_scores(rprobs, rlabels, tau)

    return TrainingReport(rows=rows, tau_history=list(scheduler.history), final_tau=tau,
                          validation=validation, test_clip=test_clip, test_recording=test_rec,
                          frozen=sorted(model.frozen), trainable=trainable,
                          smoothed_f1={str(k): v for k, v in sorted(scheduler.smoothed_f1.items())})
