"""Objective, optimizer, imbalance-aware sampling, metrics and the subject-split training protocol."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from tranet import numcore as nc
from tranet.network import STAGES, ModelConfig, TRANet, build_model, forward, freeze
from tranet.numcore.init import substream
from tranet.region import AU_ORDER, AUGrouping, LandmarkSet, feature_center_row

MAX_INTENSITY = 5


class ProtocolError(ValueError):
    """Evaluation protocol violated, e.g. a subject appears on both sides of a split."""


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


# ---------------------------------------------------------------------------
# samples


@dataclass
class LabeledSample:
    sample_id: str
    image: np.ndarray  # (3, S, S) in [0, 1]
    intensities: np.ndarray  # (8,) ints in 0..5, AU_ORDER
    subject: str
    landmarks: LandmarkSet

    def __post_init__(self):
        self.intensities = np.asarray(self.intensities, dtype=np.int64)
        if self.intensities.shape != (len(AU_ORDER),):
            raise ValueError(f"{self.sample_id}: expected {len(AU_ORDER)} intensities, got {self.intensities.shape}")
        if self.intensities.min() < 0 or self.intensities.max() > MAX_INTENSITY:
            raise ValueError(f"{self.sample_id}: intensities must lie in 0..{MAX_INTENSITY}, got {self.intensities.tolist()}")
        if not np.all(np.isfinite(self.image)):
            raise ValueError(f"{self.sample_id}: image has non-finite pixels")


@dataclass
class SampleSet:
    """Column-wise view of a list of samples, convenient for batching."""

    ids: list[str]
    images: np.ndarray  # (N, 3, S, S)
    intensities: np.ndarray  # (N, 8)
    subjects: np.ndarray  # (N,) str
    landmarks: np.ndarray  # (N, 66, 2)

    @classmethod
    def from_samples(cls, samples: Sequence[LabeledSample]) -> "SampleSet":
        if not samples:
            raise ValueError("no samples")
        return cls(
            ids=[s.sample_id for s in samples],
            images=np.stack([s.image for s in samples]),
            intensities=np.stack([s.intensities for s in samples]),
            subjects=np.array([s.subject for s in samples]),
            landmarks=np.stack([s.landmarks.points for s in samples]),
        )

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def size(self) -> int:
        return self.images.shape[-1]

    def subset(self, index) -> "SampleSet":
        index = np.asarray(index)
        return SampleSet(
            [self.ids[i] for i in index], self.images[index], self.intensities[index], self.subjects[index], self.landmarks[index]
        )

    def center_rows(self, feature_h: int) -> np.ndarray:
        return np.array(
            [feature_center_row(LandmarkSet(lm), feature_h, self.size) for lm in self.landmarks], dtype=np.int64
        )


def binarize(intensities, threshold: int = 2) -> np.ndarray:
    """Positive where intensity is at or above ``threshold``."""
    if not 1 <= threshold <= MAX_INTENSITY:
        raise ValueError(f"binarization threshold must be in 1..{MAX_INTENSITY}, got {threshold}")
    return np.asarray(intensities) >= threshold


# ---------------------------------------------------------------------------
# sampling and augmentation


@dataclass
class SamplerState:
    positive_counts: np.ndarray  # (A,)
    au_weights: np.ndarray  # (A,)
    probs: np.ndarray  # (N,)
    seed: int
    rng: np.random.Generator = field(repr=False)
    flip_rng: np.random.Generator = field(repr=False)

    def draw(self, n: int) -> np.ndarray:
        return self.rng.choice(len(self.probs), size=n, replace=True, p=self.probs)


def frame_scores(labels: np.ndarray) -> np.ndarray:
    """Inverse-frequency score per frame; frames with no positive AU get the smallest positive score."""
    labels = np.asarray(labels, dtype=bool)
    weights = 1.0 / np.maximum(1, labels.sum(axis=0))
    scores = labels @ weights
    has_pos = labels.any(axis=1)
    floor = scores[has_pos].min() if has_pos.any() else 1.0
    return np.where(has_pos, scores, floor)


def build_sampler(labels: np.ndarray, seed: int = 0) -> SamplerState:
    labels = np.asarray(labels, dtype=bool)
    if labels.ndim != 2 or labels.shape[0] == 0:
        raise ValueError("cannot build a sampler over an empty training set")
    scores = frame_scores(labels)
    counts = labels.sum(axis=0)
    return SamplerState(
        positive_counts=counts,
        au_weights=1.0 / np.maximum(1, counts),
        probs=scores / scores.sum(),
        seed=seed,
        rng=substream(seed, "sampler"),
        flip_rng=substream(seed, "flip"),
    )


def flip_images(images: np.ndarray) -> np.ndarray:
    return images[..., ::-1].copy()


def flip_landmarks(points: np.ndarray, size: int) -> np.ndarray:
    out = np.array(points, dtype=np.float64, copy=True)
    out[..., 0] = (size - 1) - out[..., 0]
    return out


@dataclass
class Batch:
    index: np.ndarray
    images: np.ndarray
    labels: np.ndarray  # (N, 8) bool
    landmarks: np.ndarray
    flipped: np.ndarray


def next_batch(
    sampler: SamplerState, data: SampleSet, batch_size: int = 64, flip_prob: float = 0.5, threshold: int = 2
) -> Batch:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    idx = sampler.draw(batch_size)
    images = data.images[idx].copy()
    landmarks = data.landmarks[idx].copy()
    flipped = sampler.flip_rng.random(batch_size) < flip_prob
    if flipped.any():
        images[flipped] = flip_images(images[flipped])
        landmarks[flipped] = flip_landmarks(landmarks[flipped], data.size)
    return Batch(idx, images, binarize(data.intensities[idx], threshold), landmarks, flipped)


# ---------------------------------------------------------------------------
# objective and optimizer


def multilabel_bce(logits: Sequence[nc.Tensor], labels: np.ndarray, grouping: AUGrouping | None = None) -> nc.Tensor:
    """Per-branch mean BCE over batch and group, summed over branches."""
    grouping = grouping or AUGrouping()
    labels = np.asarray(labels)
    branches = ("upper", "middle", "lower")
    if len(logits) != len(branches):
        raise ValueError(f"expected {len(branches)} logit tensors, got {len(logits)}")
    total = None
    for name, lg in zip(branches, logits):
        cols = grouping.columns(name)
        if lg.shape != (labels.shape[0], len(cols)):
            raise nc.ShapeError(f"{name} logits {lg.shape} do not match labels ({labels.shape[0]}, {len(cols)})")
        term = nc.bce_with_logits(lg, labels[:, cols])
        total = term if total is None else nc.add(total, term)
    return total


def sgd_step(params, grads, velocities, lr=0.001, momentum=0.9, weight_decay=0.001) -> None:
    """In place: ``v = m*v + g + wd*p``; ``p -= lr*v``."""
    for p, g, v in zip(params, grads, velocities):
        v *= momentum
        v += g
        v += weight_decay * p
        p -= lr * v


class SGD:
    """Momentum SGD with coupled weight decay; parameters without gradients are left alone."""

    def __init__(self, params, lr=0.001, momentum=0.9, weight_decay=0.001):
        self.params = list(params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        live = [i for i, p in enumerate(self.params) if p.requires_grad and p.grad is not None]
        sgd_step(
            [self.params[i].data for i in live],
            [self.params[i].grad for i in live],
            [self.velocity[i] for i in live],
            self.lr,
            self.momentum,
            self.weight_decay,
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# metrics


@dataclass
class EvalReport:
    f1: np.ndarray  # percent per AU
    accuracy: np.ndarray  # percent per AU
    fold: int | None = None
    aus: tuple[int, ...] = AU_ORDER
    epoch: int | None = None

    @property
    def mean_f1(self) -> float:
        return float(np.mean(self.f1))

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.accuracy))

    def to_dict(self) -> dict:
        return {
            "fold": self.fold,
            "epoch": self.epoch,
            "aus": list(self.aus),
            "f1": [float(v) for v in self.f1],
            "accuracy": [float(v) for v in self.accuracy],
            "mean_f1": self.mean_f1,
            "mean_accuracy": self.mean_accuracy,
        }


def confusion(pred: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    pred, labels = np.asarray(pred, dtype=bool), np.asarray(labels, dtype=bool)
    if pred.shape != labels.shape:
        raise ValueError(f"prediction shape {pred.shape} != label shape {labels.shape}")
    tp = (pred & labels).sum(axis=0)
    fp = (pred & ~labels).sum(axis=0)
    fn = (~pred & labels).sum(axis=0)
    tn = (~pred & ~labels).sum(axis=0)
    return tp, fp, fn, tn


def f1_and_accuracy(pred: np.ndarray, labels: np.ndarray, fold: int | None = None, aus=AU_ORDER) -> EvalReport:
    """Per-AU F1 and accuracy in percent; F1 is 0 when precision or recall is undefined."""
    tp, fp, fn, tn = (c.astype(np.float64) for c in confusion(pred, labels))
    n = tp + fp + fn + tn
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        recall = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
        f1 = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
        acc = np.where(n > 0, 100 * (tp + tn) / n, 0.0)
    return EvalReport(100 * f1, acc, fold, tuple(aus))


def mean_report(reports: Sequence[EvalReport]) -> EvalReport:
    return EvalReport(
        np.mean([r.f1 for r in reports], axis=0), np.mean([r.accuracy for r in reports], axis=0), None, reports[0].aus
    )


def write_metrics_csv(path: str | os.PathLike, reports: Sequence[EvalReport]) -> None:
    """One row per (fold, AU)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fold", "au", "f1", "accuracy"])
        for i, r in enumerate(reports):
            fold = r.fold if r.fold is not None else i
            for au, f1, acc in zip(r.aus, r.f1, r.accuracy):
                w.writerow([fold, f"AU{au}", repr(float(f1)), repr(float(acc))])


def format_table(rows: Sequence[tuple[str, EvalReport]]) -> str:
    """F1 and accuracy blocks, one line per labelled report, AUs as columns plus the average."""
    aus = rows[0][1].aus
    head = ["", *[f"AU{a}" for a in aus], "Avg"]
    width = max(12, *(len(name) + 1 for name, _ in rows))

    def line(cells):
        return cells[0].ljust(width) + "".join(c.rjust(7) for c in cells[1:])

    out = []
    for title, attr, mean in (("F1-frame (%)", "f1", "mean_f1"), ("Accuracy (%)", "accuracy", "mean_accuracy")):
        out.append(title)
        out.append(line(head))
        for name, r in rows:
            out.append(line([name, *[f"{v:.1f}" for v in getattr(r, attr)], f"{getattr(r, mean):.1f}"]))
        out.append("")
    return "\n".join(out).rstrip() + "\n"


# ---------------------------------------------------------------------------
# configuration


ABLATION_FLAGS = ("enable_hard_mask", "enable_cbam", "enable_channel_att", "enable_spatial_att", "cbam_residual")


@dataclass
class TrainConfig:
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.001
    batch_size: int = 64
    batches_per_epoch: int = 100
    patience: int = 10
    epoch_cap: int = 100
    seed: int = 0
    binarize_threshold: int = 2
    warmup_epochs: int = 0
    flip_prob: float = 0.5
    freeze: list = field(default_factory=lambda: ["stem", "stage2"])
    precision: str = "float32"
    eval_batch_size: int = 256
    # model-config overrides, e.g. {"enable_cbam": false}
    ablation: dict = field(default_factory=dict)

    def violations(self) -> list[str]:
        out = []
        if not self.lr > 0:
            out.append("lr must be > 0")
        if not 0 <= self.momentum < 1:
            out.append("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            out.append("weight_decay must be >= 0")
        if not (isinstance(self.seed, int) and self.seed >= 0):
            out.append(f"seed must be a non-negative integer, got {self.seed!r}")
        for name in ("batch_size", "batches_per_epoch", "patience", "eval_batch_size"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1")
        if self.epoch_cap < 0 or self.warmup_epochs < 0:
            out.append("epoch_cap and warmup_epochs must be >= 0")
        if not 1 <= self.binarize_threshold <= MAX_INTENSITY:
            out.append(f"binarize_threshold must be in 1..{MAX_INTENSITY}")
        if not 0 <= self.flip_prob <= 1:
            out.append("flip_prob must be in [0, 1]")
        if self.precision not in ("float32", "float64"):
            out.append("precision must be float32 or float64")
        bad = set(self.freeze) - set(STAGES)
        if bad:
            out.append(f"unknown freeze stage(s) {sorted(bad)}")
        bad = set(self.ablation) - set(ABLATION_FLAGS)
        if bad:
            out.append(f"unknown ablation flag(s) {sorted(bad)}; valid: {', '.join(ABLATION_FLAGS)}")
        return out

    def validate(self) -> None:
        problems = self.violations()
        if problems:
            from tranet.network import ConfigError

            raise ConfigError("invalid training config: " + "; ".join(problems))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        from tranet.network import ConfigError

        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown training config field(s): {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | os.PathLike) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def apply_ablation(self, cfg: ModelConfig) -> ModelConfig:
        return dataclasses.replace(cfg, **self.ablation) if self.ablation else cfg


# ---------------------------------------------------------------------------
# protocol


def check_disjoint(train: SampleSet, test: SampleSet) -> None:
    shared = set(train.subjects.tolist()) & set(test.subjects.tolist())
    if shared:
        raise ProtocolError(f"subject(s) {sorted(shared)} appear in both training and test splits")


def predict_logits(model: TRANet, images: np.ndarray, center_rows: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """(N, 8) logits in AU_ORDER."""
    grouping = model.cfg.grouping
    order = [AU_ORDER.index(a) for a in grouping.all_aus]
    out = np.empty((len(images), len(AU_ORDER)), dtype=np.float64)
    with nc.no_grad():
        for start in range(0, len(images), batch_size):
            stop = start + batch_size
            up, mid, low, _ = forward(model, nc.Tensor(images[start:stop]), center_rows[start:stop])
            out[start:stop, order] = np.concatenate([up.data, mid.data, low.data], axis=1)
    return out


def evaluate(model: TRANet, data: SampleSet, threshold: int = 2, fold=None, batch_size: int = 256) -> EvalReport:
    rows = data.center_rows(model.cfg.decoded_size)
    logits = predict_logits(model, data.images, rows, batch_size)
    return f1_and_accuracy(logits > 0, binarize(data.intensities, threshold), fold)


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    mean_f1: float | None
    seconds: float


@dataclass
class FoldResult:
    report: EvalReport  # best epoch
    history: list[EpochLog]
    best_epoch: int
    stopped_early: bool
    initial_loss: float | None
    final_loss: float | None
    state: dict | None = field(default=None, repr=False)  # weights at the best epoch

    @property
    def epochs_run(self) -> int:
        return len(self.history)


def run_fold(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    trainset: SampleSet,
    testset: SampleSet,
    fold: int | None = None,
    log: Callable[[str], None] | None = None,
    keep_state: bool = False,
) -> FoldResult:
    """Train on one split, evaluating each epoch and keeping the best mean-F1 epoch."""
    train_cfg.validate()
    check_disjoint(trainset, testset)
    cfg = train_cfg.apply_ablation(model_cfg)
    cfg.validate()
    if trainset.size != cfg.input_size:
        raise nc.ShapeError(f"images are {trainset.size}px but the model expects {cfg.input_size}px")
    log = log or (lambda msg: None)
    thr = train_cfg.binarize_threshold

    with nc.precision(train_cfg.precision):
        model = build_model(cfg, train_cfg.seed)
        freeze(model, train_cfg.freeze)
        opt = SGD(model.parameters(), train_cfg.lr, train_cfg.momentum, train_cfg.weight_decay)
        sampler = build_sampler(binarize(trainset.intensities, thr), train_cfg.seed)
        dtype = nc.get_dtype()
        images = trainset.images.astype(dtype, copy=False)
        train_view = dataclasses.replace(trainset, images=images)
        test_view = dataclasses.replace(testset, images=testset.images.astype(dtype, copy=False))
        h = cfg.decoded_size

        best = evaluate(model, test_view, thr, fold, train_cfg.eval_batch_size) if train_cfg.epoch_cap == 0 else None
        best_epoch = 0
        best_state = model.state_dict() if keep_state else None
        history: list[EpochLog] = []
        stale = 0
        initial_loss = final_loss = None
        stopped = False
        for epoch in range(1, train_cfg.epoch_cap + 1):
            t0 = time.perf_counter()
            losses = []
            for _ in range(train_cfg.batches_per_epoch):
                batch = next_batch(sampler, train_view, train_cfg.batch_size, train_cfg.flip_prob, thr)
                rows = [feature_center_row(LandmarkSet(lm), h, cfg.input_size) for lm in batch.landmarks]
                opt.zero_grad()
                up, mid, low, _ = forward(model, nc.Tensor(batch.images), rows)
                loss = multilabel_bce([up, mid, low], batch.labels, cfg.grouping)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericError(f"non-finite training loss {value!r} at epoch {epoch}; lower the learning rate")
                if initial_loss is None:
                    initial_loss = value
                losses.append(value)
                if loss.requires_grad:
                    nc.backward(loss)
                    opt.step()
            final_loss = losses[-1]
            for p in model.parameters():
                if not np.all(np.isfinite(p.data)):
                    raise NumericError(f"non-finite parameter {p.name or ''} after epoch {epoch}")
            score = None
            if epoch > train_cfg.warmup_epochs:
                report = evaluate(model, test_view, thr, fold, train_cfg.eval_batch_size)
                report.epoch = epoch
                score = report.mean_f1
                if best is None or score > best.mean_f1:
                    best, best_epoch, stale = report, epoch, 0
                    if keep_state:
                        best_state = model.state_dict()
                else:
                    stale += 1
            history.append(EpochLog(epoch, float(np.mean(losses)), score, time.perf_counter() - t0))
            log(
                f"fold {fold} epoch {epoch}: loss {np.mean(losses):.4f}"
                + (f" mean F1 {score:.1f}" if score is not None else "")
            )
            if stale >= train_cfg.patience:
                stopped = True
                break
        if best is None:  # every epoch fell inside the warmup
            best = evaluate(model, test_view, thr, fold, train_cfg.eval_batch_size)
            best_epoch = len(history)
            best.epoch = best_epoch
            if keep_state:
                best_state = model.state_dict()
    return FoldResult(best, history, best_epoch, stopped, initial_loss, final_loss, best_state)


def split_subjects(subjects, folds: int, seed: int) -> list[list[str]]:
    """Seeded shuffle of the distinct subjects into ``folds`` near-equal groups."""
    unique = sorted(set(np.asarray(subjects).tolist()))
    if folds < 2:
        raise ProtocolError("cross-validation needs at least 2 folds")
    if len(unique) < folds:
        raise ProtocolError(f"{len(unique)} subject(s) cannot fill {folds} subject-disjoint folds")
    order = substream(seed, "folds").permutation(len(unique))
    return [[unique[i] for i in part] for part in np.array_split(order, folds)]


@dataclass
class CVResult:
    folds: list[FoldResult]
    splits: list[list[str]]

    @property
    def reports(self) -> list[EvalReport]:
        return [f.report for f in self.folds]

    @property
    def mean(self) -> EvalReport:
        return mean_report(self.reports)


def _fold_job(args, log=None):
    model_cfg, train_cfg, data, test_subjects, fold, keep_state = args
    test_mask = np.isin(data.subjects, test_subjects)
    train, test = data.subset(np.flatnonzero(~test_mask)), data.subset(np.flatnonzero(test_mask))
    return run_fold(model_cfg, train_cfg, train, test, fold, log, keep_state)


def cross_validate(
    data: SampleSet,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    folds: int = 3,
    jobs: int = 1,
    log: Callable[[str], None] | None = None,
    keep_state: bool = False,
) -> CVResult:
    """Each subject group is the test split exactly once; folds are independent and may run in parallel."""
    splits = split_subjects(data.subjects, folds, train_cfg.seed)
    work = [(model_cfg, train_cfg, data, s, i + 1, keep_state) for i, s in enumerate(splits)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_fold_job, work))
    else:
        results = [_fold_job(args, log) for args in work]
    return CVResult(results, splits)
