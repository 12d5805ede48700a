"""Loss, optimizer, cross-validation, metrics, and sweep execution.

Training follows one fixed protocol: weighted focal loss over softmax
probabilities, Adam at lr 1e-4 with 1e-6 decay, batches of 32, 150 epochs,
and stratified 5-fold cross-validation over utterance ids. Test confusion
matrices are pooled across folds by summation before computing the
unweighted (UA) and weighted (WA) average accuracies and their mean (ACC).
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .autograd import Tensor, backward, softmax_lastdim
from .errors import (
    InvalidConfigError,
    InvalidInputError,
    SerForgeError,
    TrainingDivergedError,
    UndefinedRecallError,
)
from .model import Model, ModelConfig, build_model

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
PROB_FLOOR = 1e-12
DECAY_MODES = ("weight_decay", "lr_decay")


@dataclass(frozen=True)
class TrainConfig:
    """The full training protocol, explicit and serializable."""

    learning_rate: float = 1e-4
    weight_decay: float = 1e-6
    decay_mode: str = "weight_decay"  # how the 1e-6 decay couples in
    batch_size: int = 32
    epochs: int = 150
    gamma: float = 1.0
    folds: int = 5
    seed: int = 0
    precision: str = "single"

    def __post_init__(self):
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise InvalidConfigError("learning_rate must be > 0 and weight_decay >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise InvalidConfigError("batch_size and epochs must be positive")
        if self.gamma < 0:
            raise InvalidConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.folds < 2:
            raise InvalidConfigError(f"folds must be >= 2, got {self.folds}")
        if self.decay_mode not in DECAY_MODES:
            raise InvalidConfigError(f"decay_mode must be one of {DECAY_MODES}")
        if self.precision not in ("single", "double"):
            raise InvalidConfigError("precision must be 'single' or 'double'")

    @property
    def dtype(self):
        return np.float32 if self.precision == "single" else np.float64


@dataclass(frozen=True, eq=False)
class ClassWeights:
    """Per-class loss weights, normalized to mean 1."""

    w: np.ndarray


def class_weights(counts) -> ClassWeights:
    """Reciprocal-count weights: w_i = (1/counts_i) / mean_j(1/counts_j)."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size == 0:
        raise InvalidInputError(f"counts must be a non-empty vector, got shape {counts.shape}")
    if np.any(counts <= 0):
        raise InvalidInputError(f"every class needs at least one sample, got {counts}")
    inv = 1.0 / counts
    return ClassWeights(w=inv / inv.mean())


def weighted_focal_loss(probs: Tensor, targets, weights=None, gamma: float = 1.0) -> Tensor:
    """Mean over samples of -w_y * (1 - p_y)^gamma * ln(p_y).

    `probs` are softmax outputs (rows summing to 1); `targets` are class ids.
    p_y is floored at 1e-12 inside the log. gamma=0 with unit weights reduces
    to plain cross-entropy.
    """
    if probs.ndim != 2:
        raise InvalidInputError(f"probs must be (N, classes), got shape {probs.shape}")
    p = probs.data
    n, k = p.shape
    targets = np.asarray(targets)
    if targets.shape != (n,):
        raise InvalidInputError(f"targets must be shaped ({n},), got {targets.shape}")
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= k:
        raise InvalidInputError(f"targets outside class range 0..{k - 1}")
    if gamma < 0:
        raise InvalidConfigError(f"gamma must be >= 0, got {gamma}")
    if weights is None:
        w_vec = np.ones(k, dtype=np.float64)
    elif isinstance(weights, ClassWeights):
        w_vec = weights.w
    else:
        w_vec = np.asarray(weights, dtype=np.float64)
    if w_vec.shape != (k,):
        raise InvalidInputError(f"weights must be shaped ({k},), got {w_vec.shape}")

    rows = np.arange(n)
    py = p[rows, targets].astype(np.float64)
    wy = w_vec[targets]
    clamped = np.maximum(py, PROB_FLOOR)
    one_minus = 1.0 - py
    focal = one_minus**gamma if gamma != 0 else np.ones_like(py)
    logp = np.log(clamped)
    per_sample = -(wy * focal * logp)
    loss_value = np.asarray(per_sample.mean(), dtype=p.dtype)

    def backward_fn(g):
        upstream = float(g)
        with np.errstate(divide="ignore", invalid="ignore"):
            term1 = np.where(one_minus > 0.0,
                             gamma * one_minus ** (gamma - 1.0) * logp if gamma != 0 else 0.0,
                             0.0)
        dlogp = np.where(py > PROB_FLOOR, 1.0 / clamped, 0.0)
        dpy = wy * (term1 - focal * dlogp) / n * upstream
        grad = np.zeros_like(p)
        grad[rows, targets] = dpy.astype(p.dtype)
        if probs.requires_grad:
            if probs.grad is None:
                probs.grad = np.zeros_like(p)
            probs.grad += grad

    out = Tensor(loss_value)
    if probs.requires_grad:
        out.requires_grad = True
        out._parents = (probs,)
        out._backward_fn = backward_fn
    return out


@dataclass
class AdamState:
    """First/second moment estimates and the shared step counter."""

    m: dict
    v: dict
    t: int = 0


def init_adam(params) -> AdamState:
    return AdamState(
        m={name: np.zeros_like(p.data) for name, p in params},
        v={name: np.zeros_like(p.data) for name, p in params},
        t=0,
    )


def adam_step(params, state: AdamState, cfg: TrainConfig):
    """One Adam update over (name, tensor) pairs; reads each tensor's .grad."""
    state.t += 1
    lr = cfg.learning_rate
    if cfg.decay_mode == "lr_decay":
        lr = lr / (1.0 + cfg.weight_decay * (state.t - 1))
    bias1 = 1.0 - ADAM_BETA1**state.t
    bias2 = 1.0 - ADAM_BETA2**state.t
    for name, p in params:
        g = p.grad
        if g is None:
            raise InvalidInputError(f"parameter {name} has no gradient")
        if not np.isfinite(g).all():
            raise TrainingDivergedError(f"non-finite gradient in parameter {name}")
        if cfg.decay_mode == "weight_decay" and cfg.weight_decay:
            g = g + cfg.weight_decay * p.data
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        m_hat = m / bias1
        v_hat = v / bias2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)).astype(p.dtype)


@dataclass(eq=False)
class ConfusionMatrix:
    """Row = true class, column = predicted class."""

    counts: np.ndarray

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(counts=np.zeros((num_classes, num_classes), dtype=np.int64))

    def add_batch(self, true_labels, predicted):
        for t, p in zip(np.asarray(true_labels), np.asarray(predicted)):
            self.counts[int(t), int(p)] += 1

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(counts=self.counts + other.counts)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def per_class_recall(self) -> np.ndarray:
        sums = self.row_sums()
        if np.any(sums == 0):
            raise UndefinedRecallError("a class has zero support in the confusion matrix")
        return np.diag(self.counts) / sums


@dataclass(frozen=True)
class Metrics:
    """Unweighted average recall, weighted accuracy, and their mean."""

    ua: float
    wa: float
    acc: float

    def as_dict(self) -> dict:
        return {"ua": self.ua, "wa": self.wa, "acc": self.acc}


def metrics_from_confusion(cm: ConfusionMatrix) -> Metrics:
    """Exact rational UA/WA/ACC, converted to float at the end."""
    counts = cm.counts
    k = cm.num_classes
    row_sums = cm.row_sums()
    if np.any(row_sums == 0):
        raise UndefinedRecallError("every class needs at least one test sample")
    ua = Fraction(0)
    for i in range(k):
        ua += Fraction(int(counts[i, i]), int(row_sums[i]))
    ua /= k
    wa = Fraction(int(np.trace(counts)), int(counts.sum()))
    acc = (ua + wa) / 2
    return Metrics(ua=float(ua), wa=float(wa), acc=float(acc))


def make_folds(entries, folds: int = 5, seed: int = 0):
    """Stratified random partition of (utterance_id, label) pairs.

    Returns a list of (train_ids, test_ids); every id appears in exactly one
    test fold, and per-fold class counts stay within one sample of an even
    split.
    """
    entries = list(entries)
    if len(entries) < folds:
        raise InvalidInputError(f"need at least {folds} utterances, got {len(entries)}")
    by_label: dict = {}
    for utt_id, label in entries:
        by_label.setdefault(label, []).append(utt_id)

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), len(entries)]))
    test_sets = [[] for _ in range(folds)]
    for class_index, label in enumerate(sorted(by_label)):
        ids = by_label[label]
        if len(ids) < folds:
            warnings.warn(
                f"class {label} has only {len(ids)} utterances for {folds} folds; "
                "spreading best-effort",
                stacklevel=2,
            )
        order = rng.permutation(len(ids))
        offset = class_index % folds
        for j, idx in enumerate(order):
            test_sets[(j + offset) % folds].append(ids[idx])

    all_ids = [utt_id for utt_id, _ in entries]
    folds_out = []
    for k in range(folds):
        test = set(test_sets[k])
        train_ids = [u for u in all_ids if u not in test]
        test_ids = [u for u in all_ids if u in test]
        folds_out.append((train_ids, test_ids))
    return folds_out


def fold_seed(base_seed: int, fold_index: int) -> int:
    """Deterministic per-fold RNG seed, independent of execution order."""
    return int(np.random.SeedSequence([int(base_seed), int(fold_index)]).generate_state(1)[0])


@dataclass(eq=False)
class FoldResult:
    model: Model
    confusion: ConfusionMatrix
    loss_curve: list
    train_accuracy: float


def _stack_items(items, dtype):
    data = np.stack([spec for spec, _ in items]).astype(dtype, copy=False)
    labels = np.array([label for _, label in items], dtype=np.int64)
    return data[:, None, :, :], labels


def predict_labels(model: Model, data: np.ndarray, batch_size: int) -> np.ndarray:
    preds = []
    for start in range(0, data.shape[0], batch_size):
        logits = model.forward(data[start:start + batch_size], mode="eval")
        preds.append(np.argmax(logits.data, axis=1))
    return np.concatenate(preds)


def train_fold(model_cfg: ModelConfig, train_cfg: TrainConfig, train_items, test_items,
               seed: int | None = None) -> FoldResult:
    """Train on one fold and evaluate on its held-out test items.

    Items are (spectrogram, label) pairs. Mini-batches are reshuffled each
    epoch; batchnorm runs in train mode while fitting and eval mode for the
    final train-accuracy and test passes. The final-epoch model is returned,
    with no early stopping.
    """
    if seed is None:
        seed = train_cfg.seed
    ss = np.random.SeedSequence(int(seed))
    model_seed, shuffle_seed = (int(s) for s in ss.generate_state(2))
    rng = np.random.default_rng(shuffle_seed)
    dtype = train_cfg.dtype

    train_x, train_y = _stack_items(train_items, dtype)
    test_x, test_y = _stack_items(test_items, dtype)

    model = build_model(model_cfg, model_seed, dtype=dtype)
    params = model.parameters()
    adam = init_adam(params)

    counts = np.bincount(train_y, minlength=model_cfg.num_classes)
    weights = class_weights(counts)

    n = train_x.shape[0]
    loss_curve = []
    for epoch in range(train_cfg.epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, train_cfg.batch_size):
            batch_idx = perm[start:start + train_cfg.batch_size]
            batch = np.ascontiguousarray(train_x[batch_idx])
            targets = train_y[batch_idx]
            model.zero_grad()
            logits = model.forward(batch, mode="train")
            probs = softmax_lastdim(logits)
            loss = weighted_focal_loss(probs, targets, weights, train_cfg.gamma)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss {value} at epoch {epoch + 1}, batch {start // train_cfg.batch_size}"
                )
            backward(loss, params=[t for _, t in params])
            adam_step(params, adam, train_cfg)
            epoch_loss += value * len(batch_idx)
        loss_curve.append(epoch_loss / n)

    train_pred = predict_labels(model, train_x, train_cfg.batch_size)
    train_accuracy = float(np.mean(train_pred == train_y))

    confusion = ConfusionMatrix.zeros(model_cfg.num_classes)
    test_pred = predict_labels(model, test_x, train_cfg.batch_size)
    confusion.add_batch(test_y, test_pred)
    return FoldResult(model=model, confusion=confusion, loss_curve=loss_curve,
                      train_accuracy=train_accuracy)


@dataclass(eq=False)
class CVResult:
    metrics: Metrics
    pooled_confusion: ConfusionMatrix
    fold_results: list
    folds: list


def cross_validate(model_cfg: ModelConfig, train_cfg: TrainConfig, corpus,
                   threads: int = 1) -> CVResult:
    """Stratified k-fold training; metrics come from the summed test matrices.

    `corpus` must expose `entries` as (utterance_id, label) pairs and
    `fold_items(folds, fold_index)` returning (train_items, test_items).
    """
    folds = make_folds(corpus.entries, train_cfg.folds, train_cfg.seed)

    def run(k: int) -> FoldResult:
        train_items, test_items = corpus.fold_items(folds, k)
        return train_fold(model_cfg, train_cfg, train_items, test_items,
                          seed=fold_seed(train_cfg.seed, k))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            fold_results = list(pool.map(run, range(len(folds))))
    else:
        fold_results = [run(k) for k in range(len(folds))]

    pooled = ConfusionMatrix.zeros(model_cfg.num_classes)
    for result in fold_results:
        pooled = pooled + result.confusion
    return CVResult(metrics=metrics_from_confusion(pooled), pooled_confusion=pooled,
                    fold_results=fold_results, folds=folds)


@dataclass(eq=False)
class SweepPoint:
    """One grid entry: a model configuration against one corpus selection."""

    label: str
    version: int
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    corpus: object


def run_sweep(points, threads: int = 1, on_result=None):
    """Cross-validate every grid point; failures are recorded, not fatal.

    Returns rows sorted by (version, label), each a dict with version,
    config, ua/wa/acc, parameter count, seed, and an error field.
    """
    if not points:
        raise InvalidInputError("sweep grid is empty")
    rows = []
    for point in points:
        row = {
            "version": point.version,
            "config": point.label,
            "ua": None,
            "wa": None,
            "acc": None,
            "params": build_model(point.model_cfg, 0).parameter_count(),
            "seed": point.train_cfg.seed,
            "error": "",
        }
        try:
            result = cross_validate(point.model_cfg, point.train_cfg, point.corpus,
                                    threads=threads)
            row.update(result.metrics.as_dict())
        except SerForgeError as exc:
            row["error"] = str(exc)
        rows.append(row)
        if on_result is not None:
            on_result(row)
    rows.sort(key=lambda r: (r["version"], r["config"]))
    return rows
