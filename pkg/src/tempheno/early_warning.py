"""Early-warning prediction of hybrid sub-phenotypes from the first hours of data.

Features are five summary statistics over seven windows of every variable;
the classifier is multinomial logistic regression trained by full-batch
gradient descent.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from tempheno.errors import ConfigError, DataError

logger = logging.getLogger(__name__)

STATISTICS = ("max", "min", "mean", "std", "skew")
# (name, side, percent); side None means the whole (truncated) sequence
WINDOWS = (
    ("full", None, 100),
    ("first10", "first", 10),
    ("first25", "first", 25),
    ("first50", "first", 50),
    ("last10", "last", 10),
    ("last25", "last", 25),
    ("last50", "last", 50),
)
DEFAULT_HORIZONS = (12, 24, 48, 120)


def window_length(horizon: int, percent: int) -> int:
    """``max(1, round_half_up(percent/100 * horizon))`` in exact integer arithmetic."""
    return max(1, (2 * horizon * percent + 100) // 200)


def feature_names(variables: Sequence[str]) -> list[str]:
    """Column names in variable-major, window, statistic-minor order."""
    return [f"{v}__{w}__{s}" for v in variables for w, _, _ in WINDOWS for s in STATISTICS]


def _window_stats(seg: np.ndarray) -> np.ndarray:
    """Statistics over the last axis of ``seg`` (N, P, L) -> (N, P, 5)."""
    mx = seg.max(axis=-1)
    mn = seg.min(axis=-1)
    mean = seg.mean(axis=-1)
    dev = seg - mean[..., None]
    m2 = np.mean(dev**2, axis=-1)
    m3 = np.mean(dev**3, axis=-1)
    flat = mx == mn
    std = np.where(flat, 0.0, np.sqrt(m2))
    den = m2**1.5  # may underflow to 0 for a near-constant window
    skew = np.divide(m3, den, out=np.zeros_like(m3), where=~flat & (den > 0))
    return np.stack([mx, mn, mean, std, skew], axis=-1)


def extract_features(values: np.ndarray, horizon: int) -> np.ndarray:
    """(N, P, T) complete values -> (N, P * 7 * 5) features from hours [0, horizon)."""
    values = np.asarray(values, dtype=float)
    if values.ndim != 3:
        raise DataError(f"expected (N, P, T) values, got shape {values.shape}")
    if horizon < 1:
        raise DataError(f"horizon must be >= 1, got {horizon}")
    if horizon > values.shape[2]:
        raise DataError(f"horizon {horizon} exceeds T={values.shape[2]}")
    if not np.all(np.isfinite(values[:, :, :horizon])):
        raise DataError("feature extraction needs finite (imputed) values")
    x = values[:, :, :horizon]
    blocks = []
    for _, side, pct in WINDOWS:
        length = horizon if side is None else window_length(horizon, pct)
        seg = x[:, :, :length] if side in (None, "first") else x[:, :, horizon - length:]
        blocks.append(_window_stats(seg))
    feats = np.stack(blocks, axis=2)  # (N, P, W, S)
    return feats.reshape(values.shape[0], -1)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.1
    iters: int = 500
    l2: float = 1e-4

    def problems(self) -> list[str]:
        out = []
        if not self.lr > 0:
            out.append(f"predict.lr must be > 0, got {self.lr}")
        if self.iters < 0:
            out.append(f"predict.iters must be >= 0, got {self.iters}")
        if self.l2 < 0:
            out.append(f"predict.l2 must be >= 0, got {self.l2}")
        return out


@dataclass
class LogisticModel:
    weights: np.ndarray  # (C, F + 1), last column is the bias
    classes: np.ndarray
    scaler_mean: np.ndarray
    scaler_std: np.ndarray
    config: TrainConfig = field(default_factory=TrainConfig)

    def standardize(self, X: np.ndarray) -> np.ndarray:
        return (X - self.scaler_mean) / self.scaler_std

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return softmax(_augment(self.standardize(X)) @ self.weights.T)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.classes[np.argmax(self.predict_proba(X), axis=1)]

    def to_dict(self) -> dict:
        return {
            "classes": [int(c) for c in self.classes],
            "weights": self.weights.tolist(),
            "scaler": {"mean": self.scaler_mean.tolist(), "std": self.scaler_std.tolist()},
            "config": asdict(self.config),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LogisticModel":
        return cls(np.asarray(data["weights"], dtype=float), np.asarray(data["classes"]),
                   np.asarray(data["scaler"]["mean"], dtype=float),
                   np.asarray(data["scaler"]["std"], dtype=float), TrainConfig(**data["config"]))


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _augment(X: np.ndarray) -> np.ndarray:
    return np.hstack([X, np.ones((X.shape[0], 1))])


def loss_and_grad(W: np.ndarray, Xa: np.ndarray, Y: np.ndarray, l2: float) -> tuple[float, np.ndarray]:
    """Mean cross-entropy plus ``l2/2 * |W[:, :-1]|^2`` and its gradient.

    ``Xa`` carries a trailing ones column; ``Y`` is one-hot (N, C). The bias is
    not penalized.
    """
    n = Xa.shape[0]
    P = softmax(Xa @ W.T)
    loss = -np.sum(Y * np.log(np.clip(P, 1e-300, None))) / n
    loss += 0.5 * l2 * np.sum(W[:, :-1] ** 2)
    grad = (P - Y).T @ Xa / n
    grad[:, :-1] += l2 * W[:, :-1]
    return float(loss), grad


def train(features: np.ndarray, labels: np.ndarray, config: TrainConfig | None = None) -> LogisticModel:
    """Fit multinomial LR from zero weights on internally standardized features."""
    config = config or TrainConfig()
    problems = config.problems()
    if problems:
        raise ConfigError(problems)
    X = np.asarray(features, dtype=float)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if classes.size < 2:
        raise DataError("training needs at least two distinct classes")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    Xa = _augment((X - mean) / std)
    Y = (labels[:, None] == classes[None, :]).astype(float)
    W = np.zeros((classes.size, Xa.shape[1]))
    for _ in range(config.iters):
        _, grad = loss_and_grad(W, Xa, Y, config.l2)
        W -= config.lr * grad
    return LogisticModel(W, classes, mean, std, config)


def average_precision(y_true: np.ndarray, scores: np.ndarray) -> float:
    """Step-wise area under the precision-recall curve, sum_n (R_n - R_{n-1}) P_n.

    Thresholds are the distinct scores, so tied scores enter together.
    """
    y_true = np.asarray(y_true).astype(bool)
    scores = np.asarray(scores, dtype=float)
    n_pos = int(y_true.sum())
    if n_pos == 0:
        raise DataError("average precision is undefined without positives")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], y_true[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    auprc: float
    classes: np.ndarray
    per_class: dict = field(default_factory=dict)
    confusion: np.ndarray | None = None  # rows: truth, normalized


def evaluate(model: LogisticModel, features: np.ndarray, labels: np.ndarray) -> MetricsReport:
    """Accuracy plus macro one-vs-rest precision, recall and AUPRC.

    Precision and recall are averaged over classes that occur in the truth or
    the predictions (an empty ratio counts as 0); AUPRC over classes with
    positives in ``labels``.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise DataError("empty evaluation set")
    proba = model.predict_proba(features)
    pred = model.classes[np.argmax(proba, axis=1)]
    classes = model.classes
    per = {"precision": [], "recall": [], "auprc": []}
    confusion = np.zeros((classes.size, classes.size))
    for ci, c in enumerate(classes):
        truth = labels == c
        called = pred == c
        tp = np.sum(truth & called)
        per["precision"].append(tp / called.sum() if called.any() else 0.0)
        per["recall"].append(tp / truth.sum() if truth.any() else 0.0)
        per["auprc"].append(average_precision(truth, proba[:, ci]) if truth.any() else np.nan)
        if truth.any():
            confusion[ci] = [(pred[truth] == c2).mean() for c2 in classes]
    active = np.array([np.any(labels == c) or np.any(pred == c) for c in classes])
    auprc = np.asarray(per["auprc"])
    return MetricsReport(
        accuracy=float(np.mean(pred == labels)),
        precision=float(np.mean(np.asarray(per["precision"])[active])),
        recall=float(np.mean(np.asarray(per["recall"])[active])),
        auprc=float(np.nanmean(auprc)),
        classes=classes,
        per_class={k: [float(v) for v in vals] for k, vals in per.items()},
        confusion=confusion,
    )


def stratified_split(labels: np.ndarray, test_fraction: float, rng: np.random.Generator,
                     max_draws: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Seeded per-class split; redraws until every class is on both sides."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    for _ in range(max_draws):
        test = np.zeros(labels.size, dtype=bool)
        for c in classes:
            idx = np.flatnonzero(labels == c)
            n_test = int(np.floor(test_fraction * idx.size + 0.5))
            test[rng.permutation(idx)[:n_test]] = True
        train_ok = all(np.any(labels[~test] == c) for c in classes)
        test_ok = all(np.any(labels[test] == c) for c in classes)
        if train_ok and test_ok:
            return np.flatnonzero(~test), np.flatnonzero(test)
    raise DataError(
        f"could not place every class in both splits after {max_draws} draws "
        f"(class sizes {dict(zip(*np.unique(labels, return_counts=True)))})"
    )


@dataclass
class HorizonResult:
    horizon: int
    features: np.ndarray
    model: LogisticModel
    report: MetricsReport
    train_idx: np.ndarray
    test_idx: np.ndarray


def run_early_warning(values: np.ndarray, labels: np.ndarray,
                      horizons: Sequence[int] = DEFAULT_HORIZONS, test_fraction: float = 0.2,
                      seed: int = 0, config: TrainConfig | None = None) -> dict[int, HorizonResult]:
    """Train and evaluate one model per horizon on a single seeded stratified split."""
    values = np.asarray(values, dtype=float)
    labels = np.asarray(labels)
    if labels.shape[0] != values.shape[0]:
        raise DataError(f"{labels.shape[0]} labels for {values.shape[0]} subjects")
    if not 0 < test_fraction < 1:
        raise ConfigError(f"test fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = stratified_split(labels, test_fraction, rng)
    out = {}
    for h in horizons:
        feats = extract_features(values, h)
        model = train(feats[train_idx], labels[train_idx], config)
        report = evaluate(model, feats[test_idx], labels[test_idx])
        logger.info("horizon %dh: accuracy %.3f auprc %.3f", h, report.accuracy, report.auprc)
        out[h] = HorizonResult(h, feats, model, report, train_idx, test_idx)
    return out
