"""Semi-supervised time-aware soft clustering of subject trajectories.

A hybrid of overlapping K-Means (a subject may join several clusters and is
compared to the mean of its assigned centroids) and harmonic-weighted centroid
updates. Centroids start from the mean of subjects with a single organ label and
are nudged each iteration by one gradient step on a fuzzy C-Means style loss plus
a supervised term pulling single-label subjects toward their own centroid.

All state lives in numpy arrays; there is no randomness anywhere in this module.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from tempheno.cohort import CohortTensor, OrganLabelSet
from tempheno.errors import ConfigError, DataError, NumericError

logger = logging.getLogger(__name__)

DEFAULT_TRUNCATED = ("systolic_bp", "base_excess", "respiratory_rate")


@dataclass(frozen=True)
class ClusterConfig:
    K: int = 3
    eta: float = 2.0
    beta1: float = 10.0
    beta2: float = 0.01
    l_rate: float = 1e-5
    t_max: int = 200
    truncated_features: tuple[str, ...] = DEFAULT_TRUNCATED
    trunc_window: int = 24
    trunc_scale: float = 5.0
    membership_exponent: float = 3.0
    # cap on |m_i|; 1 turns assignment into plain nearest-centroid
    max_overlap: int | None = None
    early_stop: bool = True
    # "mean" divides the calibration loss by N so l_rate does not scale with cohort size
    reduction: str = "mean"

    def __post_init__(self):
        object.__setattr__(self, "truncated_features", tuple(self.truncated_features))

    def problems(self, n_hours: int | None = None) -> list[str]:
        out = []
        if self.K < 2:
            out.append(f"cluster.K must be >= 2, got {self.K}")
        if not self.eta > 1:
            out.append(f"cluster.eta must be > 1, got {self.eta}")
        if self.beta1 < 0 or self.beta2 < 0:
            out.append(f"cluster.beta1/beta2 must be >= 0, got {self.beta1}, {self.beta2}")
        if self.l_rate < 0:
            out.append(f"cluster.l_rate must be >= 0, got {self.l_rate}")
        if self.t_max < 0:
            out.append(f"cluster.t_max must be >= 0, got {self.t_max}")
        if self.trunc_window < 1:
            out.append(f"cluster.trunc_window must be >= 1, got {self.trunc_window}")
        if n_hours is not None and self.trunc_window > n_hours:
            out.append(f"cluster.trunc_window {self.trunc_window} exceeds T={n_hours}")
        if not self.trunc_scale > 0:
            out.append(f"cluster.trunc_scale must be > 0, got {self.trunc_scale}")
        if not self.membership_exponent > 0:
            out.append(f"cluster.membership_exponent must be > 0, got {self.membership_exponent}")
        if self.max_overlap is not None and self.max_overlap < 1:
            out.append(f"cluster.max_overlap must be >= 1, got {self.max_overlap}")
        if self.reduction not in ("sum", "mean"):
            out.append(f"cluster.reduction must be 'sum' or 'mean', got {self.reduction!r}")
        return out

    def validate(self, n_hours: int | None = None) -> "ClusterConfig":
        problems = self.problems(n_hours)
        if problems:
            raise ConfigError(problems)
        return self


@dataclass(frozen=True)
class DistanceSpec:
    """Per-feature weights and time windows of the weighted-truncated distance."""

    weights: np.ndarray  # (P,)
    window: np.ndarray  # (P, T) float 0/1

    @classmethod
    def from_config(cls, feature_names: Sequence[str], n_hours: int, config: ClusterConfig) -> "DistanceSpec":
        truncated = np.array([f in config.truncated_features for f in feature_names])
        weights = np.where(truncated, config.trunc_scale, 1.0)
        hours = np.arange(n_hours)
        window = np.where(truncated[:, None], hours[None, :] < config.trunc_window, True)
        return cls(weights, window.astype(np.float64))


def _per_feature_norms(diff: np.ndarray, spec: DistanceSpec) -> np.ndarray:
    # diff (..., P, T) -> (..., P)
    return np.sqrt(np.sum(diff * diff * spec.window, axis=-1))


def distance(x: np.ndarray, c: np.ndarray, spec: DistanceSpec) -> float:
    """Sum over features of the windowed Euclidean distance, scaled by feature weight."""
    x = np.asarray(x, dtype=float)
    c = np.asarray(c, dtype=float)
    if x.shape != c.shape:
        raise DataError(f"shape mismatch {x.shape} vs {c.shape}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(c))):
        raise DataError("distance inputs must be finite")
    return float(np.dot(spec.weights, _per_feature_norms(x - c, spec)))


def distance_matrix(X: np.ndarray, C: np.ndarray, spec: DistanceSpec) -> np.ndarray:
    """(N, K) distances between subjects X (N, P, T) and centroids C (K, P, T)."""
    out = np.empty((X.shape[0], C.shape[0]))
    for k in range(C.shape[0]):
        out[:, k] = _per_feature_norms(X - C[k], spec) @ spec.weights
    return out


def paired_distance(X: np.ndarray, Y: np.ndarray, spec: DistanceSpec) -> np.ndarray:
    """Row-wise distance between X[i] and Y[i]."""
    return _per_feature_norms(X - Y, spec) @ spec.weights


def init_centroids(X: np.ndarray, labels: OrganLabelSet, K: int) -> np.ndarray:
    """Centroid g = mean of subjects whose label vector is exactly the g-th unit vector."""
    L = np.asarray(labels.labels)
    if L.shape[1] != K:
        raise DataError(f"labels have {L.shape[1]} groups but K={K}")
    single = labels.single_label_group()
    C = np.empty((K,) + X.shape[1:])
    for g in range(K):
        members = single == g
        if not members.any():
            raise DataError(
                f"no subjects carry only the {labels.groups[g]!r} label; cannot seed centroid {g}"
            )
        C[g] = X[members].mean(axis=0)
    return C


def _set_means(member: np.ndarray, C: np.ndarray) -> np.ndarray:
    counts = member.sum(axis=1)
    flat = member.astype(np.float64) @ C.reshape(C.shape[0], -1)
    return (flat / counts[:, None]).reshape((member.shape[0],) + C.shape[1:])


def assign(
    X: np.ndarray,
    C: np.ndarray,
    spec: DistanceSpec,
    m_old: np.ndarray | None = None,
    max_overlap: int | None = None,
) -> np.ndarray:
    """Overlapping assignment of every subject; returns a boolean (N, K) membership.

    Start from the nearest centroid, then keep adding the nearest unassigned one
    while the mean of the assigned centroids gets strictly closer to the subject.
    If ``m_old`` is given, the old set is kept when its centroid mean is strictly
    closer than the new one's.
    """
    n, K = X.shape[0], C.shape[0]
    cap = K if max_overlap is None else min(K, max_overlap)
    d = distance_matrix(X, C, spec)
    order = np.argsort(d, axis=1, kind="stable")
    rows = np.arange(n)
    member = np.zeros((n, K), dtype=bool)
    member[rows, order[:, 0]] = True
    current = d[rows, order[:, 0]]
    active = np.ones(n, dtype=bool)
    for step in range(1, cap):
        if not active.any():
            break
        trial = member.copy()
        trial[rows, order[:, step]] = True
        d_trial = paired_distance(X, _set_means(trial, C), spec)
        accept = active & (d_trial < current)
        member[accept] = trial[accept]
        current = np.where(accept, d_trial, current)
        active = accept
    if m_old is not None:
        m_old = np.asarray(m_old, dtype=bool)
        d_old = paired_distance(X, _set_means(m_old, C), spec)
        keep_old = d_old < current
        member[keep_old] = m_old[keep_old]
    return member


def update_centroids(X: np.ndarray, member: np.ndarray, C: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Harmonic-weighted centroid update over overlapping assignments.

    For subject i in cluster k: ``alpha_i = 1/|m_i|^2`` and
    ``temp_k^i = |m_i| x_i - sum_{c in m_i, c != k} C_c``; the new centroid is the
    alpha-weighted mean of ``temp_k^i``. Uses the pre-update centroids throughout.
    Returns ``(new_centroids, empty)`` where empty clusters keep their old centroid.
    """
    sizes = member.sum(axis=1)
    K = C.shape[0]
    new = C.copy()
    empty = np.zeros(K, dtype=bool)
    set_sum = (member.astype(np.float64) @ C.reshape(K, -1)).reshape((-1,) + C.shape[1:])
    for k in range(K):
        idx = np.flatnonzero(member[:, k])
        if idx.size == 0:
            empty[k] = True
            continue
        size = sizes[idx].astype(np.float64)
        alpha = 1.0 / size**2
        others = set_sum[idx] - C[k]
        temp = size[:, None, None] * X[idx] - others
        new[k] = np.tensordot(alpha, temp, axes=1) / alpha.sum()
    if empty.any():
        logger.warning("empty clusters kept previous centroid: %s", np.flatnonzero(empty).tolist())
    return new, empty


@dataclass
class CalibrationState:
    u: np.ndarray
    unsup_loss: float
    t_loss: float
    nt_loss: float
    sup_loss: float
    tot_loss: float


def fuzzy_weights(d: np.ndarray, eta: float) -> np.ndarray:
    """``u_ik = (d_ik / sum_j d_ij) ** (-2 / (eta - 1))``.

    A subject at zero distance from some centroid gets the indicator of its
    zero-distance centroid(s) instead.
    """
    zero = d == 0.0
    has_zero = zero.any(axis=1)
    total = d.sum(axis=1, keepdims=True)
    safe = np.where(zero, 1.0, d)
    u = (safe / np.where(total > 0, total, 1.0)) ** (-2.0 / (eta - 1.0))
    return np.where(has_zero[:, None], zero.astype(np.float64), u)


def loss_weights(u: np.ndarray, single: np.ndarray, config: ClusterConfig) -> np.ndarray:
    """Per (subject, centroid) coefficient of d_ik in the total loss."""
    W = u**config.eta
    labelled = single >= 0
    target = np.zeros_like(W, dtype=bool)
    target[np.flatnonzero(labelled), single[labelled]] = True
    W = W + config.beta1 * target - config.beta2 * (labelled[:, None] & ~target)
    return W


def _reduce_scale(n: int, config: ClusterConfig) -> float:
    return 1.0 / n if config.reduction == "mean" else 1.0


def total_loss(X, C, u, single, spec: DistanceSpec, config: ClusterConfig) -> CalibrationState:
    """Loss terms with the fuzzy weights ``u`` held fixed."""
    d = distance_matrix(X, C, spec) * _reduce_scale(X.shape[0], config)
    unsup = float(np.sum(u**config.eta * d))
    labelled = np.flatnonzero(single >= 0)
    d_lab = d[labelled]
    target = np.zeros_like(d_lab, dtype=bool)
    target[np.arange(labelled.size), single[labelled]] = True
    t_loss = float(d_lab[target].sum())
    nt_loss = float(d_lab[~target].sum())
    sup = config.beta1 * t_loss - config.beta2 * nt_loss
    return CalibrationState(u, unsup, t_loss, nt_loss, sup, unsup + sup)


def loss_gradient(X, C, u, single, spec: DistanceSpec, config: ClusterConfig) -> np.ndarray:
    """Gradient of :func:`total_loss` with respect to the centroids (frozen ``u``)."""
    W = loss_weights(u, single, config) * _reduce_scale(X.shape[0], config)
    grad = np.zeros_like(C)
    for k in range(C.shape[0]):
        diff = (X - C[k]) * spec.window  # (N, P, T)
        norms = np.sqrt(np.sum(diff * diff, axis=-1))  # (N, P)
        # subgradient 0 where the windowed difference vanishes
        scale = np.divide(spec.weights[None, :], norms, out=np.zeros_like(norms), where=norms > 0)
        grad[k] = -np.einsum("i,ip,ipt->pt", W[:, k], scale, diff)
    return grad


def calibrate(X, C, labels: OrganLabelSet, spec: DistanceSpec, config: ClusterConfig) -> tuple[np.ndarray, CalibrationState]:
    """One gradient step on the calibration loss; returns new centroids and the loss state."""
    single = labels.single_label_group()
    u = fuzzy_weights(distance_matrix(X, C, spec), config.eta)
    state = total_loss(X, C, u, single, spec, config)
    if config.l_rate == 0:
        return C.copy(), state
    return C - config.l_rate * loss_gradient(X, C, u, single, spec, config), state


def memberships(d: np.ndarray, exponent: float = 3.0) -> np.ndarray:
    """``mu_ik = d_ik^-e / sum_j d_ij^-e``; zero distances share the mass equally."""
    zero = d == 0.0
    has_zero = zero.any(axis=1)
    # scale by the row minimum so tiny distances do not overflow
    dmin = np.where(zero, np.inf, d).min(axis=1, keepdims=True)
    dmin = np.where(np.isfinite(dmin), dmin, 1.0)
    inv = np.where(zero, 0.0, (np.where(zero, 1.0, d) / dmin) ** -exponent)
    mu = inv / inv.sum(axis=1, keepdims=True)
    ties = zero / np.maximum(zero.sum(axis=1, keepdims=True), 1)
    return np.where(has_zero[:, None], ties, mu)


@dataclass
class SoftResult:
    distances: np.ndarray
    memberships: np.ndarray
    centroids: np.ndarray
    assignments: np.ndarray
    loss_trace: list[float]
    n_iters: int
    subject_ids: tuple[str, ...] = ()
    feature_names: tuple[str, ...] = ()
    empty_cluster_events: int = 0
    config: ClusterConfig = field(default_factory=ClusterConfig)

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        K, P, T = self.centroids.shape
        self.centroids.astype("<f8").tofile(directory / "centroids.bin")
        cfg = asdict(self.config)
        cfg["truncated_features"] = list(cfg["truncated_features"])
        meta = {
            "K": K, "P": P, "T": T, "dtype": "<f8",
            "feature_names": list(self.feature_names),
            "n_iters": self.n_iters,
            "empty_cluster_events": self.empty_cluster_events,
            "config": cfg,
        }
        (directory / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
        ks = range(1, K + 1)
        _write_matrix(directory / "memberships.csv", self.subject_ids, [f"mu_{k}" for k in ks], self.memberships)
        _write_matrix(directory / "distances.csv", self.subject_ids, [f"d_{k}" for k in ks], self.distances)
        _write_matrix(directory / "assignments.csv", self.subject_ids, [f"in_{k}" for k in ks],
                      self.assignments.astype(int))
        with open(directory / "loss_trace.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "tot_loss"])
            for i, v in enumerate(self.loss_trace, start=1):
                w.writerow([i, repr(float(v))])

    @classmethod
    def load(cls, directory: str | Path) -> "SoftResult":
        directory = Path(directory)
        meta = json.loads((directory / "meta.json").read_text())
        shape = (meta["K"], meta["P"], meta["T"])
        centroids = np.fromfile(directory / "centroids.bin", dtype="<f8").reshape(shape)
        sids, mu = _read_matrix(directory / "memberships.csv")
        _, d = _read_matrix(directory / "distances.csv")
        _, m = _read_matrix(directory / "assignments.csv")
        trace = []
        with open(directory / "loss_trace.csv", newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            trace = [float(row[1]) for row in reader]
        cfg = dict(meta["config"])
        cfg["truncated_features"] = tuple(cfg["truncated_features"])
        return cls(d, mu, centroids, m.astype(bool), trace, meta["n_iters"], sids,
                   tuple(meta["feature_names"]), meta["empty_cluster_events"], ClusterConfig(**cfg))


def _write_matrix(path, ids, columns, matrix) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", *columns])
        for sid, row in zip(ids, matrix):
            w.writerow([sid, *(repr(v.item()) for v in row)])


def _read_matrix(path) -> tuple[tuple[str, ...], np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        ids, rows = [], []
        for row in reader:
            ids.append(row[0])
            rows.append([float(v) for v in row[1:]])
    return tuple(ids), np.array(rows, dtype=float).reshape(len(ids), len(header) - 1)


def fit(tensor: CohortTensor, labels: OrganLabelSet, config: ClusterConfig | None = None,
        init: np.ndarray | None = None) -> SoftResult:
    """Run the full soft clustering loop on a complete (imputed) tensor.

    ``init`` overrides the label-seeded starting centroids.
    """
    config = (config or ClusterConfig()).validate(tensor.n_hours)
    if not tensor.complete:
        raise DataError("soft clustering needs a complete tensor; impute first")
    labels = labels.aligned_to(tensor.subject_ids) if labels.subject_ids != tensor.subject_ids else labels
    X = tensor.filled()
    spec = DistanceSpec.from_config(tensor.feature_names, tensor.n_hours, config)
    C = init_centroids(X, labels, config.K) if init is None else np.array(init, dtype=float)
    if C.shape != (config.K,) + X.shape[1:]:
        raise DataError(f"initial centroids have shape {C.shape}")
    member = assign(X, C, spec, max_overlap=config.max_overlap)

    trace: list[float] = []
    stable = 0
    empty_events = 0
    t = 0
    for t in range(1, config.t_max + 1):
        C_prev = C
        C, empty = update_centroids(X, member, C)
        empty_events += int(empty.sum())
        C, state = calibrate(X, C, labels, spec, config)
        if not np.all(np.isfinite(C)):
            raise NumericError(f"non-finite centroids at iteration {t}")
        trace.append(state.tot_loss)
        new_member = assign(X, C, spec, m_old=member, max_overlap=config.max_overlap)
        stable = stable + 1 if np.array_equal(new_member, member) else 0
        member = new_member
        shift = float(np.max(np.abs(C - C_prev)))
        if config.early_stop and stable >= 3 and shift < 1e-6:
            logger.info("soft clustering converged after %d iterations", t)
            break

    d = distance_matrix(X, C, spec)
    mu = memberships(d, config.membership_exponent)
    return SoftResult(d, mu, C, member, trace, t, tensor.subject_ids,
                      tensor.feature_names, empty_events, config)
