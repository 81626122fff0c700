"""Synthetic cohorts with planted archetypes, hybrid blobs, shifts and missingness.

Every subject's noiseless trajectory is a mixture of K smooth archetypes plus a
severity-scaled deviation. The first K hybrid blobs are near-pure archetypes
with low severity; the remaining blobs are even mixtures of an archetype pair
(pairs taken in lexicographic order) with high severity, so blobs sit at the
corners and edge midpoints of the membership simplex. The observed series is the trajectory read ``shift`` hours
ahead (so shifting it back by ``shift`` re-aligns it), plus Gaussian noise,
with cells masked uniformly or in contiguous blocks.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import comb
from scipy.stats import spearmanr

from tempheno.cohort import ORGAN_GROUPS, SOFA_FEATURES, CohortTensor, OrganLabelSet
from tempheno.errors import ConfigError, DataError
from tempheno.soft_cluster import ClusterConfig, DistanceSpec, distance_matrix

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SynthSpec:
    n_subjects: int = 300
    n_features: int = 7
    n_hours: int = 120
    n_archetypes: int = 3
    n_blobs: int = 6
    harmonics: int = 3
    # lower bound of the dominant (or pair) weight; the rest is Dirichlet-split
    min_dominance: float = 0.9
    concentration: float = 1.0
    # pair blobs split their share 0.5 +- mixture_jitter between the two archetypes
    mixture_jitter: float = 0.02
    severity_scale: float = 0.2
    deviation_rank: int = 4
    noise_std: float = 0.05
    max_shift: int = 6
    missing_fraction: float = 0.4
    missing_mechanism: str = "uniform"
    mean_block_hours: float = 6.0
    min_separation: float = 5.0
    seed: int = 0

    def problems(self) -> list[str]:
        out = []
        for name in ("n_subjects", "n_features", "n_hours", "n_archetypes", "n_blobs", "harmonics"):
            if getattr(self, name) < 1:
                out.append(f"synth.{name} must be positive, got {getattr(self, name)}")
        if self.n_archetypes > len(ORGAN_GROUPS):
            out.append(f"synth.n_archetypes must be <= {len(ORGAN_GROUPS)} (one per organ group)")
        k = self.n_archetypes
        if not k <= self.n_blobs <= k + k * (k - 1) // 2:
            out.append(f"synth.n_blobs must be in [{k}, {k + k * (k - 1) // 2}] for {k} archetypes, "
                       f"got {self.n_blobs}")
        for name in ("missing_fraction",):
            v = getattr(self, name)
            if not 0 <= v < 1:
                out.append(f"synth.{name} must be in [0, 1), got {v}")
        if not 0 <= self.mixture_jitter <= 0.5:
            out.append(f"synth.mixture_jitter must be in [0, 0.5], got {self.mixture_jitter}")
        if not 0 <= self.min_dominance <= 1:
            out.append(f"synth.min_dominance must be in [0, 1], got {self.min_dominance}")
        if self.missing_mechanism not in ("uniform", "block"):
            out.append(f"synth.missing_mechanism must be 'uniform' or 'block', got {self.missing_mechanism!r}")
        if self.noise_std < 0 or self.severity_scale < 0 or self.concentration <= 0:
            out.append("synth.noise_std/severity_scale must be >= 0 and concentration > 0")
        if not 0 <= self.max_shift < self.n_hours:
            out.append(f"synth.max_shift must be in [0, n_hours), got {self.max_shift}")
        if self.mean_block_hours < 1:
            out.append(f"synth.mean_block_hours must be >= 1, got {self.mean_block_hours}")
        if self.deviation_rank < 0:
            out.append(f"synth.deviation_rank must be >= 0, got {self.deviation_rank}")
        return out

    def validate(self) -> "SynthSpec":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError([f"synth: unknown key {k!r}" for k in unknown])
        return cls(**data)


@dataclass
class GroundTruth:
    archetypes: np.ndarray  # (K, P, T)
    weights: np.ndarray  # (N, K)
    shifts: np.ndarray  # (N,)
    complete_values: np.ndarray  # (N, P, T) noisy values before masking
    blobs: np.ndarray  # (N,)
    severity: np.ndarray  # (N,)
    mortality: np.ndarray  # (N,) 0/1
    subject_ids: tuple[str, ...] = ()
    feature_names: tuple[str, ...] = ()
    spec: SynthSpec = field(default_factory=SynthSpec)
    # cells masked in the generated tensor; not persisted (the tensor mask has it)
    hidden: np.ndarray | None = None

    def save(self, directory: str | Path) -> None:
        """``ground_truth.json`` plus ``complete_values.bin`` (<f8, (n, p, t) order)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        data = {
            "spec": asdict(self.spec),
            "subject_ids": list(self.subject_ids),
            "feature_names": list(self.feature_names),
            "archetype_shape": list(self.archetypes.shape),
            "archetypes": self.archetypes.ravel().tolist(),
            "weights": self.weights.tolist(),
            "shifts": [int(s) for s in self.shifts],
            "blobs": [int(b) for b in self.blobs],
            "severity": [float(s) for s in self.severity],
            "mortality": [int(m) for m in self.mortality],
            "complete_values_file": "complete_values.bin",
        }
        (directory / "ground_truth.json").write_text(json.dumps(data) + "\n")
        self.complete_values.astype("<f8").tofile(directory / "complete_values.bin")

    @classmethod
    def load(cls, directory: str | Path) -> "GroundTruth":
        directory = Path(directory)
        data = json.loads((directory / "ground_truth.json").read_text())
        spec = SynthSpec(**data["spec"])
        shape = (spec.n_subjects, spec.n_features, spec.n_hours)
        complete = np.fromfile(directory / data["complete_values_file"], dtype="<f8").reshape(shape)
        return cls(
            archetypes=np.asarray(data["archetypes"], dtype=float).reshape(data["archetype_shape"]),
            weights=np.asarray(data["weights"], dtype=float),
            shifts=np.asarray(data["shifts"], dtype=np.int64),
            complete_values=complete,
            blobs=np.asarray(data["blobs"], dtype=np.int64),
            severity=np.asarray(data["severity"], dtype=float),
            mortality=np.asarray(data["mortality"], dtype=np.int64),
            subject_ids=tuple(data["subject_ids"]),
            feature_names=tuple(data["feature_names"]),
            spec=spec,
        )


def default_feature_names(n_features: int) -> tuple[str, ...]:
    if n_features == len(SOFA_FEATURES):
        return SOFA_FEATURES
    return tuple(f"feature_{p}" for p in range(n_features))


class _Fourier:
    """Random smooth series: offset + sum_j (a_j cos + b_j sin)(2 pi j h / period) / j."""

    def __init__(self, rng: np.random.Generator, shape: tuple[int, ...], harmonics: int, period: float,
                 offset: bool = True):
        self.coef = rng.standard_normal(shape + (harmonics, 2))
        self.offset = rng.standard_normal(shape) if offset else np.zeros(shape)
        self.period = period

    def __call__(self, hours: np.ndarray) -> np.ndarray:
        """Evaluate at ``hours`` (any shape) -> shape + hours.shape."""
        j = np.arange(1, self.coef.shape[-2] + 1)
        phase = 2 * np.pi * np.multiply.outer(hours, j) / self.period  # (..h, J)
        cos, sin = np.cos(phase), np.sin(phase)
        a, b = self.coef[..., 0] / j, self.coef[..., 1] / j  # (shape, J)
        lead = a.ndim - 1
        a = a.reshape(a.shape[:lead] + (1,) * hours.ndim + (j.size,))
        b = b.reshape(b.shape[:lead] + (1,) * hours.ndim + (j.size,))
        off = self.offset.reshape(self.offset.shape + (1,) * hours.ndim)
        return off + np.sum(a * cos + b * sin, axis=-1)


def _block_mask(rng, n, p, t, fraction, mean_len) -> np.ndarray:
    missing = np.zeros((n, p, t), dtype=bool)
    targets = rng.binomial(t, fraction, size=(n, p))
    for i in range(n):
        for f in range(p):
            need = targets[i, f]
            row = missing[i, f]
            while row.sum() < need:
                length = min(int(rng.geometric(1.0 / mean_len)), need - int(row.sum()))
                start = int(rng.integers(0, t))
                free = np.flatnonzero(~row[start:])
                row[start + free[:length]] = True
    return missing


def generate(spec: SynthSpec | None = None) -> tuple[CohortTensor, OrganLabelSet, GroundTruth]:
    """Generate a cohort; fully deterministic for a given ``spec.seed``."""
    spec = (spec or SynthSpec()).validate()
    rng = np.random.default_rng(spec.seed)
    N, P, T, K = spec.n_subjects, spec.n_features, spec.n_hours, spec.n_archetypes
    hours = np.arange(T, dtype=float)
    names = default_feature_names(P)
    dspec = DistanceSpec.from_config(names, T, ClusterConfig(trunc_window=min(24, T)))

    # a pure-noise slab sits roughly this far from its mean
    noise_dist = spec.noise_std * float(dspec.weights @ np.sqrt(dspec.window.sum(axis=1)))
    for attempt in range(50):
        arche_fn = _Fourier(rng, (K, P), spec.harmonics, T)
        archetypes = arche_fn(hours)
        d = distance_matrix(archetypes, archetypes, dspec)
        sep = d[~np.eye(K, dtype=bool)].min() if K > 1 else np.inf
        if sep >= spec.min_separation * noise_dist:
            break
    else:
        raise DataError(
            f"could not draw {K} archetypes separated by {spec.min_separation}x the noise distance"
        )

    pairs = [(a, b) for a in range(K) for b in range(a + 1, K)][: spec.n_blobs - K]
    blobs = rng.permutation(np.arange(N) % spec.n_blobs)
    hybrid = blobs >= K
    # share of the blob's own archetype(s); the remainder goes to the others
    share = rng.uniform(spec.min_dominance, 1.0, size=N)
    # every archetype gets >= 3 single-label subjects
    for g in range(K):
        cand = np.flatnonzero(blobs == g)[:3]
        share[cand] = np.maximum(share[cand], 0.9)
    split = 0.5 + rng.uniform(-spec.mixture_jitter, spec.mixture_jitter, size=N)
    weights = np.zeros((N, K))
    rest = rng.dirichlet(np.full(K, spec.concentration), size=N)
    for i in range(N):
        own = [pairs[blobs[i] - K][0], pairs[blobs[i] - K][1]] if hybrid[i] else [blobs[i]]
        others = [k for k in range(K) if k not in own]
        if others:
            r = rest[i, : len(others)]
            weights[i, others] = (1 - share[i]) * r / r.sum()
            main = share[i]
        else:
            main = 1.0
        if hybrid[i]:
            weights[i, own] = main * np.array([split[i], 1 - split[i]])
        else:
            weights[i, own[0]] = main
    dominant = np.argmax(weights, axis=1)

    # severity bands: pure blobs in [0.05, 0.45], mixtures in [0.55, 0.95]
    severity = np.where(hybrid, 0.55, 0.05) + rng.uniform(0.0, 0.4, size=N)
    shifts = rng.integers(-spec.max_shift, spec.max_shift + 1, size=N)
    read_hours = hours[None, :] + shifts[:, None]  # (N, T)

    arch_at = arche_fn(read_hours)  # (K, P, N, T)
    clean = np.einsum("nk,kpnt->npt", weights, arch_at)
    if spec.deviation_rank > 0 and spec.severity_scale > 0:
        basis_fn = _Fourier(rng, (spec.deviation_rank, P), spec.harmonics, T, offset=False)
        basis = basis_fn(read_hours)  # (B, P, N, T)
        z = rng.standard_normal((N, spec.deviation_rank))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        dev = np.einsum("nb,bpnt->npt", z, basis)
        rms = np.sqrt(np.mean(basis_fn(hours) ** 2))
        # deviation RMS is severity_scale * severity times the closest archetype gap
        flat = archetypes.reshape(K, -1)
        gaps = np.sqrt(((flat[:, None] - flat[None]) ** 2).mean(axis=-1))
        gap = gaps[~np.eye(K, dtype=bool)].min() if K > 1 else 1.0
        clean += spec.severity_scale * gap * severity[:, None, None] * dev / rms
    complete = clean + spec.noise_std * rng.standard_normal((N, P, T))

    if spec.missing_fraction == 0:
        missing = np.zeros((N, P, T), dtype=bool)
    elif spec.missing_mechanism == "uniform":
        missing = rng.random((N, P, T)) < spec.missing_fraction
    else:
        missing = _block_mask(rng, N, P, T, spec.missing_fraction, spec.mean_block_hours)

    mortality = (rng.random(N) < 0.05 + 0.5 * severity).astype(np.int64)

    labels = np.zeros((N, K), dtype=np.int8)
    single = weights.max(axis=1) > 0.8
    labels[single, dominant[single]] = 1
    multi = ~single
    labels[multi] = weights[multi] >= 0.2
    order = np.argsort(-weights, axis=1, kind="stable")
    few = multi & (labels.sum(axis=1) < 2)
    labels[few, order[few, 0]] = 1
    labels[few, order[few, 1]] = 1

    width = len(str(N - 1))
    sids = tuple(f"S{i:0{width}d}" for i in range(N))
    tensor = CohortTensor(np.where(missing, np.nan, complete), ~missing, names, sids)
    label_set = OrganLabelSet(labels, sids, ORGAN_GROUPS[:K])
    truth = GroundTruth(archetypes, weights, shifts, complete, blobs, severity, mortality,
                        sids, names, spec, missing)
    return tensor, label_set, truth


def adjusted_rand_index(a: np.ndarray, b: np.ndarray) -> float:
    """Adjusted Rand Index from the contingency table of two labelings."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise DataError(f"labelings differ in length: {a.shape} vs {b.shape}")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    index = comb(table, 2).sum()
    rows = comb(table.sum(axis=1), 2).sum()
    cols = comb(table.sum(axis=0), 2).sum()
    total = comb(a.size, 2)
    expected = rows * cols / total if total else 0.0
    max_index = 0.5 * (rows + cols)
    if max_index == expected:
        return 1.0
    return float((index - expected) / (max_index - expected))


def match_centroids(centroids: np.ndarray, archetypes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Optimal centroid->archetype bijection by RMS difference (Hungarian)."""
    c = centroids.reshape(centroids.shape[0], -1)
    a = archetypes.reshape(archetypes.shape[0], -1)
    rms = np.sqrt(((c[:, None, :] - a[None, :, :]) ** 2).mean(axis=-1))
    rows, cols = linear_sum_assignment(rms)
    return cols[np.argsort(rows)], rms[rows, cols][np.argsort(rows)]


def score_recovery(truth: GroundTruth, *, imputed: np.ndarray | None = None,
                   hidden: np.ndarray | None = None, centroids: np.ndarray | None = None,
                   archetypes: np.ndarray | None = None, hybrid: np.ndarray | None = None,
                   abm_values: np.ndarray | None = None, shifts: np.ndarray | None = None) -> dict:
    """Compare pipeline outputs with the planted truth; missing outputs are skipped.

    ``imputed``/``centroids`` must be on the same scale as ``truth`` unless an
    already-transformed ``archetypes`` array is supplied. Recovered ``shifts`` are
    scored exactly and up to one common offset, which the model cannot identify
    (moving every series by one hour is absorbed by ``V``).
    """
    n = truth.blobs.size
    report: dict = {}
    if imputed is not None:
        imputed = np.asarray(imputed)
        if imputed.shape != truth.complete_values.shape:
            raise DataError(f"imputed shape {imputed.shape} != {truth.complete_values.shape}")
        hidden = truth.hidden if hidden is None else hidden
        if hidden is not None and hidden.any():
            err = imputed[hidden] - truth.complete_values[hidden]
            ref = truth.complete_values[hidden]
            report["imputation_rmse"] = float(np.sqrt(np.mean(err**2)))
            report["imputation_relative_rmse"] = float(np.sqrt(np.mean(err**2) / np.mean(ref**2)))
    if centroids is not None:
        arch = truth.archetypes if archetypes is None else archetypes
        if centroids.shape != arch.shape:
            raise DataError(f"centroid shape {centroids.shape} != archetype shape {arch.shape}")
        mapping, rms = match_centroids(centroids, arch)
        report["centroid_archetype"] = [int(m) for m in mapping]
        report["centroid_rms"] = [float(r) for r in rms]
    if hybrid is not None:
        if len(hybrid) != n:
            raise DataError(f"{len(hybrid)} hybrid labels for {n} subjects")
        report["ari"] = adjusted_rand_index(truth.blobs, hybrid)
    if abm_values is not None:
        if len(abm_values) != n:
            raise DataError(f"{len(abm_values)} ABM values for {n} subjects")
        rho = spearmanr(truth.severity, 1.0 - np.asarray(abm_values)).statistic
        report["severity_spearman"] = float(rho)
    if shifts is not None:
        shifts = np.asarray(shifts)
        if shifts.shape != truth.shifts.shape:
            raise DataError(f"{shifts.size} shifts for {n} subjects")
        offset = shifts - truth.shifts
        values, counts = np.unique(offset, return_counts=True)
        report["shift_exact"] = float(np.mean(offset == 0))
        report["shift_offset"] = int(values[np.argmax(counts)])
        report["shift_recovery"] = float(counts.max() / n)
    return report
