"""Cohort tensor data model, CSV ingestion, ICD-9 organ labels and z-scoring."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from tempheno.errors import DataError

logger = logging.getLogger(__name__)

SOFA_FEATURES = (
    "systolic_bp",
    "base_excess",
    "creatinine",
    "heart_rate",
    "pt_inr",
    "lactate",
    "respiratory_rate",
)

ORGAN_GROUPS = ("liver", "kidney", "lung")

# Inclusive ranges on the integer part of the ICD-9 code.
ICD9_RANGES = {
    "liver": (570, 573),
    "kidney": (580, 589),
    "lung": (510, 519),
}

DEFAULT_RECORD_COLUMNS = {
    "subject_id": "subject_id",
    "feature": "feature",
    "hour": "hour",
    "value": "value",
}


@dataclass(frozen=True)
class CohortTensor:
    """N x P x T observations plus a boolean observation mask.

    Unobserved cells hold NaN in ``values``; use :meth:`filled` for math.
    """

    values: np.ndarray
    mask: np.ndarray
    feature_names: tuple[str, ...]
    subject_ids: tuple[str, ...]

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        mask = np.array(self.mask, dtype=bool)
        if values.ndim != 3:
            raise DataError(f"values must be 3-D (N, P, T), got shape {values.shape}")
        if mask.shape != values.shape:
            raise DataError(f"mask shape {mask.shape} != values shape {values.shape}")
        n, p, t = values.shape
        if min(n, p, t) < 1:
            raise DataError(f"empty tensor of shape {values.shape}")
        if len(self.feature_names) != p:
            raise DataError(f"{len(self.feature_names)} feature names for P={p}")
        if len(self.subject_ids) != n:
            raise DataError(f"{len(self.subject_ids)} subject ids for N={n}")
        if not np.all(np.isfinite(values[mask])):
            raise DataError("observed entries must be finite")
        values[~mask] = np.nan
        values.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "feature_names", tuple(str(f) for f in self.feature_names))
        object.__setattr__(self, "subject_ids", tuple(str(s) for s in self.subject_ids))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def n_subjects(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    @property
    def n_hours(self) -> int:
        return self.values.shape[2]

    @property
    def complete(self) -> bool:
        return bool(self.mask.all())

    def filled(self, fill: float = 0.0) -> np.ndarray:
        """Writable copy of the values with unobserved cells set to ``fill``."""
        return np.where(self.mask, self.values, fill)

    def with_values(self, values: np.ndarray, mask: np.ndarray | None = None) -> "CohortTensor":
        return CohortTensor(
            values=values,
            mask=self.mask if mask is None else mask,
            feature_names=self.feature_names,
            subject_ids=self.subject_ids,
        )

    def save(self, directory: str | Path) -> None:
        """Write ``meta.json``, ``values.bin`` (<f8) and ``mask.bin`` (u1), (n, p, t) order."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        n, p, t = self.shape
        meta = {
            "N": n,
            "P": p,
            "T": t,
            "feature_names": list(self.feature_names),
            "subject_ids": list(self.subject_ids),
            "dtype": "<f8",
            "order": "n,p,t",
        }
        (directory / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
        self.values.astype("<f8").tofile(directory / "values.bin")
        self.mask.astype(np.uint8).tofile(directory / "mask.bin")

    @classmethod
    def load(cls, directory: str | Path) -> "CohortTensor":
        directory = Path(directory)
        meta = json.loads((directory / "meta.json").read_text())
        shape = (meta["N"], meta["P"], meta["T"])
        values = np.fromfile(directory / "values.bin", dtype="<f8")
        mask = np.fromfile(directory / "mask.bin", dtype=np.uint8)
        if values.size != math.prod(shape) or mask.size != math.prod(shape):
            raise DataError(f"tensor files in {directory} do not match shape {shape}")
        return cls(
            values=values.reshape(shape),
            mask=mask.reshape(shape).astype(bool),
            feature_names=tuple(meta["feature_names"]),
            subject_ids=tuple(meta["subject_ids"]),
        )


@dataclass(frozen=True)
class OrganLabelSet:
    """Per-subject binary organ-dysfunction vectors (N x G)."""

    labels: np.ndarray
    subject_ids: tuple[str, ...]
    groups: tuple[str, ...] = ORGAN_GROUPS
    malformed_count: int = 0

    def __post_init__(self):
        labels = np.array(self.labels, dtype=np.int8)
        if labels.ndim != 2 or labels.shape[1] != len(self.groups):
            raise DataError(
                f"labels must be N x {len(self.groups)}, got shape {labels.shape}"
            )
        if labels.shape[0] != len(self.subject_ids):
            raise DataError(f"{labels.shape[0]} label rows for {len(self.subject_ids)} subjects")
        if not np.isin(labels, (0, 1)).all():
            raise DataError("label entries must be 0 or 1")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "subject_ids", tuple(str(s) for s in self.subject_ids))
        object.__setattr__(self, "groups", tuple(self.groups))

    def single_label_group(self) -> np.ndarray:
        """Group index for subjects carrying exactly one label, -1 otherwise."""
        single = self.labels.sum(axis=1) == 1
        return np.where(single, self.labels.argmax(axis=1), -1)

    def aligned_to(self, subject_ids: Sequence[str]) -> "OrganLabelSet":
        """Reorder to ``subject_ids``; subjects without a row get the zero vector."""
        index = {s: i for i, s in enumerate(self.subject_ids)}
        rows = np.zeros((len(subject_ids), len(self.groups)), dtype=np.int8)
        for j, s in enumerate(subject_ids):
            i = index.get(str(s))
            if i is not None:
                rows[j] = self.labels[i]
        return OrganLabelSet(rows, tuple(subject_ids), self.groups, self.malformed_count)

    def save_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["subject_id", *self.groups])
            for sid, row in zip(self.subject_ids, self.labels):
                writer.writerow([sid, *(int(v) for v in row)])

    @classmethod
    def load_csv(cls, path: str | Path) -> "OrganLabelSet":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            sids, rows = [], []
            for row in reader:
                sids.append(row[0])
                rows.append([int(v) for v in row[1:]])
        return cls(np.array(rows, dtype=np.int8).reshape(len(sids), len(header) - 1),
                   tuple(sids), tuple(header[1:]))


@dataclass(frozen=True)
class IngestStats:
    n_records: int
    duplicate_count: int = 0
    dropped_hours: int = 0


@dataclass(frozen=True)
class FeatureNormalization:
    """Per-feature mean and (population) std used for z-scoring."""

    feature_names: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray
    constant_features: tuple[str, ...] = field(default=())

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean[None, :, None]) / self.std[None, :, None]

    def invert(self, values: np.ndarray) -> np.ndarray:
        return values * self.std[None, :, None] + self.mean[None, :, None]

    def denormalize(self, tensor: CohortTensor) -> CohortTensor:
        return tensor.with_values(np.where(tensor.mask, self.invert(tensor.filled()), np.nan))

    def to_dict(self) -> dict:
        return {
            "feature_names": list(self.feature_names),
            "mean": [float(v) for v in self.mean],
            "std": [float(v) for v in self.std],
            "constant_features": list(self.constant_features),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "FeatureNormalization":
        return cls(
            tuple(data["feature_names"]),
            np.asarray(data["mean"], dtype=float),
            np.asarray(data["std"], dtype=float),
            tuple(data.get("constant_features", ())),
        )


def ingest_long_csv(
    records_path: str | Path,
    n_hours: int = 120,
    feature_names: Sequence[str] | None = None,
    schema: Mapping[str, str] | None = None,
) -> tuple[CohortTensor, IngestStats]:
    """Build a cohort tensor from long-format ``subject_id,feature,hour,value`` rows.

    Subjects are ordered by first appearance. When ``feature_names`` is None the
    features are taken from the file in order of first appearance; otherwise any
    other feature name is rejected. Duplicate cells are resolved last-write-wins.
    Hours outside ``[0, n_hours)`` are dropped and counted.
    """
    columns = dict(DEFAULT_RECORD_COLUMNS)
    if schema:
        columns.update(schema)
    if n_hours < 1:
        raise DataError(f"n_hours must be >= 1, got {n_hours}")
    known = None if feature_names is None else {f: i for i, f in enumerate(feature_names)}
    features: dict[str, int] = dict(known) if known is not None else {}
    subjects: dict[str, int] = {}
    cells: dict[tuple[int, int, int], float] = {}
    duplicates = dropped = n_records = 0

    with open(records_path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in columns.values() if c not in (reader.fieldnames or [])]
        if reader.fieldnames is None:
            raise DataError(f"{records_path}: no records")
        if missing:
            raise DataError(f"{records_path}: missing columns {missing}")
        # row 1 is the header
        for rownum, row in enumerate(reader, start=2):
            n_records += 1
            feature = row[columns["feature"]]
            if feature not in features:
                if known is not None:
                    raise DataError(f"{records_path}: row {rownum}: unknown feature {feature!r}")
                features[feature] = len(features)
            try:
                hour = int(row[columns["hour"]])
            except ValueError:
                raise DataError(
                    f"{records_path}: row {rownum}: non-integer hour {row[columns['hour']]!r}"
                ) from None
            try:
                value = float(row[columns["value"]])
            except ValueError:
                raise DataError(
                    f"{records_path}: row {rownum}: non-numeric value {row[columns['value']]!r}"
                ) from None
            if not math.isfinite(value):
                raise DataError(f"{records_path}: row {rownum}: non-finite value {value!r}")
            sid = row[columns["subject_id"]]
            subj = subjects.setdefault(sid, len(subjects))
            if not 0 <= hour < n_hours:
                dropped += 1
                continue
            key = (subj, features[feature], hour)
            if key in cells:
                duplicates += 1
            cells[key] = value

    if n_records == 0:
        raise DataError(f"{records_path}: no records")
    if not cells:
        raise DataError(f"{records_path}: no records inside the first {n_hours} hours")
    if duplicates:
        logger.warning("%d duplicate cells resolved last-write-wins", duplicates)
    if dropped:
        logger.warning("%d records outside [0, %d) hours dropped", dropped, n_hours)

    shape = (len(subjects), len(features), n_hours)
    values = np.full(shape, np.nan)
    mask = np.zeros(shape, dtype=bool)
    idx = np.array(list(cells.keys()), dtype=np.intp)
    values[idx[:, 0], idx[:, 1], idx[:, 2]] = np.fromiter(cells.values(), dtype=float)
    mask[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    tensor = CohortTensor(values, mask, tuple(features), tuple(subjects))
    return tensor, IngestStats(n_records, duplicates, dropped)


def _icd9_major(code: str) -> int | None:
    code = code.strip()
    head = code.split(".", 1)[0]
    if not head.isdigit():
        return None
    tail = code[len(head) + 1:] if "." in code else ""
    if tail and not tail.isdigit():
        return None
    return int(head)


def organ_vector(codes: Iterable[str], groups: Sequence[str] = ORGAN_GROUPS) -> np.ndarray:
    """Binary group vector for one subject's codes; unparseable codes are ignored."""
    vec = np.zeros(len(groups), dtype=np.int8)
    for code in codes:
        major = _icd9_major(code)
        if major is None:
            continue
        for g, name in enumerate(groups):
            lo, hi = ICD9_RANGES[name]
            if lo <= major <= hi:
                vec[g] = 1
    return vec


def map_icd9_labels(
    codes_path: str | Path,
    subject_ids: Sequence[str] | None = None,
    groups: Sequence[str] = ORGAN_GROUPS,
) -> OrganLabelSet:
    """Map ``subject_id,icd9_code`` rows to liver/kidney/lung indicator vectors.

    Group g is set iff any code's integer part falls in its range. Codes outside
    every range are ignored; malformed codes (e.g. ``V45.1``) are skipped and
    counted in ``malformed_count``. If ``subject_ids`` is given the result is
    aligned to it and subjects without codes get the zero vector.
    """
    unknown = [g for g in groups if g not in ICD9_RANGES]
    if unknown:
        raise DataError(f"unknown organ groups {unknown}")
    per_subject: dict[str, list[str]] = {}
    malformed = 0
    with open(codes_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"subject_id", "icd9_code"} <= set(reader.fieldnames):
            raise DataError(f"{codes_path}: expected header subject_id,icd9_code")
        for row in reader:
            code = row["icd9_code"] or ""
            codes = per_subject.setdefault(row["subject_id"], [])
            if _icd9_major(code) is None:
                malformed += 1
                continue
            codes.append(code)
    if malformed:
        logger.warning("%d malformed ICD-9 codes skipped", malformed)

    ids = tuple(per_subject) if subject_ids is None else tuple(subject_ids)
    rows = np.zeros((len(ids), len(groups)), dtype=np.int8)
    for j, sid in enumerate(ids):
        rows[j] = organ_vector(per_subject.get(sid, ()), groups)
    return OrganLabelSet(rows, ids, tuple(groups), malformed)


def normalize(tensor: CohortTensor) -> tuple[CohortTensor, FeatureNormalization]:
    """Z-score each feature over its observed entries pooled across subjects and hours.

    Uses the population std; a constant feature keeps std 1 (so it maps to zeros).
    """
    n_obs = tensor.mask.sum(axis=(0, 2))
    empty = [f for f, c in zip(tensor.feature_names, n_obs) if c == 0]
    if empty:
        raise DataError(f"features with no observed entries: {empty}")
    filled = tensor.filled()
    mean = filled.sum(axis=(0, 2)) / n_obs
    dev = np.where(tensor.mask, filled - mean[None, :, None], 0.0)
    std = np.sqrt((dev**2).sum(axis=(0, 2)) / n_obs)
    constant = tuple(f for f, s in zip(tensor.feature_names, std) if s == 0.0)
    if constant:
        logger.warning("constant features keep std=1: %s", ", ".join(constant))
    std = np.where(std == 0.0, 1.0, std)
    norm = FeatureNormalization(tensor.feature_names, mean, std, constant)
    out = np.where(tensor.mask, norm.apply(filled), np.nan)
    return tensor.with_values(out), norm
