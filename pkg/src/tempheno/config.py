"""Pipeline configuration: one JSON document with a section per stage.

Layout::

    {
      "seed": 0,
      "out": "runs/demo",
      "synth":   {...SynthSpec fields...},            # or
      "ingest":  {"records": "...", "labels": "...", "n_hours": 120},
      "impute":  {...ImputationConfig fields...},
      "cluster": {...ClusterConfig fields...},
      "post":    {"k": null, "k_min": 2, "k_max": 20, "min_k": 4, "n_restarts": 0},
      "predict": {"horizons": [12, 24, 48, 120], "split": 0.2, "lr": 0.1, "iters": 500, "l2": 0.0001}
    }

Exactly one of ``synth`` / ``ingest`` names the data source. The top-level seed
drives synthetic generation, K-Medoids restarts and the prediction split; a
``synth.seed`` key is ignored. Unknown keys are rejected and every violation is
reported in one :class:`ConfigError`.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from tempheno.early_warning import DEFAULT_HORIZONS, TrainConfig
from tempheno.errors import ConfigError
from tempheno.imputation import ImputationConfig
from tempheno.soft_cluster import ClusterConfig
from tempheno.synth import SynthSpec

SECTIONS = ("synth", "ingest", "impute", "cluster", "post", "predict")
TOP_LEVEL = ("seed", "out") + SECTIONS


@dataclass(frozen=True)
class IngestConfig:
    records: str = ""
    labels: str = ""
    n_hours: int = 120
    features: tuple[str, ...] | None = None

    def problems(self) -> list[str]:
        out = []
        if not self.records:
            out.append("ingest.records is required")
        elif not Path(self.records).is_file():
            out.append(f"ingest.records: no such file {self.records}")
        if not self.labels:
            out.append("ingest.labels is required")
        elif not Path(self.labels).is_file():
            out.append(f"ingest.labels: no such file {self.labels}")
        if self.n_hours < 1:
            out.append(f"ingest.n_hours must be >= 1, got {self.n_hours}")
        return out


@dataclass(frozen=True)
class PostConfig:
    # fixed k skips the sweep
    k: int | None = None
    k_min: int = 2
    k_max: int = 20
    min_k: int = 4
    n_restarts: int = 0

    def problems(self) -> list[str]:
        out = []
        if self.k is not None and self.k < 2:
            out.append(f"post.k must be >= 2, got {self.k}")
        if self.k_min < 2 or self.k_max < self.k_min:
            out.append(f"post sweep range must satisfy 2 <= k_min <= k_max, got {self.k_min}..{self.k_max}")
        if self.n_restarts < 0:
            out.append(f"post.n_restarts must be >= 0, got {self.n_restarts}")
        return out


@dataclass(frozen=True)
class PredictConfig:
    horizons: tuple[int, ...] = DEFAULT_HORIZONS
    split: float = 0.2
    lr: float = 0.1
    iters: int = 500
    l2: float = 1e-4

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, iters=self.iters, l2=self.l2)

    def problems(self) -> list[str]:
        out = []
        if not self.horizons:
            out.append("predict.horizons must not be empty")
        elif any(h < 1 for h in self.horizons):
            out.append(f"predict.horizons must be >= 1, got {list(self.horizons)}")
        if not 0 < self.split < 1:
            out.append(f"predict.split must be in (0, 1), got {self.split}")
        return out + self.train_config().problems()


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    out: str = "tempheno_out"
    synth: SynthSpec | None = None
    ingest: IngestConfig | None = None
    impute: ImputationConfig = field(default_factory=ImputationConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    post: PostConfig = field(default_factory=PostConfig)
    predict: PredictConfig = field(default_factory=PredictConfig)

    @property
    def n_hours(self) -> int | None:
        if self.synth is not None:
            return self.synth.n_hours
        if self.ingest is not None:
            return self.ingest.n_hours
        return None

    def problems(self) -> list[str]:
        out = []
        if self.synth is not None and self.ingest is not None:
            out.append("config has both 'synth' and 'ingest'; choose one data source")
        if self.synth is not None:
            out += self.synth.problems()
        if self.ingest is not None:
            out += self.ingest.problems()
        out += self.impute.problems()
        out += self.cluster.problems(self.n_hours)
        out += self.post.problems()
        out += self.predict.problems()
        if self.n_hours is not None and any(h > self.n_hours for h in self.predict.horizons):
            out.append(f"predict.horizons {list(self.predict.horizons)} exceed T={self.n_hours}")
        if not 0 <= self.seed < 2**64:
            out.append(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        return out

    def to_dict(self) -> dict:
        data = asdict(self)
        return {k: v for k, v in data.items() if v is not None}


_SECTION_TYPES = {
    "synth": SynthSpec,
    "ingest": IngestConfig,
    "impute": ImputationConfig,
    "cluster": ClusterConfig,
    "post": PostConfig,
    "predict": PredictConfig,
}
_TUPLE_FIELDS = {("ingest", "features"), ("cluster", "truncated_features"), ("predict", "horizons")}


def _build_section(name: str, raw: Any, problems: list[str]):
    cls = _SECTION_TYPES[name]
    if not isinstance(raw, dict):
        problems.append(f"{name}: expected an object, got {type(raw).__name__}")
        return None
    known = {f.name for f in fields(cls)}
    for key in sorted(set(raw) - known):
        problems.append(f"{name}: unknown key {key!r}")
    kwargs = {k: v for k, v in raw.items() if k in known}
    defaults = {f.name: f.default for f in fields(cls)}
    for key, value in list(kwargs.items()):
        expected = type(defaults[key])
        if expected not in (int, float, bool, str) or value is None:
            continue
        ok = isinstance(value, expected) and (expected is bool or not isinstance(value, bool))
        if expected is float and isinstance(value, int) and not isinstance(value, bool):
            ok = True
        if not ok:
            problems.append(f"{name}.{key}: expected {expected.__name__}, got {value!r}")
            del kwargs[key]
    for key in list(kwargs):
        if (name, key) in _TUPLE_FIELDS and isinstance(kwargs[key], list):
            kwargs[key] = tuple(kwargs[key])
    if name == "synth":
        kwargs.pop("seed", None)  # the pipeline seed drives generation
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        problems.append(f"{name}: {exc}")
        return None


def from_dict(data: dict, overrides: dict | None = None) -> PipelineConfig:
    """Build and validate a config; ``overrides`` maps ``section.key`` (or top-level key) to values."""
    if not isinstance(data, dict):
        raise ConfigError(f"config must be a JSON object, got {type(data).__name__}")
    data = json.loads(json.dumps(data))  # deep copy
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        if "." in dotted:
            section, key = dotted.split(".", 1)
            data.setdefault(section, {})[key] = value
        else:
            data[dotted] = value
    problems = [f"unknown top-level key {k!r}" for k in sorted(set(data) - set(TOP_LEVEL))]
    sections = {}
    for name in SECTIONS:
        if name in data:
            sections[name] = _build_section(name, data[name], problems)
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        problems.append(f"seed must be an integer, got {seed!r}")
        seed = 0
    out = data.get("out", PipelineConfig.out)
    if not isinstance(out, str) or not out:
        problems.append(f"out must be a non-empty path string, got {out!r}")
        out = PipelineConfig.out
    if sections.get("synth") is not None:
        sections["synth"] = SynthSpec(**{**asdict(sections["synth"]), "seed": seed})
    defaults = {f.name: f.default_factory() for f in fields(PipelineConfig) if f.name in ("impute", "cluster", "post", "predict")}
    kwargs = {name: sections.get(name) or defaults.get(name) for name in SECTIONS}
    config = PipelineConfig(seed=seed, out=out, **kwargs)
    if not problems:
        problems = config.problems()
    else:
        # report validation problems of the sections that did parse as well
        problems += [p for p in config.problems() if p not in problems]
    if problems:
        raise ConfigError(problems)
    return config


def load(path: str | Path, overrides: dict | None = None) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(data, overrides)
