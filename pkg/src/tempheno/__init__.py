"""Time-aware semi-supervised soft clustering of longitudinal ICU cohorts.

Pipeline stages, each usable on its own:

* :mod:`tempheno.cohort` - cohort tensor, CSV ingestion, ICD-9 organ labels, z-scoring
* :mod:`tempheno.imputation` - low-rank completion with per-subject timeline shifts
* :mod:`tempheno.soft_cluster` - label-seeded overlapping/harmonic K-Means with calibration
* :mod:`tempheno.post_cluster` - ABM severity indicator, PAM K-Medoids, silhouette sweep
* :mod:`tempheno.early_warning` - windowed statistics + multinomial logistic regression
* :mod:`tempheno.synth` - synthetic cohorts with planted structure
"""

from tempheno.cohort import (
    CohortTensor,
    FeatureNormalization,
    OrganLabelSet,
    ingest_long_csv,
    map_icd9_labels,
    normalize,
)
from tempheno.imputation import ImputationConfig, ImputationResult, impute
from tempheno.soft_cluster import ClusterConfig, SoftResult, fit
from tempheno.post_cluster import abm, kmedoids, silhouette, sweep_k
from tempheno.early_warning import run_early_warning
from tempheno.synth import SynthSpec, generate

__version__ = "0.1.0"

__all__ = [
    "CohortTensor",
    "FeatureNormalization",
    "OrganLabelSet",
    "ingest_long_csv",
    "map_icd9_labels",
    "normalize",
    "ImputationConfig",
    "ImputationResult",
    "impute",
    "ClusterConfig",
    "SoftResult",
    "fit",
    "abm",
    "kmedoids",
    "silhouette",
    "sweep_k",
    "run_early_warning",
    "SynthSpec",
    "generate",
]
