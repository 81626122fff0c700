"""Pipeline stages over persisted artifacts.

Every stage reads its inputs from, and writes its outputs under, one run
directory::

    cohort/              tensor (meta.json, values.bin, mask.bin)   synth | ingest
    labels.csv           organ labels                               synth | ingest
    outcomes.csv         mortality flags (synthetic runs only)      synth
    ground_truth/        planted truth                              synth
    normalization.json   per-feature z-score parameters             impute
    imputed/             complete z-scored tensor                   impute
    imputation/          factors, shifts, objective trace           impute
    soft/                centroids, memberships, distances          cluster
    post/                representation, hybrid assignments         post
    predict/             features, models, metrics, confusion       predict
    report/              summary tables and SVG plots               report
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict
from pathlib import Path

import numpy as np

from tempheno import report as rep
from tempheno.cohort import CohortTensor, FeatureNormalization, OrganLabelSet, ingest_long_csv, map_icd9_labels, normalize
from tempheno.config import PipelineConfig
from tempheno.early_warning import feature_names as ew_feature_names
from tempheno.early_warning import run_early_warning
from tempheno.errors import ConfigError, MissingArtifactError
from tempheno.imputation import impute
from tempheno.post_cluster import abm, kmedoids, rank_and_summarize, representation, sweep_k
from tempheno.soft_cluster import SoftResult, fit
from tempheno.synth import GroundTruth, generate, score_recovery

logger = logging.getLogger(__name__)

STAGES = ("synth", "ingest", "impute", "cluster", "post", "predict", "report")


def _need(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(path, producer)
    return path


def _dump_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _load_cohort(out: Path) -> tuple[CohortTensor, OrganLabelSet]:
    tensor = CohortTensor.load(_need(out / "cohort", "synth` or `tempheno ingest"))
    labels = OrganLabelSet.load_csv(_need(out / "labels.csv", "synth` or `tempheno ingest"))
    return tensor, labels


def _load_outcomes(out: Path, subject_ids) -> np.ndarray | None:
    path = out / "outcomes.csv"
    if not path.exists():
        return None
    _, rows = rep.read_csv(path)
    lookup = {r[0]: int(r[1]) for r in rows}
    return np.array([lookup[s] for s in subject_ids])


def run_synth(config: PipelineConfig, out: Path) -> None:
    if config.synth is None:
        raise ConfigError("the synth stage needs a 'synth' section in the config")
    tensor, labels, truth = generate(config.synth)
    out.mkdir(parents=True, exist_ok=True)
    tensor.save(out / "cohort")
    labels.save_csv(out / "labels.csv")
    truth.save(out / "ground_truth")
    rep.write_csv(out / "outcomes.csv", ["subject_id", "mortality"],
                  [[s, int(m)] for s, m in zip(truth.subject_ids, truth.mortality)])
    logger.info("synth: %d subjects, %.1f%% observed", tensor.n_subjects, 100 * tensor.mask.mean())


def run_ingest(config: PipelineConfig, out: Path) -> None:
    if config.ingest is None:
        raise ConfigError("the ingest stage needs an 'ingest' section in the config")
    ing = config.ingest
    tensor, stats = ingest_long_csv(ing.records, n_hours=ing.n_hours, feature_names=ing.features)
    labels = map_icd9_labels(ing.labels, subject_ids=tensor.subject_ids)
    out.mkdir(parents=True, exist_ok=True)
    tensor.save(out / "cohort")
    labels.save_csv(out / "labels.csv")
    _dump_json(out / "ingest_stats.json", {**asdict(stats), "malformed_icd9": labels.malformed_count})


def run_impute(config: PipelineConfig, out: Path) -> None:
    tensor, _ = _load_cohort(out)
    z, norm = normalize(tensor)
    completed, result = impute(z, config.impute)
    _dump_json(out / "normalization.json", norm.to_dict())
    completed.save(out / "imputed")
    result.save(out / "imputation", config.impute)
    logger.info("impute: %d iterations, final objective %.6g", result.n_iters, result.objective_trace[-1])


def run_cluster(config: PipelineConfig, out: Path) -> None:
    _, labels = _load_cohort(out)
    tensor = CohortTensor.load(_need(out / "imputed", "impute"))
    result = fit(tensor, labels, config.cluster)
    result.save(out / "soft")
    logger.info("cluster: %d iterations", result.n_iters)


def run_post(config: PipelineConfig, out: Path) -> None:
    soft = SoftResult.load(_need(out / "soft", "cluster"))
    a = abm(soft.distances)
    R = representation(soft.memberships, a)
    pc = config.post
    dest = out / "post"
    dest.mkdir(parents=True, exist_ok=True)
    K = soft.memberships.shape[1]
    mu_cols = [f"mu_{k}" for k in range(1, K + 1)]
    rep.write_csv(dest / "representation.csv", ["subject_id", *mu_cols, "ABM"],
                  [[s, *row] for s, row in zip(soft.subject_ids, R)])
    if pc.k is None:
        n = R.shape[0]
        ks = range(pc.k_min, min(pc.k_max, n - 1) + 1)
        sweep = sweep_k(R, ks, min_k=pc.min_k, seed=config.seed)
        rep.write_csv(dest / "silhouette_sweep.csv", ["k", "mean_score"], sweep.table)
        k = sweep.chosen_k
        fit_k = sweep.fits[k]
        if pc.n_restarts:
            fit_k = kmedoids(R, k, seed=config.seed, n_restarts=pc.n_restarts)
    else:
        k = pc.k
        fit_k = kmedoids(R, k, seed=config.seed, n_restarts=pc.n_restarts)
        rep.write_csv(dest / "silhouette_sweep.csv", ["k", "mean_score"], [(k, fit_k.silhouette)])
    outcomes = _load_outcomes(out, soft.subject_ids)
    ranked, rows = rank_and_summarize(fit_k, R, outcomes)
    medoid = np.zeros(R.shape[0], dtype=int)
    medoid[fit_k.medoids] = 1
    rep.write_csv(dest / "hybrid_assignments.csv", ["subject_id", "sub_phenotype", "raw_cluster", "is_medoid"],
                  [[s, int(r), int(c), int(m)] for s, r, c, m in zip(soft.subject_ids, ranked, fit_k.labels, medoid)])
    header = (["cluster", "size"] + [f"mean_{c}" for c in mu_cols] + ["mean_abm"]
              + [f"medoid_{c}" for c in mu_cols] + ["medoid_abm"])
    if outcomes is not None:
        header.append("mortality_pct")
    table = []
    for row in rows:
        line = [row.cluster, row.size, *row.mean_mu, row.mean_abm, *row.medoid_mu, row.medoid_abm]
        if outcomes is not None:
            line.append(row.mortality_pct)
        table.append(line)
    rep.write_csv(dest / "summary.csv", header, table)
    _dump_json(dest / "meta.json", {"k": int(k), "silhouette": float(fit_k.silhouette),
                                    "medoids": [soft.subject_ids[i] for i in fit_k.medoids]})
    logger.info("post: k=%d, silhouette %.3f", k, fit_k.silhouette)


def _load_hybrid(out: Path, subject_ids) -> np.ndarray:
    _, rows = rep.read_csv(_need(out / "post" / "hybrid_assignments.csv", "post"))
    lookup = {r[0]: int(r[1]) for r in rows}
    return np.array([lookup[s] for s in subject_ids])


def run_predict(config: PipelineConfig, out: Path) -> None:
    tensor = CohortTensor.load(_need(out / "imputed", "impute"))
    labels = _load_hybrid(out, tensor.subject_ids)
    pc = config.predict
    results = run_early_warning(tensor.filled(), labels, pc.horizons, test_fraction=pc.split,
                                seed=config.seed, config=pc.train_config())
    dest = out / "predict"
    dest.mkdir(parents=True, exist_ok=True)
    names = ew_feature_names(tensor.feature_names)
    for h, res in results.items():
        split = np.full(tensor.n_subjects, "train", dtype=object)
        split[res.test_idx] = "test"
        rep.write_csv(dest / f"features_{h}.csv", ["subject_id", "split", *names],
                      [[s, sp, *row] for s, sp, row in zip(tensor.subject_ids, split, res.features)])
        _dump_json(dest / f"model_{h}.json", {"horizon": h, "feature_names": names, **res.model.to_dict()})
        r = res.report
        rows = [["macro", r.accuracy, r.precision, r.recall, r.auprc]]
        for ci, c in enumerate(r.classes):
            auprc = r.per_class["auprc"][ci]
            rows.append([f"class_{int(c)}", "", r.per_class["precision"][ci], r.per_class["recall"][ci],
                         "" if np.isnan(auprc) else auprc])
        rep.write_csv(dest / f"metrics_{h}.csv", ["scope", "accuracy", "precision", "recall", "auprc"], rows)
        classes = [int(c) for c in r.classes]
        rep.write_csv(dest / f"confusion_{h}.csv", ["true", *[f"pred_{c}" for c in classes]],
                      [[str(c), *row] for c, row in zip(classes, r.confusion)])
        logger.info("predict %dh: accuracy %.3f", h, r.accuracy)


def run_report(config: PipelineConfig, out: Path) -> None:
    dest = out / "report"
    dest.mkdir(parents=True, exist_ok=True)
    header, rows = rep.read_csv(_need(out / "post" / "summary.csv", "post"))
    t_header, t_rows = rep.table1(header, rows)
    rep.write_csv(dest / "table1.csv", t_header, t_rows)

    _, sweep = rep.read_csv(_need(out / "post" / "silhouette_sweep.csv", "post"))
    meta = json.loads(_need(out / "post" / "meta.json", "post").read_text())
    ks = [int(r[0]) for r in sweep]
    scores = [float(r[1]) for r in sweep]
    rep.write_csv(dest / "silhouette.csv", ["k", "mean_score"], list(zip(ks, scores)))
    (dest / "silhouette.svg").write_text(rep.silhouette_svg(ks, scores, meta["k"]))

    tensor = CohortTensor.load(_need(out / "imputed", "impute"))
    norm = FeatureNormalization.from_dict(json.loads(_need(out / "normalization.json", "impute").read_text()))
    values = norm.invert(tensor.filled())
    labels = _load_hybrid(out, tensor.subject_ids)
    traj = rep.trajectory_quantiles(values, labels, tensor.feature_names)
    rep.write_csv(dest / "trajectories.csv", ["sub_phenotype", "feature", "hour", "median", "q25", "q75"], traj)
    (dest / "trajectories.svg").write_text(rep.trajectories_svg(traj, tensor.feature_names, tensor.n_hours))

    for path in sorted((out / "predict").glob("confusion_*.csv")):
        c_header, c_rows = rep.read_csv(path)
        matrix = np.array([[float(v) for v in r[1:]] for r in c_rows])
        classes = [r[0] for r in c_rows]
        h = path.stem.split("_", 1)[1]
        rep.write_csv(dest / path.name, c_header, [[r[0], *map(float, r[1:])] for r in c_rows])
        (dest / f"confusion_{h}.svg").write_text(rep.confusion_svg(matrix, classes, f"confusion at {h} h"))

    if (out / "ground_truth").exists():
        _dump_json(dest / "recovery.json", _recovery(out, tensor, norm, labels))


def _recovery(out: Path, tensor: CohortTensor, norm: FeatureNormalization, labels: np.ndarray) -> dict:
    truth = GroundTruth.load(out / "ground_truth")
    cohort = CohortTensor.load(out / "cohort")
    soft = SoftResult.load(out / "soft")
    tau = np.asarray(json.loads((out / "imputation" / "meta.json").read_text())["tau"])
    return score_recovery(truth, imputed=norm.invert(tensor.filled()), hidden=~cohort.mask,
                          centroids=soft.centroids, archetypes=norm.apply(truth.archetypes),
                          hybrid=labels, abm_values=abm(soft.distances), shifts=tau)


RUNNERS = {
    "synth": run_synth,
    "ingest": run_ingest,
    "impute": run_impute,
    "cluster": run_cluster,
    "post": run_post,
    "predict": run_predict,
    "report": run_report,
}


def run_all(config: PipelineConfig, out: Path) -> None:
    source = "synth" if config.synth is not None else "ingest"
    for stage in (source, "impute", "cluster", "post", "predict", "report"):
        logger.info("stage %s", stage)
        RUNNERS[stage](config, out)
