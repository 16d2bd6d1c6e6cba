"""Per-case inference and the evaluation report (JSON + ROC/per-case CSV)."""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from evaluation.metrics import (
    auc,
    localization_hit,
    roc_points,
    select_youden_threshold,
    sens_spec,
    sensitivity,
    sensitivity_at_specificity,
    specificity,
)
from evaluation.stats import bootstrap_ci, delong_test, permutation_test
from models.backbone import locate_stomach
from models.params import ModelDims, ModelParams
from models.presets import ModelPreset, get_preset
from phantoms.dataset import SPLITS, Dataset
from phantoms.phantom import TUMOR, VolumeSample, generate_sample
from training.cases import segment_case
from training.s4c import tumor_volume, volume_score
from utils.checkpoint import load_checkpoint
from utils.config import EvalConfig, RunConfig
from utils.errors import CimtError, ConfigError, PairingError, StorageError, UndefinedMetric
from utils.rng import derive_seed

logger = logging.getLogger(__name__)

REPORT_VERSION = 1
SIGNIFICANCE = 0.05


@dataclass
class CaseScore:
    id: str
    label: int
    score: float
    pred_tumor_voxels: int
    gt_tumor_voxels: int
    dice: float
    hit: bool
    roi_fallback: bool = False


def score_case(model: ModelPreset, params: ModelParams, sample: VolumeSample, margin: Sequence[int],
               oracle_roi: bool = False, volume_threshold: float = 0.0) -> CaseScore:
    """ROI crop -> forward -> GC score and tumor mask for one case.

    unet-s4c segments the full volume unless the ground-truth ROI is forced.
    """
    fallback = False
    box = None
    if oracle_roi:
        box, fallback = locate_stomach(sample.image, None, margin, oracle_labels=sample.labels)
    elif model.name != "unet-s4c":
        box, fallback = locate_stomach(sample.image, params, margin, prefix="localizer")
    full, prob = segment_case(model, params, sample, box)
    pred_tumor = full == TUMOR
    gt_tumor = sample.labels == TUMOR
    volume = tumor_volume(full)
    score = prob if prob is not None else volume_score(volume, volume_threshold)
    dice, hit = localization_hit(pred_tumor, gt_tumor, sample.label)
    return CaseScore(id=sample.id, label=int(sample.label), score=float(score), pred_tumor_voxels=volume,
                     gt_tumor_voxels=int(gt_tumor.sum()), dice=float(dice), hit=bool(hit), roi_fallback=fallback)


def score_cases(model: ModelPreset, params: ModelParams, samples: Sequence[VolumeSample], margin: Sequence[int],
                oracle_roi: bool = False, volume_threshold: float = 0.0, jobs: int = 1,
                progress: bool = False) -> List[CaseScore]:
    def run(sample):
        try:
            return score_case(model, params, sample, margin, oracle_roi, volume_threshold)
        except CimtError as e:
            raise type(e)(f"case {sample.id}: {e}") from e

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        return list(tqdm(pool.map(run, samples), total=len(samples), desc="Scoring cases",
                         disable=not progress, leave=False))


# ---------------------------------------------------------------------------
# aggregation


def _interval(metric, scores, labels, cfg: EvalConfig, tag: str, strata=None) -> Optional[Dict[str, float]]:
    try:
        return bootstrap_ci(metric, (scores, labels), replicas=cfg.bootstrap_replicas, alpha=cfg.alpha,
                            seed=cfg.seed, strata=strata).to_dict()
    except UndefinedMetric:
        logger.info("%s is undefined on these cases", tag)
        return None


def size_strata(cases: Sequence[CaseScore], threshold: float) -> List[Dict[str, Any]]:
    """Detection and localization counts per quartile of ground-truth tumor volume."""
    positives = [c for c in cases if c.label == 1]
    if not positives:
        return []
    volumes = np.array([c.gt_tumor_voxels for c in positives], dtype=float)
    edges = np.quantile(volumes, [0.25, 0.5, 0.75])
    bins = np.searchsorted(edges, volumes, side="left")
    rows = []
    for q in range(4):
        members = [c for c, b in zip(positives, bins) if b == q]
        detected = sum(c.score > threshold for c in members)
        localized = sum(c.hit for c in members)
        n = len(members)
        rows.append({
            "stratum": f"Q{q + 1}",
            "volume_range": [float(min((c.gt_tumor_voxels for c in members), default=0)),
                             float(max((c.gt_tumor_voxels for c in members), default=0))],
            "n": n,
            "detected": int(detected),
            "detection_rate": detected / n if n else None,
            "localized": int(localized),
            "localization_rate": localized / n if n else None,
        })
    return rows


def summarize(cases: Sequence[CaseScore], cfg: EvalConfig, threshold: Optional[float] = None,
              header: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Aggregate case scores into the report document.

    Without a `threshold`, the Youden threshold of these very cases is used.
    """
    scores = np.array([c.score for c in cases], dtype=float)
    labels = np.array([c.label for c in cases], dtype=int)
    n_pos = int(labels.sum())
    n_neg = int(labels.size - n_pos)
    threshold_source = "checkpoint"
    if threshold is None:
        threshold = select_youden_threshold(scores, labels)
        threshold_source = "youden-on-cases"
    strata = labels if cfg.stratified_bootstrap else None

    sens, spec = sens_spec(scores, labels, threshold)
    report: Dict[str, Any] = dict(header or {})
    report.update({
        "version": REPORT_VERSION,
        "n": {"total": int(labels.size), "positive": n_pos, "negative": n_neg},
        "threshold": {"value": float(threshold), "source": threshold_source},
        "auc": _interval(auc, scores, labels, cfg, "AUC", strata),
        "sensitivity": _interval(lambda s, y: sensitivity(s, y, threshold), scores, labels, cfg,
                                 "sensitivity", strata),
        "specificity": _interval(lambda s, y: specificity(s, y, threshold), scores, labels, cfg,
                                 "specificity", strata),
        "undefined": sorted(k for k, v in (("auc", n_pos and n_neg), ("sensitivity", sens is not None),
                                           ("specificity", spec is not None)) if not v),
        "eval": {"bootstrap_replicas": cfg.bootstrap_replicas, "alpha": cfg.alpha, "seed": cfg.seed,
                 "permutation_replicas": cfg.permutation_replicas,
                 "stratified_bootstrap": cfg.stratified_bootstrap},
    })
    report["sens_at_spec"] = []
    for target in cfg.spec_targets:
        value, at = sensitivity_at_specificity(scores, labels, target)
        report["sens_at_spec"].append({"target_specificity": target, "sensitivity": value, "threshold": at})

    positives = [c for c in cases if c.label == 1]
    hits = sum(c.hit for c in positives)
    report["localization"] = {"hits": int(hits), "n": len(positives),
                              "rate": hits / len(positives) if positives else None}
    report["strata"] = size_strata(cases, threshold)
    fallback = sorted(c.id for c in cases if c.roi_fallback)
    report["flags"] = {"roi_fallback_cases": fallback}
    report["cases"] = [asdict(c) for c in cases]
    return report


def negative_cohort(dataset: Dataset, size: int) -> List[VolumeSample]:
    """All-normal cohort drawn from seeds disjoint from every split."""
    index = dataset.index
    return [
        generate_sample(derive_seed(index.base_seed, "negative-cohort", i), index.difficulty, index.extents,
                        positive=False, sample_id=f"negative-{i:04d}")
        for i in range(size)
    ]


def build_report(checkpoint_dir: Path, dataset: Dataset, split: str = "test", eval_cfg: Optional[EvalConfig] = None,
                 oracle_roi: bool = False, all_negative_cohort: bool = False, seed: Optional[int] = None,
                 jobs: int = 1, progress: bool = False) -> Dict[str, Any]:
    """Score every case of `split` with a trained checkpoint and aggregate the report.

    The operating threshold is the one the checkpoint selected on validation;
    `seed` overrides the resampling seed of the evaluation config.
    """
    ckpt = load_checkpoint(checkpoint_dir)
    run_cfg = RunConfig.from_dict(ckpt.config)
    eval_cfg = eval_cfg or run_cfg.eval
    if seed is not None:
        eval_cfg = replace(eval_cfg, seed=int(seed))
    model = get_preset(ckpt.preset, ModelDims.from_config(run_cfg.model))
    model.check_checkpoint(ckpt.names())
    if not ckpt.extra.get("final", False):
        logger.warning("checkpoint in %s is an intermediate best; training did not finish", checkpoint_dir)
    params = ModelParams.from_arrays(ckpt.tensors)
    threshold = ckpt.extra.get("operating_threshold")
    margin = ckpt.extra.get("margin", run_cfg.model.margin)

    if all_negative_cohort:
        samples = negative_cohort(dataset, eval_cfg.negative_cohort_size)
        split = "negative-cohort"
    else:
        if split not in SPLITS:
            raise ConfigError(f"unknown split {split!r}; choose from {list(SPLITS)}")
        samples = dataset.samples(split)
        if not samples:
            raise ConfigError(f"the {split} split is empty")
    logger.info("evaluating %s on %d %s cases", ckpt.preset, len(samples), split)
    cases = score_cases(model, params, samples, margin, oracle_roi=oracle_roi or eval_cfg.oracle_roi,
                        volume_threshold=float(ckpt.extra.get("volume_threshold", 0.0)), jobs=jobs,
                        progress=progress)
    header = {
        "preset": ckpt.preset,
        "config_hash": ckpt.config_hash,
        "dataset_config_hash": dataset.config_hash,
        "split": split,
        "oracle_roi": bool(oracle_roi or eval_cfg.oracle_roi),
    }
    return summarize(cases, eval_cfg, threshold=threshold, header=header)


# ---------------------------------------------------------------------------
# files


def save_report(report: Dict[str, Any], out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "report.json"
        path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        cases = pd.DataFrame(report["cases"])
        cases.to_csv(out_dir / "cases.csv", index=False)
        scores = cases["score"].to_numpy() if len(cases) else np.array([])
        labels = cases["label"].to_numpy() if len(cases) else np.array([])
        try:
            fpr, tpr, thresholds = roc_points(scores, labels)
            pd.DataFrame({"fpr": fpr, "tpr": tpr, "threshold": thresholds}).to_csv(out_dir / "roc.csv", index=False)
        except UndefinedMetric:
            logger.info("single-class cohort; no ROC curve written")
    except OSError as e:
        raise StorageError(f"cannot write report to {out_dir}: {e}") from None
    return path


def load_report(path: Path) -> Dict[str, Any]:
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    try:
        report = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise StorageError(f"report not found: {path}") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise StorageError(f"corrupt report {path}: {e}") from None
    if report.get("version") != REPORT_VERSION or "cases" not in report:
        raise StorageError(f"{path} is not a version-{REPORT_VERSION} evaluation report")
    return report


# ---------------------------------------------------------------------------
# model vs model


def compare_reports(report_a: Dict[str, Any], report_b: Dict[str, Any], replicas: int = 10000,
                    seed: int = 0) -> pd.DataFrame:
    """AUC difference with a DeLong p-value, sens/spec differences with permutation p-values.

    Markers follow the table convention: a dagger for DeLong p < 0.05, an
    asterisk for permutation p < 0.05.
    """
    cases_a = {c["id"]: c for c in report_a["cases"]}
    cases_b = {c["id"]: c for c in report_b["cases"]}
    if set(cases_a) != set(cases_b):
        missing = sorted(set(cases_a) ^ set(cases_b))
        raise PairingError(f"reports cover different cases ({len(missing)} unpaired, e.g. {missing[0]})")
    ids = sorted(cases_a)
    if any(cases_a[i]["label"] != cases_b[i]["label"] for i in ids):
        raise PairingError("reports disagree on case labels")
    labels = np.array([cases_a[i]["label"] for i in ids])
    scores_a = np.array([cases_a[i]["score"] for i in ids], dtype=float)
    scores_b = np.array([cases_b[i]["score"] for i in ids], dtype=float)
    thr_a, thr_b = report_a["threshold"]["value"], report_b["threshold"]["value"]
    preds_a, preds_b = (scores_a > thr_a).astype(int), (scores_b > thr_b).astype(int)

    rows = []
    try:
        dl = delong_test(scores_a, scores_b, labels)
        rows.append(("AUC", dl.auc_a, dl.auc_b, "DeLong", dl.p, "†" if dl.p < SIGNIFICANCE else ""))
    except UndefinedMetric:
        rows.append(("AUC", None, None, "DeLong", None, ""))
    for metric, name in (("sens", "Sensitivity"), ("spec", "Specificity")):
        a = sens_spec(scores_a, labels, thr_a)[0 if metric == "sens" else 1]
        b = sens_spec(scores_b, labels, thr_b)[0 if metric == "sens" else 1]
        if a is None or b is None:
            rows.append((name, a, b, "permutation", None, ""))
            continue
        p = permutation_test(preds_a, preds_b, labels, metric=metric, replicas=replicas, seed=seed)
        rows.append((name, a, b, "permutation", p, "*" if p < SIGNIFICANCE else ""))
    table = pd.DataFrame(rows, columns=["metric", "a", "b", "test", "p", "marker"])
    table["diff"] = [None if r[1] is None or r[2] is None else r[1] - r[2] for r in rows]
    return table[["metric", "a", "b", "diff", "test", "p", "marker"]]
