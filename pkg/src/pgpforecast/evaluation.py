"""Subject-independent cross-validation and forecast metrics (MAE, WES)."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats as sps

from .cohort import (
    Cohort,
    NormalizationStats,
    Subject,
    build_training_rows,
    feature_fill_values,
    fit_normalizer,
    impute_locf,
    subject_inputs,
    subject_rows,
)
from .gp import GaussianForecast, OptimizerConfig, PopulationModel, fit_population, predict_sgp
from .personalize import TargetHistory, predict_joint, predict_pgp, predict_tgp

log = logging.getLogger(__name__)

MODELS = ("sgp", "pgp", "tgp", "joint")
CI_Z = 0.67
VISIT_CAPS = (5, 10, 15, 21)
WES_MAX_WEIGHT = 1e12
RECORD_FIELDS = ("subject_id", "t", "h", "model", "mean", "variance", "ci_lo", "ci_hi",
                 "truth", "observed")


class ConfigError(ValueError):
    pass


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class FoldSplit:
    folds: tuple
    seed: int

    @property
    def k(self) -> int:
        return len(self.folds)

    def fold_of(self) -> dict:
        return {sid: i for i, f in enumerate(self.folds) for sid in f}

    def train_test(self, i: int) -> tuple[list, list]:
        train = [sid for j, f in enumerate(self.folds) if j != i for sid in f]
        return train, list(self.folds[i])


@dataclass(frozen=True)
class PredictionRecord:
    subject_id: str
    t: int
    h: int
    model: str
    mean: float
    variance: float
    ci_lower: float
    ci_upper: float
    truth: float | None
    truth_observed: bool

    def error(self) -> float:
        return abs(self.truth - self.mean)


def split_folds(subject_ids, k: int, seed: int) -> FoldSplit:
    ids = list(subject_ids)
    if k <= 1:
        raise ConfigError(f"need at least 2 folds, got {k}")
    if k > len(ids):
        raise ConfigError(f"{k} folds requested for {len(ids)} subjects")
    perm = np.random.default_rng(seed).permutation(len(ids))
    folds = tuple(tuple(ids[j] for j in chunk) for chunk in np.array_split(perm, k))
    return FoldSplit(folds, seed)


def make_record(sid, t, h, model, mean, variance, truth, observed, z=CI_Z, clamp=False):
    if clamp:
        mean = min(max(mean, 0.0), 85.0)
    half = z * math.sqrt(variance)
    return PredictionRecord(sid, t, h, model, float(mean), float(variance),
                            float(mean - half), float(mean + half),
                            float(truth) if observed else None, bool(observed))


def forecast_anchor(m: PopulationModel, s: Subject, stats: NormalizationStats, t: int,
                    H: int, inputs=None) -> dict[str, GaussianForecast]:
    """All four forecasts from anchor visit t (1-based), using visits 1..t only."""
    if inputs is None:
        inputs = subject_inputs(s, stats)
    u = inputs[t - 1]
    X, Y, anchors = subject_rows(s, stats, H, upto=t)
    hist = TargetHistory(X, Y, s.id, t, anchors)
    sgp = predict_sgp(m, u)
    pgp = predict_pgp(m, hist, u)
    if hist.empty:
        # no personal data yet: the target-only model falls back to the population one
        tgp = GaussianForecast(sgp.means, sgp.variance, fallback=True)
        joint = predict_joint(pgp, None)
    else:
        tgp = predict_tgp(m.hyper, hist, u, m.scaler)
        joint = predict_joint(pgp, tgp)
    return {"sgp": sgp, "pgp": pgp, "tgp": tgp, "joint": joint}


def evaluate_subject(m: PopulationModel, s: Subject, stats: NormalizationStats, H: int = 4,
                     models=MODELS, clamp: bool = False, z: float = CI_Z) -> list[PredictionRecord]:
    """Sequential forecasting for one held-out (imputed) subject."""
    records = []
    inputs = subject_inputs(s, stats)
    truth_ok = s.observed & s.score_observed
    for t in range(1, s.T):
        fc = forecast_anchor(m, s, stats, t, H, inputs)
        for name in models:
            f = fc[name]
            for h in range(1, min(H, s.T - t) + 1):
                i = t - 1 + h
                records.append(make_record(s.id, t, h, name, f.means[h - 1], f.variance,
                                           s.scores[i], truth_ok[i], z=z, clamp=clamp))
    return records


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

def _observed(records):
    out = [r for r in records if r.truth_observed]
    if not out:
        raise UndefinedMetricError("no records with observed truth")
    return out


def mae(records) -> float:
    obs = _observed(records)
    return float(np.mean([abs(r.truth - r.mean) for r in obs]))


def wes(records, z: float = CI_Z) -> float:
    """Weighted error score with weights 1 / (CI width).

    The width is taken as 2*z*sqrt(variance), which is what the stored bounds
    encode, so equal variances give bitwise-equal weights and WES == MAE.
    """
    obs = _observed(records)
    err = np.array([abs(r.truth - r.mean) for r in obs])
    width = 2 * z * np.sqrt([r.variance for r in obs])
    with np.errstate(divide="ignore"):
        w = np.where(width > 0, 1.0 / width, np.inf)
    if np.any(w > WES_MAX_WEIGHT):
        warnings.warn(f"WES weights capped at {WES_MAX_WEIGHT:g} for zero-width intervals",
                      RuntimeWarning, stacklevel=2)
        w = np.minimum(w, WES_MAX_WEIGHT)
    w = w / w.max()
    return float(np.sum(w * err) / np.sum(w))


def paired_ttest(a, b) -> tuple[float, float]:
    """Two-sided paired t-test; returns (statistic, p-value)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.size < 2:
        raise ValueError("paired t-test needs two equal-length samples of size >= 2")
    if np.allclose(a, b, rtol=0, atol=0):
        return 0.0, 1.0
    res = sps.ttest_rel(a, b)
    return float(res.statistic), float(res.pvalue)


def _mean_sd(values) -> dict:
    v = np.asarray(values, dtype=float)
    sd = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    return {"mean": float(np.mean(v)), "sd": sd}


@dataclass
class MetricReport:
    models: list
    horizons: list
    n_folds: int
    table: dict = field(default_factory=dict)
    significance: dict = field(default_factory=dict)
    visit_caps: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"models": self.models, "horizons": self.horizons, "n_folds": self.n_folds,
                "table": self.table, "significance": self.significance,
                "visit_caps": self.visit_caps}

    def avg(self, model: str, metric: str = "mae") -> float:
        return self.table[model][metric]["avg"]["mean"]

    def cap_avg(self, model: str, cap: int) -> float | None:
        return self.visit_caps[model][str(cap)]["avg"]

    def format_table(self) -> str:
        cols = [f"t+{h}" for h in self.horizons] + ["avg"]
        lines = []
        for metric in ("mae", "wes"):
            lines.append(f"{metric.upper():<8}" + "".join(f"{c:>16}" for c in cols))
            for m in self.models:
                cells = []
                for c in cols:
                    e = self.table[m][metric][c]
                    star = "*" if self.significance.get(metric, {}).get(c, {}).get("best", [None])[0] == m \
                        and self.significance[metric][c]["significant"] else ""
                    cells.append(f"{e['mean']:.2f}+-{e['sd']:.2f}{star}".rjust(16))
                lines.append(f"{m:<8}" + "".join(cells))
            lines.append("")
        return "\n".join(lines).rstrip()


def aggregate(records, split: FoldSplit, models=MODELS, H: int = 4,
              caps=VISIT_CAPS) -> MetricReport:
    """Per-fold metrics, mean +- SD across folds, visit-cap curves and paired t-tests."""
    fold_of = split.fold_of()
    k = split.k
    buckets: dict = {}
    for r in records:
        buckets.setdefault((r.model, fold_of[r.subject_id], r.h), []).append(r)

    def fold_metric(fn, model, h, keep=None):
        out = []
        for f in range(k):
            recs = buckets.get((model, f, h), [])
            if keep is not None:
                recs = [r for r in recs if keep(r)]
            try:
                out.append(fn(recs))
            except UndefinedMetricError:
                raise UndefinedMetricError(
                    f"fold {f}: model {model} horizon t+{h} has no observed truths") from None
        return out

    horizons = list(range(1, H + 1))
    report = MetricReport(models=list(models), horizons=horizons, n_folds=k)
    per_fold = {}
    for m in models:
        report.table[m] = {}
        for name, fn in (("mae", mae), ("wes", wes)):
            cols = {}
            allv = []
            for h in horizons:
                vals = fold_metric(fn, m, h)
                per_fold[(m, name, f"t+{h}")] = vals
                allv.append(vals)
                cols[f"t+{h}"] = {**_mean_sd(vals), "folds": vals}
            arr = np.array(allv)
            per_fold[(m, name, "avg")] = arr.mean(axis=0).tolist()
            cols["avg"] = {"mean": float(np.mean([cols[f't+{h}']['mean'] for h in horizons])),
                           "sd": _mean_sd(arr.ravel())["sd"],
                           "folds": per_fold[(m, name, "avg")]}
            report.table[m][name] = cols

    for name in ("mae", "wes"):
        report.significance[name] = {}
        for c in [f"t+{h}" for h in horizons] + ["avg"]:
            if len(models) < 2 or k < 2:
                continue
            ranked = sorted(models, key=lambda m: (report.table[m][name][c]["mean"], m))
            a, b = ranked[:2]
            _, p = paired_ttest(per_fold[(a, name, c)], per_fold[(b, name, c)])
            report.significance[name][c] = {"best": [a, b], "p_value": p,
                                            "significant": bool(p < 0.05)}

    for m in models:
        report.visit_caps[m] = {}
        for cap in caps:
            entry = {}
            for h in horizons:
                try:
                    vals = fold_metric(mae, m, h, keep=lambda r, c=cap: r.t <= c)
                    entry[f"t+{h}"] = float(np.mean(vals))
                except UndefinedMetricError:
                    entry[f"t+{h}"] = None
            present = [v for v in entry.values() if v is not None]
            entry["avg"] = float(np.mean(present)) if present else None
            report.visit_caps[m][str(cap)] = entry
    return report


# --------------------------------------------------------------------------
# cross-validation driver
# --------------------------------------------------------------------------

@dataclass
class CVConfig:
    folds: int = 10
    horizon: int = 4
    models: tuple = MODELS
    split_seed: int = 0
    opt_seed: int = 0
    restarts: int = 5
    normalize: bool = True
    clamp: bool = False


@dataclass
class FoldResult:
    fold: int
    model: PopulationModel
    stats: NormalizationStats
    records: list
    n_train_rows: int


def prepare_fold(cohort: Cohort, train_ids, normalize: bool = True, fold: str | None = None):
    """Impute training subjects with fold-level fill values and fit normalization on them."""
    raw_train = cohort.select(train_ids)
    fill = feature_fill_values(raw_train)
    train = [impute_locf(s, fill) for s in raw_train]
    if normalize:
        stats = fit_normalizer(train, fold=fold)
    else:
        stats = NormalizationStats.identity(cohort.schema.dimension)
    return train, stats, fill


def run_fold(cohort: Cohort, split: FoldSplit, i: int, cfg: CVConfig) -> FoldResult:
    train_ids, test_ids = split.train_test(i)
    train, stats, fill = prepare_fold(cohort, train_ids, cfg.normalize, fold=str(i))
    ts = build_training_rows(train, stats, cfg.horizon)
    opt = OptimizerConfig(restarts=cfg.restarts, seed=cfg.opt_seed * 1000 + i)
    model = fit_population(ts, opt, scaler=stats.scaler)
    log.info("fold %d: %d training rows, hyper=%s", i, ts.n, model.hyper.to_dict())
    records = []
    for s in cohort.select(test_ids):
        s = impute_locf(s, fill)
        records.extend(evaluate_subject(model, s, stats, cfg.horizon, cfg.models, cfg.clamp))
    return FoldResult(i, model, stats, records, ts.n)


def cross_validate(cohort: Cohort, cfg: CVConfig):
    """Returns (split, fold results, all records in fold order)."""
    split = split_folds(cohort.ids, cfg.folds, cfg.split_seed)
    results = [run_fold(cohort, split, i, cfg) for i in range(split.k)]
    records = [r for res in results for r in res.records]
    return split, results, records


# --------------------------------------------------------------------------
# record stream I/O
# --------------------------------------------------------------------------

def write_records(records, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_FIELDS)
        for r in records:
            w.writerow([r.subject_id, r.t, r.h, r.model, repr(r.mean), repr(r.variance),
                        repr(r.ci_lower), repr(r.ci_upper),
                        "" if r.truth is None else repr(r.truth), int(r.truth_observed)])


def read_records(path) -> list[PredictionRecord]:
    out = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RECORD_FIELDS:
            raise ValueError(f"{path}: unexpected record header {reader.fieldnames}")
        for row in reader:
            obs = row["observed"] == "1"
            out.append(PredictionRecord(
                row["subject_id"], int(row["t"]), int(row["h"]), row["model"],
                float(row["mean"]), float(row["variance"]), float(row["ci_lo"]),
                float(row["ci_hi"]), float(row["truth"]) if row["truth"] else None, obs))
    return out
