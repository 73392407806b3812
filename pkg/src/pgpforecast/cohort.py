"""Longitudinal cohort data: CSV ingest, LOCF imputation, z-normalization,
supervised row construction and a seeded synthetic cohort generator.

Missing values are carried as NaN throughout. Months are absolute from
baseline and live on a 6-month grid.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .gp import TargetScaler, TrainingSet

VISIT_SPACING = 6
SCORE_MIN, SCORE_MAX = 0.0, 85.0
MODALITIES = ("demographics", "genetics", "cognitive", "csf", "mri", "dti")
ID_COLUMNS = ("subject_id", "month", "adas13")


class CohortFormatError(ValueError):
    """Malformed CSV content."""


class CohortValidationError(ValueError):
    """Well-formed CSV whose values violate the cohort invariants."""


@dataclass(frozen=True)
class FeatureSchema:
    names: tuple
    modalities: tuple = ()

    def __post_init__(self):
        names = tuple(self.names)
        if len(set(names)) != len(names):
            raise ValueError("feature names must be unique")
        mods = tuple(self.modalities) or tuple(_guess_modality(n) for n in names)
        if len(mods) != len(names):
            raise ValueError("one modality tag per feature required")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "modalities", mods)

    @property
    def dimension(self) -> int:
        return len(self.names)

    @property
    def header(self) -> list[str]:
        return list(ID_COLUMNS) + list(self.names)


def _guess_modality(name: str) -> str:
    prefix = name.split("_", 1)[0].lower()
    return prefix if prefix in MODALITIES else "other"


@dataclass(frozen=True)
class Visit:
    month: int
    features: np.ndarray
    score: float
    observed: bool = True

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.features)


@dataclass
class Subject:
    """One subject's visits as arrays, ordered by month.

    ``observed`` marks real visit rows (False for slots created by gridding);
    ``score_observed`` marks rows whose score cell was actually recorded.
    """

    id: str
    months: np.ndarray
    features: np.ndarray
    scores: np.ndarray
    observed: np.ndarray
    score_observed: np.ndarray
    imputation: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return len(self.months)

    @property
    def visits(self) -> list[Visit]:
        return [Visit(int(m), self.features[i], float(self.scores[i]), bool(self.observed[i]))
                for i, m in enumerate(self.months)]

    def missing_fraction(self) -> float:
        rows = self.features[self.observed]
        return float(np.mean(np.isnan(rows))) if rows.size else 1.0


@dataclass
class Cohort:
    schema: FeatureSchema
    subjects: list

    def __post_init__(self):
        self._index = {s.id: i for i, s in enumerate(self.subjects)}

    def __len__(self):
        return len(self.subjects)

    def __getitem__(self, sid: str) -> Subject:
        try:
            return self.subjects[self._index[sid]]
        except KeyError:
            raise KeyError(f"unknown subject id {sid!r}") from None

    def __contains__(self, sid) -> bool:
        return sid in self._index

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.subjects]

    def select(self, ids) -> list[Subject]:
        return [self[i] for i in ids]


def subject_from_visits(sid: str, visits: list[Visit]) -> Subject:
    visits = sorted(visits, key=lambda v: v.month)
    feats = np.array([v.features for v in visits], dtype=float)
    scores = np.array([v.score for v in visits], dtype=float)
    return Subject(
        id=sid,
        months=np.array([v.month for v in visits], dtype=int),
        features=feats.reshape(len(visits), -1),
        scores=scores,
        observed=np.array([v.observed for v in visits], dtype=bool),
        score_observed=~np.isnan(scores),
    )


# --------------------------------------------------------------------------
# CSV ingest / export
# --------------------------------------------------------------------------

def _parse_float(cell: str, lineno: int, col: str) -> float:
    cell = cell.strip()
    if cell == "":
        return math.nan
    try:
        v = float(cell)
    except ValueError:
        raise CohortFormatError(f"line {lineno}: column {col!r}: cannot parse {cell!r}") from None
    if not math.isfinite(v):
        raise CohortFormatError(f"line {lineno}: column {col!r}: non-finite value {cell!r}")
    return v


def load_cohort(path, schema: FeatureSchema | None = None) -> Cohort:
    """Read a cohort CSV (``subject_id,month,adas13,<features...>``)."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [c.strip() for c in next(reader)]
        except StopIteration:
            raise CohortFormatError(f"{path}: empty file") from None
        if tuple(header[:3]) != ID_COLUMNS:
            raise CohortFormatError(
                f"line 1: header must start with {','.join(ID_COLUMNS)}, got {header[:3]}")
        names = tuple(header[3:])
        if schema is None:
            schema = FeatureSchema(names)
        elif names != schema.names:
            raise CohortFormatError("line 1: feature columns do not match the schema")
        by_subject: dict[str, list[Visit]] = {}
        seen = set()
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise CohortFormatError(
                    f"line {lineno}: expected {len(header)} fields, got {len(row)}")
            sid = row[0].strip()
            if not sid:
                raise CohortFormatError(f"line {lineno}: empty subject_id")
            month = _parse_float(row[1], lineno, "month")
            if math.isnan(month) or month != int(month) or month < 0:
                raise CohortValidationError(f"line {lineno}: invalid month {row[1]!r}")
            month = int(month)
            if month % VISIT_SPACING:
                raise CohortValidationError(
                    f"line {lineno}: month {month} is not a multiple of {VISIT_SPACING}")
            score = _parse_float(row[2], lineno, "adas13")
            if not math.isnan(score) and not SCORE_MIN <= score <= SCORE_MAX:
                raise CohortValidationError(
                    f"line {lineno}: adas13 {score} outside [{SCORE_MIN:g}, {SCORE_MAX:g}]")
            if (sid, month) in seen:
                raise CohortValidationError(f"line {lineno}: duplicate visit {sid} month {month}")
            seen.add((sid, month))
            feats = np.array([_parse_float(c, lineno, n) for c, n in zip(row[3:], names)])
            by_subject.setdefault(sid, []).append(Visit(month, feats, score))
    subjects = [subject_from_visits(sid, vs) for sid, vs in by_subject.items()]
    return Cohort(schema, subjects)


def _fmt(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


def write_cohort(cohort: Cohort, path) -> None:
    """Write observed visit rows back to CSV; imputed slots are not exported."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cohort.schema.header)
        for s in cohort.subjects:
            for i in np.flatnonzero(s.observed):
                score = s.scores[i] if s.score_observed[i] else math.nan
                w.writerow([s.id, int(s.months[i]), _fmt(score)]
                           + [_fmt(x) for x in s.features[i]])


def filter_eligible(cohort: Cohort, min_visits: int = 11,
                    max_missing: float = 0.825) -> Cohort:
    """Keep subjects with enough real visits and at most ``max_missing`` missing feature cells."""
    keep = [s for s in cohort.subjects
            if int(s.observed.sum()) >= min_visits and s.missing_fraction() <= max_missing
            and s.score_observed.any()]
    return Cohort(cohort.schema, keep)


# --------------------------------------------------------------------------
# imputation
# --------------------------------------------------------------------------

def _locf_column(values: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """Carry the last observation forward; leading gaps take the first observation."""
    out = values.copy()
    obs = np.flatnonzero(~np.isnan(values))
    first = obs[0]
    backfilled = list(range(first))
    out[:first] = values[first]
    last = values[first]
    for i in range(first + 1, len(values)):
        if np.isnan(out[i]):
            out[i] = last
        else:
            last = out[i]
    return out, backfilled


def impute_locf(s: Subject, fill_values=None) -> Subject:
    """Grid the subject onto 6-month slots and fill gaps from the nearest past visit.

    Interior gaps only ever use past values. Leading gaps (no past value) are
    backfilled from the first observation and flagged. A feature never observed
    for this subject takes ``fill_values[j]`` (fold-level means) and is flagged.
    """
    if not s.score_observed.any():
        raise ValueError(f"subject {s.id}: no observed score to impute from")
    months = np.arange(s.months.min(), s.months.max() + 1, VISIT_SPACING)
    T, d = len(months), s.features.shape[1]
    pos = {int(m): i for i, m in enumerate(months)}
    idx = np.array([pos[int(m)] for m in s.months], dtype=int)

    feats = np.full((T, d), np.nan)
    scores = np.full(T, np.nan)
    observed = np.zeros(T, dtype=bool)
    score_obs = np.zeros(T, dtype=bool)
    feats[idx] = s.features
    scores[idx] = np.where(s.score_observed, s.scores, np.nan)
    observed[idx] = s.observed
    score_obs[idx] = s.score_observed

    report = {"gridded_months": [int(m) for m in months[~observed]],
              "backfilled": {}, "mean_filled": []}
    scores, back = _locf_column(scores)
    if back:
        report["backfilled"]["adas13"] = [int(months[i]) for i in back]
    for j in range(d):
        col = feats[:, j]
        if np.isnan(col).all():
            if fill_values is None:
                raise ValueError(f"subject {s.id}: feature {j} never observed and no fill values given")
            feats[:, j] = fill_values[j]
            report["mean_filled"].append(j)
            continue
        feats[:, j], back = _locf_column(col)
        if back:
            report["backfilled"][str(j)] = [int(months[i]) for i in back]
    return Subject(id=s.id, months=months, features=feats, scores=scores,
                   observed=observed, score_observed=score_obs, imputation=report)


def feature_fill_values(subjects) -> np.ndarray:
    """Per-feature mean over the recorded cells of a set of (raw) subjects."""
    X = np.vstack([s.features[s.observed] for s in subjects])
    with np.errstate(invalid="ignore"):
        counts = np.sum(~np.isnan(X), axis=0)
        means = np.nansum(X, axis=0) / np.maximum(counts, 1)
    return np.where(counts > 0, means, 0.0)


def imputation_report(subjects) -> dict:
    return {s.id: s.imputation for s in subjects}


# --------------------------------------------------------------------------
# normalization
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class NormalizationStats:
    feature_mean: np.ndarray
    feature_std: np.ndarray
    target_mean: float
    target_std: float
    fold: str | None = None
    constant_features: tuple = ()

    @classmethod
    def identity(cls, d: int) -> "NormalizationStats":
        return cls(np.zeros(d), np.ones(d), 0.0, 1.0, fold="identity")

    @property
    def scaler(self) -> TargetScaler:
        return TargetScaler(self.target_mean, self.target_std)

    def apply_features(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.feature_mean) / self.feature_std

    def invert_features(self, Z) -> np.ndarray:
        return np.asarray(Z, dtype=float) * self.feature_std + self.feature_mean

    def apply_target(self, y) -> np.ndarray:
        return (np.asarray(y, dtype=float) - self.target_mean) / self.target_std

    def invert_target(self, z) -> np.ndarray:
        return np.asarray(z, dtype=float) * self.target_std + self.target_mean

    def to_dict(self) -> dict:
        return {"feature_mean": self.feature_mean.tolist(),
                "feature_std": self.feature_std.tolist(),
                "target_mean": self.target_mean, "target_std": self.target_std,
                "fold": self.fold, "constant_features": list(self.constant_features)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(np.asarray(d["feature_mean"], float), np.asarray(d["feature_std"], float),
                   float(d["target_mean"]), float(d["target_std"]), d.get("fold"),
                   tuple(d.get("constant_features", ())))


def _safe_std(x, axis=None):
    sd = np.nanstd(x, axis=axis)
    return np.where(sd > 0, sd, 1.0)


def fit_normalizer(subjects, fold: str | None = None) -> NormalizationStats:
    """Z-score statistics over the real visit rows of a training fold."""
    subjects = list(subjects)
    if not subjects:
        raise ValueError("cannot fit normalization on an empty fold")
    X = np.vstack([s.features[s.observed] for s in subjects])
    y = np.concatenate([s.scores[s.observed] for s in subjects])
    mean = np.nanmean(X, axis=0)
    sd = np.nanstd(X, axis=0)
    constant = tuple(int(j) for j in np.flatnonzero(~(sd > 0)))
    sd = np.where(sd > 0, sd, 1.0)
    return NormalizationStats(mean, sd, float(np.nanmean(y)), float(_safe_std(y)),
                              fold=fold, constant_features=constant)


# --------------------------------------------------------------------------
# supervised rows
# --------------------------------------------------------------------------

def subject_rows(s: Subject, stats: NormalizationStats, H: int, upto: int | None = None):
    """Full-window rows of one gridded subject.

    Returns ``(inputs, targets, anchors)`` with 1-based anchor visits t such
    that t + H <= ``upto`` (default: the subject's last visit).
    """
    T = s.T if upto is None else min(upto, s.T)
    X = stats.apply_features(s.features)
    y = stats.apply_target(s.scores)
    anchors = list(range(1, T - H + 1))
    if not anchors:
        return np.empty((0, X.shape[1] + 1)), np.empty((0, H)), []
    idx = np.array(anchors) - 1
    inputs = np.column_stack([X[idx], y[idx]])
    targets = np.stack([y[idx + k] for k in range(1, H + 1)], axis=1)
    return inputs, targets, anchors


def subject_inputs(s: Subject, stats: NormalizationStats) -> np.ndarray:
    """Standardized test inputs u_t = [features_t, score_t] for every gridded visit."""
    return np.column_stack([stats.apply_features(s.features), stats.apply_target(s.scores)])


def build_training_rows(subjects, stats: NormalizationStats, H: int = 4) -> TrainingSet:
    if H < 1:
        raise ValueError("H must be at least 1")
    ins, tgs, prov = [], [], []
    for s in subjects:
        u, y, anchors = subject_rows(s, stats, H)
        ins.append(u)
        tgs.append(y)
        prov.extend((s.id, t) for t in anchors)
    d = len(stats.feature_mean) + 1
    inputs = np.vstack(ins) if ins else np.empty((0, d))
    targets = np.vstack(tgs) if tgs else np.empty((0, H))
    return TrainingSet(inputs, targets, prov)


# --------------------------------------------------------------------------
# synthetic cohort
# --------------------------------------------------------------------------

@dataclass
class SynthConfig:
    n_subjects: int = 100
    n_visits: int = 12
    n_features: int = 20
    informative_fraction: float = 0.5
    missing_rate: float = 0.2
    seed: int = 0
    # latent trajectory parameters
    baseline_mean: float = 18.0
    baseline_sd: float = 7.0
    rate_mean: float = 0.1
    rate_sd: float = 0.15
    ar_coef: float = 0.6
    ar_sd: float = 1.5
    # deviation at enrollment; None starts the AR(1) process at stationarity
    initial_sd: float | None = 14.0
    subject_feature_sd: float = 2.0
    feature_noise_sd: float = 0.3
    # Euclidean norm of each loading row over the informative features; None keeps raw N(0,1) draws
    loading_norm: float | None = 1.0

    def validate(self, H: int = 4) -> None:
        if not 0.0 <= self.missing_rate <= 1.0:
            raise ValueError(f"missing_rate must be in [0, 1], got {self.missing_rate}")
        if not 0.0 <= self.informative_fraction <= 1.0:
            raise ValueError(
                f"informative_fraction must be in [0, 1], got {self.informative_fraction}")
        if self.n_subjects < 1 or self.n_features < 1:
            raise ValueError("need at least one subject and one feature")
        if self.n_visits < H + 1:
            raise ValueError(f"n_visits must be at least H+1={H + 1}")


def generate_synthetic(cfg: SynthConfig, H: int = 4) -> Cohort:
    """Seeded cohort with linear-plus-AR(1) score trajectories.

    Subject i has baseline b_i and per-visit rate r_i; its score at visit k is
    clamp(b_i + r_i*k + e_k, 0, 85) with AR(1) noise e_k. Informative features
    are noisy linear functions of the standardized (b_i, r_i); the rest are
    noise. Each feature has a subject-specific level that persists over visits.
    """
    cfg.validate(H)
    rng = np.random.default_rng(cfg.seed)
    d, K = cfg.n_features, cfg.n_visits
    n_inf = int(round(cfg.informative_fraction * d))
    load = rng.normal(size=(2, n_inf))
    if cfg.loading_norm is not None and n_inf:
        load *= cfg.loading_norm / np.linalg.norm(load, axis=1, keepdims=True)
    schema = FeatureSchema(tuple(f"f{j:02d}" for j in range(d)),
                           tuple("mri" if j < n_inf else "dti" for j in range(d)))
    init_sd = cfg.initial_sd
    if init_sd is None:
        init_sd = cfg.ar_sd / np.sqrt(1 - cfg.ar_coef ** 2)
    subjects = []
    width = len(str(cfg.n_subjects - 1))
    months = np.arange(K) * VISIT_SPACING
    for i in range(cfg.n_subjects):
        zb, zr = rng.normal(size=2)
        b = cfg.baseline_mean + cfg.baseline_sd * zb
        r = cfg.rate_mean + cfg.rate_sd * zr
        e = np.empty(K)
        e[0] = rng.normal(0, init_sd)
        for k in range(1, K):
            e[k] = cfg.ar_coef * e[k - 1] + rng.normal(0, cfg.ar_sd)
        scores = np.clip(b + r * np.arange(K) + e, SCORE_MIN, SCORE_MAX)
        # subject-level feature values persist across visits, plus per-visit jitter
        level = cfg.subject_feature_sd * rng.normal(size=d)
        X = level + cfg.feature_noise_sd * rng.normal(size=(K, d))
        X[:, :n_inf] += zb * load[0] + zr * load[1]
        feat_mask = rng.random((K, d)) < cfg.missing_rate
        score_mask = rng.random(K) < cfg.missing_rate
        X[feat_mask] = np.nan
        scores = np.where(score_mask, np.nan, np.round(scores, 4))
        if np.isnan(scores).all():
            scores[0] = np.round(np.clip(b + e[0], SCORE_MIN, SCORE_MAX), 4)
        visits = [Visit(int(m), np.round(X[k], 6), float(scores[k])) for k, m in enumerate(months)]
        subjects.append(subject_from_visits(f"S{i:0{width}d}", visits))
    return Cohort(schema, subjects)


def impute_cohort(cohort: Cohort, fill_values) -> Cohort:
    return replace(cohort, subjects=[impute_locf(s, fill_values) for s in cohort.subjects])
