"""Command-line entry point: ``pgpforecast {synth,eval,forecast,ttest}``.

Exit codes: 0 success, 1 runtime failure, 2 configuration or validation error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .cohort import (
    Cohort,
    CohortFormatError,
    CohortValidationError,
    NormalizationStats,
    SynthConfig,
    build_training_rows,
    filter_eligible,
    generate_synthetic,
    impute_locf,
    load_cohort,
    subject_inputs,
    write_cohort,
)
from .evaluation import (
    CI_Z,
    MODELS,
    ConfigError,
    CVConfig,
    UndefinedMetricError,
    aggregate,
    cross_validate,
    forecast_anchor,
    paired_ttest,
    prepare_fold,
    read_records,
    write_records,
)
from .gp import OptimizerConfig, build_population_model, fit_population
from .kernels import Hyperparameters, NumericalDegeneracyError

log = logging.getLogger("pgpforecast")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class CliError(Exception):
    def __init__(self, msg: str, code: int = EXIT_RUNTIME):
        super().__init__(msg)
        self.code = code


@dataclass
class ExperimentConfig:
    data: str | None = None
    synth: dict = field(default_factory=dict)
    folds: int = 10
    horizon: int = 4
    models: list = field(default_factory=lambda: list(MODELS))
    split_seed: int = 0
    opt_seed: int = 0
    synth_seed: int = 0
    restarts: int = 5
    normalize: bool = True
    clamp: bool = False
    eligibility: bool = True
    min_visits: int = 11
    max_missing: float = 0.825
    out: str = "results"

    def validate(self) -> None:
        if self.horizon < 1:
            raise ConfigError(f"horizon must be >= 1, got {self.horizon}")
        if self.folds < 2:
            raise ConfigError(f"folds must be >= 2, got {self.folds}")
        bad = [m for m in self.models if m not in MODELS]
        if bad or not self.models:
            raise ConfigError(f"unknown model names {bad}; choose from {','.join(MODELS)}")
        if self.restarts < 1:
            raise ConfigError("restarts must be >= 1")
        if not 0.0 <= self.max_missing <= 1.0:
            raise ConfigError("max-missing must be in [0, 1]")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def synth_config(self) -> SynthConfig:
        known = {f.name for f in dataclasses.fields(SynthConfig)}
        unknown = set(self.synth) - known
        if unknown:
            raise ConfigError(f"unknown synth keys: {sorted(unknown)}")
        return SynthConfig(**{**self.synth, "seed": self.synth_seed})

    def cv_config(self) -> CVConfig:
        return CVConfig(folds=self.folds, horizon=self.horizon, models=tuple(self.models),
                        split_seed=self.split_seed, opt_seed=self.opt_seed,
                        restarts=self.restarts, normalize=self.normalize, clamp=self.clamp)


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _header() -> dict:
    return {"tool": "pgpforecast", "version": __version__}


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _models_arg(s: str) -> list[str]:
    return [m.strip().lower() for m in s.split(",") if m.strip()]


def _load(path) -> Cohort:
    try:
        return load_cohort(path)
    except (CohortFormatError, CohortValidationError) as exc:
        raise CliError(f"{path}: {exc}", EXIT_CONFIG) from exc
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}") from exc


def _resolve(args, parser_defaults: dict, cls):
    """defaults < config file < explicitly given flags."""
    values = dict(parser_defaults)
    cfg_path = getattr(args, "config", None)
    if cfg_path:
        try:
            values.update(json.loads(Path(cfg_path).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {cfg_path}: {exc}", EXIT_CONFIG) from exc
    explicit = {k: v for k, v in vars(args).items()
                if k not in ("config", "func", "verbose", "seed", "command") and v is not None}
    if getattr(args, "seed", None) is not None:
        for k in ("split_seed", "opt_seed", "synth_seed"):
            explicit.setdefault(k, args.seed)
    synth_flags = {k[6:]: explicit.pop(k) for k in list(explicit) if k.startswith("synth_")
                   and k != "synth_seed"}
    values.update(explicit)
    if synth_flags:
        values["synth"] = {**values.get("synth", {}), **synth_flags}
    return cls.from_dict(values)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = SynthConfig(n_subjects=args.subjects, n_visits=args.visits, n_features=args.features,
                      informative_fraction=args.informative_fraction,
                      missing_rate=args.missing_rate, seed=args.seed)
    try:
        cohort = generate_synthetic(cfg, H=args.horizon)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    try:
        write_cohort(cohort, args.out)
    except OSError as exc:
        raise CliError(f"cannot write {args.out}: {exc}") from exc
    cells = np.concatenate([s.features.ravel() for s in cohort.subjects])
    print(f"wrote {args.out}: {len(cohort)} subjects, {cfg.n_visits} visits, "
          f"{cfg.n_features} features, missing feature cells {np.mean(np.isnan(cells)):.3f}")
    return EXIT_OK


EVAL_DEFAULTS = ExperimentConfig().to_dict()


def cmd_eval(args) -> int:
    cfg = _resolve(args, EVAL_DEFAULTS, ExperimentConfig)
    try:
        cfg.validate()
        if cfg.data:
            cohort = _load(cfg.data)
            source = {"data": cfg.data, "sha256": _sha256(cfg.data)}
        else:
            cohort = generate_synthetic(cfg.synth_config(), H=cfg.horizon)
            source = {"synthetic": dataclasses.asdict(cfg.synth_config())}
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    if cfg.eligibility:
        before = len(cohort)
        cohort = filter_eligible(cohort, cfg.min_visits, cfg.max_missing)
        log.info("eligibility filter kept %d of %d subjects", len(cohort), before)
    try:
        split, results, records = cross_validate(cohort, cfg.cv_config())
    except (ConfigError, ValueError) as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    try:
        report = aggregate(records, split, cfg.models, cfg.horizon)
    except UndefinedMetricError as exc:
        raise CliError(f"metric undefined: {exc}") from exc

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = {**_header(), "config": cfg.to_dict(), "source": source,
           "n_subjects": len(cohort),
           "folds": [{"fold": r.fold, "subjects": list(split.folds[r.fold]),
                      "training_rows": r.n_train_rows,
                      "hyperparameters": r.model.hyper.to_dict()} for r in results],
           "metrics": report.to_dict()}
    _dump_json(doc, out / "report.json")
    _dump_json({**_header(), **cfg.to_dict()}, out / "config.json")
    write_records(records, out / "records.csv")
    print(report.format_table())
    print(f"\nwrote {out / 'report.json'} and {out / 'records.csv'}")
    return EXIT_OK


def _model_artifact(train_path, train_ids, model, stats, fill, H, normalize) -> dict:
    return {**_header(), "kind": "population-model", "horizon": H, "normalize": normalize,
            "hyperparameters": model.hyper.to_dict(), "normalization": stats.to_dict(),
            "fill_values": list(map(float, fill)),
            "training": {"path": str(train_path), "sha256": _sha256(train_path),
                         "subject_ids": list(train_ids)}}


def _rebuild_model(artifact: dict):
    tr = artifact["training"]
    if _sha256(tr["path"]) != tr["sha256"]:
        raise CliError(f"training file {tr['path']} changed since the model was saved", EXIT_CONFIG)
    cohort = _load(tr["path"])
    fill = np.asarray(artifact["fill_values"], dtype=float)
    stats = NormalizationStats.from_dict(artifact["normalization"])
    H = int(artifact["horizon"])
    train = [impute_locf(s, fill) for s in cohort.select(tr["subject_ids"])]
    ts = build_training_rows(train, stats, H)
    model = build_population_model(ts, Hyperparameters.from_dict(artifact["hyperparameters"]),
                                   stats.scaler)
    return model, stats, fill, H, tr["subject_ids"]


def cmd_forecast(args) -> int:
    if args.load_model:
        try:
            artifact = json.loads(Path(args.load_model).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read model {args.load_model}: {exc}", EXIT_CONFIG) from exc
        model, stats, fill, H, train_ids = _rebuild_model(artifact)
        target_path = args.target or artifact["training"]["path"]
        if args.subject in train_ids:
            raise CliError(f"subject {args.subject} is part of the model's training set",
                           EXIT_CONFIG)
    else:
        if not args.train:
            raise CliError("either --train or --load-model is required", EXIT_CONFIG)
        cohort = _load(args.train)
        train_ids = [sid for sid in cohort.ids if sid != args.subject]
        if args.eligibility:
            eligible = set(filter_eligible(cohort, args.min_visits, args.max_missing).ids)
            train_ids = [sid for sid in train_ids if sid in eligible]
        target_path = args.target or args.train
        H = args.horizon
        train, stats, fill = prepare_fold(cohort, train_ids, not args.no_normalize)
        ts = build_training_rows(train, stats, H)
        if ts.n < 2:
            raise CliError("training cohort yields fewer than two rows", EXIT_CONFIG)
        model = fit_population(ts, OptimizerConfig(restarts=args.restarts, seed=args.opt_seed),
                               scaler=stats.scaler)
        if args.save_model:
            _dump_json(_model_artifact(args.train, train_ids, model, stats, fill, H,
                                       not args.no_normalize), Path(args.save_model))

    target = _load(target_path)
    if args.subject not in target:
        raise CliError(f"unknown subject id {args.subject!r} in {target_path}", EXIT_CONFIG)
    s = impute_locf(target[args.subject], fill)
    inputs = subject_inputs(s, stats)
    entries = []
    for t in range(1, s.T + 1):
        fc = forecast_anchor(model, s, stats, t, H, inputs)
        f = fc[args.model]
        means = np.clip(f.means, 0, 85) if args.clamp else f.means
        half = CI_Z * np.sqrt(f.variance)
        entries.append({
            "t": t, "month": int(s.months[t - 1]),
            "population_fallback": bool(fc["pgp"].fallback),
            "history_rows": max(0, t - H),
            "horizon_months": [int(s.months[t - 1]) + 6 * h for h in range(1, H + 1)],
            "means": means.tolist(), "variance": f.variance,
            "ci_lower": (means - half).tolist(), "ci_upper": (means + half).tolist(),
        })
    doc = {**_header(), "subject_id": args.subject, "model": args.model, "horizon": H,
           "ci_z": CI_Z, "clamped": bool(args.clamp),
           "hyperparameters": model.hyper.to_dict(), "forecasts": entries}
    text = json.dumps(doc, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return EXIT_OK


def cmd_ttest(args) -> int:
    try:
        a = read_records(args.a)
        b = read_records(args.b)
    except (OSError, ValueError) as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc

    def errors(records, model):
        out = {}
        for r in records:
            if r.model == model and r.truth_observed and (args.h is None or r.h == args.h):
                key = r.subject_id if args.unit == "subject" else (r.subject_id, r.t, r.h)
                out.setdefault(key, []).append(abs(r.truth - r.mean))
        return {k: float(np.mean(v)) for k, v in out.items()}

    ea, eb = errors(a, args.model_a), errors(b, args.model_b)
    keys = sorted(set(ea) & set(eb))
    if len(keys) < 2:
        raise CliError("fewer than two paired observations between the record files", EXIT_CONFIG)
    xa = np.array([ea[k] for k in keys])
    xb = np.array([eb[k] for k in keys])
    stat, p = paired_ttest(xa, xb)
    result = {"model_a": args.model_a, "model_b": args.model_b, "unit": args.unit,
              "n_pairs": len(keys), "mae_a": float(xa.mean()), "mae_b": float(xb.mean()),
              "t_statistic": stat, "p_value": p, "significant": bool(p < args.alpha)}
    print(json.dumps(result, indent=2))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pgpforecast", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a seeded synthetic cohort CSV")
    s.add_argument("--subjects", type=int, default=100)
    s.add_argument("--visits", type=int, default=12)
    s.add_argument("--features", type=int, default=20)
    s.add_argument("--informative-fraction", type=float, default=0.5)
    s.add_argument("--missing-rate", type=float, default=0.2)
    s.add_argument("--horizon", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    # eval flags default to None so a config file can fill them in
    e = sub.add_parser("eval", help="subject-independent cross-validation of all models")
    e.add_argument("--config", help="JSON experiment config; explicit flags override it")
    e.add_argument("--data", help="cohort CSV; omit to generate a synthetic cohort")
    e.add_argument("--synth-n-subjects", dest="synth_n_subjects", type=int)
    e.add_argument("--synth-n-visits", dest="synth_n_visits", type=int)
    e.add_argument("--synth-n-features", dest="synth_n_features", type=int)
    e.add_argument("--synth-informative-fraction", dest="synth_informative_fraction", type=float)
    e.add_argument("--synth-missing-rate", dest="synth_missing_rate", type=float)
    e.add_argument("--folds", type=int)
    e.add_argument("--horizon", type=int)
    e.add_argument("--models", type=_models_arg)
    e.add_argument("--seed", type=int, help="default for split, optimizer and synth seeds")
    e.add_argument("--split-seed", type=int)
    e.add_argument("--opt-seed", type=int)
    e.add_argument("--synth-seed", type=int)
    e.add_argument("--restarts", type=int)
    e.add_argument("--no-normalize", dest="normalize", action="store_const", const=False)
    e.add_argument("--clamp", action="store_const", const=True)
    e.add_argument("--no-eligibility", dest="eligibility", action="store_const", const=False)
    e.add_argument("--min-visits", type=int)
    e.add_argument("--max-missing", type=float)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("forecast", help="sequential forecasts for one target subject")
    f.add_argument("--train", help="training cohort CSV (target subject is excluded)")
    f.add_argument("--target", help="CSV holding the target subject (default: --train)")
    f.add_argument("--subject", required=True)
    f.add_argument("--model", choices=MODELS, default="joint")
    f.add_argument("--horizon", type=int, default=4)
    f.add_argument("--restarts", type=int, default=5)
    f.add_argument("--opt-seed", type=int, default=0)
    f.add_argument("--no-normalize", action="store_true")
    f.add_argument("--no-eligibility", dest="eligibility", action="store_false")
    f.add_argument("--min-visits", type=int, default=11)
    f.add_argument("--max-missing", type=float, default=0.825)
    f.add_argument("--clamp", action="store_true")
    f.add_argument("--save-model", help="write a JSON model artifact after fitting")
    f.add_argument("--load-model", help="reuse a JSON model artifact instead of fitting")
    f.add_argument("--out", help="output JSON path (default: stdout)")
    f.set_defaults(func=cmd_forecast)

    t = sub.add_parser("ttest", help="paired t-test between two record CSVs")
    t.add_argument("a")
    t.add_argument("b")
    t.add_argument("--model-a", default="joint")
    t.add_argument("--model-b", default="sgp")
    t.add_argument("--unit", choices=("subject", "record"), default="subject")
    t.add_argument("--h", type=int, help="restrict to one horizon")
    t.add_argument("--alpha", type=float, default=0.05)
    t.set_defaults(func=cmd_ttest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalDegeneracyError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
