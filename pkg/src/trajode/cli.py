"""Command-line entry point: simulate, train, forecast, evaluate, cv, sweep, grad-check.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import Cohort, load_cohort, save_cohort, synthesize_cohort
from .errors import ContractError, DataError, NumericalError
from .evaluate import DEFAULT_RATIOS, MODEL, EvalReport, FoldResult, cross_validate, lambda_sweep
from .evaluate import predict_subjects, score, write_sweep
from .model import ModelParams, forecast_subject, make_batch
from .tensor import grad_check
from .train import TrainConfig, fit, flat_objective, load_checkpoint, save_checkpoint, write_history

log = logging.getLogger("trajode")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# flag dest -> TrainConfig field
TRAIN_FLAGS = {
    "seed": "seed",
    "epochs": "epochs",
    "lambda_kl": "lambda_kl",
    "lambda_c": "lambda_c",
    "delta": "delta",
    "temperature": "temperature",
    "latent_dim": "latent_dim",
    "hidden": "hidden",
    "step": "step",
}
# run-level options that may also come from the config file
RUN_DEFAULTS = {
    "subjects": 161,
    "folds": 5,
    "noise": None,  # command-specific default
    "out": ".",
    "data": None,
    "checkpoint": None,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="flat JSON config (TrainConfig keys and run options)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", metavar="DIR")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _add_train(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int)
    p.add_argument("--lambda-kl", type=float)
    p.add_argument("--lambda-c", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--temperature", type=float)
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--step", type=float)


def _add_cohort(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", metavar="DIR", help="directory with visits.csv and subjects.csv "
                                               "(default: a synthetic cohort)")
    p.add_argument("--subjects", type=int, help="synthetic cohort size")
    p.add_argument("--noise", type=float, help="synthetic observation noise sd")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="trajode", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="write a synthetic cohort (visits, subjects, truth)")
    _add_common(p)
    p.add_argument("--subjects", type=int)
    p.add_argument("--noise", type=float, help="observation noise sd (default 0.1)")

    p = sub.add_parser("train", help="fit on a cohort; writes model.json and history.csv")
    _add_common(p)
    _add_train(p)
    _add_cohort(p)

    p = sub.add_parser("forecast", help="forecast last visits; writes predictions.csv")
    _add_common(p)
    p.add_argument("--checkpoint", required=False, metavar="PATH")
    p.add_argument("--data", metavar="DIR")
    p.add_argument("--noise", type=float, help="scale of z0 sampling noise (0 = posterior mean)")

    p = sub.add_parser("evaluate", help="score a checkpoint on a cohort; writes report.csv")
    _add_common(p)
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--data", metavar="DIR")

    for name, text in (("cv", "k-fold cross-validation report"),
                       ("sweep", "KL:contrastive weight-ratio sweep")):
        p = sub.add_parser(name, help=text)
        _add_common(p)
        _add_train(p)
        _add_cohort(p)
        p.add_argument("--folds", type=int)

    p = sub.add_parser("grad-check", help="autodiff vs finite differences on the full loss")
    _add_common(p)
    _add_train(p)
    _add_cohort(p)
    return parser


def resolve(args: argparse.Namespace) -> tuple[TrainConfig, dict]:
    """Merge flag > config file > default into (TrainConfig, run options)."""
    file_cfg: dict = {}
    if args.config:
        try:
            file_cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise DataError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise UsageError(f"config {args.config} must be a JSON object")
    train_fields = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = sorted(set(file_cfg) - train_fields - set(RUN_DEFAULTS))
    if unknown:
        raise UsageError(f"unknown config keys: {unknown}")
    train_kw = {k: v for k, v in file_cfg.items() if k in train_fields}
    run = {k: file_cfg.get(k, v) for k, v in RUN_DEFAULTS.items()}
    for dest, field in TRAIN_FLAGS.items():
        value = getattr(args, dest, None)
        if value is not None:
            train_kw[field] = value
    for key in RUN_DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            run[key] = value
    try:
        cfg = TrainConfig.from_dict(train_kw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc
    return cfg, run


def _cohort(run: dict, cfg: TrainConfig) -> Cohort:
    if run["data"]:
        d = Path(run["data"])
        return load_cohort(d / "visits.csv", d / "subjects.csv")
    noise = 0.1 if run["noise"] is None else run["noise"]
    cohort, _ = synthesize_cohort(n_subjects=run["subjects"], noise_sd=noise, seed=cfg.seed)
    return cohort


def _out(run: dict) -> Path:
    out = Path(run["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _require(run: dict, key: str) -> str:
    if not run[key]:
        raise UsageError(f"--{key} is required")
    return run[key]


def _checked_params(path, cohort: Cohort):
    params, cfg, stats = load_checkpoint(path)
    want = (params.dims.feature_dim, params.dims.condition_dim)
    have = (cohort.feature_dim, cohort.condition_dim + 2)
    if want != have:
        raise DataError(f"checkpoint {path} expects (features, conditions) = {want}, cohort has {have}")
    if stats is None:
        raise DataError(f"checkpoint {path} carries no standardization statistics")
    return params, cfg, stats


# --- commands -------------------------------------------------------------------


def cmd_simulate(cfg: TrainConfig, run: dict) -> int:
    noise = 0.1 if run["noise"] is None else run["noise"]
    cohort, truth = synthesize_cohort(n_subjects=run["subjects"], noise_sd=noise, seed=cfg.seed)
    out = _out(run)
    save_cohort(cohort, out / "visits.csv", out / "subjects.csv")
    truth.save(out / "truth.csv")
    print(f"simulate: {len(cohort)} subjects, {cohort.n_visits} visits -> {out}")
    return EXIT_OK


def cmd_train(cfg: TrainConfig, run: dict) -> int:
    cohort = _cohort(run, cfg).standardized()
    out = _out(run)
    params, history = fit(cohort, cfg)
    save_checkpoint(out / "model.json", params, cfg, cohort.stats)
    write_history(history, out / "history.csv")
    last = history[-1]
    print(f"train: {cfg.epochs} epochs, final total={last['total']:.6g} mse={last['mse']:.6g} "
          f"-> {out / 'model.json'}")
    return EXIT_OK


def cmd_forecast(cfg: TrainConfig, run: dict) -> int:
    path = _require(run, "checkpoint")
    cohort = load_cohort(Path(_require(run, "data")) / "visits.csv",
                         Path(run["data"]) / "subjects.csv")
    params, train_cfg, stats = _checked_params(path, cohort)
    scale = 0.0 if run["noise"] is None else float(run["noise"])
    rng = np.random.default_rng(cfg.seed)
    out = _out(run)
    n_rows = 0
    with open(out / "predictions.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "target_time", "dim", "predicted", "actual"])
        for raw in cohort.subjects:
            s = stats.apply(raw)
            n = len(s.visits) - 1
            noise = scale * rng.standard_normal(params.dims.latent_dim) if scale else None
            fc = forecast_subject(params, s, n, noise=noise, solver=train_cfg.solver)
            pred = fc.predictions * stats.feature_std + stats.feature_mean  # back to raw units
            for k, row in enumerate(pred):
                visit = raw.visits[n + k]
                for d, value in enumerate(row):
                    w.writerow([raw.subject_id, repr(float(visit.time_years)), d,
                                repr(float(value)), repr(float(visit.features[d]))])
                    n_rows += 1
    print(f"forecast: {len(cohort)} subjects, {n_rows} rows -> {out / 'predictions.csv'}")
    return EXIT_OK


def cmd_evaluate(cfg: TrainConfig, run: dict) -> int:
    path = _require(run, "checkpoint")
    cohort = load_cohort(Path(_require(run, "data")) / "visits.csv",
                         Path(run["data"]) / "subjects.csv")
    params, train_cfg, stats = _checked_params(path, cohort)
    test = cohort.standardized(stats)
    preds = predict_subjects(params, test.subjects, train_cfg)
    report = EvalReport([FoldResult(0, [s.subject_id for s in test.subjects], score(preds), preds)])
    out = _out(run)
    report.write(out)
    m = report.folds[0].scores[MODEL]
    print(f"evaluate: mse={m.mse:.6g} rmse={m.rmse:.6g} r2={m.r2_text} -> {out / 'report.csv'}")
    return EXIT_OK


def cmd_cv(cfg: TrainConfig, run: dict) -> int:
    cohort = _cohort(run, cfg)
    report = cross_validate(cohort, cfg, k=run["folds"])
    out = _out(run)
    report.write(out)
    sys.stdout.write(report.table())
    mean, sd = report.aggregate(MODEL, "r2")
    print(f"cv: {run['folds']} folds, {MODEL} r2={mean:.4f} ± {sd:.4f}, "
          f"{report.n_diverged} diverged -> {out / 'report.csv'}")
    return EXIT_NUMERIC if report.n_diverged else EXIT_OK


def cmd_sweep(cfg: TrainConfig, run: dict) -> int:
    cohort = _cohort(run, cfg)
    rows = lambda_sweep(cohort, cfg, DEFAULT_RATIOS, k=run["folds"])
    out = _out(run)
    write_sweep(rows, out / "sweep.csv")
    for r in rows:
        mean, sd = r["report"].aggregate(MODEL, "r2")
        print(f"  {r['ratio']:>4}  lambda_kl={r['lambda_kl']:.3g}  lambda_c={r['lambda_c']:.3g}  "
              f"r2={mean:.4f} ± {sd:.4f}")
    best = max(rows, key=lambda r: r["report"].aggregate(MODEL, "r2")[0])
    print(f"sweep: {len(rows)} ratios, best r2 at {best['ratio']} -> {out / 'sweep.csv'}")
    diverged = sum(r["report"].n_diverged for r in rows)
    return EXIT_NUMERIC if diverged else EXIT_OK


def cmd_grad_check(cfg: TrainConfig, run: dict) -> int:
    cohort = _cohort(run, cfg).standardized()
    rng = np.random.default_rng(cfg.seed)
    params = ModelParams.init(cfg.dims(cohort.feature_dim, cohort.condition_dim + 2), rng)
    batch = make_batch(cohort.subjects[: min(8, len(cohort))])
    noise = rng.standard_normal((batch.size, params.dims.latent_dim))
    flat = params.flatten()
    coords = rng.choice(flat.size, size=min(10, flat.size), replace=False)
    err = grad_check(flat_objective(params, batch, noise, cfg), flat, 1e-5, coords)
    ok = err < 1e-4
    print(f"grad-check: max relative error {err:.3e} over {len(coords)} coordinates "
          f"({'ok' if ok else 'FAILED'})")
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "forecast": cmd_forecast,
    "evaluate": cmd_evaluate,
    "cv": cmd_cv,
    "sweep": cmd_sweep,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        cfg, run = resolve(args)
        print("config: " + json.dumps({**cfg.to_dict(), **run}, sort_keys=True))
        return COMMANDS[args.command](cfg, run)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ContractError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
