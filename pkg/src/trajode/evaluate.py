"""Forecast metrics, naive baselines and the k-fold cross-validation harness."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import Cohort, SubjectRecord, kfold_split
from .errors import ContractError, DivergenceError, ShapeError
from .model import ModelParams, forward, make_batch
from .train import TrainConfig, fit

log = logging.getLogger(__name__)

MODEL = "cond_ode"
BASELINES = ("locf", "linear")


@dataclass(frozen=True)
class Metrics:
    mse: float
    rmse: float
    r2: float | None  # None when the targets have zero variance

    @property
    def r2_text(self) -> str:
        return "undefined" if self.r2 is None else repr(self.r2)


def metrics(pred, target) -> Metrics:
    """Element-wise MSE/RMSE and pooled R^2 about per-dimension target means."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"metrics: prediction shape {pred.shape} vs target {target.shape}")
    if pred.size == 0:
        raise ContractError("metrics: empty input")
    if target.ndim == 1:
        pred, target = pred[:, None], target[:, None]
    resid = pred - target
    mse = float(np.mean(resid * resid))
    ss_res = float(np.sum(resid * resid))
    ss_tot = float(np.sum((target - target.mean(axis=0)) ** 2))
    r2 = None if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return Metrics(mse, math.sqrt(mse), r2)


def baseline_locf(prefix_times, prefix_features, target_times) -> np.ndarray:
    """Carry the last observed feature vector forward to every target time."""
    X = np.atleast_2d(np.asarray(prefix_features, dtype=np.float64))
    if X.shape[0] == 0:
        raise ContractError("baseline_locf: empty prefix")
    return np.repeat(X[-1:], len(target_times), axis=0)


def baseline_linear(prefix_times, prefix_features, target_times) -> np.ndarray:
    """Per-dimension least-squares line through the prefix, extrapolated."""
    t = np.asarray(prefix_times, dtype=np.float64)
    X = np.atleast_2d(np.asarray(prefix_features, dtype=np.float64))
    if len(t) < 2 or np.ptp(t) == 0:
        return baseline_locf(prefix_times, prefix_features, target_times)
    design = np.column_stack([np.ones_like(t), t])
    coef, *_ = np.linalg.lstsq(design, X, rcond=None)
    tt = np.asarray(target_times, dtype=np.float64)
    return np.column_stack([np.ones_like(tt), tt]) @ coef


@dataclass
class SubjectPrediction:
    subject_id: str
    target_times: np.ndarray
    actual: np.ndarray  # (T, D)
    predicted: dict[str, np.ndarray]  # model name -> (T, D)
    tau: float
    gamma: float


def predict_subjects(params: ModelParams, subjects: Sequence[SubjectRecord], cfg: TrainConfig,
                     chunk: int = 64) -> list[SubjectPrediction]:
    """Deterministic (z0 = mu) forecasts of each subject's last visit plus baselines."""
    out = []
    for start in range(0, len(subjects), chunk):
        group = list(subjects[start : start + chunk])
        batch = make_batch(group)
        fwd = forward(params.bind(), batch, None, cfg.solver)
        preds = fwd.predictions.value
        for b, s in enumerate(group):
            rows = batch.target_rows[batch.owner[batch.target_rows] == b]
            n = int(batch.prefix_len[b])
            times = s.times()
            X = s.feature_matrix()
            predicted = {MODEL: preds[rows]}
            predicted["locf"] = baseline_locf(times[:n], X[:n], times[n:])
            predicted["linear"] = baseline_linear(times[:n], X[:n], times[n:])
            out.append(SubjectPrediction(s.subject_id, times[n:], X[n:], predicted,
                                         float(fwd.tau.value[b, 0]), float(fwd.gamma.value[b, 0])))
    return out


def score(predictions: Sequence[SubjectPrediction]) -> dict[str, Metrics]:
    actual = np.concatenate([p.actual for p in predictions])
    names = predictions[0].predicted.keys()
    return {m: metrics(np.concatenate([p.predicted[m] for p in predictions]), actual) for m in names}


@dataclass
class FoldResult:
    fold: int
    test_ids: list[str]
    scores: dict[str, Metrics]  # empty for the model when the fold diverged
    predictions: list[SubjectPrediction]
    diverged: bool = False
    message: str = ""


@dataclass
class EvalReport:
    folds: list[FoldResult]
    models: tuple[str, ...] = (MODEL,) + BASELINES

    @property
    def n_diverged(self) -> int:
        return sum(f.diverged for f in self.folds)

    def fold_values(self, model: str, metric: str) -> np.ndarray:
        vals = [getattr(f.scores[model], metric) for f in self.folds if model in f.scores]
        return np.array([np.nan if v is None else v for v in vals], dtype=np.float64)

    def aggregate(self, model: str, metric: str) -> tuple[float, float]:
        """Mean and sample standard deviation across non-diverged folds."""
        vals = self.fold_values(model, metric)
        if vals.size == 0:
            return math.nan, math.nan
        sd = float(np.std(vals, ddof=1)) if vals.size > 1 else 0.0
        return float(np.mean(vals)), sd

    def alignment_table(self) -> list[tuple[int, str, float, float]]:
        return [(f.fold, p.subject_id, p.tau, p.gamma) for f in self.folds for p in f.predictions]

    def rows(self) -> list[list[str]]:
        rows = []
        for f in self.folds:
            for m in self.models:
                if m in f.scores:
                    s = f.scores[m]
                    rows.append([str(f.fold), m, repr(s.mse), repr(s.rmse), s.r2_text])
                else:
                    rows.append([str(f.fold), m, "diverged", "diverged", "diverged"])
        for label, pick in (("mean", 0), ("std", 1)):
            for m in self.models:
                rows.append([label, m] + [repr(self.aggregate(m, k)[pick]) for k in ("mse", "rmse", "r2")])
        return rows

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["fold", "model", "mse", "rmse", "r2"])
            w.writerows(self.rows())
        with open(out / "residuals.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["subject_id", "target_time", "dim", "residual"])
            for f in self.folds:
                for p in f.predictions:
                    if MODEL not in p.predicted:
                        continue
                    resid = p.predicted[MODEL] - p.actual
                    for t, row in zip(p.target_times, resid):
                        for d, r in enumerate(row):
                            w.writerow([p.subject_id, repr(float(t)), d, repr(float(r))])
        with open(out / "alignment.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["fold", "subject_id", "tau", "gamma"])
            for fold, sid, tau, gamma in self.alignment_table():
                w.writerow([fold, sid, repr(tau), repr(gamma)])
        (out / "table.txt").write_text(self.table(), encoding="utf-8")

    def table(self) -> str:
        """Text table: one row per model, mean +/- std for each metric."""
        lines = [f"{'Model':<10} {'MSE':>20} {'RMSE':>20} {'R2':>20}"]
        for m in self.models:
            cells = []
            for k in ("mse", "rmse", "r2"):
                mean, sd = self.aggregate(m, k)
                cells.append(f"{mean:.4f} ± {sd:.4f}")
            lines.append(f"{m:<10} {cells[0]:>20} {cells[1]:>20} {cells[2]:>20}")
        if self.n_diverged:
            lines.append(f"({self.n_diverged} fold(s) diverged and are excluded from {MODEL})")
        return "\n".join(lines) + "\n"


def run_fold(cohort: Cohort, train_idx, test_idx, cfg: TrainConfig, fold: int) -> FoldResult:
    train = cohort.subset(train_idx).standardized()
    test = cohort.subset(test_idx).standardized(train.stats)
    test_ids = [s.subject_id for s in test.subjects]
    try:
        params, _ = fit(train, cfg)
        preds = predict_subjects(params, test.subjects, cfg)
    except DivergenceError as exc:
        log.warning("fold %d diverged: %s", fold, exc)
        preds = predict_subjects_baselines(test.subjects)
        scores = {m: s for m, s in score(preds).items()}
        return FoldResult(fold, test_ids, scores, preds, diverged=True, message=str(exc))
    return FoldResult(fold, test_ids, score(preds), preds)


def predict_subjects_baselines(subjects) -> list[SubjectPrediction]:
    out = []
    for s in subjects:
        n = len(s.visits) - 1
        times, X = s.times(), s.feature_matrix()
        predicted = {
            "locf": baseline_locf(times[:n], X[:n], times[n:]),
            "linear": baseline_linear(times[:n], X[:n], times[n:]),
        }
        out.append(SubjectPrediction(s.subject_id, times[n:], X[n:], predicted, math.nan, math.nan))
    return out


def cross_validate(cohort: Cohort, cfg: TrainConfig, k: int = 5, split_seed: int | None = None) -> EvalReport:
    """k-fold CV over subjects; each fold standardizes on its own training split."""
    seed = cfg.seed if split_seed is None else split_seed
    folds = []
    for i, (tr, te) in enumerate(kfold_split(cohort, k, seed)):
        fold_cfg = cfg.replace(seed=cfg.seed * 1000 + i)
        folds.append(run_fold(cohort, tr, te, fold_cfg, i))
        log.info("fold %d: %s", i, {m: round(s.r2 or math.nan, 4) for m, s in folds[-1].scores.items()})
    return EvalReport(folds)


def ratio_weights(ratio: float, total: float) -> tuple[float, float]:
    """Split ``total`` into (lambda_kl, lambda_c) with lambda_kl / lambda_c = ratio."""
    if ratio <= 0 or total < 0:
        raise ContractError("ratio must be positive and total nonnegative")
    # ratio 1 splits exactly in half, so the 1:1 run reproduces the defaults
    return total * ratio / (1.0 + ratio), total / (1.0 + ratio)


DEFAULT_RATIOS = ((1, 4), (1, 2), (1, 1), (2, 1), (4, 1))


def lambda_sweep(cohort: Cohort, cfg: TrainConfig, ratios=DEFAULT_RATIOS, k: int = 5,
                 evaluate: Callable[[Cohort, TrainConfig, int], EvalReport] = cross_validate):
    """Cross-validate each KL:contrastive weight ratio at a fixed weight total."""
    total = cfg.lambda_kl + cfg.lambda_c
    rows = []
    for num, den in ratios:
        lam_kl, lam_c = ratio_weights(num / den, total)
        report = evaluate(cohort, cfg.replace(lambda_kl=lam_kl, lambda_c=lam_c), k)
        rows.append({"ratio": f"{num}:{den}", "lambda_kl": lam_kl, "lambda_c": lam_c, "report": report})
    return rows


def write_sweep(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["ratio", "lambda_kl", "lambda_c", "mse_mean", "mse_std", "rmse_mean",
                    "rmse_std", "r2_mean", "r2_std", "diverged_folds"])
        for r in rows:
            rep = r["report"]
            cells = []
            for k in ("mse", "rmse", "r2"):
                cells += [repr(v) for v in rep.aggregate(MODEL, k)]
            w.writerow([r["ratio"], repr(r["lambda_kl"]), repr(r["lambda_c"])] + cells + [rep.n_diverged])
