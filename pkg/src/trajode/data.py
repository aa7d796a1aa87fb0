"""Cohort schema, CSV ingestion, synthetic cohorts and subject-level splits."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.integrate import solve_ivp

from .errors import ContractError, DataError

log = logging.getLogger(__name__)

# Default cohort shape: 161 subjects, 50 with three visits and 111 with two;
# inter-visit gaps average 1.11 years within [0.61, 2.27].
DEFAULT_SUBJECTS = 161
DEFAULT_VISIT_COUNTS = (2, 3)
DEFAULT_VISIT_WEIGHTS = (111, 50)
DEFAULT_INTERVAL = (0.61, 1.11, 2.27)  # min, mean, max in years
DEFAULT_FEATURE_DIM = 68
DEFAULT_VOLUME_DIM = 14

# shape of the shared ground-truth curve
_RATE = 0.6  # logistic rate of the driving latent component
_LAG = 0.5  # relaxation rate of each downstream component
_START = 0.05  # initial value of the driving component
_DECODER_SCALE = 3.0
_ONSET_SPAN = 10.0
_AMPLITUDE = 2.0  # raw feature swing; noise_sd is relative to this


@dataclass
class VisitRecord:
    subject_id: str
    time_years: float
    features: np.ndarray


@dataclass
class SubjectRecord:
    subject_id: str
    metadata: np.ndarray  # (age, sex)
    conditions: np.ndarray  # subcortical volumes
    visits: list[VisitRecord]

    def condition_vector(self) -> np.ndarray:
        return np.concatenate([self.metadata, self.conditions])

    def feature_matrix(self) -> np.ndarray:
        return np.stack([v.features for v in self.visits])

    def times(self) -> np.ndarray:
        return np.array([v.time_years for v in self.visits])


@dataclass(frozen=True)
class Standardization:
    """Affine maps fitted on a training split: features, age and volumes."""

    feature_mean: np.ndarray
    feature_std: np.ndarray
    age_mean: float
    age_std: float
    volume_mean: np.ndarray
    volume_std: np.ndarray

    @classmethod
    def fit(cls, subjects: Sequence[SubjectRecord]) -> "Standardization":
        feats = np.concatenate([s.feature_matrix() for s in subjects])
        ages = np.array([s.metadata[0] for s in subjects])
        vols = np.stack([s.conditions for s in subjects])
        return cls(
            feature_mean=feats.mean(axis=0),
            feature_std=_safe_std(feats),
            age_mean=float(ages.mean()),
            age_std=float(_safe_std(ages[:, None])[0]),
            volume_mean=vols.mean(axis=0),
            volume_std=_safe_std(vols),
        )

    def apply(self, subject: SubjectRecord) -> SubjectRecord:
        age = (subject.metadata[0] - self.age_mean) / self.age_std
        meta = np.array([age, subject.metadata[1]])
        cond = (subject.conditions - self.volume_mean) / self.volume_std
        visits = [
            replace(v, features=(v.features - self.feature_mean) / self.feature_std)
            for v in subject.visits
        ]
        return SubjectRecord(subject.subject_id, meta, cond, visits)

    def to_dict(self) -> dict:
        return {
            "feature_mean": self.feature_mean.tolist(),
            "feature_std": self.feature_std.tolist(),
            "age_mean": self.age_mean,
            "age_std": self.age_std,
            "volume_mean": self.volume_mean.tolist(),
            "volume_std": self.volume_std.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Standardization":
        return cls(
            feature_mean=np.asarray(d["feature_mean"], dtype=np.float64),
            feature_std=np.asarray(d["feature_std"], dtype=np.float64),
            age_mean=float(d["age_mean"]),
            age_std=float(d["age_std"]),
            volume_mean=np.asarray(d["volume_mean"], dtype=np.float64),
            volume_std=np.asarray(d["volume_std"], dtype=np.float64),
        )


def _safe_std(x: np.ndarray) -> np.ndarray:
    sd = x.std(axis=0)
    return np.where(sd > 0, sd, 1.0)


@dataclass
class Cohort:
    subjects: list[SubjectRecord]
    feature_dim: int
    condition_dim: int  # number of volume columns
    stats: Standardization | None = None
    dropped: int = 0

    def __post_init__(self):
        ids = [s.subject_id for s in self.subjects]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate subject ids in cohort")

    def __len__(self) -> int:
        return len(self.subjects)

    @property
    def n_visits(self) -> int:
        return sum(len(s.visits) for s in self.subjects)

    def subset(self, indices: Sequence[int]) -> "Cohort":
        return Cohort([self.subjects[i] for i in indices], self.feature_dim, self.condition_dim)

    def standardized(self, stats: Standardization | None = None) -> "Cohort":
        """Standardize with ``stats`` (fitted on this cohort when omitted)."""
        stats = stats or Standardization.fit(self.subjects)
        return Cohort([stats.apply(s) for s in self.subjects], self.feature_dim,
                      self.condition_dim, stats, self.dropped)


# --- CSV io --------------------------------------------------------------------


def _read_rows(path: Path) -> tuple[list[str], list[tuple[int, list[str]]]]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            rows = [(i, r) for i, r in enumerate(reader, start=2) if r]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if header is None:
        raise DataError(f"{path}: empty file")
    return [h.strip() for h in header], rows


def _prefixed_columns(header, prefix, path) -> list[int]:
    cols = [i for i, h in enumerate(header) if h.startswith(prefix) and h[len(prefix):].isdigit()]
    order = sorted(cols, key=lambda i: int(header[i][len(prefix):]))
    if [int(header[i][len(prefix):]) for i in order] != list(range(len(order))):
        raise DataError(f"{path}: columns {prefix}0..{prefix}N must be contiguous")
    return order


def _float(cell: str, path, row: int, col: str) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise DataError(f"{path}: row {row}, column {col!r}: non-numeric value {cell!r}") from None
    if not math.isfinite(value):
        raise DataError(f"{path}: row {row}, column {col!r}: non-finite value")
    return value


def load_cohort(visits_path, subjects_path, standardize: bool = False) -> Cohort:
    """Parse and validate ``visits.csv`` and ``subjects.csv``.

    Visit times are re-based so every subject's first visit is at 0.
    Subjects with fewer than two visits are dropped (count in ``dropped``).
    Values stay in raw units unless ``standardize`` is set, in which case
    statistics are fitted on all loaded subjects.
    """
    visits_path, subjects_path = Path(visits_path), Path(subjects_path)
    vh, vrows = _read_rows(visits_path)
    for col in ("subject_id", "time_years"):
        if col not in vh:
            raise DataError(f"{visits_path}: missing column {col!r}")
    fcols = _prefixed_columns(vh, "f_", visits_path)
    if not fcols:
        raise DataError(f"{visits_path}: no feature columns f_0..")
    sid_i, t_i = vh.index("subject_id"), vh.index("time_years")

    sh, srows = _read_rows(subjects_path)
    for col in ("subject_id", "age", "sex"):
        if col not in sh:
            raise DataError(f"{subjects_path}: missing column {col!r}")
    vcols = _prefixed_columns(sh, "v_", subjects_path)
    ssid_i, age_i, sex_i = sh.index("subject_id"), sh.index("age"), sh.index("sex")

    by_subject: dict[str, list[VisitRecord]] = {}
    seen = set()
    for row_no, row in vrows:
        if len(row) != len(vh):
            raise DataError(f"{visits_path}: row {row_no} has {len(row)} cells, expected {len(vh)}")
        sid = row[sid_i].strip()
        t = _float(row[t_i], visits_path, row_no, "time_years")
        if (sid, t) in seen:
            raise DataError(f"{visits_path}: row {row_no}: duplicate visit ({sid}, {t})")
        seen.add((sid, t))
        feats = np.array([_float(row[i], visits_path, row_no, vh[i]) for i in fcols])
        by_subject.setdefault(sid, []).append(VisitRecord(sid, t, feats))

    subjects, dropped, meta_seen = [], 0, set()
    for row_no, row in srows:
        if len(row) != len(sh):
            raise DataError(f"{subjects_path}: row {row_no} has {len(row)} cells, expected {len(sh)}")
        sid = row[ssid_i].strip()
        if sid in meta_seen:
            raise DataError(f"{subjects_path}: row {row_no}: duplicate subject {sid!r}")
        meta_seen.add(sid)
        age = _float(row[age_i], subjects_path, row_no, "age")
        sex = _float(row[sex_i], subjects_path, row_no, "sex")
        if sex not in (0.0, 1.0):
            raise DataError(f"{subjects_path}: row {row_no}: sex must be 0 or 1, got {row[sex_i]!r}")
        vols = np.array([_float(row[i], subjects_path, row_no, sh[i]) for i in vcols])
        visits = sorted(by_subject.get(sid, []), key=lambda v: v.time_years)
        if len(visits) < 2:
            dropped += 1
            continue
        t0 = visits[0].time_years
        visits = [replace(v, time_years=v.time_years - t0) for v in visits]
        subjects.append(SubjectRecord(sid, np.array([age, sex]), vols, visits))
    orphans = set(by_subject) - meta_seen
    if orphans:
        raise DataError(f"{visits_path}: visits for subjects missing from {subjects_path}: {sorted(orphans)[:5]}")
    if dropped:
        log.warning("dropped %d subject(s) with fewer than two visits", dropped)
    cohort = Cohort(subjects, len(fcols), len(vcols), dropped=dropped)
    return cohort.standardized() if standardize else cohort


def save_cohort(cohort: Cohort, visits_path, subjects_path) -> None:
    D, V = cohort.feature_dim, cohort.condition_dim
    with open(visits_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "time_years"] + [f"f_{j}" for j in range(D)])
        for s in cohort.subjects:
            for v in s.visits:
                w.writerow([s.subject_id, repr(float(v.time_years))] + [repr(float(x)) for x in v.features])
    with open(subjects_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "age", "sex"] + [f"v_{j}" for j in range(V)])
        for s in cohort.subjects:
            w.writerow([s.subject_id, repr(float(s.metadata[0])), str(int(s.metadata[1]))]
                       + [repr(float(x)) for x in s.conditions])


# --- synthetic cohorts -----------------------------------------------------------


@dataclass
class SyntheticTruth:
    """Everything needed to regenerate noise-free features for a subject.

    All subjects share one latent progression curve w(s) starting at
    ``w_init`` at stage s = 0 (a logistic driver with lagged followers); subject i is observed at stages
    ``tau[i] + gamma[i] * t`` and features are ``offset + amplitude * tanh(w W + b)``.
    """

    subject_ids: list[str]
    tau: np.ndarray
    gamma: np.ndarray
    latent_dim: int
    drift: np.ndarray  # (K, K) linear part of the field
    rate: float  # logistic saturation of the driving component
    w_init: np.ndarray
    dec_W: np.ndarray
    dec_b: np.ndarray
    offset: float
    amplitude: float
    noise_sd: float

    def field(self, w: np.ndarray) -> np.ndarray:
        out = w @ self.drift.T
        out[..., 0] -= self.rate * w[..., 0] ** 2
        return out

    def features_at(self, w: np.ndarray) -> np.ndarray:
        return self.offset + self.amplitude * np.tanh(w @ self.dec_W + self.dec_b)

    def save(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["subject_id", "tau_true", "gamma_true"])
            for sid, t, g in zip(self.subject_ids, self.tau, self.gamma):
                w.writerow([sid, repr(float(t)), repr(float(g))])


def _visit_gaps(rng, n, interval):
    lo, mean, hi = interval
    # Beta on [lo, hi] with the requested mean; concentration 6.
    frac = (mean - lo) / (hi - lo)
    return lo + (hi - lo) * rng.beta(6.0 * frac, 6.0 * (1.0 - frac), size=n)


def synthesize_cohort(
    n_subjects: int = DEFAULT_SUBJECTS,
    visit_counts: Sequence[int] = DEFAULT_VISIT_COUNTS,
    visit_weights: Sequence[float] = DEFAULT_VISIT_WEIGHTS,
    interval: tuple[float, float, float] = DEFAULT_INTERVAL,
    feature_dim: int = DEFAULT_FEATURE_DIM,
    volume_dim: int = DEFAULT_VOLUME_DIM,
    noise_sd: float = 0.1,
    seed: int = 0,
    latent_dim: int = 3,
    fixed_alignment: tuple[float, float] | None = None,
) -> tuple[Cohort, SyntheticTruth]:
    """Draw a cohort whose subjects follow one shared latent curve.

    Onset stage and speed are deterministic functions of age, sex and
    volumes, so they are recoverable from the condition features.  Visit
    counts are allotted in proportion to ``visit_weights`` (largest
    remainder), so 161 subjects give exactly 50 three-visit and 111
    two-visit subjects.  ``fixed_alignment=(tau, gamma)`` overrides the
    per-subject stage and speed.
    """
    if n_subjects < 2:
        raise ContractError("synthesize_cohort needs at least 2 subjects")
    lo, mean, hi = interval
    if not (0 < lo < hi) or not (lo < mean < hi):
        raise ContractError(f"interval needs 0 < min < mean < max, got {interval}")
    if len(visit_counts) != len(visit_weights) or min(visit_counts) < 2:
        raise ContractError("visit_counts must pair with weights and each be >= 2")
    if noise_sd < 0:
        raise ContractError("noise_sd must be nonnegative")
    rng = np.random.default_rng(seed)

    # structural draws first so they do not depend on cohort size.
    # Latent cascade: a logistic driver followed by damped linear lags.
    K = latent_dim
    drift = np.diag(np.full(K, -_LAG))
    drift[0, 0] = _RATE
    for j in range(1, K):
        drift[j, j - 1] = _LAG
    w_init = np.zeros(K)
    w_init[0] = _START
    dec_W = rng.normal(size=(K, feature_dim))
    dec_W *= _DECODER_SCALE / np.linalg.norm(dec_W, axis=0)
    dec_b = -0.5 * dec_W.sum(axis=0) + rng.normal(0.0, 0.3, size=feature_dim)
    vol_load = rng.normal(0.0, 1.0, size=(3, volume_dim)) / math.sqrt(3)
    vol_base = rng.uniform(1500.0, 8000.0, size=volume_dim)
    tau_w = rng.normal(0.0, 1.0, size=volume_dim) / math.sqrt(volume_dim)
    gam_w = rng.normal(0.0, 1.0, size=volume_dim) / math.sqrt(volume_dim)

    weights = np.asarray(visit_weights, dtype=np.float64)
    quota = n_subjects * weights / weights.sum()
    alloc = np.floor(quota).astype(int)
    for i in np.argsort(-(quota - alloc), kind="stable")[: n_subjects - alloc.sum()]:
        alloc[i] += 1
    counts = rng.permutation(np.repeat(np.asarray(visit_counts), alloc))

    age_z = rng.normal(size=n_subjects)
    sex = (rng.uniform(size=n_subjects) < 0.6).astype(float)
    factors = rng.normal(size=(n_subjects, 3))
    vol_z = factors @ vol_load + 0.6 * rng.normal(size=(n_subjects, volume_dim))
    volumes = vol_base * (1.0 + 0.08 * vol_z)
    ages = 62.0 + 9.0 * age_z

    if fixed_alignment is None:
        lin = 0.55 * age_z + 0.35 * sex + vol_z @ tau_w
        tau = (1.0 + _ONSET_SPAN / (1.0 + np.exp(-1.5 * lin))
               + 0.4 * np.tanh(vol_z[:, 0] * vol_z[:, 1]))
        gamma = 0.5 * 4.0 ** (1.0 / (1.0 + np.exp(-1.6 * (vol_z @ gam_w - 0.3 * age_z))))
    else:
        tau = np.full(n_subjects, float(fixed_alignment[0]))
        gamma = np.full(n_subjects, float(fixed_alignment[1]))

    visit_times = []
    for k in counts:
        visit_times.append(np.concatenate([[0.0], np.cumsum(_visit_gaps(rng, k - 1, interval))]))
    stages = [t + g * vt for t, g, vt in zip(tau, gamma, visit_times)]
    truth = SyntheticTruth(
        subject_ids=[f"S{i:04d}" for i in range(n_subjects)],
        tau=tau, gamma=gamma, latent_dim=K, drift=drift, rate=_RATE,
        w_init=w_init, dec_W=dec_W, dec_b=dec_b, offset=2.5, amplitude=_AMPLITUDE, noise_sd=noise_sd,
    )
    curve = trace_curve(truth, np.concatenate(stages))

    subjects, i0 = [], 0
    for i, (sid, vt) in enumerate(zip(truth.subject_ids, visit_times)):
        w = curve[i0 : i0 + len(vt)]
        i0 += len(vt)
        feats = truth.features_at(w) + noise_sd * rng.normal(size=(len(vt), feature_dim))
        visits = [VisitRecord(sid, float(t), f) for t, f in zip(vt, feats)]
        subjects.append(SubjectRecord(sid, np.array([ages[i], sex[i]]), volumes[i], visits))
    return Cohort(subjects, feature_dim, volume_dim), truth


def trace_curve(truth: SyntheticTruth, stages: np.ndarray) -> np.ndarray:
    """Latent curve evaluated at arbitrary (unsorted) stages >= 0."""
    stages = np.asarray(stages, dtype=np.float64)
    if stages.size == 0:
        return np.zeros((0, truth.latent_dim))
    if np.any(stages < 0):
        raise ContractError("stages must be nonnegative")
    unique, inverse = np.unique(stages, return_inverse=True)
    sol = solve_ivp(lambda s, w: truth.field(w), (0.0, float(unique[-1]) + 1e-9), truth.w_init,
                    method="DOP853", t_eval=unique, rtol=1e-12, atol=1e-13)
    if not sol.success:
        raise ContractError(f"ground-truth integration failed: {sol.message}")
    return sol.y.T[inverse.reshape(-1)]


# --- splits -----------------------------------------------------------------------


def kfold_split(cohort: Cohort | int, k: int, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Subject-level k-fold partition: list of (train_indices, test_indices)."""
    n = cohort if isinstance(cohort, int) else len(cohort)
    if k < 2:
        raise ContractError(f"k must be at least 2, got {k}")
    if k > n:
        raise ContractError(f"k={k} exceeds the number of subjects ({n})")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.array_split(perm, k)
    out = []
    for i, test in enumerate(folds):
        train = np.concatenate([f for j, f in enumerate(folds) if j != i])
        out.append((np.sort(train), np.sort(test)))
    return out


def prefix_target_split(subject: SubjectRecord) -> tuple[list[VisitRecord], list[VisitRecord]]:
    """All visits but the last are observed; the last is the forecast target."""
    return subject.visits[:-1], subject.visits[-1:]
