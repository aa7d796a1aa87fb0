"""Reconstruction, KL and metadata-weighted contrastive alignment losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import Tensor, as_tensor, concat, logsumexp


def mse_loss(pred, target) -> Tensor:
    """Mean squared residual per element over all (subject, visit) rows.

    Accepts matching lists of vectors or two (N, D) arrays/tensors.
    """
    if isinstance(pred, (list, tuple)):
        if len(pred) != len(target):
            raise ContractError(f"mse_loss: {len(pred)} predictions vs {len(target)} targets")
        if not pred:
            raise ContractError("mse_loss: empty input")
        pred = concat([as_tensor(p).reshape(1, -1) for p in pred], axis=0)
        target = np.stack([np.asarray(t.value if isinstance(t, Tensor) else t, dtype=np.float64)
                           for t in target])
    pred = as_tensor(pred)
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: prediction shape {pred.shape} vs target {target.shape}")
    if pred.size == 0:
        raise ContractError("mse_loss: empty input")
    return (pred - target).square().mean()


def kl_loss(mu, log_sigma) -> Tensor:
    """Summed KL( N(mu, diag sigma^2) || N(0, I) ) over rows (one per subject)."""
    mu, log_sigma = as_tensor(mu), as_tensor(log_sigma)
    if mu.shape != log_sigma.shape:
        raise ShapeError(f"kl_loss: mu {mu.shape} vs log_sigma {log_sigma.shape}")
    if mu.size == 0:
        raise ContractError("kl_loss: empty input")
    terms = mu.square() + (log_sigma * 2.0).exp() - 1.0 - log_sigma * 2.0
    return terms.sum() * 0.5


def kl_loss_posteriors(posteriors: Sequence) -> Tensor:
    if not posteriors:
        raise ContractError("kl_loss: empty input")
    mu = concat([as_tensor(p.mu).reshape(1, -1) for p in posteriors], axis=0)
    ls = concat([as_tensor(p.log_sigma).reshape(1, -1) for p in posteriors], axis=0)
    return kl_loss(mu, ls)


@dataclass
class PairSet:
    """Visit pairs for the contrastive term.

    ``positive[a, b]`` marks b as a positive of anchor a, ``weight`` holds
    the condition similarity for those pairs (zero elsewhere) and
    ``candidate`` is every non-anchor visit.
    """

    positive: np.ndarray  # (N, N) bool
    weight: np.ndarray  # (N, N) float in [0, 1]
    candidate: np.ndarray  # (N, N) bool

    @property
    def n_visits(self) -> int:
        return self.positive.shape[0]

    @property
    def n_pairs(self) -> int:
        return int(self.positive.sum())

    @property
    def anchors(self) -> list[int]:
        return [int(a) for a in np.flatnonzero(self.positive.any(axis=1))]

    def positives(self, anchor: int) -> list[int]:
        return [int(b) for b in np.flatnonzero(self.positive[anchor])]

    def candidates(self, anchor: int) -> list[int]:
        return [int(b) for b in np.flatnonzero(self.candidate[anchor])]


def _cosine_matrix(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    unit = x / np.where(norms > 0, norms, 1.0)
    return unit @ unit.T


def build_pairs(features, conditions, delta: float) -> PairSet:
    """Positives by feature cosine > delta, weighted by clipped condition cosine."""
    X = np.asarray(features, dtype=np.float64)
    Cn = np.asarray(conditions, dtype=np.float64)
    if not -1.0 < delta < 1.0:
        raise ContractError(f"delta must lie in (-1, 1), got {delta}")
    n = X.shape[0] if X.ndim == 2 else 0
    if n < 2:
        empty = np.zeros((n, n), dtype=bool)
        return PairSet(empty, np.zeros((n, n)), empty.copy())
    if Cn.shape[0] != n:
        raise ShapeError(f"build_pairs: {n} feature rows vs {Cn.shape[0]} condition rows")
    off_diag = ~np.eye(n, dtype=bool)
    positive = (_cosine_matrix(X) > delta) & off_diag
    weight = np.where(positive, np.clip(_cosine_matrix(Cn), 0.0, 1.0), 0.0)
    return PairSet(positive, weight, off_diag)


def contrastive_loss(aligned_times, pairs: PairSet, temperature: float) -> Tensor:
    """Weighted InfoNCE over aligned times with kernel s(a, b) = -(a - b)^2.

    Averaged over positive pairs; zero when there are none.
    """
    if not temperature > 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    t = as_tensor(aligned_times).reshape(-1, 1)
    if t.shape[0] != pairs.n_visits:
        raise ShapeError(f"contrastive_loss: {t.shape[0]} times for {pairs.n_visits} visits")
    if pairs.n_pairs == 0:
        return Tensor(0.0)
    diff = t - t.reshape(1, -1)
    logits = diff.square() * (-1.0 / temperature)
    log_norm = logsumexp(logits, mask=pairs.candidate)  # (N, 1)
    log_prob = logits - log_norm
    return (log_prob * Tensor(pairs.weight)).sum() * (-1.0 / pairs.n_pairs)


def total_loss(mse, kl, contrast, lambda_kl: float, lambda_c: float) -> Tensor:
    if lambda_kl < 0 or lambda_c < 0:
        raise ContractError("loss weights must be nonnegative")
    return as_tensor(mse) + as_tensor(kl) * lambda_kl + as_tensor(contrast) * lambda_c
