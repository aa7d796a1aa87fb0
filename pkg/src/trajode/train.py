"""Joint end-to-end optimization of all networks with Adam."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Cohort, Standardization
from .errors import ContractError, DataError, DivergenceError
from .losses import build_pairs, contrastive_loss, kl_loss, mse_loss, total_loss
from .model import GROUPS, Batch, ModelDims, ModelParams, forward, make_batch
from .odeint import SolverConfig
from .tensor import Tape, backward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Every training hyperparameter; serialized verbatim into checkpoints."""

    epochs: int = 150
    batch_size: int = 32
    learning_rate: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip_norm: float = 5.0
    lambda_kl: float = 1e-4
    lambda_c: float = 1e-4
    delta: float = 0.9
    temperature: float = 0.1
    latent_dim: int = 16
    hidden: int = 64
    align_hidden: int = 32
    solver_method: str = "rk4"
    step: float = 0.2
    rtol: float = 1e-6
    atol: float = 1e-8
    max_steps: int = 100_000
    seed: int = 0

    def __post_init__(self):
        positive = ("epochs", "batch_size", "grad_clip_norm", "temperature", "latent_dim",
                    "hidden", "align_hidden", "step", "rtol", "atol", "max_steps")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ContractError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("learning_rate", "lambda_kl", "lambda_c", "adam_eps"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be nonnegative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ContractError("Adam betas must lie in [0, 1)")
        if not -1 < self.delta < 1:
            raise ContractError("delta must lie in (-1, 1)")
        self.solver  # validates solver fields

    @property
    def solver(self) -> SolverConfig:
        return SolverConfig(self.solver_method, self.step, self.rtol, self.atol, self.max_steps)

    def dims(self, feature_dim: int, condition_dim: int) -> ModelDims:
        return ModelDims(feature_dim, self.latent_dim, self.hidden, condition_dim, self.align_hidden)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - set(names))
        if unknown:
            raise ContractError(f"unknown config keys: {unknown}")
        kwargs = {}
        for k, v in d.items():
            default = names[k].default
            kwargs[k] = type(default)(v) if not isinstance(default, str) else str(v)
        return cls(**kwargs)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


class AdamState:
    """Bias-corrected Adam moments for a dict of parameter arrays."""

    def __init__(self, params: ModelParams):
        self.m = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.t = 0


def adam_step(params: ModelParams, adam: AdamState, grads: dict[str, np.ndarray],
              lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """In-place Adam update of ``params`` and ``adam``."""
    b1, b2 = betas
    for k, p in params.arrays.items():
        if grads[k].shape != p.shape:
            raise ContractError(f"adam_step: gradient for {k} has shape {grads[k].shape}, param {p.shape}")
    adam.t += 1
    bc1 = 1.0 - b1**adam.t
    bc2 = 1.0 - b2**adam.t
    for k, p in params.arrays.items():
        g = grads[k]
        adam.m[k] = b1 * adam.m[k] + (1.0 - b1) * g
        adam.v[k] = b2 * adam.v[k] + (1.0 - b2) * (g * g)
        p -= lr * (adam.m[k] / bc1) / (np.sqrt(adam.v[k] / bc2) + eps)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Rescale ``grads`` in place to global norm <= max_norm; returns the pre-clip norm."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


@dataclass
class BatchLoss:
    mse: float
    kl: float
    contrast: float
    total: float


def batch_objective(P, batch: Batch, noise, cfg: TrainConfig):
    """Forward pass plus the three loss terms; returns (total, parts, fwd)."""
    fwd = forward(P, batch, noise, cfg.solver)
    mse = mse_loss(fwd.predictions, batch.features)
    kl = kl_loss(fwd.posterior.mu, fwd.posterior.log_sigma)
    pairs = build_pairs(batch.features, batch.cond[batch.owner], cfg.delta)
    contrast = contrastive_loss(fwd.aligned, pairs, cfg.temperature)
    total = total_loss(mse, kl, contrast, cfg.lambda_kl, cfg.lambda_c)
    return total, (mse, kl, contrast), fwd


LOSS_TERMS = ("total", "mse", "kl", "contrast")


def flat_objective(params: ModelParams, batch: Batch, noise, cfg: TrainConfig, term: str = "total"):
    """The objective (or one of its terms) as a function of the flat parameter vector."""
    if term not in LOSS_TERMS:
        raise ContractError(f"unknown loss term {term!r}; expected one of {LOSS_TERMS}")
    layout = [(k, v.shape, v.size) for k, v in params.arrays.items()]

    def f(flat):
        P, i = {}, 0
        for name, shape, size in layout:
            P[name] = flat[i : i + size].reshape(*shape)
            i += size
        total, (mse, kl, con), _ = batch_objective(P, batch, noise, cfg)
        return {"total": total, "mse": mse, "kl": kl, "contrast": con}[term]

    return f


def loss_and_grads(params: ModelParams, batch: Batch, noise, cfg: TrainConfig):
    tape = Tape()
    P = params.bind(tape)
    total, (mse, kl, con), _ = batch_objective(P, batch, noise, cfg)
    grads_by_node = backward(tape, total)
    grads = {k: grads_by_node[t] for k, t in P.items()}
    parts = BatchLoss(mse.item(), kl.item(), con.item(), total.item())
    return parts, grads


def train_epoch(params: ModelParams, adam: AdamState, subjects, cfg: TrainConfig,
                rng: np.random.Generator, sample_latent: bool = True) -> BatchLoss:
    """One shuffled pass; updates ``params``/``adam`` in place, returns mean losses.

    With ``sample_latent`` off, z0 = mu and the objective is deterministic.
    """
    order = rng.permutation(len(subjects))
    sums = np.zeros(4)
    n_batches = 0
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start : start + cfg.batch_size]
        batch = make_batch([subjects[i] for i in idx])
        noise = rng.standard_normal((batch.size, params.dims.latent_dim))
        if not sample_latent:
            noise = None
        try:
            parts, grads = loss_and_grads(params, batch, noise, cfg)
        except (ArithmeticError, DivergenceError) as exc:
            raise DivergenceError(f"non-finite forward pass on batch {batch.subject_ids}: {exc}") from exc
        values = [parts.mse, parts.kl, parts.contrast, parts.total]
        if not all(math.isfinite(v) for v in values):
            raise DivergenceError(
                f"non-finite loss on batch {batch.subject_ids}: mse={parts.mse} "
                f"kl={parts.kl} contrast={parts.contrast}"
            )
        clip_grad_norm(grads, cfg.grad_clip_norm)
        adam_step(params, adam, grads, cfg.learning_rate, (cfg.beta1, cfg.beta2), cfg.adam_eps)
        if not params.is_finite():
            raise DivergenceError(f"parameters became non-finite after batch {batch.subject_ids}")
        sums += values
        n_batches += 1
    return BatchLoss(*(sums / n_batches))


def fit(cohort: Cohort, cfg: TrainConfig, params: ModelParams | None = None,
        sample_latent: bool = True):
    """Train on a standardized cohort; returns (params, history rows)."""
    if len(cohort) == 0:
        raise ContractError("fit: empty cohort")
    rng = np.random.default_rng(cfg.seed)
    dims = cfg.dims(cohort.feature_dim, cohort.condition_dim + 2)
    params = params.copy() if params is not None else ModelParams.init(dims, rng)
    adam = AdamState(params)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        losses = train_epoch(params, adam, cohort.subjects, cfg, rng, sample_latent)
        history.append({"epoch": epoch, **dataclasses.asdict(losses)})
        if epoch == 1 or epoch % 50 == 0:
            log.info("epoch %d total=%.5f mse=%.5f kl=%.3f contrast=%.4f",
                     epoch, losses.total, losses.mse, losses.kl, losses.contrast)
    return params, history


def group_gradient_norms(grads: dict[str, np.ndarray]) -> dict[str, float]:
    norms = {g: 0.0 for g in GROUPS}
    for k, v in grads.items():
        norms[k.split(".")[0]] += float(np.sum(v * v))
    return {g: math.sqrt(v) for g, v in norms.items()}


# --- persistence ----------------------------------------------------------------


def write_history(history, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mse", "kl", "contrast", "total"])
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in ("mse", "kl", "contrast", "total")])


def save_checkpoint(path, params: ModelParams, cfg: TrainConfig,
                    stats: Standardization | None = None) -> None:
    doc = {
        "format": "trajode-checkpoint/1",
        "dims": dataclasses.asdict(params.dims),
        "config": cfg.to_dict(),
        "standardization": stats.to_dict() if stats is not None else None,
        "params": {k: {"shape": list(v.shape), "values": v.reshape(-1).tolist()}
                   for k, v in params.arrays.items()},
    }
    try:
        Path(path).write_text(json.dumps(doc), encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path):
    """Returns (params, config, standardization or None); floats round-trip exactly."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if doc.get("format") != "trajode-checkpoint/1":
        raise DataError(f"{path}: not a checkpoint file")
    dims = ModelDims(**doc["dims"])
    arrays = {k: np.array(v["values"], dtype=np.float64).reshape(v["shape"])
              for k, v in doc["params"].items()}
    stats = doc.get("standardization")
    return (ModelParams(dims, arrays), TrainConfig.from_dict(doc["config"]),
            Standardization.from_dict(stats) if stats else None)
