"""Conditional latent ODE: alignment heads, encoder, ODE field and decoder.

Every network is a one-hidden-layer tanh MLP.  Subjects are processed in
batches: alignment and encoding are matrix operations over all visits of
the batch, and the latent trajectories of all subjects are integrated in
lockstep (one row per subject).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Sequence

import numpy as np

from .errors import ContractError, ShapeError
from .odeint import SolverConfig, ode_solve, solve_segments
from .tensor import Tape, Tensor, as_tensor, concat

GAMMA_FLOOR = 1e-3
# softplus(b) + GAMMA_FLOOR == 1 so training starts at unit speed
GAMMA_BIAS_INIT = math.log(math.expm1(1.0 - GAMMA_FLOOR))

GROUPS = ("enc", "field", "dec", "tau", "gamma")


@dataclass(frozen=True)
class ModelDims:
    feature_dim: int = 68
    latent_dim: int = 16
    hidden: int = 64
    condition_dim: int = 16
    align_hidden: int = 32

    def shapes(self) -> dict[str, tuple[int, ...]]:
        D, L, H, P, A = (self.feature_dim, self.latent_dim, self.hidden,
                         self.condition_dim, self.align_hidden)
        return {
            "enc.W_in": (D + 1, H), "enc.b_in": (H,),
            "enc.W_mu": (H, L), "enc.b_mu": (L,),
            "enc.W_ls": (H, L), "enc.b_ls": (L,),
            "field.W1": (L, H), "field.b1": (H,),
            "field.W2": (H, L), "field.b2": (L,),
            "dec.W1": (L, H), "dec.b1": (H,),
            "dec.W2": (H, D), "dec.b2": (D,),
            "tau.W1": (P, A), "tau.b1": (A,),
            "tau.W2": (A, 1), "tau.b2": (1,),
            "gamma.W1": (P, A), "gamma.b1": (A,),
            "gamma.W2": (A, 1), "gamma.b2": (1,),
        }


@dataclass
class ModelParams:
    dims: ModelDims
    arrays: dict[str, np.ndarray]

    def __post_init__(self):
        expected = self.dims.shapes()
        if set(expected) != set(self.arrays):
            missing = sorted(set(expected) ^ set(self.arrays))
            raise ContractError(f"parameter names do not match dims: {missing}")
        for name, shape in expected.items():
            arr = np.asarray(self.arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {arr.shape}")
            self.arrays[name] = arr
        self.arrays = {name: self.arrays[name] for name in expected}

    @classmethod
    def init(cls, dims: ModelDims, rng: np.random.Generator) -> "ModelParams":
        """Xavier-uniform weights, zero biases, unit-speed gamma head."""
        arrays = {}
        for name, shape in dims.shapes().items():
            if len(shape) == 2:
                limit = math.sqrt(6.0 / (shape[0] + shape[1]))
                arrays[name] = rng.uniform(-limit, limit, size=shape)
            else:
                arrays[name] = np.zeros(shape)
        arrays["gamma.b2"][:] = GAMMA_BIAS_INIT
        return cls(dims, arrays)

    def bind(self, tape: Tape | None = None) -> dict[str, Tensor]:
        """Parameters as tape leaves (or constants when ``tape`` is None)."""
        if tape is None:
            return {k: Tensor(v) for k, v in self.arrays.items()}
        return {k: tape.leaf(v) for k, v in self.arrays.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(self.dims, {k: v.copy() for k, v in self.arrays.items()})

    def flatten(self) -> np.ndarray:
        return np.concatenate([v.reshape(-1) for v in self.arrays.values()])

    def unflatten(self, flat: np.ndarray) -> "ModelParams":
        out, i = {}, 0
        for name, arr in self.arrays.items():
            out[name] = np.asarray(flat[i : i + arr.size]).reshape(arr.shape)
            i += arr.size
        return ModelParams(self.dims, out)

    def group_slices(self) -> dict[str, list[slice]]:
        """Flat-index ranges belonging to each parameter group."""
        slices: dict[str, list[slice]] = {g: [] for g in GROUPS}
        i = 0
        for name, arr in self.arrays.items():
            slices[name.split(".")[0]].append(slice(i, i + arr.size))
            i += arr.size
        return slices

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays.values())


def mlp(x, W1, b1, W2, b2) -> Tensor:
    return (x @ W1 + b1).tanh() @ W2 + b2


class MLPField:
    """Autonomous latent vector field z -> tanh(z W1 + b1) W2 + b2."""

    def __init__(self, W1: Tensor, b1: Tensor, W2: Tensor, b2: Tensor):
        self.W1, self.b1, self.W2, self.b2 = W1, b1, W2, b2

    @classmethod
    def from_params(cls, P: dict[str, Tensor]) -> "MLPField":
        return cls(P["field.W1"], P["field.b1"], P["field.W2"], P["field.b2"])

    def __call__(self, z: Tensor) -> Tensor:
        return mlp(z, self.W1, self.b1, self.W2, self.b2)

    def rk4_step(self, z: Tensor, h) -> Tensor:
        """Fused RK4 step recorded as a single tape node."""
        W1, b1, W2, b2 = (t.value for t in (self.W1, self.b1, self.W2, self.b2))
        h_t = h if isinstance(h, Tensor) else None
        hv = h_t.value if h_t is not None else float(h)
        z2 = z.value if z.ndim == 2 else z.value.reshape(1, -1)
        hc = hv if np.ndim(hv) == 2 else np.reshape(hv, (1, 1)) if np.ndim(hv) else hv

        def f(a):
            u = np.tanh(a @ W1 + b1)
            return u, u @ W2 + b2

        u1, k1 = f(z2)
        a2 = z2 + (0.5 * hc) * k1
        u2, k2 = f(a2)
        a3 = z2 + (0.5 * hc) * k2
        u3, k3 = f(a3)
        a4 = z2 + hc * k3
        u4, k4 = f(a4)
        incr = k1 + 2.0 * k2 + 2.0 * k3 + k4
        out = z2 + (hc / 6.0) * incr
        out_value = out if z.ndim == 2 else out.reshape(z.shape)

        inputs = [z, self.W1, self.b1, self.W2, self.b2] + ([h_t] if h_t is not None else [])
        tape = next((t.tape for t in inputs if t.tape is not None), None)
        if tape is None:
            return Tensor(out_value)

        def vjp(g):
            g = g.reshape(z2.shape)
            gW1 = np.zeros_like(W1)
            gb1 = np.zeros_like(b1)
            gW2 = np.zeros_like(W2)
            gb2 = np.zeros_like(b2)

            def field_vjp(a, u, gk):
                nonlocal gW1, gb1, gW2, gb2
                gW2 += u.T @ gk
                gb2 += gk.sum(axis=0)
                gpre = (gk @ W2.T) * (1.0 - u * u)
                gW1 += a.T @ gpre
                gb1 += gpre.sum(axis=0)
                return gpre @ W1.T

            gz = g.copy()
            gh = (g * incr).sum(axis=1, keepdims=True) / 6.0
            gk1 = (hc / 6.0) * g
            gk2 = (hc / 3.0) * g
            gk3 = (hc / 3.0) * g
            gk4 = (hc / 6.0) * g
            ga4 = field_vjp(a4, u4, gk4)
            gz += ga4
            gk3 = gk3 + hc * ga4
            gh += (ga4 * k3).sum(axis=1, keepdims=True)
            ga3 = field_vjp(a3, u3, gk3)
            gz += ga3
            gk2 = gk2 + (0.5 * hc) * ga3
            gh += 0.5 * (ga3 * k2).sum(axis=1, keepdims=True)
            ga2 = field_vjp(a2, u2, gk2)
            gz += ga2
            gk1 = gk1 + (0.5 * hc) * ga2
            gh += 0.5 * (ga2 * k1).sum(axis=1, keepdims=True)
            gz += field_vjp(z2, u1, gk1)
            grads = [gz.reshape(z.shape), gW1, gb1, gW2, gb2]
            if h_t is not None:
                grads.append(gh.reshape(h_t.shape) if h_t.size == gh.size else np.array(gh.sum()).reshape(h_t.shape))
            return grads

        return tape.record(out_value, inputs, vjp)


# --- single-subject operations ------------------------------------------------


@dataclass
class AlignedSubject:
    tau: Tensor  # shape (1,)
    gamma: Tensor  # shape (1,)
    aligned_times: Tensor  # shape (K,)

    @property
    def tau_value(self) -> float:
        return self.tau.item()

    @property
    def gamma_value(self) -> float:
        return self.gamma.item()


@dataclass
class LatentPosterior:
    mu: Tensor
    log_sigma: Tensor


def alignment_heads(P: dict[str, Tensor], cond) -> tuple[Tensor, Tensor]:
    """Onset shift (unconstrained) and speed (> 0) for each row of ``cond``."""
    tau = mlp(cond, P["tau.W1"], P["tau.b1"], P["tau.W2"], P["tau.b2"])
    raw = mlp(cond, P["gamma.W1"], P["gamma.b1"], P["gamma.W2"], P["gamma.b2"])
    return tau, raw.softplus() + GAMMA_FLOOR


def align_times(P: dict[str, Tensor], M, C, raw_times: Sequence[float]) -> AlignedSubject:
    raw = np.asarray(raw_times, dtype=np.float64).reshape(-1)
    if raw.size == 0:
        raise ContractError("align_times: raw_times is empty")
    if np.any(np.diff(raw) < 0):
        raise ContractError("align_times: raw_times must be nondecreasing")
    cond = np.concatenate([np.ravel(M), np.ravel(C)])
    if cond.size != P["tau.W1"].shape[0]:
        raise ShapeError(f"align_times: condition dim {cond.size} != {P['tau.W1'].shape[0]}")
    tau, gamma = alignment_heads(P, cond)
    aligned = tau + gamma * Tensor(raw - raw[0])
    return AlignedSubject(tau, gamma, aligned)


def _encode_rows(P, inputs: Tensor, pool: np.ndarray) -> LatentPosterior:
    emb = (inputs @ P["enc.W_in"] + P["enc.b_in"]).tanh()
    pooled = Tensor(pool) @ emb
    mu = pooled @ P["enc.W_mu"] + P["enc.b_mu"]
    log_sigma = pooled @ P["enc.W_ls"] + P["enc.b_ls"]
    return LatentPosterior(mu, log_sigma)


def encode(P: dict[str, Tensor], X_prefix, aligned_prefix_times) -> LatentPosterior:
    """Posterior over the initial latent state from an observed prefix."""
    X = as_tensor(X_prefix)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    t = as_tensor(aligned_prefix_times).reshape(-1, 1)
    if X.shape[0] == 0:
        raise ContractError("encode: empty prefix")
    if t.shape[0] != X.shape[0]:
        raise ShapeError(f"encode: {X.shape[0]} visits but {t.shape[0]} times")
    if X.shape[1] + 1 != P["enc.W_in"].shape[0]:
        raise ShapeError(f"encode: feature dim {X.shape[1]} != {P['enc.W_in'].shape[0] - 1}")
    rel = t - t[0:1]
    n = X.shape[0]
    post = _encode_rows(P, concat([X, rel], axis=1), np.full((1, n), 1.0 / n))
    return LatentPosterior(post.mu.reshape(-1), post.log_sigma.reshape(-1))


def reparameterize(post: LatentPosterior, noise) -> Tensor:
    noise = as_tensor(noise)
    if noise.shape != post.mu.shape:
        raise ShapeError(f"reparameterize: noise {noise.shape} vs mu {post.mu.shape}")
    return post.mu + post.log_sigma.exp() * noise


def decode(P: dict[str, Tensor], z) -> Tensor:
    z = as_tensor(z)
    if z.shape[-1] != P["dec.W1"].shape[0]:
        raise ShapeError(f"decode: latent dim {z.shape[-1]} != {P['dec.W1'].shape[0]}")
    return mlp(z, P["dec.W1"], P["dec.b1"], P["dec.W2"], P["dec.b2"])


# --- batched pipeline ----------------------------------------------------------


@dataclass
class Batch:
    """Constant arrays describing the visits of a group of subjects."""

    subject_ids: list[str]
    cond: np.ndarray  # (B, P)
    features: np.ndarray  # (N, D), all visits
    elapsed: np.ndarray  # (N, 1), raw time since the subject's first visit
    owner: np.ndarray  # (N,), subject row of each visit
    position: np.ndarray  # (N,), visit index within the subject
    prefix_len: np.ndarray  # (B,)
    prefix_rows: np.ndarray  # (Np,)
    pool: np.ndarray  # (B, Np) mean-pooling weights
    gaps: np.ndarray  # (B, S) raw inter-visit gaps, zero padded
    state_rows: np.ndarray  # (N,) row of each visit in the stacked state matrix
    target_rows: np.ndarray = dc_field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def size(self) -> int:
        return len(self.subject_ids)


def make_batch(subjects, prefix_lens: Sequence[int] | None = None) -> Batch:
    """Assemble a batch; prefixes default to all visits but the last."""
    B = len(subjects)
    if B == 0:
        raise ContractError("make_batch: no subjects")
    counts = [len(s.visits) for s in subjects]
    if prefix_lens is None:
        prefix_lens = [k - 1 for k in counts]
    for s, k, n in zip(subjects, counts, prefix_lens):
        if not 1 <= n <= k:
            raise ContractError(f"subject {s.subject_id}: prefix_len {n} outside [1, {k}]")
    S = max(counts) - 1
    cond = np.stack([s.condition_vector() for s in subjects])
    feats, elapsed, owner, pos = [], [], [], []
    gaps = np.zeros((B, S))
    for b, s in enumerate(subjects):
        times = np.array([v.time_years for v in s.visits])
        gaps[b, : len(times) - 1] = np.diff(times)
        for k, v in enumerate(s.visits):
            feats.append(v.features)
            elapsed.append(times[k] - times[0])
            owner.append(b)
            pos.append(k)
    owner = np.array(owner)
    pos = np.array(pos)
    prefix_len = np.asarray(prefix_lens)
    is_prefix = pos < prefix_len[owner]
    prefix_rows = np.flatnonzero(is_prefix)
    pool = np.zeros((B, prefix_rows.size))
    pool[owner[prefix_rows], np.arange(prefix_rows.size)] = 1.0
    pool /= pool.sum(axis=1, keepdims=True)
    return Batch(
        subject_ids=[s.subject_id for s in subjects],
        cond=cond,
        features=np.asarray(feats, dtype=np.float64),
        elapsed=np.asarray(elapsed, dtype=np.float64).reshape(-1, 1),
        owner=owner,
        position=pos,
        prefix_len=prefix_len,
        prefix_rows=prefix_rows,
        pool=pool,
        gaps=gaps,
        state_rows=pos * B + owner,
        target_rows=np.flatnonzero(~is_prefix),
    )


@dataclass
class ForwardPass:
    tau: Tensor  # (B, 1)
    gamma: Tensor  # (B, 1)
    aligned: Tensor  # (N, 1)
    posterior: LatentPosterior  # (B, L) each
    z0: Tensor
    predictions: Tensor  # (N, D)


def forward(P: dict[str, Tensor], batch: Batch, noise, solver: SolverConfig) -> ForwardPass:
    """align -> encode prefixes -> sample z0 -> integrate -> decode every visit."""
    tau, gamma = alignment_heads(P, batch.cond)
    elapsed = Tensor(batch.elapsed)
    gamma_v = gamma[batch.owner]
    aligned = tau[batch.owner] + gamma_v * elapsed
    rel = gamma_v[batch.prefix_rows] * Tensor(batch.elapsed[batch.prefix_rows])
    enc_in = concat([Tensor(batch.features[batch.prefix_rows]), rel], axis=1)
    post = _encode_rows(P, enc_in, batch.pool)
    z0 = post.mu if noise is None else post.mu + post.log_sigma.exp() * as_tensor(noise)
    # z0 sits at the first aligned visit; the field is autonomous, so only the
    # aligned gaps gamma * (t_k - t_{k-1}) drive the integration.
    durations = gamma * Tensor(batch.gaps)
    states = solve_segments(MLPField.from_params(P), z0, durations, solver)
    stacked = concat(states, axis=0) if len(states) > 1 else states[0]
    preds = decode(P, stacked[batch.state_rows])
    return ForwardPass(tau, gamma, aligned, post, z0, preds)


@dataclass
class Forecast:
    subject_id: str
    times: np.ndarray  # raw visit times
    aligned_times: np.ndarray
    reconstructions: np.ndarray  # visits < prefix_len
    predictions: np.ndarray  # visits >= prefix_len
    tau: float
    gamma: float


def forecast_subject(params: ModelParams, subject, prefix_len: int, noise=None,
                     solver: SolverConfig | None = None) -> Forecast:
    """Reconstruct the prefix and forecast every later visit of one subject."""
    K = len(subject.visits)
    if not 1 <= prefix_len < K:
        raise ContractError(f"forecast_subject: prefix_len {prefix_len} outside [1, {K - 1}]")
    solver = solver or SolverConfig()
    P = params.bind()
    batch = make_batch([subject], [prefix_len])
    noise = None if noise is None else np.reshape(np.asarray(noise, dtype=np.float64), (1, -1))
    out = forward(P, batch, noise, solver)
    preds = out.predictions.value
    return Forecast(
        subject_id=subject.subject_id,
        times=np.array([v.time_years for v in subject.visits]),
        aligned_times=out.aligned.value.reshape(-1),
        reconstructions=preds[:prefix_len],
        predictions=preds[prefix_len:],
        tau=out.tau.item(),
        gamma=out.gamma.item(),
    )


def latent_trajectory(params: ModelParams, z0, t0: float, times, solver: SolverConfig | None = None):
    """Latent states of a single trajectory at arbitrary aligned times."""
    P = params.bind()
    return [s.value for s in ode_solve(MLPField.from_params(P), as_tensor(z0), t0, times, solver)]
