"""Differentiable initial-value solvers.

Gradients are obtained by recording every solver stage on the tape
(discretize-then-optimize), so they are exactly consistent with the forward
discretization.  Fields are autonomous callables ``field(z) -> dz/dt``
built from tape primitives.  A field may additionally provide a fused
``rk4_step(z, h)`` kernel that the fixed-step solver will prefer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np

from .errors import ContractError, DivergenceError, NumericalError
from .tensor import Tensor, as_tensor, concat


class OdeField(Protocol):
    def __call__(self, z: Tensor) -> Tensor: ...


@dataclass(frozen=True)
class SolverConfig:
    method: str = "rk4"
    step: float = 0.05
    rtol: float = 1e-6
    atol: float = 1e-8
    max_steps: int = 100_000

    def __post_init__(self):
        if self.method not in ("rk4", "dopri5"):
            raise ContractError(f"unknown solver method {self.method!r} (rk4 or dopri5)")
        if not self.step > 0:
            raise ContractError(f"solver step must be positive, got {self.step}")
        if not (self.rtol > 0 and self.atol > 0):
            raise ContractError("solver tolerances must be positive")
        if self.max_steps < 1:
            raise ContractError("max_steps must be at least 1")


def rk4_step(field: OdeField, z: Tensor, h) -> Tensor:
    """One classical Runge-Kutta step; ``h`` is a float or a (B, 1) column."""
    fused = getattr(field, "rk4_step", None)
    if fused is not None:
        return fused(z, h)
    k1 = field(z)
    k2 = field(z + k1 * (h * 0.5))
    k3 = field(z + k2 * (h * 0.5))
    k4 = field(z + k3 * h)
    return z + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h * (1.0 / 6.0))


def _fixed_segment(field, z: Tensor, duration: Tensor, cfg: SolverConfig, label: str) -> Tensor:
    # Full steps of size cfg.step, then one remainder step that lands exactly on
    # the segment end and carries the derivative with respect to its length.
    d = duration.value.reshape(-1)
    if not np.any(d != 0.0):
        return z
    n_full = np.floor(d / cfg.step)
    n_steps = int(n_full.max()) + 1
    if n_steps > cfg.max_steps:
        raise DivergenceError(
            f"segment {label} needs {n_steps} steps of {cfg.step}, over max_steps={cfg.max_steps}"
        )
    remainder = duration - Tensor((n_full * cfg.step).reshape(duration.shape))
    batched = z.ndim == 2
    for s in range(n_steps):
        full = (s < n_full).astype(np.float64) * cfg.step
        last = (s == n_full).astype(np.float64)
        if batched:
            full, last = full[:, None], last[:, None]
        if not last.any():
            h = Tensor(full) if batched else float(full[0])
        else:
            h = remainder * Tensor(last) + Tensor(full)
            if not batched:
                h = h.reshape(())
        z = rk4_step(field, z, h)
    return z


# Dormand-Prince 5(4) tableau.
_DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_DP_B = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_DP_E = (
    35 / 384 - 5179 / 57600,
    0.0,
    500 / 1113 - 7571 / 16695,
    125 / 192 - 393 / 640,
    -2187 / 6784 + 92097 / 339200,
    11 / 84 - 187 / 2100,
    -1 / 40,
)


def _adaptive_segment(field, z: Tensor, duration: Tensor, cfg: SolverConfig, label: str) -> Tensor:
    # Integrate dz/ds = d * g(z) over s in [0, 1] so that rows with different
    # segment lengths share one accepted step sequence.
    d = duration.value
    if not np.any(d != 0.0):
        return z
    scale = duration if z.ndim == 2 else duration.reshape(())

    def rhs(state):
        return field(state) * scale

    s, h, steps = 0.0, min(1.0, cfg.step / max(float(np.abs(d).max()), 1e-12)), 0
    while s < 1.0:
        if steps >= cfg.max_steps:
            raise DivergenceError(f"dopri5 exceeded max_steps={cfg.max_steps} on segment {label}")
        h = min(h, 1.0 - s)
        ks = []
        for i in range(7):
            stage = z
            for j, a in enumerate(_DP_A[i]):
                if a != 0.0:
                    stage = stage + ks[j] * (a * h)
            ks.append(rhs(stage))
        err = sum(k.value * (e * h) for k, e in zip(ks, _DP_E) if e != 0.0)
        new_value = z.value + sum(k.value * (b * h) for k, b in zip(ks, _DP_B) if b != 0.0)
        tol = cfg.atol + cfg.rtol * np.maximum(np.abs(z.value), np.abs(new_value))
        ratio = float(np.max(np.abs(err) / tol))
        if not math.isfinite(ratio):
            raise NumericalError(f"dopri5: non-finite error estimate on segment {label}")
        steps += 1
        if ratio <= 1.0:
            nz = z
            for k, b in zip(ks, _DP_B):
                if b != 0.0:
                    nz = nz + k * (b * h)
            z, s = nz, s + h
        factor = 10.0 if ratio == 0.0 else min(10.0, max(0.2, 0.9 * ratio ** -0.2))
        h = h * factor
    return z


def solve_segments(field: OdeField, z0: Tensor, durations, cfg: SolverConfig) -> list[Tensor]:
    """Integrate consecutive segments; returns the state at every boundary.

    ``z0`` is (L,) or (B, L).  ``durations`` has one column per segment:
    shape (S,) for an unbatched state or (B, S) for a batch, each entry a
    nonnegative segment length (a Tensor when lengths carry gradients).
    Output has S + 1 entries, the first being ``z0`` itself.
    """
    durations = as_tensor(durations)
    if np.any(durations.value < 0):
        raise ContractError("segment durations must be nonnegative")
    batched = z0.ndim == 2
    n_seg = durations.shape[-1] if durations.ndim else 0
    if batched and durations.shape[:1] != z0.shape[:1]:
        raise ContractError(f"durations {durations.shape} do not match batch {z0.shape}")
    segment = _fixed_segment if cfg.method == "rk4" else _adaptive_segment
    states = [z0]
    z = z0
    for j in range(n_seg):
        d = durations[:, j : j + 1] if batched else durations[j]
        z = segment(field, z, d, cfg, label=f"#{j}")
        if not np.all(np.isfinite(z.value)):
            raise NumericalError(f"non-finite state after segment #{j}")
        states.append(z)
    return states


def ode_solve(field: OdeField, z0: Tensor, t0, times, cfg: SolverConfig | None = None) -> list[Tensor]:
    """State at each requested time, starting from ``z0`` at ``t0``.

    ``t0`` and ``times`` may be floats or Tensors (for gradients with respect
    to the time grid).  A requested time equal to ``t0`` returns ``z0`` itself.
    """
    cfg = cfg or SolverConfig()
    z0 = as_tensor(z0)
    times_t = times if isinstance(times, Tensor) else Tensor(np.asarray(times, dtype=np.float64))
    times_t = times_t.reshape(-1)
    t0_t = as_tensor(t0).reshape(1)
    tv = times_t.value
    if not (np.all(np.isfinite(tv)) and np.isfinite(t0_t.value).all()):
        raise ContractError("ode_solve: times must be finite")
    if tv.size == 0:
        return []
    if np.any(np.diff(tv) < 0):
        raise ContractError("ode_solve: requested times must be nondecreasing")
    if tv[0] < t0_t.value[0]:
        raise ContractError(f"ode_solve: first time {tv[0]} precedes t0={t0_t.value[0]}")
    grid = concat([t0_t, times_t])
    durations = grid[1:] - grid[:-1]
    if z0.ndim == 2:
        durations = Tensor(np.ones((z0.shape[0], 1))) * durations.reshape(1, -1)
    return solve_segments(field, z0, durations, cfg)[1:]


def convergence_order(
    field: OdeField,
    z0,
    t0: float,
    t1: float,
    steps: Sequence[float],
    reference: np.ndarray | Callable[[float], np.ndarray] | None = None,
) -> float:
    """Slope of log(error) against log(step) for the fixed-step solver.

    ``reference`` is the exact state at ``t1`` (array or callable of time);
    when omitted a run with a step 100 times finer than the smallest is used.
    Returns ``math.inf`` when every run is exact to rounding.
    """
    steps = sorted(float(h) for h in steps)
    if len(steps) < 3:
        raise ContractError("convergence_order needs at least 3 step sizes")
    z0 = as_tensor(z0)

    def run(h):
        cfg = SolverConfig(method="rk4", step=h, max_steps=10**7)
        return ode_solve(field, z0, t0, [t1], cfg)[0].value

    if reference is None:
        ref = run(steps[0] / 100.0)
    elif callable(reference):
        ref = np.asarray(reference(t1), dtype=np.float64)
    else:
        ref = np.asarray(reference, dtype=np.float64)
    errors = np.array([np.max(np.abs(run(h) - ref)) for h in steps])
    floor = 64 * np.finfo(float).eps * max(1.0, float(np.max(np.abs(ref))))
    if np.all(errors <= floor):
        return math.inf
    if np.any(errors <= 0):
        raise NumericalError("convergence_order: some runs are exact while others are not")
    slope, _ = np.polyfit(np.log(steps), np.log(errors), 1)
    return float(slope)
