"""Flow-matching mathematics for sequence-to-volume transport.

The source stack is the T context volumes, the target stack is the single
target volume repeated T times, and the learning signal is the constant
velocity of the straight path between them. Inference integrates a learned
velocity field with fixed-step forward Euler over the unit flow interval
(state accumulated in float64 so step count never degrades the endpoint),
then aggregates the transported stack back to one volume.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, DataError, IntegrationDivergedError, ShapeError

# A velocity field maps (stack, conditioning value) -> stack; the
# conditioning closure maps the flow step tau to whatever the field expects
# (tau itself for the discrete variant, the interpolated time vector for
# the continuous one).
VelocityFn = Callable[[np.ndarray, object], np.ndarray]
CondFn = Callable[[float], object]


@dataclass(frozen=True)
class FlowState:
    """A point on the transport path: the stack, its flow step, and (for the
    continuous variant) the interpolated per-frame time vector."""

    x_tau: np.ndarray
    tau: float
    time_vec: np.ndarray | None = None

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise DataError(f"flow step must lie in [0, 1], got {self.tau}")
        if self.time_vec is not None and len(self.time_vec) != self.x_tau.shape[0]:
            raise ShapeError("time_vec length must equal the stack's frame count")


@dataclass
class NoiseSchedule:
    """Constant-amplitude path noise with its own seeded stream (default off)."""

    sigma0: float = 0.0
    seed: int = 0
    _rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.sigma0 < 0:
            raise ConfigError(f"noise amplitude must be non-negative, got {self.sigma0}")
        self._rng = np.random.default_rng(self.seed)

    def noise(self, shape: tuple[int, ...]) -> np.ndarray:
        return self._rng.standard_normal(shape)


def broadcast_target(target: np.ndarray, n_frames: int) -> np.ndarray:
    """Repeat one volume n_frames times along a new leading axis."""
    if n_frames < 1:
        raise DataError(f"need at least one frame, got {n_frames}")
    return np.repeat(np.asarray(target)[None], n_frames, axis=0)


def _check_same_shape(x0: np.ndarray, x1: np.ndarray) -> None:
    if x0.shape != x1.shape:
        raise ShapeError(f"stack shapes differ: {x0.shape} vs {x1.shape}")


def sample_path(
    x0: np.ndarray, x1: np.ndarray, tau: float, schedule: NoiseSchedule | None = None
) -> FlowState:
    """Point on the (optionally noised) straight path between the stacks."""
    _check_same_shape(x0, x1)
    if not 0.0 <= tau <= 1.0:
        raise DataError(f"flow step must lie in [0, 1], got {tau}")
    x_tau = (1.0 - tau) * x0 + tau * x1
    if schedule is not None and schedule.sigma0 > 0:
        x_tau = x_tau + schedule.sigma0 * schedule.noise(x0.shape)
    return FlowState(x_tau=x_tau, tau=float(tau))


def target_velocity(x0: np.ndarray, x1: np.ndarray) -> np.ndarray:
    """Velocity of the straight path; constant in the flow step."""
    _check_same_shape(x0, x1)
    return x1 - x0


def cfm_loss(pred: np.ndarray, u: np.ndarray) -> float:
    """Mean squared velocity error over every frame and voxel."""
    _check_same_shape(pred, u)
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(u, dtype=np.float64)
    return float(np.mean(diff * diff))


def interp_times(t_ctx: np.ndarray, t_target: float, tau: float) -> np.ndarray:
    """Per-frame linear interpolation of context times toward the target time."""
    t_ctx = np.asarray(t_ctx, dtype=np.float64)
    return (1.0 - tau) * t_ctx + tau * float(t_target)


def integrate(
    velocity: VelocityFn,
    x0: np.ndarray,
    cond: CondFn,
    n_steps: int,
) -> np.ndarray:
    """Fixed-step forward Euler over the unit flow interval.

    Evaluates the field at tau_j = j / n_steps for j = 0..n_steps-1 and
    returns the final stack (float64). The velocity callable must not
    mutate shared state; step count equals the number of field evaluations.
    """
    if n_steps < 1:
        raise ConfigError(f"need at least one integration step, got {n_steps}")
    x = np.asarray(x0, dtype=np.float64).copy()
    h = 1.0 / n_steps
    for j in range(n_steps):
        v = np.asarray(velocity(x, cond(j * h)), dtype=np.float64)
        if v.shape != x.shape:
            raise ShapeError(f"velocity shape {v.shape} != state shape {x.shape}")
        x += h * v
        if not np.all(np.isfinite(x)):
            raise IntegrationDivergedError(
                f"non-finite state after step {j + 1}/{n_steps}"
            )
    return x


def aggregate(stack: np.ndarray, mode: str = "mean") -> np.ndarray:
    """Collapse a transported (T, H, D, W) stack to one volume."""
    stack = np.asarray(stack)
    if stack.ndim < 1 or stack.shape[0] < 1:
        raise DataError("cannot aggregate an empty stack")
    if mode == "mean":
        return stack.mean(axis=0)
    if mode == "last":
        return stack[-1]
    raise ConfigError(f"unknown aggregation mode {mode!r}, expected mean|last")
