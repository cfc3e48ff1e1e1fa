"""Flow-matching primitives: linear interpolation paths, the velocity
regression loss, Euler ODE stepping, and teacher training on toy data.

Conventions: time runs from t=1 (pure noise) down to t=0 (data).
Sampling integrates the learned velocity field backwards along a
TimeGrid whose entries are indexed so that times[j] is the j-th
timestep, times[0] = 0 and times[n] = 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, NumericsError
from .nn import VelocityModel, build_velocity_model, eval_velocity, forward_velocity, \
    init_optimizer, optimizer_step, value_and_grad
from .seeds import derive_seed


@dataclass(frozen=True)
class ToyDataset:
    """A finite-support toy distribution: points drawn uniformly from
    `support`, an array of shape (k, d)."""

    support: np.ndarray
    seed: int = 0

    def __post_init__(self):
        support = np.asarray(self.support, dtype=np.float64)
        if support.ndim == 1:
            support = support.reshape(-1, 1)
        if support.ndim != 2 or support.shape[0] == 0:
            raise ConfigError("dataset support must be a non-empty (k, d) array")
        object.__setattr__(self, "support", support)

    @property
    def d(self) -> int:
        return self.support.shape[1]

    def sample(self, count: int, rng=None) -> np.ndarray:
        if rng is None:
            rng = np.random.default_rng(self.seed)
        idx = rng.integers(0, self.support.shape[0], size=count)
        return self.support[idx]


@dataclass(frozen=True)
class TimeGrid:
    """Inference timesteps, stored ascending: times[j] = t_j, with
    t_0 = 0 and t_n = 1 exactly."""

    times: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        if times.ndim != 1 or times.size < 2:
            raise ConfigError("time grid needs at least two timesteps")
        if times[0] != 0.0 or times[-1] != 1.0:
            raise ConfigError("time grid endpoints must be exactly 0 and 1")
        if np.any(np.diff(times) <= 0):
            raise ConfigError("time grid must be strictly ordered")
        object.__setattr__(self, "times", times)

    @classmethod
    def uniform(cls, n: int) -> "TimeGrid":
        if n < 1:
            raise ConfigError(f"step count must be positive, got {n}")
        return cls(np.arange(n + 1) / n)

    @property
    def n(self) -> int:
        return self.times.size - 1

    def index_of(self, t: float) -> int:
        """Index j with times[j] == t exactly; off-grid times are errors."""
        j = int(np.searchsorted(self.times, t))
        if j >= self.times.size or self.times[j] != t:
            raise ConfigError(f"time {t!r} is not on the grid")
        return j


def interpolate(x0, x1, t):
    """Point on the straight noising path: (1 - t) * x0 + t * x1."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ValueError(f"shape mismatch: {x0.shape} vs {x1.shape}")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError("interpolation time must lie in [0, 1]")
    if t.ndim == 1 and x0.ndim == 2:
        t = t[:, None]
    return (1.0 - t) * x0 + t * x1


def _as_batch(batch):
    """Accept (x0, x1, t) arrays or a list of per-sample triples."""
    if isinstance(batch, tuple) and len(batch) == 3:
        x0, x1, t = batch
    else:
        rows = list(batch)
        if not rows:
            raise ValueError("batch must be non-empty")
        x0 = np.stack([np.atleast_1d(np.asarray(r[0], dtype=np.float64)) for r in rows])
        x1 = np.stack([np.atleast_1d(np.asarray(r[1], dtype=np.float64)) for r in rows])
        t = np.asarray([r[2] for r in rows], dtype=np.float64)
        return x0, x1, t
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if x0.ndim == 1:
        x0, x1 = x0[:, None], x1[:, None]
    if x0.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    return x0, x1, t


def fm_loss_node(params, batch, R: int):
    """Flow-matching loss as a graph node (for gradient computation)."""
    x0, x1, t = _as_batch(batch)
    xt = interpolate(x0, x1, t)
    target = x1 - x0
    pred = forward_velocity(params, xt, t, R)
    return ad.mean(ad.square(ad.sub(pred, target)))


def fm_loss(model: VelocityModel, batch) -> float:
    """Mean squared error between predicted and conditional velocities,
    averaged over batch elements and dimensions."""
    return float(fm_loss_node(model.params, batch, model.R).data)


def train_teacher(data: ToyDataset, iterations: int, batch_size: int, lr: float,
                  seed: int, H: int = 32, R: int = 3):
    """Train a velocity model on a toy dataset.

    Per iteration: data points uniformly from the support, noise from a
    standard normal, t uniform on [0, 1]. Returns the model together
    with the per-iteration loss history.
    """
    if iterations < 1:
        raise ConfigError(f"iterations must be positive, got {iterations}")
    if batch_size < 1:
        raise ConfigError(f"batch size must be positive, got {batch_size}")
    model = build_velocity_model(data.d, H, R, derive_seed(seed, "teacher-init"))
    rng = np.random.default_rng(derive_seed(seed, "teacher-batches"))
    params = model.params
    opt = init_optimizer(params, lr)
    losses = np.empty(iterations)
    for i in range(iterations):
        x0 = data.sample(batch_size, rng)
        x1 = rng.standard_normal((batch_size, data.d))
        t = rng.random(batch_size)
        try:
            loss, grads = value_and_grad(
                lambda ps: fm_loss_node(ps, (x0, x1, t), R), params
            )
        except NumericsError as e:
            raise NumericsError(f"teacher training diverged at iteration {i}: {e}") from e
        params, opt = optimizer_step(params, grads, opt)
        losses[i] = loss
    return model.with_params(params), losses


def euler_step(model: VelocityModel, x, t_from: float, t_to: float):
    """One explicit Euler step of the velocity ODE from t_from to t_to."""
    if not (0.0 <= t_from <= 1.0 and 0.0 <= t_to <= 1.0):
        raise ValueError("step times must lie in [0, 1]")
    x = np.asarray(x, dtype=np.float64)
    return x + (t_to - t_from) * eval_velocity(model, x, t_from)


def denoise(model: VelocityModel, x1, grid: TimeGrid):
    """Integrate from noise at t=1 down to t=0, keeping every state.

    Performs exactly grid.n model evaluations and returns a Trajectory
    whose states satisfy the Euler recurrence by construction.
    """
    from .trajstore import Trajectory  # stores are built on top of flow

    x1 = np.asarray(x1, dtype=np.float64)
    if x1.ndim != 1 or x1.size != model.d:
        raise ValueError(f"noise draw must be a vector of length {model.d}")
    n = grid.n
    states = np.empty((n + 1, model.d))
    states[n] = x1
    for j in range(n, 0, -1):
        states[j - 1] = euler_step(model, states[j], grid.times[j], grid.times[j - 1])
        if not np.all(np.isfinite(states[j - 1])):
            raise NumericsError(f"denoising produced non-finite state at step j={j - 1}")
    return Trajectory(grid=grid, states=states, noise_seed=None,
                      fingerprint=model.fingerprint())


def denoise_batch(model: VelocityModel, X1: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """Batched form of `denoise`: (B, d) noise draws to (n+1, B, d) states,
    one model evaluation per timestep for the whole batch."""
    X1 = np.asarray(X1, dtype=np.float64)
    n = grid.n
    states = np.empty((n + 1,) + X1.shape)
    states[n] = X1
    for j in range(n, 0, -1):
        dt = grid.times[j - 1] - grid.times[j]
        states[j - 1] = states[j] + dt * eval_velocity(model, states[j], grid.times[j])
        if not np.all(np.isfinite(states[j - 1])):
            raise NumericsError(f"denoising produced non-finite state at step j={j - 1}")
    return states


def sample_model(model: VelocityModel, count: int, steps: int, seed: int) -> np.ndarray:
    """Draw `count` samples by integrating seeded noise through `steps`
    uniform Euler steps; the cost is exactly `steps` evaluations."""
    if count < 1:
        raise ConfigError(f"sample count must be positive, got {count}")
    rng = np.random.default_rng(seed)
    X1 = rng.standard_normal((count, model.d))
    return denoise_batch(model, X1, TimeGrid.uniform(steps))[0]
