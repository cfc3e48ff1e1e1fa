"""Synthetic trajectory dataset: generate, validate, persist, and query
full teacher denoising paths.

The on-disk format is JSON Lines: one header object, then one record
per trajectory. All reals are serialized with round-trip precision, so
save followed by load is bit-exact and the store bytes are a pure
function of (teacher, N, grid, seed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, StoreFormatError, StoreIntegrityError
from .flow import TimeGrid, denoise_batch, eval_velocity
from .nn import VelocityModel
from .seeds import derive_seed

RECURRENCE_TOL = 1e-9


def noise_from_seed(noise_seed: int, d: int) -> np.ndarray:
    """The standard-normal draw a trajectory starts from, reproducible
    from its recorded seed."""
    return np.random.default_rng(noise_seed).standard_normal(d)


@dataclass
class Trajectory:
    """One denoising path: states[j] is the latent at grid.times[j], so
    states[n] is the initial noise and states[0] the clean endpoint."""

    grid: TimeGrid
    states: np.ndarray
    noise_seed: int | None
    fingerprint: str

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.ndim != 2 or self.states.shape[0] != self.grid.n + 1:
            raise ValueError(
                f"trajectory needs {self.grid.n + 1} states, got {self.states.shape}"
            )

    @property
    def d(self) -> int:
        return self.states.shape[1]

    @property
    def noise(self) -> np.ndarray:
        return self.states[-1]

    @property
    def endpoint(self) -> np.ndarray:
        return self.states[0]

    def state_at(self, t: float) -> np.ndarray:
        return self.states[self.grid.index_of(t)]

    def max_recurrence_error(self, model: VelocityModel) -> float:
        """Largest per-coordinate deviation from the Euler recurrence
        when re-evaluating the generating model on the stored states."""
        if model.d != self.d:
            raise ValueError("model dimension does not match trajectory")
        times = self.grid.times
        v = eval_velocity(model, self.states[1:], times[1:])
        dt = (times[:-1] - times[1:])[:, None]
        residual = self.states[:-1] - self.states[1:] - dt * v
        return float(np.max(np.abs(residual)))


@dataclass
class TrajectoryStore:
    """A collection of trajectories sharing one grid, dimension, and
    generating-model fingerprint."""

    grid: TimeGrid
    d: int
    seed: int
    teacher_fingerprint: str
    trajectories: list

    def __post_init__(self):
        for traj in self.trajectories:
            if traj.d != self.d or traj.grid.n != self.grid.n:
                raise ValueError("store members must share grid and dimension")
            if traj.fingerprint != self.teacher_fingerprint:
                raise ValueError("store members must share the teacher fingerprint")

    @property
    def N(self) -> int:
        return len(self.trajectories)

    def states_array(self) -> np.ndarray:
        """All states stacked as (N, n+1, d)."""
        return np.stack([traj.states for traj in self.trajectories])

    def equal(self, other: "TrajectoryStore") -> bool:
        return (
            self.N == other.N
            and self.d == other.d
            and self.seed == other.seed
            and self.teacher_fingerprint == other.teacher_fingerprint
            and np.array_equal(self.grid.times, other.grid.times)
            and all(
                a.noise_seed == b.noise_seed and np.array_equal(a.states, b.states)
                for a, b in zip(self.trajectories, other.trajectories)
            )
        )


def generate_store(teacher: VelocityModel, N: int, grid: TimeGrid, seed: int) -> TrajectoryStore:
    """Denoise N independent seeded noise draws into a store.

    Per-trajectory noise seeds are derived from (seed, index), so any
    single trajectory can be regenerated without the others.
    """
    if N < 1:
        raise ConfigError(f"store size must be positive, got {N}")
    noise_seeds = [derive_seed(seed, f"trajectory-{i}") for i in range(N)]
    X1 = np.stack([noise_from_seed(s, teacher.d) for s in noise_seeds])
    states = denoise_batch(teacher, X1, grid)  # (n+1, N, d)
    fingerprint = teacher.fingerprint()
    trajectories = [
        Trajectory(grid=grid, states=states[:, i, :], noise_seed=noise_seeds[i],
                   fingerprint=fingerprint)
        for i in range(N)
    ]
    return TrajectoryStore(grid=grid, d=teacher.d, seed=seed,
                           teacher_fingerprint=fingerprint, trajectories=trajectories)


def save_store(store: TrajectoryStore, path):
    header = {
        "version": 1,
        "N": store.N,
        "n": store.grid.n,
        "d": store.d,
        "teacher_fingerprint": store.teacher_fingerprint,
        "seed": store.seed,
        "grid": store.grid.times.tolist(),
    }
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(header, separators=(",", ":")) + "\n")
        for i, traj in enumerate(store.trajectories):
            record = {
                "index": i,
                "noise_seed": traj.noise_seed,
                "states": traj.states.tolist(),
            }
            f.write(json.dumps(record, separators=(",", ":")) + "\n")


def load_store(path, teacher: VelocityModel | None = None) -> TrajectoryStore:
    """Read a store back from JSONL.

    Validation is opt-in: when `teacher` is given, the fingerprint must
    match and every trajectory must satisfy the Euler recurrence against
    it to within RECURRENCE_TOL per coordinate.
    """
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise StoreFormatError(f"{path}: empty store file")

    def parse(line_no, text):
        try:
            return json.loads(text)
        except json.JSONDecodeError as e:
            raise StoreFormatError(f"{path}: line {line_no}: {e}") from e

    header = parse(1, lines[0])
    for key in ("version", "N", "n", "d", "teacher_fingerprint", "seed", "grid"):
        if key not in header:
            raise StoreFormatError(f"{path}: line 1: header is missing {key!r}")
    grid = TimeGrid(np.asarray(header["grid"], dtype=np.float64))
    if grid.n != header["n"]:
        raise StoreFormatError(f"{path}: line 1: grid length disagrees with n")
    N, d = header["N"], header["d"]
    if len(lines) - 1 != N:
        raise StoreFormatError(
            f"{path}: line {len(lines)}: expected {N} trajectory records, "
            f"found {len(lines) - 1}"
        )
    trajectories = []
    for i in range(N):
        record = parse(i + 2, lines[i + 1])
        states = np.asarray(record["states"], dtype=np.float64)
        if record.get("index") != i:
            raise StoreFormatError(f"{path}: line {i + 2}: record out of order")
        if states.shape != (grid.n + 1, d):
            raise StoreFormatError(
                f"{path}: line {i + 2}: states have shape {states.shape}, "
                f"expected {(grid.n + 1, d)}"
            )
        trajectories.append(
            Trajectory(grid=grid, states=states, noise_seed=record["noise_seed"],
                       fingerprint=header["teacher_fingerprint"])
        )
    store = TrajectoryStore(grid=grid, d=d, seed=header["seed"],
                            teacher_fingerprint=header["teacher_fingerprint"],
                            trajectories=trajectories)
    if teacher is not None:
        validate_store(store, teacher)
    return store


def validate_store(store: TrajectoryStore, teacher: VelocityModel):
    """Integrity check of a store against its claimed generator."""
    if teacher.fingerprint() != store.teacher_fingerprint:
        raise StoreIntegrityError(
            "store was generated by a different teacher "
            f"(fingerprint {store.teacher_fingerprint[:12]}… on file)"
        )
    for i, traj in enumerate(store.trajectories):
        err = traj.max_recurrence_error(teacher)
        if err > RECURRENCE_TOL:
            raise StoreIntegrityError(
                f"trajectory {i} violates the Euler recurrence (max error {err:.3e})"
            )
        if traj.noise_seed is not None:
            expected = noise_from_seed(traj.noise_seed, store.d)
            if not np.array_equal(traj.noise, expected):
                raise StoreIntegrityError(
                    f"trajectory {i} does not start from its seeded noise draw"
                )


def key_points(traj: Trajectory, schedule) -> np.ndarray:
    """States at the key timesteps, ordered from t'_m = 1 down to t'_0 = 0
    (matching schedule.times); shape (m+1, d)."""
    rows = [traj.grid.index_of(t) for t in schedule.times]
    return traj.states[rows]
