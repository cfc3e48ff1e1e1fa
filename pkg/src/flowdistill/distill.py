"""Few-step student training: key-timestep schedules, the trajectory
regression loss, latent queues, the queue-based adversarial driver, and
few-step sampling.

One training round sweeps k from m-1 down to 0. For each k the student
is first regressed onto the stored finite-difference velocity over the
key interval; a generated latent is then popped from queue k+1,
advanced one student Euler step, pushed into queue k, and compared
against its paired stored latent through the frozen teacher's features
and the head for k. Both adversarial gradients are evaluated before
either update is applied.
"""

from __future__ import annotations

import json
import os
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .adversarial import FeatureTapConfig, ProjectionHead, build_projection_head, \
    d_loss_node, features_node, g_loss_node, head_logit_node
from .errors import ConfigError, NumericsError, QueueEmpty
from .flow import euler_step
from .nn import OptimizerState, VelocityModel, eval_velocity, \
    forward_velocity, init_optimizer, optimizer_step, params_from_payload, \
    params_to_payload, value_and_grad, zeros_like
from .seeds import derive_seed
from .trajstore import TrajectoryStore, key_points

METRIC_COLUMNS = ("iter", "k", "traj_loss", "d_loss", "g_loss", "queue_sizes")


@dataclass(frozen=True)
class KeySchedule:
    """The m+1 key timesteps t'_m = 1 > ... > t'_0 = 0, stored in that
    (descending) order; every entry must lie on the inference grid."""

    times: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        if times.ndim != 1 or times.size < 2:
            raise ConfigError("key schedule needs at least two timesteps")
        if times[0] != 1.0 or times[-1] != 0.0:
            raise ConfigError("key schedule endpoints must be exactly 1 and 0")
        if np.any(np.diff(times) >= 0):
            raise ConfigError("key timesteps must be strictly decreasing")
        object.__setattr__(self, "times", times)

    @property
    def m(self) -> int:
        return self.times.size - 1

    def time(self, k: int) -> float:
        """t'_k; k counts up from the clean end (t'_0 = 0)."""
        return float(self.times[self.m - k])


def make_key_schedule(n: int, m: int) -> KeySchedule:
    """Uniform key timesteps t'_k = k/m on an n-step uniform grid."""
    if m < 1:
        raise ConfigError(f"interval count must be positive, got {m}")
    if n % m != 0:
        raise ConfigError(f"uniform keys need n divisible by m, got n={n}, m={m}")
    return KeySchedule(np.arange(m, -1, -1) / m)


def traj_loss_node(params, keys, schedule: KeySchedule, k: int, R: int):
    keys = np.asarray(keys, dtype=np.float64)
    batched = keys.ndim == 3
    if not batched:
        keys = keys[None]
    m = schedule.m
    if not 0 <= k <= m - 1:
        raise ValueError(f"k must lie in [0, {m - 1}], got {k}")
    if keys.shape[1] != m + 1:
        raise ValueError(f"expected {m + 1} key latents, got {keys.shape[1]}")
    t_lo, t_hi = schedule.time(k), schedule.time(k + 1)
    l_lo = keys[:, m - k, :]
    l_hi = keys[:, m - k - 1, :]
    target = (l_lo - l_hi) / (t_lo - t_hi)
    pred = forward_velocity(params, l_hi, t_hi, R)
    return ad.mean(ad.square(ad.sub(pred, target)))


def traj_loss(student: VelocityModel, keys, schedule: KeySchedule, k: int) -> float:
    """Squared error between the student's velocity at the key latent for
    t'_{k+1} and the stored finite-difference velocity over [t'_k, t'_{k+1}],
    averaged over dimensions (and trajectories, when keys is batched)."""
    return float(traj_loss_node(student.params, keys, schedule, k, student.R).data)


@dataclass
class QueueEntry:
    """Generated latent(s) tagged with a key index, carried together
    with the real key latents of the paired source trajectories.

    A latent row always has the data dimension d; entries may carry a
    single latent (shape (d,)) or a small batch (shape (B, d)) with
    real_keys and traj_index shaped to match, mirroring how training
    processes minibatches.
    """

    latent: np.ndarray
    real_keys: np.ndarray  # (m+1, d) or (B, m+1, d), ordered like KeySchedule.times
    traj_index: object  # int or integer array of length B
    key_index: int


class LatentQueues:
    """FIFO queues Q_0 ... Q_m of bounded capacity; pushing into a full
    queue evicts the oldest entry."""

    def __init__(self, m: int, capacity: int):
        if capacity < 1:
            raise ConfigError(f"queue capacity must be positive, got {capacity}")
        self.m = m
        self.capacity = capacity
        self._queues = [deque(maxlen=capacity) for _ in range(m + 1)]

    def push(self, k: int, entry: QueueEntry):
        if entry.key_index != k:
            raise ValueError(f"entry is tagged for key {entry.key_index}, not {k}")
        self._queues[k].append(entry)

    def pop(self, k: int) -> QueueEntry:
        if not self._queues[k]:
            raise QueueEmpty(f"queue {k} is empty (warm-up skip)")
        return self._queues[k].popleft()

    def size(self, k: int) -> int:
        return len(self._queues[k])

    def sizes(self) -> list:
        return [len(q) for q in self._queues]


def queue_push(queues: LatentQueues, k: int, entry: QueueEntry):
    queues.push(k, entry)


def queue_pop(queues: LatentQueues, k: int) -> QueueEntry:
    return queues.pop(k)


@dataclass(frozen=True)
class DistillConfig:
    """Hyperparameters of one distillation run (toy-scale defaults)."""

    m: int = 5
    n: int = 50
    lambda_adv: float = 0.1
    student_lr: float = 1e-4
    adv_student_lr: float = 1e-5  # generator-side step; kept well below the
    # discriminator's so the critic can police overshoot (two-timescale rule)
    head_lr: float = 1e-2
    batch_size: int = 128
    iterations: int = 3000  # training rounds; each sweeps k = m-1 .. 0
    seed: int = 0
    queue_capacity: int = 64
    tap_noisy: int | None = None  # default: last block
    tap_clean: int | None = None  # default: middle block
    heads: str = "per_timestep"  # or "single"
    generator_loss: str = "non_saturating"  # or "minimax"
    adv_real_source: str = "queued"  # or "fresh"
    adv_optimizer: str = "separate"  # or "shared" (one state for both losses)
    adv_accum: int = 1  # rounds of adversarial gradients averaged per update
    adv_batch: int = 32  # latents per queue entry (the adversarial minibatch)
    checkpoint_interval: int = 0  # rounds between checkpoints; 0 disables

    def validate(self):
        if self.m < 1:
            raise ConfigError("m must be positive")
        if self.n % self.m != 0:
            raise ConfigError(f"n={self.n} must be divisible by m={self.m}")
        if self.lambda_adv < 0:
            raise ConfigError("lambda_adv must be non-negative")
        if self.student_lr <= 0 or self.adv_student_lr <= 0 or self.head_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.iterations < 1 or self.batch_size < 1:
            raise ConfigError("iterations and batch size must be positive")
        if self.heads not in ("per_timestep", "single"):
            raise ConfigError(f"unknown heads mode {self.heads!r}")
        if self.adv_real_source not in ("queued", "fresh"):
            raise ConfigError(f"unknown adv_real_source {self.adv_real_source!r}")
        if self.generator_loss not in ("non_saturating", "minimax"):
            raise ConfigError(f"unknown generator loss {self.generator_loss!r}")
        if self.adv_optimizer not in ("separate", "shared"):
            raise ConfigError(f"unknown adv_optimizer {self.adv_optimizer!r}")
        if self.adv_accum < 1:
            raise ConfigError("adv_accum must be positive")
        if self.adv_batch < 1:
            raise ConfigError("adv_batch must be positive")


@dataclass
class DistillResult:
    student: VelocityModel
    heads: list
    metrics: list  # rows matching METRIC_COLUMNS


class _DistillState:
    """Everything the training loop carries between rounds; snapshotting
    this exactly is what makes interrupted runs resumable bit-for-bit."""

    def __init__(self, teacher: VelocityModel, config: DistillConfig):
        m = config.m
        self.round = 0
        self.student_params = teacher.params.copy()
        self.opt_student = init_optimizer(self.student_params, config.student_lr)
        # the adversarial loss gets its own moments (and a slower step)
        # unless configured to share; mixing both losses in one EMA lets
        # every adversarial step replay the trajectory momentum
        self.opt_student_adv = init_optimizer(self.student_params, config.adv_student_lr)
        n_heads = m if config.heads == "per_timestep" else 1
        self.heads = [
            build_projection_head(teacher.H, k, derive_seed(config.seed, f"head-{k}"))
            for k in range(n_heads)
        ]
        self.opt_heads = [init_optimizer(h.params, config.head_lr) for h in self.heads]
        self.rng_batch = np.random.default_rng(derive_seed(config.seed, "trajectory-batches"))
        self.rng_noise = np.random.default_rng(derive_seed(config.seed, "queue-noise"))
        self.queues = LatentQueues(m, config.queue_capacity)
        self.metrics = []
        # adversarial gradients can be averaged over adv_accum rounds
        # before a parameter update is applied
        self.adv_g_sum = zeros_like(self.student_params)
        self.adv_g_count = 0
        self.adv_h_sum = [zeros_like(h.params) for h in self.heads]
        self.adv_h_count = [0 for _ in self.heads]

    def head_for(self, k: int) -> int:
        return k if len(self.heads) > 1 else 0


def _opt_to_payload(opt: OptimizerState) -> dict:
    return {
        "m": params_to_payload(opt.m),
        "v": params_to_payload(opt.v),
        "step": opt.step,
        "lr": opt.lr,
        "beta1": opt.beta1,
        "beta2": opt.beta2,
        "eps": opt.eps,
        "weight_decay": opt.weight_decay,
    }


def _opt_from_payload(p: dict) -> OptimizerState:
    return OptimizerState(
        params_from_payload(p["m"]), params_from_payload(p["v"]), p["step"],
        p["lr"], p["beta1"], p["beta2"], p["eps"], p["weight_decay"],
    )


def save_checkpoint(path, state: _DistillState, config: DistillConfig):
    payload = {
        "format": "flowdistill-checkpoint",
        "version": 1,
        "m": config.m,
        "round": state.round,
        "student": params_to_payload(state.student_params),
        "opt_student": _opt_to_payload(state.opt_student),
        "opt_student_adv": _opt_to_payload(state.opt_student_adv),
        "heads": [
            {"index": h.index, "params": params_to_payload(h.params)}
            for h in state.heads
        ],
        "opt_heads": [_opt_to_payload(o) for o in state.opt_heads],
        "rng_batch": state.rng_batch.bit_generator.state,
        "rng_noise": state.rng_noise.bit_generator.state,
        "adv_g_sum": params_to_payload(state.adv_g_sum),
        "adv_g_count": state.adv_g_count,
        "adv_h_sum": [params_to_payload(p) for p in state.adv_h_sum],
        "adv_h_count": state.adv_h_count,
        "queues": [
            [
                {
                    "latent": e.latent.tolist(),
                    "real_keys": e.real_keys.tolist(),
                    "traj_index": e.traj_index.tolist()
                    if isinstance(e.traj_index, np.ndarray) else e.traj_index,
                    "key_index": e.key_index,
                }
                for e in state.queues._queues[k]
            ]
            for k in range(config.m + 1)
        ],
        "metrics": state.metrics,
    }
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        json.dump(payload, f, separators=(",", ":"))
        f.write("\n")
    os.replace(tmp, path)


def load_checkpoint(path, teacher: VelocityModel, config: DistillConfig) -> _DistillState:
    with open(path, encoding="utf-8") as f:
        payload = json.load(f)
    if payload.get("format") != "flowdistill-checkpoint":
        raise ConfigError(f"{path}: not a distillation checkpoint")
    if payload["m"] != config.m:
        raise ConfigError(
            f"checkpoint was written for m={payload['m']}, config has m={config.m}"
        )
    state = _DistillState(teacher, config)
    state.round = payload["round"]
    state.student_params = params_from_payload(payload["student"])
    state.opt_student = _opt_from_payload(payload["opt_student"])
    state.opt_student_adv = _opt_from_payload(payload["opt_student_adv"])
    state.heads = [
        ProjectionHead(h["index"], params_from_payload(h["params"]))
        for h in payload["heads"]
    ]
    state.opt_heads = [_opt_from_payload(o) for o in payload["opt_heads"]]
    state.rng_batch.bit_generator.state = payload["rng_batch"]
    state.rng_noise.bit_generator.state = payload["rng_noise"]
    state.adv_g_sum = params_from_payload(payload["adv_g_sum"])
    state.adv_g_count = payload["adv_g_count"]
    state.adv_h_sum = [params_from_payload(p) for p in payload["adv_h_sum"]]
    state.adv_h_count = list(payload["adv_h_count"])
    for k, entries in enumerate(payload["queues"]):
        for e in entries:
            traj_index = (np.asarray(e["traj_index"])
                          if isinstance(e["traj_index"], list) else e["traj_index"])
            state.queues.push(k, QueueEntry(
                np.asarray(e["latent"], dtype=np.float64),
                np.asarray(e["real_keys"], dtype=np.float64),
                traj_index, e["key_index"],
            ))
    state.metrics = [tuple(row) for row in payload["metrics"]]
    return state


def _adv_gradients(teacher, taps, schedule, config, state, k, entry, fresh_keys,
                   fresh_indices):
    """Adversarial gradients for one popped queue entry, added to the
    accumulators; parameters move later, at the accumulation boundary.

    The generated latents are the entry advanced one student step;
    their real counterparts are the paired stored latents carried by
    the entry (or, with adv_real_source="fresh", the latents of the
    trajectories sampled this iteration).

    Returns (d_loss, g_loss, advanced QueueEntry).
    """
    m = schedule.m
    t_hi, t_lo = schedule.time(k + 1), schedule.time(k)
    dt = t_lo - t_hi
    head_idx = state.head_for(k)
    head = state.heads[head_idx]
    l_prev = np.atleast_2d(entry.latent)

    if config.adv_real_source == "queued":
        rk = entry.real_keys
        real = rk[m - k].reshape(1, -1) if rk.ndim == 2 else rk[:, m - k, :]
        adv_traj_index = entry.traj_index
    else:
        B = l_prev.shape[0]
        real = fresh_keys[:B, m - k, :]
        adv_traj_index = fresh_indices[:B] if B > 1 else int(fresh_indices[0])

    def gen_loss(ps):
        v = forward_velocity(ps, l_prev, t_hi, teacher.R)
        l_gen = ad.add(l_prev, ad.mul(v, dt))
        feats = features_node(teacher, l_gen, t_lo, taps)
        p_fake = ad.sigmoid(head_logit_node(head.params, feats))
        return ad.mul(g_loss_node(p_fake, config.generator_loss), config.lambda_adv)

    g_scaled, s_grads = value_and_grad(gen_loss, state.student_params)
    g_loss_val = g_scaled / config.lambda_adv
    state.adv_g_sum = state.adv_g_sum.zip_with(s_grads, np.add)
    state.adv_g_count += 1

    # advance the latents with the current student; reused by the queue push
    l_gen_value = l_prev + dt * forward_velocity(
        state.student_params, l_prev, t_hi, teacher.R
    ).data
    feats_fake = features_node(teacher, l_gen_value, t_lo, taps).data
    feats_real = features_node(teacher, real, t_lo, taps).data

    def disc_loss(ps):
        p_real = ad.sigmoid(head_logit_node(ps, feats_real))
        p_fake = ad.sigmoid(head_logit_node(ps, feats_fake))
        return ad.mul(d_loss_node(p_real, p_fake), config.lambda_adv)

    d_scaled, h_grads = value_and_grad(disc_loss, head.params)
    d_loss_val = d_scaled / config.lambda_adv
    state.adv_h_sum[head_idx] = state.adv_h_sum[head_idx].zip_with(h_grads, np.add)
    state.adv_h_count[head_idx] += 1

    latents = l_gen_value[0].copy() if entry.latent.ndim == 1 else l_gen_value.copy()
    advanced = QueueEntry(latents, entry.real_keys, adv_traj_index, k)
    return d_loss_val, g_loss_val, advanced


def _apply_adv_updates(state, config):
    """Step the student and heads on the averaged adversarial gradients
    and reset the accumulators."""
    if state.adv_g_count > 0:
        mean_g = state.adv_g_sum.map(lambda t: t / state.adv_g_count)
        if config.adv_optimizer == "shared":
            state.student_params, state.opt_student = optimizer_step(
                state.student_params, mean_g, state.opt_student
            )
        else:
            state.student_params, state.opt_student_adv = optimizer_step(
                state.student_params, mean_g, state.opt_student_adv
            )
        state.adv_g_sum = zeros_like(state.student_params)
        state.adv_g_count = 0
    for i, head in enumerate(state.heads):
        if state.adv_h_count[i] > 0:
            mean_h = state.adv_h_sum[i].map(lambda t: t / state.adv_h_count[i])
            new_params, state.opt_heads[i] = optimizer_step(
                head.params, mean_h, state.opt_heads[i]
            )
            state.heads[i] = head.with_params(new_params)
            state.adv_h_sum[i] = zeros_like(new_params)
            state.adv_h_count[i] = 0


def distill(teacher: VelocityModel, store: TrajectoryStore, config: DistillConfig,
            checkpoint_path=None, resume: bool = False) -> DistillResult:
    """Run the full distillation loop.

    The student starts from the teacher's parameters; the teacher is
    never modified. With lambda_adv = 0 the adversarial phase is skipped
    entirely, leaving pure trajectory regression. When `checkpoint_path`
    is set, full training state is snapshotted every
    `config.checkpoint_interval` rounds and `resume=True` continues an
    interrupted run bit-for-bit.
    """
    config.validate()
    if store.grid.n != config.n:
        raise ConfigError(f"store has n={store.grid.n}, config expects n={config.n}")
    if store.d != teacher.d:
        raise ConfigError("store dimension does not match the teacher")
    schedule = make_key_schedule(config.n, config.m)
    taps = FeatureTapConfig(
        config.tap_noisy if config.tap_noisy is not None else teacher.R,
        config.tap_clean if config.tap_clean is not None else max(1, teacher.R // 2),
    )
    if not (0 <= taps.noisy_block <= teacher.R and 0 <= taps.clean_block <= teacher.R):
        raise ConfigError(f"feature taps {taps} out of range for R={teacher.R}")

    teacher_print = teacher.fingerprint()
    keys_all = np.stack([key_points(t, schedule) for t in store.trajectories])
    m, B, N = config.m, config.batch_size, store.N

    if resume and checkpoint_path and os.path.exists(checkpoint_path):
        state = load_checkpoint(checkpoint_path, teacher, config)
    else:
        state = _DistillState(teacher, config)

    while state.round < config.iterations:
        rnd = state.round
        for k in range(m - 1, -1, -1):
            idx = state.rng_batch.integers(0, N, size=B)
            keys_b = keys_all[idx]
            try:
                loss, grads = value_and_grad(
                    lambda ps: traj_loss_node(ps, keys_b, schedule, k, teacher.R),
                    state.student_params,
                )
            except NumericsError as e:
                raise NumericsError(
                    f"distillation diverged (traj phase, k={k}, round={rnd}): {e}"
                ) from e
            state.student_params, state.opt_student = optimizer_step(
                state.student_params, grads, state.opt_student
            )

            d_loss_val = g_loss_val = float("nan")
            if config.lambda_adv > 0.0:
                if k == m - 1:
                    # fresh noise paired with this iteration's trajectories
                    nb = min(config.adv_batch, B)
                    z = state.rng_noise.standard_normal((nb, store.d))
                    entry = QueueEntry(z if nb > 1 else z[0],
                                       keys_b[:nb] if nb > 1 else keys_b[0],
                                       idx[:nb] if nb > 1 else int(idx[0]), m)
                    state.queues.push(m, entry)
                try:
                    entry = state.queues.pop(k + 1)
                except QueueEmpty:
                    pass  # warm-up: skip the adversarial update for this k
                else:
                    try:
                        d_loss_val, g_loss_val, advanced = _adv_gradients(
                            teacher, taps, schedule, config, state, k, entry,
                            keys_b, idx,
                        )
                    except NumericsError as e:
                        raise NumericsError(
                            f"distillation diverged (adv phase, k={k}, round={rnd}): {e}"
                        ) from e
                    state.queues.push(k, advanced)

            state.metrics.append(
                (rnd, k, loss, d_loss_val, g_loss_val,
                 "|".join(str(s) for s in state.queues.sizes()))
            )
        state.round += 1
        if config.lambda_adv > 0.0 and state.round % config.adv_accum == 0:
            _apply_adv_updates(state, config)
        if (checkpoint_path and config.checkpoint_interval
                and state.round % config.checkpoint_interval == 0):
            save_checkpoint(checkpoint_path, state, config)

    if teacher.fingerprint() != teacher_print:
        raise NumericsError("teacher parameters changed during distillation")
    student = teacher.with_params(state.student_params)
    return DistillResult(student=student, heads=list(state.heads), metrics=state.metrics)


def sample_student(student: VelocityModel, schedule: KeySchedule, z):
    """Integrate one noise draw through the m key steps.

    Returns (sample, nfe); nfe counts model evaluations and equals m.
    """
    x = np.asarray(z, dtype=np.float64)
    nfe = 0
    for i in range(schedule.m):
        x = euler_step(student, x, float(schedule.times[i]), float(schedule.times[i + 1]))
        nfe += 1
    return x, nfe


def sample_student_batch(student: VelocityModel, schedule: KeySchedule, Z):
    """Batched few-step sampling: (B, d) noise to (B, d) samples in
    exactly m model evaluations."""
    X = np.asarray(Z, dtype=np.float64)
    nfe = 0
    for i in range(schedule.m):
        t_hi, t_lo = float(schedule.times[i]), float(schedule.times[i + 1])
        X = X + (t_lo - t_hi) * eval_velocity(student, X, t_hi)
        nfe += 1
    return X, nfe
