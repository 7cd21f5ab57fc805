"""Flow-matching training with mini-batch optimal-transport pairing.

Each step draws a fresh noise batch from the Gaussian reference measure, pairs
it with a data batch (optimally or positionally), samples a time, regresses
the model onto the conditional velocity and applies one Adam update.

All randomness is keyed by position: noise sample ``i`` of step ``s`` is GRF
stream index ``s * batch_size + i``, the step's time comes from stream
``(seed, TIME, s)`` and epoch ``e`` is shuffled by stream ``(seed, SHUFFLE, e)``.
Resuming therefore needs nothing beyond the step counter.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .coupling import cost_matrix, solve_assignment
from .grf import GrfSampler
from .grid import Field
from .paths import PathKind, interpolate_values


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    epochs: int = 500
    base_lr: float = 1e-4
    warmup_frac: float = 0.10
    min_lr: float = 1e-6
    warmup_floor_lr: float = 1e-10
    coupling: str = "ot"  # "ot" or "independent"
    path: PathKind = PathKind.ot()
    seed: int = 0
    adam: tuple[float, float, float] = (0.9, 0.999, 1e-8)
    checkpoint_every: int = 0  # epochs; 0 writes only the final checkpoint
    per_sample_t: bool = False
    grad_clip: float | None = None

    def __post_init__(self):
        if not 0.0 < self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must lie in (0, 1)")
        if self.min_lr > self.base_lr:
            raise ValueError("min_lr must not exceed base_lr")
        if self.coupling not in ("ot", "independent"):
            raise ValueError(f"unknown coupling {self.coupling!r}")
        if self.batch_size < 1 or (self.coupling == "ot" and self.batch_size < 2):
            raise ValueError("batch_size must be >= 2 for OT coupling")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")


def warmup_steps(config: TrainConfig, total_steps: int) -> int:
    return int(round(config.warmup_frac * total_steps))


def lr_at(config: TrainConfig, step: int, total_steps: int) -> float:
    """Linear warmup from the floor to the base rate, then cosine decay to ``min_lr``."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    w = warmup_steps(config, total_steps)
    if step < w:
        return config.warmup_floor_lr + (config.base_lr - config.warmup_floor_lr) * step / w
    span = total_steps - 1 - w
    if span <= 0:
        return config.base_lr  # warmup ends on the final step: no annealing phase
    progress = (step - w) / span
    return config.min_lr + 0.5 * (config.base_lr - config.min_lr) * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int
    total_steps: int

    @classmethod
    def zeros(cls, params, total_steps: int) -> OptState:
        return cls(
            {k: np.zeros_like(a) for k, a in params.items()},
            {k: np.zeros_like(a) for k, a in params.items()},
            0,
            total_steps,
        )


def adam_update(params, grads, state: OptState, lr: float, betas) -> dict[str, np.ndarray]:
    """One Adam step; mutates the moments in ``state`` and returns new parameters."""
    b1, b2, eps = betas
    t = state.step + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    out = {}
    for k, p in params.items():
        g = grads[k]
        m = state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        v = state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        out[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return out


def clip_by_global_norm(grads, max_norm: float):
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm:
        return grads
    s = max_norm / total
    return {k: g * s for k, g in grads.items()}


@dataclass(frozen=True)
class StepRecord:
    step: int
    epoch: int
    lr: float
    loss: float
    ot_cost: float
    id_cost: float
    seconds: float


TRACE_COLUMNS = ("step", "epoch", "lr", "loss", "ot_cost", "id_cost", "seconds")


@dataclass
class TrainTrace:
    records: list[StepRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_COLUMNS)
            for r in self.records:
                w.writerow([r.step, r.epoch, repr(r.lr), repr(r.loss), repr(r.ot_cost), repr(r.id_cost), f"{r.seconds:.6f}"])

    @classmethod
    def read_csv(cls, path) -> TrainTrace:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if tuple(rows[0]) != TRACE_COLUMNS:
            raise ValueError(f"unexpected trace header {rows[0]}")
        recs = [StepRecord(int(r[0]), int(r[1]), *(float(x) for x in r[2:])) for r in rows[1:]]
        return cls(recs)


def draw_times(config: TrainConfig, step: int, batch: int):
    gen = rngmod.stream(config.seed, rngmod.TIME, step)
    if config.per_sample_t:
        return gen.uniform(0.0, 1.0, size=batch)
    return float(gen.uniform(0.0, 1.0))


def train_step(model, params, opt_state: OptState, data_batch: Field, noise_batch: Field,
               config: TrainConfig, t_draw, epoch: int = 0):
    """One iteration: pair, interpolate, regress, update.  Returns (params', state', record)."""
    start = time.perf_counter()
    if data_batch.grid != noise_batch.grid:
        raise ValueError("data and noise batches are on different grids")
    grid = data_batch.grid
    m = cost_matrix(noise_batch, data_batch)
    b = m.b
    id_cost = float(np.trace(m.entries)) / b
    data = data_batch.values
    if config.coupling == "ot":
        pairing = solve_assignment(m)
        data = data[pairing.sigma]
        ot_cost = pairing.total_cost / b
    else:
        ot_cost = id_cost
    f_t, v_target = interpolate_values(config.path, noise_batch.values, data, t_draw)
    loss, grads = model.loss_and_grad_values(params, t_draw, f_t, v_target, grid)
    if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
        raise TrainingDiverged(f"non-finite loss or gradient at step {opt_state.step}")
    if config.grad_clip is not None:
        grads = clip_by_global_norm(grads, config.grad_clip)
    lr = lr_at(config, opt_state.step, opt_state.total_steps)
    new_params = adam_update(params, grads, opt_state, lr, config.adam)
    record = StepRecord(opt_state.step, epoch, lr, loss, ot_cost, id_cost, time.perf_counter() - start)
    opt_state.step += 1
    return new_params, opt_state, record


def steps_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def epoch_order(config: TrainConfig, epoch: int, n: int) -> np.ndarray:
    return rngmod.stream(config.seed, rngmod.SHUFFLE, epoch).permutation(n)


def train(model, dataset: Field, config: TrainConfig, noise: GrfSampler, params=None,
          opt_state: OptState | None = None, on_checkpoint=None, log=None):
    """Run ``epochs * ceil(N / B)`` steps.

    ``params``/``opt_state`` resume an earlier run (the step counter decides
    where).  ``on_checkpoint(epoch, params, opt_state)`` is called on the
    configured schedule and always after the final step; its return values are
    collected as the checkpoint list.  Returns ``(params, trace, checkpoints)``.
    """
    if dataset.values.ndim != 3 or len(dataset) < 1:
        raise ValueError("dataset must be a non-empty batch of fields")
    if noise.grid != dataset.grid:
        raise ValueError(f"noise sampler grid {noise.grid} differs from dataset grid {dataset.grid}")
    n = len(dataset)
    if config.coupling == "ot" and min(n, config.batch_size) < 2:
        raise ValueError("OT coupling needs at least two samples per batch")
    per_epoch = steps_per_epoch(n, config.batch_size)
    total = config.epochs * per_epoch
    if params is None:
        params = model.init(config.seed)
    if opt_state is None:
        opt_state = OptState.zeros(params, total)
    elif opt_state.total_steps != total:
        raise ValueError("resumed optimizer state was created for a different schedule")
    trace = TrainTrace()
    checkpoints = []
    if total == 0:
        return params, trace, checkpoints

    epoch = opt_state.step // per_epoch
    while opt_state.step < total:
        order = epoch_order(config, epoch, n)
        first = opt_state.step - epoch * per_epoch
        for j in range(first, per_epoch):
            idx = order[j * config.batch_size:(j + 1) * config.batch_size]
            b = len(idx)
            s = opt_state.step
            base = s * config.batch_size
            noise_batch = noise.draw(range(base, base + b))
            t = draw_times(config, s, b)
            params, opt_state, rec = train_step(model, params, opt_state, dataset[idx], noise_batch, config, t, epoch)
            trace.records.append(rec)
            if log is not None:
                log(rec)
        epoch += 1
        done = opt_state.step >= total
        if on_checkpoint is not None and (done or (config.checkpoint_every and epoch % config.checkpoint_every == 0)):
            checkpoints.append(on_checkpoint(epoch, params, opt_state))
    return params, trace, checkpoints
