"""Desk-scale end-to-end pipeline shared by the acceptance suite.

Set ``FUNCFLOW_ACCEPTANCE_CACHE`` to a directory to keep generated datasets and
the trained checkpoint between runs; entries are keyed by a hash of their
configuration, so changing any setting regenerates them.
"""
from __future__ import annotations

import hashlib
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from funcflow.cli import sampling_seed
from funcflow.datagen import KolmogorovConfig, simulate_kolmogorov
from funcflow.fno import FNO, FnoConfig
from funcflow.grf import KernelSpec, build_sampler
from funcflow.grid import GridSpec
from funcflow.io import Checkpoint, load_checkpoint, read_fields, save_checkpoint, write_fields
from funcflow.sample import IntegratorSpec, sample
from funcflow.train import TrainConfig, TrainTrace, train

GRID = GridSpec(32, 32)
FINE_GRID = GridSpec(48, 48)
# dt = 0.01 keeps the desk budget; its accuracy against dt = 1e-3 is covered in test_datagen
DT = 0.01
# simulated at 64x64 so every mode up to the 32x32 Nyquist lies inside the dealiased band
SIM_GRID = GridSpec(64, 64)
TRAIN_DATA = KolmogorovConfig(grid=SIM_GRID, output_grid=GRID, dt=DT, n_snapshots=2000, n_trajectories=20, seed=0)
REFERENCE = KolmogorovConfig(grid=SIM_GRID, output_grid=GRID, dt=DT, n_snapshots=2000, n_trajectories=20, seed=1)
FINE_REFERENCE = KolmogorovConfig(grid=FINE_GRID, dt=DT, n_snapshots=500, n_trajectories=5, seed=2)
FNO_CONFIG = FnoConfig(n_layers=4, modes=8, width=32, lift_dim=64, proj_dim=64)
KERNEL = KernelSpec()
TRAIN = TrainConfig(batch_size=128, epochs=100, base_lr=1e-3, min_lr=1e-6, coupling="ot", seed=0)
PRECISION = np.float32
N_GENERATED = 500


def log(msg: str):
    print(f"[desk] {msg}", file=sys.stderr, flush=True)


def _cache_dir() -> Path | None:
    root = os.environ.get("FUNCFLOW_ACCEPTANCE_CACHE")
    if not root:
        return None
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _key(*parts) -> str:
    return hashlib.sha1(repr(parts).encode()).hexdigest()[:16]


def dataset(config: KolmogorovConfig):
    cache = _cache_dir()
    path = cache / f"kolmogorov-{_key(config)}.fgb" if cache else None
    if path is not None and path.exists():
        return read_fields(path), 0.0
    start = time.perf_counter()
    f = simulate_kolmogorov(config)
    seconds = time.perf_counter() - start
    log(f"datagen {config.grid.nx}x{config.grid.ny} x{len(f)}: {seconds:.0f} s")
    if path is not None:
        write_fields(path, f)
    return f, seconds


@dataclass
class TrainedModel:
    model: FNO
    params: dict
    trace: TrainTrace
    seconds: float


def trained_model(data) -> TrainedModel:
    cache = _cache_dir()
    key = _key(TRAIN_DATA, FNO_CONFIG, KERNEL, TRAIN, np.dtype(PRECISION).name)
    model = FNO(FNO_CONFIG, PRECISION)
    if cache is not None and (cache / f"model-{key}.fck").exists():
        ck = load_checkpoint(cache / f"model-{key}.fck")
        return TrainedModel(model, ck.params, TrainTrace.read_csv(cache / f"trace-{key}.csv"), 0.0)
    noise = build_sampler(KERNEL, GRID, TRAIN.seed)
    per_epoch = -(-len(data) // TRAIN.batch_size)

    def progress(rec):
        if rec.step % per_epoch == per_epoch - 1 and (rec.epoch + 1) % 10 == 0:
            log(f"epoch {rec.epoch + 1}: loss {rec.loss:.4g}")

    start = time.perf_counter()
    params, trace, _ = train(model, data, TRAIN, noise, log=progress)
    seconds = time.perf_counter() - start
    log(f"training: {len(trace)} steps in {seconds:.0f} s")
    if cache is not None:
        save_checkpoint(cache / f"model-{key}.fck", Checkpoint(FNO_CONFIG, KERNEL, GRID, params, None, TRAIN.seed,
                                                               TRAIN.seed, TRAIN.epochs))
        trace.write_csv(cache / f"trace-{key}.csv")
    return TrainedModel(model, params, trace, seconds)


def generate(trained: TrainedModel, n_steps: int, grid: GridSpec = GRID, count: int = N_GENERATED):
    noise = build_sampler(KERNEL, GRID, sampling_seed(TRAIN.seed))
    spec = IntegratorSpec("euler", n_steps, grid)
    return sample(trained.model, trained.params, spec, noise, count)
