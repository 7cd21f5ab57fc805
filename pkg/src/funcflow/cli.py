"""Command-line entry point: ``funcflow {datagen,train,sample,eval,oracle}``.

Exit codes: 0 success, 1 contract or numerical failure, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import scipy.fft

from . import rng as rngmod
from .datagen import CflViolation, KolmogorovConfig, Manifest, make_grf_dataset, manifest_for, simulate_kolmogorov
from .fno import FNO
from .grf import build_sampler
from .io import Checkpoint, ConfigError, FormatError, RunConfig, load_checkpoint, read_fields, save_checkpoint, write_fields
from .metrics import directional_spectrum, evaluate, kde_metrics, radial_spectrum
from .oracles import QuadratureUnderResolved, Theorem2Scenario, Theorem3Scenario, check_theorem2, check_theorem3
from .paths import PathKind
from .sample import IntegratorSpec, sample
from .train import TrainConfig, TrainingDiverged, steps_per_epoch, train


class UsageError(Exception):
    pass


class ContractFailure(Exception):
    pass


def _log(msg: str):
    print(msg, file=sys.stderr, flush=True)


def _manifest_path(out) -> Path:
    return Path(str(out) + ".manifest.json")


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _parse_override(text: str | None):
    if text is None:
        return None
    try:
        nx, ny = (int(s) for s in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"--grid-override must look like NXxNY, got {text!r}") from None
    return nx, ny


def _config(args, required: bool = True) -> RunConfig:
    if args.config is None:
        if required:
            raise UsageError("--config is required")
        return RunConfig()
    return RunConfig.load(args.config)


def _seed(args, cfg: RunConfig) -> int:
    return cfg.train_seed if args.seed is None else args.seed


def _dtype(cfg: RunConfig):
    if cfg.train_precision not in ("float64", "float32"):
        raise ConfigError(f"train.precision must be float64 or float32, got {cfg.train_precision!r}")
    return np.dtype(cfg.train_precision)


# --- subcommands -------------------------------------------------------------

def cmd_datagen(args) -> int:
    cfg = _config(args)
    grid = cfg.grid()
    override = _parse_override(args.grid_override)
    if override:
        grid = grid.with_resolution(*override)
    seed = _seed(args, cfg)
    if cfg.datagen_kind == "kolmogorov":
        kcfg = KolmogorovConfig(grid=grid, re=cfg.datagen_re, n_forcing=cfg.datagen_n_forcing, dt=cfg.datagen_dt,
                                spinup_time=cfg.datagen_spinup, snapshot_interval=cfg.datagen_interval,
                                n_snapshots=cfg.datagen_snapshots, n_trajectories=cfg.datagen_trajectories, seed=seed)
        fields_ = simulate_kolmogorov(kcfg, log=lambda j, n: _log(f"datagen: frame {j}/{n}") if j % 10 == 0 else None)
        manifest = manifest_for(kcfg, len(fields_), config_text=cfg.dump())
    elif cfg.datagen_kind == "grf":
        fields_ = make_grf_dataset(cfg.kernel(), grid, cfg.datagen_snapshots, seed)
        manifest = Manifest("grf", {"kernel": asdict(cfg.kernel()), "seed": seed}, len(fields_), asdict(grid),
                            {"config_text": cfg.dump()})
    else:
        raise ConfigError(f"datagen.kind must be kolmogorov or grf, got {cfg.datagen_kind!r}")
    write_fields(args.out, fields_)
    manifest.write(_manifest_path(args.out))
    _log(f"datagen: wrote {len(fields_)} fields to {args.out}")
    return 0


def _path_kind(cfg: RunConfig) -> PathKind:
    return PathKind.ot() if cfg.train_sigma_min == 0.0 else PathKind.ffm(cfg.train_sigma_min)


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.data is None:
        raise UsageError("--data is required for train")
    grid = cfg.grid()
    data = read_fields(args.data)
    if data.grid != grid:
        raise UsageError(f"dataset grid {data.grid} does not match config grid {grid}")
    fno_cfg = cfg.fno()
    fno_cfg.check_grid(grid)
    seed = _seed(args, cfg)
    tcfg = TrainConfig(batch_size=cfg.train_batch, epochs=cfg.train_epochs, base_lr=cfg.train_lr,
                       warmup_frac=cfg.train_warmup_frac, min_lr=cfg.train_min_lr, coupling=cfg.train_coupling,
                       path=_path_kind(cfg), seed=seed, checkpoint_every=cfg.train_checkpoint_every,
                       per_sample_t=cfg.train_per_sample_t)
    model = FNO(fno_cfg, _dtype(cfg))
    kernel = cfg.kernel()
    noise = build_sampler(kernel, grid, seed)
    params = opt_state = None
    if args.resume:
        ck = load_checkpoint(args.resume)
        if ck.fno != fno_cfg or ck.grid != grid or ck.kernel != kernel or ck.seed != seed:
            raise UsageError("resume checkpoint does not match the configuration")
        params, opt_state = ck.params, ck.opt_state
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    per_epoch = steps_per_epoch(len(data), tcfg.batch_size)

    def on_checkpoint(epoch, p, state):
        path = out / (f"epoch{epoch:04d}.fck" if state.step < state.total_steps else "final.fck")
        save_checkpoint(path, Checkpoint(fno_cfg, kernel, grid, p, state, seed, seed, epoch,
                                         {"precision": cfg.train_precision, "coupling": cfg.train_coupling,
                                          "sigma_min": cfg.train_sigma_min}))
        return str(path)

    def log(rec):
        if rec.step % per_epoch == per_epoch - 1:
            _log(f"train: epoch {rec.epoch + 1}/{tcfg.epochs} loss {rec.loss:.4g} lr {rec.lr:.3g}")

    _, trace, ckpts = train(model, data, tcfg, noise, params=params, opt_state=opt_state,
                            on_checkpoint=on_checkpoint, log=log)
    trace.write_csv(out / "trace.csv")
    (out / "config.txt").write_text(cfg.dump())
    _log(f"train: {len(trace)} steps, checkpoints {ckpts}")
    return 0


def sampling_seed(seed: int) -> int:
    """Noise seed for generation, disjoint from the training noise streams."""
    return int(rngmod.stream(seed, rngmod.EVAL).integers(2**62))


def cmd_sample(args) -> int:
    if args.checkpoint is None:
        raise UsageError("--checkpoint is required for sample")
    cfg = _config(args, required=False)
    ck = load_checkpoint(args.checkpoint)
    grid = ck.grid
    override = _parse_override(args.grid_override)
    if override:
        grid = grid.with_resolution(*override)
    try:
        ck.fno.check_grid(grid)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    spec = IntegratorSpec(cfg.sample_scheme, cfg.sample_steps, grid)
    seed = ck.seed if args.seed is None else args.seed
    noise = build_sampler(ck.kernel, ck.grid, sampling_seed(seed))
    model = FNO(ck.fno, _dtype(cfg))
    res = sample(model, ck.params, spec, noise, args.count)
    write_fields(args.out, res.fields)
    _write_json(_manifest_path(args.out), {
        "kind": "samples", "checkpoint": str(args.checkpoint), "scheme": spec.scheme, "steps": spec.n_steps,
        "nfe": res.nfe, "count": args.count, "grid": [grid.nx, grid.ny], "seed": seed,
    })
    _log(f"sample: wrote {args.count} fields at NFE={res.nfe} to {args.out}")
    return 0


def _write_curve(path, x, y, names):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for a, b in zip(x, y):
            w.writerow((a if isinstance(a, (int, np.integer)) else repr(float(a)), repr(float(b))))


def cmd_eval(args) -> int:
    if args.gen is None or args.ref is None:
        raise UsageError("--gen and --ref are required for eval")
    gen, ref = read_fields(args.gen), read_fields(args.ref)
    if gen.grid != ref.grid:
        raise UsageError(f"grid mismatch: {gen.grid} vs {ref.grid}")
    nfe = args.nfe
    mpath = _manifest_path(args.gen)
    if nfe is None and mpath.exists():
        nfe = json.loads(mpath.read_text()).get("nfe", 0)
    report = evaluate(gen, ref, nfe=int(nfe or 0))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "report.csv")
    for tag, ens in (("gen", gen), ("ref", ref)):
        radial_spectrum(ens).write_csv(out / f"radial_{tag}.csv")
        directional_spectrum(ens, "x").write_csv(out / f"kx_{tag}.csv")
        directional_spectrum(ens, "y").write_csv(out / f"ky_{tag}.csv")
    _, _, gcurve, rcurve = kde_metrics(gen, ref)
    _write_curve(out / "kde_gen.csv", gcurve.eval_points, gcurve.pdf, ("value", "pdf"))
    _write_curve(out / "kde_ref.csv", rcurve.eval_points, rcurve.pdf, ("value", "pdf"))
    print(",".join(f"{v}" for v in report.row()))
    return 0


def cmd_oracle(args) -> int:
    if args.which == "thm2":
        res = check_theorem2(Theorem2Scenario(seed=0 if args.seed is None else args.seed))
        rows = [(i, repr(float(d))) for i, d in enumerate(res.deltas)]
        print(f"thm2: spread {res.spread:.3e} (< 1e-6), constant error {res.constant_error:.3e} (< 1e-6), "
              f"doubling change {res.doubling_change:.3e} (< 1e-8): {'PASS' if res.passed else 'FAIL'}")
        if args.out:
            with open(args.out, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(("theta", "delta"))
                w.writerows(rows)
                w.writerow(("constant", repr(res.constant)))
        if not res.passed:
            raise ContractFailure(f"thm2 spread {res.spread:.3e}, constant error {res.constant_error:.3e}")
        return 0
    res = check_theorem3(Theorem3Scenario(seed=0 if args.seed is None else args.seed),
                         log=lambda r: print(f"thm3: B={r.batch:4d} mean W2 {r.mean_w2:.4f} +- {r.std_err:.4f} "
                                             f"exact {r.exact_w2:.4f} rel err {r.rel_error:.4f}"))
    if args.out:
        res.write_csv(args.out)
    print(f"thm3: inversions {res.inversions} (flagged {res.flagged_inversions}): {'PASS' if res.passed else 'FAIL'}")
    if not res.passed:
        raise ContractFailure(f"thm3 relative error at B={res.rows[-1].batch} is {res.rows[-1].rel_error:.3f}")
    return 0


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value run configuration")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--seed", type=int, help="overrides train.seed")
    common.add_argument("--workers", type=int, default=1, help="FFT worker threads (results do not depend on it)")
    common.add_argument("--grid-override", help="target grid NXxNY")

    p = argparse.ArgumentParser(prog="funcflow", description="Functional flow matching with mini-batch OT.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("datagen", parents=[common], help="generate a reference dataset")
    t = sub.add_parser("train", parents=[common], help="train a velocity model")
    t.add_argument("--data", help="training field batch")
    t.add_argument("--resume", help="checkpoint to resume from")
    s = sub.add_parser("sample", parents=[common], help="generate fields from a checkpoint")
    s.add_argument("--checkpoint")
    s.add_argument("--count", type=int, default=100)
    e = sub.add_parser("eval", parents=[common], help="compare generated and reference ensembles")
    e.add_argument("--gen")
    e.add_argument("--ref")
    e.add_argument("--nfe", type=int)
    o = sub.add_parser("oracle", parents=[common], help="run an analytic oracle")
    o.add_argument("which", choices=("thm2", "thm3"))
    return p


COMMANDS = {"datagen": cmd_datagen, "train": cmd_train, "sample": cmd_sample, "eval": cmd_eval, "oracle": cmd_oracle}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command != "oracle" and args.out is None:
        _log("error: --out is required")
        return 2
    if args.workers < 1:
        _log("error: --workers must be >= 1")
        return 2
    try:
        with scipy.fft.set_workers(args.workers):
            return COMMANDS[args.command](args)
    except (UsageError, ConfigError, FormatError) as exc:
        _log(f"error: {exc}")
        return 2
    except (ContractFailure, CflViolation, TrainingDiverged, QuadratureUnderResolved, FloatingPointError,
            AssertionError) as exc:
        _log(f"failure: {exc}")
        return 1
    except OSError as exc:
        _log(f"error: {exc}")
        return 2
    except ValueError as exc:
        _log(f"error: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
