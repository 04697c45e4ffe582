"""Command line front end: ``spiralforge <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or format
error, 3 numerical failure. Failures print one line ``error=<Code> <message>``
on standard error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import denoiser, hyperband, metrics, phantom, stream, tensorio, trajgen
from .config import RunConfig, load_config
from .errors import ConfigError, FormatError, ShapeMismatch, SpiralForgeError


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _config(args) -> RunConfig:
    return load_config(args.config).with_overrides(args.set or [])


def _say(msg: str):
    print(msg, flush=True)


# ---------------------------------------------------------------------------

def cmd_trajgen(args) -> int:
    cfg = _config(args)
    system = cfg.system.build()
    n_frames = args.frames or cfg.trajectory.n_frames or cfg.phantom.n_frames
    traj = cfg.trajectory.build(system, n_frames)
    manifest_path, _ = trajgen.save_trajectory(traj, args.out, args.stem)
    m = traj.manifest()
    _say(f"{m['kind']}: {m['n_interleaves']} interleaves x {m['n_samples']} samples, {m['n_frames']} frames -> {manifest_path}")
    return 0


def _dataset_phantoms(cfg: RunConfig, out: Path):
    p = cfg.phantom
    if (out / "manifest.json").exists():
        phantoms, splits, gridded = phantom.load_dataset(out)
        if phantoms.seed != p.seed or list(phantoms.truth.shape) != [p.n_series, p.n_frames, p.size, p.size]:
            raise ConfigError(f"{out} holds a dataset built with a different phantom configuration")
        return phantoms, splits, gridded
    phantoms = phantom.make_phantoms(p.n_series, p.seed, p.n_frames, p.size, p.size, p.n_coils)
    return phantoms, phantom.split_indices(p.n_series, p.split, p.seed), {}


def cmd_simulate(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    traj = trajgen.load_trajectory(args.traj)
    traj_id = args.id or Path(args.traj).stem
    phantoms, splits, gridded = _dataset_phantoms(cfg, out)
    if traj.n_frames != cfg.phantom.n_frames:
        raise ShapeMismatch(f"trajectory has {traj.n_frames} frames, phantoms have {cfg.phantom.n_frames}")
    pairs = phantom.grid_phantoms(phantoms, traj, noise_sigma=cfg.phantom.noise_sigma)
    gridded[traj_id] = pairs.gridded
    phantom.save_dataset(out, phantoms, splits, gridded)
    _say(f"{phantoms.n_series} series gridded with {traj_id!r} -> {out} "
         f"({', '.join(f'{k} {len(v)}' for k, v in splits.items())})")
    return 0


def _load_pairs(data_dir, traj_id):
    phantoms, splits, gridded = phantom.load_dataset(data_dir)
    if traj_id not in gridded:
        raise FormatError(f"dataset has no gridded stack {traj_id!r}; available: {sorted(gridded)}")
    return phantom.PairedSeries(gridded[traj_id], phantoms.truth, np.arange(phantoms.n_series)), splits


def cmd_train(args) -> int:
    cfg = _config(args)
    t = cfg.training
    pairs, splits = _load_pairs(args.data, args.traj_id)
    train = denoiser.WindowDataset.from_pairs(pairs.subset(splits["train"]))
    val = denoiser.WindowDataset.from_pairs(pairs.subset(splits["val"]), metrics.REPORT_FRAMES)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "state.ckpt"
    if args.resume:
        state = denoiser.load_state(ckpt)
    else:
        model = denoiser.DenoiserModel.init(t.seed, t.widths, t.residual, t.add_skip)
        state = denoiser.TrainState.fresh(model, t.seed, t.lr, t.batch)
    total = args.epochs if args.epochs is not None else t.epochs
    while state.epoch < total:
        denoiser.train_epochs(state, train, 1, val=val)
        denoiser.save_state(ckpt, state)
        _say(f"epoch {state.epoch}/{total}: loss {state.loss_history[-1]:.4f} val ssim {state.val_ssim:.4f}")
    denoiser.save_model(out / "model.ckpt", state.model)
    log = {"epochs": state.epoch, "loss_history": state.loss_history, "val_history": state.val_history,
           "param_count": state.model.param_count, "architecture": state.model.architecture()}
    (out / "train_log.json").write_text(json.dumps(log, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_hyperband(args) -> int:
    cfg = _config(args)
    h = cfg.hyperband
    t = cfg.training
    system = cfg.system.build()
    if args.data:
        phantoms, _, _ = phantom.load_dataset(args.data)
    else:
        p = cfg.phantom
        phantoms = phantom.make_phantoms(p.n_series, p.seed, p.n_frames, p.size, p.size, p.n_coils)
    search = phantom.split_indices(phantoms.n_series, h.split, cfg.phantom.seed)
    used = np.concatenate([search["train"], search["val"]])
    sub = phantoms.subset(used)
    n_train = len(search["train"])
    local = {"train": np.arange(n_train), "val": np.arange(n_train, len(used))}
    evaluator = hyperband.DenoiserEvaluator(sub, local, system, tuple(t.widths), t.lr, t.batch, t.seed,
                                            noise_sigma=cfg.phantom.noise_sigma)
    space = hyperband.SearchSpace(tuple(h.r_inner), tuple(h.u_inner), tuple(h.rho), tuple(h.tr_ms),
                                  tuple(h.transitions), tuple(h.orderings), h.t_acq_ms)
    params = hyperband.HyperBandParams(h.R, h.eta, h.seed)
    totals = hyperband.schedule_totals(hyperband.schedule(params))
    _say(f"search: {totals['n_brackets']} brackets, {totals['n_configs']} configurations, {totals['epochs']} epochs")
    result = hyperband.run_search(space, params, evaluator, args.out, system=system, resume=args.resume,
                                  max_rungs=args.max_rungs, log=_say)
    if not result.complete:
        _say(f"stopped after {args.max_rungs} rungs; continue with --resume")
        return 0
    _say(f"best {result.best_trial}: val ssim {result.best_score:.4f} {json.dumps(result.best_config.to_dict())}")
    if args.finalize:
        final_splits = phantom.split_indices(phantoms.n_series, cfg.phantom.split, cfg.phantom.seed)
        res = hyperband.finalize(result.best_config, phantoms, final_splits, system, h.final_epochs,
                                 widths=tuple(t.widths), lr=t.lr, batch=t.batch, seed=t.seed,
                                 noise_sigma=cfg.phantom.noise_sigma, out_dir=Path(args.out) / "final", log=_say)
        _say(res.report.to_json().strip())
    return 0


def cmd_evaluate(args) -> int:
    out = Path(args.out)
    if args.model:
        model = denoiser.load_model(args.model)
        pairs, splits = _load_pairs(args.data, args.traj_id)
        test = pairs.subset(splits[args.split])
        recon = np.stack([denoiser.sliding_window_apply(model, g).data for g in test.gridded])
        truth, ids, offset = test.truth, test.ids, denoiser.WINDOW - 1
    else:
        if not (args.recon and args.truth):
            raise UsageError("give --model with --data/--traj-id, or --recon with --truth")
        recon = tensorio.read_tensor(args.recon).astype(np.float64)
        truth = tensorio.read_tensor(args.truth).astype(np.float64)
        if recon.ndim == 3:
            recon = recon[None]
        if truth.ndim == 3:
            truth = truth[None]
        ids, offset = None, args.offset
    report = metrics.evaluate(recon, truth, ids, recon_offset=offset)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(report.to_csv())
    (out / "metrics.json").write_text(report.to_json())
    agg = report.aggregate()
    _say("  ".join(f"{k} {agg[k]['mean']:.4f}+-{agg[k]['std']:.4f}" for k in metrics.METRIC_NAMES))
    return 0


def cmd_stream(args) -> int:
    cfg = _config(args)
    s = cfg.stream
    model = denoiser.load_model(args.model)
    records = tensorio.read_tensors(args.input)
    gridder = None
    if len(records) == 2:
        # ground truth plus coil maps: simulate k-space through the trajectory
        traj = trajgen.load_trajectory(args.traj)
        truth, maps = records
        from .nufft import Gridder
        gridder = Gridder(traj, truth.shape[1:])
        source = stream.kspace_source(gridder, truth.astype(np.float64), maps.astype(complex))
    elif len(records) == 1:
        source = stream.replay_source(records[0].astype(np.float64))
    else:
        raise FormatError("stream input must hold a gridded series, or ground truth and coil maps")
    mode = args.mode or s.mode
    out, stats = stream.run_stream(
        source, model, gridder, mode=mode,
        inject_grid_ms=s.inject_grid_ms if args.inject_grid_ms is None else args.inject_grid_ms,
        inject_denoise_ms=s.inject_denoise_ms if args.inject_denoise_ms is None else args.inject_denoise_ms,
        inject_emit_ms=s.inject_emit_ms, stall_timeout_s=s.stall_timeout_s, queue_capacity=s.queue_capacity)
    text, doc = stream.latency_report(stats)
    sys.stdout.write(text)
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(doc)
    if args.output:
        tensorio.write_tensor(args.output, out.data.astype(np.float64))
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spiralforge", description="Spiral trajectory and denoiser co-design toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="JSON run configuration (defaults apply when omitted)")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one configuration field; repeatable")

    p = sub.add_parser("trajgen", help="design a trajectory and write it to disk")
    common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--stem", default="trajectory", help="file stem (default: trajectory)")
    p.add_argument("--frames", type=int, help="number of frames (default: phantom.n_frames)")
    p.set_defaults(func=cmd_trajgen)

    p = sub.add_parser("simulate", help="generate phantoms and grid them through a trajectory")
    common(p)
    p.add_argument("--traj", required=True, help="trajectory manifest (.json)")
    p.add_argument("--out", required=True, help="dataset directory (created or extended)")
    p.add_argument("--id", help="name of the gridded stack (default: trajectory file stem)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train the denoiser on one gridded stack")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--traj-id", required=True, help="gridded stack to train on")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--epochs", type=int, help="total epochs (default: training.epochs)")
    p.add_argument("--resume", action="store_true", help="continue from <out>/state.ckpt")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("hyperband", help="joint trajectory/denoiser search")
    common(p)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--data", help="dataset directory (default: generate phantoms from the config)")
    p.add_argument("--resume", action="store_true", help="continue from <out>/ledger.json")
    p.add_argument("--max-rungs", type=int, help="stop after closing this many rungs")
    p.add_argument("--finalize", action="store_true", help="retrain the winner on the final split")
    p.set_defaults(func=cmd_hyperband)

    p = sub.add_parser("evaluate", help="metrics table for reconstructions")
    p.add_argument("--out", required=True, help="directory for metrics.csv and metrics.json")
    p.add_argument("--model", help="checkpoint to apply to a dataset split")
    p.add_argument("--data", help="dataset directory (with --model)")
    p.add_argument("--traj-id", help="gridded stack (with --model)")
    p.add_argument("--split", default="test", help="split to evaluate (default: test)")
    p.add_argument("--recon", help="reconstruction tensor file [n, T', H, W]")
    p.add_argument("--truth", help="ground-truth tensor file [n, T, H, W]")
    p.add_argument("--offset", type=int, default=0, help="leading truth frames missing from --recon")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("stream", help="run the streaming pipeline and report latencies")
    common(p)
    p.add_argument("--input", required=True, help="tensor file: gridded series, or truth + coil maps")
    p.add_argument("--traj", help="trajectory manifest (needed for k-space input)")
    p.add_argument("--model", required=True, help="denoiser checkpoint")
    p.add_argument("--mode", choices=("parallel", "serial"), help="default: stream.mode")
    p.add_argument("--inject-grid-ms", type=float, help="grid stage service time")
    p.add_argument("--inject-denoise-ms", type=float, help="denoise stage service time")
    p.add_argument("--report", help="write the JSON latency report here")
    p.add_argument("--output", help="write the denoised frames here")
    p.set_defaults(func=cmd_stream)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except SpiralForgeError as exc:
        print(f"error={exc.code} {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error=FileNotFound {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error={type(exc).__name__} {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
