"""Desk-scale comparison of the searched spiral against the two baselines.

Runs the HyperBand search, retrains the winner, the uniform spiral and the
radial baseline identically on the final split, scores the held-out test
series and replays scan-plane transition sequences through each model.

Everything is cached under one directory keyed by the settings below, so the
acceptance suite pays the cost once. The search ledger is resumable, so an
interrupted run picks up where it stopped. Run directly to (re)build the
cache::

    python3 tests/desk.py [cache_dir]
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from spiralforge import denoiser, hyperband, metrics, phantom, trajgen

SETTINGS = {
    "n_series": 200,
    "n_frames": 10,
    "size": 48,
    "n_coils": 8,
    "seed": 7,
    "widths": [8, 16, 32],
    "lr": 1e-3,
    "batch": 8,
    "train_seed": 0,
    "R": 12,
    "eta": 3,
    "hb_seed": 0,
    "final_epochs": 12,
    "transition_pairs": 30,
    "transition_frames": 12,
    "switch_frame": 6,
}

METHODS = ("optimized", "uniform", "radial")


def default_cache() -> Path:
    key = hashlib.sha256(json.dumps(SETTINGS, sort_keys=True).encode()).hexdigest()[:10]
    root = Path(os.environ.get("SPIRALFORGE_DESK_CACHE", Path(__file__).resolve().parent.parent / ".desk_cache"))
    return root / key


def _log(msg):
    print(f"[desk {time.strftime('%H:%M:%S')}] {msg}", flush=True)


def _trajectories(best: trajgen.SpiralConfig, system, n_frames):
    return {
        "optimized": trajgen.assemble_trajectory(best, system, n_frames),
        "uniform": trajgen.uniform_spiral(system, n_frames=n_frames),
        "radial": trajgen.radial_trajectory(system, 17, n_frames),
    }


def _search(s, phantoms, system, root: Path):
    search = phantom.split_indices(phantoms.n_series, phantom.SEARCH_SPLIT, s["seed"])
    used = np.concatenate([search["train"], search["val"]])
    n_train = len(search["train"])
    local = {"train": np.arange(n_train), "val": np.arange(n_train, len(used))}
    evaluator = hyperband.DenoiserEvaluator(phantoms.subset(used), local, system, tuple(s["widths"]), s["lr"],
                                            s["batch"], s["train_seed"])
    params = hyperband.HyperBandParams(s["R"], s["eta"], s["hb_seed"])
    return hyperband.run_search(hyperband.SearchSpace(), params, evaluator, root, system=system,
                                resume=(root / "ledger.json").exists(), log=_log)


def _transition_set(s):
    """Pairs (a, b) of fresh phantoms, disjoint from the training data by seed."""
    n = s["transition_pairs"]
    ph = phantom.make_phantoms(2 * n, s["seed"] + 1000, s["transition_frames"], s["size"], s["size"], s["n_coils"])
    seqs = np.stack([phantom.transition_sequence(ph.truth[2 * i], ph.truth[2 * i + 1], s["switch_frame"],
                                                 s["transition_frames"]).data for i in range(n)])
    # each sequence is acquired with the coil maps of the series it switches to
    return phantom.PhantomSet(seqs, ph.maps[1::2], ph.specs[1::2], ph.seed)


def run(cache: Path | None = None) -> dict:
    s = SETTINGS
    cache = Path(cache or default_cache())
    result_path = cache / "results.json"
    if result_path.exists():
        return json.loads(result_path.read_text())
    cache.mkdir(parents=True, exist_ok=True)
    (cache / "settings.json").write_text(json.dumps(s, indent=2, sort_keys=True) + "\n")
    timing_path = cache / "timing.json"
    timing = json.loads(timing_path.read_text()) if timing_path.exists() else {}

    system = trajgen.desk_system()
    phantoms = phantom.make_phantoms(s["n_series"], s["seed"], s["n_frames"], s["size"], s["size"], s["n_coils"])
    splits = phantom.split_indices(phantoms.n_series, phantom.FINAL_SPLIT, s["seed"])

    t0 = time.time()
    found = _search(s, phantoms, system, cache / "search")
    timing["search_s"] = timing.get("search_s", 0.0) + time.time() - t0
    timing_path.write_text(json.dumps(timing))
    _log(f"best {found.best_trial} val ssim {found.best_score:.4f} {found.best_config.to_dict()}")

    trajs = _trajectories(found.best_config, system, s["n_frames"])
    trans = _transition_set(s)
    trans_trajs = _trajectories(found.best_config, system, s["transition_frames"])
    out = {"settings": s, "best_config": found.best_config.to_dict(), "best_val_ssim": found.best_score,
           "search_totals": found.report["totals"],
           "methods": {}}
    for name in METHODS:
        mdir = cache / name
        t0 = time.time()
        if (mdir / "final.ckpt").exists() and (mdir / "metrics.json").exists():
            model = denoiser.load_model(mdir / "final.ckpt")
        else:
            res = hyperband.retrain(trajs[name], phantoms, splits, s["final_epochs"], tuple(s["widths"]), s["lr"],
                                    s["batch"], s["train_seed"], out_dir=mdir,
                                    log=lambda m, n=name: _log(f"{n} {m}"))
            model = res.state.model
            timing[f"retrain_{name}_s"] = time.time() - t0
            timing_path.write_text(json.dumps(timing))
        report = json.loads((mdir / "metrics.json").read_text())
        per_series = _per_series((mdir / "metrics.csv").read_text())
        gridded = phantom.grid_phantoms(trans, trans_trajs[name])
        curves = []
        for g, gt in zip(gridded.gridded, gridded.truth):
            recon = denoiser.sliding_window_apply(model, g).data
            curves.append(metrics.transition_curve(gt, recon, s["switch_frame"]))
        mean_curve = np.mean([c.ssim for c in curves], axis=0)
        frames = curves[0].frames
        pre = float(np.mean([v for f, v in zip(frames, mean_curve) if f < s["switch_frame"]]))
        post = [v for f, v in zip(frames, mean_curve) if f >= s["switch_frame"]]
        recovery = next((i for i, v in enumerate(post) if v >= pre - 0.02), len(post))
        out["methods"][name] = {
            "aggregate": report,
            "per_series": per_series,
            "transition": {
                "frames": frames,
                "mean_ssim": [float(v) for v in mean_curve],
                "first_post_switch": float(post[0]),
                "recovery_frames": int(recovery),
                "per_sequence_first_post_switch": [c.first_post_switch for c in curves],
            },
        }
        _log(f"{name}: ssim {report['ssim']['mean']:.4f} nrmse {report['nrmse']['mean']:.4f} "
             f"post-switch {post[0]:.4f} recovery {recovery}")
    out["timing_s"] = timing
    out["total_cpu_s"] = sum(timing.values())
    result_path.write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    return out


def _per_series(text: str) -> dict:
    """Mean SSIM and NRMSE per test series from a metrics CSV."""
    acc: dict[str, dict[str, list]] = {}
    for row in csv.DictReader(io.StringIO(text)):
        d = acc.setdefault(row["series_id"], {"ssim": [], "nrmse": []})
        d["ssim"].append(float(row["ssim"]))
        d["nrmse"].append(float(row["nrmse"]))
    return {k: {m: float(np.mean(v)) for m, v in d.items()} for k, d in sorted(acc.items())}


if __name__ == "__main__":
    res = run(Path(sys.argv[1]) if len(sys.argv) > 1 else None)
    print(json.dumps({k: v["aggregate"]["ssim"] for k, v in res["methods"].items()}, indent=2))
