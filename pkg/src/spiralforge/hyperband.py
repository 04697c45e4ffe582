"""HyperBand search over spiral configurations with warm-continued trials.

Each trial is one sampled :class:`SpiralConfig` whose score is the
validation SSIM of a denoiser trained on data gridded with that trajectory.
Brackets trade the number of trials against epochs per trial; inside a
bracket, successive halving keeps the best ``1/eta`` of each rung and lets
them continue training to the next rung's budget.

Rounding convention: the cumulative epoch budget of rung ``i`` is
``max(1, floor(r_i + 0.5))`` with ``r_i = R * eta**(i - s)``; a promoted
trial trains only the difference to its previous budget.

Everything is journaled in ``ledger.json`` inside the checkpoint directory so
an interrupted search resumes where it stopped and produces the same report.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import denoiser, metrics, phantom, trajgen
from .errors import ConfigError, EvaluatorFailure, ExhaustedRetries, FormatError, SpiralForgeError
from .trajgen import GradientSystem, SpiralConfig

LEDGER_VERSION = 1


@dataclass(frozen=True)
class SearchSpace:
    r_inner: tuple[float, float] = trajgen.R_INNER_RANGE
    u_inner: tuple[float, float] = trajgen.U_INNER_RANGE
    rho: tuple[float, float] = trajgen.RHO_RANGE
    tr_ms: tuple[float, float] = trajgen.TR_RANGE_MS
    transitions: tuple[str, ...] = trajgen.TRANSITIONS
    orderings: tuple[str, ...] = trajgen.ORDERINGS
    t_acq_ms: float = trajgen.T_ACQ_MAX_MS

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(frozen=True)
class HyperBandParams:
    R: int = 12
    eta: int = 3
    seed: int = 0

    def __post_init__(self):
        if int(self.R) != self.R or self.R < 1:
            raise ConfigError(f"R must be an integer >= 1, got {self.R}")
        if int(self.eta) != self.eta or self.eta < 2:
            raise ConfigError(f"eta must be an integer >= 2, got {self.eta}")

    def to_dict(self) -> dict:
        return asdict(self)


def sample_config(space: SearchSpace, rng: np.random.Generator, system: GradientSystem | None = None,
                  max_retries: int = 100) -> SpiralConfig:
    """Uniform draw from ``space``; infeasible draws are redrawn.

    Args:
        system: when given, each draw must also produce a readout that the
            gradient system can play out.

    Raises:
        ExhaustedRetries: no feasible draw within ``max_retries``.
    """
    for _ in range(max_retries):
        r_inner = float(rng.uniform(*space.r_inner))
        cfg = SpiralConfig(
            r_inner=r_inner,
            u_inner=float(rng.uniform(*space.u_inner)),
            r_outer=float(rng.uniform(r_inner, 1.0 - r_inner)),
            rho=float(rng.uniform(*space.rho)),
            transition=str(space.transitions[rng.integers(len(space.transitions))]),
            ordering=str(space.orderings[rng.integers(len(space.orderings))]),
            tr_ms=float(rng.uniform(*space.tr_ms)),
            t_acq_ms=float(space.t_acq_ms),
        )
        try:
            cfg.validate()
            if system is not None:
                trajgen.generate_interleave(cfg, system)
        except SpiralForgeError:
            continue
        return cfg
    raise ExhaustedRetries(f"no feasible configuration after {max_retries} draws")


# ---------------------------------------------------------------------------
# schedule

@dataclass(frozen=True)
class Rung:
    index: int
    n_trials: int
    resource: float   # r_i before rounding
    epochs: int       # cumulative epochs per trial after this rung
    keep: int         # trials promoted to the next rung (0 on the last rung)


@dataclass(frozen=True)
class Bracket:
    s: int
    n_configs: int
    r: float
    rungs: tuple[Rung, ...]

    @property
    def epochs(self) -> int:
        total, prev = 0, 0
        for rung in self.rungs:
            total += rung.n_trials * (rung.epochs - prev)
            prev = rung.epochs
        return total

    def to_dict(self) -> dict:
        return {"s": self.s, "n_configs": self.n_configs, "r": self.r, "epochs": self.epochs,
                "rungs": [asdict(r) for r in self.rungs]}


def _s_max(R: int, eta: int) -> int:
    s = 0
    while eta ** (s + 1) <= R:
        s += 1
    return s


def rung_epochs(resource: float) -> int:
    return max(1, int(math.floor(resource + 0.5)))


def schedule(params: HyperBandParams) -> list[Bracket]:
    """Bracket table, widest bracket first."""
    R, eta = int(params.R), int(params.eta)
    s_max = _s_max(R, eta)
    brackets = []
    for s in range(s_max, -1, -1):
        n = -(-((s_max + 1) * eta**s) // (s + 1))
        r = R / eta**s
        rungs = []
        for i in range(s + 1):
            n_i = n // eta**i
            r_i = r * eta**i
            rungs.append(Rung(i, n_i, r_i, rung_epochs(r_i), n_i // eta if i < s else 0))
        brackets.append(Bracket(s, n, r, tuple(rungs)))
    return brackets


def schedule_totals(brackets: list[Bracket]) -> dict:
    return {"n_brackets": len(brackets), "n_configs": sum(b.n_configs for b in brackets),
            "epochs": sum(b.epochs for b in brackets)}


# ---------------------------------------------------------------------------
# ledger

def _atomic_write_text(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _score_json(x: float):
    return None if x is None or not math.isfinite(x) else float(x)


def _score_value(x) -> float:
    return -math.inf if x is None else float(x)


@dataclass
class TrialLedger:
    """Journal of a search; ``events`` only ever grows."""

    directory: Path
    params: dict
    space: dict
    events: list[dict] = field(default_factory=list)

    @property
    def path(self) -> Path:
        return self.directory / "ledger.json"

    def append(self, event: dict):
        self.events.append(event)
        self.save()

    def save(self):
        doc = {"format_version": LEDGER_VERSION, "params": self.params, "space": self.space, "events": self.events}
        _atomic_write_text(self.path, json.dumps(doc, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> "TrialLedger":
        directory = Path(directory)
        try:
            doc = json.loads((directory / "ledger.json").read_text())
        except FileNotFoundError:
            raise FormatError(f"no ledger.json in {directory}") from None
        except json.JSONDecodeError as e:
            raise FormatError(f"corrupt ledger: {e}") from None
        if doc.get("format_version") != LEDGER_VERSION:
            raise FormatError(f"unsupported ledger version {doc.get('format_version')}")
        return cls(directory, doc["params"], doc["space"], doc["events"])

    # replay ------------------------------------------------------------

    def trials(self) -> dict[str, dict]:
        """Per-trial view rebuilt from the journal."""
        out: dict[str, dict] = {}
        for ev in self.events:
            kind = ev["event"]
            if kind == "created":
                out[ev["trial"]] = {"trial": ev["trial"], "bracket": ev["bracket"], "config": ev["config"],
                                    "epochs_consumed": 0, "score": None, "status": "pending",
                                    "checkpoint": f"trials/{ev['trial']}/state.ckpt", "scores": []}
            elif kind == "evaluated":
                t = out[ev["trial"]]
                t["epochs_consumed"] = ev["epochs_consumed"]
                t["score"] = ev["score"]
                t["scores"].append([ev["rung"], ev["score"]])
                t["status"] = "running"
            elif kind == "failed":
                t = out[ev["trial"]]
                t["status"] = "failed"
                t["score"] = None
                t["scores"].append([ev["rung"], None])
                t["error"] = ev["error"]
            elif kind == "rung_closed":
                for tid in ev["promoted"]:
                    out[tid]["status"] = "promoted"
                for tid in ev["discarded"]:
                    if out[tid]["status"] != "failed":
                        out[tid]["status"] = "discarded"
        return out

    def evaluated(self) -> dict[tuple[str, int], dict]:
        return {(ev["trial"], ev["rung"]): ev for ev in self.events if ev["event"] in ("evaluated", "failed")}

    def closed_rungs(self) -> dict[tuple[int, int], dict]:
        return {(ev["bracket"], ev["rung"]): ev for ev in self.events if ev["event"] == "rung_closed"}

    def best(self) -> dict | None:
        """Ledger-wide best evaluation; ties go to the lower trial id, then the earlier rung."""
        best = None
        for ev in self.events:
            if ev["event"] != "evaluated" or ev["score"] is None:
                continue
            key = (-ev["score"], ev["trial"], ev["rung"])
            if best is None or key < best[0]:
                best = (key, ev)
        return None if best is None else best[1]


# ---------------------------------------------------------------------------
# search

def _threads() -> int:
    try:
        return max(1, int(os.environ.get("SPIRALFORGE_THREADS", "1")))
    except ValueError:
        raise ConfigError("SPIRALFORGE_THREADS must be an integer") from None


def _save_state(evaluator, path: Path, state):
    if hasattr(evaluator, "save_state"):
        evaluator.save_state(path, state)
    else:
        _atomic_write_text(path, json.dumps(state, sort_keys=True))


def _load_state(evaluator, path: Path):
    if hasattr(evaluator, "load_state"):
        return evaluator.load_state(path)
    return json.loads(path.read_text())


def _promote(scores: dict[str, float], keep: int) -> tuple[list[str], list[str]]:
    ranked = sorted(scores, key=lambda tid: (-scores[tid], tid))
    alive = [tid for tid in ranked if scores[tid] > -math.inf]
    promoted = sorted(alive[:keep])
    return promoted, sorted(t for t in ranked if t not in promoted)


@dataclass
class SearchResult:
    best_config: SpiralConfig | None
    best_score: float
    best_trial: str | None
    ledger: TrialLedger
    report: dict
    complete: bool


def run_search(space: SearchSpace, params: HyperBandParams, evaluator: Callable, checkpoint_dir,
               system: GradientSystem | None = None, resume: bool = False, max_rungs: int | None = None,
               log: Callable[[str], None] | None = None) -> SearchResult:
    """Run (or resume) a HyperBand search.

    Args:
        evaluator: ``evaluator(config, additional_epochs, prior_state) ->
            (score, new_state)``. ``prior_state`` is None for a new trial.
            Optional ``save_state(path, state)``/``load_state(path)`` methods
            persist states; otherwise states must be JSON-serializable.
            Raising :class:`EvaluatorFailure` fails the trial.
        checkpoint_dir: ledger, trial states and the final report live here.
        system: feasibility check for sampled configurations.
        resume: continue from an existing ledger.
        max_rungs: stop after closing this many rungs in this call (the
            search can be resumed later).
        log: receives one line per closed rung.
    """
    root = Path(checkpoint_dir)
    brackets = schedule(params)
    if (root / "ledger.json").exists():
        if not resume:
            raise ConfigError(f"{root} already holds a search; resume it or pick another directory")
        ledger = TrialLedger.load(root)
        if ledger.params != params.to_dict() or ledger.space != space.to_dict():
            raise ConfigError("ledger was written with different search parameters")
    else:
        root.mkdir(parents=True, exist_ok=True)
        ledger = TrialLedger(root, params.to_dict(), space.to_dict())
        ledger.save()

    # configs are drawn up front in bracket order, so a resumed search redraws the same sequence
    rng = np.random.default_rng(params.seed)
    plan = []
    tid = 0
    for b, br in enumerate(brackets):
        ids = []
        for _ in range(br.n_configs):
            ids.append((f"t{tid:04d}", sample_config(space, rng, system)))
            tid += 1
        plan.append(ids)

    known = {ev["trial"]: ev for ev in ledger.events if ev["event"] == "created"}
    for b, ids in enumerate(plan):
        for trial, cfg in ids:
            if trial in known:
                if known[trial]["config"] != cfg.to_dict():
                    raise FormatError(f"ledger config for {trial} does not match the seeded draw")
                continue
            (root / "trials" / trial).mkdir(parents=True, exist_ok=True)
            _atomic_write_text(root / "trials" / trial / "config.json", json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
            ledger.append({"event": "created", "trial": trial, "bracket": b, "config": cfg.to_dict()})

    done = ledger.evaluated()
    # finish interrupted commits: state written, ledger updated, rename pending
    for (trial, rung), ev in done.items():
        staged = root / "trials" / trial / f"state.r{rung}.ckpt"
        if staged.exists():
            os.replace(staged, root / "trials" / trial / "state.ckpt")

    closed_now = 0
    complete = True
    threads = _threads()
    for b, (br, ids) in enumerate(zip(brackets, plan)):
        configs = dict(ids)
        active = [t for t, _ in ids]
        for rung in br.rungs:
            closed = ledger.closed_rungs()
            if (b, rung.index) in closed:
                active = closed[(b, rung.index)]["promoted"]
                continue
            if max_rungs is not None and closed_now >= max_rungs:
                complete = False
                break
            view = ledger.trials()
            consumed = {t: view[t]["epochs_consumed"] for t in active}
            todo = [t for t in active if (t, rung.index) not in ledger.evaluated()]

            def work(trial, rung=rung, consumed=consumed):
                ckpt = root / "trials" / trial / "state.ckpt"
                prior = _load_state(evaluator, ckpt) if consumed[trial] > 0 else None
                extra = rung.epochs - consumed[trial]
                try:
                    score, state = evaluator(configs[trial], extra, prior)
                    score = float(score)
                    if math.isnan(score):
                        raise EvaluatorFailure("evaluator returned NaN")
                except EvaluatorFailure as exc:
                    return trial, None, None, exc
                staged = root / "trials" / trial / f"state.r{rung.index}.ckpt"
                _save_state(evaluator, staged, state)
                return trial, score, staged, None

            if threads > 1 and len(todo) > 1:
                with ThreadPoolExecutor(threads) as pool:
                    results = pool.map(work, todo)
                    _record(ledger, results, b, rung, root)
            else:
                _record(ledger, map(work, todo), b, rung, root)

            ev = ledger.evaluated()
            scores = {t: _score_value(ev[(t, rung.index)].get("score")) for t in active}
            promoted, discarded = _promote(scores, rung.keep)
            ledger.append({"event": "rung_closed", "bracket": b, "rung": rung.index,
                           "promoted": promoted, "discarded": discarded})
            closed_now += 1
            if log:
                best = max(scores.values()) if scores else -math.inf
                log(f"bracket {br.s} rung {rung.index}: {len(active)} trials x {rung.epochs} epochs, "
                    f"best {best:.4f}, promoted {len(promoted)}")
            active = promoted
        if not complete:
            break

    best = ledger.best()
    report = search_report(ledger, brackets)
    if complete:
        _atomic_write_text(root / "search_report.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
        if best is not None:
            pointer = {"trial": best["trial"], "rung": best["rung"], "score": best["score"],
                       "checkpoint": f"trials/{best['trial']}/state.ckpt",
                       "config": ledger.trials()[best["trial"]]["config"]}
            _atomic_write_text(root / "best.json", json.dumps(pointer, indent=2, sort_keys=True) + "\n")
    cfg = SpiralConfig.from_dict(ledger.trials()[best["trial"]]["config"]) if best else None
    return SearchResult(cfg, best["score"] if best else -math.inf, best["trial"] if best else None,
                        ledger, report, complete)


def _record(ledger: TrialLedger, results, b: int, rung: Rung, root: Path):
    # results arrive in submission order, so the journal is thread-count independent
    for trial, score, staged, exc in results:
        if exc is not None:
            ledger.append({"event": "failed", "trial": trial, "bracket": b, "rung": rung.index,
                           "error": getattr(exc, "code", type(exc).__name__), "message": str(exc)})
            continue
        ledger.append({"event": "evaluated", "trial": trial, "bracket": b, "rung": rung.index,
                       "epochs_consumed": rung.epochs, "score": _score_json(score)})
        os.replace(staged, root / "trials" / trial / "state.ckpt")


def search_report(ledger: TrialLedger, brackets: list[Bracket] | None = None) -> dict:
    brackets = brackets or schedule(HyperBandParams(**ledger.params))
    trials = ledger.trials()
    consumed = sum(t["epochs_consumed"] for t in trials.values())
    closed = ledger.closed_rungs()
    evaluated = ledger.evaluated()
    rows = []
    for b, br in enumerate(brackets):
        rung_rows = []
        for rung in br.rungs:
            ev = closed.get((b, rung.index))
            members = sorted(t for (t, r), e in evaluated.items() if r == rung.index and trials[t]["bracket"] == b)
            rung_rows.append({
                "rung": rung.index, "n_trials": rung.n_trials, "epochs": rung.epochs, "keep": rung.keep,
                "scores": {t: evaluated[(t, rung.index)].get("score") for t in members},
                "promoted": ev["promoted"] if ev else None,
            })
        rows.append({"s": br.s, "n_configs": br.n_configs, "rungs": rung_rows})
    best = ledger.best()
    failed = sorted(t for t, v in trials.items() if v["status"] == "failed")
    # a failed trial stops consuming epochs, so the analytic total is an upper bound then
    return {
        "params": ledger.params,
        "space": ledger.space,
        "schedule": [br.to_dict() for br in brackets],
        "totals": {**schedule_totals(brackets), "epochs_consumed": consumed, "trials_created": len(trials),
                   "failed": failed},
        "brackets": rows,
        "best": None if best is None else {"trial": best["trial"], "rung": best["rung"], "score": best["score"],
                                           "config": trials[best["trial"]]["config"]},
    }


# ---------------------------------------------------------------------------
# the real evaluator: trajectory -> gridded data -> denoiser -> validation SSIM

@dataclass
class DenoiserEvaluator:
    """Trains a denoiser on data gridded with the trial's trajectory.

    Args:
        phantoms: the search subset.
        splits: ``{"train": idx, "val": idx}`` into ``phantoms``.
        system: gradient system used to build trajectories.
        widths, lr, batch, seed: denoiser and optimizer settings; the seed is
            shared by all trials so only the trajectory differs.
        val_targets: 1-indexed frames scored for validation.
    """

    phantoms: phantom.PhantomSet
    splits: dict
    system: GradientSystem
    widths: tuple = denoiser.DEFAULT_WIDTHS
    lr: float = 1e-3
    batch: int = 8
    seed: int = 0
    val_targets: tuple = metrics.REPORT_FRAMES
    noise_sigma: float = 0.0
    _cache: dict = field(default_factory=dict, repr=False)

    def datasets(self, config: SpiralConfig):
        key = json.dumps(config.to_dict(), sort_keys=True)
        if key not in self._cache:
            T = self.phantoms.truth.shape[1]
            traj = trajgen.assemble_trajectory(config, self.system, T)
            pairs = phantom.grid_phantoms(self.phantoms, traj, noise_sigma=self.noise_sigma)
            train = denoiser.WindowDataset.from_pairs(pairs.subset(self.splits["train"]))
            val = denoiser.WindowDataset.from_pairs(pairs.subset(self.splits["val"]), self.val_targets)
            self._cache.clear()
            self._cache[key] = (train, val)
        return self._cache[key]

    def __call__(self, config: SpiralConfig, additional_epochs: int, prior_state):
        train, val = self.datasets(config)
        state = prior_state or denoiser.TrainState.fresh(
            denoiser.DenoiserModel.init(self.seed, self.widths), self.seed, self.lr, self.batch)
        if additional_epochs > 0:
            denoiser.train_epochs(state, train, additional_epochs, val=val)
        return state.val_ssim, state

    @staticmethod
    def save_state(path, state):
        denoiser.save_state(path, state)

    @staticmethod
    def load_state(path):
        return denoiser.load_state(path)


@dataclass
class RetrainResult:
    state: denoiser.TrainState
    report: metrics.MetricsReport
    recon: np.ndarray  # [n_test, T - 4, H, W]


def retrain(trajectory, phantoms: phantom.PhantomSet, splits: dict, epochs: int, widths=denoiser.DEFAULT_WIDTHS,
            lr: float = 1e-3, batch: int = 8, seed: int = 0, noise_sigma: float = 0.0,
            out_dir=None, log: Callable[[str], None] | None = None) -> RetrainResult:
    """Train from scratch on the train split and report metrics on the untouched test split."""
    if epochs < 1:
        raise ConfigError(f"epochs must be >= 1, got {epochs}")
    pairs = phantom.grid_phantoms(phantoms, trajectory, noise_sigma=noise_sigma)
    train = denoiser.WindowDataset.from_pairs(pairs.subset(splits["train"]))
    val = denoiser.WindowDataset.from_pairs(pairs.subset(splits["val"]), metrics.REPORT_FRAMES)
    state = denoiser.TrainState.fresh(denoiser.DenoiserModel.init(seed, widths), seed, lr, batch)
    for _ in range(epochs):
        denoiser.train_epochs(state, train, 1, val=val)
        if log:
            log(f"epoch {state.epoch}: loss {state.loss_history[-1]:.4f} val ssim {state.val_ssim:.4f}")
    test = pairs.subset(splits["test"])
    recon = np.stack([denoiser.sliding_window_apply(state.model, g).data for g in test.gridded])
    report = metrics.evaluate(recon, test.truth, test.ids, recon_offset=denoiser.WINDOW - 1)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        denoiser.save_state(out / "final.ckpt", state)
        (out / "metrics.csv").write_text(report.to_csv())
        (out / "metrics.json").write_text(report.to_json())
    return RetrainResult(state, report, recon)


def finalize(best_config: SpiralConfig, phantoms: phantom.PhantomSet, splits: dict, system: GradientSystem,
             epochs: int, **kwargs) -> RetrainResult:
    """Retrain the winning configuration from scratch on the final split."""
    traj = trajgen.assemble_trajectory(best_config, system, phantoms.truth.shape[1])
    return retrain(traj, phantoms, splits, epochs, **kwargs)
