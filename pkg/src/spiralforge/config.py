"""Run configuration: one JSON document with a section per stage.

Every field has a default, so ``{}`` is a valid configuration. Unknown
sections or keys are rejected so that typos fail loudly.
"""

from __future__ import annotations

import json
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from . import trajgen
from .errors import ConfigError, FormatError


@dataclass
class SystemSection:
    fov_mm: float = 400.0
    matrix: int = 96
    dwell_us: float = 10.0
    readout_overhead_ms: float = 1.0
    max_grad_mT_m: float = 40.0

    def build(self) -> trajgen.GradientSystem:
        return trajgen.GradientSystem(self.fov_mm, self.matrix, self.dwell_us, self.readout_overhead_ms,
                                      self.max_grad_mT_m)


@dataclass
class PhantomSection:
    n_series: int = 300
    n_frames: int = 16
    size: int = 96
    n_coils: int = 8
    noise_sigma: float = 0.0
    seed: int = 0
    split: dict = field(default_factory=lambda: {"train": 0.75, "val": 0.10, "test": 0.15})


@dataclass
class TrajectorySection:
    kind: str = "spiral"          # spiral | uniform | radial
    r_inner: float = 0.15
    u_inner: float = 16.0
    r_outer: float = 0.56
    rho: float = 0.07
    transition: str = "hanning"
    ordering: str = "linear"
    tr_ms: float = 55.0 / 15
    t_acq_ms: float = 55.0
    u_uniform: float = trajgen.UNIFORM_U
    spokes_per_frame: int = 17
    radial_increment_deg: float = trajgen.TINY_GOLDEN_DEG
    n_frames: int | None = None   # defaults to phantom.n_frames

    def spiral(self) -> trajgen.SpiralConfig:
        return trajgen.SpiralConfig(self.r_inner, self.u_inner, self.r_outer, self.rho, self.transition,
                                    self.ordering, self.tr_ms, self.t_acq_ms)

    def build(self, system: trajgen.GradientSystem, n_frames: int) -> trajgen.Trajectory:
        if self.kind == "spiral":
            return trajgen.assemble_trajectory(self.spiral().validate(), system, n_frames)
        if self.kind == "uniform":
            return trajgen.uniform_spiral(system, self.tr_ms, self.t_acq_ms, self.ordering, n_frames, self.u_uniform)
        if self.kind == "radial":
            return trajgen.radial_trajectory(system, self.spokes_per_frame, n_frames,
                                             increment_deg=self.radial_increment_deg)
        raise ConfigError(f"trajectory.kind must be spiral, uniform or radial, got {self.kind!r}")


@dataclass
class TrainingSection:
    widths: list = field(default_factory=lambda: [16, 32, 64])
    lr: float = 1e-3
    batch: int = 8
    epochs: int = 20
    seed: int = 0
    residual: bool = False
    add_skip: bool = False


@dataclass
class HyperbandSection:
    R: int = 12
    eta: int = 3
    seed: int = 0
    split: dict = field(default_factory=lambda: {"train": 0.30, "val": 0.10})
    r_inner: list = field(default_factory=lambda: list(trajgen.R_INNER_RANGE))
    u_inner: list = field(default_factory=lambda: list(trajgen.U_INNER_RANGE))
    rho: list = field(default_factory=lambda: list(trajgen.RHO_RANGE))
    tr_ms: list = field(default_factory=lambda: list(trajgen.TR_RANGE_MS))
    transitions: list = field(default_factory=lambda: list(trajgen.TRANSITIONS))
    orderings: list = field(default_factory=lambda: list(trajgen.ORDERINGS))
    t_acq_ms: float = trajgen.T_ACQ_MAX_MS
    final_epochs: int = 20


@dataclass
class StreamSection:
    mode: str = "parallel"
    inject_grid_ms: float = 0.0
    inject_denoise_ms: float = 0.0
    inject_emit_ms: float = 0.0
    queue_capacity: int = 2
    stall_timeout_s: float = 10.0


@dataclass
class RunConfig:
    system: SystemSection = field(default_factory=SystemSection)
    phantom: PhantomSection = field(default_factory=PhantomSection)
    trajectory: TrajectorySection = field(default_factory=TrajectorySection)
    training: TrainingSection = field(default_factory=TrainingSection)
    hyperband: HyperbandSection = field(default_factory=HyperbandSection)
    stream: StreamSection = field(default_factory=StreamSection)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("configuration must be a JSON object")
        return _build(cls, doc, "")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def with_overrides(self, items: list[str]) -> "RunConfig":
        """Apply ``section.key=value`` overrides; values are parsed as JSON when possible."""
        doc = self.to_dict()
        for item in items:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigError(f"override {item!r} must look like section.key=value")
            path, raw = item.split("=", 1)
            section, key = path.split(".", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            if section not in doc:
                raise ConfigError(f"unknown config section {section!r}")
            doc[section][key] = value
        return RunConfig.from_dict(doc)


def _build(cls, doc: dict, where: str):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key {where}{unknown[0]}")
    kwargs = {}
    for name, f in known.items():
        if name not in doc:
            continue
        value = doc[name]
        default = f.default_factory() if f.default_factory is not MISSING else f.default
        if is_dataclass(default):
            if not isinstance(value, dict):
                raise ConfigError(f"config section {where}{name} must be an object")
            value = _build(type(default), value, f"{where}{name}.")
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{where}{name} must be true or false")
        elif isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where}{name} must be a number")
            value = int(value) if isinstance(default, int) and float(value).is_integer() else value
        kwargs[name] = value
    return cls(**kwargs)


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"config file {path} is not valid JSON: {exc}") from None
    return RunConfig.from_dict(doc)
