"""Variable-density spiral, uniform spiral and tiny-golden radial trajectories.

Coordinates are normalized k-space positions in cycles/pixel, each component
in [-0.5, 0.5]; a radius of 0.5 is k_max. Design radii ``r`` used by the
density profile are fractions of k_max, so ``r = 2 * |k|``.

A spiral interleave follows ``d|k|/dtheta = U(r) / (2 pi matrix)``: one turn
advances the radius by ``U`` Nyquist steps, so with ``N`` evenly rotated
interleaves the local acceleration relative to Nyquist is ``U(r) / N``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from scipy.integrate import cumulative_trapezoid

from . import tensorio
from .errors import (
    BoundsError,
    DegenerateDensity,
    FormatError,
    InfeasibleReadout,
    RadiusOutOfRange,
    ResultBelowOne,
    ZeroOrNegativeInput,
)

TINY_GOLDEN_DEG = 47.3
GAMMA_HZ_PER_T = 42.577478e6
TRAJECTORY_FORMAT_VERSION = 1

TRANSITIONS = ("linear", "hanning", "quadratic")
ORDERINGS = ("linear", "tiny_golden")

# search-space bounds, also enforced on every config
R_INNER_RANGE = (0.1, 0.3)
U_INNER_RANGE = (12.0, 24.0)
RHO_RANGE = (0.01, 0.35)
TR_RANGE_MS = (2.88, 3.7)
T_ACQ_MAX_MS = 55.0


@dataclass(frozen=True)
class SpiralConfig:
    """One point of the trajectory search space."""

    r_inner: float
    u_inner: float
    r_outer: float
    rho: float
    transition: Literal["linear", "hanning", "quadratic"] = "hanning"
    ordering: Literal["linear", "tiny_golden"] = "linear"
    tr_ms: float = 55.0 / 15
    t_acq_ms: float = 55.0

    def validate(self) -> "SpiralConfig":
        _check_range("r_inner", self.r_inner, *R_INNER_RANGE)
        _check_range("u_inner", self.u_inner, *U_INNER_RANGE)
        _check_range("r_outer", self.r_outer, self.r_inner, 1.0 - self.r_inner)
        _check_range("rho", self.rho, *RHO_RANGE)
        if self.transition not in TRANSITIONS:
            raise BoundsError("transition", self.transition, detail=f"expected one of {TRANSITIONS}")
        if self.ordering not in ORDERINGS:
            raise BoundsError("ordering", self.ordering, detail=f"expected one of {ORDERINGS}")
        _check_range("tr_ms", self.tr_ms, *TR_RANGE_MS)
        if not 0 < self.t_acq_ms <= T_ACQ_MAX_MS:
            raise BoundsError("t_acq_ms", self.t_acq_ms, 0, T_ACQ_MAX_MS)
        return self

    @property
    def n_interleaves(self) -> int:
        return interleave_count(self.t_acq_ms, self.tr_ms)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SpiralConfig":
        return cls(**d)


def optimized_config() -> SpiralConfig:
    """The published optimum: 0.15 / 16 / 0.56 / 0.07, Hanning, linear, 15 interleaves in 55 ms.

    The TR is kept at full precision (55/15 ms); the rounded 3.67 ms would
    only fit 14 interleaves.
    """
    return SpiralConfig(0.15, 16.0, 0.56, 0.07, "hanning", "linear", tr_ms=55.0 / 15, t_acq_ms=55.0)


UNIFORM_U = 92.0


@dataclass(frozen=True)
class GradientSystem:
    fov_mm: float = 400.0
    matrix: int = 240
    dwell_us: float = 2.5
    readout_overhead_ms: float = 1.0
    max_grad_mT_m: float = 40.0

    def __post_init__(self):
        for name in ("fov_mm", "matrix", "dwell_us", "readout_overhead_ms", "max_grad_mT_m"):
            if not getattr(self, name) > 0:
                raise ZeroOrNegativeInput(name, getattr(self, name), detail="must be > 0")

    @property
    def k_max(self) -> float:
        """Cycles/mm."""
        return self.matrix / (2.0 * self.fov_mm)

    @property
    def max_step(self) -> float:
        """Largest k-space step per dwell in normalized (cycles/pixel) units."""
        cycles_per_m = GAMMA_HZ_PER_T * self.max_grad_mT_m * 1e-3 * self.dwell_us * 1e-6
        return cycles_per_m * (self.fov_mm * 1e-3) / self.matrix

    def n_samples(self, tr_ms: float) -> int:
        if tr_ms <= self.readout_overhead_ms:
            raise BoundsError("tr_ms", tr_ms, detail=f"must exceed readout overhead {self.readout_overhead_ms} ms")
        # 1e-9 guards decimal inputs like 2.67 ms / 2.5 us landing a hair below an integer
        return int(math.floor((tr_ms - self.readout_overhead_ms) * 1000.0 / self.dwell_us + 1e-9))

    def to_dict(self) -> dict:
        return asdict(self)


def desk_system() -> GradientSystem:
    """Scaled-down system for CPU experiments (48 px matrix, 10 us dwell)."""
    return GradientSystem(fov_mm=400.0, matrix=48, dwell_us=10.0, readout_overhead_ms=1.0)


@dataclass(frozen=True, eq=False)
class Trajectory:
    coords: np.ndarray           # [n_frames, n_interleaves, n_samples, 2]
    density_weights: np.ndarray  # [n_interleaves, n_samples]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.coords.setflags(write=False)
        self.density_weights.setflags(write=False)

    @property
    def n_frames(self) -> int:
        return self.coords.shape[0]

    @property
    def n_interleaves(self) -> int:
        return self.coords.shape[1]

    @property
    def n_samples(self) -> int:
        return self.coords.shape[2]

    def frame(self, index: int) -> tuple[np.ndarray, np.ndarray]:
        """Flattened coordinates [M, 2] and weights [M] of one frame (0-indexed)."""
        return self.coords[index].reshape(-1, 2), self.density_weights.reshape(-1)

    def manifest(self) -> dict:
        return {
            "format_version": TRAJECTORY_FORMAT_VERSION,
            "kind": self.meta.get("kind"),
            "config": self.meta.get("config"),
            "system": self.meta.get("system"),
            "ordering": self.meta.get("ordering"),
            "n_frames": self.n_frames,
            "n_interleaves": self.n_interleaves,
            "n_samples": self.n_samples,
        }


# ---------------------------------------------------------------------------

def _check_range(name, value, low, high):
    if not (low <= value <= high) or not math.isfinite(value):
        raise BoundsError(name, value, low, high)


def interleave_count(t_acq_ms: float, tr_ms: float) -> int:
    """Number of interleaves that fit in one frame: floor(t_acq / tr)."""
    if not t_acq_ms > 0:
        raise ZeroOrNegativeInput("t_acq_ms", t_acq_ms, detail="must be > 0")
    if not tr_ms > 0:
        raise ZeroOrNegativeInput("tr_ms", tr_ms, detail="must be > 0")
    n = math.floor(t_acq_ms / tr_ms)
    if n < 1:
        raise ResultBelowOne("tr_ms", tr_ms, detail=f"exceeds frame budget t_acq_ms={t_acq_ms}")
    return n


def _transition_shape(kind: str, x):
    if kind == "linear":
        return x
    if kind == "quadratic":
        return x * x
    if kind == "hanning":
        return 0.5 * (1.0 - np.cos(np.pi * x))
    raise BoundsError("transition", kind, detail=f"expected one of {TRANSITIONS}")


def sampling_density(config: SpiralConfig, r):
    """Per-interleave sampling density 1/U(r) (vectorized)."""
    r = np.asarray(r, dtype=float)
    if np.any(r < 0) or np.any(r > 1) or not np.all(np.isfinite(r)):
        raise RadiusOutOfRange("r", r.min() if r.size else r, 0, 1)
    d_in = 1.0 / config.u_inner
    width = config.r_outer - config.r_inner
    if width > 0:
        x = np.clip((r - config.r_inner) / width, 0.0, 1.0)
    else:
        x = (r > config.r_inner).astype(float)
    return d_in * (1.0 - (1.0 - config.rho) * _transition_shape(config.transition, x))


def undersampling_profile(config: SpiralConfig, r):
    """Per-interleave undersampling factor U(r), r a fraction of k_max.

    Between ``r_inner`` and ``r_outer`` the density 1/U is blended from
    ``1/u_inner`` to ``rho/u_inner`` by the transition shape.
    """
    out = 1.0 / sampling_density(config, r)
    return float(out) if np.ndim(out) == 0 else out


def effective_acceleration(config: SpiralConfig, r) -> float:
    """Acceleration relative to Nyquist at radius ``r`` for the full frame."""
    return undersampling_profile(config, r) / config.n_interleaves


# ---------------------------------------------------------------------------
# Interleave design

_DESIGN_GRID = 20001


def _design_curve(undersampling, matrix: int):
    """Integrate the spiral on a dense radius grid.

    Returns coordinate radius, polar angle and arc length, all as functions of
    the radius grid. ``undersampling`` maps design radius r in [0, 1] to U.
    """
    radius = np.linspace(0.0, 0.5, _DESIGN_GRID)
    u = np.broadcast_to(np.asarray(undersampling(2.0 * radius), dtype=float), radius.shape)
    dtheta = 2.0 * np.pi * matrix / u
    theta = cumulative_trapezoid(dtheta, radius, initial=0.0)
    dsdr = np.sqrt(1.0 + (radius * dtheta) ** 2)
    arclen = cumulative_trapezoid(dsdr, radius, initial=0.0)
    return radius, theta, arclen, dtheta


def _spiral_interleave(undersampling, system: GradientSystem, tr_ms: float):
    n_samples = system.n_samples(tr_ms)
    if n_samples < 2:
        raise InfeasibleReadout(f"readout window of {tr_ms} ms yields {n_samples} samples")
    radius, theta, arclen, dtheta = _design_curve(undersampling, system.matrix)
    total = arclen[-1]
    step = total / (n_samples - 1)
    if step > system.max_step:
        raise InfeasibleReadout(
            f"arc length {total:.4g} needs step {step:.4g}/sample, above gradient limit {system.max_step:.4g}"
        )
    s = np.linspace(0.0, total, n_samples)
    r_s = np.interp(s, arclen, radius)
    r_s[-1] = 0.5
    th_s = np.interp(r_s, radius, theta)
    dth_s = np.interp(r_s, radius, dtheta)
    # area per sample for uniformly rotated copies sampled at constant speed is
    # |k . dk/ds| = r dr/ds; the centre sample owns a disc of radius step/2
    # shared by all interleaves, i.e. step/8 in the same units
    w = r_s / np.sqrt(1.0 + (r_s * dth_s) ** 2)
    w = np.maximum(w, step / 8.0)
    w = w / w.mean()
    return r_s, th_s, w


def generate_interleave(config: SpiralConfig, system: GradientSystem):
    """Base (unrotated) interleave of a variable-density spiral.

    Returns:
        (radius, angle, weights): per-sample coordinate radius in [0, 0.5],
        polar angle in radians, and mean-normalized density weights.
    """
    try:
        config.validate()
    except BoundsError as exc:
        if exc.field in ("rho", "u_inner"):
            raise DegenerateDensity(exc.field, exc.value, detail=str(exc)) from None
        raise
    return _spiral_interleave(lambda r: undersampling_profile(config, r), system, config.tr_ms)


def _rotations(n_frames: int, n_interleaves: int, ordering: str) -> np.ndarray:
    """Rotation angle (degrees in [0, 360)) of every interleave, [n_frames, n_interleaves]."""
    if n_frames < 1:
        raise BoundsError("n_frames", n_frames, 1, None)
    j = np.arange(n_interleaves)
    if ordering == "linear":
        return np.tile(j * (360.0 / n_interleaves), (n_frames, 1))
    if ordering == "tiny_golden":
        m = np.arange(n_frames)[:, None] * n_interleaves + j[None, :]
        return np.mod(m * TINY_GOLDEN_DEG, 360.0)
    raise BoundsError("ordering", ordering, detail=f"expected one of {ORDERINGS}")


def _rotate(radius, angle, rotations_deg) -> np.ndarray:
    phi = angle[None, None, :] + np.deg2rad(rotations_deg)[:, :, None]
    return np.stack([radius * np.cos(phi), radius * np.sin(phi)], axis=-1)


def assemble_trajectory(config: SpiralConfig, system: GradientSystem, n_frames: int) -> Trajectory:
    radius, angle, weights = generate_interleave(config, system)
    n = config.n_interleaves
    rot = _rotations(n_frames, n, config.ordering)
    return Trajectory(
        coords=_rotate(radius, angle, rot),
        density_weights=np.tile(weights, (n, 1)),
        meta={
            "kind": "variable_density_spiral",
            "config": config.to_dict(),
            "system": system.to_dict(),
            "ordering": config.ordering,
            "rotations_deg": rot.tolist(),
        },
    )


def uniform_spiral(
    system: GradientSystem,
    tr_ms: float = 55.0 / 15,
    t_acq_ms: float = 55.0,
    ordering: str = "linear",
    n_frames: int = 1,
    u_uniform: float = UNIFORM_U,
) -> Trajectory:
    """Constant-density spiral (the uniform baseline)."""
    if not u_uniform > 0:
        raise DegenerateDensity("u_uniform", u_uniform, detail="must be > 0")
    n = interleave_count(t_acq_ms, tr_ms)
    radius, angle, weights = _spiral_interleave(lambda r: np.full_like(r, u_uniform), system, tr_ms)
    rot = _rotations(n_frames, n, ordering)
    return Trajectory(
        coords=_rotate(radius, angle, rot),
        density_weights=np.tile(weights, (n, 1)),
        meta={
            "kind": "uniform_spiral",
            "config": {"u_uniform": u_uniform, "tr_ms": tr_ms, "t_acq_ms": t_acq_ms},
            "system": system.to_dict(),
            "ordering": ordering,
            "rotations_deg": rot.tolist(),
        },
    )


def radial_trajectory(
    system: GradientSystem,
    spokes_per_frame: int = 17,
    n_frames: int = 1,
    n_samples: int | None = None,
    increment_deg: float = TINY_GOLDEN_DEG,
) -> Trajectory:
    """Diameter spokes with a golden-type angular increment.

    Spoke ``m`` (counted globally across frames) lies at ``m * increment_deg``
    modulo 180 degrees. Samples are evenly spaced on [-0.5, 0.5] with an odd
    count so the middle sample is exactly the k-space origin. Weights follow
    the ramp ``|k|`` floored at a quarter sample spacing, the exact share of
    the central disc each spoke's centre sample represents.
    """
    if spokes_per_frame < 1:
        raise BoundsError("spokes_per_frame", spokes_per_frame, 1, None)
    if n_frames < 1:
        raise BoundsError("n_frames", n_frames, 1, None)
    if n_samples is None:
        n_samples = 2 * system.matrix + 1
    if n_samples < 3 or n_samples % 2 == 0:
        raise BoundsError("n_samples", n_samples, detail="must be odd and >= 3")
    line = np.linspace(-0.5, 0.5, n_samples)
    line[n_samples // 2] = 0.0
    m = np.arange(n_frames * spokes_per_frame).reshape(n_frames, spokes_per_frame)
    angles = np.mod(m * increment_deg, 180.0)
    phi = np.deg2rad(angles)[:, :, None]
    coords = np.stack([line * np.cos(phi), line * np.sin(phi)], axis=-1)
    spacing = 1.0 / (n_samples - 1)
    w = np.maximum(np.abs(line), spacing / 4.0)
    w = w / w.mean()
    return Trajectory(
        coords=coords,
        density_weights=np.tile(w, (spokes_per_frame, 1)),
        meta={
            "kind": "radial",
            "config": {"spokes_per_frame": spokes_per_frame, "increment_deg": increment_deg,
                       "angle_modulus_deg": 180.0},
            "system": system.to_dict(),
            "ordering": "tiny_golden",
            "rotations_deg": angles.tolist(),
        },
    )


def realized_acceleration(trajectory: Trajectory, matrix: int) -> tuple[np.ndarray, np.ndarray]:
    """Local acceleration measured from the sampled geometry of a spiral.

    Uses the pitch ``2 pi d|k|/dtheta`` of the first interleave, which is the
    radial gap between turns, times the matrix size and divided by the number
    of interleaves. Returns (design radius r, acceleration) per sample
    (excluding the end points).
    """
    k = trajectory.coords[0, 0]
    radius = np.hypot(k[:, 0], k[:, 1])
    theta = np.unwrap(np.arctan2(k[:, 1], k[:, 0]))
    dr = np.gradient(radius)
    dth = np.gradient(theta)
    ok = dth > 0
    pitch = 2.0 * np.pi * dr[ok] / dth[ok]
    accel = pitch * matrix / trajectory.n_interleaves
    return (2.0 * radius[ok])[1:-1], accel[1:-1]


# ---------------------------------------------------------------------------
# persistence

def save_trajectory(trajectory: Trajectory, directory, stem: str = "trajectory") -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensor_path = directory / f"{stem}.tnsr"
    manifest_path = directory / f"{stem}.json"
    tensorio.write_tensors(tensor_path, [trajectory.coords.astype(np.float64),
                                         trajectory.density_weights.astype(np.float64)])
    manifest = trajectory.manifest()
    manifest["tensor_file"] = tensor_path.name
    manifest["rotations_deg"] = trajectory.meta.get("rotations_deg")
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path, tensor_path


def load_trajectory(path) -> Trajectory:
    """Load from a manifest path (``.json``) or a directory containing ``trajectory.json``."""
    path = Path(path)
    if path.is_dir():
        path = path / "trajectory.json"
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise FormatError(f"missing trajectory manifest {path}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if manifest.get("format_version") != TRAJECTORY_FORMAT_VERSION:
        raise FormatError(f"unsupported trajectory format version {manifest.get('format_version')}")
    arrays = tensorio.read_tensors(path.with_name(manifest["tensor_file"]))
    if len(arrays) != 2:
        raise FormatError("trajectory tensor file must hold coords and density_weights")
    coords, weights = arrays
    expected = (manifest["n_frames"], manifest["n_interleaves"], manifest["n_samples"], 2)
    if coords.shape != expected or weights.shape != expected[1:3]:
        raise FormatError(f"tensor shapes {coords.shape}/{weights.shape} disagree with manifest {expected}")
    meta = {k: manifest.get(k) for k in ("kind", "config", "system", "ordering", "rotations_deg")}
    return Trajectory(coords=coords, density_weights=weights, meta=meta)
