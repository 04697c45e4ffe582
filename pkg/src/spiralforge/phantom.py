"""Synthetic dynamic phantoms, coil maps, dataset splits and transition sequences.

Frame numbers in user-facing arguments (``switch_frame``) are 1-indexed;
arrays are stored 0-indexed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import tensorio
from .errors import EmptySplit, FormatError, InvalidDims, ShapeMismatch
from .nufft import Gridder, GridKernel
from .series import ImageSeries

DATASET_FORMAT_VERSION = 1

FINAL_SPLIT = {"train": 0.75, "val": 0.10, "test": 0.15}
SEARCH_SPLIT = {"train": 0.30, "val": 0.10}


@dataclass(frozen=True)
class PhantomSpec:
    seed: int
    n_ellipses: int = 3
    motion_amplitude: float = 0.05
    period_frames: int = 10
    background_texture: float = 0.05

    @classmethod
    def random(cls, seed: int) -> "PhantomSpec":
        """Spec with per-series variability drawn from ``seed``."""
        rng = np.random.default_rng([seed, 7])
        return cls(
            seed=seed,
            n_ellipses=int(rng.integers(2, 5)),
            motion_amplitude=float(rng.uniform(0.03, 0.07)),
            period_frames=int(rng.integers(8, 15)),
            background_texture=float(rng.uniform(0.02, 0.08)),
        )


@dataclass(eq=False)
class CoilMaps:
    data: np.ndarray  # [n_coils, H, W] complex

    @property
    def n_coils(self) -> int:
        return self.data.shape[0]


def _ellipse(xx, yy, cx, cy, a, b, angle):
    c, s = np.cos(angle), np.sin(angle)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def generate_cine(spec: PhantomSpec, T: int, H: int, W: int) -> ImageSeries:
    """Deformable-ellipse cardiac-like cine scaled to max 1.

    A bright blood pool contracts periodically; the surrounding myocardium
    thickens in anti-phase so its outer wall moves less. Static structures
    and a low-pass textured body complete the scene.
    """
    if T < 5 or H < 8 or W < 8:
        raise InvalidDims(f"need T >= 5 and H, W >= 8, got {(T, H, W)}")
    if spec.period_frames < 1:
        raise InvalidDims("period_frames must be >= 1")
    rng = np.random.default_rng(spec.seed)
    yy, xx = np.meshgrid((np.arange(H) - H / 2) / (H / 2), (np.arange(W) - W / 2) / (W / 2), indexing="ij")

    body = _ellipse(xx, yy, rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05),
                    rng.uniform(0.82, 0.95), rng.uniform(0.65, 0.85), rng.uniform(-0.4, 0.4))
    texture = gaussian_filter(rng.standard_normal((H, W)), sigma=max(H, W) / 12, mode="wrap")
    texture /= texture.std() + 1e-12
    static = body * (rng.uniform(0.12, 0.22) + spec.background_texture * texture)
    for _ in range(spec.n_ellipses):
        r = rng.uniform(0.35, 0.7)
        phi = rng.uniform(0, 2 * np.pi)
        mask = _ellipse(xx, yy, r * np.cos(phi), r * np.sin(phi), rng.uniform(0.06, 0.2),
                        rng.uniform(0.05, 0.15), rng.uniform(0, np.pi))
        static = np.where(mask & body, rng.uniform(0.3, 0.8), static)

    cx, cy = rng.uniform(-0.2, 0.2, size=2)
    a0 = rng.uniform(0.18, 0.28)
    b0 = a0 * rng.uniform(0.7, 1.0)
    tilt = rng.uniform(0, np.pi)
    wall = rng.uniform(0.07, 0.11)
    blood = rng.uniform(0.85, 1.0)
    muscle = rng.uniform(0.25, 0.4)
    phase0 = rng.uniform(0, 2 * np.pi)
    swing = 2.0 * spec.motion_amplitude

    frames = np.empty((T, H, W))
    for t in range(T):
        c = 0.5 * (1.0 - np.cos(2 * np.pi * t / spec.period_frames + phase0))
        da = swing * c
        thick = wall + 0.6 * da
        img = static.copy()
        img[_ellipse(xx, yy, cx, cy, a0 - da + thick, b0 - da + thick, tilt)] = muscle
        img[_ellipse(xx, yy, cx, cy, a0 - da, b0 - da, tilt)] = blood
        frames[t] = gaussian_filter(img, sigma=0.6)
    frames = np.maximum(frames, 0.0)
    frames /= frames.max()
    return ImageSeries(frames, meta={"spec": asdict(spec)})


def coil_maps(n_coils: int, H: int, W: int, seed: int = 0) -> CoilMaps:
    """Smooth complex sensitivities: Gaussian lobes on the FOV border, linear phase.

    The maps are scaled so their RSS lies within [0.5, 2.0] over the image.
    """
    if n_coils < 1:
        raise InvalidDims("n_coils must be >= 1")
    rng = np.random.default_rng([seed, 11])
    if n_coils == 1:
        yy, xx = np.meshgrid(np.arange(H) / H, np.arange(W) / W, indexing="ij")
        f = rng.uniform(-0.5, 0.5, size=2)
        return CoilMaps(np.exp(1j * 2 * np.pi * (f[0] * yy + f[1] * xx))[None])
    yy, xx = np.meshgrid((np.arange(H) - H / 2) / (H / 2), (np.arange(W) - W / 2) / (W / 2), indexing="ij")
    theta0 = rng.uniform(0, 2 * np.pi)
    sigma = 0.9
    maps = np.empty((n_coils, H, W), dtype=complex)
    for c in range(n_coils):
        th = theta0 + 2 * np.pi * c / n_coils
        d2 = (yy - np.sin(th)) ** 2 + (xx - np.cos(th)) ** 2
        f = rng.uniform(-0.5, 0.5, size=2)
        phase = np.pi * (f[0] * yy + f[1] * xx) + rng.uniform(0, 2 * np.pi)
        maps[c] = np.exp(-d2 / (2 * sigma**2)) * np.exp(1j * phase)
    rss = np.sqrt((np.abs(maps) ** 2).sum(0))
    maps /= np.sqrt(rss.min() * rss.max())
    return CoilMaps(maps)


def transition_sequence(a, b, switch_frame: int = 6, n_frames: int = 12) -> ImageSeries:
    """Frames 1..switch_frame-1 of ``a`` followed by frames switch_frame..n_frames of ``b``.

    Frame numbers are 1-indexed; both inputs contribute their frames at the
    same time indices.
    """
    da = a.data if isinstance(a, ImageSeries) else np.asarray(a)
    db = b.data if isinstance(b, ImageSeries) else np.asarray(b)
    if da.shape[1:] != db.shape[1:]:
        raise ShapeMismatch(f"frame shapes differ: {da.shape[1:]} vs {db.shape[1:]}")
    if min(da.shape[0], db.shape[0]) < n_frames:
        raise ShapeMismatch(f"inputs need at least {n_frames} frames")
    if not 1 <= switch_frame <= n_frames:
        raise ShapeMismatch(f"switch_frame {switch_frame} outside 1..{n_frames}")
    k = switch_frame - 1
    out = np.concatenate([da[:k], db[k:n_frames]])
    return ImageSeries(out, meta={"switch_frame": switch_frame})


# ---------------------------------------------------------------------------
# datasets

def _hash_order(n_series: int, seed: int) -> np.ndarray:
    keys = [hashlib.sha256(f"{seed}:{i}".encode()).hexdigest() for i in range(n_series)]
    return np.array(sorted(range(n_series), key=lambda i: keys[i]), dtype=int)


def split_indices(n_series: int, fractions: dict | None = None, seed: int = 0) -> dict[str, np.ndarray]:
    """Deterministic disjoint split of series indices by hash order.

    Fractions are relative to ``n_series`` and consumed in order, so the
    search split (30/10) lies inside the final train split (75/10/15) for
    the same seed and the final test series are never used for search.
    """
    fractions = dict(FINAL_SPLIT if fractions is None else fractions)
    if sum(fractions.values()) > 1.0 + 1e-9:
        raise EmptySplit(f"fractions sum to {sum(fractions.values())} > 1")
    order = _hash_order(n_series, seed)
    out, start = {}, 0
    for name, frac in fractions.items():
        count = int(np.floor(frac * n_series + 0.5))
        count = min(count, n_series - start)
        if count == 0 and frac > 0:
            raise EmptySplit(f"split {name!r} is empty for {n_series} series")
        out[name] = np.sort(order[start:start + count])
        start += count
    return out


@dataclass(eq=False)
class PhantomSet:
    """Ground-truth series and coil maps for a fixed list of series ids."""

    truth: np.ndarray             # [n, T, H, W]
    maps: np.ndarray              # [n, C, H, W] complex
    specs: list[PhantomSpec]
    seed: int = 0

    @property
    def n_series(self) -> int:
        return self.truth.shape[0]

    def subset(self, index) -> "PhantomSet":
        index = np.asarray(index, dtype=int)
        return PhantomSet(self.truth[index], self.maps[index], [self.specs[i] for i in index], self.seed)


def make_phantoms(n_series: int, seed: int = 0, T: int = 16, H: int = 96, W: int = 96,
                  n_coils: int = 8) -> PhantomSet:
    specs = [PhantomSpec.random(seed * 1_000_003 + i) for i in range(n_series)]
    truth = np.stack([generate_cine(s, T, H, W).data for s in specs]) if specs else np.zeros((0, T, H, W))
    maps = (np.stack([coil_maps(n_coils, H, W, seed=s.seed).data for s in specs])
            if specs else np.zeros((0, n_coils, H, W), complex))
    return PhantomSet(truth, maps, specs, seed)


@dataclass(eq=False)
class PairedSeries:
    """Frame-aligned (gridded, ground-truth) pairs."""

    gridded: np.ndarray  # [n, T, H, W]
    truth: np.ndarray    # [n, T, H, W]
    ids: np.ndarray = field(default_factory=lambda: np.zeros(0, int))

    def __post_init__(self):
        if self.gridded.shape != self.truth.shape:
            raise ShapeMismatch(f"gridded {self.gridded.shape} vs truth {self.truth.shape}")
        if len(self.ids) != self.gridded.shape[0]:
            self.ids = np.arange(self.gridded.shape[0])

    def __len__(self):
        return self.gridded.shape[0]

    def subset(self, index) -> "PairedSeries":
        index = np.asarray(index, dtype=int)
        return PairedSeries(self.gridded[index], self.truth[index], self.ids[index])


def grid_phantoms(phantoms: PhantomSet, trajectory, kernel: GridKernel | None = None,
                  noise_sigma: float = 0.0, ids=None) -> PairedSeries:
    T, H, W = phantoms.truth.shape[1:]
    gridder = Gridder(trajectory, (H, W), kernel)
    gridded = np.stack([
        gridder.grid_series(phantoms.truth[i], phantoms.maps[i], noise_sigma, seed=phantoms.specs[i].seed).data
        for i in range(phantoms.n_series)
    ]) if phantoms.n_series else np.zeros_like(phantoms.truth)
    ids = np.arange(phantoms.n_series) if ids is None else np.asarray(ids)
    return PairedSeries(gridded, phantoms.truth, ids)


def build_dataset(n_series: int, trajectory, fractions: dict | None = None, seed: int = 0, T: int = 16,
                  H: int = 96, W: int = 96, n_coils: int = 8, noise_sigma: float = 0.0,
                  phantoms: PhantomSet | None = None, kernel: GridKernel | None = None) -> dict[str, PairedSeries]:
    """Paired (gridded, ground-truth) series for each split.

    Splits depend only on ``n_series`` and ``seed``, never on the trajectory,
    so different trajectories are compared on the same series.
    """
    phantoms = phantoms or make_phantoms(n_series, seed, T, H, W, n_coils)
    splits = split_indices(phantoms.n_series, fractions, seed)
    return {name: grid_phantoms(phantoms.subset(idx), trajectory, kernel, noise_sigma, ids=idx)
            for name, idx in splits.items()}


def save_dataset(directory, phantoms: PhantomSet, splits: dict, gridded: dict[str, np.ndarray] | None = None,
                 trajectory_ids: list[str] | None = None) -> Path:
    """Persist phantoms plus any gridded stacks (keyed by trajectory id)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensorio.write_tensor(directory / "truth.tnsr", phantoms.truth.astype(np.float32))
    tensorio.write_tensor(directory / "maps.tnsr", phantoms.maps.astype(np.complex64))
    gridded = gridded or {}
    for key, arr in gridded.items():
        tensorio.write_tensor(directory / f"gridded_{key}.tnsr", np.asarray(arr, dtype=np.float32))
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "seed": phantoms.seed,
        "shape": list(phantoms.truth.shape),
        "n_coils": int(phantoms.maps.shape[1]),
        "specs": [asdict(s) for s in phantoms.specs],
        "splits": {k: [int(i) for i in v] for k, v in splits.items()},
        "trajectories": sorted(set(list(gridded) + list(trajectory_ids or []))),
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(directory):
    """Returns (phantoms, splits, {trajectory id: gridded array})."""
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except FileNotFoundError:
        raise FormatError(f"no dataset manifest in {directory}") from None
    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        raise FormatError(f"unsupported dataset format version {manifest.get('format_version')}")
    truth = tensorio.read_tensor(directory / "truth.tnsr").astype(np.float64)
    maps = tensorio.read_tensor(directory / "maps.tnsr").astype(complex)
    if list(truth.shape) != manifest["shape"]:
        raise FormatError("truth tensor shape disagrees with manifest")
    specs = [PhantomSpec(**s) for s in manifest["specs"]]
    phantoms = PhantomSet(truth, maps, specs, manifest["seed"])
    splits = {k: np.asarray(v, dtype=int) for k, v in manifest["splits"].items()}
    gridded = {}
    for key in manifest["trajectories"]:
        p = directory / f"gridded_{key}.tnsr"
        if p.exists():
            gridded[key] = tensorio.read_tensor(p).astype(np.float64)
    return phantoms, splits, gridded
