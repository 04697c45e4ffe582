"""Image-quality metrics: NRMSE, PSNR, SSIM, Laplacian energy ratio.

SSIM uses an 11x11 Gaussian window (sigma 1.5) evaluated at every position
where the window fits inside the image, with K1 = 0.01, K2 = 0.03 and a
dynamic range of 1. :func:`ssim_map` is written against plain arithmetic so
the same code also runs on autodiff tensors (see ``denoiser.ssim_loss``).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import convolve

from .errors import ImageSmallerThanWindow, ShapeMismatch, ZeroReference, ZeroReferenceEnergy

WIN_SIZE = 11
WIN_SIGMA = 1.5
K1 = 0.01
K2 = 0.03

LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])

# 1-indexed frames used for per-series averages: the first five the
# 5-frame sliding window can produce
REPORT_FRAMES = (5, 6, 7, 8, 9)


def _check_pair(x, ref):
    x = np.asarray(x, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if x.shape != ref.shape:
        raise ShapeMismatch(f"shape {x.shape} != reference shape {ref.shape}")
    return x, ref


def nrmse(x, ref) -> float:
    x, ref = _check_pair(x, ref)
    denom = np.linalg.norm(ref.ravel())
    if denom == 0:
        raise ZeroReference("reference has zero norm")
    return float(np.linalg.norm((x - ref).ravel()) / denom)


def psnr(x, ref, peak: float | None = None) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    x, ref = _check_pair(x, ref)
    peak = float(ref.max()) if peak is None else float(peak)
    rmse = math.sqrt(float(np.mean((x - ref) ** 2)))
    if rmse == 0:
        return math.inf
    return 20.0 * math.log10(peak / rmse)


def gaussian_window(size: int = WIN_SIZE, sigma: float = WIN_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    return g / g.sum()


def blur_valid(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Separable 'valid' filtering over the last two axes."""
    k = window.shape[0]
    out = np.lib.stride_tricks.sliding_window_view(img, k, axis=-1) @ window
    return np.lib.stride_tricks.sliding_window_view(out, k, axis=-2) @ window


def ssim_map(x, y, blur, c1: float, c2: float):
    """Local SSIM map using only +, -, *, / and the supplied ``blur``."""
    mu_x = blur(x)
    mu_y = blur(y)
    mu_xx = mu_x * mu_x
    mu_yy = mu_y * mu_y
    mu_xy = mu_x * mu_y
    s_xx = blur(x * x) - mu_xx
    s_yy = blur(y * y) - mu_yy
    s_xy = blur(x * y) - mu_xy
    num = (mu_xy * 2.0 + c1) * (s_xy * 2.0 + c2)
    den = (mu_xx + mu_yy + c1) * (s_xx + s_yy + c2)
    return num / den


def ssim(x, ref, data_range: float = 1.0, win_size: int = WIN_SIZE, sigma: float = WIN_SIGMA,
         k1: float = K1, k2: float = K2):
    """Mean SSIM over the last two axes; a float for 2-D inputs."""
    x, ref = _check_pair(x, ref)
    if x.ndim < 2 or min(x.shape[-2:]) < win_size:
        raise ImageSmallerThanWindow(f"image {x.shape[-2:]} smaller than {win_size}x{win_size} window")
    win = gaussian_window(win_size, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    m = ssim_map(x, ref, lambda a: blur_valid(a, win), c1, c2).mean(axis=(-2, -1))
    return float(m) if np.ndim(m) == 0 else m


def laplacian_energy(img) -> float:
    img = np.asarray(img, dtype=float)
    return float(np.mean(convolve(img, LAPLACIAN, mode="reflect") ** 2))


def lape(x, ref) -> float:
    """Laplacian energy of ``x`` relative to that of ``ref`` (1.0 = as sharp as the reference)."""
    x, ref = _check_pair(x, ref)
    e_ref = laplacian_energy(ref)
    if e_ref == 0:
        raise ZeroReferenceEnergy("reference has zero Laplacian energy")
    return laplacian_energy(x) / e_ref


# ---------------------------------------------------------------------------

METRIC_NAMES = ("nrmse", "psnr_db", "ssim", "lape_ratio")


def frame_metrics(x, ref) -> dict:
    return {"nrmse": nrmse(x, ref), "psnr_db": psnr(x, ref), "ssim": ssim(x, ref), "lape_ratio": lape(x, ref)}


def _quiet_std(vals):
    with np.errstate(invalid="ignore"):
        return vals.std()


@dataclass
class MetricsReport:
    rows: list[dict] = field(default_factory=list)   # one per (series, frame)
    per_series: list[dict] = field(default_factory=list)

    def aggregate(self) -> dict:
        """Mean and population std of each metric over per-series averages."""
        out = {"n_series": len(self.per_series), "n_images": len(self.rows)}
        for name in METRIC_NAMES:
            # identical images give psnr = inf, whose spread is undefined (nan)
            vals = np.array([s[name] for s in self.per_series], dtype=float)
            out[name] = {"mean": float(vals.mean()) if vals.size else math.nan,
                         "std": float(_quiet_std(vals)) if vals.size else math.nan}
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["series_id", "frame", *METRIC_NAMES], lineterminator="\n")
        w.writeheader()
        for row in self.rows:
            w.writerow({k: (repr(float(v)) if k in METRIC_NAMES else v) for k, v in row.items()})
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(self.aggregate(), indent=2, sort_keys=True) + "\n"


def evaluate(recon, truth, series_ids=None, frames=REPORT_FRAMES, recon_offset: int = 0) -> MetricsReport:
    """Metrics over a set of series.

    Args:
        recon: [n, T', H, W] reconstructions.
        truth: [n, T, H, W] ground truth.
        frames: 1-indexed ground-truth frames to score; frames beyond the
            series or before ``recon_offset`` are skipped.
        recon_offset: number of leading ground-truth frames missing from
            ``recon`` (4 for sliding-window output).
    """
    recon = np.asarray(recon)
    truth = np.asarray(truth)
    if recon.shape[0] != truth.shape[0]:
        raise ShapeMismatch("recon and truth hold different numbers of series")
    ids = list(range(truth.shape[0])) if series_ids is None else [int(i) for i in series_ids]
    last = min(truth.shape[1], recon.shape[1] + recon_offset)
    frames = [f for f in frames if recon_offset < f <= last]
    if not frames:
        raise ShapeMismatch(f"no scoreable frames in {truth.shape[1]}-frame series with offset {recon_offset}")
    report = MetricsReport()
    for n, sid in enumerate(ids):
        vals = []
        for f in frames:
            m = frame_metrics(recon[n, f - 1 - recon_offset], truth[n, f - 1])
            report.rows.append({"series_id": sid, "frame": f, **m})
            vals.append(m)
        report.per_series.append({"series_id": sid, **{k: float(np.mean([v[k] for v in vals])) for k in METRIC_NAMES}})
    return report


@dataclass
class TransitionCurve:
    frames: list[int]        # 1-indexed ground-truth frames
    ssim: list[float]
    switch_frame: int
    pre_switch_mean: float
    first_post_switch: float
    post_switch_min: float
    recovery_frames: int     # frames after the switch until within tolerance; len(post) if never

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def transition_curve(gt, recon, switch_frame: int = 6, first_frame: int = 5, tolerance: float = 0.02) -> TransitionCurve:
    """Per-frame SSIM around a scan-plane switch.

    ``recon`` may hold every frame of ``gt`` or only the frames from
    ``first_frame`` on (sliding-window output).
    """
    gt = np.asarray(getattr(gt, "data", gt))
    recon = np.asarray(getattr(recon, "data", recon))
    offset = gt.shape[0] - recon.shape[0]
    if offset not in (0, first_frame - 1):
        raise ShapeMismatch(f"recon has {recon.shape[0]} frames for {gt.shape[0]} ground-truth frames")
    frames = list(range(first_frame, gt.shape[0] + 1))
    values = [ssim(recon[f - 1 - offset], gt[f - 1]) for f in frames]
    pre = [v for f, v in zip(frames, values) if f < switch_frame]
    post = [v for f, v in zip(frames, values) if f >= switch_frame]
    pre_mean = float(np.mean(pre)) if pre else math.nan
    recovery = len(post)
    for i, v in enumerate(post):
        if v >= pre_mean - tolerance:
            recovery = i
            break
    return TransitionCurve(frames, [float(v) for v in values], switch_frame, pre_mean,
                           float(post[0]) if post else math.nan, float(min(post)) if post else math.nan, recovery)
