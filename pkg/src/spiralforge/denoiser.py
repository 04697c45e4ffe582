"""Sliding-window two-layer denoiser with an SSIM loss and resumable training.

Five consecutive gridded frames map to an estimate of the fifth (latest)
clean frame. Three first-layer blocks with one shared weight set see frame
triplets (1,2,3), (2,3,4), (3,4,5); a second-layer block fuses their three
outputs. Each block is a small encoder-decoder with two stride-2 stages,
skip connections concatenated after upsampling, no normalization layers and
no global residual. The original additive skips and residual are available
behind ``add_skip`` and ``residual`` for ablations.
"""

from __future__ import annotations

import io
import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import metrics, tensorio
from .errors import (BadWindowLength, EmptySplit, FormatError, ImageSmallerThanWindow, IndivisibleDims,
                     NonFiniteLoss, SeriesTooShort, ShapeMismatch)
from .series import ImageSeries

WINDOW = 5
TRIPLETS = ((0, 1, 2), (1, 2, 3), (2, 3, 4))
CHECKPOINT_MAGIC = b"SFCK"
CHECKPOINT_VERSION = 1
DEFAULT_WIDTHS = (16, 32, 64)
# outputs start near mid-grey: with a negative-mean start the SSIM luminance
# term pushes the wrong way and training can stall
OUTPUT_BIAS_INIT = 0.25


def block_layout(widths, add_skip: bool = False) -> list[tuple[str, int, int, int]]:
    """(name, in channels, out channels, stride) of every conv in one block."""
    c1, c2, c3 = widths
    m = 1 if add_skip else 2
    return [
        ("inc_a", 3, c1, 1), ("inc_b", c1, c1, 1),
        ("down1_a", c1, c2, 2), ("down1_b", c2, c2, 1),
        ("down2_a", c2, c3, 2), ("down2_b", c3, c3, 1),
        ("up2", c3, c2, 1), ("up1", m * c2, c1, 1),
        ("out_a", m * c1, c1, 1), ("out_b", c1, 1, 1),
    ]


def block_param_count(widths, add_skip: bool = False) -> int:
    return sum(9 * cin * cout + cout for _, cin, cout, _ in block_layout(widths, add_skip))


def _init_block(rng, widths, add_skip, dtype) -> dict[str, np.ndarray]:
    params = {}
    for name, cin, cout, _ in block_layout(widths, add_skip):
        params[f"{name}.w"] = (rng.standard_normal((cout, cin, 3, 3)) * math.sqrt(2.0 / (9 * cin))).astype(dtype)
        params[f"{name}.b"] = np.zeros(cout, dtype=dtype)
    params["out_b.b"][:] = OUTPUT_BIAS_INIT
    return params


@dataclass(eq=False)
class DenoiserModel:
    block1: dict[str, np.ndarray]
    block2: dict[str, np.ndarray]
    widths: tuple[int, int, int] = DEFAULT_WIDTHS
    residual: bool = False
    add_skip: bool = False
    format_version: int = CHECKPOINT_VERSION

    @classmethod
    def init(cls, seed: int = 0, widths=DEFAULT_WIDTHS, residual: bool = False, add_skip: bool = False,
             dtype=np.float32) -> "DenoiserModel":
        rng = np.random.default_rng(seed)
        widths = tuple(int(w) for w in widths)
        return cls(_init_block(rng, widths, add_skip, dtype), _init_block(rng, widths, add_skip, dtype),
                   widths, residual, add_skip)

    @property
    def dtype(self):
        return next(iter(self.block1.values())).dtype

    @property
    def param_count(self) -> int:
        return sum(a.size for a in self.block1.values()) + sum(a.size for a in self.block2.values())

    def named_params(self) -> dict[str, np.ndarray]:
        out = {f"block1.{k}": v for k, v in self.block1.items()}
        out.update({f"block2.{k}": v for k, v in self.block2.items()})
        return out

    def architecture(self) -> dict:
        return {"widths": list(self.widths), "residual": self.residual, "add_skip": self.add_skip,
                "dtype": np.dtype(self.dtype).name}

    def copy(self) -> "DenoiserModel":
        return DenoiserModel({k: v.copy() for k, v in self.block1.items()},
                             {k: v.copy() for k, v in self.block2.items()},
                             self.widths, self.residual, self.add_skip, self.format_version)

    def __call__(self, window):
        return forward(self, window)


# ---------------------------------------------------------------------------
# network

def _block(x: ad.Tensor, p: dict, widths, add_skip: bool, residual: bool) -> ad.Tensor:
    def conv(name, t, stride=1):
        return ad.conv2d(t, p[f"{name}.w"], p[f"{name}.b"], stride)

    def fuse(a, b):
        return a + b if add_skip else ad.concat([a, b], axis=-1)

    x1 = conv("inc_b", conv("inc_a", x).relu()).relu()
    x2 = conv("down1_b", conv("down1_a", x1, 2).relu()).relu()
    x3 = conv("down2_b", conv("down2_a", x2, 2).relu()).relu()
    u2 = fuse(conv("up2", ad.upsample2x(x3)).relu(), x2)
    u1 = fuse(conv("up1", ad.upsample2x(u2)).relu(), x1)
    out = conv("out_b", conv("out_a", u1).relu())
    if residual:
        out = out + x[..., 1:2]
    return out


def _as_tensors(params: dict, requires_grad: bool) -> dict:
    return {k: ad.Tensor(v, requires_grad) for k, v in params.items()}


def forward_tensor(model: DenoiserModel, windows, p1=None, p2=None) -> ad.Tensor:
    """Unclamped network output [B, H, W] for windows [B, 5, H, W].

    ``p1``/``p2`` are optional tensor views of the two weight sets so that the
    caller can read gradients back; by default the model's arrays are used
    without gradient tracking.
    """
    windows = np.asarray(windows, dtype=model.dtype)
    _check_window(windows.shape[-3:])
    bsz, _, h, w = windows.shape
    p1 = p1 if p1 is not None else _as_tensors(model.block1, False)
    p2 = p2 if p2 is not None else _as_tensors(model.block2, False)
    # triplets ordered window-major so block-1 outputs regroup per window by a reshape
    trip = np.stack([windows[:, list(t)] for t in TRIPLETS], axis=1).reshape(bsz * 3, 3, h, w)
    mid = _block(ad.Tensor(trip.transpose(0, 2, 3, 1)), p1, model.widths, model.add_skip, model.residual)
    mid = mid.reshape(bsz, 3, h, w).transpose(0, 2, 3, 1)
    out = _block(mid, p2, model.widths, model.add_skip, model.residual)
    return out.reshape(bsz, h, w)


def _check_window(shape):
    if len(shape) != 3 or shape[0] != WINDOW:
        raise BadWindowLength(f"window must be [5, H, W], got {tuple(shape)}")
    if shape[1] % 4 or shape[2] % 4:
        raise IndivisibleDims(f"H and W must be divisible by 4, got {tuple(shape[1:])}")


def forward(model: DenoiserModel, window) -> np.ndarray:
    """Estimate of the latest frame of a [5, H, W] window, clamped at 0."""
    window = np.asarray(window)
    _check_window(window.shape)
    if not np.isfinite(window).all():
        raise ValueError("window contains non-finite values")
    out = forward_tensor(model, window[None]).data[0]
    return np.maximum(out, 0).astype(np.float64)


def forward_batch(model: DenoiserModel, windows) -> np.ndarray:
    """Clamped outputs for a batch of windows [B, 5, H, W]."""
    return np.maximum(forward_tensor(model, windows).data, 0).astype(np.float64)


def sliding_window_apply(model: DenoiserModel, series) -> ImageSeries:
    """Output frame k (0-indexed) reconstructs input frame k + 4."""
    data = np.asarray(getattr(series, "data", series))
    if data.ndim != 3 or data.shape[0] < WINDOW:
        raise SeriesTooShort(f"need at least {WINDOW} frames, got shape {data.shape}")
    out = np.stack([forward(model, data[k:k + WINDOW]) for k in range(data.shape[0] - WINDOW + 1)])
    period = getattr(series, "frame_period_ms", 55.0)
    return ImageSeries(out, period, {"first_frame": WINDOW})


# ---------------------------------------------------------------------------
# loss

def _ssim_constants():
    win = metrics.gaussian_window()
    return win, (metrics.K1 * 1.0) ** 2, (metrics.K2 * 1.0) ** 2


def ssim_loss(pred, target) -> ad.Tensor:
    """1 - SSIM, averaged per frame over a batch [..., H, W]; differentiable in ``pred``."""
    pred = pred if isinstance(pred, ad.Tensor) else ad.Tensor(np.asarray(pred, dtype=float))
    target = ad.Tensor(np.asarray(getattr(target, "data", target), dtype=pred.dtype))
    if pred.shape != target.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs target {target.shape}")
    if min(pred.shape[-2:]) < metrics.WIN_SIZE:
        raise ImageSmallerThanWindow(f"image {pred.shape[-2:]} smaller than the SSIM window")
    win, c1, c2 = _ssim_constants()
    smap = metrics.ssim_map(pred, target, lambda a: ad.blur_valid(a, win), c1, c2)
    return 1.0 - smap.mean()


# ---------------------------------------------------------------------------
# data

@dataclass(eq=False)
class WindowDataset:
    """(5-frame gridded window, latest ground-truth frame) pairs.

    Args:
        gridded, truth: [n, T, H, W] frame-aligned stacks.
        targets: optional 1-indexed target frames to keep (default: every
            frame from 5 on).
    """

    gridded: np.ndarray
    truth: np.ndarray
    targets: tuple[int, ...] | None = None
    index: np.ndarray = field(init=False)

    def __post_init__(self):
        self.gridded = np.asarray(self.gridded)
        self.truth = np.asarray(self.truth)
        if self.gridded.shape != self.truth.shape or self.gridded.ndim != 4:
            raise ShapeMismatch(f"gridded {self.gridded.shape} vs truth {self.truth.shape}")
        T = self.gridded.shape[1]
        if T < WINDOW:
            raise SeriesTooShort(f"need at least {WINDOW} frames, got {T}")
        frames = [f for f in (self.targets or range(WINDOW, T + 1)) if WINDOW <= f <= T]
        self.index = np.array([(n, f) for n in range(self.gridded.shape[0]) for f in frames], dtype=int).reshape(-1, 2)

    @classmethod
    def from_pairs(cls, pairs, targets=None) -> "WindowDataset":
        return cls(pairs.gridded, pairs.truth, targets)

    def __len__(self):
        return len(self.index)

    def batch(self, rows) -> tuple[np.ndarray, np.ndarray]:
        sel = self.index[rows]
        x = np.stack([self.gridded[n, f - WINDOW:f] for n, f in sel])
        y = np.stack([self.truth[n, f - 1] for n, f in sel])
        return x, y


def validation_ssim(model: DenoiserModel, data: WindowDataset, batch: int = 16) -> float:
    """Mean SSIM of clamped outputs over every pair in ``data``."""
    if len(data) == 0:
        raise EmptySplit("validation set is empty")
    scores = []
    for s in range(0, len(data), batch):
        x, y = data.batch(np.arange(s, min(s + batch, len(data))))
        scores.extend(np.atleast_1d(metrics.ssim(forward_batch(model, x), y)))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# training

@dataclass(eq=False)
class TrainState:
    model: DenoiserModel
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    rng: np.random.Generator
    lr: float = 1e-3
    batch: int = 8
    step: int = 0
    epoch: int = 0
    best_val_ssim: float = -math.inf
    val_ssim: float = -math.inf
    loss_history: list[float] = field(default_factory=list)
    val_history: list[float] = field(default_factory=list)

    @classmethod
    def fresh(cls, model: DenoiserModel, seed: int = 0, lr: float = 1e-3, batch: int = 8) -> "TrainState":
        zeros = {k: np.zeros_like(v) for k, v in model.named_params().items()}
        return cls(model, zeros, {k: z.copy() for k, z in zeros.items()}, np.random.default_rng(seed), lr, batch)


ADAM_B1, ADAM_B2, ADAM_EPS = 0.9, 0.999, 1e-8


def _train_step(state: TrainState, x, y) -> float:
    model = state.model
    p1 = _as_tensors(model.block1, True)
    p2 = _as_tensors(model.block2, True)
    loss = ssim_loss(forward_tensor(model, x, p1, p2), y)
    value = float(loss.data)
    if not math.isfinite(value):
        raise NonFiniteLoss(f"loss is {value} at epoch {state.epoch + 1}, step {state.step + 1}")
    loss.backward()
    grads = {f"block1.{k}": t.grad for k, t in p1.items()}
    grads.update({f"block2.{k}": t.grad for k, t in p2.items()})
    if not all(np.isfinite(g).all() for g in grads.values()):
        raise NonFiniteLoss(f"non-finite gradient at epoch {state.epoch + 1}, step {state.step + 1}")
    state.step += 1
    t = state.step
    lr_t = state.lr * math.sqrt(1 - ADAM_B2**t) / (1 - ADAM_B1**t)
    params = model.named_params()
    for k, g in grads.items():
        g = g.astype(params[k].dtype, copy=False)
        m, v = state.m[k], state.v[k]
        m *= ADAM_B1
        m += (1 - ADAM_B1) * g
        v *= ADAM_B2
        v += (1 - ADAM_B2) * g * g
        params[k] -= (lr_t * m / (np.sqrt(v) + ADAM_EPS)).astype(params[k].dtype)
    return value


def train_epochs(state: TrainState, dataset: WindowDataset, n_epochs: int, hyper: dict | None = None,
                 val: WindowDataset | None = None) -> TrainState:
    """Run ``n_epochs`` of minibatch Adam on the SSIM loss, updating ``state`` in place.

    Args:
        hyper: optional overrides for ``lr`` and ``batch``.
        val: validation pairs; when given, ``val_ssim`` is recomputed after
            the last epoch.

    Raises:
        NonFiniteLoss: a loss or gradient went non-finite; the trial should
            be reported as failed.
    """
    if len(dataset) == 0:
        raise EmptySplit("training set is empty")
    if n_epochs < 1:
        raise ValueError(f"n_epochs must be >= 1, got {n_epochs}")
    hyper = hyper or {}
    state.lr = float(hyper.get("lr", state.lr))
    state.batch = int(hyper.get("batch", state.batch))
    for _ in range(n_epochs):
        order = state.rng.permutation(len(dataset))
        losses = []
        for s in range(0, len(order), state.batch):
            x, y = dataset.batch(order[s:s + state.batch])
            losses.append(_train_step(state, x, y))
        state.epoch += 1
        state.loss_history.append(float(np.mean(losses)))
    if val is not None:
        state.val_ssim = validation_ssim(state.model, val)
        state.val_history.append(state.val_ssim)
        state.best_val_ssim = max(state.best_val_ssim, state.val_ssim)
    return state


# ---------------------------------------------------------------------------
# checkpoints: magic, u32 header length, JSON header, then tensor records

def _write_blob(header: dict, arrays: list[np.ndarray]) -> bytes:
    head = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(head)))
    buf.write(head)
    for a in arrays:
        buf.write(tensorio.encode(a))
    return buf.getvalue()


def _read_blob(data: bytes) -> tuple[dict, list[np.ndarray]]:
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    (n,) = struct.unpack("<I", data[4:8])
    try:
        header = json.loads(data[8:8 + n])
    except json.JSONDecodeError as e:
        raise FormatError(f"corrupt checkpoint header: {e}") from None
    major = int(header.get("format_version", 0))
    if major != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {major}")
    return header, tensorio.decode(data[8 + n:])


def _atomic_write(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def _model_from(header: dict, tensors: dict) -> DenoiserModel:
    arch = header["architecture"]
    b1 = {k[len("block1."):]: v for k, v in tensors.items() if k.startswith("block1.")}
    b2 = {k[len("block2."):]: v for k, v in tensors.items() if k.startswith("block2.")}
    model = DenoiserModel(b1, b2, tuple(arch["widths"]), arch["residual"], arch["add_skip"])
    expected = {f"{n}.{s}" for n, *_ in block_layout(model.widths, model.add_skip) for s in "wb"}
    if set(b1) != expected or set(b2) != expected:
        raise FormatError("checkpoint weights do not match the declared architecture")
    return model


def state_bytes(state: TrainState) -> bytes:
    params = state.model.named_params()
    names = list(params)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "train_state",
        "architecture": state.model.architecture(),
        "param_count": state.model.param_count,
        "lr": state.lr, "batch": state.batch, "step": state.step, "epoch": state.epoch,
        "best_val_ssim": _num(state.best_val_ssim), "val_ssim": _num(state.val_ssim),
        "loss_history": state.loss_history, "val_history": state.val_history,
        "rng": state.rng.bit_generator.state,
        "tensors": [f"param:{n}" for n in names] + [f"m:{n}" for n in names] + [f"v:{n}" for n in names],
    }
    arrays = [params[n] for n in names] + [state.m[n] for n in names] + [state.v[n] for n in names]
    return _write_blob(header, arrays)


def state_from_bytes(data: bytes) -> TrainState:
    header, arrays = _read_blob(data)
    if header.get("kind") != "train_state":
        raise FormatError(f"expected a training checkpoint, got {header.get('kind')!r}")
    if len(arrays) != len(header["tensors"]):
        raise FormatError("checkpoint tensor count disagrees with header")
    groups = {"param": {}, "m": {}, "v": {}}
    for tag, a in zip(header["tensors"], arrays):
        kind, name = tag.split(":", 1)
        groups[kind][name] = a
    model = _model_from(header, groups["param"])
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng"]
    return TrainState(model, groups["m"], groups["v"], rng, header["lr"], header["batch"], header["step"],
                      header["epoch"], _denum(header["best_val_ssim"]), _denum(header["val_ssim"]),
                      list(header["loss_history"]), list(header["val_history"]))


def save_state(path, state: TrainState) -> None:
    _atomic_write(path, state_bytes(state))


def load_state(path) -> TrainState:
    try:
        return state_from_bytes(Path(path).read_bytes())
    except FileNotFoundError:
        raise FormatError(f"checkpoint {path} not found") from None


def save_model(path, model: DenoiserModel) -> None:
    params = model.named_params()
    header = {"format_version": CHECKPOINT_VERSION, "kind": "model", "architecture": model.architecture(),
              "param_count": model.param_count, "tensors": list(params)}
    _atomic_write(path, _write_blob(header, list(params.values())))


def load_model(path) -> DenoiserModel:
    """Load weights from either a model or a training checkpoint."""
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise FormatError(f"checkpoint {path} not found") from None
    header, arrays = _read_blob(data)
    if header.get("kind") == "train_state":
        return state_from_bytes(data).model
    return _model_from(header, dict(zip(header["tensors"], arrays)))


def _num(x: float):
    # JSON has no infinities; -inf marks "not yet evaluated"
    return None if not math.isfinite(x) else x


def _denum(x) -> float:
    return -math.inf if x is None else float(x)
