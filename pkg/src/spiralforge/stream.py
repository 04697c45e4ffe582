"""Staged acquire -> grid -> denoise -> emit pipeline with latency accounting.

In parallel mode every stage is a worker thread joined to the next by a
bounded FIFO (capacity 2), so gridding frame k overlaps denoising the window
ending at frame k-1 and the output period approaches the slowest stage's
service time. Serial mode runs the same stage functions one after another
on the calling thread.

Injected delays model a stage's service time: a stage whose own work takes
less than its injected delay sleeps for the remainder.
"""

from __future__ import annotations

import json
import queue
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import denoiser
from .errors import ConfigError, SourceStall, StageError
from .series import ImageSeries

QUEUE_CAPACITY = 2
STAGES = ("grid", "denoise", "emit")
_END = object()


@dataclass
class FramePacket:
    """One frame travelling through the pipeline.

    Either ``samples`` (multi-coil k-space [C, M]) or ``image`` (a
    pre-gridded frame, replay mode) is set. ``frame_index`` is 1-indexed.
    """

    frame_index: int
    samples: np.ndarray | None = None
    image: np.ndarray | None = None
    output: np.ndarray | None = None
    t: dict[str, float] = field(default_factory=dict)


def replay_source(series) -> Iterable[FramePacket]:
    """Packets carrying already gridded frames."""
    data = np.asarray(getattr(series, "data", series))
    for k, frame in enumerate(data):
        yield FramePacket(k + 1, image=frame)


def kspace_source(gridder, truth, coil_maps, noise_sigma: float = 0.0, seed: int = 0) -> Iterable[FramePacket]:
    """Packets carrying simulated k-space for each frame of ``truth``."""
    from .nufft import normalize_maps

    data = np.asarray(getattr(truth, "data", truth))
    maps = normalize_maps(np.asarray(getattr(coil_maps, "data", coil_maps)))
    rng = np.random.default_rng(seed) if noise_sigma else None
    for k, frame in enumerate(data):
        yield FramePacket(k + 1, samples=gridder.acquire(frame, maps, k % gridder.n_frames, noise_sigma, rng))


@dataclass
class PipelineStats:
    mode: str
    frames_in: int
    frames_out: int
    stage_ms: dict[str, dict[str, float]]
    output_period_ms: float
    end_to_end_ms: dict[str, float]
    max_in_flight: int
    injected_ms: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "mode": self.mode, "frames_in": self.frames_in, "frames_out": self.frames_out,
            "stage_ms": self.stage_ms, "output_period_ms": self.output_period_ms,
            "end_to_end_ms": self.end_to_end_ms, "max_in_flight": self.max_in_flight,
            "injected_ms": self.injected_ms,
        }


def _summary(values_ms) -> dict[str, float]:
    v = np.asarray(values_ms, dtype=float)
    if v.size == 0:
        return {"mean": 0.0, "median": 0.0, "p95": 0.0}
    return {"mean": float(v.mean()), "median": float(np.median(v)), "p95": float(np.percentile(v, 95))}


def steady_state_period(emit_times_s) -> float:
    """Mean inter-output interval in ms after a warm-up of a quarter of the run (at most 10 frames)."""
    t = np.asarray(emit_times_s, dtype=float)
    if t.size < 2:
        return 0.0
    k0 = min(10, (t.size - 1) // 4)
    return float((t[-1] - t[k0]) / (t.size - 1 - k0) * 1000.0)


class _Pipeline:
    def __init__(self, gridder, model, window, inject, sink, n_frames_hint=None):
        self.gridder = gridder
        self.model = model
        self.window = window
        self.inject = inject
        self.sink = sink
        self.buffer: deque = deque(maxlen=window)
        self.outputs: list[tuple[int, np.ndarray]] = []
        self.packets: list[FramePacket] = []
        self.in_flight = 0
        self.max_in_flight = 0
        self.lock = threading.Lock()

    def _pad(self, stage, start):
        target = self.inject.get(stage, 0.0) / 1000.0
        left = target - (time.perf_counter() - start)
        if left > 0:
            time.sleep(left)

    def admit(self, pkt: FramePacket):
        pkt.t["enqueue"] = time.perf_counter()
        with self.lock:
            self.in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self.in_flight)

    def grid(self, pkt: FramePacket):
        start = pkt.t["grid_start"] = time.perf_counter()
        try:
            if pkt.image is None:
                if self.gridder is None:
                    raise ConfigError("k-space packets need a gridder")
                pkt.image = self.gridder.reconstruct(pkt.samples, (pkt.frame_index - 1) % self.gridder.n_frames)
                pkt.samples = None
        except Exception as exc:
            raise StageError("grid", pkt.frame_index, exc) from exc
        self._pad("grid", start)
        pkt.t["grid_end"] = time.perf_counter()

    def denoise(self, pkt: FramePacket) -> bool:
        """Returns False while the window is still filling (no output for this frame)."""
        start = pkt.t["denoise_start"] = time.perf_counter()
        self.buffer.append(pkt.image)
        pkt.image = None
        if len(self.buffer) < self.window:
            pkt.t["denoise_end"] = time.perf_counter()
            with self.lock:
                self.in_flight -= 1
            return False
        try:
            pkt.output = denoiser.forward(self.model, np.stack(self.buffer))
        except Exception as exc:
            raise StageError("denoise", pkt.frame_index, exc) from exc
        self._pad("denoise", start)
        pkt.t["denoise_end"] = time.perf_counter()
        return True

    def emit(self, pkt: FramePacket):
        start = pkt.t["emit_start"] = time.perf_counter()
        try:
            if self.sink is not None:
                self.sink(pkt.frame_index, pkt.output)
        except Exception as exc:
            raise StageError("emit", pkt.frame_index, exc) from exc
        self._pad("emit", start)
        pkt.t["emit"] = time.perf_counter()
        self.outputs.append((pkt.frame_index, pkt.output))
        self.packets.append(pkt)
        with self.lock:
            self.in_flight -= 1


def _put(q: queue.Queue, item, stop: threading.Event):
    while not stop.is_set():
        try:
            q.put(item, timeout=0.05)
            return True
        except queue.Full:
            continue
    return False


def _get(q: queue.Queue, stop: threading.Event, timeout: float | None = None, stage: str = ""):
    waited = 0.0
    while not stop.is_set():
        try:
            return q.get(timeout=0.05)
        except queue.Empty:
            waited += 0.05
            if timeout is not None and waited >= timeout:
                raise SourceStall(f"no frame reached the {stage} stage within {timeout} s") from None
    return _END


def run_stream(source: Iterable, model: denoiser.DenoiserModel, gridder=None, window: int = denoiser.WINDOW,
               mode: str = "parallel", inject_grid_ms: float = 0.0, inject_denoise_ms: float = 0.0,
               inject_emit_ms: float = 0.0, sink: Callable | None = None, stall_timeout_s: float | None = 10.0,
               queue_capacity: int = QUEUE_CAPACITY) -> tuple[ImageSeries, PipelineStats]:
    """Stream frames through grid -> denoise -> emit.

    Args:
        source: iterable of :class:`FramePacket` (or raw gridded frames) in
            frame order.
        gridder: a ``nufft.Gridder``; required for k-space packets.
        mode: ``"parallel"`` (threaded stages) or ``"serial"``.
        sink: optional ``sink(frame_index, image)`` called from the emit stage.
        stall_timeout_s: longest wait for the next source frame.

    Returns:
        The denoised frames (input frames ``window``..T, in order) and timing
        statistics.

    Raises:
        SourceStall: the source produced nothing for ``stall_timeout_s``.
        StageError: a stage failed; carries the stage name and frame index.
    """
    if mode not in ("parallel", "serial"):
        raise ConfigError(f"mode must be 'parallel' or 'serial', got {mode!r}")
    if window != denoiser.WINDOW:
        raise ConfigError(f"the denoiser consumes {denoiser.WINDOW}-frame windows, got window={window}")
    inject = {"grid": float(inject_grid_ms), "denoise": float(inject_denoise_ms), "emit": float(inject_emit_ms)}
    pipe = _Pipeline(gridder, model, window, inject, sink)
    frames_in = 0

    def packets():
        for k, item in enumerate(source):
            yield item if isinstance(item, FramePacket) else FramePacket(k + 1, image=np.asarray(item))

    if mode == "serial":
        for pkt in packets():
            frames_in += 1
            pipe.admit(pkt)
            pipe.grid(pkt)
            if pipe.denoise(pkt):
                pipe.emit(pkt)
    else:
        stop = threading.Event()
        errors: list[BaseException] = []
        q_grid: queue.Queue = queue.Queue(queue_capacity)
        q_denoise: queue.Queue = queue.Queue(queue_capacity)
        q_emit: queue.Queue = queue.Queue(queue_capacity)
        counter = [0]

        def fail(exc):
            errors.append(exc)
            stop.set()

        def acquire():
            try:
                for pkt in packets():
                    pipe.admit(pkt)
                    counter[0] += 1
                    if not _put(q_grid, pkt, stop):
                        return
                _put(q_grid, _END, stop)
            except BaseException as exc:  # noqa: BLE001 - re-raised on the caller's thread
                fail(exc if isinstance(exc, StageError) else StageError("acquire", counter[0] + 1, exc))

        def grid_worker():
            try:
                while True:
                    pkt = _get(q_grid, stop, stall_timeout_s, "grid")
                    if pkt is _END:
                        _put(q_denoise, _END, stop)
                        return
                    pipe.grid(pkt)
                    if not _put(q_denoise, pkt, stop):
                        return
            except BaseException as exc:  # noqa: BLE001
                fail(exc)

        def denoise_worker():
            try:
                while True:
                    pkt = _get(q_denoise, stop)
                    if pkt is _END:
                        _put(q_emit, _END, stop)
                        return
                    if pipe.denoise(pkt) and not _put(q_emit, pkt, stop):
                        return
            except BaseException as exc:  # noqa: BLE001
                fail(exc)

        def emit_worker():
            try:
                while True:
                    pkt = _get(q_emit, stop)
                    if pkt is _END:
                        return
                    pipe.emit(pkt)
            except BaseException as exc:  # noqa: BLE001
                fail(exc)

        threads = [threading.Thread(target=f, name=f"stream-{f.__name__}", daemon=True)
                   for f in (acquire, grid_worker, denoise_worker, emit_worker)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if errors:
            raise errors[0]
        frames_in = counter[0]

    pk = pipe.packets
    stage_ms = {
        "grid": _summary([(p.t["grid_end"] - p.t["grid_start"]) * 1e3 for p in pk]),
        "denoise": _summary([(p.t["denoise_end"] - p.t["denoise_start"]) * 1e3 for p in pk]),
        "emit": _summary([(p.t["emit"] - p.t["emit_start"]) * 1e3 for p in pk]),
    }
    stats = PipelineStats(
        mode=mode, frames_in=frames_in, frames_out=len(pk), stage_ms=stage_ms,
        output_period_ms=steady_state_period([p.t["emit"] for p in pk]),
        end_to_end_ms=_summary([(p.t["emit"] - p.t["enqueue"]) * 1e3 for p in pk]),
        max_in_flight=pipe.max_in_flight, injected_ms=inject,
    )
    if pipe.outputs:
        data = np.stack([o for _, o in pipe.outputs])
    else:
        data = np.zeros((0, 1, 1))
    series = ImageSeries(data, meta={"frame_indices": [i for i, _ in pipe.outputs]})
    return series, stats


def latency_report(stats: PipelineStats) -> tuple[str, str]:
    """Human-readable table and JSON document of a run's timings."""
    lines = [f"mode: {stats.mode}   frames in/out: {stats.frames_in}/{stats.frames_out}",
             f"{'stage':<10}{'mean ms':>10}{'median':>10}{'p95':>10}{'injected':>10}"]
    for name in STAGES:
        s = stats.stage_ms[name]
        lines.append(f"{name:<10}{s['mean']:>10.2f}{s['median']:>10.2f}{s['p95']:>10.2f}{stats.injected_ms[name]:>10.1f}")
    lines.append(f"output period: {stats.output_period_ms:.2f} ms   "
                 f"end-to-end: {stats.end_to_end_ms['mean']:.2f} ms mean, {stats.end_to_end_ms['p95']:.2f} ms p95")
    return "\n".join(lines) + "\n", json.dumps(stats.to_dict(), indent=2, sort_keys=True) + "\n"
