from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidDims


@dataclass(eq=False)
class ImageSeries:
    """Real dynamic image stack [T, H, W].

    Ground-truth series live in [0, 1] with max 1; gridded series are clipped
    at 0 but may exceed 1 slightly through ringing.
    """

    data: np.ndarray
    frame_period_ms: float = 55.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise InvalidDims(f"ImageSeries needs [T, H, W], got shape {self.data.shape}")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]

    def check_ground_truth(self, min_frames: int = 5) -> "ImageSeries":
        d = self.data
        if d.shape[0] < min_frames:
            raise InvalidDims(f"series has {d.shape[0]} frames, need >= {min_frames}")
        if d.min() < 0 or d.max() > 1 or not np.isfinite(d).all():
            raise InvalidDims("ground-truth series must be finite and lie in [0, 1]")
        return self

    def __len__(self):
        return self.n_frames
