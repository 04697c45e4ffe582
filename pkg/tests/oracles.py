"""Independent reference implementations shared by the unit and acceptance tests."""

import math
from fractions import Fraction
from math import ceil, floor

import numpy as np

from spiralforge.errors import EvaluatorFailure


def dft(image, coords):
    """Direct sum over pixels with the origin at (H//2, W//2)."""
    h, w = image.shape
    y = np.arange(h) - h // 2
    x = np.arange(w) - w // 2
    ey = np.exp(-2j * np.pi * coords[:, 0:1] * y[None, :])
    ex = np.exp(-2j * np.pi * coords[:, 1:2] * x[None, :])
    return np.einsum("my,yx,mx->m", ey, image, ex)


def max_rel(a, b):
    return np.abs(a - b).max() / np.abs(b).max()



def ssim_oracle(x, y, size=11, sigma=1.5, L=1.0):
    """Explicit loops over every window position and every pixel in it."""
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    r = np.arange(size) - (size - 1) / 2
    g1 = [math.exp(-(v * v) / (2 * sigma * sigma)) for v in r]
    s = sum(g1)
    w = [[g1[i] * g1[j] / (s * s) for j in range(size)] for i in range(size)]
    vals = []
    for i in range(x.shape[0] - size + 1):
        for j in range(x.shape[1] - size + 1):
            mx = my = 0.0
            for a in range(size):
                for b in range(size):
                    mx += w[a][b] * x[i + a, j + b]
                    my += w[a][b] * y[i + a, j + b]
            vx = vy = cxy = 0.0
            for a in range(size):
                for b in range(size):
                    dx = x[i + a, j + b] - mx
                    dy = y[i + a, j + b] - my
                    vx += w[a][b] * dx * dx
                    vy += w[a][b] * dy * dy
                    cxy += w[a][b] * dx * dy
            vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return sum(vals) / len(vals)


def schedule_oracle(R, eta):
    """Straight enumeration of the bracket formulas with exact rational arithmetic."""
    s_max = 0
    while eta ** (s_max + 1) <= R:
        s_max += 1
    out = []
    for s in range(s_max, -1, -1):
        n = ceil(Fraction((s_max + 1) * eta ** s, s + 1))
        r = Fraction(R, eta ** s)
        rungs = []
        for i in range(s + 1):
            r_i = r * eta ** i
            rungs.append((floor(Fraction(n, eta ** i)), r_i, max(1, floor(r_i + Fraction(1, 2)))))
        out.append((s, n, rungs))
    return out


def oracle_epochs(rungs):
    total, prev = 0, 0
    for n_i, _, e in rungs:
        total += n_i * (e - prev)
        prev = e
    return total


class MockEvaluator:
    """Deterministic score from the config and the cumulative epochs; JSON state."""

    def __init__(self, fail=(), stop_after=None):
        self.calls = 0
        self.epochs = 0
        self.fail = set(fail)
        self.stop_after = stop_after

    @staticmethod
    def score(cfg, epochs):
        return 1.0 - (cfg.r_inner - 0.2) ** 2 - 0.01 * (cfg.u_inner - 16) ** 2 / 16 - 1.0 / (1 + epochs)

    def __call__(self, cfg, extra, prior):
        if self.stop_after is not None and self.calls >= self.stop_after:
            raise KeyboardInterrupt
        self.calls += 1
        self.epochs += extra
        total = (prior or {"epochs": 0})["epochs"] + extra
        if round(cfg.u_inner, 6) in self.fail:
            raise EvaluatorFailure("mock failure")
        return self.score(cfg, total), {"epochs": total}


def laplacian_energy_oracle(img):
    """Mean squared 5-point Laplacian, with edges reflected so that index -1 reads index 0."""
    h, w = img.shape

    def at(i, j):
        i = -i - 1 if i < 0 else (2 * h - i - 1 if i >= h else i)
        j = -j - 1 if j < 0 else (2 * w - j - 1 if j >= w else j)
        return img[i, j]

    total = 0.0
    for i in range(h):
        for j in range(w):
            lap = at(i - 1, j) + at(i + 1, j) + at(i, j - 1) + at(i, j + 1) - 4 * at(i, j)
            total += lap * lap
    return total / (h * w)
