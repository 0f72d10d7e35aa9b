"""Procedurally generated training/eval images.

A desk-scale stand-in for a natural-image corpus: smooth gradients,
checkerboards, filtered noise, random rectangles, and sinusoid gratings,
mixed so that the set contains both flat regions and high-frequency detail.
"""

from __future__ import annotations

import numpy as np


def _gradient(rng: np.random.Generator, n: int) -> np.ndarray:
    y, x = np.mgrid[0:n, 0:n] / max(n - 1, 1)
    a, b = rng.uniform(-1, 1, 2)
    field = a * x + b * y
    field = (field - field.min()) / max(np.ptp(field), 1e-9)
    lo = rng.uniform(0, 0.4, 3)
    hi = rng.uniform(0.6, 1.0, 3)
    return lo + field[..., None] * (hi - lo)


def _checkerboard(rng: np.random.Generator, n: int) -> np.ndarray:
    period = int(rng.integers(2, 9))
    py, px = rng.integers(0, period, 2)
    y, x = np.mgrid[0:n, 0:n]
    mask = (((y + py) // period + (x + px) // period) % 2).astype(np.float64)
    c0 = rng.uniform(0, 0.5, 3)
    c1 = rng.uniform(0.5, 1.0, 3)
    return c0 + mask[..., None] * (c1 - c0)


def _filtered_noise(rng: np.random.Generator, n: int) -> np.ndarray:
    z = rng.random((n, n, 3))
    passes = int(rng.integers(1, 4))
    for _ in range(passes):
        z = (z + np.roll(z, 1, 0) + np.roll(z, -1, 0) + np.roll(z, 1, 1) + np.roll(z, -1, 1)) / 5.0
    z = (z - z.min()) / max(np.ptp(z), 1e-9)
    return z


def _rectangles(rng: np.random.Generator, n: int) -> np.ndarray:
    img = np.full((n, n, 3), rng.uniform(0.2, 0.8))
    for _ in range(int(rng.integers(3, 8))):
        y0, y1 = sorted(rng.integers(0, n, 2))
        x0, x1 = sorted(rng.integers(0, n, 2))
        img[y0 : y1 + 1, x0 : x1 + 1] = rng.uniform(0, 1, 3)
    return img


def _grating(rng: np.random.Generator, n: int) -> np.ndarray:
    y, x = np.mgrid[0:n, 0:n]
    freq = rng.uniform(0.05, 0.45)
    theta = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    wave = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (np.cos(theta) * x + np.sin(theta) * y) + phase)
    tint = rng.uniform(0.3, 1.0, 3)
    return wave[..., None] * tint


_GENERATORS = (_gradient, _checkerboard, _filtered_noise, _rectangles, _grating)
_DETAIL_GENERATORS = (_checkerboard, _rectangles, _grating)


def make_image(rng: np.random.Generator, size: int, profile: str = "mixed") -> np.ndarray:
    if profile == "detail":
        # high-frequency content: sharp patterns plus a pixel-noise layer,
        # so smoothing operators change the image substantially
        img = _DETAIL_GENERATORS[rng.integers(len(_DETAIL_GENERATORS))](rng, size)
        img = 0.7 * img + 0.3 * rng.random((size, size, 3))
    else:
        gen = _GENERATORS[rng.integers(len(_GENERATORS))]
        img = gen(rng, size)
        if rng.random() < 0.5:  # overlay a second layer for mixed content
            img = 0.6 * img + 0.4 * _GENERATORS[rng.integers(len(_GENERATORS))](rng, size)
    return np.clip(img, 0.0, 1.0)


def make_corpus(count: int, size: int, seed: int = 0, profile: str = "mixed") -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [make_image(rng, size, profile) for _ in range(count)]
