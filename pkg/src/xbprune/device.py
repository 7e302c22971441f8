"""Conductance quantization and device-variation noise on stored weights."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .conv import forward
from .model_io import NetworkSpec
from .seeding import rng_for


def _finite_levels(levels) -> bool:
    return levels is not None and not (isinstance(levels, float) and math.isinf(levels))


def quantize(weights: np.ndarray, levels) -> np.ndarray:
    """Snap weights to a uniform grid of ``levels`` points spanning their own min and max.

    Ties go to the lower grid point.  ``levels=None`` or ``inf`` returns the weights unchanged.
    """
    w = np.asarray(weights, dtype=np.float64)
    if not _finite_levels(levels):
        return w.copy()
    levels = int(levels)
    if levels < 2:
        raise ValueError(f"levels must be >= 2, got {levels}")
    lo, hi = float(w.min()), float(w.max())
    if lo == hi:
        return w.copy()
    grid = np.linspace(lo, hi, levels)
    step = (hi - lo) / (levels - 1)
    k = np.ceil((w - lo) / step - 0.5).astype(np.int64)
    return grid[np.clip(k, 0, levels - 1)]


def perturb(weights: np.ndarray, sigma: float, rng) -> np.ndarray:
    """Multiplicative log-normal variation ``w * exp(theta)``, ``theta ~ N(0, sigma^2)`` per weight."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    w = np.asarray(weights, dtype=np.float64)
    if sigma == 0:
        return w.copy()
    theta = np.random.default_rng(rng).normal(0.0, sigma, size=w.shape)
    return w * np.exp(theta)


@dataclass
class NoiseGrid:
    sigmas: list
    levels: list  # None means unquantized
    accuracy: np.ndarray  # [len(sigmas), len(levels)] mean over trials
    clean_accuracy: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["sigma"] + [f"levels={'inf' if lv is None else lv}" for lv in self.levels])
        for s, row in zip(self.sigmas, self.accuracy):
            writer.writerow([repr(float(s))] + [repr(float(a)) for a in row])
        return buf.getvalue()


def noise_sweep(net: NetworkSpec, weights: dict, inputs: np.ndarray, labels: np.ndarray, sigmas,
                levels_list, trials: int = 10, seed: int = 0) -> NoiseGrid:
    """Mean accuracy over ``trials`` noisy copies of the network for every (sigma, levels) cell.

    Weights are quantized per layer first, then perturbed.  Trial ``t`` uses the
    same standard-normal draws in every cell (scaled by sigma), which keeps the
    comparison across cells free of sampling noise.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    levels_list = [None if not _finite_levels(lv) else int(lv) for lv in levels_list]
    sigmas = [float(s) for s in sigmas]
    clean = forward(net, weights, inputs, labels=labels)[1]
    acc = np.zeros((len(sigmas), len(levels_list)))
    for b, levels in enumerate(levels_list):
        q = {name: quantize(w, levels) for name, w in weights.items()}
        for t in range(trials):
            z = {name: rng_for(seed, name, t, "variation").standard_normal(w.shape) for name, w in q.items()}
            for a, sigma in enumerate(sigmas):
                if sigma == 0:
                    noisy = q
                else:
                    noisy = {name: w * np.exp(sigma * z[name]) for name, w in q.items()}
                acc[a, b] += forward(net, noisy, inputs, labels=labels)[1]
    acc /= trials
    return NoiseGrid(sigmas=sigmas, levels=levels_list, accuracy=acc, clean_accuracy=clean)
