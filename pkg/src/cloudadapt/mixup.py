"""Point cloud mixup: FPS subsets of two clouds unioned into one sample,
with a convex-combination soft label."""

from __future__ import annotations

from dataclasses import dataclass
from math import log, sqrt

import numpy as np

from .geometry import as_cloud, farthest_point_sample


@dataclass
class MixedSample:
    cloud: np.ndarray      # (M, 3)
    soft_label: np.ndarray  # (C,), sums to 1, at most 2 nonzero entries
    gamma: float


def _marsaglia_tsang_gamma(shape: float, rng: np.random.Generator) -> float:
    """One Gamma(shape, 1) draw; shapes < 1 are boosted via Gamma(shape+1)."""
    if shape < 1.0:
        u = rng.random()
        while u <= 0.0:
            u = rng.random()
        return _marsaglia_tsang_gamma(shape + 1.0, rng) * u ** (1.0 / shape)
    d = shape - 1.0 / 3.0
    c = 1.0 / sqrt(9.0 * d)
    while True:
        x = rng.standard_normal()
        v = 1.0 + c * x
        if v <= 0.0:
            continue
        v = v * v * v
        u = rng.random()
        x2 = x * x
        if u < 1.0 - 0.0331 * x2 * x2:
            return d * v
        if u > 0.0 and log(u) < 0.5 * x2 + d * (1.0 - v + log(v)):
            return d * v


def sample_gamma(alpha: float, seed=None, rng=None) -> float:
    """One Beta(alpha, alpha) draw via two Gamma draws."""
    if alpha <= 0:
        raise ValueError("sample_gamma: alpha must be positive")
    if rng is None:
        rng = np.random.default_rng(seed)
    g1 = _marsaglia_tsang_gamma(alpha, rng)
    g2 = _marsaglia_tsang_gamma(alpha, rng)
    if g1 + g2 == 0.0:
        return 0.5
    return g1 / (g1 + g2)


def pointmixup(xi, yi: int, xj, yj: int, gamma: float, num_classes: int,
               seed=None) -> MixedSample:
    """Mix two M-point clouds: round((1-gamma)*M) FPS points from xi plus the
    complement count from xj, and a soft label (1-gamma)*onehot(yi) + gamma*onehot(yj)."""
    xi, xj = as_cloud(xi), as_cloud(xj)
    m = xi.shape[0]
    if xj.shape[0] != m:
        raise ValueError(f"pointmixup: cloud sizes differ ({m} vs {xj.shape[0]})")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"pointmixup: gamma must be in [0, 1], got {gamma}")
    ni = int(round((1.0 - gamma) * m))
    nj = m - ni

    rng = np.random.default_rng(seed)
    parts = []
    if ni > 0:
        si = int(rng.integers(m))
        parts.append(xi[farthest_point_sample(xi, ni, start=si)])
    if nj > 0:
        sj = int(rng.integers(m))
        parts.append(xj[farthest_point_sample(xj, nj, start=sj)])
    cloud = np.concatenate(parts, axis=0)

    soft = np.zeros(num_classes)
    soft[yi] += 1.0 - gamma
    soft[yj] += gamma
    return MixedSample(cloud=cloud, soft_label=soft, gamma=float(gamma))
