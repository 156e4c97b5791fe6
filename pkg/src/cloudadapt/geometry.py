"""Point cloud geometry: FPS, kNN graphs, Chamfer distance, preprocessing.

Clouds are plain (m, 3) float64 arrays. Chamfer distance is differentiable
through the autodiff core when handed Tensors; everything else is pure
numpy on top of the kernels backend.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import kernels


def as_cloud(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"point cloud must be (m, 3), got {pts.shape}")
    if pts.shape[0] < 1:
        raise ValueError("point cloud must contain at least one point")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point cloud contains non-finite coordinates")
    return pts


def farthest_point_sample(cloud, n: int, seed=None, start: int | None = None) -> np.ndarray:
    """Greedy FPS indices. First pick is seeded-random unless ``start`` is given."""
    pts = as_cloud(cloud)
    m = pts.shape[0]
    if not 1 <= n <= m:
        raise ValueError(f"farthest_point_sample: need 1 <= n <= m, got n={n}, m={m}")
    if start is None:
        rng = np.random.default_rng(seed)
        start = int(rng.integers(m))
    return kernels.fps_indices(pts, n, start)


def knn_graph(cloud, k: int) -> np.ndarray:
    """(m, k) neighbor indices, ascending by squared distance, self excluded."""
    pts = np.asarray(cloud, dtype=np.float64)
    return kernels.knn_indices(pts, k)


def chamfer_distance(a, b):
    """Two-sided sum of squared nearest-neighbor distances.

    Accepts Tensors or arrays; returns a scalar Tensor that is differentiable
    w.r.t. any Tensor input. Nearest-neighbor matches are computed on the
    forward values and treated as constant during backward.
    """
    ta = a if isinstance(a, ad.Tensor) else ad.Tensor(as_cloud(a))
    tb = b if isinstance(b, ad.Tensor) else ad.Tensor(as_cloud(b))
    av, bv = ta.data, tb.data
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != 3 or bv.shape[1] != 3:
        raise ValueError(f"chamfer_distance: expected (m, 3) inputs, got {av.shape} and {bv.shape}")
    if av.shape[0] == 0 or bv.shape[0] == 0:
        raise ValueError("chamfer_distance: empty cloud")
    ab = kernels.nearest_neighbor(av, bv)
    ba = kernels.nearest_neighbor(bv, av)

    def side(tx, ty, match, xv, yv):
        # Per-point squared-residual rows, summed in ascending-contribution
        # order so the value is independent of input point ordering.
        terms = ad.square(ad.sub(tx, ad.gather_rows(ty, match)))
        key = np.sum((xv - yv[match]) ** 2, axis=1)
        order = np.argsort(key, kind="stable")
        return ad.reduce_sum(ad.gather_rows(terms, order))

    fwd = side(ta, tb, ab, av, bv)
    bwd = side(tb, ta, ba, bv, av)
    return ad.add(fwd, bwd)


def jitter(cloud, sigma: float, clip: float, seed=None, rng=None) -> np.ndarray:
    """Per-coordinate Gaussian noise, clamped to [-clip, clip]."""
    pts = as_cloud(cloud)
    if sigma <= 0 or clip <= 0:
        raise ValueError("jitter: sigma and clip must be positive")
    if rng is None:
        rng = np.random.default_rng(seed)
    noise = np.clip(rng.normal(0.0, sigma, size=pts.shape), -clip, clip)
    return pts + noise


_AXES = {"X": 0, "Y": 1, "Z": 2}


def rotation_matrix(axis: str, degrees: float) -> np.ndarray:
    """Right-handed rotation (counterclockwise viewed from the positive axis)."""
    i = _AXES[axis.upper()]
    theta = np.deg2rad(float(degrees))
    c, s = np.cos(theta), np.sin(theta)
    j, k = (i + 1) % 3, (i + 2) % 3
    rot = np.eye(3)
    rot[j, j] = c
    rot[j, k] = -s
    rot[k, j] = s
    rot[k, k] = c
    return rot


def align_rotate(cloud, axis: str, degrees: float) -> np.ndarray:
    pts = as_cloud(cloud)
    if not np.isfinite(degrees):
        raise ValueError("align_rotate: angle must be finite")
    return pts @ rotation_matrix(axis, degrees).T


def normalize_unit_sphere(cloud) -> np.ndarray:
    """Center at the origin and scale so the farthest point sits at norm 1."""
    pts = as_cloud(cloud)
    centered = pts - pts.mean(axis=0)
    r = float(np.max(np.linalg.norm(centered, axis=1)))
    if r <= 1e-12:
        return centered
    return centered / r
