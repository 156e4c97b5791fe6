"""Pure numpy implementations of the quadratic geometry kernels.

These are the reference semantics; the compiled backend must match them
bit-for-bit (including lowest-index tie breaking).
"""

import numpy as np

BACKEND = "numpy"


def pairwise_sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = a[:, None, :] - b[None, :, :]
    # left-to-right sum over the 3 coordinates: matches the compiled loop
    # bit-for-bit, unlike einsum's fused accumulation
    d = diff[..., 0] * diff[..., 0]
    for c in range(1, diff.shape[-1]):
        d = d + diff[..., c] * diff[..., c]
    return d


def nearest_neighbor(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Index of the nearest row of ``b`` for each row of ``a`` (ties: lowest)."""
    return np.argmin(pairwise_sqdist(a, b), axis=1)


def knn_indices(points: np.ndarray, k: int) -> np.ndarray:
    """Exact kNN by squared distance, self excluded, ties by lowest index."""
    points = np.asarray(points, dtype=np.float64)
    m = points.shape[0]
    if not 1 <= k <= m - 1:
        raise ValueError(f"knn_indices: need 1 <= k <= m-1, got k={k}, m={m}")
    d = pairwise_sqdist(points, points)
    np.fill_diagonal(d, np.inf)
    order = np.argsort(d, axis=1, kind="stable")
    return order[:, :k].astype(np.int64)


def fps_indices(points: np.ndarray, n: int, start: int) -> np.ndarray:
    """Greedy farthest point sampling starting from ``start`` (ties: lowest)."""
    points = np.asarray(points, dtype=np.float64)
    m = points.shape[0]
    if not 1 <= n <= m:
        raise ValueError(f"fps_indices: need 1 <= n <= m, got n={n}, m={m}")
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = start
    mindist = np.einsum("ij,ij->i", points - points[start], points - points[start])
    mindist[start] = -np.inf
    for t in range(1, n):
        nxt = int(np.argmax(mindist))
        chosen[t] = nxt
        d = np.einsum("ij,ij->i", points - points[nxt], points - points[nxt])
        np.minimum(mindist, d, out=mindist)
        mindist[nxt] = -np.inf
    return chosen
