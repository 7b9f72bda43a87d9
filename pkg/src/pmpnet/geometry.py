"""Spatial kernels for hierarchical point processing.

All functions accept a single cloud ``(N, 3)`` or a batch ``(B, N, 3)``
and return index/weight tables with the matching leading shape.  Distances
are brute force; clouds at desk scale are a few thousand points at most.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ArgumentError


def _batched(points) -> tuple[np.ndarray, bool]:
    arr = np.asarray(points)
    if arr.dtype != np.float32:
        arr = arr.astype(np.float64, copy=False)
    if arr.ndim == 2:
        return arr[None], True
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ArgumentError(f"expected (N, 3) or (B, N, 3) points, got shape {arr.shape}")
    return arr, False


def _unbatch(arr: np.ndarray, single: bool) -> np.ndarray:
    return arr[0] if single else arr


def pairwise_sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared distances ``(B, P, Q)`` by explicit differences, summed x, y, z in order."""
    # coordinate-major copies keep every pass over the output contiguous
    at = np.ascontiguousarray(np.moveaxis(a, -1, 0))
    bt = np.ascontiguousarray(np.moveaxis(b, -1, 0))
    out = np.empty(a.shape[:2] + b.shape[1:2], dtype=np.result_type(a, b))
    tmp = np.empty_like(out)
    np.subtract(at[0][:, :, None], bt[0][:, None, :], out=out)
    np.multiply(out, out, out=out)
    for c in range(1, at.shape[0]):
        np.subtract(at[c][:, :, None], bt[c][:, None, :], out=tmp)
        np.multiply(tmp, tmp, out=tmp)
        out += tmp
    return out


def sub_sqdist(sqdist: np.ndarray, rows: np.ndarray | None, cols: np.ndarray | None) -> np.ndarray:
    """Select rows/columns of a batched distance table ``(B, P, Q)`` per batch item."""
    b = np.arange(sqdist.shape[0])
    if rows is None:
        return sqdist[b[:, None, None], np.arange(sqdist.shape[1])[None, :, None], cols[:, None, :]]
    if cols is None:
        return sqdist[b[:, None], rows]
    return sqdist[b[:, None, None], rows[:, :, None], cols[:, None, :]]


def _check_table(sqdist, shape: tuple[int, int, int], name: str) -> np.ndarray:
    table = np.asarray(sqdist)
    if table.shape != shape:
        raise ArgumentError(f"{name}: distance table {table.shape} does not match {shape}")
    return table


def farthest_point_sample(cloud, m: int, sqdist: np.ndarray | None = None) -> np.ndarray:
    """Greedy max-min sampling of ``m`` indices.

    The first pick is the lexicographically smallest point; later picks
    maximise the distance to the chosen set, ties to the lowest index.
    ``sqdist`` optionally supplies the cloud's own ``(B, N, N)`` distance table.
    """
    pts, single = _batched(cloud)
    bsz, n, _ = pts.shape
    if not 1 <= m <= n:
        raise ArgumentError(f"farthest_point_sample: need 1 <= m <= N, got m={m}, N={n}")
    if sqdist is not None:
        table = _check_table(sqdist if sqdist.ndim == 3 else sqdist[None], (bsz, n, n),
                             "farthest_point_sample")
        row = lambda idx: table[rows, idx]  # noqa: E731
    else:
        row = lambda idx: pairwise_sqdist(pts[rows, idx][:, None, :], pts)[:, 0]  # noqa: E731
    out = np.empty((bsz, m), dtype=np.int64)
    rows = np.arange(bsz)
    # lexsort keys are given last-primary
    first = np.array([np.lexsort((p[:, 2], p[:, 1], p[:, 0]))[0] for p in pts])
    out[:, 0] = first
    mind = row(first)
    for j in range(1, m):
        nxt = np.argmax(mind, axis=1)
        out[:, j] = nxt
        mind = np.minimum(mind, row(nxt))
    return _unbatch(out, single)


@dataclass(frozen=True)
class NeighborList:
    """Ball-query result.

    ``neighbor_indices`` is ``(..., M, S)``; slots beyond
    ``within_radius_counts`` repeat the first valid neighbour.
    """

    center_indices: np.ndarray | None
    neighbor_indices: np.ndarray
    within_radius_counts: np.ndarray


def ball_query(cloud, centers, radius: float, nsample: int,
               center_indices: np.ndarray | None = None,
               sqdist: np.ndarray | None = None) -> NeighborList:
    """Up to ``nsample`` points within ``radius`` of each center, in index order.

    Short lists are padded with their first member; a center with no point
    in range falls back to its single nearest point.  ``sqdist`` optionally
    supplies the ``(B, M, N)`` center-to-point distance table.
    """
    pts, single = _batched(cloud)
    ctr, _ = _batched(centers)
    ctr = ctr.astype(pts.dtype, copy=False)
    if pts.shape[1] == 0:
        raise ArgumentError("ball_query: empty cloud")
    if radius <= 0 or nsample < 1:
        raise ArgumentError(f"ball_query: need radius > 0 and nsample >= 1, got {radius}, {nsample}")
    if sqdist is None:
        d2 = pairwise_sqdist(ctr, pts)
    else:
        d2 = _check_table(sqdist if sqdist.ndim == 3 else sqdist[None],
                          ctr.shape[:2] + pts.shape[1:2], "ball_query")
    inside = d2 <= radius * radius
    counts = inside.sum(axis=-1)
    # rank of each in-range point among its center's in-range points, in index order
    rank = np.cumsum(inside, axis=-1) - 1
    take = inside & (rank < nsample)
    b, c, j = np.nonzero(take)
    idx = np.zeros(ctr.shape[:2] + (nsample,), dtype=np.int64)
    idx[b, c, rank[b, c, j]] = j
    valid = np.minimum(counts, nsample)
    first = np.where(counts > 0, idx[..., 0], np.argmin(d2, axis=-1))
    idx = np.where(np.arange(nsample) < valid[..., None], idx, first[..., None])
    return NeighborList(
        center_indices=center_indices,
        neighbor_indices=_unbatch(idx, single),
        within_radius_counts=_unbatch(valid, single),
    )


def knn(cloud, queries, k: int, sqdist: np.ndarray | None = None) -> np.ndarray:
    """Indices of the ``k`` nearest points per query, ascending, ties to lowest index."""
    pts, single = _batched(cloud)
    qs, _ = _batched(queries)
    qs = qs.astype(pts.dtype, copy=False)
    if not 1 <= k <= pts.shape[1]:
        raise ArgumentError(f"knn: need 1 <= k <= N, got k={k}, N={pts.shape[1]}")
    if sqdist is None:
        d2 = pairwise_sqdist(qs, pts)
    else:
        d2 = _check_table(sqdist if sqdist.ndim == 3 else sqdist[None],
                          qs.shape[:2] + pts.shape[1:2], "knn")
    idx = np.argsort(d2, axis=-1, kind="stable")[..., :k]
    return _unbatch(idx, single)


@dataclass(frozen=True)
class InterpolationWeights:
    source_indices: np.ndarray  # (..., Q, 3)
    weights: np.ndarray  # (..., Q, 3), rows sum to 1


def interpolation_weights(sources, queries, sqdist: np.ndarray | None = None) -> InterpolationWeights:
    """Inverse-distance weights over the 3 nearest sources of each query.

    ``sqdist`` optionally supplies the ``(B, Q, S)`` query-to-source table.
    """
    src, single = _batched(sources)
    qs, _ = _batched(queries)
    if src.shape[1] < 3:
        raise ArgumentError(f"interpolation_weights: need at least 3 sources, got {src.shape[1]}")
    if sqdist is None:
        d2 = pairwise_sqdist(qs, src.astype(qs.dtype, copy=False))
    else:
        d2 = _check_table(sqdist if sqdist.ndim == 3 else sqdist[None],
                          qs.shape[:2] + src.shape[1:2], "interpolation_weights")
    # three argmin passes: ascending, ties to the lowest index, cheaper than a sort
    work = d2.copy()
    picks = []
    for _ in range(3):
        j = np.argmin(work, axis=-1)[..., None]
        picks.append(j)
        np.put_along_axis(work, j, np.inf, axis=-1)
    idx = np.concatenate(picks, axis=-1)
    d = np.sqrt(np.take_along_axis(d2, idx, axis=-1).astype(np.float64))
    inv = 1.0 / np.maximum(d, 1e-10)
    w = inv / inv.sum(axis=-1, keepdims=True)
    return InterpolationWeights(_unbatch(idx, single), _unbatch(w, single))


def interpolate_features(weights: InterpolationWeights, features) -> T.Tensor:
    """Weighted sum of the 3 source rows per query, differentiable in ``features``.

    ``features`` is ``(N, C)`` or ``(B, N, C)`` matching the weight table.
    """
    feats = T.as_tensor(features)
    idx, w = weights.source_indices, weights.weights
    if feats.ndim == 2:
        picked = T.gather(feats, idx)  # (Q, 3, C)
    else:
        picked = T.batch_gather(feats, idx)  # (B, Q, 3, C)
    wt = T.Tensor(w[..., None].astype(feats.dtype))
    return T.sum(picked * wt, axis=-2)


def take_points(points: np.ndarray, indices: np.ndarray) -> np.ndarray:
    """Batched fancy indexing of coordinates: ``(B, N, 3)`` by ``(B, ...)``."""
    bsz = points.shape[0]
    offsets = (np.arange(bsz) * points.shape[1]).reshape((bsz,) + (1,) * (indices.ndim - 1))
    flat = points.reshape(-1, points.shape[-1])
    return flat[indices + offsets]
