"""Training losses and evaluation metrics.

Chamfer distance averages each directed term over its own cloud and sums
the two.  Mode ``l1`` uses Euclidean distance, ``l2`` squared Euclidean.
Differentiable losses accept arrays or tensors shaped ``(N, 3)`` or
``(B, N, 3)`` and return a scalar tensor averaged over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ArgumentError
from .geometry import pairwise_sqdist
from .model import PathTrace
from .tensor import Tensor
from .transport import assign_auction, assign_exact


def _batched_tensor(x) -> Tensor:
    t = T.as_tensor(x)
    if t.ndim == 2:
        t = T.reshape(t, (1,) + t.shape)
    if t.ndim != 3 or t.shape[-1] != 3:
        raise ArgumentError(f"expected (N, 3) or (B, N, 3) points, got {t.shape}")
    if t.shape[1] == 0:
        raise ArgumentError("empty point cloud")
    return t


def _mode(norm: str) -> str:
    m = norm.lower()
    if m not in ("l1", "l2"):
        raise ArgumentError(f"chamfer mode must be 'l1' or 'l2', got {norm!r}")
    return m


def nearest_indices(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """For each point of ``a`` the index of its nearest ``b`` point (ties to lowest)."""
    return np.argmin(pairwise_sqdist(a, b), axis=-1)


def _directed(a: Tensor, b: Tensor, idx: np.ndarray, mode: str) -> Tensor:
    diff = a - T.batch_gather(b, idx)
    if mode == "l2":
        return T.mean(T.sum(T.square(diff), axis=-1))
    return T.mean(T.norm(diff, axis=-1))


def chamfer(x, y, norm: str = "l2") -> Tensor:
    xt, yt = _batched_tensor(x), _batched_tensor(y)
    if xt.shape[0] != yt.shape[0]:
        raise ArgumentError(f"batch sizes differ: {xt.shape[0]} vs {yt.shape[0]}")
    mode = _mode(norm)
    dt = np.result_type(xt.dtype, yt.dtype)
    d2 = pairwise_sqdist(xt.data.astype(dt, copy=False), yt.data.astype(dt, copy=False))
    return (_directed(xt, yt, np.argmin(d2, axis=2), mode)
            + _directed(yt, xt, np.argmin(d2, axis=1), mode))


def emd_loss(x, y, solver: str = "auction") -> Tensor:
    """Mean matched distance under the solver's bijection (held fixed for gradients)."""
    xt, yt = _batched_tensor(x), _batched_tensor(y)
    if xt.shape != yt.shape:
        raise ArgumentError(f"emd needs equal point counts: {xt.shape} vs {yt.shape}")
    solve = {"auction": assign_auction, "exact": assign_exact}[solver]
    xs, ys = xt.data.astype(np.float64), yt.data.astype(np.float64)
    mapping = np.stack([solve(a, b).mapping for a, b in zip(xs, ys)])
    return T.mean(T.norm(xt - T.batch_gather(yt, mapping), axis=-1))


def pmd_loss(trace: PathTrace, reduction: str = "sum") -> Tensor:
    """Sum over steps and points of displacement norms.

    ``reduction="mean"`` divides by the number of points per cloud, giving
    the mean path length per point (still averaged over the batch).
    ``"step_mean"`` further divides by the number of steps, so the term keeps
    the scale of one step's squared-distance chamfer at any K.
    """
    if reduction not in ("sum", "mean", "step_mean"):
        raise ArgumentError(f"unknown pmd reduction {reduction!r}")
    deltas = trace.deltas or [Tensor(d) for d in trace.displacements]
    total = None
    for d in deltas:
        lengths = T.norm(d if d.ndim == 3 else T.reshape(d, (1,) + d.shape), axis=-1)  # (B, N)
        term = T.sum(lengths, axis=-1)
        total = term if total is None else total + term
    if total is None:
        return Tensor(0.0)
    divisor = {"sum": 1, "mean": lengths.shape[-1],
               "step_mean": lengths.shape[-1] * len(deltas)}[reduction]
    per_cloud = total if divisor == 1 else T.scale(total, 1.0 / divisor)
    return T.mean(per_cloud)


@dataclass
class LossReport:
    cd_per_step: list[float]
    emd: float
    pmd: float
    total: float
    pmd_weight: float = 1.0
    emd_weight: float = 0.0
    objective: Tensor | None = field(default=None, repr=False, compare=False)

    def recomposed(self) -> float:
        return sum(self.cd_per_step) + self.pmd_weight * self.pmd + self.emd_weight * self.emd


def total_loss(trace: PathTrace, target, pmd_weight: float = 1.0, cd_mode: str = "l2",
               emd_weight: float = 0.0, pmd_reduction: str = "step_mean") -> LossReport:
    """Chamfer of every step's cloud to the target plus weighted path length.

    ``pmd`` in the report is the path length per point and per step by
    default (see :func:`pmd_loss`); ``objective`` is the differentiable total.
    """
    clouds = trace.clouds or [Tensor(c) for c in trace.intermediates]
    tgt = _batched_tensor(target)
    cds = [chamfer(c, tgt, cd_mode) for c in clouds]
    pmd = pmd_loss(trace, reduction=pmd_reduction)
    obj = cds[0]
    for c in cds[1:]:
        obj = obj + c
    obj = obj + T.scale(pmd, pmd_weight)
    emd_val = 0.0
    if emd_weight > 0:
        emd = emd_loss(clouds[-1], tgt)
        obj = obj + T.scale(emd, emd_weight)
        emd_val = emd.item()
    cd_vals = [c.item() for c in cds]
    pmd_val = pmd.item()
    total = sum(cd_vals) + pmd_weight * pmd_val + emd_weight * emd_val
    return LossReport(cd_vals, emd_val, pmd_val, total, pmd_weight, emd_weight, obj)


# ---------------------------------------------------------------- metrics

def _cloud(x) -> np.ndarray:
    a = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3 or len(a) == 0:
        raise ArgumentError(f"expected a non-empty (N, 3) cloud, got {a.shape}")
    return a


def _directed_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(pairwise_sqdist(a[None], b[None])[0].min(axis=1))


def hausdorff(x, y) -> float:
    a, b = _cloud(x), _cloud(y)
    return float(max(_directed_dists(a, b).max(), _directed_dists(b, a).max()))


def fidelity_mmd(partial, output, ground_truth) -> tuple[float, float]:
    """Mean distance from partial-input points to the output, and output-to-truth CD-L2."""
    p, o, g = _cloud(partial), _cloud(output), _cloud(ground_truth)
    fidelity = float(_directed_dists(p, o).mean())
    return fidelity, chamfer(o, g, "l2").item()
