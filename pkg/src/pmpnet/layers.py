"""Network building blocks.

Shapes are batched throughout: clouds ``(B, N, 3)``, features ``(B, N, C)``.
Each block reads its weights from a :class:`ParamStore` under a name
prefix, so the same functions serve every step and level of the model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry as G
from . import tensor as T
from .errors import DimensionError
from .params import Initializer, ParamStore
from .tensor import Tensor

GATE_KINDS = ("rpa", "gru", "rnn", "lstm", "add", "none")


def scaled(width: int, channel_scale: float) -> int:
    return max(1, int(round(width * channel_scale)))


@dataclass(frozen=True)
class SALevel:
    points_out: int | None  # None: global level, pools over every point
    radius: float | None
    nsample: int | None
    mlp: tuple[int, ...]

    @property
    def is_global(self) -> bool:
        return self.points_out is None


@dataclass(frozen=True)
class EncoderConfig:
    levels: tuple[SALevel, ...]
    channel_scale: float = 1.0

    @classmethod
    def standard(cls, n_points: int = 2048, channel_scale: float = 1.0) -> "EncoderConfig":
        """Three-level encoder; sample counts follow 512/128 of 2048 inputs."""
        m1 = max(1, n_points * 512 // 2048)
        m2 = max(1, n_points * 128 // 2048)
        s = lambda ws: tuple(scaled(w, channel_scale) for w in ws)  # noqa: E731
        return cls(
            levels=(
                SALevel(m1, 0.2, 32, s((64, 64, 128))),
                SALevel(m2, 0.4, 32, s((128, 128, 256))),
                SALevel(None, None, None, s((256, 512, 1024))),
            ),
            channel_scale=channel_scale,
        )


@dataclass(frozen=True)
class FPConfig:
    mlps: tuple[tuple[int, ...], ...]
    channel_scale: float = 1.0

    @classmethod
    def standard(cls, channel_scale: float = 1.0) -> "FPConfig":
        s = lambda ws: tuple(scaled(w, channel_scale) for w in ws)  # noqa: E731
        return cls(mlps=(s((256, 256)), s((256, 128)), s((128, 128, 128))),
                   channel_scale=channel_scale)


@dataclass(frozen=True)
class TransformerConfig:
    neighborhood_k: int = 16
    attention_hidden: int | None = None  # None: same as feature width
    pos_mlp_hidden: int = 64


@dataclass(frozen=True)
class HeadConfig:
    hidden: tuple[int, ...] = (128, 64)
    noise_dim: int = 32
    noise_stddev: float = 1.0


@dataclass
class GateState:
    """Recurrent state carried between steps at one FP level."""

    h: Tensor
    c: Tensor | None = None  # LSTM cell only
    extras: dict = field(default_factory=dict)


# ---------------------------------------------------------------- shared MLP

def mlp_forward(x: Tensor, params: ParamStore, prefix: str, depth: int,
                final_relu: bool = True, start: int = 0) -> Tensor:
    for i in range(start, depth):
        x = T.linear(x, params[f"{prefix}.{i}.w"], params[f"{prefix}.{i}.b"],
                     relu=i < depth - 1 or final_relu)
    return x


def _depth(params: ParamStore, prefix: str) -> int:
    d = 0
    while f"{prefix}.{d}.w" in params:
        d += 1
    return d


# ---------------------------------------------------------------- set abstraction

def init_sa(init: Initializer, prefix: str, in_features: int, level: SALevel) -> None:
    init.mlp(prefix, [3 + in_features, *level.mlp])


def sa_forward(xyz: Tensor, features: Tensor, level: SALevel, params: ParamStore,
               prefix: str, sqdist: np.ndarray | None = None, return_indices: bool = False):
    """One set-abstraction level.

    Returns the sampled centers ``(B, M, 3)`` and pooled features
    ``(B, M, C_out)``; the global level returns one center at the origin.
    ``sqdist`` is an optional ``(B, N, N)`` distance table of ``xyz``;
    ``return_indices`` appends the sampled center indices (None when global).
    """
    if xyz.shape[:2] != features.shape[:2]:
        raise DimensionError(f"sa_forward: cloud {xyz.shape} vs features {features.shape}")
    depth = len(level.mlp)
    bsz, n = xyz.shape[:2]
    if level.is_global:
        x = mlp_forward(T.concat([xyz, features]), params, prefix, depth)
        pooled = T.reduce_max(x, axis=1, keepdims=True)
        origin = Tensor(np.zeros((bsz, 1, 3), dtype=xyz.dtype))
        return (origin, pooled, None) if return_indices else (origin, pooled)

    coords = xyz.data
    m = min(level.points_out, n)
    centers = G.farthest_point_sample(coords, m, sqdist=sqdist)
    table = None if sqdist is None else G.sub_sqdist(sqdist, centers, None)
    nl = G.ball_query(coords, G.take_points(coords, centers), level.radius,
                      level.nsample, sqdist=table)
    new_xyz = T.batch_gather(xyz, centers)
    # Padding slots repeat a group's first member, and repeats cannot change a
    # max-pool, so the MLP runs on the distinct (center, neighbour) pairs only.
    counts = np.maximum(nl.within_radius_counts, 1).ravel()
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    group = np.repeat(np.arange(bsz * m), counts)
    slot = np.arange(group.size) - starts[group]
    src = nl.neighbor_indices.reshape(bsz * m, -1)[group, slot] + (group // m) * n
    # The first layer acts on [p_j - c : f_j]; being linear, it is applied to the
    # N source points once and gathered, instead of to every pair.
    w0, b0 = params[f"{prefix}.0.w"], params[f"{prefix}.0.b"]
    hidden = w0.shape[1]
    per_point = T.reshape(T.linear(T.concat([xyz, features]), w0), (bsz * n, hidden))
    pad = Tensor(np.zeros((bsz, m, features.shape[-1]), dtype=features.dtype))
    # the bias joins the small per-center term rather than the pair tensor
    per_center = T.reshape(T.linear(T.concat([new_xyz, pad]), w0) - b0, (bsz * m, hidden))
    x = T.relu(T.gather(per_point, src) - T.gather(per_center, group))
    x = mlp_forward(x, params, prefix, depth, start=1)
    # pooling table in the padded layout: empty slots point back at the group's first pair
    slots = np.arange(level.nsample)
    pool_rows = starts[:, None] + np.where(slots < counts[:, None], slots, 0)
    pooled = T.reshape(T.grouped_max(x, pool_rows), (bsz, m, x.shape[-1]))
    return (new_xyz, pooled, centers) if return_indices else (new_xyz, pooled)


# ---------------------------------------------------------------- transformer

def init_transformer(init: Initializer, prefix: str, width: int, cfg: TransformerConfig) -> None:
    hidden = cfg.attention_hidden or width
    for name in ("query", "key", "value"):
        init.linear(f"{prefix}.{name}", width, width, gain=1.0)
    init.mlp(f"{prefix}.pos", [3, cfg.pos_mlp_hidden, width], final_gain=1.0)
    init.mlp(f"{prefix}.attn", [width, hidden, width], final_gain=1.0)


def transformer_forward(xyz: Tensor, features: Tensor, cfg: TransformerConfig,
                        params: ParamStore, prefix: str, return_attention: bool = False,
                        sqdist: np.ndarray | None = None):
    """Vector self-attention over each point's k nearest neighbours.

    relation_ij = query(x_i) - key(x_j) + pos(p_i - p_j); the per-channel
    weights are a softmax over j of attn(relation_ij), and the output is
    ``x_i + sum_j w_ij * (value(x_j) + pos(p_i - p_j))``.
    """
    bsz, n, width = features.shape
    k = min(cfg.neighborhood_k, n)
    idx = G.knn(xyz.data, xyz.data, k, sqdist=sqdist)  # (B, N, k)

    q = T.linear(features, params[f"{prefix}.query.w"], params[f"{prefix}.query.b"])
    key = T.linear(features, params[f"{prefix}.key.w"], params[f"{prefix}.key.b"])
    val = T.linear(features, params[f"{prefix}.value.w"], params[f"{prefix}.value.b"])

    offset = T.reshape(xyz, (bsz, n, 1, 3)) - T.batch_gather(xyz, idx)
    pos = mlp_forward(offset, params, f"{prefix}.pos", 2, final_relu=False)

    relation = T.reshape(q, (bsz, n, 1, width)) - T.batch_gather(key, idx) + pos
    logits = mlp_forward(relation, params, f"{prefix}.attn", 2, final_relu=False)
    out = T.softmax_pool(logits, T.batch_gather(val, idx) + pos, axis=2) + features
    if return_attention:
        return out, T.softmax(logits, axis=2)
    return out


# ---------------------------------------------------------------- feature propagation

def init_fp(init: Initializer, prefix: str, coarse_width: int, skip_width: int,
            mlp: tuple[int, ...]) -> None:
    init.mlp(prefix, [coarse_width + skip_width, *mlp])


def fp_forward(coarse_xyz: np.ndarray, coarse_features: Tensor, fine_xyz: np.ndarray,
               skip: Tensor | None, params: ParamStore, prefix: str,
               sqdist: np.ndarray | None = None) -> Tensor:
    """Carry coarse features to the fine points, join the skip features, apply the MLP.

    A single coarse point (the global level) is broadcast to every fine point.
    """
    bsz, n_fine = fine_xyz.shape[:2]
    if coarse_features.shape[1] == 1:
        carried = T.batch_gather(coarse_features, np.zeros((bsz, n_fine), dtype=np.int64))
    else:
        w = G.interpolation_weights(coarse_xyz, fine_xyz, sqdist=sqdist)
        carried = G.interpolate_features(w, coarse_features)
    x = carried if skip is None else T.concat([carried, skip])
    return mlp_forward(x, params, prefix, _depth(params, prefix))


# ---------------------------------------------------------------- gate units

def init_gate(init: Initializer, prefix: str, kind: str, width: int) -> None:
    names = {
        "rpa": ("z", "r", "h"),
        "gru": ("z", "r", "h"),
        "rnn": ("h",),
        "lstm": ("i", "f", "o", "g"),
        "add": (),
        "none": (),
    }[kind]
    for n in names:
        init.linear(f"{prefix}.{n}", 2 * width, width, gain=1.0)


def _gate_linear(x: Tensor, params: ParamStore, name: str) -> Tensor:
    w = params[f"{name}.w"]
    if w.shape[0] != x.shape[-1]:
        raise DimensionError(f"{name}: input width {x.shape[-1]} does not match weight {w.shape}")
    return T.linear(x, w, params[f"{name}.b"])


def rpa_forward(f: Tensor, h_prev: Tensor, params: ParamStore, prefix: str,
                return_gates: bool = False):
    """Recurrent path aggregation: a GRU-like unit that falls back to ``f``.

    ``h = z * relu(W_h [r * h_prev : f] + b_h) + (1 - z) * f`` with sigmoid
    update and reset gates computed from ``[f : h_prev]``.
    """
    if f.shape != h_prev.shape:
        raise DimensionError(f"rpa: f {f.shape} and h_prev {h_prev.shape} differ")
    fh = T.concat([f, h_prev])
    z = T.sigmoid(_gate_linear(fh, params, f"{prefix}.z"))
    r = T.sigmoid(_gate_linear(fh, params, f"{prefix}.r"))
    cand = T.relu(_gate_linear(T.concat([r * h_prev, f]), params, f"{prefix}.h"))
    h = z * cand + (1.0 - z) * f
    if return_gates:
        return h, {"z": z, "r": r, "candidate": cand}
    return h


def gru_forward(f: Tensor, h_prev: Tensor, params: ParamStore, prefix: str,
                return_gates: bool = False):
    """Textbook GRU with ``f`` as input: ``h = z * h_prev + (1 - z) * tanh(...)``."""
    if f.shape != h_prev.shape:
        raise DimensionError(f"gru: f {f.shape} and h_prev {h_prev.shape} differ")
    fh = T.concat([f, h_prev])
    z = T.sigmoid(_gate_linear(fh, params, f"{prefix}.z"))
    r = T.sigmoid(_gate_linear(fh, params, f"{prefix}.r"))
    cand = T.tanh(_gate_linear(T.concat([r * h_prev, f]), params, f"{prefix}.h"))
    h = z * h_prev + (1.0 - z) * cand
    if return_gates:
        return h, {"z": z, "r": r, "candidate": cand}
    return h


def initial_state(kind: str, like: Tensor) -> GateState:
    zeros = np.zeros(like.shape, dtype=like.dtype)
    return GateState(Tensor(zeros), Tensor(zeros.copy()) if kind == "lstm" else None)


def gate_variant_forward(kind: str, f: Tensor, state: GateState, params: ParamStore,
                         prefix: str) -> tuple[Tensor, GateState]:
    """Fuse the current features with the previous step's state.

    Returns the level output and the state for the next step.
    """
    h_prev = state.h
    if kind != "none" and f.shape != h_prev.shape:
        raise DimensionError(f"{kind}: f {f.shape} and h_prev {h_prev.shape} differ")
    if kind == "rpa":
        h = rpa_forward(f, h_prev, params, prefix)
        return h, GateState(h)
    if kind == "gru":
        h = gru_forward(f, h_prev, params, prefix)
        return h, GateState(h)
    if kind == "rnn":
        h = T.tanh(_gate_linear(T.concat([f, h_prev]), params, f"{prefix}.h"))
        return h, GateState(h)
    if kind == "lstm":
        fh = T.concat([f, h_prev])
        i = T.sigmoid(_gate_linear(fh, params, f"{prefix}.i"))
        fg = T.sigmoid(_gate_linear(fh, params, f"{prefix}.f"))
        o = T.sigmoid(_gate_linear(fh, params, f"{prefix}.o"))
        g = T.tanh(_gate_linear(fh, params, f"{prefix}.g"))
        c = fg * state.c + i * g
        h = o * T.tanh(c)
        return h, GateState(h, c)
    if kind == "add":
        h = f + h_prev
        return h, GateState(h)
    if kind == "none":
        return f, GateState(f)
    raise ValueError(f"unknown gate kind {kind!r}")


# ---------------------------------------------------------------- displacement head

def init_head(init: Initializer, prefix: str, in_width: int, cfg: HeadConfig,
              zero_final: bool = False) -> None:
    init.mlp(prefix, [in_width + cfg.noise_dim, *cfg.hidden, 3], final_gain=1.0,
             zero_final=zero_final)


def sample_head_noise(rng: np.random.Generator, shape: tuple[int, ...], stddev: float,
                      dtype) -> np.ndarray:
    dtype = np.dtype(dtype)
    if dtype in (np.float32, np.float64):
        return rng.standard_normal(shape, dtype=dtype) * dtype.type(stddev)
    return (rng.standard_normal(shape) * stddev).astype(dtype)


def head_forward(h_final: Tensor, step: int, cfg: HeadConfig, rng: np.random.Generator,
                 params: ParamStore, prefix: str, radius: float | None = None) -> Tensor:
    """Per-point displacement ``radius * tanh(MLP([h : noise]))``.

    ``radius`` defaults to ``10 ** -(step - 1)``.  The result is clipped one
    ulp inside the bound so every coordinate is strictly below it.
    """
    if step < 1:
        raise ValueError(f"step is 1-based, got {step}")
    if radius is None:
        radius = 10.0 ** (-(step - 1))
    x = h_final
    if cfg.noise_dim > 0:
        noise = sample_head_noise(rng, h_final.shape[:-1] + (cfg.noise_dim,),
                                  cfg.noise_stddev, h_final.dtype)
        x = T.concat([x, Tensor(noise)])
    x = mlp_forward(x, params, prefix, len(cfg.hidden) + 1, final_relu=False)
    bound = float(np.nextafter(h_final.dtype.type(radius), h_final.dtype.type(0)))
    return T.clip(T.scale(T.tanh(x), radius), -bound, bound)
