"""Multi-step point deformation.

Each step re-encodes the current cloud, propagates features back to every
point through three gated FP levels, and predicts a bounded displacement.
Only the gate states carry information from one step to the next.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import geometry as G
from . import layers as L
from . import tensor as T
from .errors import ArgumentError, ConfigError
from .params import Initializer, ParamStore
from .tensor import Tensor

# Trace coordinates live on a 2**-40 grid; sums and differences of grid
# values below 2**12 are exact in float64, which keeps path additivity exact.
GRID = 2.0 ** -40


def snap(x: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(x, dtype=np.float64) / GRID) * GRID


def snap_toward_zero(x: np.ndarray) -> np.ndarray:
    return np.trunc(np.asarray(x, dtype=np.float64) / GRID) * GRID


def default_schedule(steps: int) -> tuple[float, ...]:
    return tuple(10.0 ** -k for k in range(steps))


@dataclass(frozen=True)
class ModelConfig:
    steps: int = 3
    radius_schedule: tuple[float, ...] = (1.0, 0.1, 0.01)
    gate: str = "rpa"
    noise_dim: int = 32
    noise_stddev: float = 1.0
    channel_scale: float = 1.0
    dense_repeats: int = 1
    seed: int = 0
    n_points: int = 2048
    input_noise_dim: int = 0
    neighborhood_k: int = 16
    zero_head: bool = False

    def __post_init__(self):
        object.__setattr__(self, "radius_schedule", tuple(float(r) for r in self.radius_schedule))
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if len(self.radius_schedule) != self.steps:
            raise ConfigError(
                f"radius_schedule has {len(self.radius_schedule)} entries for {self.steps} steps")
        if any(r <= 0 for r in self.radius_schedule):
            raise ConfigError("radius_schedule entries must be positive")
        if any(b > a for a, b in zip(self.radius_schedule, self.radius_schedule[1:])):
            raise ConfigError(f"radius_schedule must be non-increasing: {self.radius_schedule}")
        if self.gate not in L.GATE_KINDS:
            raise ConfigError(f"gate must be one of {L.GATE_KINDS}, got {self.gate!r}")
        if self.noise_dim < 0 or self.noise_stddev < 0 or self.input_noise_dim < 0:
            raise ConfigError("noise dimensions and stddev must be non-negative")
        if self.channel_scale <= 0 or self.n_points < 1 or self.dense_repeats < 1:
            raise ConfigError("channel_scale, n_points and dense_repeats must be positive")

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        """The desk-scale model: quarter channel widths on 256-point clouds.

        The head noise is a feature width like any other, so it is scaled too.
        """
        base = dict(channel_scale=0.25, n_points=256, noise_dim=8)
        base.update(overrides)
        if "steps" in overrides and "radius_schedule" not in overrides:
            base["radius_schedule"] = default_schedule(overrides["steps"])
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["radius_schedule"] = list(self.radius_schedule)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def encoder(self) -> L.EncoderConfig:
        return L.EncoderConfig.standard(self.n_points, self.channel_scale)

    @property
    def fp(self) -> L.FPConfig:
        return L.FPConfig.standard(self.channel_scale)

    @property
    def transformer(self) -> L.TransformerConfig:
        return L.TransformerConfig(neighborhood_k=self.neighborhood_k,
                                   pos_mlp_hidden=L.scaled(64, self.channel_scale))

    @property
    def head(self) -> L.HeadConfig:
        return L.HeadConfig(hidden=(L.scaled(128, self.channel_scale), L.scaled(64, self.channel_scale)),
                            noise_dim=self.noise_dim, noise_stddev=self.noise_stddev)


def build_params(cfg: ModelConfig, seed: int | None = None, dtype=np.float32) -> ParamStore:
    """Fresh weights for every step's network, seeded by ``seed`` (default cfg.seed)."""
    store = ParamStore(dtype)
    init = Initializer(store, np.random.default_rng(cfg.seed if seed is None else seed))
    enc, fp, tr, head = cfg.encoder, cfg.fp, cfg.transformer, cfg.head
    c0 = 3 + cfg.input_noise_dim
    w1, w2, w3 = (lv.mlp[-1] for lv in enc.levels)
    for k in range(1, cfg.steps + 1):
        p = f"s{k}"
        L.init_sa(init, f"{p}.sa1", c0, enc.levels[0])
        L.init_transformer(init, f"{p}.tr1", w1, tr)
        L.init_sa(init, f"{p}.sa2", w1, enc.levels[1])
        L.init_transformer(init, f"{p}.tr2", w2, tr)
        L.init_sa(init, f"{p}.sa3", w2, enc.levels[2])
        L.init_fp(init, f"{p}.fp1", w3, w2, fp.mlps[0])
        L.init_fp(init, f"{p}.fp2", fp.mlps[0][-1], w1, fp.mlps[1])
        L.init_fp(init, f"{p}.fp3", fp.mlps[1][-1], 3 + c0, fp.mlps[2])
        for lvl in range(3):
            L.init_gate(init, f"{p}.gate{lvl + 1}", cfg.gate, fp.mlps[lvl][-1])
        L.init_head(init, f"{p}.head", fp.mlps[2][-1], head, zero_final=cfg.zero_head)
    return store


@dataclass
class PathTrace:
    """Where every point was after each step.

    ``displacements[k]`` and ``intermediates[k]`` are float64 arrays shaped
    like ``initial`` (``(N, 3)`` or ``(B, N, 3)``).  ``clouds``/``deltas``
    hold the differentiable twins used for training losses.
    """

    initial: np.ndarray
    displacements: list[np.ndarray]
    intermediates: list[np.ndarray]
    radius_schedule: tuple[float, ...]
    clouds: list[Tensor] = field(default_factory=list, repr=False)
    deltas: list[Tensor] = field(default_factory=list, repr=False)

    @property
    def steps(self) -> int:
        return len(self.displacements)

    @property
    def final(self) -> np.ndarray:
        return self.intermediates[-1] if self.intermediates else self.initial

    def path_length(self) -> np.ndarray:
        """Total moved distance per point, summed over steps."""
        return sum(np.linalg.norm(d, axis=-1) for d in self.displacements)


def step_forward(cloud: Tensor, l0_features: Tensor, states: list, params: ParamStore,
                 cfg: ModelConfig, k: int, rng: np.random.Generator):
    """One displacement-prediction pass; returns (delta, new gate states)."""
    p = f"s{k}"
    enc = cfg.encoder
    tr = cfg.transformer
    xyz0 = cloud.data
    # every neighbourhood query of this step selects from one table of the input cloud
    d0 = G.pairwise_sqdist(xyz0, xyz0)
    l1_xyz, l1_f, c1 = L.sa_forward(cloud, l0_features, enc.levels[0], params, f"{p}.sa1",
                                    sqdist=d0, return_indices=True)
    d1 = G.sub_sqdist(d0, c1, c1)
    l1_f = L.transformer_forward(l1_xyz, l1_f, tr, params, f"{p}.tr1", sqdist=d1)
    l2_xyz, l2_f, c2 = L.sa_forward(l1_xyz, l1_f, enc.levels[1], params, f"{p}.sa2",
                                    sqdist=d1, return_indices=True)
    d2 = G.sub_sqdist(d1, c2, c2)
    l2_f = L.transformer_forward(l2_xyz, l2_f, tr, params, f"{p}.tr2", sqdist=d2)
    l3_xyz, l3_f = L.sa_forward(l2_xyz, l2_f, enc.levels[2], params, f"{p}.sa3")

    xyz1, xyz2, xyz3 = (t.data for t in (l1_xyz, l2_xyz, l3_xyz))
    new_states = []
    f = L.fp_forward(xyz3, l3_f, xyz2, l2_f, params, f"{p}.fp1")
    h, s = _gate(f, states[0], params, cfg, f"{p}.gate1")
    new_states.append(s)
    f = L.fp_forward(xyz2, h, xyz1, l1_f, params, f"{p}.fp2", sqdist=G.sub_sqdist(d1, None, c2))
    h, s = _gate(f, states[1], params, cfg, f"{p}.gate2")
    new_states.append(s)
    f = L.fp_forward(xyz1, h, xyz0, T.concat([cloud, l0_features]), params, f"{p}.fp3",
                     sqdist=G.sub_sqdist(d0, None, c1))
    h, s = _gate(f, states[2], params, cfg, f"{p}.gate3")
    new_states.append(s)

    delta = L.head_forward(h, k, cfg.head, rng, params, f"{p}.head",
                           radius=cfg.radius_schedule[k - 1])
    return delta, new_states


def _gate(f: Tensor, state, params, cfg, prefix):
    if state is None:
        state = L.initial_state(cfg.gate, f)
    return L.gate_variant_forward(cfg.gate, f, state, params, prefix)


def _as_batch(points) -> tuple[np.ndarray, bool]:
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 2:
        return arr[None], True
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ArgumentError(f"expected (N, 3) or (B, N, 3) points, got {arr.shape}")
    return arr, False


def multi_step_forward(points, params: ParamStore, cfg: ModelConfig, rng: np.random.Generator,
                       input_noise: np.ndarray | None = None) -> PathTrace:
    """Deform ``points`` for ``cfg.steps`` steps and record the full path.

    ``input_noise`` (``(K, B, N, input_noise_dim)`` or broadcastable) fixes
    the dense-mode input channels; by default they are drawn from ``rng``.
    """
    batch, single = _as_batch(points)
    if batch.shape[1] != cfg.n_points:
        raise ArgumentError(
            f"model expects {cfg.n_points} points per cloud, got {batch.shape[1]}")
    dtype = params.dtype
    pos = snap(batch)
    cloud = Tensor(pos.astype(dtype))
    states: list = [None, None, None]
    disps, inters, clouds, deltas = [], [], [], []
    for k in range(1, cfg.steps + 1):
        feats = cloud
        if cfg.input_noise_dim > 0:
            shape = batch.shape[:2] + (cfg.input_noise_dim,)
            if input_noise is None:
                noise = rng.standard_normal(shape)
            else:
                noise = np.broadcast_to(np.asarray(input_noise)[k - 1], shape)
            feats = T.concat([cloud, Tensor(noise.astype(dtype))])
        delta, states = step_forward(cloud, feats, states, params, cfg, k, rng)
        if cfg.gate == "none":
            states = [None, None, None]
        step = snap_toward_zero(delta.data)
        delta = T.straight_through(delta, step.astype(dtype))
        pos = pos + step
        cloud = cloud + delta
        disps.append(step[0] if single else step)
        inters.append(pos[0] if single else pos)
        clouds.append(cloud)
        deltas.append(delta)
    return PathTrace(
        initial=snap(batch)[0] if single else snap(batch),
        displacements=disps,
        intermediates=inters,
        radius_schedule=cfg.radius_schedule,
        clouds=clouds,
        deltas=deltas,
    )


def dense_complete(points, params: ParamStore, cfg: ModelConfig, repeats: int,
                   rng: np.random.Generator, zero_noise: bool = False,
                   return_traces: bool = False):
    """Run ``repeats`` noisy passes over the same cloud and overlap the results.

    Output is pass-major: rows ``[r*n, (r+1)*n)`` come from pass ``r``.
    ``return_traces`` also returns the per-pass :class:`PathTrace` list.
    """
    if repeats < 1:
        raise ArgumentError(f"repeats must be >= 1, got {repeats}")
    batch, single = _as_batch(points)
    noise = None
    if zero_noise:
        noise = np.zeros((cfg.steps,) + batch.shape[:2] + (cfg.input_noise_dim,))
    with T.no_grad():
        traces = [multi_step_forward(batch, params, cfg, rng, input_noise=noise)
                  for _ in range(repeats)]
    dense = np.concatenate([tr.final for tr in traces], axis=1)
    dense = dense[0] if single else dense
    return (dense, traces) if return_traces else dense


def upsample(points, params: ParamStore, cfg: ModelConfig, target_count: int,
             rng: np.random.Generator) -> np.ndarray:
    batch, _ = _as_batch(points)
    n = batch.shape[1]
    if target_count < n or target_count % n:
        raise ArgumentError(f"target_count {target_count} is not a multiple of {n}")
    return dense_complete(points, params, cfg, target_count // n, rng)
