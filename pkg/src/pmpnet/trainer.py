"""Adam training loop, evaluation sweep and binary checkpoints.

Randomness is stateless: the shuffle of epoch ``e`` and the noise of batch
``b`` come from generators seeded by ``(seed, e)`` and ``(seed, e, b)``, so
a resumed run replays exactly what an uninterrupted run would have done.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, FormatError, ParseError, TrainingAborted
from .losses import chamfer, fidelity_mmd, hausdorff, total_loss
from .model import ModelConfig, build_params, multi_step_forward
from .params import ParamStore
from .tensor import Tensor

log = logging.getLogger(__name__)

MAGIC = b"PMPC"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-3
    decay_rate: float = 0.5
    decay_every: int = 20
    batch_size: int = 8
    epochs: int = 300
    seed: int = 0
    pmd_weight: float = 1.0
    eval_every: int = 0  # 0: no periodic validation
    cd_mode: str = "l2"
    emd_weight: float = 0.0
    grad_clip: float | None = None  # global-norm clip; None disables

    def __post_init__(self):
        if self.lr0 <= 0 or not 0 < self.decay_rate <= 1 or self.decay_every < 1:
            raise ConfigError("lr0 must be positive, decay_rate in (0, 1], decay_every >= 1")
        if self.batch_size < 1 or self.epochs < 0 or self.eval_every < 0:
            raise ConfigError("batch_size must be >= 1; epochs and eval_every >= 0")
        if self.pmd_weight < 0 or self.emd_weight < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.cd_mode not in ("l1", "l2"):
            raise ConfigError(f"cd_mode must be 'l1' or 'l2', got {self.cd_mode!r}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive or null")

    def lr(self, epoch: int) -> float:
        return self.lr0 * self.decay_rate ** (epoch // self.decay_every)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: ParamStore, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update using each tensor's ``.grad``, in place."""
    missing = [name for name, t in params.items() if t.grad is None]
    if missing:
        raise ContractError(f"adam_step: no gradient for {missing[0]!r}"
                            + (f" (and {len(missing) - 1} more)" if len(missing) > 1 else ""))
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, t in params.items():
        g = t.grad.astype(t.data.dtype, copy=False)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(t.data)
            v = np.zeros_like(t.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m.astype(t.data.dtype, copy=False)
        state.v[name] = v.astype(t.data.dtype, copy=False)
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        t.data = (t.data - update).astype(t.data.dtype, copy=False)


def clip_gradients(params: ParamStore, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(np.square(t.grad, dtype=np.float64)))
                          for t in params.values() if t.grad is not None))
    if total > max_norm:
        factor = max_norm / total
        for t in params.values():
            if t.grad is not None:
                t.grad = t.grad * t.grad.dtype.type(factor)
    return total


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    model: ModelConfig
    train: TrainConfig
    params: ParamStore
    adam: AdamState
    epoch: int = 0  # epochs completed

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        out = [(f"param/{k}", v) for k, v in self.params.arrays().items()]
        for k in self.params:
            if k in self.adam.m:
                out.append((f"adam_m/{k}", self.adam.m[k]))
                out.append((f"adam_v/{k}", self.adam.v[k]))
        return out


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Magic, version, JSON header, then little-endian float32 tensor data."""
    blobs, entries, offset = [], [], 0
    for name, arr in ckpt.tensors():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = {
        "model": ckpt.model.to_dict(),
        "train": ckpt.train.to_dict(),
        "epoch": ckpt.epoch,
        "adam_step": ckpt.adam.step,
        "tensors": entries,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    if len(raw) < 12:
        raise ParseError(f"{path}: truncated checkpoint header")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: checkpoint format version {version}, expected {FORMAT_VERSION}")
    if len(raw) < 12 + hlen:
        raise ParseError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: corrupt checkpoint header ({exc})") from None
    body = raw[12 + hlen:]
    arrays = {}
    for e in header["tensors"]:
        end = e["offset"] + e["nbytes"]
        if end > len(body):
            raise ParseError(f"{path}: truncated tensor data for {e['name']}")
        arr = np.frombuffer(body, dtype="<f4", count=e["nbytes"] // 4, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    if sum(e["nbytes"] for e in header["tensors"]) != len(body):
        raise ParseError(f"{path}: trailing bytes after tensor data")
    params = ParamStore.from_arrays(
        {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")})
    adam = AdamState(step=header["adam_step"])
    for k, v in arrays.items():
        if k.startswith("adam_m/"):
            adam.m[k[len("adam_m/"):]] = v
        elif k.startswith("adam_v/"):
            adam.v[k[len("adam_v/"):]] = v
    model = ModelConfig.from_dict(header["model"])
    train = TrainConfig.from_dict(header["train"])
    return Checkpoint(model, train, params, adam, header["epoch"])


# ---------------------------------------------------------------- training

@dataclass
class EpochRecord:
    epoch: int
    cd_per_step: list[float]
    pmd: float
    total: float
    lr: float
    val_cd_l2: float | None = None


def metrics_header(steps: int) -> list[str]:
    return ["epoch", *[f"step_cd_{k + 1}" for k in range(steps)], "pmd", "total", "lr"]


def write_metrics_csv(records: list[EpochRecord], path_or_buf, steps: int) -> None:
    def rows(w):
        w.writerow(metrics_header(steps))
        for r in records:
            w.writerow([r.epoch, *[f"{c:.9g}" for c in r.cd_per_step], f"{r.pmd:.9g}",
                        f"{r.total:.9g}", f"{r.lr:.9g}"])

    if isinstance(path_or_buf, io.TextIOBase):
        rows(csv.writer(path_or_buf, lineterminator="\n"))
        return
    with open(path_or_buf, "w", encoding="utf-8", newline="") as fh:
        rows(csv.writer(fh, lineterminator="\n"))


def _batch_rng(seed: int, epoch: int, batch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, batch, 1])


def train_loop(partial: np.ndarray, complete: np.ndarray, model_cfg: ModelConfig,
               train_cfg: TrainConfig, resume: Checkpoint | None = None,
               val: tuple[np.ndarray, np.ndarray] | None = None,
               until_epoch: int | None = None, progress=None) -> tuple[list[EpochRecord], Checkpoint]:
    """Train on ``(S, N, 3)`` partial/complete pairs and return the log and final state.

    ``resume`` continues from a checkpoint; ``until_epoch`` stops early
    (exclusive), which together with ``resume`` splits one run in two.
    A non-finite loss raises :class:`TrainingAborted` carrying the state as
    it was before the offending batch.
    """
    partial = np.asarray(partial, dtype=np.float64)
    complete = np.asarray(complete, dtype=np.float64)
    if partial.ndim != 3 or partial.shape != complete.shape or len(partial) == 0:
        raise ContractError(f"train_loop needs matching non-empty (S, N, 3) arrays, "
                            f"got {partial.shape} and {complete.shape}")
    if resume is not None:
        params, adam, start = resume.params, resume.adam, resume.epoch
    else:
        params = build_params(model_cfg)
        adam, start = AdamState(), 0
    targets = complete.astype(params.dtype)
    count = len(partial)
    end = train_cfg.epochs if until_epoch is None else min(until_epoch, train_cfg.epochs)
    records: list[EpochRecord] = []
    for epoch in range(start, end):
        lr = train_cfg.lr(epoch)
        order = np.random.default_rng([train_cfg.seed, epoch]).permutation(count)
        sums = np.zeros(model_cfg.steps + 2)
        for b, lo in enumerate(range(0, count, train_cfg.batch_size)):
            idx = order[lo:lo + train_cfg.batch_size]
            rng = _batch_rng(train_cfg.seed, epoch, b)
            trace = multi_step_forward(partial[idx], params, model_cfg, rng)
            report = total_loss(trace, targets[idx], pmd_weight=train_cfg.pmd_weight,
                                cd_mode=train_cfg.cd_mode, emd_weight=train_cfg.emd_weight)
            if not math.isfinite(report.total):
                ckpt = Checkpoint(model_cfg, train_cfg, params, adam, epoch)
                raise TrainingAborted(
                    f"non-finite loss {report.total} at epoch {epoch}, batch {b}", ckpt)
            params.zero_grad()
            T.backward(report.objective, wrt=list(params.values()))
            if train_cfg.grad_clip is not None:
                clip_gradients(params, train_cfg.grad_clip)
            adam_step(params, adam, lr)
            sums += len(idx) * np.array([*report.cd_per_step, report.pmd, report.total])
        means = sums / count
        rec = EpochRecord(epoch, means[:-2].tolist(), float(means[-2]), float(means[-1]), lr)
        if val is not None and train_cfg.eval_every and (epoch + 1) % train_cfg.eval_every == 0:
            rec.val_cd_l2 = validation_cd(val[0], val[1], params, model_cfg, train_cfg.seed)
        records.append(rec)
        if progress is not None:
            progress(rec)
        log.debug("epoch %d total %.6g lr %.3g", epoch, rec.total, lr)
    return records, Checkpoint(model_cfg, train_cfg, params, adam, max(start, end))


# ---------------------------------------------------------------- evaluation

EVAL_COLUMNS = ("cd_l1", "cd_l2", "hausdorff", "fidelity", "mmd", "pmd")


def predict(partial: np.ndarray, params: ParamStore, cfg: ModelConfig, seed: int,
            batch_size: int = 8):
    """Run the model over ``(S, N, 3)`` inputs; returns the per-batch traces."""
    traces = []
    with T.no_grad():
        for b, lo in enumerate(range(0, len(partial), batch_size)):
            rng = np.random.default_rng([seed, b, 2])
            traces.append(multi_step_forward(partial[lo:lo + batch_size], params, cfg, rng))
    return traces


def validation_cd(partial, complete, params, cfg, seed: int, batch_size: int = 8) -> float:
    """Mean final-step CD-L2 over a split."""
    partial = np.asarray(partial, dtype=np.float64)
    complete = np.asarray(complete, dtype=np.float64)
    vals = []
    for i, tr in enumerate(predict(partial, params, cfg, seed, batch_size)):
        for j, out in enumerate(tr.final):
            vals.append(chamfer(out, complete[i * batch_size + j], "l2").item())
    return float(np.mean(vals))


@dataclass
class EvalTable:
    ids: list[str]
    rows: np.ndarray  # (S, len(EVAL_COLUMNS))

    def mean(self) -> dict[str, float]:
        return dict(zip(EVAL_COLUMNS, self.rows.mean(axis=0).tolist()))

    def to_csv(self, path_or_buf) -> None:
        def emit(w):
            w.writerow(["id", *EVAL_COLUMNS])
            for i, r in zip(self.ids, self.rows):
                w.writerow([i, *[f"{v:.9g}" for v in r]])
            w.writerow(["mean", *[f"{v:.9g}" for v in self.rows.mean(axis=0)]])

        if isinstance(path_or_buf, io.TextIOBase):
            emit(csv.writer(path_or_buf, lineterminator="\n"))
            return
        with open(path_or_buf, "w", encoding="utf-8", newline="") as fh:
            emit(csv.writer(fh, lineterminator="\n"))


def metric_row(partial, output, complete, path_length=None) -> list[float]:
    fid, mmd = fidelity_mmd(partial, output, complete)
    pmd = 0.0 if path_length is None else float(np.mean(path_length))
    return [chamfer(output, complete, "l1").item(), chamfer(output, complete, "l2").item(),
            hausdorff(output, complete), fid, mmd, pmd]


def evaluate(partial, complete, params: ParamStore, cfg: ModelConfig, seed: int = 0,
             ids=None, batch_size: int = 8) -> EvalTable:
    """Per-shape CD-L1, CD-L2, Hausdorff, Fidelity, MMD and mean path length."""
    partial = np.asarray(partial, dtype=np.float64)
    complete = np.asarray(complete, dtype=np.float64)
    ids = [str(i) for i in range(len(partial))] if ids is None else list(ids)
    rows = []
    for b, tr in enumerate(predict(partial, params, cfg, seed, batch_size)):
        lengths = tr.path_length()
        for j, out in enumerate(tr.final):
            k = b * batch_size + j
            rows.append(metric_row(partial[k], out, complete[k], lengths[j]))
    return EvalTable(ids, np.asarray(rows, dtype=np.float64).reshape(-1, len(EVAL_COLUMNS)))
