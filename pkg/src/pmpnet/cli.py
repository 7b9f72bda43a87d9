"""Command-line entry point: ``pmpnet <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 config error.
Failures print exactly one ``error: <kind>: <message>`` line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import data as D
from .errors import ArgumentError, ConfigError, PMPError
from .layers import GATE_KINDS
from .model import ModelConfig, PathTrace, default_schedule, dense_complete, multi_step_forward
from .trainer import (Checkpoint, TrainConfig, evaluate, load_checkpoint, save_checkpoint,
                      train_loop, write_metrics_csv)

log = logging.getLogger("pmpnet")

EXIT_RUNTIME, EXIT_USAGE, EXIT_CONFIG = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- run config

_NUM = {"type": "number"}
_INT = {"type": "integer"}

RUN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["manifest"],
    "properties": {
        "manifest": {"type": "string"},
        "preset": {"enum": ["toy", "paper"]},
        "kinds": {"type": "array", "items": {"enum": list(D.SHAPE_KINDS)}, "minItems": 1},
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "steps": {**_INT, "minimum": 1},
                "radius_schedule": {"type": "array", "items": {**_NUM, "exclusiveMinimum": 0}},
                "gate": {"enum": list(GATE_KINDS)},
                "noise_dim": {**_INT, "minimum": 0},
                "noise_stddev": {**_NUM, "minimum": 0},
                "channel_scale": {**_NUM, "exclusiveMinimum": 0},
                "dense_repeats": {**_INT, "minimum": 1},
                "seed": _INT,
                "n_points": {**_INT, "minimum": 1},
                "input_noise_dim": {**_INT, "minimum": 0},
                "neighborhood_k": {**_INT, "minimum": 1},
                "zero_head": {"type": "boolean"},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lr0": {**_NUM, "exclusiveMinimum": 0},
                "decay_rate": {**_NUM, "exclusiveMinimum": 0, "maximum": 1},
                "decay_every": {**_INT, "minimum": 1},
                "batch_size": {**_INT, "minimum": 1},
                "epochs": {**_INT, "minimum": 0},
                "seed": _INT,
                "pmd_weight": {**_NUM, "minimum": 0},
                "eval_every": {**_INT, "minimum": 0},
                "cd_mode": {"enum": ["l1", "l2"]},
                "emd_weight": {**_NUM, "minimum": 0},
                "grad_clip": {"anyOf": [{"type": "null"}, {**_NUM, "exclusiveMinimum": 0}]},
            },
        },
    },
}


def env_seed() -> int | None:
    raw = os.environ.get("PMP_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"PMP_SEED must be an integer, got {raw!r}") from None


def load_run_config(path) -> dict:
    """Parse and validate a run config; returns resolved model/train configs."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    try:
        jsonschema.validate(doc, RUN_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{path}: {where}: {exc.message}") from None
    model_kw = dict(doc.get("model", {}))
    train_kw = dict(doc.get("train", {}))
    seed = env_seed()
    if seed is not None:
        model_kw["seed"] = seed
        train_kw["seed"] = seed
    preset = doc.get("preset", "toy")
    model = ModelConfig.toy(**model_kw) if preset == "toy" else _paper_model(model_kw)
    manifest = Path(doc["manifest"])
    if not manifest.is_absolute():
        manifest = Path(path).parent / manifest
    return {
        "manifest": manifest,
        "kinds": tuple(doc["kinds"]) if "kinds" in doc else None,
        "model": model,
        "train": TrainConfig(**train_kw),
    }


def _paper_model(kw: dict) -> ModelConfig:
    if "steps" in kw and "radius_schedule" not in kw:
        kw = {**kw, "radius_schedule": default_schedule(kw["steps"])}
    return ModelConfig(**kw)


# ---------------------------------------------------------------- path export

PATH_HEADER = ["point_id", "step", "x", "y", "z", "dx", "dy", "dz"]


def export_paths(trace: PathTrace, path) -> int:
    """Write the per-point trajectory CSV; returns the number of data rows.

    Rows run point-major then step; step 0 is the initial position with a
    zero displacement.  Values use 17 significant digits so they round-trip.
    """
    init = np.asarray(trace.initial, dtype=np.float64)
    if init.ndim != 2:
        raise ArgumentError(f"export_paths needs a single-cloud trace, got shape {init.shape}")
    positions = [init, *[np.asarray(p, dtype=np.float64) for p in trace.intermediates]]
    moves = [np.zeros_like(init), *[np.asarray(d, dtype=np.float64) for d in trace.displacements]]
    pos = np.stack(positions, axis=1)  # (N, K+1, 3)
    mov = np.stack(moves, axis=1)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PATH_HEADER)
        for i in range(pos.shape[0]):
            for k in range(pos.shape[1]):
                w.writerow([i, k, *(f"{v:.17g}" for v in pos[i, k]), *(f"{v:.17g}" for v in mov[i, k])])
    return pos.shape[0] * pos.shape[1]


# ---------------------------------------------------------------- commands

def _seed(arg_seed: int) -> int:
    s = env_seed()
    return arg_seed if s is None else s


def _load_pairs(manifest, split, kinds):
    entries = D.load_manifest(manifest)
    return D.load_split(entries, split, kinds)


def cmd_synth(args) -> None:
    kinds = tuple(args.kinds.split(",")) if args.kinds else D.SHAPE_KINDS
    entries = D.synth_dataset(args.out, seed=_seed(args.seed), kinds=kinds,
                              n_points=args.n_points, keep_fraction=args.keep)
    print(f"wrote {len(entries)} pairs to {args.out}")


def _train_from(cfg: dict, out: Path, epochs: int | None = None) -> tuple[list, Checkpoint]:
    train_cfg = cfg["train"]
    if epochs is not None:
        train_cfg = TrainConfig(**{**train_cfg.to_dict(), "epochs": epochs})
    partial, complete, _ = _load_pairs(cfg["manifest"], "train", cfg["kinds"])
    val = None
    if train_cfg.eval_every:
        vp, vc, _ = _load_pairs(cfg["manifest"], "val", cfg["kinds"])
        val = (vp, vc)
    return train_loop(partial, complete, cfg["model"], train_cfg, val=val,
                      progress=lambda r: log.info("epoch %d total %.6g", r.epoch, r.total))


def cmd_train(args) -> None:
    cfg = load_run_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records, ckpt = _train_from(cfg, out, args.epochs)
    save_checkpoint(ckpt, out / "checkpoint.pmpc")
    write_metrics_csv(records, out / "metrics.csv", cfg["model"].steps)
    print(f"trained {ckpt.epoch} epochs; wrote {out / 'checkpoint.pmpc'} and {out / 'metrics.csv'}")


def _read_input(path, cfg: ModelConfig) -> np.ndarray:
    cloud = D.read_cloud(path)
    if len(cloud) != cfg.n_points:
        raise ArgumentError(f"{path}: model expects {cfg.n_points} points, file has {len(cloud)}")
    return cloud


def cmd_complete(args) -> None:
    ckpt = load_checkpoint(args.checkpoint)
    cloud = _read_input(args.input, ckpt.model)
    transform = None
    if args.normalize:
        cloud, transform = D.normalize(cloud)
    rng = np.random.default_rng([_seed(args.seed), 3])
    out = multi_step_forward(cloud, ckpt.params, ckpt.model, rng).final
    if transform is not None:
        out = transform.restore(out)
    D.write_cloud(args.output, out)


def cmd_upsample(args) -> None:
    ckpt = load_checkpoint(args.checkpoint)
    cloud = _read_input(args.input, ckpt.model)
    if args.factor < 1:
        raise ArgumentError(f"--factor must be >= 1, got {args.factor}")
    rng = np.random.default_rng([_seed(args.seed), 4])
    D.write_cloud(args.output, dense_complete(cloud, ckpt.params, ckpt.model, args.factor, rng))


def cmd_eval(args) -> None:
    ckpt = load_checkpoint(args.checkpoint)
    kinds = tuple(args.kinds.split(",")) if args.kinds else None
    partial, complete, entries = _load_pairs(args.manifest, args.split, kinds)
    table = evaluate(partial, complete, ckpt.params, ckpt.model, seed=_seed(args.seed),
                     ids=[Path(e.partial_path).name for e in entries])
    table.to_csv(args.out)
    means = table.mean()
    print(" ".join(f"{k}={v:.6g}" for k, v in means.items()))


def cmd_paths(args) -> None:
    ckpt = load_checkpoint(args.checkpoint)
    cloud = _read_input(args.input, ckpt.model)
    rng = np.random.default_rng([_seed(args.seed), 5])
    trace = multi_step_forward(cloud, ckpt.params, ckpt.model, rng)
    rows = export_paths(trace, args.out)
    print(f"wrote {rows} rows to {args.out}")


ABLATION_AXES = ("steps", "radius", "gate", "noise_dim", "noise_stddev")


def parse_axis_values(axis: str, raw: str) -> list:
    """``steps``: ``1,2,3``; ``radius``: ``1,1,1;1,0.5,0.25``; ``gate``: ``rpa,gru``."""
    try:
        if axis == "radius":
            return [tuple(float(v) for v in grp.split(",")) for grp in raw.split(";") if grp]
        items = [v.strip() for v in raw.split(",") if v.strip()]
        if axis in ("steps", "noise_dim"):
            return [int(v) for v in items]
        if axis == "noise_stddev":
            return [float(v) for v in items]
        if axis == "gate":
            bad = [v for v in items if v not in GATE_KINDS]
            if bad:
                raise UsageError(f"unknown gate {bad[0]!r}; choose from {', '.join(GATE_KINDS)}")
            return items
    except ValueError as exc:
        raise UsageError(f"bad --values for axis {axis}: {exc}") from None
    raise UsageError(f"unknown axis {axis!r}")


def _variant(model: ModelConfig, axis: str, value) -> ModelConfig:
    d = model.to_dict()
    if axis == "steps":
        d["steps"], d["radius_schedule"] = value, list(default_schedule(value))
    elif axis == "radius":
        d["steps"], d["radius_schedule"] = len(value), list(value)
    else:
        d[axis] = value
    return ModelConfig.from_dict(d)


ABLATION_HEADER = ["axis", "value", "steps", "final_total", "val_cd_l1", "val_cd_l2",
                   "val_hausdorff", "val_mean_pmd", "finite"]


def run_ablation(cfg: dict, axis: str, values: list, out_csv, epochs: int | None = None) -> list[list]:
    partial, complete, _ = _load_pairs(cfg["manifest"], "train", cfg["kinds"])
    vp, vc, _ = _load_pairs(cfg["manifest"], "val", cfg["kinds"])
    train_cfg = cfg["train"]
    if epochs is not None:
        train_cfg = TrainConfig(**{**train_cfg.to_dict(), "epochs": epochs})
    rows = []
    for value in values:
        model = _variant(cfg["model"], axis, value)
        records, ckpt = train_loop(partial, complete, model, train_cfg)
        means = evaluate(vp, vc, ckpt.params, model, seed=train_cfg.seed).mean()
        final_total = records[-1].total if records else float("nan")
        finite = all(math.isfinite(r.total) for r in records) and all(
            math.isfinite(v) for v in means.values())
        label = ";".join(f"{v:g}" for v in value) if axis == "radius" else str(value)
        rows.append([axis, label, model.steps, f"{final_total:.9g}", f"{means['cd_l1']:.9g}",
                     f"{means['cd_l2']:.9g}", f"{means['hausdorff']:.9g}", f"{means['pmd']:.9g}",
                     int(finite)])
        log.info("ablation %s=%s val_cd_l2 %.6g", axis, label, means["cd_l2"])
    with open(out_csv, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_HEADER)
        w.writerows(rows)
    return rows


def cmd_ablate(args) -> None:
    cfg = load_run_config(args.config)
    values = parse_axis_values(args.axis, args.values)
    if not values:
        raise UsageError("--values is empty")
    rows = run_ablation(cfg, args.axis, values, args.out, args.epochs)
    print(f"wrote {len(rows)} rows to {args.out}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pmpnet", description="Multi-step point-moving completion toolkit.")
    p.add_argument("--log-level", default="WARNING",
                   choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write the toy dataset and manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-points", type=int, default=256)
    s.add_argument("--keep", type=float, default=0.5)
    s.add_argument("--kinds", help="comma-separated subset of " + ",".join(D.SHAPE_KINDS))
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train from a JSON run config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="directory for checkpoint.pmpc and metrics.csv")
    s.add_argument("--epochs", type=int, help="override train.epochs")
    s.set_defaults(func=cmd_train)

    for name, func, helptext in (("complete", cmd_complete, "complete one partial cloud"),
                                 ("upsample", cmd_upsample, "dense completion by repeated passes")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--input", required=True)
        s.add_argument("--output", required=True)
        s.add_argument("--seed", type=int, default=0)
        if name == "complete":
            s.add_argument("--normalize", action="store_true",
                           help="normalize the input first and restore the output frame")
        else:
            s.add_argument("--factor", type=int, required=True)
        s.set_defaults(func=func)

    s = sub.add_parser("eval", help="metrics CSV for one split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", default="test", choices=["train", "val", "test"])
    s.add_argument("--kinds")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("paths", help="per-step trajectory CSV for one cloud")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_paths)

    s = sub.add_parser("ablate", help="sweep one model axis and write a comparison CSV")
    s.add_argument("--config", required=True)
    s.add_argument("--axis", required=True, choices=ABLATION_AXES)
    s.add_argument("--values", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int, help="override train.epochs for every variant")
    s.set_defaults(func=cmd_ablate)
    return p


def _fail(kind: str, message: str, code: int) -> int:
    text = " ".join(str(message).split())
    print(f"error: {kind}: {text}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    except ConfigError as exc:
        return _fail("config", exc, EXIT_CONFIG)
    except PMPError as exc:
        return _fail(type(exc).__name__, exc, EXIT_RUNTIME)
    except OSError as exc:
        return _fail("io", exc, EXIT_RUNTIME)
    return 0


if __name__ == "__main__":
    sys.exit(main())
