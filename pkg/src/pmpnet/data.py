"""Synthetic shapes, view occlusion, normalization and point-cloud files.

Every generator draws from ``numpy.random.default_rng(seed)`` so a
(spec, seed) pair always produces the same cloud.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArgumentError, DegenerateInputError, FormatError, ParseError

SHAPE_KINDS = ("line", "circle", "sphere", "cuboid", "cylinder", "plane")

DEFAULT_PARAMS = {
    "line": {"a": (-1.0, 0.0, 0.0), "b": (1.0, 0.0, 0.0)},
    "circle": {"radius": 1.0},
    "sphere": {"radius": 1.0},
    "cuboid": {"size": (1.0, 0.6, 0.4)},
    "cylinder": {"radius": 0.5, "height": 1.0},
    "plane": {"width": 1.0, "depth": 1.0},
}


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    n_points: int
    params: dict = field(default_factory=dict)
    seed: int = 0

    def resolved_params(self) -> dict:
        if self.kind not in SHAPE_KINDS:
            raise ArgumentError(f"unknown shape kind {self.kind!r}; expected one of {SHAPE_KINDS}")
        unknown = set(self.params) - set(DEFAULT_PARAMS[self.kind])
        if unknown:
            raise ArgumentError(f"{self.kind}: unknown params {sorted(unknown)}")
        return {**DEFAULT_PARAMS[self.kind], **self.params}


def _positive(name: str, value) -> float:
    v = float(value)
    if not v > 0 or not math.isfinite(v):
        raise ArgumentError(f"{name} must be a positive finite number, got {value!r}")
    return v


def _check_params(kind: str, p: dict) -> dict:
    if kind == "line":
        a, b = np.asarray(p["a"], dtype=np.float64), np.asarray(p["b"], dtype=np.float64)
        if a.shape != (3,) or b.shape != (3,):
            raise ArgumentError("line endpoints must be 3-vectors")
        if np.array_equal(a, b):
            raise ArgumentError("line endpoints must differ")
        return {"a": a, "b": b}
    if kind in ("circle", "sphere"):
        return {"radius": _positive("radius", p["radius"])}
    if kind == "cuboid":
        size = np.asarray(p["size"], dtype=np.float64)
        if size.shape != (3,):
            raise ArgumentError("cuboid size must be a 3-vector")
        return {"size": np.array([_positive("size", s) for s in size])}
    if kind == "cylinder":
        return {"radius": _positive("radius", p["radius"]), "height": _positive("height", p["height"])}
    return {"width": _positive("width", p["width"]), "depth": _positive("depth", p["depth"])}


def _sample_surface(kind: str, p: dict, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points uniformly distributed over the surface (by arc length or area)."""
    if kind == "line":
        t = rng.random(n)[:, None]
        return p["a"] + t * (p["b"] - p["a"])
    if kind == "circle":
        theta = rng.random(n) * 2.0 * np.pi
        r = p["radius"]
        return np.stack([r * np.cos(theta), r * np.sin(theta), np.zeros(n)], axis=1)
    if kind == "sphere":
        v = rng.standard_normal((n, 3))
        return p["radius"] * v / np.linalg.norm(v, axis=1, keepdims=True)
    if kind == "plane":
        u = rng.random((n, 2)) - 0.5
        return np.stack([u[:, 0] * p["width"], u[:, 1] * p["depth"], np.zeros(n)], axis=1)
    if kind == "cuboid":
        s = p["size"]
        areas = np.array([s[1] * s[2], s[0] * s[2], s[0] * s[1]])  # faces normal to x, y, z
        face = rng.choice(3, size=n, p=areas / areas.sum())
        sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
        pts = (rng.random((n, 3)) - 0.5) * s
        rows = np.arange(n)
        pts[rows, face] = sign * s[face] / 2.0
        return pts
    # cylinder: lateral surface plus both caps, axis along z
    r, h = p["radius"], p["height"]
    areas = np.array([2 * np.pi * r * h, np.pi * r * r, np.pi * r * r])
    part = rng.choice(3, size=n, p=areas / areas.sum())
    theta = rng.random(n) * 2.0 * np.pi
    rad = np.where(part == 0, r, r * np.sqrt(rng.random(n)))
    z = np.where(part == 0, (rng.random(n) - 0.5) * h, np.where(part == 1, h / 2, -h / 2))
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


def generate(spec: ShapeSpec) -> np.ndarray:
    """Seeded uniform sample of ``spec.n_points`` points on the shape's surface."""
    if spec.n_points < 8:
        raise ArgumentError(f"n_points must be >= 8, got {spec.n_points}")
    p = _check_params(spec.kind, spec.resolved_params())
    return _sample_surface(spec.kind, p, spec.n_points, np.random.default_rng(spec.seed))


def surface_distance(spec: ShapeSpec, points) -> np.ndarray:
    """Distance from each point to the analytic surface of ``spec``."""
    x = np.asarray(points, dtype=np.float64)
    p = _check_params(spec.kind, spec.resolved_params())
    if spec.kind == "line":
        a, b = p["a"], p["b"]
        t = np.clip((x - a) @ (b - a) / np.dot(b - a, b - a), 0.0, 1.0)
        return np.linalg.norm(x - (a + t[:, None] * (b - a)), axis=1)
    if spec.kind == "circle":
        rho = np.hypot(x[:, 0], x[:, 1])
        return np.hypot(rho - p["radius"], x[:, 2])
    if spec.kind == "sphere":
        return np.abs(np.linalg.norm(x, axis=1) - p["radius"])
    if spec.kind == "plane":
        over = np.maximum(np.abs(x[:, :2]) - np.array([p["width"], p["depth"]]) / 2, 0.0)
        return np.sqrt((over ** 2).sum(axis=1) + x[:, 2] ** 2)
    if spec.kind == "cuboid":
        half = p["size"] / 2
        q = np.abs(x) - half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return np.abs(outside + inside)
    r, h = p["radius"], p["height"]
    q = np.stack([np.hypot(x[:, 0], x[:, 1]) - r, np.abs(x[:, 2]) - h / 2], axis=1)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(q.max(axis=1), 0.0)
    return np.abs(outside + inside)


# ---------------------------------------------------------------- occlusion

@dataclass(frozen=True)
class OcclusionSpec:
    viewpoint: tuple[float, float, float]
    keep_fraction: float
    resample_to: int

    def direction(self) -> np.ndarray:
        v = np.asarray(self.viewpoint, dtype=np.float64)
        n = np.linalg.norm(v)
        if v.shape != (3,) or not n > 0:
            raise ArgumentError(f"viewpoint must be a nonzero 3-vector, got {self.viewpoint!r}")
        return v / n


def _kept_count(keep: float, n: int) -> int:
    return max(1, int(math.ceil(keep * n - 1e-9)))


def occlude(source, occ: OcclusionSpec, seed: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Cut away the side facing the viewpoint and resample what remains.

    Points are ranked by their projection on the viewpoint direction and the
    lowest ``keep_fraction`` is kept.  With a :class:`ShapeSpec` the complete
    cloud is a fresh surface sample, the cut threshold is its
    ``keep_fraction`` quantile, and the partial cloud is rejection-sampled
    from the analytic surface below that threshold.  With an array the
    complete cloud is the array itself and the partial cloud is drawn (with
    replacement) from its kept points.
    """
    if not 0 < occ.keep_fraction <= 1:
        raise ArgumentError(f"keep_fraction must be in (0, 1], got {occ.keep_fraction}")
    if occ.resample_to < 1:
        raise ArgumentError(f"resample_to must be positive, got {occ.resample_to}")
    d = occ.direction()
    if isinstance(source, ShapeSpec):
        rng = np.random.default_rng(source.seed if seed is None else seed)
        p = _check_params(source.kind, source.resolved_params())
        complete = _sample_surface(source.kind, p, occ.resample_to, rng)
        proj = complete @ d
        threshold = np.sort(proj)[_kept_count(occ.keep_fraction, len(proj)) - 1]
        if occ.keep_fraction == 1:
            threshold = np.inf
        chunks, have = [], 0
        while have < occ.resample_to:
            cand = _sample_surface(source.kind, p, 4 * occ.resample_to, rng)
            cand = cand[cand @ d <= threshold]
            chunks.append(cand)
            have += len(cand)
        partial = np.concatenate(chunks)[: occ.resample_to]
        return partial, complete
    cloud = np.asarray(source, dtype=np.float64)
    if cloud.ndim != 2 or cloud.shape[1] != 3 or len(cloud) == 0:
        raise ArgumentError(f"expected a non-empty (N, 3) cloud, got {cloud.shape}")
    rng = np.random.default_rng(0 if seed is None else seed)
    order = np.argsort(cloud @ d, kind="stable")
    kept = cloud[order[: _kept_count(occ.keep_fraction, len(cloud))]]
    partial = kept[rng.integers(0, len(kept), occ.resample_to)]
    if len(cloud) == occ.resample_to:
        complete = cloud.copy()
    else:
        complete = cloud[rng.integers(0, len(cloud), occ.resample_to)]
    return partial, complete


# ---------------------------------------------------------------- normalization

@dataclass(frozen=True)
class Transform:
    """``normalized = (x - center) * factor``."""

    center: np.ndarray
    factor: float

    def apply(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.center) * self.factor

    def restore(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) / self.factor + self.center


def normalize(cloud, scale: float = 0.9) -> tuple[np.ndarray, Transform]:
    """Center on the centroid and scale so the farthest point sits at ``scale``."""
    x = np.asarray(cloud, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3 or len(x) == 0:
        raise ArgumentError(f"expected a non-empty (N, 3) cloud, got {x.shape}")
    if scale <= 0:
        raise ArgumentError(f"scale must be positive, got {scale}")
    center = x.mean(axis=0)
    radius = np.linalg.norm(x - center, axis=1).max()
    if not radius > 1e-12 * max(1.0, np.abs(x).max()):
        raise DegenerateInputError("cannot normalize: all points coincide")
    t = Transform(center, float(scale / radius))
    return t.apply(x), t


# ---------------------------------------------------------------- file formats

def _format_of(path) -> str:
    ext = Path(path).suffix.lower()
    if ext == ".xyz":
        return "xyz"
    if ext == ".ply":
        return "ply"
    raise FormatError(f"{path}: unsupported extension {ext!r} (expected .xyz or .ply)")


def _check_cloud(points) -> np.ndarray:
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3:
        raise ArgumentError(f"expected an (N, 3) cloud, got {x.shape}")
    return x


def _lines(points: np.ndarray) -> str:
    return "".join(f"{a:.9g} {b:.9g} {c:.9g}\n" for a, b, c in points.tolist())


def write_cloud(path, points) -> None:
    """Write ``.xyz`` (one ``x y z`` line per point) or ASCII ``.ply``."""
    fmt = _format_of(path)
    x = _check_cloud(points)
    body = _lines(x)
    if fmt == "ply":
        header = ("ply\nformat ascii 1.0\n"
                  f"element vertex {len(x)}\n"
                  "property float x\nproperty float y\nproperty float z\nend_header\n")
        body = header + body
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(body)


def _parse_xyz_line(line: str, lineno: int) -> list[float]:
    parts = line.split()
    if len(parts) != 3:
        raise ParseError(f"expected 3 fields, found {len(parts)}", lineno)
    try:
        vals = [float(v) for v in parts]
    except ValueError:
        raise ParseError(f"non-numeric field in {line.strip()!r}", lineno) from None
    if not all(math.isfinite(v) for v in vals):
        raise ParseError("non-finite coordinate", lineno)
    return vals


def read_cloud(path) -> np.ndarray:
    fmt = _format_of(path)
    with open(path, encoding="ascii", errors="replace") as fh:
        lines = fh.read().splitlines()
    start = 0
    expected = None
    if fmt == "ply":
        if not lines or lines[0].strip() != "ply":
            raise ParseError("missing 'ply' magic", 1)
        props = []
        for i, raw in enumerate(lines[1:], start=2):
            tok = raw.split()
            if not tok or tok[0] in ("comment", "obj_info"):
                continue
            if tok[0] == "format":
                if tok[1:2] != ["ascii"]:
                    raise ParseError(f"only ascii ply is supported, got {raw.strip()!r}", i)
            elif tok[0] == "element":
                if len(tok) != 3 or tok[1] != "vertex" or not tok[2].isdigit():
                    raise ParseError(f"unsupported element line {raw.strip()!r}", i)
                expected = int(tok[2])
            elif tok[0] == "property":
                props.append(tok[-1])
            elif tok[0] == "end_header":
                start = i
                break
            else:
                raise ParseError(f"unexpected header line {raw.strip()!r}", i)
        else:
            raise ParseError("header has no end_header", len(lines))
        if expected is None:
            raise ParseError("header has no 'element vertex' line", start)
        if props != ["x", "y", "z"]:
            raise ParseError(f"expected properties x y z, got {' '.join(props)}", start)
    rows = []
    for i, raw in enumerate(lines[start:], start=start + 1):
        if not raw.strip():
            continue
        if expected is not None and len(rows) == expected:
            raise ParseError("more vertices than declared", i)
        rows.append(_parse_xyz_line(raw, i))
    if expected is not None and len(rows) != expected:
        raise ParseError(f"declared {expected} vertices, found {len(rows)}", len(lines))
    return np.asarray(rows, dtype=np.float64).reshape(-1, 3)


# ---------------------------------------------------------------- dataset

SPLITS = (("train", 30), ("val", 5), ("test", 5))


@dataclass(frozen=True)
class DatasetEntry:
    shape: str
    seed: int
    split: str
    partial_path: str
    complete_path: str


def sample_seed(base_seed: int, kind: str, index: int) -> int:
    ss = np.random.SeedSequence([int(base_seed), SHAPE_KINDS.index(kind), int(index)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def random_viewpoint(seed: int) -> np.ndarray:
    v = np.random.default_rng([seed, 1]).standard_normal(3)
    return v / np.linalg.norm(v)


def make_pair(kind: str, seed: int, n_points: int = 256, keep_fraction: float = 0.5,
              scale: float = 0.9) -> tuple[np.ndarray, np.ndarray]:
    """One normalized (partial, complete) pair; both use the complete cloud's transform."""
    spec = ShapeSpec(kind, n_points, {}, seed)
    partial, complete = occlude(spec, OcclusionSpec(tuple(random_viewpoint(seed)), keep_fraction, n_points))
    complete_n, t = normalize(complete, scale)
    return t.apply(partial), complete_n


def synth_dataset(out_dir, seed: int = 0, kinds=SHAPE_KINDS, n_points: int = 256,
                  keep_fraction: float = 0.5, splits=SPLITS) -> list[DatasetEntry]:
    """Write the toy completion dataset, ``manifest.json`` and ``baseline.csv``.

    Paths in the manifest are relative to ``out_dir``.  Output bytes depend
    only on the arguments.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    baseline_rows = []
    for kind in kinds:
        if kind not in SHAPE_KINDS:
            raise ArgumentError(f"unknown shape kind {kind!r}")
        index = 0
        for split, count in splits:
            for _ in range(count):
                s = sample_seed(seed, kind, index)
                partial, complete = make_pair(kind, s, n_points, keep_fraction)
                stem = f"{kind}_{index:03d}"
                ppath, cpath = f"{stem}_partial.xyz", f"{stem}_complete.xyz"
                write_cloud(out / ppath, partial)
                write_cloud(out / cpath, complete)
                entries.append(DatasetEntry(kind, s, split, ppath, cpath))
                l1, l2 = baseline_cd(read_cloud(out / ppath), read_cloud(out / cpath))
                baseline_rows.append((ppath, l1, l2))
                index += 1
    with open(out / "manifest.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump([e.__dict__ for e in entries], fh, indent=1)
        fh.write("\n")
    with open(out / "baseline.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["partial_path", "cd_l1", "cd_l2"])
        for path, l1, l2 in baseline_rows:
            w.writerow([path, f"{l1:.9g}", f"{l2:.9g}"])
    return entries


def baseline_cd(partial, complete) -> tuple[float, float]:
    """CD-L1 and CD-L2 of the unmodified partial cloud against the complete one."""
    from .losses import chamfer

    return chamfer(partial, complete, "l1").item(), chamfer(partial, complete, "l2").item()


def load_manifest(path) -> list[DatasetEntry]:
    """Entries with paths resolved against the manifest's directory."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc.msg}", exc.lineno) from None
    if not isinstance(raw, list):
        raise FormatError(f"{path}: manifest must be a JSON array")
    keys = {"shape", "seed", "split", "partial_path", "complete_path"}
    entries = []
    for i, item in enumerate(raw):
        if not isinstance(item, dict) or set(item) != keys:
            raise FormatError(f"{path}: entry {i} must have exactly the keys {sorted(keys)}")
        entries.append(DatasetEntry(
            item["shape"], int(item["seed"]), item["split"],
            os.fspath(path.parent / item["partial_path"]),
            os.fspath(path.parent / item["complete_path"])))
    return entries


def load_split(entries, split: str | None = None, kinds=None) -> tuple[np.ndarray, np.ndarray, list[DatasetEntry]]:
    """Stack the selected pairs into ``(S, N, 3)`` arrays, in manifest order."""
    chosen = [e for e in entries
              if (split is None or e.split == split) and (kinds is None or e.shape in kinds)]
    if not chosen:
        raise ArgumentError(f"no dataset entries for split={split!r} kinds={kinds!r}")
    partial = np.stack([read_cloud(e.partial_path) for e in chosen])
    complete = np.stack([read_cloud(e.complete_path) for e in chosen])
    return partial, complete, chosen
