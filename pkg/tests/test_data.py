import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pmpnet import data as D
from pmpnet.errors import ArgumentError, DegenerateInputError, FormatError, ParseError

seeds = st.integers(0, 2**32 - 1)


@given(seeds, st.sampled_from(D.SHAPE_KINDS))
def test_samples_lie_on_the_surface(seed, kind):
    spec = D.ShapeSpec(kind, 64, {}, seed)
    pts = D.generate(spec)
    assert pts.shape == (64, 3)
    assert np.abs(D.surface_distance(spec, pts)).max() < 1e-9


def test_generation_is_seeded():
    a = D.generate(D.ShapeSpec("sphere", 100, {}, 3))
    np.testing.assert_array_equal(a, D.generate(D.ShapeSpec("sphere", 100, {}, 3)))
    assert not np.array_equal(a, D.generate(D.ShapeSpec("sphere", 100, {}, 4)))


def test_sphere_samples_are_centered():
    pts = D.generate(D.ShapeSpec("sphere", 10_000, {}, 0))
    assert np.linalg.norm(pts.mean(axis=0)) < 0.05


def test_generate_rejects_bad_input():
    with pytest.raises(ArgumentError):
        D.generate(D.ShapeSpec("torus", 64))
    with pytest.raises(ArgumentError):
        D.generate(D.ShapeSpec("circle", 4))
    with pytest.raises(ArgumentError):
        D.generate(D.ShapeSpec("sphere", 64, {"radius": -1}))


def test_occlusion_keeps_far_side():
    spec = D.ShapeSpec("circle", 256, {}, 11)
    partial, complete = D.occlude(spec, D.OcclusionSpec((1.0, 0, 0), 0.5, 256))
    assert partial.shape == complete.shape == (256, 3)
    assert np.all(partial[:, 0] <= np.median(complete[:, 0]))


@given(seeds, st.floats(0.1, 1.0))
def test_occlusion_of_an_array(seed, keep):
    cloud = np.random.default_rng(seed).standard_normal((50, 3))
    partial, complete = D.occlude(cloud, D.OcclusionSpec((0, 0, 1.0), keep, 40), seed=seed)
    cut = np.sort(cloud[:, 2])[D._kept_count(keep, 50) - 1]
    assert partial.shape == (40, 3) and np.all(partial[:, 2] <= cut)


@given(seeds)
def test_normalize_round_trip(seed):
    rng = np.random.default_rng(seed)
    cloud = rng.standard_normal((30, 3)) * rng.uniform(0.01, 100) + rng.uniform(-50, 50, 3)
    out, t = D.normalize(cloud, 0.9)
    assert np.linalg.norm(out, axis=1).max() == pytest.approx(0.9, rel=1e-12)
    np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(t.restore(out), cloud, atol=1e-7 * max(1.0, np.abs(cloud).max()))


def test_normalize_degenerate():
    with pytest.raises(DegenerateInputError):
        D.normalize(np.ones((5, 3)))


@pytest.mark.parametrize("ext", [".xyz", ".ply"])
def test_cloud_io_round_trip(tmp_path, ext):
    pts = np.random.default_rng(0).standard_normal((17, 3))
    path = tmp_path / f"c{ext}"
    D.write_cloud(path, pts)
    np.testing.assert_allclose(D.read_cloud(path), pts, rtol=1e-8)
    if ext == ".ply":
        assert "element vertex 17" in path.read_text()


def test_nine_significant_digits(tmp_path):
    path = tmp_path / "c.xyz"
    D.write_cloud(path, [[1 / 3, 2.0, -12345.678901234]])
    assert path.read_text() == "0.333333333 2 -12345.6789\n"


def test_parse_error_names_the_line(tmp_path):
    path = tmp_path / "bad.xyz"
    path.write_text("0 0 0\n1 2\n")
    with pytest.raises(ParseError, match="line 2") as err:
        D.read_cloud(path)
    assert err.value.line == 2


def test_ply_vertex_count_checked(tmp_path):
    path = tmp_path / "bad.ply"
    D.write_cloud(path, np.zeros((3, 3)))
    path.write_text(path.read_text().replace("element vertex 3", "element vertex 4"))
    with pytest.raises(ParseError):
        D.read_cloud(path)


def test_unknown_extension(tmp_path):
    with pytest.raises(FormatError):
        D.write_cloud(tmp_path / "c.obj", np.zeros((1, 3)))


def test_synth_is_byte_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    D.synth_dataset(a, seed=7, kinds=("circle",))
    D.synth_dataset(b, seed=7, kinds=("circle",))
    for name in ("manifest.json", "baseline.csv", "circle_000_partial.xyz", "circle_039_complete.xyz"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    entries = json.loads((a / "manifest.json").read_text())
    assert [e["split"] for e in entries].count("train") == 30
    assert len(entries) == 40


def test_manifest_round_trip(tmp_path):
    D.synth_dataset(tmp_path, seed=1, kinds=("plane",))
    entries = D.load_manifest(tmp_path / "manifest.json")
    partial, complete, chosen = D.load_split(entries, "val")
    assert partial.shape == complete.shape == (5, 256, 3)
    assert all(e.split == "val" for e in chosen)
    # pairs share the complete cloud's frame, so the complete cloud is the normalized one
    assert np.linalg.norm(complete, axis=-1).max(axis=1) == pytest.approx(0.9, abs=1e-8)
    with pytest.raises(ArgumentError):
        D.load_split(entries, "val", kinds=("sphere",))


def test_partial_versus_complete_baseline_positive(tmp_path):
    D.synth_dataset(tmp_path, seed=0, kinds=("circle",), splits=(("train", 2),))
    rows = (tmp_path / "baseline.csv").read_text().splitlines()
    assert rows[0] == "partial_path,cd_l1,cd_l2"
    assert all(float(r.split(",")[2]) > 0 for r in rows[1:])
