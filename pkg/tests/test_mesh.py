import math
import os

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from hallufix.errors import (
    ConfigError, DegenerateExtent, EmptyMesh, IoError, ParseError, SizeLimit, UnsupportedFormat,
)
from hallufix.mesh import (
    TriangleMesh, beveled_cube, corrupt, face_areas, icosphere, load_mesh, normalize_to_unit_box,
    sample_surface, save_mesh, vertex_normals, vertex_normals_raw, vertex_normals_vjp,
)

from conftest import single_triangle


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


# ---------------------------------------------------------------- I/O

def test_load_minimal_obj(tmp_path):
    p = write(tmp_path, "tri.obj", "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    m = load_mesh(p)
    assert m.vertex_count == 3 and m.face_count == 1


def test_obj_out_of_range_index(tmp_path):
    p = write(tmp_path, "bad.obj", "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 99\n")
    with pytest.raises(ParseError):
        load_mesh(p)


def test_obj_garbage_is_parse_error(tmp_path):
    p = write(tmp_path, "bad.obj", "v 0 zero 0\n")
    with pytest.raises(ParseError):
        load_mesh(p)


def test_obj_quads_and_negative_indices(tmp_path):
    p = write(tmp_path, "quad.obj", "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf -4 -3 -2 -1\n")
    m = load_mesh(p)
    assert m.face_count == 2
    assert np.isclose(face_areas(m).sum(), 1.0)


def test_degenerate_faces_dropped_and_counted(tmp_path):
    p = write(tmp_path, "d.obj", "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 2 0 0\nf 1 2 3\nf 1 2 4\n")
    m = load_mesh(p)
    assert m.face_count == 1 and m.dropped_faces == 1


def test_only_degenerate_faces_is_empty(tmp_path):
    p = write(tmp_path, "d.obj", "v 0 0 0\nv 1 0 0\nv 2 0 0\nf 1 2 3\n")
    with pytest.raises(EmptyMesh):
        load_mesh(p)


def test_missing_file_and_unknown_format(tmp_path):
    with pytest.raises(IoError):
        load_mesh(tmp_path / "nope.obj")
    p = write(tmp_path, "x.stl", "solid")
    with pytest.raises(UnsupportedFormat):
        load_mesh(p)


def test_obj_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(3)
    m = icosphere(2, 0.4)
    m = m.with_vertices(m.vertices + rng.normal(0, 1e-3, m.vertices.shape))
    save_mesh(m, tmp_path / "a.obj")
    back = load_mesh(tmp_path / "a.obj")
    assert np.array_equal(back.vertices, m.vertices)
    assert np.array_equal(back.faces, m.faces)


def test_ply_round_trip(tmp_path):
    m = icosphere(2, 0.4)
    save_mesh(m, tmp_path / "a.ply")
    once = load_mesh(tmp_path / "a.ply")
    # PLY stores float32: the first load is the float32 image, later trips are bit-identical
    assert np.array_equal(once.vertices, m.vertices.astype(np.float32).astype(np.float64))
    assert np.array_equal(once.faces, m.faces)
    save_mesh(once, tmp_path / "b.ply")
    twice = load_mesh(tmp_path / "b.ply")
    assert np.array_equal(twice.vertices, once.vertices)
    assert (tmp_path / "a.ply").read_bytes() == (tmp_path / "b.ply").read_bytes()


def test_ply_ascii_with_colors(tmp_path):
    text = (
        "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\n"
        "property float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\n"
        "element face 1\nproperty list uchar int vertex_indices\nend_header\n"
        "0 0 0 255 0 0\n1 0 0 0 255 0\n0 1 0 0 0 255\n3 0 1 2\n"
    )
    m = load_mesh(write(tmp_path, "c.ply", text))
    assert m.face_count == 1
    assert np.allclose(m.vertex_colors, np.eye(3))


def test_save_load_icosphere1_counts(tmp_path):
    m = icosphere(1)
    for name in ("s.obj", "s.ply"):
        save_mesh(m, tmp_path / name)
        back = load_mesh(tmp_path / name)
        assert back.vertex_count == 42 and back.face_count == 80


@pytest.mark.skipif(hasattr(os, "geteuid") and os.geteuid() == 0, reason="root ignores permissions")
def test_save_read_only_dir(tmp_path):
    d = tmp_path / "ro"
    d.mkdir()
    d.chmod(0o500)
    with pytest.raises(IoError):
        save_mesh(icosphere(0), d / "x.obj")


def test_save_into_missing_dir_is_io_error(tmp_path):
    with pytest.raises(IoError):
        save_mesh(icosphere(0), tmp_path / "missing" / "x.obj")


def test_save_empty_mesh():
    with pytest.raises(EmptyMesh):
        save_mesh(TriangleMesh(np.zeros((3, 3)), np.zeros((0, 3))), "never.obj")


def test_constructor_checks():
    with pytest.raises(ParseError):
        TriangleMesh(np.zeros((3, 3)), [[0, 1, 3]])
    with pytest.raises(ParseError):
        TriangleMesh(np.zeros((3, 3)), [[0, 1, 2]], vertex_colors=np.zeros((2, 3)))
    m = icosphere(0)
    with pytest.raises(ValueError):
        m.vertices[0, 0] = 1.0


# ---------------------------------------------------------------- normalization

def box_mesh(lo, hi):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], float)
    v = lo + corners * (hi - lo)
    f = np.array([[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5], [0, 4, 5], [0, 5, 1],
                  [2, 3, 7], [2, 7, 6], [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3]])
    return TriangleMesh(v, f)


def test_normalize_cube():
    out = normalize_to_unit_box(box_mesh([0, 0, 0], [2, 2, 2]))
    lo, hi = out.bounds()
    assert np.allclose(lo, -0.5) and np.allclose(hi, 0.5)


def test_normalize_segment_like():
    out = normalize_to_unit_box(box_mesh([0, 0, 0], [4, 1, 1]))
    lo, hi = out.bounds()
    assert np.allclose(lo, [-0.5, -0.125, -0.125], atol=1e-15)
    assert np.allclose(hi, [0.5, 0.125, 0.125], atol=1e-15)


def test_normalize_idempotent_and_sphere_fixed():
    m = icosphere(2, 0.5)
    assert np.abs(normalize_to_unit_box(m).vertices - m.vertices).max() < 1e-9
    once = normalize_to_unit_box(box_mesh([1, 2, 3], [2, 5, 4]))
    assert np.abs(normalize_to_unit_box(once).vertices - once.vertices).max() < 1e-12


def test_normalize_degenerate():
    with pytest.raises(DegenerateExtent):
        normalize_to_unit_box(TriangleMesh(np.ones((3, 3)), [[0, 1, 2]]))


@given(
    st.lists(st.floats(-10, 10), min_size=3, max_size=3),
    st.floats(0.01, 100),
    st.integers(0, 2**32 - 1),
)
def test_normalize_preserves_distance_ratios(shift, scale, seed):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(12, 3)) * scale + np.array(shift)
    m = TriangleMesh(v, icosphere(0).faces)
    out = normalize_to_unit_box(m)
    d_in = np.linalg.norm(v[:, None] - v[None], axis=-1)
    d_out = np.linalg.norm(out.vertices[:, None] - out.vertices[None], axis=-1)
    iu = np.triu_indices(12, 1)
    ratio = d_out[iu] / d_in[iu]
    assert np.all(np.abs(ratio / ratio[0] - 1.0) < 1e-9)
    lo, hi = out.bounds()
    assert np.allclose(lo + hi, 0.0, atol=1e-12)
    assert abs((hi - lo).max() - 1.0) < 1e-12
    assert np.abs(normalize_to_unit_box(out).vertices - out.vertices).max() < 1e-12


# ---------------------------------------------------------------- normals

def test_single_triangle_normals():
    n = vertex_normals(single_triangle())
    assert np.allclose(n, [0, 0, 1])


def test_coplanar_pair_normals():
    v = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], float)
    n = vertex_normals(TriangleMesh(v, [[0, 1, 2], [0, 2, 3]]))
    assert np.allclose(n, [0, 0, 1])


def test_icosphere_normals_close_to_radial():
    m = icosphere(3, 0.4)
    n = vertex_normals(m)
    radial = m.vertices / np.linalg.norm(m.vertices, axis=1, keepdims=True)
    ang = np.degrees(np.arccos(np.clip(np.sum(n * radial, axis=1), -1, 1)))
    assert ang.max() < 2.0


def test_isolated_vertex_gets_default(caplog):
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5]], float)
    with caplog.at_level("WARNING", logger="hallufix"):
        n = vertex_normals(TriangleMesh(v, [[0, 1, 2]]))
    assert np.allclose(n[3], [0, 0, 1])
    assert "isolated" in caplog.text


@given(st.integers(0, 2**32 - 1))
def test_normals_unit_length(seed):
    rng = np.random.default_rng(seed)
    m = icosphere(1, 0.4)
    v = m.vertices + rng.normal(0, 0.05, m.vertices.shape)
    n = vertex_normals(m.with_vertices(v))
    assert np.all(np.abs(np.linalg.norm(n, axis=1) - 1.0) < 1e-9)


def test_vertex_normals_vjp_matches_fd():
    rng = np.random.default_rng(0)
    m = icosphere(1, 0.4)
    v = m.vertices + rng.normal(0, 0.02, m.vertices.shape)
    g = rng.normal(size=v.shape)

    def f(x):
        return float(np.sum(vertex_normals_raw(x, m.faces)[0] * g))

    analytic = vertex_normals_vjp(v, m.faces, g)
    num = np.zeros_like(v)
    h = 1e-6
    for i in range(len(v)):
        for c in range(3):
            p, q = v.copy(), v.copy()
            p[i, c] += h
            q[i, c] -= h
            num[i, c] = (f(p) - f(q)) / (2 * h)
    assert np.linalg.norm(analytic - num) / np.linalg.norm(num) < 1e-6


# ---------------------------------------------------------------- sampling

def test_sample_count_and_determinism(sphere3):
    a = sample_surface(sphere3, 16384, 7)
    b = sample_surface(sphere3, 16384, 7)
    assert len(a) == 16384
    assert np.array_equal(a.points, b.points)
    assert not np.array_equal(a.points, sample_surface(sphere3, 16384, 8).points)


def test_sample_area_ratio():
    v = np.array([[0, 0, 0], [3, 0, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [0, 1, 1]], float)
    m = TriangleMesh(v, [[0, 1, 2], [3, 4, 5]])
    pc = sample_surface(m, 40000, 0)
    frac = np.mean(pc.face_index == 0)
    assert 0.74 <= frac <= 0.76


def test_samples_lie_on_surface(sphere2):
    pc = sample_surface(sphere2, 5000, 1)
    tri = sphere2.vertices[sphere2.faces[pc.face_index]]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    off_plane = np.abs(np.sum((pc.points - tri[:, 0]) * n, axis=1))
    assert off_plane.max() < 1e-9
    # inside the triangle: all barycentric coordinates non-negative
    for k in range(3):
        a, b = tri[:, (k + 1) % 3], tri[:, (k + 2) % 3]
        side = np.sum(np.cross(b - a, pc.points - a) * n, axis=1)
        assert side.min() > -1e-12


def test_sample_chi_square_ten_faces():
    rng = np.random.default_rng(11)
    tris = []
    for i in range(10):
        base = np.array([i * 2.0, 0, 0])
        s = rng.uniform(0.2, 1.5)
        tris.append([base, base + [s, 0, 0], base + [0, s * rng.uniform(0.5, 2), 0]])
    v = np.array(tris).reshape(-1, 3)
    m = TriangleMesh(v, np.arange(30).reshape(10, 3))
    pc = sample_surface(m, 100_000, 5)
    counts = np.bincount(pc.face_index, minlength=10)
    a = face_areas(m)
    p = stats.chisquare(counts, a / a.sum() * 100_000).pvalue
    assert p > 0.01


def test_sample_count_must_be_positive(sphere2):
    with pytest.raises(ConfigError):
        sample_surface(sphere2, 0, 0)


# ---------------------------------------------------------------- fixtures

@pytest.mark.parametrize("n", [0, 1, 2, 3])
def test_icosphere_counts_and_radius(n):
    m = icosphere(n, 0.7)
    assert m.vertex_count == 10 * 4**n + 2
    assert m.face_count == 20 * 4**n
    assert np.abs(np.linalg.norm(m.vertices, axis=1) - 0.7).max() < 1e-9


def test_icosphere_outward_winding():
    m = icosphere(2, 0.4)
    tri = m.vertices[m.faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    assert np.all(np.sum(n * tri.mean(axis=1), axis=1) > 0)


def test_icosphere_size_guard():
    with pytest.raises(SizeLimit):
        icosphere(7)
    with pytest.raises(ConfigError):
        icosphere(1, 0.0)


def test_corrupt_single_spike_on_symmetric_vertex():
    m = icosphere(2, 0.4)
    out, idx = corrupt(m, 1 / 162, 0.1, "spike", seed=11)
    assert len(idx) == 1
    r = np.linalg.norm(out.vertices, axis=1)
    assert abs(r[idx[0]] - 0.5) < 1e-9
    rest = np.delete(r, idx)
    assert np.abs(rest - 0.4).max() < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_corrupt_single_spike_any_vertex(seed):
    # area-weighted normals are radial only up to ~1.4 degrees on icosphere(2)
    m = icosphere(2, 0.4)
    out, idx = corrupt(m, 1 / 162, 0.1, "spike", seed=seed)
    assert len(idx) == 1
    assert abs(np.linalg.norm(out.vertices[idx[0]]) - 0.5) < 3e-5


def test_corrupt_zero_magnitude_and_determinism(sphere2):
    out, idx = corrupt(sphere2, 0.05, 0.0, "spike", 4)
    assert np.array_equal(out.vertices, sphere2.vertices)
    _, idx2 = corrupt(sphere2, 0.05, 0.2, "dent", 4)
    assert np.array_equal(idx, idx2)
    assert len(idx) == math.ceil(0.05 * 162)


def test_corrupt_dent_moves_inward(sphere2):
    out, idx = corrupt(sphere2, 0.1, 0.05, "dent", 0)
    assert np.all(np.linalg.norm(out.vertices[idx], axis=1) < 0.4)


@given(st.floats(0.01, 1.0), st.just(0.0) | st.floats(1e-3, 0.2) | st.floats(-0.2, -1e-3), st.sampled_from(["spike", "dent"]),
       st.integers(0, 2**32 - 1))
def test_corrupt_touches_only_reported(fraction, magnitude, mode, seed):
    m = icosphere(1, 0.4)
    out, idx = corrupt(m, fraction, magnitude, mode, seed)
    assert len(idx) == math.ceil(round(fraction * m.vertex_count, 9))
    changed = np.flatnonzero(np.any(out.vertices != m.vertices, axis=1))
    assert set(changed) <= set(idx.tolist())
    if magnitude != 0:
        assert set(changed) == set(idx.tolist())
    assert np.array_equal(out.faces, m.faces)


def test_corrupt_bad_fraction(sphere2):
    with pytest.raises(ConfigError):
        corrupt(sphere2, 0.0, 0.1)
    with pytest.raises(ConfigError):
        corrupt(sphere2, 1.5, 0.1)


def test_beveled_cube_is_closed_and_labeled():
    m, labels = beveled_cube(0.25)
    from hallufix.mesh import edge_faces

    _, adj = edge_faces(m.faces)
    assert np.all(adj[:, 1] >= 0)  # every edge shared by two faces
    assert len(labels["ridge"]) > 0 and len(labels["flat"]) > 0
    assert not set(labels["ridge"]) & set(labels["flat"])
    tri = m.vertices[m.faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    assert np.all(np.sum(n * tri.mean(axis=1), axis=1) > 0)
