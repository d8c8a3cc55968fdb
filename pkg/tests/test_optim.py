import dataclasses
import json

import numpy as np
import pytest

from hallufix import losses, optim, render
from hallufix.errors import ConfigError, NonFiniteLoss
from hallufix.mesh import corrupt, icosphere, load_mesh


@pytest.fixture(scope="module")
def refs64(sphere3):
    return optim.make_references(sphere3, 64)


@pytest.fixture(scope="module")
def small_setup():
    rng = np.random.default_rng(0)
    base = icosphere(2, 0.35)
    mesh = base.with_vertices(base.vertices + rng.normal(0, 0.003, base.vertices.shape))
    refs = optim.make_references(icosphere(2, 0.4), 32)
    v = base.vertices
    az = np.degrees(np.arctan2(v[:, 0], v[:, 2])) % 90
    el = np.degrees(np.arcsin(v[:, 1] / 0.35))
    rows = list(np.flatnonzero((np.abs(az - 45) < 12) & (np.abs(el) < 20)))
    return mesh, refs, rows


# ---------------------------------------------------------------- references

def test_reference_discs_equal_area(refs64):
    areas = refs64.valid.sum(axis=(1, 2))
    assert len(refs64.views) == 4
    assert areas.max() / areas.min() - 1 < 0.01
    assert refs64.masks.shape == refs64.normals.shape[:3]


def test_reference_center_normal(refs64):
    for n in refs64.normals:
        c = n[31:33, 31:33].reshape(-1, 3).mean(axis=0)
        assert np.degrees(np.arccos(np.clip(c @ [0, 0, 1] / np.linalg.norm(c), -1, 1))) < 3


def test_reference_vertex_normals_unit(refs64, sphere3):
    vn, ok = refs64.vertex_references(sphere3)
    assert ok.any(axis=0).all()
    assert np.allclose(np.linalg.norm(vn[ok], axis=1), 1, atol=1e-6)


def test_references_deterministic(sphere2):
    a = optim.make_references(sphere2, 32)
    b = optim.make_references(sphere2, 32)
    for x, y in zip((a.masks, a.valid, a.normals), (b.masks, b.valid, b.normals)):
        assert np.array_equal(x, y)


# ---------------------------------------------------------------- config

def test_config_validation():
    for bad in (dict(coarse_iters=-1), dict(learning_rate=0), dict(lambda1=-1), dict(ring_count=7),
                dict(se_reduction="max"), dict(soft_sigma=0)):
        with pytest.raises(ConfigError):
            optim.OptimConfig(**bad)
    cfg = optim.OptimConfig.from_dict({"lambda1": 0.2, "ring_count": 24})
    assert cfg.lambda1 == 0.2 and cfg.ring_count == 24
    with pytest.raises(ConfigError, match="lambda_1"):
        optim.OptimConfig.from_dict({"lambda_1": 0.2})


# ---------------------------------------------------------------- driver

def test_zero_iterations_identity(sphere2):
    refs = optim.make_references(sphere2, 32)
    cfg = optim.OptimConfig(coarse_iters=0, cvcr_iters=0, resolution=32)
    out, trace = optim.refine(sphere2, refs, cfg)
    assert np.array_equal(out.vertices, sphere2.vertices) and trace == []


def test_trace_length_tags_topology_and_determinism(sphere2):
    gt = icosphere(2, 0.4)
    refs = optim.make_references(gt, 32)
    bad, _ = corrupt(gt, 0.05, 0.1, "spike", 0)
    cfg = optim.OptimConfig(coarse_iters=4, cvcr_iters=3, resolution=32, ring_count=24)
    out, trace = optim.refine(bad, refs, cfg)
    assert len(trace) == 7
    assert [r.stage for r in trace] == ["coarse"] * 4 + ["cvcr"] * 3
    assert np.array_equal(out.faces, bad.faces)
    assert all(np.isfinite(r.total) for r in trace)
    again, trace2 = optim.refine(bad, refs, cfg)
    assert np.array_equal(out.vertices, again.vertices)
    assert [r.total for r in trace] == [r.total for r in trace2]


def test_spiked_coarse_run_reduces_loss(sphere3, refs64):
    bad, _ = corrupt(sphere3, 0.05, 0.15, "spike", 0)
    _, trace = optim.coarse_stage(bad, refs64, optim.OptimConfig(coarse_iters=100))
    totals = np.array([r.total for r in trace])
    assert totals[-1] < 0.5 * totals[0]
    moving_min = np.minimum.accumulate(totals)
    assert moving_min[-1] < moving_min[len(totals) // 2] < moving_min[0]


def _self_reference_trace(sphere3, refs64):
    _, trace = optim.coarse_stage(sphere3, refs64, optim.OptimConfig(coarse_iters=60))
    return np.array([r.total for r in trace])


def test_self_reference_final_below_initial(sphere3, refs64):
    totals = _self_reference_trace(sphere3, refs64)
    assert totals[-1] < totals[0]


@pytest.mark.xfail(strict=True, reason="adaptive steps jitter around a near-stationary start; see notes")
def test_self_reference_mostly_non_increasing(sphere3, refs64):
    totals = _self_reference_trace(sphere3, refs64)
    assert np.mean(np.diff(totals) <= 0) >= 0.95


def test_cvcr_zero_weights_ignore_ring(small_setup):
    mesh, refs, _ = small_setup
    outs = []
    for ring in (24, 72):
        cfg = optim.OptimConfig(cvcr_iters=5, resolution=32, ring_count=ring, lambda1=0.0, lambda2=0.0)
        outs.append(optim.cvcr_stage(mesh, refs, cfg)[0].vertices)
    assert np.array_equal(outs[0], outs[1])


def test_weight_zero_removes_exactly_that_term(small_setup):
    mesh, refs, _ = small_setup
    base = optim.OptimConfig(resolution=32, ring_count=24)

    def grad(l1, l2):
        return optim.cvcr_objective(mesh, refs, dataclasses.replace(base, lambda1=l1, lambda2=l2))[1]

    g00, g10, g01, g11 = grad(0, 0), grad(1, 0), grad(0, 1), grad(1, 1)
    dc, ds = g10 - g00, g01 - g00
    assert np.linalg.norm(dc) > 0 and np.linalg.norm(ds) > 0
    assert np.allclose(g11, g00 + dc + ds, atol=1e-12, rtol=1e-9)
    assert np.allclose(grad(0.3, 0), g00 + 0.3 * dc, atol=1e-12, rtol=1e-9)


def test_non_finite_loss_raises(sphere2):
    def bad_objective(m):
        rep = losses.make_report({"mask": float("nan")}, {"mask": 1.0})
        return rep, np.zeros_like(m.vertices)

    cfg = optim.OptimConfig(coarse_iters=3)
    with pytest.raises(NonFiniteLoss) as exc:
        optim._run_stage(sphere2, bad_objective, 3, cfg, "coarse")
    assert exc.value.iteration == 0


def test_divergence_guard_halves_learning_rate(sphere2):
    calls = []

    def objective(m):
        total = 1.0 if not calls else 100.0
        calls.append(total)
        return losses.make_report({"mask": total}, {"mask": 1.0}), np.ones_like(m.vertices)

    cfg = optim.OptimConfig(learning_rate=0.1)
    out, _ = optim._run_stage(sphere2, objective, 6, cfg, "coarse")
    # steps of 0.1, then 0.05, 0.025, 0.0125 and two more at the floor
    moved = sphere2.vertices - out.vertices
    assert np.allclose(moved, 0.1 + 0.05 + 0.025 + 3 * 0.0125, rtol=1e-6)


def test_write_trace_and_dumps(tmp_path, sphere2):
    refs = optim.make_references(sphere2, 32)
    cfg = optim.OptimConfig(coarse_iters=4, cvcr_iters=0, resolution=32, dump_every=2)
    out, trace = optim.refine(sphere2, refs, cfg, dump_dir=tmp_path)
    optim.write_trace(trace, tmp_path / "trace.jsonl")
    lines = (tmp_path / "trace.jsonl").read_text().splitlines()
    assert len(lines) == 4
    rec = json.loads(lines[0])
    assert rec["stage"] == "coarse" and "total" in rec
    dumps = sorted(p.name for p in tmp_path.glob("coarse_*.obj"))
    assert dumps == ["coarse_00002.obj", "coarse_00004.obj"]
    assert np.allclose(load_mesh(tmp_path / "coarse_00004.obj").vertices, out.vertices, atol=1e-6)


# ---------------------------------------------------------------- Adam

def test_adam_first_step_moves_by_lr():
    rng = np.random.default_rng(0)
    g = rng.normal(size=(10, 3))
    per = optim.Adam(g.shape, 0.01, shared_scale=False).step(np.zeros_like(g), g)
    assert np.allclose(np.abs(per), 0.01, rtol=1e-5)
    shared = optim.Adam(g.shape, 0.01).step(np.zeros_like(g), g)
    assert np.allclose(shared, -0.01 * g / np.sqrt(np.mean(g * g)), rtol=1e-5)


# ---------------------------------------------------------------- FD oracle

def test_fd_oracle_quadratic(sphere2):
    v0 = sphere2.vertices * 0.9
    fd = optim.finite_diff_oracle(lambda m: float(np.sum((m.vertices - v0) ** 2)), sphere2, 1e-5)
    assert np.abs(fd - 2 * (sphere2.vertices - v0)).max() < 1e-6
    at_min = optim.finite_diff_oracle(lambda m: float(np.sum((m.vertices - v0) ** 2)),
                                      sphere2.with_vertices(v0), 1e-5)
    assert np.abs(at_min).max() < 1e-6


def test_fd_oracle_step_range(sphere2):
    for step in (1e-7, 1e-3):
        with pytest.raises(ConfigError):
            optim.finite_diff_oracle(lambda m: 0.0, sphere2, step)


def _crossing_free(mesh, views, rows, step):
    """Rows whose +-step moves leave every pixel on the same face in every view."""
    base = [b.face_id for b in render.rasterize_many(mesh, views, with_normals=False)]
    keep = []
    for i in rows:
        same = True
        for c in range(3):
            for sgn in (1.0, -1.0):
                v = np.array(mesh.vertices)
                v[i, c] += sgn * step
                bufs = render.rasterize_many(mesh.with_vertices(v), views, with_normals=False)
                same &= all(np.array_equal(a, b.face_id) for a, b in zip(base, bufs))
        if same:
            keep.append(i)
    return keep


@pytest.mark.parametrize("lambdas", [(0.0, 0.0), (0.5, 0.0)])
def test_fd_oracle_matches_analytic(small_setup, lambdas):
    mesh, refs, rows = small_setup
    cfg = optim.OptimConfig(resolution=32, ring_count=24, lambda1=lambdas[0], lambda2=lambdas[1])
    ring = render.make_ring(24, 0.0, refs.views[0])
    rows = _crossing_free(mesh, list(refs.views) + list(ring.views), rows, 1e-5)
    assert len(rows) >= 4
    analytic = optim.cvcr_objective(mesh, refs, cfg)[1]
    fd = optim.finite_diff_oracle(lambda m: optim.cvcr_objective(m, refs, cfg)[0].total, mesh, 1e-5, rows)
    rel = np.linalg.norm(analytic[rows] - fd[rows]) / np.linalg.norm(fd[rows])
    assert rel < 1e-3
