"""Analytic-vs-finite-difference checks for every loss term.

Each check draws a random small mesh and camera setup, freezes coverage,
and compares the analytic vertex gradient with central differences of the
same frozen-coverage loss on a random subset of vertices.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.spatial.transform import Rotation

from hallufix import losses, render
from hallufix.mesh import TriangleMesh, icosphere, vertex_normals_raw, vertex_normals_vjp

LOSS_NAMES = ("mask", "normal", "SE", "DC", "DS")


@dataclass(frozen=True)
class GradcheckConfig:
    instances: int = 20
    step: float = 1e-5
    tolerance: float = 1e-3
    resolution: int = 32
    subdivisions: int = 2  # 162 vertices
    probe_vertices: int = 16
    ring_count: int = 24
    seed: int = 0


@dataclass
class CheckResult:
    loss: str
    instance: int
    rel_error: float
    passed: bool


def random_instance(rng: np.random.Generator, subdivisions: int = 2) -> TriangleMesh:
    base = icosphere(subdivisions, 0.3)
    rot = Rotation.from_rotvec(rng.normal(size=3)).as_matrix()
    stretch = rng.uniform(0.8, 1.2, size=3)
    v = (base.vertices * stretch) @ rot.T
    v = v + rng.normal(0.0, 0.01, v.shape)
    return TriangleMesh(v, base.faces)


def _template(cfg: GradcheckConfig) -> render.ViewSpec:
    return render.ViewSpec(resolution=(cfg.resolution, cfg.resolution))


def _random_views(rng, cfg, count):
    t = _template(cfg)
    return [
        dataclasses.replace(t, azimuth=float(rng.uniform(0, 360)), elevation=float(rng.uniform(-40, 40)))
        for _ in range(count)
    ]


def _setup(name: str, mesh: TriangleMesh, rng, cfg: GradcheckConfig):
    """Return ``(frozen_loss(vertices) -> float, analytic_grad)``."""
    faces = mesh.faces
    normals = vertex_normals_raw(mesh.vertices, faces)[0]
    if name == "mask":
        views = _random_views(rng, cfg, 4)
        supports = [render.soft_mask(mesh, v, 1.0)[1] for v in views]
        refs = rng.uniform(0.0, 1.0, (4, cfg.resolution, cfg.resolution))

        def f(verts):
            soft = np.stack([render.frozen_soft_mask(verts, s) for s in supports])
            return losses.mask_loss(refs, soft)[0]

        _, g, _ = losses.mask_loss(refs, np.stack([s.value for s in supports]))
        grad = sum(render.soft_mask_vjp(mesh, s, gi) for s, gi in zip(supports, g))
        return f, grad
    if name == "normal":
        views = _random_views(rng, cfg, 4)
        bufs = [render.rasterize(mesh, v, normals) for v in views]
        valid = np.stack([b.covered for b in bufs])
        refs = rng.normal(size=valid.shape + (3,))
        refs /= np.linalg.norm(refs, axis=-1, keepdims=True)

        def f(verts):
            rendered = np.stack([render.frozen_normals(verts, faces, b) for b in bufs])
            return losses.normal_loss(refs, rendered, valid)[0]

        _, g, _ = losses.normal_loss(refs, np.stack([b.normal for b in bufs]), valid)
        grad = sum(render.backproject_normal_gradients(mesh, v, b, gi) for v, b, gi in zip(views, bufs, g))
        return f, grad
    if name == "SE":
        views = _random_views(rng, cfg, 4)
        bufs = [render.rasterize(mesh, v, normals) for v in views]
        stats = [render.vertex_view_stats(mesh, v, b) for v, b in zip(views, bufs)]
        visible = np.stack([s.visible for s in stats])
        area = np.stack([s.projected_area for s in stats])
        refs = rng.normal(size=(4, mesh.vertex_count, 3))
        refs /= np.linalg.norm(refs, axis=-1, keepdims=True)

        def f(verts):
            return losses.se_loss(vertex_normals_raw(verts, faces)[0], refs, visible, area)[0]

        _, gn, _ = losses.se_loss(normals, refs, visible, area)
        return f, vertex_normals_vjp(mesh.vertices, faces, gn)
    if name in ("DC", "DS"):
        ring = render.make_ring(cfg.ring_count, float(rng.uniform(-20, 20)), _template(cfg))
        bufs = render.rasterize_many(mesh, ring.views, normals)
        valid = np.stack([b.covered for b in bufs])
        depths = np.stack([b.depth for b in bufs])
        if name == "DC":
            def term(d):
                return losses.dc_loss_from_depths(d, valid)[:2]
        else:
            colors = [render.shaded_image(b, faces) for b in bufs]

            def term(d):
                total, grads = 0.0, np.zeros_like(d)
                for i in range(len(d)):
                    val, gi = losses.ds_loss(d[i], colors[i], valid[i])
                    total += val
                    grads[i] = gi
                return total, grads

        def f(verts):
            return term(np.stack([render.frozen_depth(verts, faces, b) for b in bufs]))[0]

        _, g = term(depths)
        grad = sum(render.backproject_depth_gradients(mesh, v, b, np.where(b.covered, gi, 0.0))
                   for v, b, gi in zip(ring.views, bufs, g))
        return f, grad
    raise KeyError(name)


def central_differences(f: Callable, vertices: np.ndarray, rows, step: float) -> np.ndarray:
    out = np.zeros((len(rows), 3))
    v = np.array(vertices, dtype=np.float64)
    for n, i in enumerate(rows):
        for c in range(3):
            old = v[i, c]
            v[i, c] = old + step
            fp = f(v)
            v[i, c] = old - step
            fm = f(v)
            v[i, c] = old
            out[n, c] = (fp - fm) / (2.0 * step)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_loss(name: str, instance: int, cfg: GradcheckConfig = GradcheckConfig()) -> CheckResult:
    rng = np.random.default_rng([cfg.seed, LOSS_NAMES.index(name), instance])
    mesh = random_instance(rng, cfg.subdivisions)
    f, grad = _setup(name, mesh, rng, cfg)
    # probe vertices that actually receive gradient, plus a couple that do not
    active = np.flatnonzero(np.linalg.norm(grad, axis=1) > 0)
    pool = active if len(active) else np.arange(mesh.vertex_count)
    rows = np.sort(rng.choice(pool, size=min(cfg.probe_vertices, len(pool)), replace=False))
    numeric = central_differences(f, mesh.vertices, rows, cfg.step)
    err = relative_error(grad[rows], numeric)
    return CheckResult(name, instance, err, err < cfg.tolerance)


def run(cfg: GradcheckConfig = GradcheckConfig(), names=LOSS_NAMES) -> list:
    return [check_loss(n, i, cfg) for n in names for i in range(cfg.instances)]
