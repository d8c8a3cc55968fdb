"""Two-stage vertex optimization: coarse reconstruction, then cyclic refinement.

Both stages share one Adam-style updater. Coverage, visibility and exposure
weights are recomputed from a fresh render at every iteration and held fixed
while that iteration's gradient is evaluated.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy import ndimage

from hallufix import losses, render
from hallufix.errors import ConfigError, NonFiniteLoss
from hallufix.mesh import TriangleMesh, save_mesh, vertex_normals_raw, vertex_normals_vjp

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimConfig:
    coarse_iters: int = 200
    cvcr_iters: int = 300
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    shared_scale: bool = True
    se_reduction: str = "mean"
    ds_normalize: bool = True
    dc_normalize: bool = True
    se_depth_test_px: Optional[float] = 2.0
    lambda1: float = 0.5
    lambda2: float = 1.2
    ring_count: int = 72
    ring_elevation: float = 0.0
    soft_sigma: float = 1.0
    resolution: int = 64
    ortho_half_extent: float = 0.5
    ref_search_px: float = 2.0
    seed: int = 0
    dump_every: int = 0

    def __post_init__(self):
        if self.coarse_iters < 0 or self.cvcr_iters < 0:
            raise ConfigError("iteration counts must be >= 0")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda1 and lambda2 must be >= 0")
        if self.ring_count not in render.SUPPORTED_RING_COUNTS:
            raise ConfigError(f"ring_count must be one of {render.SUPPORTED_RING_COUNTS}")
        if self.se_reduction not in ("sum", "mean"):
            raise ConfigError("se_reduction must be 'sum' or 'mean'")
        if not self.soft_sigma > 0:
            raise ConfigError("soft_sigma must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "OptimConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(f"unknown optimizer config key(s): {', '.join(unknown)}")
        return cls(**data)

    def view_template(self) -> render.ViewSpec:
        return render.ViewSpec(
            ortho_half_extent=self.ortho_half_extent,
            resolution=(self.resolution, self.resolution),
        )


@dataclass(frozen=True)
class ReferenceSet:
    """Supervision for the four orthographic views.

    ``masks`` are soft silhouettes, ``valid`` the hard coverage and
    ``normals`` camera-space normal maps, all stacked over the 4 views.
    """

    views: tuple
    masks: np.ndarray
    valid: np.ndarray
    normals: np.ndarray
    search_px: float = 2.0
    _nearest: tuple = field(default=(), repr=False, compare=False)

    def vertex_references(self, mesh: TriangleMesh):
        """World-space reference normal per (view, vertex) and its validity.

        A vertex takes the normal of the covered reference pixel nearest to
        its projection; it is invalid if that pixel is more than
        ``search_px`` pixels away or the projection leaves the image.
        """
        n_views = len(self.views)
        refs = np.zeros((n_views, mesh.vertex_count, 3))
        ok = np.zeros((n_views, mesh.vertex_count), dtype=bool)
        for i, view in enumerate(self.views):
            dist, (ni, nj) = self._nearest[i]
            cam = view.to_camera(mesh.vertices)
            hx, hy = view.half_extents
            k = view.pixels_per_unit
            j = np.floor((cam[:, 0] + hx) * k).astype(np.int64)
            r = np.floor((hy - cam[:, 1]) * k).astype(np.int64)
            h, w = self.valid[i].shape
            inside = (r >= 0) & (r < h) & (j >= 0) & (j < w)
            rr, jj = r[inside], j[inside]
            good = dist[rr, jj] <= self.search_px
            idx = np.flatnonzero(inside)[good]
            src = self.normals[i][ni[rr[good], jj[good]], nj[rr[good], jj[good]]]
            refs[i, idx] = src @ view.rotation
            ok[i, idx] = True
        return refs, ok


def make_references(gt_mesh: TriangleMesh, resolution: int = 64, cfg: Optional[OptimConfig] = None) -> ReferenceSet:
    """Render masks and normal maps of ``gt_mesh`` from the 4 orthographic views."""
    cfg = cfg or OptimConfig(resolution=resolution)
    template = dataclasses.replace(cfg.view_template(), resolution=(resolution, resolution))
    views = render.orthographic_views(template)
    normals = vertex_normals_raw(gt_mesh.vertices, gt_mesh.faces)[0]
    masks, valid, nmaps, nearest = [], [], [], []
    for view in views:
        buf = render.rasterize(gt_mesh, view, normals)
        soft, _ = render.soft_mask(gt_mesh, view, cfg.soft_sigma, buf)
        masks.append(soft)
        valid.append(buf.covered)
        nmaps.append(np.asarray(buf.normal))
        dist, inds = ndimage.distance_transform_edt(~buf.covered, return_indices=True)
        nearest.append((dist, (inds[0], inds[1])))
    arrays = [np.stack(a) for a in (masks, valid, nmaps)]
    for a in arrays:
        a.setflags(write=False)
    return ReferenceSet(views, *arrays, search_px=cfg.ref_search_px, _nearest=tuple(nearest))


# --------------------------------------------------------------------------
# objectives

def _orthographic_terms(mesh: TriangleMesh, refs: ReferenceSet, sigma: float, normals):
    bufs = [render.rasterize(mesh, v, normals) for v in refs.views]
    soft = [render.soft_mask(mesh, v, sigma, b) for v, b in zip(refs.views, bufs)]
    rendered_masks = np.stack([s[0] for s in soft])
    rendered_normals = np.stack([b.normal for b in bufs])
    normal_valid = refs.valid & np.stack([b.covered for b in bufs])
    return bufs, soft, rendered_masks, rendered_normals, normal_valid


def _orthographic_backward(mesh, refs, bufs, soft, grads, normals):
    grad = np.zeros((mesh.vertex_count, 3))
    gn = np.zeros((mesh.vertex_count, 3))
    for i, view in enumerate(refs.views):
        grad += render.soft_mask_vjp(mesh, soft[i][1], grads["mask"][i])
        pos, gvn = render.backproject_normal_gradients(
            mesh, view, bufs[i], grads["normal"][i], normals, split=True
        )
        grad += pos
        gn += gvn
    return grad, gn


def coarse_objective(mesh: TriangleMesh, refs: ReferenceSet, cfg: OptimConfig):
    """``mask + normal + SE`` and its gradient w.r.t. vertex positions."""
    normals = vertex_normals_raw(mesh.vertices, mesh.faces)[0]
    bufs, soft, rmask, rnorm, nvalid = _orthographic_terms(mesh, refs, cfg.soft_sigma, normals)
    stats = [render.vertex_view_stats(mesh, v, b, cfg.se_depth_test_px) for v, b in zip(refs.views, bufs)]
    ref_vn, ref_ok = refs.vertex_references(mesh)
    visible = np.stack([s.visible for s in stats]) & ref_ok
    visible &= np.stack([s.projected_area for s in stats]) > 0
    area = np.stack([s.projected_area for s in stats])
    report, grads = losses.coarse_loss(
        refs.masks, rmask, refs.normals, rnorm, nvalid, normals, ref_vn, visible, area,
        se_reduction=cfg.se_reduction,
    )
    grad, gn = _orthographic_backward(mesh, refs, bufs, soft, grads, normals)
    gn += grads["SE"]
    grad += vertex_normals_vjp(mesh.vertices, mesh.faces, gn)
    return report, grad


def cvcr_objective(mesh: TriangleMesh, refs: ReferenceSet, cfg: OptimConfig, ring: Optional[render.ViewRing] = None):
    """``mask + normal + lambda1 DC + lambda2 DS`` and its vertex gradient."""
    if ring is None:
        template = dataclasses.replace(cfg.view_template(), resolution=refs.views[0].resolution)
        ring = render.make_ring(cfg.ring_count, cfg.ring_elevation, template)
    normals = vertex_normals_raw(mesh.vertices, mesh.faces)[0]
    bufs, soft, rmask, rnorm, nvalid = _orthographic_terms(mesh, refs, cfg.soft_sigma, normals)
    ring_bufs = render.rasterize_many(mesh, ring.views, with_normals=False)
    depths = np.stack([b.depth for b in ring_bufs])
    valid = np.stack([b.covered for b in ring_bufs])
    colors = [render.shaded_image(b, mesh.faces) for b in ring_bufs]
    report, grads = losses.cvcr_loss(
        refs.masks, rmask, refs.normals, rnorm, nvalid,
        depths, valid, colors, cfg.lambda1, cfg.lambda2, ds_normalize=cfg.ds_normalize, dc_normalize=cfg.dc_normalize,
    )
    grad, gn = _orthographic_backward(mesh, refs, bufs, soft, grads, normals)
    grad += vertex_normals_vjp(mesh.vertices, mesh.faces, gn)
    depth_grad = np.zeros_like(depths)
    for name in ("DC", "DS"):
        if name in grads:
            depth_grad += grads[name]
    if np.any(depth_grad):
        grad += render.backproject_depth_gradients_many(
            mesh, ring.views, ring_bufs, np.where(valid, depth_grad, 0.0)
        )
    return report, grad


# --------------------------------------------------------------------------
# driver

class Adam:
    """Adam-style first/second moment updater.

    With ``shared_scale`` (the default) the second moment is a single running
    mean of the squared gradient over all coordinates, so vertices with large
    gradients move proportionally faster than nearly-converged ones. The
    per-coordinate form is kept for comparison.
    """

    def __init__(self, shape, lr, beta1=0.9, beta2=0.999, eps=1e-8, shared_scale=True):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.shared_scale = shared_scale
        self.m = np.zeros(shape)
        self.v = 0.0 if shared_scale else np.zeros(shape)
        self.t = 0

    def step(self, params, grad):
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        sq = float(np.mean(grad * grad)) if self.shared_scale else grad * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * sq
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _run_stage(mesh: TriangleMesh, objective: Callable, iters: int, cfg: OptimConfig, stage: str,
               dump_dir=None, on_iteration=None):
    verts = np.array(mesh.vertices)
    opt = Adam(verts.shape, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.shared_scale)
    trace = []
    initial = None
    halvings = 0
    for it in range(iters):
        current = mesh.with_vertices(verts)
        report, grad = objective(current)
        report.stage = stage
        if not np.isfinite(report.total) or not np.all(np.isfinite(grad)):
            raise NonFiniteLoss(
                f"{stage} stage: non-finite loss or gradient at iteration {it}",
                iteration=it, terms=report.terms,
            )
        if initial is None:
            initial = report.total
        elif initial > 0 and report.total > 10.0 * initial and halvings < 3:
            opt.lr *= 0.5
            halvings += 1
            log.warning("%s: loss %.4g > 10x initial, learning rate halved to %.3g", stage, report.total, opt.lr)
        trace.append(report)
        if on_iteration is not None:
            on_iteration(stage, it, report)
        verts = opt.step(verts, grad)
        if dump_dir is not None and cfg.dump_every and (it + 1) % cfg.dump_every == 0:
            save_mesh(mesh.with_vertices(verts), Path(dump_dir) / f"{stage}_{it + 1:05d}.obj")
    return mesh.with_vertices(verts), trace


def coarse_stage(mesh: TriangleMesh, refs: ReferenceSet, cfg: OptimConfig, **kwargs):
    """Minimize ``mask + normal + SE`` for ``cfg.coarse_iters`` steps."""
    return _run_stage(mesh, lambda m: coarse_objective(m, refs, cfg), cfg.coarse_iters, cfg, "coarse", **kwargs)


def cvcr_stage(mesh: TriangleMesh, refs: ReferenceSet, cfg: OptimConfig, **kwargs):
    """Minimize the cyclic-refinement objective for ``cfg.cvcr_iters`` steps."""
    template = dataclasses.replace(cfg.view_template(), resolution=refs.views[0].resolution)
    ring = render.make_ring(cfg.ring_count, cfg.ring_elevation, template)
    return _run_stage(mesh, lambda m: cvcr_objective(m, refs, cfg, ring), cfg.cvcr_iters, cfg, "cvcr", **kwargs)


def refine(mesh: TriangleMesh, refs: ReferenceSet, cfg: OptimConfig, **kwargs):
    """Coarse stage followed by the cyclic refinement stage.

    Returns the refined mesh and the concatenated per-iteration reports,
    each tagged with its stage.
    """
    coarse, t1 = coarse_stage(mesh, refs, cfg, **kwargs)
    refined, t2 = cvcr_stage(coarse, refs, cfg, **kwargs)
    return refined, t1 + t2


def write_trace(trace, path) -> None:
    with open(path, "w") as fh:
        for i, rep in enumerate(trace):
            fh.write(rep.to_json(i) + "\n")


def finite_diff_oracle(loss_fn: Callable, mesh: TriangleMesh, step: float = 1e-5, vertices=None) -> np.ndarray:
    """Central differences of ``loss_fn(mesh)`` w.r.t. every vertex coordinate.

    ``vertices`` optionally restricts the differentiated rows; other rows are
    left at zero. Meant for small test meshes only.
    """
    if not 1e-6 <= step <= 1e-4:
        raise ConfigError("finite-difference step must be in [1e-6, 1e-4]")
    base = np.array(mesh.vertices)
    rows = range(len(base)) if vertices is None else vertices
    out = np.zeros_like(base)
    for i in rows:
        for c in range(3):
            plus = base.copy()
            plus[i, c] += step
            minus = base.copy()
            minus[i, c] -= step
            out[i, c] = (loss_fn(mesh.with_vertices(plus)) - loss_fn(mesh.with_vertices(minus))) / (2.0 * step)
    return out
