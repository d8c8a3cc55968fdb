"""Orthographic software rasterizer and its analytic vertex gradients.

Conventions
-----------
World space is y-up. A view with azimuth ``a`` and elevation ``e`` looks at
the origin from direction ``(cos e sin a, sin e, cos e cos a)``. Camera space
has x to the right, y up and z pointing towards the camera, so front-facing
surfaces have camera normals with positive z and counter-clockwise winding in
the camera xy plane. Depth is measured from the camera plane, which sits at
``distance`` from the origin: ``depth = distance - z_cam``.

Images are ``(H, W)`` numpy arrays with row 0 at the top. Pixel ``(i, j)``
has its center at camera ``x = -hx + (j + .5) * 2hx / W`` and
``y = hy - (i + .5) * 2hy / H`` where ``hx`` is ``ortho_half_extent`` and
``hy = hx * H / W``.
"""

from __future__ import annotations

import functools
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numba
import numpy as np

from hallufix.errors import ConfigError, IoError, ShapeMismatch, UnsupportedCount
from hallufix.mesh import TriangleMesh, edge_faces, vertex_normals_raw, vertex_normals_vjp

log = logging.getLogger(__name__)

SUPPORTED_RING_COUNTS = (24, 36, 72, 120)


@dataclass(frozen=True)
class ViewSpec:
    azimuth: float = 0.0
    elevation: float = 0.0
    ortho_half_extent: float = 0.5
    resolution: tuple = (64, 64)
    near: float = 0.5
    far: float = 3.5
    distance: float = 2.0

    def __post_init__(self):
        w, h = self.resolution
        if w < 8 or h < 8:
            raise ConfigError(f"resolution {self.resolution} below 8x8")
        if w > 512 or h > 512:
            raise ConfigError(f"resolution {self.resolution} above 512x512")
        if not self.near < self.far:
            raise ConfigError("near must be smaller than far")
        if not self.ortho_half_extent > 0:
            raise ConfigError("ortho_half_extent must be positive")
        object.__setattr__(self, "resolution", (int(w), int(h)))

    @property
    def width(self) -> int:
        return self.resolution[0]

    @property
    def height(self) -> int:
        return self.resolution[1]

    @property
    def half_extents(self) -> tuple[float, float]:
        hx = float(self.ortho_half_extent)
        return hx, hx * self.height / self.width

    @property
    def pixels_per_unit(self) -> float:
        return self.width / (2.0 * self.ortho_half_extent)

    @functools.cached_property
    def rotation(self) -> np.ndarray:
        """World-to-camera rotation; rows are the camera x, y, z axes."""
        a = math.radians(self.azimuth)
        e = math.radians(self.elevation)
        forward = np.array([math.cos(e) * math.sin(a), math.sin(e), math.cos(e) * math.cos(a)])
        right = np.array([math.cos(a), 0.0, -math.sin(a)])
        up = np.cross(forward, right)
        r = np.stack([right, up, forward])
        r.setflags(write=False)
        return r

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Camera-plane x (per column) and y (per row) of pixel centers."""
        hx, hy = self.half_extents
        xs = -hx + (np.arange(self.width) + 0.5) * (2.0 * hx / self.width)
        ys = hy - (np.arange(self.height) + 0.5) * (2.0 * hy / self.height)
        return xs, ys


@dataclass(frozen=True)
class ViewRing:
    views: tuple
    angular_step: float

    def __len__(self) -> int:
        return len(self.views)

    def __iter__(self):
        return iter(self.views)

    def __getitem__(self, i):
        return self.views[i]


def make_ring(count: int, elevation: float = 0.0, template: Optional[ViewSpec] = None) -> ViewRing:
    if count not in SUPPORTED_RING_COUNTS:
        raise UnsupportedCount(f"ring count {count} not in {SUPPORTED_RING_COUNTS}")
    template = template or ViewSpec()
    step = 360 // count
    views = tuple(
        replace(template, azimuth=float(i * step), elevation=float(elevation)) for i in range(count)
    )
    return ViewRing(views, float(step))


def orthographic_views(template: Optional[ViewSpec] = None) -> tuple:
    """The four axis-aligned reference views (azimuth 0/90/180/270, elevation 0)."""
    template = template or ViewSpec()
    return tuple(replace(template, azimuth=float(a), elevation=0.0) for a in (0, 90, 180, 270))


@dataclass(frozen=True)
class RenderBuffers:
    """Rasterizer output for one view.

    ``normal`` holds camera-space unit normals, ``face_id`` is ``-1`` on
    background and ``bary`` holds the barycentric coordinates of each pixel
    center with respect to its face. ``cam_vertices`` are the camera-space
    vertex positions the buffers were produced from.
    """

    view: ViewSpec
    depth: np.ndarray
    normal: np.ndarray
    mask: np.ndarray
    face_id: np.ndarray
    bary: np.ndarray
    cam_vertices: np.ndarray = field(repr=False)

    @property
    def covered(self) -> np.ndarray:
        return self.face_id >= 0


@dataclass(frozen=True)
class VertexViewStats:
    visible: np.ndarray
    projected_area: np.ndarray


# --------------------------------------------------------------------------
# kernels

@numba.njit(cache=True, nogil=True)
def _raster_kernel(cam, faces, width, height, hx, hy, near, far, dist, face_id, bary, depth):
    px = 2.0 * hx / width
    py = 2.0 * hy / height
    for f in range(faces.shape[0]):
        a = faces[f, 0]
        b = faces[f, 1]
        c = faces[f, 2]
        x0 = cam[a, 0]
        y0 = cam[a, 1]
        x1 = cam[b, 0]
        y1 = cam[b, 1]
        x2 = cam[c, 0]
        y2 = cam[c, 1]
        area2 = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area2 <= 0.0:
            continue
        xmin = min(x0, min(x1, x2))
        xmax = max(x0, max(x1, x2))
        ymin = min(y0, min(y1, y2))
        ymax = max(y0, max(y1, y2))
        j0 = max(0, int(math.ceil((xmin + hx) / px - 0.5)))
        j1 = min(width - 1, int(math.floor((xmax + hx) / px - 0.5)))
        i0 = max(0, int(math.ceil((hy - ymax) / py - 0.5)))
        i1 = min(height - 1, int(math.floor((hy - ymin) / py - 0.5)))
        for i in range(i0, i1 + 1):
            y = hy - (i + 0.5) * py
            for j in range(j0, j1 + 1):
                x = -hx + (j + 0.5) * px
                w0 = ((x1 - x) * (y2 - y) - (x2 - x) * (y1 - y)) / area2
                w1 = ((x2 - x) * (y0 - y) - (x0 - x) * (y2 - y)) / area2
                w2 = 1.0 - w0 - w1
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                d = dist - (w0 * cam[a, 2] + w1 * cam[b, 2] + w2 * cam[c, 2])
                if d < near or d > far:
                    continue
                if d < depth[i, j]:
                    depth[i, j] = d
                    face_id[i, j] = f
                    bary[i, j, 0] = w0
                    bary[i, j, 1] = w1
                    bary[i, j, 2] = w2


@numba.njit(cache=True, nogil=True)
def _nearest_segment_kernel(px, py, seg, out_dist, out_edge, out_t):
    # seg rows: ax, ay, bx, by (pixel units)
    for i in range(py.shape[0]):
        for j in range(px.shape[0]):
            best = np.inf
            best_e = -1
            best_t = 0.0
            for e in range(seg.shape[0]):
                ax = seg[e, 0]
                ay = seg[e, 1]
                dx = seg[e, 2] - ax
                dy = seg[e, 3] - ay
                ll = dx * dx + dy * dy
                t = 0.0
                if ll > 0.0:
                    t = ((px[j] - ax) * dx + (py[i] - ay) * dy) / ll
                    if t < 0.0:
                        t = 0.0
                    elif t > 1.0:
                        t = 1.0
                cx = ax + t * dx - px[j]
                cy = ay + t * dy - py[i]
                d2 = cx * cx + cy * cy
                if d2 < best:
                    best = d2
                    best_e = e
                    best_t = t
            out_dist[i, j] = math.sqrt(best)
            out_edge[i, j] = best_e
            out_t[i, j] = best_t


# --------------------------------------------------------------------------
# rasterization

def _raster(cam: np.ndarray, faces: np.ndarray, view: ViewSpec):
    w, h = view.resolution
    hx, hy = view.half_extents
    face_id = np.full((h, w), -1, dtype=np.int64)
    bary = np.zeros((h, w, 3))
    depth = np.full((h, w), float(view.far))
    _raster_kernel(
        np.ascontiguousarray(cam), np.ascontiguousarray(faces), w, h, hx, hy,
        float(view.near), float(view.far), float(view.distance), face_id, bary, depth,
    )
    return face_id, bary, depth


def rasterize(mesh: TriangleMesh, view: ViewSpec, normals: Optional[np.ndarray] = None,
              with_normals: bool = True) -> RenderBuffers:
    """Z-buffered hard rasterization of front-facing triangles.

    Back-facing and degenerate triangles are culled. On equal depth the lower
    face index wins. ``normals`` are world-space vertex normals; they are
    computed when omitted. ``with_normals=False`` leaves the normal image
    zero (depth-only passes).
    """
    cam = view.to_camera(mesh.vertices)
    hx, hy = view.half_extents
    if np.any(np.abs(cam[:, 0]) > hx) or np.any(np.abs(cam[:, 1]) > hy):
        log.warning("mesh extends beyond the view volume of az=%g el=%g", view.azimuth, view.elevation)
    if normals is None and with_normals:
        normals = vertex_normals_raw(mesh.vertices, mesh.faces)[0]
    face_id, bary, depth = _raster(cam, mesh.faces, view)
    covered = face_id >= 0
    normal = np.zeros(depth.shape + (3,))
    if with_normals and covered.any():
        fv = mesh.faces[face_id[covered]]
        b = bary[covered]
        s = np.einsum("pk,pkc->pc", b, normals[fv])
        s /= np.linalg.norm(s, axis=1, keepdims=True)
        normal[covered] = s @ view.rotation.T
    for arr in (depth, normal, face_id, bary, cam):
        arr.setflags(write=False)
    mask = covered.astype(np.float64)
    mask.setflags(write=False)
    return RenderBuffers(view, depth, normal, mask, face_id, bary, cam)


_THREADS = None


def set_threads(n: Optional[int]) -> None:
    """Cap the worker pool used by :func:`rasterize_many` (``None`` = env/auto)."""
    global _THREADS
    _THREADS = n


def worker_count() -> int:
    if _THREADS:
        return max(1, int(_THREADS))
    env = os.environ.get("HALLUFIX_THREADS")
    if env:
        return max(1, int(env))
    return 1


def rasterize_many(mesh: TriangleMesh, views: Sequence[ViewSpec], normals=None,
                   with_normals: bool = True) -> list:
    if normals is None and with_normals:
        normals = vertex_normals_raw(mesh.vertices, mesh.faces)[0]
    workers = worker_count()
    if workers == 1 or len(views) < 2:
        return [rasterize(mesh, v, normals, with_normals) for v in views]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda v: rasterize(mesh, v, normals, with_normals), views))


def shaded_image(buffers: RenderBuffers, faces: np.ndarray) -> np.ndarray:
    """Flat-shaded grayscale render, light along the view axis; background 0."""
    cam = buffers.cam_vertices
    cross = np.cross(cam[faces[:, 1]] - cam[faces[:, 0]], cam[faces[:, 2]] - cam[faces[:, 0]])
    nz = cross[:, 2] / np.maximum(np.linalg.norm(cross, axis=1), 1e-300)
    img = np.zeros(buffers.depth.shape)
    cov = buffers.covered
    img[cov] = np.maximum(nz[buffers.face_id[cov]], 0.0)
    return img


# --------------------------------------------------------------------------
# frozen-coverage evaluation

def _pixel_xy(view: ViewSpec, covered: np.ndarray):
    xs, ys = view.pixel_centers()
    ii, jj = np.nonzero(covered)
    return ii, jj, xs[jj], ys[ii]


def _frozen_bary(cam, faces, face_id, view):
    """Barycentrics of covered pixel centers w.r.t. their (possibly moved) faces.

    Also returns the gradients of the three barycentric functions in the
    camera xy plane, shape ``(P, 3, 2)``.
    """
    ii, jj, x, y = _pixel_xy(view, face_id >= 0)
    fv = faces[face_id[ii, jj]]
    p = cam[fv]  # (P, 3, 3)
    x0, y0 = p[:, 0, 0], p[:, 0, 1]
    x1, y1 = p[:, 1, 0], p[:, 1, 1]
    x2, y2 = p[:, 2, 0], p[:, 2, 1]
    area2 = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
    w0 = ((x1 - x) * (y2 - y) - (x2 - x) * (y1 - y)) / area2
    w1 = ((x2 - x) * (y0 - y) - (x0 - x) * (y2 - y)) / area2
    b = np.stack([w0, w1, 1.0 - w0 - w1], axis=1)
    grad = np.stack(
        [
            np.stack([y1 - y2, x2 - x1], axis=1),
            np.stack([y2 - y0, x0 - x2], axis=1),
            np.stack([y0 - y1, x1 - x0], axis=1),
        ],
        axis=1,
    ) / area2[:, None, None]
    return ii, jj, fv, b, grad


def frozen_depth(vertices: np.ndarray, faces: np.ndarray, buffers: RenderBuffers) -> np.ndarray:
    """Depth image re-evaluated with the pixel-to-face assignment held fixed."""
    view = buffers.view
    cam = view.to_camera(vertices)
    ii, jj, fv, b, _ = _frozen_bary(cam, faces, buffers.face_id, view)
    out = np.full(buffers.depth.shape, float(view.far))
    out[ii, jj] = view.distance - np.sum(b * cam[fv][:, :, 2], axis=1)
    return out


def frozen_normals(vertices: np.ndarray, faces: np.ndarray, buffers: RenderBuffers) -> np.ndarray:
    """Camera-space normal image under frozen coverage (vertex normals recomputed)."""
    view = buffers.view
    cam = view.to_camera(vertices)
    normals = vertex_normals_raw(vertices, faces)[0]
    ii, jj, fv, b, _ = _frozen_bary(cam, faces, buffers.face_id, view)
    s = np.einsum("pk,pkc->pc", b, normals[fv])
    s /= np.linalg.norm(s, axis=1, keepdims=True)
    out = np.zeros(buffers.normal.shape)
    out[ii, jj] = s @ view.rotation.T
    return out


def _scatter(n_vertices: int, idx: np.ndarray, vals: np.ndarray) -> np.ndarray:
    """Sum ``vals`` (``(P, 3, C)``) into ``(n_vertices, C)`` rows given by ``idx`` (``(P, 3)``)."""
    flat_idx = idx.reshape(-1)
    flat = vals.reshape(len(flat_idx), -1)
    return np.stack(
        [np.bincount(flat_idx, weights=flat[:, c], minlength=n_vertices) for c in range(flat.shape[1])],
        axis=1,
    )


def _depth_cam_grads(mesh: TriangleMesh, view: ViewSpec, buffers: RenderBuffers, g: np.ndarray):
    """Per-pixel world-space vertex gradients ``(fv (P,3), grad (P,3,3))`` of one view."""
    covered = buffers.covered & (g != 0)
    if not covered.any():
        return None
    face_id = np.where(covered, buffers.face_id, -1)
    ii, jj, fv, b, db = _frozen_bary(buffers.cam_vertices, mesh.faces, face_id, view)
    z = buffers.cam_vertices[fv][:, :, 2]
    plane = np.einsum("pk,pkd->pd", z, db)  # dz/dx, dz/dy
    gb = g[ii, jj][:, None] * b
    cam_grad = np.empty(b.shape + (3,))
    cam_grad[:, :, 0] = gb * plane[:, None, 0]
    cam_grad[:, :, 1] = gb * plane[:, None, 1]
    cam_grad[:, :, 2] = -gb
    return fv, cam_grad @ view.rotation


def backproject_depth_gradients(mesh: TriangleMesh, view: ViewSpec, buffers: RenderBuffers,
                                pixel_grad: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(pixel_grad * depth)`` w.r.t. world vertex positions.

    Coverage is frozen: each covered pixel keeps its face and its depth moves
    with the face plane evaluated at the fixed pixel center. A pixel routes
    ``-b_k`` along the camera z axis to vertex ``k`` plus the in-plane term
    ``b_k * grad_xy(z)`` that comes from the barycentrics depending on the
    projected vertex positions.
    """
    return backproject_depth_gradients_many(mesh, [view], [buffers], [pixel_grad])


def backproject_depth_gradients_many(mesh: TriangleMesh, views, buffers, pixel_grads) -> np.ndarray:
    """Sum of :func:`backproject_depth_gradients` over several views, one scatter."""
    idx, vals = [], []
    for view, buf, g in zip(views, buffers, pixel_grads):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != buf.depth.shape:
            raise ShapeMismatch(f"pixel_grad {g.shape} vs depth {buf.depth.shape}")
        part = _depth_cam_grads(mesh, view, buf, g)
        if part is not None:
            idx.append(part[0])
            vals.append(part[1])
    if not idx:
        return np.zeros((mesh.vertex_count, 3))
    return _scatter(mesh.vertex_count, np.concatenate(idx), np.concatenate(vals))


def backproject_normal_gradients(mesh: TriangleMesh, view: ViewSpec, buffers: RenderBuffers,
                                 pixel_grad: np.ndarray, vertex_normals=None, split: bool = False):
    """Gradient of ``sum(pixel_grad . normal)`` w.r.t. world vertex positions.

    With ``split=True`` returns ``(position_grad, vertex_normal_grad)`` so
    callers can merge several normal-gradient sources before a single pass
    through the vertex-normal Jacobian.
    """
    g = np.asarray(pixel_grad, dtype=np.float64)
    if g.shape != buffers.normal.shape:
        raise ShapeMismatch(f"pixel_grad {g.shape} vs normal {buffers.normal.shape}")
    n_v = mesh.vertex_count
    if vertex_normals is None:
        vertex_normals = vertex_normals_raw(mesh.vertices, mesh.faces)[0]
    pos = np.zeros((n_v, 3))
    gn = np.zeros((n_v, 3))
    covered = buffers.covered & np.any(g != 0, axis=2)
    if covered.any():
        face_id = np.where(covered, buffers.face_id, -1)
        ii, jj, fv, b, db = _frozen_bary(buffers.cam_vertices, mesh.faces, face_id, view)
        nv = vertex_normals[fv]  # (P, 3, 3) world
        s = np.einsum("pk,pkc->pc", b, nv)
        length = np.linalg.norm(s, axis=1, keepdims=True)
        n_hat = s / length
        gw = g[ii, jj] @ view.rotation  # camera -> world
        gs = (gw - n_hat * np.sum(n_hat * gw, axis=1, keepdims=True)) / length
        gn = _scatter(n_v, fv, b[:, :, None] * gs[:, None, :])
        ds = np.einsum("pkc,pkd->pcd", nv, db)  # ds/dx, ds/dy per component
        gxy = np.einsum("pc,pcd->pd", gs, ds)
        cam_grad = np.zeros(b.shape + (3,))
        cam_grad[:, :, :2] = -b[:, :, None] * gxy[:, None, :]
        pos = _scatter(n_v, fv, cam_grad) @ view.rotation
    if split:
        return pos, gn
    return pos + vertex_normals_vjp(mesh.vertices, mesh.faces, gn)


# --------------------------------------------------------------------------
# per-vertex visibility

def projected_face_areas(buffers: RenderBuffers, faces: np.ndarray) -> np.ndarray:
    """Signed camera-plane area of every face, clamped at zero (world units^2)."""
    cam = buffers.cam_vertices
    p0 = cam[faces[:, 0]]
    e1 = cam[faces[:, 1]] - p0
    e2 = cam[faces[:, 2]] - p0
    return np.maximum(0.5 * (e1[:, 0] * e2[:, 1] - e2[:, 0] * e1[:, 1]), 0.0)


def vertex_view_stats(mesh: TriangleMesh, view: ViewSpec, buffers: RenderBuffers,
                      depth_tolerance_px: Optional[float] = None) -> VertexViewStats:
    """Per-vertex visibility flag and projected area of rendered incident faces.

    A vertex is visible when one of its faces covers a pixel. With
    ``depth_tolerance_px`` it must also pass a depth test: the depth buffer
    at the vertex's own pixel lies within that many pixel sizes of the vertex
    depth, which drops vertices hidden behind nearer surfaces or seen only at
    grazing angles.
    """
    present = np.zeros(mesh.face_count, dtype=bool)
    ids = buffers.face_id[buffers.face_id >= 0]
    present[ids] = True
    area = np.where(present, projected_face_areas(buffers, mesh.faces), 0.0)
    visible = np.zeros(mesh.vertex_count, dtype=bool)
    proj = np.zeros(mesh.vertex_count)
    for k in range(3):
        visible[mesh.faces[present, k]] = True
        proj += np.bincount(mesh.faces[:, k], weights=area, minlength=mesh.vertex_count)
    if depth_tolerance_px is not None:
        cam = buffers.cam_vertices
        hx, hy = view.half_extents
        ppu = view.pixels_per_unit
        h, w = buffers.depth.shape
        j = np.floor((cam[:, 0] + hx) * ppu).astype(np.int64)
        r = np.floor((hy - cam[:, 1]) * ppu).astype(np.int64)
        inside = (r >= 0) & (r < h) & (j >= 0) & (j < w)
        seen = np.zeros(mesh.vertex_count, dtype=bool)
        rr, jj = r[inside], j[inside]
        vdepth = view.distance - cam[inside, 2]
        seen[inside] = buffers.covered[rr, jj] & (
            np.abs(buffers.depth[rr, jj] - vdepth) <= depth_tolerance_px / ppu
        )
        visible &= seen
    proj[~visible] = 0.0
    return VertexViewStats(visible, proj)


# --------------------------------------------------------------------------
# soft silhouette

@dataclass(frozen=True)
class SoftMaskSupport:
    """Everything needed to differentiate a soft mask w.r.t. vertex positions.

    ``edges`` are the silhouette edges as directed vertex pairs, ``nearest``
    the per-pixel index into ``edges`` (``-1`` if there are none), ``sign``
    is ``+1`` inside the hard silhouette and ``-1`` outside.
    """

    view: ViewSpec
    sigma: float
    edges: np.ndarray
    nearest: np.ndarray
    sign: np.ndarray
    value: np.ndarray


@functools.lru_cache(maxsize=16)
def _topology(face_bytes: bytes, n_faces: int):
    faces = np.frombuffer(face_bytes, dtype=np.int64).reshape(n_faces, 3)
    edges, adj = edge_faces(faces)
    # directed orientation of each edge as it appears in its first/second face
    return edges, adj


def _directed_in_face(faces, f, a, b):
    """True if ``a -> b`` follows the winding of face ``f``."""
    tri = faces[f]
    ia = np.argmax(tri == a[:, None], axis=1)
    return tri[np.arange(len(f)), (ia + 1) % 3] == b


def silhouette_edges(mesh: TriangleMesh, buffers: RenderBuffers) -> np.ndarray:
    """Directed silhouette edges ``(a, b)`` with the covered side on the left.

    An edge qualifies if exactly one adjacent face is front facing and the
    image just outside it (0.75 px off the edge at three points) contains
    background.
    """
    faces = mesh.faces
    edges, adj = _topology(faces.tobytes(), len(faces))
    cam = buffers.cam_vertices
    view = buffers.view
    p0 = cam[faces[:, 0]]
    e1 = cam[faces[:, 1]] - p0
    e2 = cam[faces[:, 2]] - p0
    front = (e1[:, 0] * e2[:, 1] - e2[:, 0] * e1[:, 1]) > 0
    f0 = adj[:, 0]
    f1 = adj[:, 1]
    front0 = front[f0]
    front1 = np.where(f1 >= 0, front[np.maximum(f1, 0)], False)
    sel = front0 != front1
    if not sel.any():
        return np.zeros((0, 2), dtype=np.int64)
    ffront = np.where(front0, f0, f1)[sel]
    a, b = edges[sel, 0], edges[sel, 1]
    fwd = _directed_in_face(faces, ffront, a, b)
    directed = np.stack([np.where(fwd, a, b), np.where(fwd, b, a)], axis=1)

    k = view.pixels_per_unit
    hx, hy = view.half_extents
    pa = cam[directed[:, 0], :2]
    pb = cam[directed[:, 1], :2]
    d = pb - pa
    length = np.linalg.norm(d, axis=1, keepdims=True)
    outward = np.stack([d[:, 1], -d[:, 0]], axis=1) / np.maximum(length, 1e-300)
    exposed = np.zeros(len(directed), dtype=bool)
    w, h = view.resolution
    for t in (0.25, 0.5, 0.75):
        q = pa + t * d + outward * (0.75 / k)
        j = np.floor((q[:, 0] + hx) * k).astype(np.int64)
        i = np.floor((hy - q[:, 1]) * k).astype(np.int64)
        inside = (i >= 0) & (i < h) & (j >= 0) & (j < w)
        bg = np.ones(len(directed), dtype=bool)
        bg[inside] = buffers.face_id[i[inside], j[inside]] < 0
        exposed |= bg
    return directed[exposed]


def _logistic(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def soft_mask(mesh: TriangleMesh, view: ViewSpec, sigma: float, buffers: Optional[RenderBuffers] = None):
    """Soft silhouette ``logistic(signed_distance / sigma)`` in pixel units.

    The signed distance runs from the pixel center to the nearest silhouette
    edge, positive on covered pixels. Returns ``(image, support)``.
    """
    if not sigma > 0:
        raise ConfigError("sigma must be positive")
    if buffers is None:
        buffers = rasterize(mesh, view)
    edges = silhouette_edges(mesh, buffers)
    sign = np.where(buffers.covered, 1.0, -1.0)
    h, w = buffers.depth.shape
    if len(edges) == 0:
        value = buffers.mask.copy()
        nearest = np.full((h, w), -1, dtype=np.int64)
        return value, SoftMaskSupport(view, float(sigma), edges, nearest, sign, value)
    k = view.pixels_per_unit
    cam = buffers.cam_vertices
    seg = np.concatenate([cam[edges[:, 0], :2], cam[edges[:, 1], :2]], axis=1) * k
    xs, ys = view.pixel_centers()
    dist = np.empty((h, w))
    nearest = np.empty((h, w), dtype=np.int64)
    tpar = np.empty((h, w))
    _nearest_segment_kernel(xs * k, ys * k, np.ascontiguousarray(seg), dist, nearest, tpar)
    value = _logistic(sign * dist / sigma)
    return value, SoftMaskSupport(view, float(sigma), edges, nearest, sign, value)


def _segment_geometry(cam, support: SoftMaskSupport):
    view = support.view
    k = view.pixels_per_unit
    xs, ys = view.pixel_centers()
    a = cam[support.edges[support.nearest, 0], :2] * k
    b = cam[support.edges[support.nearest, 1], :2] * k
    p = np.stack(np.meshgrid(xs * k, ys * k), axis=-1)
    d = b - a
    ll = np.sum(d * d, axis=-1)
    t = np.where(ll > 0, np.sum((p - a) * d, axis=-1) / np.where(ll > 0, ll, 1.0), 0.0)
    t = np.clip(t, 0.0, 1.0)
    diff = p - (a + t[..., None] * d)
    return t, diff, np.linalg.norm(diff, axis=-1)


def frozen_soft_mask(vertices: np.ndarray, support: SoftMaskSupport) -> np.ndarray:
    """Soft mask re-evaluated against the same silhouette edges and signs."""
    if len(support.edges) == 0:
        return support.value.copy()
    cam = support.view.to_camera(vertices)
    _, _, dist = _segment_geometry(cam, support)
    return _logistic(support.sign * dist / support.sigma)


def soft_mask_vjp(mesh: TriangleMesh, support: SoftMaskSupport, pixel_grad: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(pixel_grad * soft_mask)`` w.r.t. world vertex positions."""
    g = np.asarray(pixel_grad, dtype=np.float64)
    if g.shape != support.value.shape:
        raise ShapeMismatch(f"pixel_grad {g.shape} vs mask {support.value.shape}")
    out = np.zeros((mesh.vertex_count, 3))
    if len(support.edges) == 0:
        return out
    view = support.view
    cam = view.to_camera(mesh.vertices)
    t, diff, dist = _segment_geometry(cam, support)
    s = support.value
    dval = g * s * (1.0 - s) * support.sign / support.sigma
    ok = (dist > 0) & (dval != 0)
    unit = np.zeros_like(diff)
    unit[ok] = diff[ok] / dist[ok, None]
    # d dist / d a = -(1 - t) * unit, d dist / d b = -t * unit (pixel units)
    k = view.pixels_per_unit
    ga = (-(1.0 - t) * dval)[..., None] * unit * k
    gb = (-t * dval)[..., None] * unit * k
    ea = support.edges[support.nearest, 0]
    eb = support.edges[support.nearest, 1]
    idx = np.stack([ea[ok], eb[ok]], axis=1)
    vals = np.zeros((idx.shape[0], 2, 3))
    vals[:, 0, :2] = ga[ok]
    vals[:, 1, :2] = gb[ok]
    if idx.size:
        flat_idx = idx.reshape(-1)
        flat = vals.reshape(-1, 3)
        cam_grad = np.stack(
            [np.bincount(flat_idx, weights=flat[:, c], minlength=mesh.vertex_count) for c in range(3)],
            axis=1,
        )
        out = cam_grad @ view.rotation
    return out


# --------------------------------------------------------------------------
# buffer dumps

def write_pfm(path, image: np.ndarray) -> None:
    """Single-channel little-endian PFM (rows stored bottom to top)."""
    img = np.asarray(image, dtype="<f4")
    if img.ndim != 2:
        raise ShapeMismatch("PFM writer expects a 2-D image")
    h, w = img.shape
    try:
        with open(path, "wb") as fh:
            fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
            fh.write(np.ascontiguousarray(img[::-1]).tobytes())
    except OSError as exc:
        raise IoError(f"{path}: {exc}") from exc


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    lines = data.split(b"\n", 3)
    if lines[0].strip() != b"Pf":
        raise IoError(f"{path}: only single-channel PFM is supported")
    w, h = (int(x) for x in lines[1].split())
    scale = float(lines[2])
    dtype = "<f4" if scale < 0 else ">f4"
    img = np.frombuffer(lines[3], dtype=dtype, count=w * h).reshape(h, w)
    return img[::-1].astype(np.float64)


def write_png(path, image: np.ndarray) -> None:
    """8-bit PNG of a ``[0, 1]`` gray image or an ``(H, W, 3)`` RGB image."""
    from PIL import Image

    img = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    try:
        Image.fromarray(img).save(path)
    except OSError as exc:
        raise IoError(f"{path}: {exc}") from exc


def dump_buffers(buffers: RenderBuffers, out_dir, stem: str = "view") -> dict:
    """Write depth/face_id as PFM and mask/normal as PNG; returns the paths."""
    out = Path(out_dir)
    paths = {
        "depth": out / f"{stem}_depth.pfm",
        "face_id": out / f"{stem}_face_id.pfm",
        "mask": out / f"{stem}_mask.png",
        "normal": out / f"{stem}_normal.png",
    }
    write_pfm(paths["depth"], buffers.depth)
    write_pfm(paths["face_id"], buffers.face_id.astype(np.float64))
    write_png(paths["mask"], buffers.mask)
    encoded = np.where(buffers.covered[..., None], (buffers.normal + 1.0) / 2.0, 0.0)
    write_png(paths["normal"], encoded)
    return {k: str(v) for k, v in paths.items()}
