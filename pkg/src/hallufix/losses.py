"""Image-space loss terms and their analytic gradients.

Every function here works on numpy images and returns the loss value together
with its gradient with respect to the rendered inputs. Mapping those image
gradients onto vertex positions is done by :mod:`hallufix.render`.

Loss terms
----------
mask    per-view mean squared alpha difference, summed over views
normal  per-view mean squared normal difference over valid pixels
SE      surface-exposure weighted vertex-normal loss
DC      cyclic depth consistency, ``sum_i 1 - SSIM(D_i, D_i+1) * CS(D_i, D_i+1)``
DS      edge-aware depth smoothness, ``sum |grad D| * exp(-|grad I|)``
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from hallufix import jsonio
from hallufix.errors import (
    ConfigError,
    DegenerateWeights,
    NoValidPixels,
    ShapeMismatch,
    ZeroVector,
)

TERM_NAMES = ("mask", "normal", "SE", "DC", "DS")


@dataclass
class LossReport:
    total: float
    terms: dict
    weights: dict
    per_view: Optional[dict] = None
    stage: str = ""

    def to_record(self, iteration: int) -> dict:
        rec = {"iteration": int(iteration), "total": float(self.total),
               "terms": {k: float(v) for k, v in self.terms.items()}}
        if self.stage:
            rec["stage"] = self.stage
        return rec

    def to_json(self, iteration: int) -> str:
        return jsonio.dumps(self.to_record(iteration))


def make_report(terms: dict, weights: dict, stage: str = "", per_view=None) -> LossReport:
    total = 0.0
    for name in terms:
        total += weights.get(name, 1.0) * terms[name]
    return LossReport(float(total), dict(terms), dict(weights), per_view, stage)


@dataclass(frozen=True)
class SsimConfig:
    window: int = 11
    gaussian_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: Optional[float] = None  # None: per-pair range of valid depths

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ConfigError("SSIM window must be odd and >= 3")
        if not (self.k1 > 0 and self.k2 > 0):
            raise ConfigError("SSIM k1, k2 must be positive")
        if self.dynamic_range is not None and not self.dynamic_range > 0:
            raise ConfigError("dynamic_range must be positive")


def _check_same(a, b, what="images"):
    if np.shape(a) != np.shape(b):
        raise ShapeMismatch(f"{what}: {np.shape(a)} vs {np.shape(b)}")


# --------------------------------------------------------------------------
# mask / normal / SE

def mask_loss(ref_masks, rendered_masks):
    """``sum_i mean((M_i - M_i^R)^2)``; returns ``(value, grads, per_view)``."""
    ref = np.asarray(ref_masks, dtype=np.float64)
    ren = np.asarray(rendered_masks, dtype=np.float64)
    _check_same(ref, ren, "masks")
    diff = ren - ref
    n = diff[0].size
    per_view = np.sum(diff * diff, axis=(1, 2)) / n
    return float(per_view.sum()), 2.0 * diff / n, per_view


def normal_loss(ref_normals, rendered_normals, valid):
    """Per-view mean of ``|N_i - N_i^R|^2`` over valid pixels, summed over views."""
    ref = np.asarray(ref_normals, dtype=np.float64)
    ren = np.asarray(rendered_normals, dtype=np.float64)
    _check_same(ref, ren, "normal maps")
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != ref.shape[:-1]:
        raise ShapeMismatch(f"valid {valid.shape} vs normals {ref.shape}")
    counts = valid.sum(axis=(1, 2))
    if np.any(counts == 0):
        raise NoValidPixels(f"no valid normal pixels in view(s) {np.flatnonzero(counts == 0).tolist()}")
    diff = np.where(valid[..., None], ren - ref, 0.0)
    per_view = np.sum(diff * diff, axis=(1, 2, 3)) / counts
    grads = 2.0 * diff / counts[:, None, None, None]
    return float(per_view.sum()), grads, per_view


def exposure_weights(visible, projected_area):
    """``eps_i^v = m_i^v A_i^v / sum_j m_j^v A_j^v`` for ``(views, vertices)`` arrays.

    Returns ``(weights, contributing)``; vertices seen in no view get zero
    weights and ``contributing == False``.
    """
    m = np.asarray(visible, dtype=bool)
    area = np.where(m, np.asarray(projected_area, dtype=np.float64), 0.0)
    denom = area.sum(axis=0)
    contributing = m.any(axis=0)
    bad = contributing & ~(denom > 0)
    if bad.any():
        raise DegenerateWeights(f"{int(bad.sum())} visible vertex(es) with zero projected area")
    weights = np.zeros_like(area)
    weights[:, contributing] = area[:, contributing] / denom[contributing]
    return weights, contributing


def se_loss(current_normals, reference_normals, visible, projected_area, reduction: str = "sum"):
    """Surface-exposure weighted normal loss.

    ``current_normals`` is ``(N, 3)``; ``reference_normals`` is ``(views, N, 3)``
    in the same frame; ``visible`` and ``projected_area`` are ``(views, N)``.
    Returns ``(value, grad_wrt_current_normals, weights)``. Weights are held
    constant for differentiation. ``reduction="mean"`` divides by the number
    of contributing vertices.
    """
    if reduction not in ("sum", "mean"):
        raise ConfigError(f"unknown reduction {reduction!r}")
    cur = np.asarray(current_normals, dtype=np.float64)
    refs = np.asarray(reference_normals, dtype=np.float64)
    if refs.shape[1:] != cur.shape:
        raise ShapeMismatch(f"reference normals {refs.shape} vs current {cur.shape}")
    weights, _ = exposure_weights(visible, projected_area)
    diff = cur[None] - np.where(weights[..., None] > 0, refs, 0.0)
    sq = np.sum(diff * diff, axis=2)
    value = float(np.sum(weights * sq))
    grad = np.sum(2.0 * weights[..., None] * diff, axis=0)
    if reduction == "mean":
        count = max(int(np.count_nonzero(weights.sum(axis=0) > 0)), 1)
        value /= count
        grad /= count
    return value, grad, weights


# --------------------------------------------------------------------------
# SSIM and cosine similarity

def gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


class _WindowMean:
    """Gaussian-weighted local mean, renormalized at the image border."""

    def __init__(self, shape, cfg: SsimConfig):
        self.kernel = gaussian_window(cfg.window, cfg.gaussian_sigma)
        self.norm = self._conv(np.ones(shape[-2:]))

    def _conv(self, x):
        y = ndimage.correlate1d(x, self.kernel, axis=-1, mode="constant", cval=0.0)
        return ndimage.correlate1d(y, self.kernel, axis=-2, mode="constant", cval=0.0)

    def __call__(self, x):
        return self._conv(x) / self.norm

    def adjoint(self, g):
        return self._conv(g / self.norm)


def _ssim_batch(x, y, valid, rng_l, cfg: SsimConfig, cyclic: bool = False):
    """Mean SSIM over valid pixels for a batch ``(B, H, W)``.

    With ``cyclic`` the caller promises ``y == roll(x, -1, axis=0)`` and the
    window means of ``y`` are taken from those of ``x``.
    Returns ``(values, grad_x, grad_y, grad_range)``.
    """
    win = _WindowMean(x.shape, cfg)
    rng_l = np.asarray(rng_l, dtype=np.float64).reshape(-1, 1, 1)
    c1 = (cfg.k1 * rng_l) ** 2
    c2 = (cfg.k2 * rng_l) ** 2
    if cyclic:
        mx, exx = np.split(win(np.concatenate([x, x * x])), 2)
        my, eyy = np.roll(mx, -1, axis=0), np.roll(exx, -1, axis=0)
    else:
        mx, my = win(x), win(y)
        exx, eyy = win(x * x), win(y * y)
    exy = win(x * y)
    a1 = 2.0 * mx * my + c1
    b1 = mx * mx + my * my + c1
    a2 = 2.0 * (exy - mx * my) + c2
    b2 = (exx - mx * mx) + (eyy - my * my) + c2
    s = (a1 * a2) / (b1 * b2)
    nv = valid.sum(axis=(1, 2)).reshape(-1, 1, 1).astype(np.float64)
    h = valid / nv
    values = np.sum(h * s, axis=(1, 2))

    hs = h * s
    d_mx = hs * (2.0 * my / a1 - 2.0 * mx / b1 - 2.0 * my / a2 + 2.0 * mx / b2)
    d_my = hs * (2.0 * mx / a1 - 2.0 * my / b1 - 2.0 * mx / a2 + 2.0 * my / b2)
    adj_mx, adj_my, d_exy, d_sq = np.split(
        win.adjoint(np.concatenate([d_mx, d_my, hs * 2.0 / a2, -hs / b2])), 4
    )
    gx = adj_mx + 2.0 * x * d_sq + y * d_exy
    gy = adj_my + 2.0 * y * d_sq + x * d_exy
    d_c1 = np.sum(hs * (1.0 / a1 - 1.0 / b1), axis=(1, 2))
    d_c2 = np.sum(hs * (1.0 / a2 - 1.0 / b2), axis=(1, 2))
    l_flat = rng_l.reshape(-1)
    g_range = d_c1 * 2.0 * cfg.k1 ** 2 * l_flat + d_c2 * 2.0 * cfg.k2 ** 2 * l_flat
    return values, gx, gy, g_range


def ssim(a, b, cfg: SsimConfig = SsimConfig(), valid=None):
    """Gaussian-windowed SSIM averaged over windows centered on valid pixels.

    Uses ``cfg.dynamic_range`` when set, otherwise the range of ``a`` and
    ``b`` over valid pixels. Returns ``(value, grad_wrt_a)``; the gradient
    treats the dynamic range as a constant.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same(a, b)
    valid = np.ones(a.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if not valid.any():
        raise NoValidPixels("ssim: empty valid mask")
    rng_l = cfg.dynamic_range
    if rng_l is None:
        vals = np.concatenate([a[valid], b[valid]])
        rng_l = max(float(vals.max() - vals.min()), 1e-6)
    v, gx, _, _ = _ssim_batch(a[None], b[None], valid[None], [rng_l], cfg)
    return float(v[0]), gx[0]


def _cosine_batch(x, y, valid):
    xv = np.where(valid, x, 0.0)
    yv = np.where(valid, y, 0.0)
    dot = np.sum(xv * yv, axis=(1, 2))
    nx = np.sqrt(np.sum(xv * xv, axis=(1, 2)))
    ny = np.sqrt(np.sum(yv * yv, axis=(1, 2)))
    if np.any(nx == 0) or np.any(ny == 0):
        raise ZeroVector("cosine similarity of a zero vector")
    cs = dot / (nx * ny)
    nx_, ny_, cs_ = (q.reshape(-1, 1, 1) for q in (nx, ny, cs))
    gx = yv / (nx_ * ny_) - cs_ * xv / (nx_ * nx_)
    gy = xv / (nx_ * ny_) - cs_ * yv / (ny_ * ny_)
    return cs, gx, gy


def cosine_similarity(a, b, valid=None):
    """Cosine of the angle between the flattened valid pixels of ``a`` and ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same(a, b)
    valid = np.ones(a.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if not valid.any():
        raise NoValidPixels("cosine similarity: empty valid mask")
    cs, gx, _ = _cosine_batch(a[None], b[None], valid[None])
    return float(cs[0]), gx[0]


# --------------------------------------------------------------------------
# cyclic depth consistency

def _range_and_grad(x, y, vx, vy, floor=1e-6):
    """Per-pair ``max - min`` over the valid depths of both images, with its gradient."""
    bsz = x.shape[0]
    rng_l = np.empty(bsz)
    gxl = np.zeros_like(x)
    gyl = np.zeros_like(y)
    for p in range(bsz):
        xs = np.where(vx[p], x[p], np.nan)
        ys = np.where(vy[p], y[p], np.nan)
        both = np.stack([xs, ys])
        if np.all(np.isnan(both)):
            raise NoValidPixels("depth pair without valid pixels")
        imax = np.nanargmax(both)
        imin = np.nanargmin(both)
        hi = both.flat[imax]
        lo = both.flat[imin]
        if hi - lo > floor:
            rng_l[p] = hi - lo
            for idx, sgn in ((imax, 1.0), (imin, -1.0)):
                which, rest = divmod(idx, x[p].size)
                target = gxl if which == 0 else gyl
                target[p].flat[rest] += sgn
        else:
            rng_l[p] = floor
    return rng_l, gxl, gyl


def dc_loss_from_depths(depths, valid, cfg: SsimConfig = SsimConfig()):
    """Cyclic depth consistency over a ring of depth images.

    ``depths`` is ``(V, H, W)`` with background pixels holding the far value,
    ``valid`` the matching coverage masks. Pair ``i`` compares view ``i`` with
    view ``(i + 1) mod V`` over the union of their valid regions. Returns
    ``(value, grads, per_pair)`` with ``grads`` shaped like ``depths``.
    """
    d = np.asarray(depths, dtype=np.float64)
    v = np.asarray(valid, dtype=bool)
    _check_same(d, v, "depths/valid")
    if d.shape[0] < 2:
        raise ConfigError("cyclic depth consistency needs at least 2 views")
    x, y = d, np.roll(d, -1, axis=0)
    vx, vy = v, np.roll(v, -1, axis=0)
    union = vx | vy
    if cfg.dynamic_range is None:
        rng_l, gxl, gyl = _range_and_grad(x, y, vx, vy)
    else:
        rng_l = np.full(d.shape[0], float(cfg.dynamic_range))
        gxl = gyl = None
    s, gsx, gsy, gsl = _ssim_batch(x, y, union, rng_l, cfg, cyclic=True)
    c, gcx, gcy = _cosine_batch(x, y, union)
    per_pair = 1.0 - s * c
    s_, c_ = s.reshape(-1, 1, 1), c.reshape(-1, 1, 1)
    gx = -(c_ * gsx + s_ * gcx)
    gy = -(c_ * gsy + s_ * gcy)
    if gxl is not None:
        gl = (-c * gsl).reshape(-1, 1, 1)
        gx = gx + gl * gxl
        gy = gy + gl * gyl
    grads = gx + np.roll(gy, 1, axis=0)
    return float(per_pair.sum()), grads, per_pair


def dc_loss(ring_buffers: Sequence, cfg: SsimConfig = SsimConfig()):
    """:func:`dc_loss_from_depths` applied to a list of ``RenderBuffers``."""
    depths = np.stack([b.depth for b in ring_buffers])
    valid = np.stack([b.covered for b in ring_buffers])
    return dc_loss_from_depths(depths, valid, cfg)


# --------------------------------------------------------------------------
# depth smoothness

def forward_diff(img):
    """Forward differences along x and y with replicate boundary (last diff = 0)."""
    img = np.asarray(img, dtype=np.float64)
    dx = np.zeros_like(img)
    dy = np.zeros_like(img)
    dx[:, :-1] = img[:, 1:] - img[:, :-1]
    dy[:-1] = img[1:] - img[:-1]
    return dx, dy


def interior_mask(valid):
    """Valid pixels whose forward neighbors (where they exist) are valid too."""
    v = np.asarray(valid, dtype=bool)
    out = v.copy()
    out[:, :-1] &= v[:, 1:]
    out[:-1] &= v[1:]
    return out


def edge_weight(color):
    """``exp(-||grad I||_2)`` per pixel for a gray ``(H, W)`` or RGB ``(H, W, C)`` image."""
    c = np.asarray(color, dtype=np.float64)
    if c.ndim == 2:
        c = c[..., None]
    sq = np.zeros(c.shape[:2])
    for ch in range(c.shape[2]):
        dx, dy = forward_diff(c[..., ch])
        sq += dx * dx + dy * dy
    return np.exp(-np.sqrt(sq))


def ds_loss(depth, color, valid):
    """Edge-aware depth smoothness for one view; returns ``(value, grad_wrt_depth)``.

    The color-derived weight is treated as a constant.
    """
    d = np.asarray(depth, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != d.shape or np.shape(color)[:2] != d.shape:
        raise ShapeMismatch("depth, color and valid must share height and width")
    w = edge_weight(color) * interior_mask(valid)
    dx, dy = forward_diff(d)
    mag = np.sqrt(dx * dx + dy * dy)
    value = float(np.sum(mag * w))
    safe = np.where(mag > 0, mag, 1.0)
    gdx = np.where(mag > 0, w * dx / safe, 0.0)
    gdy = np.where(mag > 0, w * dy / safe, 0.0)
    grad = -gdx - gdy
    grad[:, 1:] += gdx[:, :-1]
    grad[1:] += gdy[:-1]
    return value, grad


# --------------------------------------------------------------------------
# stage objectives

def coarse_loss(ref_masks, rendered_masks, ref_normals, rendered_normals, normal_valid,
                se_current, se_reference, se_visible, se_area, se_reduction: str = "sum"):
    """Coarse-stage objective ``mask + normal + SE``.

    ``se_reduction`` is forwarded to :func:`se_loss`; the reported SE term is
    the reduced value so the total stays the plain sum of the terms.

    Returns ``(report, grads)`` where ``grads`` maps ``"mask"`` and
    ``"normal"`` to image gradients and ``"SE"`` to the gradient w.r.t. the
    current vertex normals.
    """
    m, gm, pm = mask_loss(ref_masks, rendered_masks)
    n, gn, pn = normal_loss(ref_normals, rendered_normals, normal_valid)
    s, gs, _ = se_loss(se_current, se_reference, se_visible, se_area, se_reduction)
    report = make_report({"mask": m, "normal": n, "SE": s}, {"mask": 1.0, "normal": 1.0, "SE": 1.0},
                         "coarse", {"mask": pm.tolist(), "normal": pn.tolist()})
    return report, {"mask": gm, "normal": gn, "SE": gs}


def cvcr_loss(ref_masks, rendered_masks, ref_normals, rendered_normals, normal_valid,
              ring_depths, ring_valid, ring_colors, lambda1: float, lambda2: float,
              cfg: SsimConfig = SsimConfig(), ds_normalize: bool = False,
              dc_normalize: bool = False):
    """Refinement objective ``mask + normal + lambda1 * DC + lambda2 * DS``.

    DS is summed over every ring view; with ``ds_normalize`` it becomes the
    mean over views and pixels, on the per-pixel scale of the mask and normal
    terms. ``dc_normalize`` likewise averages DC over the ring pairs instead
    of summing. Both normalizations keep the term scales independent of the
    ring size. Image gradients in the returned dict are
    already scaled by their term weights.
    """
    if lambda1 < 0 or lambda2 < 0:
        raise ConfigError("loss weights must be non-negative")
    m, gm, pm = mask_loss(ref_masks, rendered_masks)
    n, gn, pn = normal_loss(ref_normals, rendered_normals, normal_valid)
    depths = np.asarray(ring_depths, dtype=np.float64)
    grads = {"mask": gm, "normal": gn}
    dc, gdc, pdc = dc_loss_from_depths(depths, ring_valid, cfg)
    if dc_normalize:
        dc, gdc = dc / len(depths), gdc / len(depths)
    if lambda1 > 0:
        grads["DC"] = lambda1 * gdc
    ds_total = 0.0
    gds = np.zeros_like(depths)
    for i in range(len(depths)):
        val, g = ds_loss(depths[i], ring_colors[i], ring_valid[i])
        if ds_normalize:
            scale = 1.0 / (depths[i].size * len(depths))
            val, g = val * scale, g * scale
        ds_total += val
        gds[i] = g
    if lambda2 > 0:
        grads["DS"] = lambda2 * gds
    report = make_report(
        {"mask": m, "normal": n, "DC": dc, "DS": ds_total},
        {"mask": 1.0, "normal": 1.0, "DC": float(lambda1), "DS": float(lambda2)},
        "cvcr",
        {"mask": pm.tolist(), "normal": pn.tolist(), "DC": np.asarray(pdc).tolist()},
    )
    return report, grads
