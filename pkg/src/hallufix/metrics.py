"""Geometry (Chamfer, F-Score) and appearance (PSNR, SSIM) evaluation."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from hallufix import losses, render
from hallufix.errors import ConfigError, EmptyCloud, ShapeMismatch
from hallufix.mesh import PointCloud, TriangleMesh, sample_surface

PSNR_CAP = 99.0


def _points(cloud) -> np.ndarray:
    pts = np.asarray(cloud.points if isinstance(cloud, PointCloud) else cloud, dtype=np.float64)
    pts = pts.reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyCloud("point cloud is empty")
    return pts


def nearest_distances(src, dst) -> np.ndarray:
    """Distance from every point of ``src`` to its nearest point in ``dst``.

    The kd-tree only picks the neighbor; the distance itself is recomputed
    with plain numpy so it is bit-identical to a brute-force evaluation.
    """
    a, b = _points(src), _points(dst)
    _, idx = cKDTree(b).query(a, k=1)
    d = a - b[idx]
    return np.sqrt(np.sum(d * d, axis=1))


def chamfer(a, b, squared: bool = False) -> float:
    """Symmetric mean nearest-neighbor distance (linear by default)."""
    da, db = nearest_distances(a, b), nearest_distances(b, a)
    if squared:
        da, db = da * da, db * db
    return 0.5 * (float(np.mean(da)) + float(np.mean(db)))


def fscore(a, b, tau: float = 0.05) -> float:
    if not tau > 0:
        raise ConfigError("tau must be positive")
    precision = float(np.mean(nearest_distances(a, b) <= tau))
    recall = float(np.mean(nearest_distances(b, a) <= tau))
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def psnr(a, b, peak: float = 1.0, mask=None) -> float:
    """Peak signal-to-noise ratio in dB, capped at 99 for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"psnr inputs {a.shape} vs {b.shape}")
    if not peak > 0:
        raise ConfigError("peak must be positive")
    diff = (a - b) ** 2
    mse = float(np.mean(diff if mask is None else diff[np.asarray(mask, dtype=bool)]))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


@dataclass(frozen=True)
class EvalConfig:
    sample_count: int = 16384
    seed: int = 0
    tau: float = 0.05
    squared: bool = False
    resolution: int = 64
    ortho_half_extent: float = 0.5
    elevations: Sequence[float] = (0.0, 15.0, 30.0)
    azimuth_count: int = 8

    def __post_init__(self):
        if self.sample_count < 1:
            raise ConfigError("sample_count must be >= 1")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if self.azimuth_count < 1:
            raise ConfigError("azimuth_count must be >= 1")
        object.__setattr__(self, "elevations", tuple(float(e) for e in self.elevations))

    @classmethod
    def from_dict(cls, data: dict) -> "EvalConfig":
        unknown = sorted(set(data) - set(cls.__dataclass_fields__))
        if unknown:
            raise ConfigError(f"unknown eval config key(s): {', '.join(unknown)}")
        return cls(**data)

    def views(self):
        template = render.ViewSpec(ortho_half_extent=self.ortho_half_extent,
                                   resolution=(self.resolution, self.resolution))
        out = []
        for el in self.elevations:
            for i in range(self.azimuth_count):
                out.append(dataclasses.replace(template, azimuth=360.0 * i / self.azimuth_count, elevation=el))
        return out


@dataclass
class GeomReport:
    chamfer: float
    fscore: float
    tau: float
    sample_count: int
    seed: int
    psnr: Optional[float] = None
    ssim: Optional[float] = None
    per_view: list = field(default_factory=list)

    def to_record(self) -> dict:
        return asdict(self)


def appearance(gt: TriangleMesh, test: TriangleMesh, views) -> list:
    """Per-view PSNR/SSIM of flat-shaded renders over the shared coverage."""
    rows = []
    gt_bufs = render.rasterize_many(gt, views)
    test_bufs = render.rasterize_many(test, views)
    cfg = losses.SsimConfig(dynamic_range=1.0)
    for view, bg, bt in zip(views, gt_bufs, test_bufs):
        ig = render.shaded_image(bg, gt.faces)
        it = render.shaded_image(bt, test.faces)
        both = bg.covered & bt.covered
        row = {"azimuth": view.azimuth, "elevation": view.elevation, "psnr": None, "ssim": None}
        if both.any():
            row["psnr"] = psnr(ig, it, 1.0, both)
            row["ssim"] = losses.ssim(it, ig, cfg, both)[0]
        rows.append(row)
    return rows


def eval_pair(gt: TriangleMesh, test: TriangleMesh, cfg: EvalConfig = EvalConfig(),
              with_appearance: bool = True) -> GeomReport:
    pa = sample_surface(gt, cfg.sample_count, cfg.seed)
    pb = sample_surface(test, cfg.sample_count, cfg.seed)
    report = GeomReport(
        chamfer=chamfer(pa, pb, cfg.squared),
        fscore=fscore(pa, pb, cfg.tau),
        tau=cfg.tau,
        sample_count=cfg.sample_count,
        seed=cfg.seed,
    )
    if with_appearance:
        rows = appearance(gt, test, cfg.views())
        p = [r["psnr"] for r in rows if r["psnr"] is not None]
        s = [r["ssim"] for r in rows if r["ssim"] is not None]
        report.psnr = float(np.mean(p)) if p else None
        report.ssim = float(np.mean(s)) if s else None
        report.per_view = rows
    return report
