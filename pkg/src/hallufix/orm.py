"""Outlier risk measure: k-NN density-ratio risks aggregated by a CVaR tail.

Per-point risk compares a point's k-th neighbor distance with the average
k-th distance over its neighborhood (a local-outlier-factor style ratio).
Risks are pooled into a discrete distribution whose conditional value at
risk is the score; larger means more isolated, outlier-like geometry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Protocol

import numpy as np
from scipy.spatial import cKDTree

from hallufix.errors import ConfigError, EmptyDistribution, ScorerFailure, TooFewPoints
from hallufix.mesh import PointCloud, TriangleMesh, sample_surface


@dataclass(frozen=True)
class RiskDistribution:
    """Finite set of risks with their probabilities (uniform by default)."""

    risks: np.ndarray
    weights: np.ndarray = field(default=None)

    def __post_init__(self):
        r = np.asarray(self.risks, dtype=np.float64).reshape(-1)
        if r.size == 0:
            raise EmptyDistribution("risk distribution is empty")
        if not np.all(np.isfinite(r)):
            raise ConfigError("risks must be finite")
        if self.weights is None:
            w = np.full(r.size, 1.0 / r.size)
        else:
            w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
            if w.shape != r.shape:
                raise ConfigError(f"{w.size} weights for {r.size} risks")
            if np.any(w <= 0) or abs(math.fsum(w) - 1.0) > 1e-9:
                raise ConfigError("weights must be positive and sum to 1")
        r.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "risks", r)
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return self.risks.size


@dataclass(frozen=True)
class OrmConfig:
    k: int = 10
    neighborhood: Optional[int] = None  # defaults to k
    xi: float = 0.95
    lam: float = 0.0
    sample_count: int = 16384
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.neighborhood is not None and self.neighborhood < 1:
            raise ConfigError("neighborhood must be >= 1")
        if not 0.0 < self.xi < 1.0:
            raise ConfigError("xi must lie in (0, 1)")
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if self.sample_count < 1:
            raise ConfigError("sample_count must be >= 1")

    @property
    def neighbors(self) -> int:
        return self.k if self.neighborhood is None else self.neighborhood

    @classmethod
    def from_dict(cls, data: dict) -> "OrmConfig":
        names = set(cls.__dataclass_fields__)
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(f"unknown ORM config key(s): {', '.join(unknown)}")
        return cls(**data)


class GlobalScorer(Protocol):
    """Anything producing one finite non-negative score per cloud point."""

    def score(self, cloud: PointCloud) -> np.ndarray: ...


def _check_xi(xi: float) -> None:
    if not 0.0 < xi < 1.0:
        raise ConfigError("xi must lie in (0, 1)")


def cumulative_at_or_below(dist: RiskDistribution) -> np.ndarray:
    """Probability mass of ``{r_j <= r_i}`` for every i.

    Each entry is the correctly rounded exact sum, i.e. the same value
    ``math.fsum`` gives over that subset, so it does not depend on order.
    """
    r, w = dist.risks, dist.weights
    order = np.argsort(r, kind="stable")
    rs = r[order]
    out = np.empty(r.size)
    acc = Fraction(0)
    i = 0
    while i < rs.size:
        j = i
        while j < rs.size and rs[j] == rs[i]:
            acc += Fraction(float(w[order[j]]))
            j += 1
        out[order[i:j]] = float(acc)
        i = j
    return out


def var(dist: RiskDistribution, xi: float) -> float:
    """Smallest risk whose cumulative probability reaches ``xi``."""
    _check_xi(xi)
    cum = cumulative_at_or_below(dist)
    hit = dist.risks[cum >= xi]
    # total mass may round a hair below an xi extremely close to 1
    return float(hit.min()) if hit.size else float(dist.risks.max())


def cvar(dist: RiskDistribution, xi: float) -> float:
    """Tail sum ``sum_{r_i >= VaR} w_i r_i`` scaled by ``1 / (1 - xi)``.

    The tail sum is not renormalized by its actual mass.
    """
    v = var(dist, xi)
    tail = dist.risks >= v
    s = math.fsum((dist.weights[tail] * dist.risks[tail]).tolist())
    return (1.0 / (1.0 - xi)) * s


def kth_distances(points: np.ndarray, k: int, neighbors: Optional[int] = None):
    """Distance to the k-th nearest other point and the neighbor indices.

    Returns ``(d_k (N,), idx (N, m))`` with ``m = max(k, neighbors)``
    neighbors ordered by distance, ties by index, self excluded.
    """
    m = max(k, neighbors or k)
    tree = cKDTree(points)
    dist, idx = tree.query(points, k=m + 1)
    # drop self; duplicated points can place self after a twin, so remove by id
    rows = np.arange(len(points))[:, None]
    not_self = idx != rows
    keep = np.cumsum(not_self, axis=1) <= m
    mask = not_self & keep
    dist = dist[mask].reshape(len(points), m)
    idx = idx[mask].reshape(len(points), m)
    return dist[:, k - 1], idx


def local_risks(cloud: PointCloud, cfg: OrmConfig = OrmConfig()) -> RiskDistribution:
    """Density-ratio risk of every point, uniform weights."""
    pts = np.asarray(cloud.points if isinstance(cloud, PointCloud) else cloud, dtype=np.float64)
    m = max(cfg.k, cfg.neighbors)
    if len(pts) <= m + 1:
        raise TooFewPoints(f"need more than {m + 1} points, got {len(pts)}")
    dk, idx = kth_distances(pts, cfg.k, cfg.neighbors)
    ref = dk[idx[:, : cfg.neighbors]].mean(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = dk / ref
    # coincident neighborhoods: equal (zero) densities count as ratio 1
    r = np.where(ref > 0, r, np.where(dk > 0, np.finfo(np.float64).max, 1.0))
    return RiskDistribution(r)


def local_score(dist: RiskDistribution) -> float:
    """Mean of the per-point risks."""
    return float(np.mean(dist.risks))


@dataclass
class OrmResult:
    orm: float
    var: float
    s_l_mean: float
    distribution: RiskDistribution
    cloud: PointCloud
    config: OrmConfig

    def to_record(self) -> dict:
        return {
            "orm": self.orm,
            "var": self.var,
            "s_l_mean": self.s_l_mean,
            "xi": self.config.xi,
            "k": self.config.k,
            "sample_count": self.config.sample_count,
            "seed": self.config.seed,
        }


def orm(mesh: TriangleMesh, cfg: OrmConfig = OrmConfig(), global_scorer: Optional[GlobalScorer] = None) -> OrmResult:
    """Sample the surface, score points and aggregate the risk tail."""
    cloud = sample_surface(mesh, cfg.sample_count, cfg.seed)
    local = local_risks(cloud, cfg)
    dist = local
    if global_scorer is not None:
        try:
            g = np.asarray(global_scorer.score(cloud), dtype=np.float64).reshape(-1)
        except Exception as exc:  # scorer is third-party code
            raise ScorerFailure(f"global scorer raised {type(exc).__name__}: {exc}") from exc
        if g.shape != local.risks.shape:
            raise ScorerFailure(f"global scorer returned {g.size} scores for {local.risks.size} points")
        if not np.all(np.isfinite(g)):
            raise ScorerFailure("global scorer returned non-finite scores")
        if np.any(g < 0):
            raise ScorerFailure("global scorer returned negative scores")
        dist = RiskDistribution(local.risks + cfg.lam * g, local.weights)
    return OrmResult(
        orm=cvar(dist, cfg.xi),
        var=var(dist, cfg.xi),
        s_l_mean=local_score(local),
        distribution=dist,
        cloud=cloud,
        config=cfg,
    )
