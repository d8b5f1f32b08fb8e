"""Point annotations to ground-truth density maps.

Four generators share one splatting primitive:

* ``gen_fixed``       one sigma for every person
* ``gen_adaptive``    sigma proportional to the mean k-NN distance
* ``gen_nonuniform``  adaptive sigmas averaged over each point's neighbourhood
* ``gen_perspective`` one sigma per image row, mapped linearly from the row's
                      inverse effective density in a smooth prior map

Every splat is renormalised over its in-bounds truncated support, so each
point contributes exactly unit mass even at the image border.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.spatial import cKDTree

from .annotations import AnnotatedImage, load_annotations, read_manifest
from .errors import (
    DegenerateStats,
    FormatMismatch,
    IndivisibleDimensions,
    NonPositiveSigma,
    NoEffectiveRows,
    ProfileMismatch,
    TooFewPoints,
)

DMAP_MAGIC = b"DMAP"
DMAP_VERSION = 1

DEFAULT_EPS = 1e-4
DEFAULT_SIGMA_PRIOR = 25.0


@dataclass(frozen=True)
class AdaptiveParams:
    k: int = 3
    beta_geo: float = 0.3
    fallback_sigma: float = 15.0
    sigma_floor: float = 1.0
    sigma_ceiling: float = 50.0
    m: int = 5


def _nearest(v: float) -> int:
    return int(math.floor(v + 0.5))


def splat_gaussian(dmap: np.ndarray, x: float, y: float, sigma: float) -> None:
    """Add one unit of mass around ``(x, y)`` into ``dmap`` in place."""
    if not sigma > 0:
        raise NonPositiveSigma(f"sigma must be positive, got {sigma}")
    h, w = dmap.shape
    if not (0 <= x < w and 0 <= y < h):
        raise ValueError(f"center ({x}, {y}) outside {w}x{h} map")
    r = math.ceil(3 * sigma)
    cx, cy = _nearest(x), _nearest(y)
    c0, c1 = max(0, cx - r), min(w, cx + r + 1)
    r0, r1 = max(0, cy - r), min(h, cy + r + 1)
    gx = np.exp(-((np.arange(c0, c1) - x) ** 2) / (2.0 * sigma * sigma))
    gy = np.exp(-((np.arange(r0, r1) - y) ** 2) / (2.0 * sigma * sigma))
    dmap[r0:r1, c0:c1] += np.outer(gy / gy.sum(), gx / gx.sum())


def _splat_all(ann: AnnotatedImage, sigmas: Iterable[float]) -> np.ndarray:
    dmap = np.zeros((ann.height, ann.width), dtype=np.float64)
    for (x, y), s in zip(ann.points, sigmas):
        splat_gaussian(dmap, float(x), float(y), float(s))
    return dmap


def gen_fixed(ann: AnnotatedImage, sigma: float) -> np.ndarray:
    if not sigma > 0:
        raise NonPositiveSigma(f"sigma must be positive, got {sigma}")
    return _splat_all(ann, [sigma] * ann.count)


def knn_mean_dist(points, k: int) -> np.ndarray:
    """Exact mean distance from each point to its ``k`` nearest other points."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 2:
        raise TooFewPoints(f"need at least 2 points, got {len(pts)}")
    if k < 1:
        raise ValueError("k must be >= 1")
    kk = min(k, len(pts) - 1)
    dist, _ = cKDTree(pts).query(pts, k=kk + 1)
    # column 0 is the point itself (distance 0); duplicates may swap order but not values
    return dist[:, 1:].mean(axis=1)


def adaptive_sigmas(ann: AnnotatedImage, params: AdaptiveParams = AdaptiveParams(), clamp=True):
    sig = params.beta_geo * knn_mean_dist(ann.points, params.k)
    if clamp:
        sig = np.clip(sig, params.sigma_floor, params.sigma_ceiling)
    return sig


def gen_adaptive(ann: AnnotatedImage, params: AdaptiveParams = AdaptiveParams()) -> np.ndarray:
    if ann.count < 2:
        return gen_fixed(ann, params.fallback_sigma)
    return _splat_all(ann, adaptive_sigmas(ann, params))


def nonuniform_sigmas(ann: AnnotatedImage, params: AdaptiveParams = AdaptiveParams()):
    raw = adaptive_sigmas(ann, params)
    mm = min(params.m, ann.count - 1)
    _, idx = cKDTree(ann.points).query(ann.points, k=mm + 1)
    idx = idx.reshape(ann.count, mm + 1)
    # query returns the point itself first unless an exact duplicate ties with it;
    # either way the set {self} + m nearest has the same sigma multiset for duplicates
    return raw[idx].mean(axis=1)


def gen_nonuniform(ann: AnnotatedImage, params: AdaptiveParams = AdaptiveParams()) -> np.ndarray:
    if ann.count < 2:
        return gen_fixed(ann, params.fallback_sigma)
    return _splat_all(ann, nonuniform_sigmas(ann, params))


def prior_map(ann: AnnotatedImage, sigma_prior: float = DEFAULT_SIGMA_PRIOR) -> np.ndarray:
    return gen_fixed(ann, sigma_prior)


# --------------------------------------------------------------------------- perspective-aware


@dataclass
class RowDensityStats:
    density: list  # per row: float, or None when no cell exceeds eps
    qualifying: np.ndarray
    eps: float


@dataclass(frozen=True)
class DatasetDensityStats:
    d_min: float
    d_max: float
    eps: float
    sigma_prior: float

    def to_json(self) -> str:
        return json.dumps(
            {"eps": self.eps, "sigma_prior": self.sigma_prior, "d_min": self.d_min, "d_max": self.d_max}
        )

    @classmethod
    def from_json(cls, text: str) -> "DatasetDensityStats":
        raw = json.loads(text)
        return cls(float(raw["d_min"]), float(raw["d_max"]), float(raw["eps"]), float(raw["sigma_prior"]))


@dataclass
class RowSigmaProfile:
    sigma: np.ndarray
    alpha: float
    beta: float
    sigma_min: float
    sigma_max: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "sigma_min": self.sigma_min,
                "sigma_max": self.sigma_max,
                "alpha": self.alpha,
                "beta": self.beta,
                "sigma": [float(s) for s in self.sigma],
            }
        )


def effective_density(prior: np.ndarray, eps: float = DEFAULT_EPS) -> RowDensityStats:
    if eps < 0:
        raise ValueError("eps must be non-negative")
    mask = prior > eps
    m = mask.sum(axis=1)
    sums = np.where(mask, prior, 0.0).sum(axis=1)
    d = [float(s / c) if c > 0 else None for s, c in zip(sums, m)]
    return RowDensityStats(d, m, eps)


def density_stats_from_annotations(
    anns: Iterable[AnnotatedImage], eps: float = DEFAULT_EPS, sigma_prior: float = DEFAULT_SIGMA_PRIOR, *, map_fn=map
) -> DatasetDensityStats:
    def row_extrema(ann):
        present = [d for d in effective_density(prior_map(ann, sigma_prior), eps).density if d is not None]
        return (min(present), max(present)) if present else None

    ext = [e for e in map_fn(row_extrema, anns) if e is not None]
    if not ext:
        raise NoEffectiveRows(f"no row exceeds eps={eps} in any image")
    return DatasetDensityStats(min(e[0] for e in ext), max(e[1] for e in ext), eps, sigma_prior)


def dataset_density_stats(
    manifest, eps: float = DEFAULT_EPS, sigma_prior: float = DEFAULT_SIGMA_PRIOR, *, map_fn=map
) -> DatasetDensityStats:
    entries = read_manifest(manifest)
    return density_stats_from_annotations(
        (load_annotations(e.annotation) for e in entries), eps, sigma_prior, map_fn=map_fn
    )


def row_sigma_profile(
    stats: RowDensityStats, dstats: DatasetDensityStats, sigma_min: float, sigma_max: float
) -> RowSigmaProfile:
    if not 0 < sigma_min <= sigma_max:
        raise ValueError(f"need 0 < sigma_min <= sigma_max, got {sigma_min}, {sigma_max}")
    n_rows = len(stats.density)
    if sigma_min == sigma_max:
        return RowSigmaProfile(np.full(n_rows, float(sigma_min)), 0.0, float(sigma_min), sigma_min, sigma_max)
    if not dstats.d_min < dstats.d_max:
        raise DegenerateStats(f"d_min == d_max == {dstats.d_min}; use a fixed kernel instead")
    inv_min, inv_max = 1.0 / dstats.d_min, 1.0 / dstats.d_max
    alpha = (sigma_max - sigma_min) / (inv_min - inv_max)
    beta = (inv_min * sigma_min - inv_max * sigma_max) / (inv_min - inv_max)

    rows = np.array([i for i, d in enumerate(stats.density) if d is not None], dtype=np.int64)
    if len(rows) == 0:
        return RowSigmaProfile(np.full(n_rows, float(sigma_max)), alpha, beta, sigma_min, sigma_max)
    d = np.array([stats.density[i] for i in rows])
    with np.errstate(divide="ignore"):
        sig = np.clip(alpha / d + beta, sigma_min, sigma_max)
    # rows without effective density: linear between defined rows, constant past the ends
    full = np.interp(np.arange(n_rows), rows, sig)
    full[rows] = sig
    return RowSigmaProfile(full, alpha, beta, sigma_min, sigma_max)


def gen_perspective(ann: AnnotatedImage, profile: RowSigmaProfile) -> np.ndarray:
    if len(profile.sigma) != ann.height:
        raise ProfileMismatch(f"profile has {len(profile.sigma)} rows, image has {ann.height}")
    rows = [min(max(_nearest(y), 0), ann.height - 1) for y in ann.points[:, 1]]
    return _splat_all(ann, [profile.sigma[r] for r in rows])


def perspective_profile_for(
    ann: AnnotatedImage, dstats: DatasetDensityStats, sigma_min: float, sigma_max: float
) -> RowSigmaProfile:
    """Profile for one image, using the dataset's prior settings."""
    if sigma_min == sigma_max:
        return RowSigmaProfile(np.full(ann.height, float(sigma_min)), 0.0, float(sigma_min), sigma_min, sigma_max)
    stats = effective_density(prior_map(ann, dstats.sigma_prior), dstats.eps)
    return row_sigma_profile(stats, dstats, sigma_min, sigma_max)


def sum_pool(dmap: np.ndarray, factor: int) -> np.ndarray:
    if factor < 1:
        raise ValueError("factor must be a positive integer")
    h, w = dmap.shape
    if h % factor or w % factor:
        raise IndivisibleDimensions(f"{h}x{w} map is not divisible by {factor}")
    blocks = dmap.reshape(h // factor, factor, w // factor, factor).transpose(0, 2, 1, 3)
    return blocks.reshape(h // factor, w // factor, factor * factor).sum(axis=2)


# --------------------------------------------------------------------------- files


def write_dmap(dmap: np.ndarray, path) -> None:
    h, w = dmap.shape
    with open(path, "wb") as f:
        f.write(DMAP_MAGIC + struct.pack("<III", DMAP_VERSION, h, w))
        f.write(np.asarray(dmap).astype("<f4").tobytes())


def read_dmap(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != DMAP_MAGIC or len(data) < 16:
        raise FormatMismatch(f"{path}: not a DMAP file")
    version, h, w = struct.unpack("<III", data[4:16])
    if version != DMAP_VERSION:
        raise FormatMismatch(f"{path}: unsupported DMAP version {version}")
    if len(data) != 16 + 4 * h * w:
        raise FormatMismatch(f"{path}: truncated payload")
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(h, w).astype(np.float64)
