"""Empirical measures, synthetic datasets and corruption models.

An :class:`EmpiricalMeasure` is a weighted point cloud in R^d. Everything in
the package that talks about a source or target distribution takes one of
these. Arrays stored on a measure are made read-only on construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

WEIGHT_SUM_TOL = 1e-12


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Weighted atoms ``points[i]`` with probability ``weights[i]``.

    ``shape`` is set for image atoms (row-major flattening of an ``H x W``
    grayscale image, so ``dim == H * W``).
    """

    points: np.ndarray
    weights: np.ndarray
    shape: Optional[tuple[int, int]] = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=float, copy=True)
        w = np.array(self.weights, dtype=float, copy=True)
        if pts.ndim != 2 or pts.shape[0] == 0 or pts.shape[1] == 0:
            raise ValueError("points must be a nonempty (n, d) array")
        if w.shape != (pts.shape[0],):
            raise ValueError("need one weight per point")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        if abs(w.sum() - 1.0) > WEIGHT_SUM_TOL:
            raise ValueError(f"weights sum to {w.sum()!r}, expected 1")
        if self.shape is not None and self.shape[0] * self.shape[1] != pts.shape[1]:
            raise ValueError(f"shape {self.shape} does not match dim {pts.shape[1]}")
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.points.shape[0]

    def with_points(self, points: np.ndarray) -> "EmpiricalMeasure":
        """Same weights (and image shape), new atom positions."""
        return EmpiricalMeasure(points, self.weights, self.shape)


def make_empirical(points, weights=None, shape=None) -> EmpiricalMeasure:
    """Build a measure, defaulting to uniform weights and normalizing.

    Raises ``ValueError`` on ragged points, negative weights or zero total
    weight.
    """
    rows = [np.atleast_1d(np.asarray(p, dtype=float)) for p in points]
    if not rows:
        raise ValueError("at least one point is required")
    dims = {r.shape[0] for r in rows}
    if len(dims) != 1 or any(r.ndim != 1 for r in rows):
        raise ValueError(f"dimension mismatch among points: {sorted(dims)}")
    pts = np.vstack(rows)
    if weights is None:
        w = np.full(len(rows), 1.0 / len(rows))
    else:
        w = np.asarray(weights, dtype=float).ravel()
        if w.shape[0] != len(rows):
            raise ValueError("need one weight per point")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        total = w.sum()
        if not total > 0:
            raise ValueError("total weight must be positive")
        w = w / total
    return EmpiricalMeasure(pts, w, tuple(shape) if shape is not None else None)


def sample(m: EmpiricalMeasure, n: int, seed: int) -> np.ndarray:
    """Draw ``n`` i.i.d. atoms from ``m``; returns an ``(n, d)`` array."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(m), size=n, p=m.weights)
    return m.points[idx].copy()


# ---------------------------------------------------------------------------
# Domain
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Domain:
    """Axis-aligned box standing in for the compact convex domain."""

    lo: np.ndarray
    hi: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(np.asarray(self.hi) - np.asarray(self.lo)))

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.all((x >= self.lo) & (x <= self.hi), axis=-1)

    def sample_uniform(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.lo, self.hi, size=(n, self.dim))


def bounding_domain(*measures: EmpiricalMeasure, margin: float = 0.1) -> Domain:
    """Bounding box of all atoms, grown by ``margin`` times its extent per side."""
    pts = np.vstack([m.points for m in measures])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    ext = hi - lo
    # degenerate extents (all atoms share a coordinate) still get some room
    ext = np.where(ext > 0, ext, max(float(ext.max()), 1.0))
    return Domain(lo - margin * ext, hi + margin * ext)


# ---------------------------------------------------------------------------
# Corruption
# ---------------------------------------------------------------------------

NOISE = "gaussian_noise"
BLUR = "gaussian_blur"


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    sigma: float
    size: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in (NOISE, BLUR):
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if self.kind == BLUR and (self.size < 3 or self.size % 2 == 0):
            raise ValueError("blur size must be odd and >= 3")


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def image_shape(m: EmpiricalMeasure) -> tuple[int, int]:
    if m.shape is not None:
        return m.shape
    side = math.isqrt(m.dim)
    if side * side != m.dim:
        raise ValueError(f"dim {m.dim} is not a square image")
    return side, side


def corrupt(m: EmpiricalMeasure, spec: CorruptionSpec) -> EmpiricalMeasure:
    """Corrupt every atom independently. Weights are untouched.

    Noise is additive and never clipped. Blur uses replicate padding.
    """
    if spec.kind == NOISE:
        rng = np.random.default_rng(spec.seed)
        noisy = m.points + rng.normal(0.0, spec.sigma, size=m.points.shape)
        return m.with_points(noisy)
    h, w = image_shape(m)
    kern = gaussian_kernel(spec.size, spec.sigma)
    out = np.empty_like(m.points)
    for i, row in enumerate(m.points):
        out[i] = ndimage.convolve(row.reshape(h, w), kern, mode="nearest").ravel()
    return EmpiricalMeasure(out, m.weights, (h, w))


def psnr(x, y):
    """Peak signal-to-noise ratio in dB for peak value 1.

    Works row-wise on 2-d input. Identical inputs give ``inf``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    mse = np.mean((x - y) ** 2, axis=-1)
    with np.errstate(divide="ignore"):
        out = -10.0 * np.log10(mse)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# Synthetic datasets
# ---------------------------------------------------------------------------


def _two_moons(rng, n=200, noise=0.05):
    n_out = n // 2
    n_in = n - n_out
    t_out = rng.uniform(0, np.pi, n_out)
    t_in = rng.uniform(0, np.pi, n_in)
    outer = np.column_stack([np.cos(t_out), np.sin(t_out)])
    inner = np.column_stack([1 - np.cos(t_in), 0.5 - np.sin(t_in)])
    pts = np.vstack([outer, inner])
    if noise > 0:
        pts = pts + rng.normal(0, noise, pts.shape)
    return make_empirical(pts)


def _ring(rng, n=8, radius=1.0, center=(0.0, 0.0), noise=0.0, phase=0.0):
    if radius <= 0:
        raise ValueError("radius must be > 0")
    theta = phase + 2 * np.pi * np.arange(n) / n
    r = radius + (rng.normal(0, noise, n) if noise > 0 else 0.0)
    pts = np.asarray(center, dtype=float) + np.column_stack([r * np.cos(theta), r * np.sin(theta)])
    return make_empirical(pts)


def _atom_grid(rng, k=2, lo=0.0, hi=1.0):
    axis = np.linspace(lo, hi, k) if k > 1 else np.array([(lo + hi) / 2])
    xx, yy = np.meshgrid(axis, axis, indexing="ij")
    return make_empirical(np.column_stack([xx.ravel(), yy.ravel()]))


def _gaussian(rng, n=500, dim=2, mean=0.0, std=1.0):
    if std <= 0:
        raise ValueError("std must be > 0")
    return make_empirical(mean + std * rng.standard_normal((n, dim)))


def _toy_images(rng, count=8, size=8, low=0.1, high=0.9):
    """Rectangles and blobs on a flat background, intensities in [0, 1]."""
    if size < 4:
        raise ValueError("toy images need size >= 4")
    yy, xx = np.mgrid[0:size, 0:size]
    imgs = []
    for k in range(count):
        img = np.full((size, size), low)
        if k % 2 == 0:
            h, w = rng.integers(size // 4 + 1, size // 2 + 2, size=2)
            r0, c0 = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
            img[r0 : r0 + h, c0 : c0 + w] = high
        else:
            cy, cx = rng.uniform(1, size - 2, size=2)
            s = rng.uniform(size / 8, size / 4)
            img = low + (high - low) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s**2))
        imgs.append(img.ravel())
    return make_empirical(np.array(imgs), shape=(size, size))


_GENERATORS = {
    "two_moons": _two_moons,
    "ring": _ring,
    "atom_grid": _atom_grid,
    "toy_images": _toy_images,
    "gaussian": _gaussian,
}


def synth_dataset(name: str, seed: int = 0, **params) -> EmpiricalMeasure:
    """Deterministic synthetic measure; ``params`` are generator keywords."""
    try:
        gen = _GENERATORS[name]
    except KeyError:
        raise ValueError(f"unknown dataset {name!r}; choose from {sorted(_GENERATORS)}") from None
    for key in ("n", "k", "count"):
        if key in params and params[key] < 1:
            raise ValueError(f"{key} must be >= 1")
    return gen(np.random.default_rng(seed), **params)


def stack_measures(parts: Sequence[EmpiricalMeasure]) -> EmpiricalMeasure:
    """Concatenate equally weighted pieces into one uniform measure."""
    pts = np.vstack([p.points for p in parts])
    return make_empirical(pts, shape=parts[0].shape)
