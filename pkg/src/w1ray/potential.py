"""Inf-convolution potentials and transport-ray geometry.

A :class:`DiscretePotential` stores target atoms ``y_j`` and values ``v_j``
and represents ``u(x) = min_j (v_j + |x - y_j|)``. It is 1-Lipschitz by
construction, and when the values are optimal target duals it is a
Kantorovich potential for the semi-discrete problem.

Ray geometry along ``g = grad u(x)``:

* ``alpha(x)`` is how far one can walk along ``-g`` keeping
  ``u(x) - u(z) = |x - z|``. For the inf-convolution that walk ends at the
  farthest active atom colinear with the ray.
* ``beta(x)`` is the same along ``+g``. Atom ``k`` breaks saturation at the
  root of ``v_k + |x + t g - y_k| = u(x) + t``, which is available in
  closed form; ``beta`` is the smallest root, capped at the domain diameter.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .measures import Domain

TIE_TOL = 1e-10
ANGLE_TOL = 1e-10
AT_ATOM_TOL = 1e-14


class NotDifferentiableError(ValueError):
    """Raised when a ray or gradient is requested at a kink of the potential."""


@dataclass(frozen=True)
class DiscretePotential:
    atoms: np.ndarray
    values: np.ndarray
    domain: Optional[Domain] = None

    def __post_init__(self):
        atoms = np.atleast_2d(np.array(self.atoms, dtype=float))
        values = np.array(self.values, dtype=float).ravel()
        if values.shape[0] != atoms.shape[0]:
            raise ValueError("one value per atom")
        atoms.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    @property
    def beta_cap(self) -> float:
        return self.domain.diameter if self.domain is not None else np.inf

    def shifted(self, c: float) -> "DiscretePotential":
        return DiscretePotential(self.atoms, self.values + c, self.domain)

    def __call__(self, x):
        return evaluate(self, x)


def _as_batch(p: DiscretePotential, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xs = np.atleast_2d(x)
    if xs.shape[-1] != p.dim:
        raise ValueError(f"dimension mismatch {xs.shape[-1]} vs {p.dim}")
    return xs, single


def _distances(p, xs):
    diff = xs[:, None, :] - p.atoms[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def evaluate(p: DiscretePotential, x):
    """``min_j v_j + |x - y_j|`` for one point or a batch of points."""
    xs, single = _as_batch(p, x)
    out = (p.values[None, :] + _distances(p, xs)).min(axis=1)
    return float(out[0]) if single else out


@dataclass(frozen=True)
class RayBatch:
    """Vectorized ray data for many points. ``tie`` marks kinks, ``at_atom`` atoms."""

    points: np.ndarray
    grad: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    active: np.ndarray
    endpoint_atom: np.ndarray
    tie: np.ndarray
    at_atom: np.ndarray
    gap: np.ndarray


@dataclass(frozen=True)
class RayInfo:
    point: np.ndarray
    grad: np.ndarray
    alpha: float
    beta: float
    active_atom: int
    tie: bool = False


def rays(p: DiscretePotential, xs) -> RayBatch:
    """Gradient, ray extents and active atoms for a batch of points.

    At a kink the direction toward the lowest-index active atom is used and
    ``tie`` is set. At an atom with zero distance the gradient is zero and
    ``at_atom`` is set.
    """
    xs, _ = _as_batch(p, xs)
    M = xs.shape[0]
    dist = _distances(p, xs)
    vals = p.values[None, :] + dist
    u = vals.min(axis=1)
    active = np.argmin(vals, axis=1)
    cand = vals <= u[:, None] + TIE_TOL
    with np.errstate(invalid="ignore", divide="ignore"):
        dirs = (xs[:, None, :] - p.atoms[None, :, :]) / dist[:, :, None]
    first = np.argmax(cand, axis=1)  # lowest-index candidate
    rows = np.arange(M)
    at_atom = dist[rows, first] <= AT_ATOM_TOL
    # a zero-distance candidate anywhere in the active set is an atom hit
    zero_cand = np.any(cand & (dist <= AT_ATOM_TOL), axis=1)
    at_atom |= zero_cand
    g = np.where(at_atom[:, None], 0.0, dirs[rows, first])
    g = np.nan_to_num(g)
    # candidates pointing elsewhere mean a kink
    dev = np.linalg.norm(dirs - g[:, None, :], axis=2)
    dev = np.where(cand & ~at_atom[:, None], np.nan_to_num(dev, nan=np.inf), 0.0)
    colinear = cand & (dev <= ANGLE_TOL)
    tie = np.any(cand & (dev > ANGLE_TOL), axis=1) | at_atom
    # second-best gap among atoms not on the ray, reported for diagnostics
    other = np.where(colinear, np.inf, vals)
    gap = other.min(axis=1) - u

    alpha = np.where(colinear, dist, -np.inf).max(axis=1)
    endpoint = np.argmax(np.where(colinear, dist, -np.inf), axis=1)
    alpha = np.where(at_atom, 0.0, alpha)
    endpoint = np.where(at_atom, first, endpoint)
    active = np.where(at_atom | tie, first, active)

    # beta: smallest breaking root over atoms not on the ray
    w_dot_g = np.einsum("ijk,ik->ij", xs[:, None, :] - p.atoms[None, :, :], g)
    c = u[:, None] - p.values[None, :]
    denom = c - w_dot_g
    with np.errstate(invalid="ignore", divide="ignore"):
        roots = (dist**2 - c**2) / (2.0 * denom)
    breaks = (denom > 1e-15 * np.maximum(1.0, np.abs(c))) & ~colinear
    roots = np.where(breaks, np.maximum(roots, 0.0), np.inf)
    beta = np.minimum(roots.min(axis=1), p.beta_cap)
    beta = np.where(tie, 0.0, beta)
    return RayBatch(xs, g, alpha, beta, active, endpoint, tie, at_atom, gap)


def gradient(p: DiscretePotential, x):
    """Return ``(direction, active_atom, tie)`` at ``x``.

    ``tie`` is True at kinks, where ``direction`` points away from the
    lowest-index active atom. Raises :class:`NotDifferentiableError` when
    ``x`` sits on an active atom.
    """
    r = rays(p, np.asarray(x, dtype=float)[None, :])
    if r.at_atom[0]:
        raise NotDifferentiableError("x coincides with an active atom")
    return r.grad[0], int(r.active[0]), bool(r.tie[0])


def ray_info(p: DiscretePotential, x) -> RayInfo:
    r = rays(p, np.asarray(x, dtype=float)[None, :])
    if r.tie[0]:
        raise NotDifferentiableError(
            f"potential has a kink at x (active atom {int(r.active[0])}, "
            f"gap to next atom {float(r.gap[0]):.3e})"
        )
    return RayInfo(r.points[0], r.grad[0], float(r.alpha[0]), float(r.beta[0]), int(r.active[0]))


def finite_difference_gradient(f: Callable, x, h: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    for k in range(x.shape[0]):
        e = np.zeros_like(x)
        e[k] = h
        out[k] = (f(x + e) - f(x - e)) / (2 * h)
    return out


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------


def affine_deviation(p: DiscretePotential, start, end, n_points: int = 64) -> float:
    """Max gap between ``u`` on a segment and the chord joining its endpoint values."""
    start = np.asarray(start, dtype=float)
    end = np.asarray(end, dtype=float)
    t = np.linspace(0.0, 1.0, n_points)
    seg = (1 - t)[:, None] * start + t[:, None] * end
    vals = evaluate(p, seg)
    chord = (1 - t) * vals[0] + t * vals[-1]
    return float(np.max(np.abs(vals - chord)))


def ray_segment(info: RayInfo, cap: Optional[float] = None):
    beta = info.beta
    if not np.isfinite(beta):
        beta = cap if cap is not None else max(1.0, 2 * info.alpha)
    return info.point - info.alpha * info.grad, info.point + beta * info.grad


def check_affine_on_ray(p: DiscretePotential, x, n_points: int = 64) -> float:
    """Deviation of ``u`` from affine along the full ray through ``x``."""
    lower, upper = ray_segment(ray_info(p, x))
    return affine_deviation(p, lower, upper, n_points)


def lipschitz_violation(p: DiscretePotential, domain: Domain, n_pairs: int = 10_000, seed: int = 0) -> float:
    """Largest ``u(x) - u(z) - |x - z|`` over random pairs in ``domain``."""
    rng = np.random.default_rng(seed)
    xs = domain.sample_uniform(n_pairs, rng)
    zs = domain.sample_uniform(n_pairs, rng)
    diff = evaluate(p, xs) - evaluate(p, zs)
    return float(np.max(np.abs(diff) - np.linalg.norm(xs - zs, axis=1)))


def gradient_fd_error(p: DiscretePotential, xs, h: float = 1e-6) -> float:
    """Max deviation of the analytic gradient from central differences at non-kink points."""
    r = rays(p, xs)
    worst = 0.0
    for k in np.flatnonzero(~r.tie):
        fd = finite_difference_gradient(lambda z: evaluate(p, z), r.points[k], h)
        worst = max(worst, float(np.max(np.abs(fd - r.grad[k]))))
    return worst


@dataclass
class LipschitzReport:
    j: int
    ratio: float
    bound: float
    n_candidates: int
    n_in_set: int
    n_filtered: int
    n_pairs: int
    vacuous: bool
    passed: bool


def check_grad_lipschitz_Aj(
    p: DiscretePotential,
    j: int,
    samples: int = 2000,
    seed: int = 0,
    domain: Optional[Domain] = None,
    slack: float = 1e-6,
) -> LipschitzReport:
    """Observed Lipschitz ratio of ``grad u`` over points with both ray ends farther than ``1/j``.

    Candidates are drawn uniformly from the domain; each accepted point is
    paired with a close neighbour (also filtered through the set) and with a
    random other accepted point.
    """
    if j < 1:
        raise ValueError("j must be a positive integer")
    domain = domain or p.domain
    if domain is None:
        raise ValueError("a domain is required to sample the set")
    rng = np.random.default_rng(seed)
    cand = domain.sample_uniform(samples, rng)
    r = rays(p, cand)
    inside = ~r.tie & (np.minimum(r.alpha, r.beta) > 1.0 / j)
    pts, grads = cand[inside], r.grad[inside]
    n_in = int(inside.sum())
    bound = 4.0 * j
    if n_in < 2:
        return LipschitzReport(j, 0.0, bound, samples, n_in, samples - n_in, 0, True, True)
    # near neighbours probe the local constant
    step = rng.normal(size=pts.shape)
    step /= np.linalg.norm(step, axis=1, keepdims=True)
    near = pts + step * rng.uniform(1e-4, 0.5 / j, size=(len(pts), 1))
    rn = rays(p, near)
    keep = ~rn.tie & (np.minimum(rn.alpha, rn.beta) > 1.0 / j) & domain.contains(near)
    ratios = [
        np.linalg.norm(grads[keep] - rn.grad[keep], axis=1) / np.linalg.norm(pts[keep] - near[keep], axis=1)
    ]
    perm = rng.permutation(len(pts))
    far_a, far_b = pts, pts[perm]
    ok = perm != np.arange(len(pts))
    ratios.append(
        np.linalg.norm(grads[ok] - grads[perm][ok], axis=1) / np.linalg.norm(far_a[ok] - far_b[ok], axis=1)
    )
    allr = np.concatenate(ratios)
    ratio = float(allr.max(initial=0.0))
    filtered = samples - n_in + int((~keep).sum())
    return LipschitzReport(j, ratio, bound, samples, n_in, filtered, int(allr.size), False, ratio <= bound + slack)


def _segment_closest(p0, p1, q0, q1):
    """Closest points of two segments; returns ``(distance, s, t)`` with parameters in [0, 1]."""
    d1, d2, r = p1 - p0, q1 - q0, p0 - q0
    a, e, f = d1 @ d1, d2 @ d2, d2 @ r
    c = d1 @ r
    b = d1 @ d2
    denom = a * e - b * b
    s = np.clip((b * f - c * e) / denom, 0.0, 1.0) if denom > 1e-300 else 0.0
    t = (b * s + f) / e
    if t < 0.0:
        t, s = 0.0, np.clip(-c / a, 0.0, 1.0)
    elif t > 1.0:
        t, s = 1.0, np.clip((b - c) / a, 0.0, 1.0)
    return float(np.linalg.norm((p0 + s * d1) - (q0 + t * d2))), float(s), float(t)


@dataclass
class CrossingReport:
    n_rays: int
    n_pairs: int
    near_crossings: int
    violations: int
    passed: bool


def check_ray_crossings(p: DiscretePotential, xs, tol: float = 1e-9, tie_gap: float = 1e-8) -> CrossingReport:
    """Interior crossings of two rays may only happen where ``u`` has a kink."""
    r = rays(p, xs)
    idx = np.flatnonzero(~r.tie)
    cap = p.beta_cap if np.isfinite(p.beta_cap) else None
    segs = []
    for k in idx:
        info = RayInfo(r.points[k], r.grad[k], float(r.alpha[k]), float(r.beta[k]), int(r.active[k]))
        segs.append(ray_segment(info, cap))
    near = bad = pairs = 0
    for a in range(len(segs)):
        for b in range(a + 1, len(segs)):
            pairs += 1
            dist, s, t = _segment_closest(*segs[a], *segs[b])
            if dist > tol:
                continue
            la = np.linalg.norm(segs[a][1] - segs[a][0])
            lb = np.linalg.norm(segs[b][1] - segs[b][0])
            interior = tol < s * la < la - tol and tol < t * lb < lb - tol
            if not interior:
                continue
            # same ray traversed twice is not a crossing
            if np.linalg.norm(r.grad[idx[a]] - r.grad[idx[b]]) <= ANGLE_TOL:
                continue
            near += 1
            w = segs[a][0] + s * (segs[a][1] - segs[a][0])
            if rays(p, w[None, :]).gap[0] >= tie_gap:
                bad += 1
    return CrossingReport(len(segs), pairs, near, bad, bad == 0)


# ---------------------------------------------------------------------------
# Gradient penalty and the minibatch W1 estimator
# ---------------------------------------------------------------------------


def gradient_penalty(grad) -> float:
    """``max(0, |g| - 1)**2``."""
    return max(0.0, float(np.linalg.norm(grad)) - 1.0) ** 2


def grad_penalty(u, z, h: float = 1e-6) -> float:
    """Penalty of ``u`` at ``z``; ``u`` is a potential or any scalar callable.

    Kinks and atoms fall back to central differences.
    """
    z = np.asarray(z, dtype=float)
    if isinstance(u, DiscretePotential):
        r = rays(u, z[None, :])
        if not r.tie[0]:
            return gradient_penalty(r.grad[0])
        return gradient_penalty(finite_difference_gradient(lambda q: evaluate(u, q), z, h))
    return gradient_penalty(finite_difference_gradient(u, z, h))


def _penalties(p: DiscretePotential, zs, h=1e-6):
    r = rays(p, zs)
    out = np.array([gradient_penalty(g) for g in r.grad])
    for k in np.flatnonzero(r.tie):
        out[k] = grad_penalty(p, r.points[k], h)
    return out


def w1_minibatch_estimate(p, xs, ys, ts, lam: float = 1000.0, x_weights=None, y_weights=None) -> float:
    """``mean u(x) - mean u(y) - lam * mean G(grad u(x~))`` with ``x~ = (1-t) x + t y``.

    Without weights the batches are paired and must have equal length.
    With weights (full-population use) the means are weighted and the
    interpolation pairs cycle through both populations.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    ts = np.asarray(ts, dtype=float).ravel()
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if x_weights is None and y_weights is None:
        if not (len(xs) == len(ys) == len(ts)):
            raise ValueError(f"length mismatch: {len(xs)}, {len(ys)}, {len(ts)}")
        xw = np.full(len(xs), 1.0 / len(xs))
        yw = xw
    else:
        xw = np.full(len(xs), 1.0 / len(xs)) if x_weights is None else np.asarray(x_weights, float)
        yw = np.full(len(ys), 1.0 / len(ys)) if y_weights is None else np.asarray(y_weights, float)
        if len(xw) != len(xs) or len(yw) != len(ys):
            raise ValueError("length mismatch between points and weights")
    k = np.arange(len(ts))
    interp = (1 - ts)[:, None] * xs[k % len(xs)] + ts[:, None] * ys[k % len(ys)]
    if isinstance(p, DiscretePotential):
        ux, uy = evaluate(p, xs), evaluate(p, ys)
        pen = _penalties(p, interp) if lam > 0 and len(ts) else np.zeros(len(ts))
    else:
        ux = np.array([p(x) for x in xs])
        uy = np.array([p(y) for y in ys])
        pen = np.array([grad_penalty(p, z) for z in interp])
    penalty = float(pen.mean()) if len(pen) else 0.0
    return float(np.dot(xw, ux) - np.dot(yw, uy) - lam * penalty)


def dual_objective(p: DiscretePotential, mu, nu) -> float:
    """``int u dmu - int u dnu``."""
    return float(np.dot(mu.weights, evaluate(p, mu.points)) - np.dot(nu.weights, evaluate(p, nu.points)))


def potential_from_duals(nu, duals, domain: Optional[Domain] = None) -> DiscretePotential:
    return DiscretePotential(nu.points, duals.target_values, domain)
