"""Iterative uniform-step transport along fitted potentials.

Each stage moves every particle by ``x <- x - eta_n * grad u_n(x)`` where
``u_n`` is a potential for the current particle cloud and ``eta_n`` is an
estimate of the current W1. Potentials come from a backend instead of a
trained critic:

* ``exact``: optimal target duals of the current cloud;
* ``perturbed``: the same duals plus i.i.d. Gaussian noise, still pushed
  through the inf-convolution so the potential stays 1-Lipschitz.

Stages whose index is not in the fit schedule reuse the previous potential.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .exact_ot import solve_w1
from .map_recovery import OutsideHypothesesWarning, plan_targets, recover_map
from .measures import Domain, EmpiricalMeasure, bounding_domain
from .potential import DiscretePotential, NotDifferentiableError, evaluate, rays, w1_minibatch_estimate

ETA_FLOOR = 1e-12


@dataclass(frozen=True)
class Backend:
    kind: str = "exact"
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("exact", "perturbed"):
            raise ValueError(f"unknown backend {self.kind!r}")
        if self.kind == "perturbed" and not self.sigma >= 0:
            raise ValueError("perturbation sigma must be >= 0")

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "Backend":
        """``"exact"`` or ``"perturbed:<sigma>"``."""
        text = text.strip()
        if text == "exact":
            return cls("exact", 0.0, seed)
        if text.startswith("perturbed:"):
            return cls("perturbed", float(text.split(":", 1)[1]), seed)
        raise ValueError(f"cannot parse backend {text!r}")

    def __str__(self):
        return "exact" if self.kind == "exact" else f"perturbed:{self.sigma:g}"


def parse_schedule(text, n_steps: int) -> frozenset:
    """Fit schedule from ``"all"``, ``"alternating"`` or a comma list of indices."""
    if isinstance(text, str):
        t = text.strip()
        if t == "all":
            return frozenset(range(n_steps))
        if t == "alternating":
            return frozenset(range(0, n_steps, 2))
        idx = [int(s) for s in t.split(",") if s.strip()]
    else:
        idx = [int(s) for s in text]
    out = frozenset(idx)
    if any(i < 0 or i >= n_steps for i in out):
        raise ValueError(f"fit indices must lie in [0, {n_steps})")
    return out


@dataclass(frozen=True)
class TtcStage:
    potential: DiscretePotential
    eta: float
    fitted: bool = True

    def __post_init__(self):
        if not (np.isfinite(self.eta) and self.eta > 0):
            raise ValueError(f"step size must be finite and positive, got {self.eta}")


@dataclass(frozen=True)
class TtcPipeline:
    stages: tuple
    schedule: frozenset
    backend: Backend
    dim: int

    def __len__(self):
        return len(self.stages)


@dataclass
class TtcMetrics:
    w1_before: list = field(default_factory=list)
    w1_after: list = field(default_factory=list)
    eta: list = field(default_factory=list)
    fraction_long: list = field(default_factory=list)
    fitted: list = field(default_factory=list)
    runtime: list = field(default_factory=list)
    note: str = ""
    final_particles: Optional[np.ndarray] = None
    snapshots: list = field(default_factory=list)

    def __len__(self):
        return len(self.eta)

    def rows(self):
        for n in range(len(self)):
            yield {
                "stage": n,
                "w1_before": self.w1_before[n],
                "w1_after": self.w1_after[n],
                "eta": self.eta[n],
                "fraction_long": self.fraction_long[n],
                "fitted": int(self.fitted[n]),
                "runtime": self.runtime[n],
            }


def step_directions(p: DiscretePotential, xs: np.ndarray) -> np.ndarray:
    """Gradient used for the particle update; kinks use the tie-broken direction, atoms stay put."""
    return rays(p, xs).grad


def _fit(cloud: EmpiricalMeasure, nu: EmpiricalMeasure, backend: Backend, rng, domain):
    plan, duals = solve_w1(cloud, nu)
    exact = DiscretePotential(nu.points, duals.target_values, domain)
    if backend.kind == "exact" or backend.sigma == 0:
        return exact, exact, plan, duals
    noisy = duals.target_values + rng.normal(0.0, backend.sigma, size=len(nu))
    return DiscretePotential(nu.points, noisy, domain), exact, plan, duals


def _fraction_long(exact: DiscretePotential, cloud: EmpiricalMeasure, plan, eta: float) -> float:
    """Plan mass whose entry agrees with the ray endpoint and is at least ``eta`` long."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", OutsideHypothesesWarning)
        rm = recover_map(exact, cloud)
    lp = plan_targets(plan)
    long_ = (rm.targets >= 0) & (rm.targets == lp) & (rm.alpha >= eta)
    return float(cloud.weights[long_].sum())


def _estimate_eta(pot, cloud, nu, backend, lam, batch_size, n_batches, rng) -> float:
    if backend.kind == "exact":
        # full population; for an exact potential this is the dual objective
        ts = rng.uniform(size=max(len(cloud), len(nu)))
        return w1_minibatch_estimate(pot, cloud.points, nu.points, ts, lam, cloud.weights, nu.weights)
    vals = []
    for _ in range(n_batches):
        xi = rng.choice(len(cloud), size=batch_size, p=cloud.weights)
        yi = rng.choice(len(nu), size=batch_size, p=nu.weights)
        ts = rng.uniform(size=batch_size)
        vals.append(w1_minibatch_estimate(pot, cloud.points[xi], nu.points[yi], ts, lam))
    return float(np.mean(vals))


def train(
    mu: EmpiricalMeasure,
    nu: EmpiricalMeasure,
    n_steps: int,
    fit_at="all",
    backend: Backend | str = "exact",
    *,
    step_mode: str = "uniform",
    lam: float = 1000.0,
    batch_size: int = 64,
    n_batches: int = 100,
    seed: int = 0,
    keep_snapshots: bool = False,
    domain: Optional[Domain] = None,
):
    """Run ``n_steps`` stages and return ``(TtcPipeline, TtcMetrics)``.

    ``step_mode="alpha"`` replaces the uniform step by each particle's own
    ``alpha(x)``, which reproduces the recovered map in one stage.
    A nonpositive step estimate stops training; the note says why.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if mu.dim != nu.dim:
        raise ValueError("dimension mismatch")
    if isinstance(backend, str):
        backend = Backend.parse(backend, seed)
    schedule = parse_schedule(fit_at, n_steps)
    if not schedule:
        raise ValueError("fit schedule must be nonempty")
    if 0 not in schedule:
        raise ValueError("stage 0 must fit a potential")
    if step_mode not in ("uniform", "alpha"):
        raise ValueError(f"unknown step mode {step_mode!r}")
    rng = np.random.default_rng(backend.seed if backend.kind == "perturbed" else seed)
    est_rng = np.random.default_rng(seed + 1)
    domain = domain or bounding_domain(mu, nu)
    cloud = EmpiricalMeasure(mu.points, mu.weights, mu.shape)
    metrics = TtcMetrics()
    stages = []
    pot = None
    w1_now = None
    if keep_snapshots:
        metrics.snapshots.append(cloud.points.copy())
    for n in range(n_steps):
        t0 = time.perf_counter()
        fitted = n in schedule
        if fitted:
            pot, exact, plan, duals = _fit(cloud, nu, backend, rng, domain)
        else:
            plan, duals = solve_w1(cloud, nu)
            exact = DiscretePotential(nu.points, duals.target_values, domain)
        w1_now = duals.w1
        eta = _estimate_eta(pot, cloud, nu, backend, lam, batch_size, n_batches, est_rng)
        if not (eta > ETA_FLOOR):
            metrics.note = (
                "already optimal" if w1_now <= ETA_FLOOR else f"stage {n}: step estimate {eta:.3e} <= 0, stopped"
            )
            break
        frac = _fraction_long(exact, cloud, plan, eta)
        if step_mode == "uniform":
            new_pts = cloud.points - eta * step_directions(pot, cloud.points)
        else:
            r = rays(pot, cloud.points)
            new_pts = cloud.points - r.alpha[:, None] * r.grad
        cloud = cloud.with_points(new_pts)
        w1_after = solve_w1(cloud, nu, center=False)[1].w1
        stages.append(TtcStage(pot, float(eta), fitted))
        metrics.w1_before.append(float(w1_now))
        metrics.w1_after.append(float(w1_after))
        metrics.eta.append(float(eta))
        metrics.fraction_long.append(frac)
        metrics.fitted.append(fitted)
        metrics.runtime.append(time.perf_counter() - t0)
        if keep_snapshots:
            metrics.snapshots.append(cloud.points.copy())
    metrics.final_particles = cloud.points.copy()
    return TtcPipeline(tuple(stages), schedule, backend, mu.dim), metrics


def apply(pipeline: TtcPipeline, x0) -> np.ndarray:
    """Push one point (or a batch) through every stage in order."""
    x = np.asarray(x0, dtype=float)
    single = x.ndim == 1
    xs = np.atleast_2d(x).copy()
    if xs.shape[1] != pipeline.dim:
        raise ValueError(f"dimension mismatch {xs.shape[1]} vs {pipeline.dim}")
    for st in pipeline.stages:
        xs = xs - st.eta * step_directions(st.potential, xs)
    return xs[0] if single else xs


def monotone_violations(metrics: TtcMetrics) -> list:
    """Stages with more than half the mass long enough that failed to reduce W1."""
    return [
        n
        for n in range(len(metrics))
        if metrics.fraction_long[n] > 0.5 and not metrics.w1_after[n] < metrics.w1_before[n]
    ]


# ---------------------------------------------------------------------------
# One-step checks
# ---------------------------------------------------------------------------


@dataclass
class ReductionReport:
    eta: float
    w1_before: float
    w1_after: float
    fraction_long: float
    bound: float
    holds: bool
    strict_decrease: Optional[bool]
    passed: bool


def uniform_step_reduction_check(mu: EmpiricalMeasure, nu: EmpiricalMeasure, eta: float, slack: float = 1e-8) -> ReductionReport:
    """One uniform step of size ``eta`` against ``W1 - eta (2p - 1)``.

    ``p`` is the plan mass on entries that follow the potential's ray to
    their target and are at least ``eta`` long. On instances without kinks
    this is the source mass transported at least ``eta``.
    """
    if not eta > 0:
        raise ValueError("eta must be > 0")
    plan, duals = solve_w1(mu, nu)
    pot = DiscretePotential(nu.points, duals.target_values)
    p_long = _fraction_long(pot, mu, plan, eta)
    moved = mu.with_points(mu.points - eta * step_directions(pot, mu.points))
    after = solve_w1(moved, nu, center=False)[1].w1
    bound = duals.w1 - eta * (2 * p_long - 1)
    holds = after <= bound + slack
    strict = (after < duals.w1) if p_long > 0.5 else None
    passed = holds and (strict is not False)
    return ReductionReport(eta, duals.w1, after, p_long, bound, holds, strict, passed)


@dataclass
class AdvRegReport:
    x0: np.ndarray
    eta: float
    predicted: np.ndarray
    minimizer: np.ndarray
    discrepancy: float
    descent_point: np.ndarray
    descent_discrepancy: float
    passed: bool


def prox_objective(p: DiscretePotential, x0, eta: float):
    x0 = np.asarray(x0, dtype=float)
    return lambda x: 0.5 * float(np.sum((np.asarray(x) - x0) ** 2)) + eta * evaluate(p, x)


def piecewise_prox(p: DiscretePotential, x0, eta: float) -> np.ndarray:
    """Global minimizer of ``0.5|x - x0|^2 + eta u(x)`` by enumerating cone pieces.

    ``u`` is a minimum of cones ``v_j + |x - y_j|``, so the global minimum is
    the best of the per-cone minimizers, each of which is closed form.
    """
    x0 = np.asarray(x0, dtype=float)
    best, best_val = None, np.inf
    for y, v in zip(p.atoms, p.values):
        r = np.linalg.norm(x0 - y)
        if r > eta:
            z = x0 - eta * (x0 - y) / r
            val = 0.5 * eta**2 + eta * (v + r - eta)
        else:
            z = y.copy()
            val = 0.5 * r**2 + eta * v
        if val < best_val:
            best, best_val = z, val
    return best


def subgradient_descent(p: DiscretePotential, x0, eta: float, iterations: int = 1000) -> np.ndarray:
    """Diminishing-step subgradient descent from ``x0``, keeping the best iterate."""
    x0 = np.asarray(x0, dtype=float)
    f = prox_objective(p, x0, eta)
    x = x0.copy()
    best, best_val = x.copy(), f(x)
    for k in range(iterations):
        r = rays(p, x[None, :])
        g = (x - x0) + eta * r.grad[0]
        x = x - (1.0 / (k + 2)) * g
        val = f(x)
        if val < best_val:
            best, best_val = x.copy(), val
    return best


def advreg_equivalence_check(p: DiscretePotential, x0, eta: float, tol: float = 1e-6) -> AdvRegReport:
    """Check that the regularized denoising step equals one gradient step of size ``eta``."""
    x0 = np.asarray(x0, dtype=float)
    r = rays(p, x0[None, :])
    if r.tie[0]:
        raise NotDifferentiableError("x0 must be a differentiable point")
    if not (0 < eta < 0.9 * r.alpha[0]):
        raise ValueError(f"need 0 < eta < 0.9 * alpha(x0) = {0.9 * r.alpha[0]:.6g}")
    predicted = x0 - eta * r.grad[0]
    exact = piecewise_prox(p, x0, eta)
    descent = subgradient_descent(p, x0, eta)
    disc = float(np.linalg.norm(exact - predicted))
    ddisc = float(np.linalg.norm(descent - predicted))
    return AdvRegReport(x0, eta, predicted, exact, disc, descent, ddisc, disc <= tol)
