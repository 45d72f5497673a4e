"""Transport maps read off a Kantorovich potential.

Each source point moves along ``-grad u`` by ``alpha(x)``, the length of the
saturated segment below it. When the target is supported on finitely many
atoms in dimension ``d >= 2`` this lands on an atom, and the resulting map
is the optimal one up to a null set.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .exact_ot import SUPPORT_MASS, TransportPlan, solve_w1
from .measures import EmpiricalMeasure
from .potential import DiscretePotential, rays

SNAP_TOL = 1e-7


class OutsideHypothesesWarning(UserWarning):
    """The codimension hypothesis fails (``d == 1``); results are not guaranteed."""


@dataclass(frozen=True)
class RecoveredMap:
    targets: np.ndarray  # atom index per source, -1 when the endpoint hit no atom
    positions: np.ndarray  # x - alpha * grad
    alpha: np.ndarray
    tie: np.ndarray
    weights: np.ndarray
    mismatch_mass: Optional[float] = None
    split_rows: int = 0
    tie_mass: float = 0.0
    outside_hypotheses: bool = False

    @property
    def unsnapped(self) -> int:
        return int(np.sum(self.targets < 0))


def plan_targets(plan: TransportPlan) -> np.ndarray:
    """Single LP target per source row, ``-1`` for empty rows, ``-2`` for split rows."""
    m = plan.shape[0]
    out = np.full(m, -1)
    pos = plan.mass > SUPPORT_MASS
    for i, j in zip(plan.rows[pos], plan.cols[pos]):
        out[i] = j if out[i] == -1 else -2
    return out


def recover_map(p: DiscretePotential, mu: EmpiricalMeasure, plan: Optional[TransportPlan] = None) -> RecoveredMap:
    """Apply ``T(x) = x - alpha(x) grad u(x)`` to every source atom.

    When ``plan`` is given, ``mismatch_mass`` is the source mass whose
    recovered target differs from the plan's single target. Kinks and split
    plan rows are left out of that count and reported separately.
    """
    if mu.dim < 1:
        raise ValueError("dimension must be >= 1")
    outside = mu.dim == 1
    if outside:
        warnings.warn(
            "d = 1: a potential alone does not determine the map; the recovery guarantee does not apply",
            OutsideHypothesesWarning,
            stacklevel=2,
        )
    r = rays(p, mu.points)
    pos = mu.points - r.alpha[:, None] * r.grad
    # snap to the endpoint atom
    gap = np.linalg.norm(pos - p.atoms[r.endpoint_atom], axis=1)
    targets = np.where(gap <= SNAP_TOL, r.endpoint_atom, -1)
    tie = r.tie.copy()
    tie_mass = float(mu.weights[tie].sum())
    mismatch = None
    split = 0
    if plan is not None:
        lp = plan_targets(plan)
        split = int(np.sum(lp == -2))
        counted = (~tie) & (lp >= 0)
        mismatch = float(mu.weights[counted & (lp != targets)].sum())
    return RecoveredMap(targets, pos, r.alpha, tie, mu.weights.copy(), mismatch, split, tie_mass, outside)


@dataclass
class PushforwardReport:
    pushed_mass: np.ndarray
    max_mass_deviation: float
    cost: float
    w1: float
    cost_rel_error: float
    unsnapped: int
    outside_hypotheses: bool


def verify_pushforward(rm: RecoveredMap, mu: EmpiricalMeasure, nu: EmpiricalMeasure, w1: Optional[float] = None) -> PushforwardReport:
    """Compare the pushed-forward atom masses to ``nu`` and the map's cost to W1."""
    if w1 is None:
        _, duals = solve_w1(mu, nu)
        w1 = duals.w1
    pushed = np.zeros(len(nu))
    snapped = rm.targets >= 0
    np.add.at(pushed, rm.targets[snapped], mu.weights[snapped])
    dev = float(np.max(np.abs(pushed - nu.weights)))
    cost = float(np.dot(mu.weights, np.linalg.norm(mu.points - rm.positions, axis=1)))
    rel = abs(cost - w1) / max(abs(w1), 1e-300) if w1 != 0 else abs(cost)
    return PushforwardReport(pushed, dev, cost, w1, rel, rm.unsnapped, rm.outside_hypotheses)


@dataclass
class UniquenessReport:
    identical: bool
    variants: int
    compared: int
    excluded_ties: int
    notes: list


def check_map_uniqueness(
    p: DiscretePotential,
    mu: EmpiricalMeasure,
    nu: EmpiricalMeasure,
    trials: int = 3,
    seed: int = 0,
    shifts=(7.3, -2.5),
) -> UniquenessReport:
    """Recover the map under dual gauge shifts and under re-solves of permuted inputs.

    Targets are compared as atom coordinates so relabelling does not matter.
    Kink points in any variant are excluded.
    """
    rng = np.random.default_rng(seed)
    base = recover_map(p, mu)
    ref = base.positions
    excluded = base.tie.copy()
    variants = []
    for c in shifts:
        shifted = recover_map(p.shifted(c), mu)
        variants.append(shifted.positions)
        excluded |= shifted.tie
    for _ in range(trials):
        ps = rng.permutation(len(mu))
        pt = rng.permutation(len(nu))
        mu_p = EmpiricalMeasure(mu.points[ps], mu.weights[ps], mu.shape)
        nu_p = EmpiricalMeasure(nu.points[pt], nu.weights[pt], nu.shape)
        _, duals = solve_w1(mu_p, nu_p)
        pot = DiscretePotential(nu_p.points, duals.target_values, p.domain)
        rm = recover_map(pot, mu_p)
        back = np.empty_like(rm.positions)
        back[ps] = rm.positions
        tie_back = np.empty_like(rm.tie)
        tie_back[ps] = rm.tie
        excluded |= tie_back
        variants.append(back)
    keep = ~excluded
    same = all(np.allclose(v[keep], ref[keep], atol=SNAP_TOL, rtol=0) for v in variants)
    notes = []
    if excluded.any():
        notes.append(f"{int(excluded.sum())} kink points excluded (null set for absolutely continuous sources)")
    return UniquenessReport(bool(same), len(variants), int(keep.sum()), int(excluded.sum()), notes)


def direction_law_error(p: DiscretePotential, rm: RecoveredMap, mu: EmpiricalMeasure) -> float:
    """Max deviation of ``(T(x) - x)/|T(x) - x|`` from ``-grad u(x)`` over non-kink points."""
    r = rays(p, mu.points)
    disp = rm.positions - mu.points
    norm = np.linalg.norm(disp, axis=1)
    ok = (~r.tie) & (norm > 0)
    if not ok.any():
        return 0.0
    unit = disp[ok] / norm[ok, None]
    return float(np.max(np.linalg.norm(unit + r.grad[ok], axis=1)))


def pushforward_measure(rm: RecoveredMap, shape=None) -> EmpiricalMeasure:
    return EmpiricalMeasure(rm.positions, rm.weights, shape)


__all__ = [
    "OutsideHypothesesWarning",
    "RecoveredMap",
    "recover_map",
    "verify_pushforward",
    "check_map_uniqueness",
    "direction_law_error",
    "plan_targets",
    "pushforward_measure",
]
