"""Exact W1 Kantorovich potentials, map recovery along rays and uniform-step transport."""

from .exact_ot import DualSolution, TransportPlan, hungarian_oracle, solve_w1, validate_duals, w1_distance
from .map_recovery import recover_map, verify_pushforward
from .measures import CorruptionSpec, Domain, EmpiricalMeasure, corrupt, make_empirical, psnr, synth_dataset
from .potential import DiscretePotential, evaluate, ray_info, rays, w1_minibatch_estimate
from .ttc import Backend, apply, train

__version__ = "0.1.0"

__all__ = [
    "Backend", "CorruptionSpec", "DiscretePotential", "Domain", "DualSolution", "EmpiricalMeasure",
    "TransportPlan", "apply", "corrupt", "evaluate", "hungarian_oracle", "make_empirical", "psnr",
    "ray_info", "rays", "recover_map", "solve_w1", "synth_dataset", "train", "validate_duals",
    "verify_pushforward", "w1_distance", "w1_minibatch_estimate",
]
