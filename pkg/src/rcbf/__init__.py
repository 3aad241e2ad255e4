"""Safe-set verification with recurrent control barrier functions."""

from .conditions import RcbfParams, ValidityParams, validity_min_tau
from .dynamics import VectorField, dubins3d, dubins_domain, make_system, single_integrator
from .geometry import SAFE, UNSAFE, Cell, Domain, Partition, signed_distance_to_union, split_cell
from .oracle import brute_force_brt, containment_fraction, volume_gap
from .sets import Ball, Box, Cylinder, Union, unsafe_from_json
from .verifier import VerificationResult, VerifierConfig, verify_region

__all__ = [
    "Ball", "Box", "Cell", "Cylinder", "Domain", "Partition", "RcbfParams", "SAFE", "UNSAFE", "Union",
    "ValidityParams", "VectorField", "VerificationResult", "VerifierConfig", "brute_force_brt",
    "containment_fraction", "dubins3d", "dubins_domain", "make_system", "signed_distance_to_union",
    "single_integrator", "split_cell", "unsafe_from_json", "validity_min_tau", "verify_region", "volume_gap",
]
