"""Rényi measures, sphere-packing bounds for channels with feedback, and an
exact finite model of the auxiliary-measure lower-bound construction."""

from .probability import Dmc, Pmf, bsc, renyi_divergence, total_variation
from .renyi import renyi_capacity, renyi_information, renyi_mean

__all__ = [
    "Dmc",
    "Pmf",
    "bsc",
    "renyi_capacity",
    "renyi_divergence",
    "renyi_information",
    "renyi_mean",
    "total_variation",
]
