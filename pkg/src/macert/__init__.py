"""Certified C1 finite element solver for the Monge-Ampere equation.

The equation det D2u = (f/2)^2 on the unit square is regularised into a
uniformly elliptic Bellman-type problem, discretised with Bogner-Fox-Schmit
bicubics on adaptively refined quadtree meshes, and post-processed through
the convex envelope of the discrete solution to obtain guaranteed
L-infinity error bounds.
"""

from .bench import EXPERIMENTS, HistoryRow, RunConfig, emit_dat, rate_fit, run
from .bfs import BfsSpace, FeFunction, QuadRule, interpolate_boundary, norms_vs_exact
from .envelope import build_samples, contact_set, envelope_gap, lower_hull
from .estimator import ErrorCertificate, indicators_and_mark, rhs0, rhs_eps, select_j
from .geometry import InteriorBand, Rect, RectMesh, band_split, init_uniform, min_edge_length, refine
from .hjb import HjbProblem, Policy, SymMat2, eval_F, solve, xi_of

__all__ = [
    "EXPERIMENTS",
    "HistoryRow",
    "RunConfig",
    "emit_dat",
    "rate_fit",
    "run",
    "BfsSpace",
    "FeFunction",
    "QuadRule",
    "interpolate_boundary",
    "norms_vs_exact",
    "build_samples",
    "contact_set",
    "envelope_gap",
    "lower_hull",
    "ErrorCertificate",
    "indicators_and_mark",
    "rhs0",
    "rhs_eps",
    "select_j",
    "InteriorBand",
    "Rect",
    "RectMesh",
    "band_split",
    "init_uniform",
    "min_edge_length",
    "refine",
    "HjbProblem",
    "Policy",
    "SymMat2",
    "eval_F",
    "solve",
    "xi_of",
]
