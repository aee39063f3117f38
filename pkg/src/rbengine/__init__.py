"""Restless-bandit policy engine.

Solves the single-armed average-reward LP relaxation of an N-armed restless
bandit, runs focus-set policies (set-expansion, ID, set-optimization) and
comparison policies (LP-priority, FTVA, random) on a discrete-time simulator,
and measures optimality gaps and drift/coverage diagnostics.
"""

from rbengine.mdp import ArmConfig, RBInstance, ValidationReport, validate
from rbengine.lp import ChainReport, LPSolution, solve_lp

__all__ = [
    "ArmConfig",
    "RBInstance",
    "ValidationReport",
    "validate",
    "ChainReport",
    "LPSolution",
    "solve_lp",
]

__version__ = "0.1.0"
