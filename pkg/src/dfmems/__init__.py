"""Finite-difference simulator for a two-membrane electrostatic MEMS device.

Modules: ``core`` (grids, states, admissibility), ``elliptic`` (potential on
the mapped rectangle), ``evolution`` (time stepping and touchdown),
``narrow_gap`` (vanishing aspect ratio limit), ``steady`` (stationary
states, continuation, stability) and ``cli``.
"""
from .core import Grid, MembranePair, Params, make_grid

__all__ = ["Grid", "MembranePair", "Params", "make_grid"]
__version__ = "0.1.0"
