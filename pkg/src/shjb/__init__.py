"""Tools for controlled diffusions with path-dependent random coefficients.

The package bundles five things that are usually scattered across one-off
research scripts:

* a tiny expression language for problem coefficients,
* counter-based Brownian path sampling with exact branching,
* Monte Carlo value estimation (brute-force control search and a
  backward-induction oracle),
* a lifted finite-difference solver for the associated
  Hamilton-Jacobi-Bellman equation with knot-frozen randomness, plus the
  backward-SDE correction layer that turns its output into upper and lower
  value envelopes,
* statistical viscosity-solution checks built from branching path ensembles.

Everything is deterministic given a seed: the same inputs produce the same
bytes on every run, regardless of thread count.
"""

__version__ = "0.1.0"

__all__ = ["__version__"]
