"""Simulation and exact verification tools for monotone interacting particle systems.

Modules: :mod:`rates` (rate tables), :mod:`graphical` (Poisson timelines and
the forward construction), :mod:`influence` (backward cones and branching
random walks), :mod:`pivotal` (pivotality, Russo derivative, influence
integrals), :mod:`explore` (randomized exploration and the OSSS bound),
:mod:`oracle` (exact small-box Markov chain), :mod:`experiments`
(campaigns, inequality checks, sharpness sweep, manifests).
"""
__version__ = "0.1.0"
