"""
torusstab - a C1-stable endomorphism of the two-torus.

Builds the map, certifies its hyperbolic structure and constructs
conjugacies to small perturbations.
"""

__version__ = "1.0.0"
