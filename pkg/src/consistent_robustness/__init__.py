"""Consistent adversarial robustness of linear classifiers.

Submodules:

* ``special_math``: Gaussian integrals, root finding, scalar minimization.
* ``geometry``: dual-norm distances, attack existence and construction.
* ``losses``: margin losses and their proximal maps.
* ``asymptotic_metrics``: high-dimensional clean, robust and consistent errors.
* ``state_evolution``: fixed-point equations of the latent variable model.
* ``simulation``: data generation, robust ERM training and empirical metrics.
* ``cli``: command-line experiment runner.
"""

from . import asymptotic_metrics, geometry, losses, simulation, special_math, state_evolution

__version__ = "0.1.0"

__all__ = ["asymptotic_metrics", "geometry", "losses", "simulation", "special_math", "state_evolution"]
