"""Optimistic online caching policies for bipartite and elastic cache networks."""
from .model import (ConfigError, Instance, InvalidRequest, Prediction, Request,
                    SparseGradient, bipartite, evaluate_utility, gradient_of,
                    prediction_to_gradient, single_cache)
from .geometry import Polytope, diameter, linear_maximize, project
from .policies import OBC, OEC, OGD, XC, best_in_hindsight

__version__ = "0.1.0"
