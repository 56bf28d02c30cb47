"""Nested variational inference toolkit: learned annealed importance
samplers with proper weighting, plus a sequential heuristic-factor
experiment on hidden Markov models."""

from . import tape, targets, kernels, sampler, objectives, experiments

__version__ = "0.1.0"
