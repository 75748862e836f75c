"""Hierarchical Bayesian modeling of groundwater arsenic dynamics.

Subpackages are organized by pipeline stage: spatial basis construction
(:mod:`aqdyn.geo_basis`), field-kit calibration (:mod:`aqdyn.measurement`),
hierarchical log densities (:mod:`aqdyn.models`), Hamiltonian Monte Carlo
(:mod:`aqdyn.sampler`), posterior summaries (:mod:`aqdyn.summaries`), data
loading and simulation (:mod:`aqdyn.data_io`), and the command line
(:mod:`aqdyn.cli`).
"""

__version__ = "0.1.0"
