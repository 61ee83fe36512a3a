"""Variational latent force models with differentiable ODE/FEM solvers and a neural operator."""

__version__ = "0.1.0"
