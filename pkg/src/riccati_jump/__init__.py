"""Linear-quadratic control with Brownian and Poisson noise: Riccati solvers,
Monte Carlo verification, and a lattice replay of the backward Riccati equation."""

__version__ = "0.1.0"
