"""Two-system ensemble and adaptive Langevin MCMC samplers with diagnostics."""

__version__ = "0.1.0"
