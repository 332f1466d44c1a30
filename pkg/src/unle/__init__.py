"""Energy-based synthetic likelihood methods for simulation-based inference.

Amortized (tilted joint EBM + standard MCMC) and sequential (conditional
EBM + doubly intractable sampling or a learned log-normalizer surrogate)
posterior estimation, with the samplers, benchmark tasks and metrics needed
to evaluate them.
"""

__version__ = "0.1.0"
