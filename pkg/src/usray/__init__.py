"""Differentiable Monte Carlo ultrasound simulation.

Ray transport with receiver-guided connections, a delay-and-sum B-mode chain
with exact adjoints, and a bounded Adam loop for inverse parameter estimation.
"""

__version__ = "0.1.0"
