"""Pricing and hedging with least-squares Monte Carlo and differential neural networks."""

__version__ = "0.1.0"
