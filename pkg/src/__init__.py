"""Brownout MoE serving simulator.

This package implements brownout routing for Mixture-of-Experts layers, united-expert
distillation, SLO-aware threshold control and a discrete-event serving simulator.
"""

__version__ = "0.1.0"
