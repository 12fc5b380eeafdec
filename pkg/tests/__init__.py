"""Test package for the brownout MoE simulator.

This package contains unit and property tests for all components of the simulator,
including routing, distillation, latency control, queueing oracles and the serving engine.
"""

__version__ = "0.1.0"
