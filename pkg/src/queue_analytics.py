"""Closed-form queueing and speedup formulas used as simulator oracles.

- M/D/1 mean response time: ``W = λτ² / (2(1 - λτ)) + τ``
- Amdahl speedup: ``1 / ((1 - α) + α / K)``

``simulate_md1`` is a discrete-event check of the first formula.
"""

import logging
import sys

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .errors import ParameterError, SaturationError

# Configure logging to stderr only (never stdout - corrupts JSON/CSV command output)
logging.basicConfig(stream=sys.stderr, level=logging.INFO)
logger = logging.getLogger("brownout-moe.queue")


class MD1Params(BaseModel):
    """Poisson arrival rate and deterministic service time of a single-server queue."""

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    lam: float = Field(..., ge=0.0, alias="lambda", description="Arrival rate in requests/second")
    tau: float = Field(..., gt=0.0, description="Service time in seconds")

    @property
    def utilisation(self) -> float:
        return self.lam * self.tau


class SpeedupQuery(BaseModel):
    model_config = ConfigDict(frozen=True)

    alpha: float = Field(..., ge=0.0, le=1.0, description="Share of latency that is accelerated")
    k_factor: float = Field(..., gt=0.0, description="Acceleration factor of that share")


def md1_utilisation(p: MD1Params) -> float:
    return p.utilisation


def md1_waiting_time(p: MD1Params) -> float:
    """Mean time spent in the queue before service starts.

    Raises:
        SaturationError: If ``λτ >= 1``
    """
    rho = p.utilisation
    if rho >= 1.0:
        raise SaturationError(
            f"Queue is saturated: lambda*tau = {rho:.6g} >= 1",
            "queue",
            {"lambda": p.lam, "tau": p.tau},
        )
    return p.lam * p.tau**2 / (2.0 * (1.0 - rho))


def md1_response_time(p: MD1Params) -> float:
    """Mean response time (waiting plus service) of an M/D/1 queue."""
    return md1_waiting_time(p) + p.tau


def amdahl_speedup(q: SpeedupQuery) -> float:
    """Overall speedup when a share ``alpha`` of the work runs ``k_factor`` times faster."""
    return 1.0 / ((1.0 - q.alpha) + q.alpha / q.k_factor)


def simulate_md1(lam: float, tau: float, n: int, seed: int = 0) -> float:
    """Mean response time of ``n`` FIFO customers with Poisson arrivals and service ``tau``.

    Uses the departure recursion ``D_i = max(A_i, D_{i-1}) + tau``, evaluated
    as a running maximum.

    Raises:
        ParameterError: If ``lam`` or ``tau`` is not positive or ``n < 1``
    """
    if lam <= 0 or tau <= 0 or n < 1:
        raise ParameterError(
            "simulate_md1 needs lam > 0, tau > 0 and n >= 1",
            "queue",
            {"lam": lam, "tau": tau, "n": n},
        )
    rng = np.random.default_rng(seed)
    arrivals = np.cumsum(rng.exponential(1.0 / lam, n))
    index = np.arange(n, dtype=np.float64)
    departures = np.maximum.accumulate(arrivals - index * tau) + (index + 1.0) * tau
    mean_response = float((departures - arrivals).mean())
    logger.debug(f"Simulated M/D/1 lam={lam} tau={tau} n={n}: mean response {mean_response:.6g}")
    return mean_response
