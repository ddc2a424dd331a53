"""Independent ground truth: closed-form Gaussian flows and brute-force re-solves.

Nothing in here touches the solvers' internals.  The Gaussian values come
from textbook integrals evaluated by hand; the fine-grid resolver rebuilds a
scenario at higher resolution with tightened solver tolerances and returns
its functional series for convergence diffs.  Frozen constants in the test
suite all trace back to one of these two sources.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .fdtools import fd_derivative
from .flows import FlowSpec
from .functionals import FunctionalSeries, assemble_series

__all__ = [
    "GaussianHeatState",
    "gaussian_heat_oracle",
    "DilationState",
    "dilation_oracle",
    "fine_grid_resolve",
    "fd_derivative",
]


@dataclass(frozen=True)
class GaussianHeatState:
    """Closed-form functionals of a Gaussian diffusing at strength sigma.

    The density stays Gaussian with covariance v0 + sigma t Id; every matrix
    functional is a function of that covariance alone.
    """

    time: float
    sigma: float
    covariance: np.ndarray
    entropy: float
    fisher: np.ndarray
    production: np.ndarray
    t_plus: np.ndarray
    t_minus: np.ndarray
    velocity: np.ndarray
    production_rate: np.ndarray
    energy: float
    matrix_energy: np.ndarray


def _sym_inverse(M: np.ndarray) -> np.ndarray:
    n = M.shape[0]
    if n == 1:
        return np.array([[1.0 / M[0, 0]]])
    return np.linalg.inv(M)


def gaussian_heat_oracle(v0, sigma: float, t: float) -> GaussianHeatState:
    """Functionals of the Gaussian heat solution at time t.

    Args:
        v0: initial covariance, a scalar (isotropic shorthand for 1D) or an
            (n, n) symmetric positive definite array.
        sigma: diffusion strength > 0.
        t: elapsed time >= 0.

    Derivation: rho_t = N(m, v0 + sigma t Id) solves d/dt rho = (sigma/2) lap
    rho, with phase theta = -(sigma/2) log rho.  For a Gaussian with
    covariance C:

        entropy     int rho log rho   = -(1/2) log det(2 pi e C)
        fisher      int (grad log rho)^2 drho = C^{-1}
        production  -(sigma/2) C^{-1}      (theta's Hessian is (sigma/2) C^{-1})
        velocity    (sigma^2/4) C^{-1}
        t_plus      0,  t_minus  -sigma C^{-1}
        d/dt production = (sigma^2/2) C^{-2}
        energy      (1/2)tr V - (sigma^2/8)tr I = 0, matrix version 0.
    """
    v0 = np.atleast_2d(np.asarray(v0, dtype=np.float64))
    n = v0.shape[0]
    if v0.shape != (n, n) or np.abs(v0 - v0.T).max() > 1e-12 * max(1.0, np.abs(v0).max()):
        raise ValueError(f"v0 must be symmetric square, got shape {v0.shape}")
    if sigma <= 0.0:
        raise ValueError("sigma must be positive")
    if t < 0.0:
        raise ValueError("time must be >= 0")
    eigs = np.linalg.eigvalsh(v0)
    if eigs.min() <= 0.0:
        raise ValueError("v0 must be positive definite")

    cov = v0 + sigma * t * np.eye(n)
    inv = _sym_inverse(cov)
    entropy = -0.5 * math.log((2.0 * math.pi * math.e) ** n * float(np.linalg.det(cov)))
    fisher = inv
    production = -(0.5 * sigma) * inv
    return GaussianHeatState(
        time=float(t),
        sigma=float(sigma),
        covariance=cov,
        entropy=entropy,
        fisher=fisher,
        production=production,
        t_plus=np.zeros((n, n)),
        t_minus=-sigma * inv,
        velocity=(sigma * sigma / 4.0) * inv,
        production_rate=(sigma * sigma / 2.0) * (inv @ inv),
        energy=0.0,
        matrix_energy=np.zeros((n, n)),
    )


@dataclass(frozen=True)
class DilationState:
    """Closed-form values of the 1D self-similar dilation at one time."""

    time: float
    std: float
    theta_curvature: float
    production: float
    production_rate: float
    fisher: float
    velocity: float
    entropy: float


def dilation_oracle(a: float, b: float, t: float) -> DilationState:
    """1D zero-viscosity dilation: Gaussian of std a + bt, theta quadratic.

    The pair rho_t = N(m, (a+bt)^2), theta_t = b (x-m)^2 / (2(a+bt)) solves
    the free sigma = 0 system exactly.  Then

        production      S(t) = -b/(a+bt)   (sign pinned by dE/dt = tr S:
                        entropy -(1/2)log(2 pi e (a+bt)^2) has slope -b/(a+bt))
        rate            dS/dt = b^2/(a+bt)^2 = S(t)^2   (the equality case)
        fisher          1/(a+bt)^2
        velocity        b^2   (constant: the flow is a geodesic).
    """
    s = a + b * t
    if s <= 0.0:
        raise ValueError(f"a + b t must stay positive, got {s}")
    S = -b / s
    return DilationState(
        time=float(t),
        std=float(s),
        theta_curvature=b / s,
        production=S,
        production_rate=S * S,
        fisher=1.0 / (s * s),
        velocity=b * b,
        entropy=-0.5 * math.log(2.0 * math.pi * math.e * s * s),
    )


def fine_grid_resolve(spec: FlowSpec, factor: int = 2) -> FunctionalSeries:
    """Re-run a scenario at ``factor``-times finer resolution in space and time.

    Solver tolerances tighten with the refinement (see FlowSpec.refined), so
    the result is a brute-force oracle for the base run's functionals.
    """
    return assemble_series(spec.refined(factor).build())
