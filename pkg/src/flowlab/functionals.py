"""Scalar and matrix functionals of density-phase pairs, and their time series.

The central objects are, for a pair (rho, theta) with velocity
v = drift + grad theta:

    entropy            E      = int rho log rho
    Fisher matrix      I[i,j] = int (d_i log rho)(d_j log rho) drho
                              = -int hess(log rho) drho          (by parts)
    production matrix  S[i,j] = int (d_i rho) v_j dx, symmetrized
                              = -int hess(theta) drho            (by parts)
    velocity moment    V[i,j] = int v_i v_j drho
    signed bundles     T+- = S +- (sigma/2) I
    matrix entropy     EM(t) = cumulative trapezoid of S
    remainder          R = int hess(U) drho + int (-hess W)*rho drho
                           + int f'(rho) (grad rho x grad rho) dx

Trace of S is the entropy dissipation rate dE/dt.  The two integration-by-
parts forms of I and S are computed side by side; their gap is the series'
resolution certificate, since they agree exactly in the continuum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .coefficients import CoefficientSet
from .fdtools import fd_derivative
from .flows import FlowTrajectory, _drift_vector
from .grid import Density, Grid, GridError, ScalarField, integrate
from .matrixcomp import cumulative_trapezoid

__all__ = [
    "entropy",
    "fisher_matrix",
    "entropy_production_matrix",
    "velocity_second_moment",
    "t_matrices",
    "remainder_matrix",
    "matrix_energy",
    "scalar_energy",
    "production_derivative_rhs",
    "FunctionalSeries",
    "assemble_series",
    "cost_accumulate",
]


def _pair_spectra(rho: Density, theta: ScalarField):
    grid = rho.grid
    if not grid.compatible(theta.grid):
        raise GridError("density and phase live on different grids")
    s = np.log(rho.values)
    return grid, s, grid.forward(s), grid.forward(theta.values)


def _grad_from_spec(grid: Grid, spec) -> list[np.ndarray]:
    return [grid.inverse(grid._ik[ax] * spec) for ax in range(grid.dim)]


def _hess_entry(grid: Grid, spec, i: int, j: int) -> np.ndarray:
    if i == j:
        return grid.inverse(-(grid._k[i] ** 2) * spec)
    return grid.inverse(grid._ik[i] * grid._ik[j] * spec)


def entropy(rho: Density) -> float:
    """Boltzmann entropy integral int rho log rho (sign convention: no minus)."""
    return float(integrate(rho.values * np.log(rho.values), rho.grid))


def fisher_matrix(rho: Density, form: str = "outer") -> np.ndarray:
    """Fisher information matrix of rho.

    form="outer":   int (grad log rho) x (grad log rho) drho   (PSD by built)
    form="hessian": -int hess(log rho) drho                    (by parts)
    """
    grid = rho.grid
    s = np.log(rho.values)
    spec = grid.forward(s)
    n = grid.dim
    out = np.zeros((n, n))
    if form == "outer":
        grads = _grad_from_spec(grid, spec)
        for i in range(n):
            for j in range(i, n):
                out[i, j] = out[j, i] = integrate(grads[i] * grads[j] * rho.values, grid)
        return out
    if form == "hessian":
        for i in range(n):
            for j in range(i, n):
                out[i, j] = out[j, i] = -integrate(
                    _hess_entry(grid, spec, i, j) * rho.values, grid)
        return out
    raise ValueError(f"unknown Fisher form {form!r}")


def entropy_production_matrix(rho: Density, theta: ScalarField, drift=None,
                              form: str = "grad") -> np.ndarray:
    """Symmetrized production matrix of the pair.

    form="grad":    int (grad rho) x_sym v dx with grad rho = rho grad log rho
    form="hessian": -int hess(theta) drho (the constant drift drops out)

    Its trace is the entropy rate dE/dt along the flow.
    """
    grid, s, s_spec, th_spec = _pair_spectra(rho, theta)
    drift = _drift_vector(grid, drift)
    n = grid.dim
    out = np.zeros((n, n))
    if form == "grad":
        grad_rho = [rho.values * g for g in _grad_from_spec(grid, s_spec)]
        v = [g + drift[ax] for ax, g in enumerate(_grad_from_spec(grid, th_spec))]
        for i in range(n):
            for j in range(i, n):
                sym = 0.5 * (grad_rho[i] * v[j] + grad_rho[j] * v[i])
                out[i, j] = out[j, i] = integrate(sym, grid)
        return out
    if form == "hessian":
        for i in range(n):
            for j in range(i, n):
                out[i, j] = out[j, i] = -integrate(
                    _hess_entry(grid, th_spec, i, j) * rho.values, grid)
        return out
    raise ValueError(f"unknown production form {form!r}")


def velocity_second_moment(rho: Density, theta: ScalarField, drift=None) -> np.ndarray:
    """int v x v drho with v = drift + grad theta."""
    grid, _, _, th_spec = _pair_spectra(rho, theta)
    drift = _drift_vector(grid, drift)
    v = [g + drift[ax] for ax, g in enumerate(_grad_from_spec(grid, th_spec))]
    n = grid.dim
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i, n):
            out[i, j] = out[j, i] = integrate(v[i] * v[j] * rho.values, grid)
    return out


def t_matrices(rho: Density, theta: ScalarField, sigma: float,
               drift=None) -> tuple[np.ndarray, np.ndarray]:
    """The signed bundles T+- = S +- (sigma/2) I (outer/grad forms)."""
    S = entropy_production_matrix(rho, theta, drift)
    half_sigma_I = 0.5 * sigma * fisher_matrix(rho)
    return S + half_sigma_I, S - half_sigma_I


def remainder_matrix(rho: Density, coeffs: CoefficientSet) -> np.ndarray:
    """Coefficient remainder: hess-U average + kernel curvature + congestion term.

    PSD whenever the theorem hypotheses hold (convex-dominant confinement,
    monotone congestion); it is the forcing in the production matrix's
    differential inequality.
    """
    grid = rho.grid
    out = coeffs.potential.hessian_integral(rho) \
        + coeffs.interaction.neg_hessian_integral(rho)
    if not coeffs.congestion.is_zero:
        s_spec = grid.forward(np.log(rho.values))
        grad_rho = [rho.values * g for g in _grad_from_spec(grid, s_spec)]
        fp = coeffs.congestion.f_prime(rho.values)
        n = grid.dim
        for i in range(n):
            for j in range(i, n):
                term = integrate(fp * grad_rho[i] * grad_rho[j], grid)
                out[i, j] += term
                if i != j:
                    out[j, i] += term
    return out


def matrix_energy(rho: Density, theta: ScalarField, sigma: float,
                  drift=None) -> np.ndarray:
    """(1/2) V - (sigma^2/8) I; constant in time along free flows."""
    return 0.5 * velocity_second_moment(rho, theta, drift) \
        - (sigma * sigma / 8.0) * fisher_matrix(rho)


def scalar_energy(rho: Density, theta: ScalarField, coeffs: CoefficientSet,
                  drift=None) -> float:
    """Conserved energy (1/2)tr V + int U drho - (sigma^2/8) tr I - int F(rho) drho."""
    V = velocity_second_moment(rho, theta, drift)
    I = fisher_matrix(rho)
    u_int = coeffs.potential.integral_against(rho)
    f_int = float(integrate(coeffs.congestion.F(rho.values) * rho.values, rho.grid)) \
        if not coeffs.congestion.is_zero else 0.0
    return float(np.trace(V)) * 0.5 + u_int \
        - (coeffs.sigma**2 / 8.0) * float(np.trace(I)) - f_int


def production_derivative_rhs(rho: Density, theta: ScalarField,
                              coeffs: CoefficientSet) -> np.ndarray:
    """Exact time derivative of the production matrix along the flow:

        int hess(theta)^2 drho + (sigma^2/4) int hess(log rho)^2 drho + R.

    The squares are matrix squares under the integral, so this dominates
    S^2 + (sigma^2/4) I^2 + R by Jensen's inequality.
    """
    grid, _, s_spec, th_spec = _pair_spectra(rho, theta)
    n = grid.dim
    Hth = np.empty((n, n, *grid.shape))
    Hs = np.empty((n, n, *grid.shape))
    for i in range(n):
        for j in range(i, n):
            Hth[i, j] = Hth[j, i] = _hess_entry(grid, th_spec, i, j)
            Hs[i, j] = Hs[j, i] = _hess_entry(grid, s_spec, i, j)
    out = np.zeros((n, n))
    quarter_sq = 0.25 * coeffs.sigma**2
    for i in range(n):
        for j in range(i, n):
            th_sq = sum(Hth[i, k] * Hth[k, j] for k in range(n))
            s_sq = sum(Hs[i, k] * Hs[k, j] for k in range(n))
            out[i, j] = out[j, i] = integrate(
                (th_sq + quarter_sq * s_sq) * rho.values, grid)
    return out + remainder_matrix(rho, coeffs)


# ---------------------------------------------------------------------------
# Series assembly


@dataclass
class FunctionalSeries:
    """All functionals of a trajectory, sampled on its time grid.

    Matrix-valued entries are (m, n, n) arrays.  ``resolution`` holds the
    internal-consistency gaps (outer vs by-parts forms, entropy rate vs
    trace of production) and the booleans saying which columns are trusted;
    ``under_resolved`` is their conjunction's negation.
    """

    times: np.ndarray
    sigma: float
    drift: np.ndarray
    entropy: np.ndarray
    energy: np.ndarray
    potential_integral: np.ndarray
    congestion_integral: np.ndarray
    production: np.ndarray
    fisher: np.ndarray
    velocity: np.ndarray
    t_plus: np.ndarray
    t_minus: np.ndarray
    matrix_entropy: np.ndarray
    remainder: np.ndarray
    production_hessian: np.ndarray
    fisher_hessian: np.ndarray
    stamps: dict = field(default_factory=dict)
    family: str = ""
    resolution: dict = field(default_factory=dict)
    under_resolved: bool = False

    @property
    def dim(self) -> int:
        return self.production.shape[1]

    @property
    def samples(self) -> int:
        return self.times.size

    @property
    def tau(self) -> float:
        return float(self.times[-1] - self.times[0])

    def matrix_energy_path(self) -> np.ndarray:
        return 0.5 * self.velocity - (self.sigma**2 / 8.0) * self.fisher

    def production_trace(self) -> np.ndarray:
        return np.trace(self.production, axis1=1, axis2=2)


def assemble_series(traj: FlowTrajectory) -> FunctionalSeries:
    """Evaluate every functional along a trajectory and certify resolution."""
    grid = traj.grid
    coeffs = traj.coefficients
    sigma = coeffs.sigma
    drift = traj.drift
    n = grid.dim
    m = traj.samples

    ent = np.empty(m)
    energy = np.empty(m)
    u_int = np.empty(m)
    f_int = np.empty(m)
    S = np.empty((m, n, n))
    S_h = np.empty((m, n, n))
    I = np.empty((m, n, n))
    I_h = np.empty((m, n, n))
    V = np.empty((m, n, n))
    R = np.empty((m, n, n))

    for idx in range(m):
        rho, theta = traj.densities[idx], traj.phases[idx]
        grid_, s, s_spec, th_spec = _pair_spectra(rho, theta)
        grads = _grad_from_spec(grid, s_spec)
        grad_rho = [rho.values * g for g in grads]
        v = [g + drift[ax] for ax, g in enumerate(_grad_from_spec(grid, th_spec))]

        ent[idx] = integrate(rho.values * s, grid)
        u_int[idx] = coeffs.potential.integral_against(rho)
        f_int[idx] = integrate(coeffs.congestion.F(rho.values) * rho.values, grid) \
            if not coeffs.congestion.is_zero else 0.0

        fp = coeffs.congestion.f_prime(rho.values) if not coeffs.congestion.is_zero else None
        R[idx] = coeffs.potential.hessian_integral(rho) \
            + coeffs.interaction.neg_hessian_integral(rho)
        for i in range(n):
            for j in range(i, n):
                I[idx, i, j] = I[idx, j, i] = integrate(grads[i] * grads[j] * rho.values, grid)
                V[idx, i, j] = V[idx, j, i] = integrate(v[i] * v[j] * rho.values, grid)
                sym = 0.5 * (grad_rho[i] * v[j] + grad_rho[j] * v[i])
                S[idx, i, j] = S[idx, j, i] = integrate(sym, grid)
                I_h[idx, i, j] = I_h[idx, j, i] = -integrate(
                    _hess_entry(grid, s_spec, i, j) * rho.values, grid)
                S_h[idx, i, j] = S_h[idx, j, i] = -integrate(
                    _hess_entry(grid, th_spec, i, j) * rho.values, grid)
                if fp is not None:
                    term = integrate(fp * grad_rho[i] * grad_rho[j], grid)
                    R[idx, i, j] += term
                    if i != j:
                        R[idx, j, i] += term
        energy[idx] = 0.5 * np.trace(V[idx]) + u_int[idx] \
            - (sigma**2 / 8.0) * np.trace(I[idx]) - f_int[idx]

    half_sigma_I = (0.5 * sigma) * I
    series = FunctionalSeries(
        times=traj.times.copy(),
        sigma=sigma,
        drift=drift.copy(),
        entropy=ent,
        energy=energy,
        potential_integral=u_int,
        congestion_integral=f_int,
        production=S,
        fisher=I,
        velocity=V,
        t_plus=S + half_sigma_I,
        t_minus=S - half_sigma_I,
        matrix_entropy=cumulative_trapezoid(traj.times, S),
        remainder=R,
        production_hessian=S_h,
        fisher_hessian=I_h,
        stamps=dict(traj.stamps),
        family=traj.family,
    )
    _certify_resolution(series)
    return series


def _certify_resolution(series: FunctionalSeries) -> None:
    """Cross-check redundant forms; mark columns that disagree as untrusted."""
    fisher_gap = float(np.abs(series.fisher - series.fisher_hessian).max())
    production_gap = float(np.abs(series.production - series.production_hessian).max())
    fisher_scale = 1.0 + float(np.abs(series.fisher).max())
    production_scale = 1.0 + float(np.abs(series.production).max())

    rate_gap = math.nan
    rate_ok = True
    if series.samples >= 5:
        dent, err = fd_derivative(series.times, series.entropy)
        gaps = np.abs(dent - series.production_trace())
        interior = slice(2, series.samples - 2)
        rate_gap = float(gaps[interior].max())
        budget = max(1e-5 * (1.0 + float(np.abs(series.production_trace()).max())),
                     10.0 * float(np.nanmax(err)))
        rate_ok = rate_gap <= budget

    fisher_ok = fisher_gap <= 1e-6 * fisher_scale
    production_ok = production_gap <= 1e-6 * production_scale
    series.resolution = {
        "fisher_gap": fisher_gap,
        "production_gap": production_gap,
        "entropy_rate_gap": rate_gap,
        "fisher_resolved": fisher_ok,
        "production_resolved": production_ok,
        "entropy_rate_resolved": rate_ok,
    }
    series.under_resolved = not (fisher_ok and production_ok and rate_ok)


def cost_accumulate(series: FunctionalSeries) -> tuple[np.ndarray, float]:
    """Accumulated matrix cost and the scalar action of the trajectory.

    Matrix: int_0^tau [ (1/2) V + (sigma^2/8) I ] dt     (trapezoid)
    Scalar: int_0^tau [ (1/2)tr V - int U drho + (sigma^2/8)tr I + int F drho ] dt

    For free coefficients the scalar is exactly the trace of the matrix.
    """
    mat_integrand = 0.5 * series.velocity + (series.sigma**2 / 8.0) * series.fisher
    C_mat = cumulative_trapezoid(series.times, mat_integrand)[-1]
    scalar_integrand = np.trace(mat_integrand, axis1=1, axis2=2) \
        - series.potential_integral + series.congestion_integral
    C = float(cumulative_trapezoid(series.times, scalar_integrand)[-1])
    return C_mat, C
