"""Coefficient descriptors: confining potentials, interaction kernels, congestion.

Descriptors carry analytic derivative information wherever it exists, so
that nothing non-periodic is ever differentiated through the FFT.  Truly
quadratic potentials and kernels are therefore marked non-periodic: the
functional layer handles them in closed form (moments), but spectral time
evolution refuses them, because their torus samplings kink at the box seam.

Congestion laws are scalar functions f(rho) with antiderivative structure
F(rho) fixed by f(r) = F(r) + r F'(r), the pairing used by the energy and
cost functionals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import Density, Grid, GridError, ScalarField, gradient, hessian, integrate

__all__ = [
    "CoefficientError",
    "ZeroPotential",
    "QuadraticPotential",
    "CosineWell",
    "GriddedPotential",
    "ZeroInteraction",
    "QuadraticInteraction",
    "GriddedKernel",
    "Congestion",
    "no_congestion",
    "linear_congestion",
    "log_congestion",
    "power_congestion",
    "CoefficientSet",
    "free_coefficients",
    "coefficients_from_descriptor",
    "convolve",
]


class CoefficientError(ValueError):
    """Ill-formed coefficient descriptor or unsupported combination."""


def _center(grid: Grid, center) -> np.ndarray:
    if center is None:
        return np.array([0.5 * L for L in grid.extent])
    center = np.atleast_1d(np.asarray(center, dtype=float))
    if center.shape != (grid.dim,):
        raise CoefficientError(f"center has shape {center.shape}, expected ({grid.dim},)")
    return center


# ---------------------------------------------------------------------------
# Potentials


class ZeroPotential:
    """No confinement."""

    periodic = True
    is_zero = True

    def values(self, grid: Grid) -> np.ndarray:
        return np.zeros(grid.shape)

    def hessian_values(self, grid: Grid) -> np.ndarray:
        return np.zeros((grid.dim, grid.dim, *grid.shape))

    def integral_against(self, rho: Density) -> float:
        return 0.0

    def hessian_integral(self, rho: Density) -> np.ndarray:
        n = rho.grid.dim
        return np.zeros((n, n))

    def descriptor(self) -> dict:
        return {"kind": "zero"}


class QuadraticPotential:
    """U(x) = (1/2) (x - c)^T A (x - c) with constant symmetric A.

    Non-periodic: its torus sampling kinks at the seam, so it is handled in
    closed form (constant Hessian A, sampled-quadrature values) and rejected
    by spectral evolution.
    """

    periodic = False
    is_zero = False

    def __init__(self, curvature, center=None):
        A = np.atleast_2d(np.asarray(curvature, dtype=float))
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise CoefficientError(f"curvature must be square, got {A.shape}")
        if np.abs(A - A.T).max() > 1e-12 * max(1.0, np.abs(A).max()):
            raise CoefficientError("curvature matrix must be symmetric")
        self.curvature = 0.5 * (A + A.T)
        self.center = None if center is None else np.atleast_1d(np.asarray(center, dtype=float))

    def _diff(self, grid: Grid) -> np.ndarray:
        c = _center(grid, self.center)
        coords = grid.coordinates()
        return np.stack([coords[ax] - c[ax] for ax in range(grid.dim)])

    def values(self, grid: Grid) -> np.ndarray:
        if self.curvature.shape != (grid.dim, grid.dim):
            raise CoefficientError("curvature dimension does not match grid")
        d = self._diff(grid)
        return 0.5 * np.einsum("i...,ij,j...->...", d, self.curvature, d)

    def hessian_values(self, grid: Grid) -> np.ndarray:
        shape = (grid.dim, grid.dim, *grid.shape)
        return np.broadcast_to(self.curvature[(...,) + (None,) * grid.dim], shape).copy()

    def integral_against(self, rho: Density) -> float:
        return float(integrate(self.values(rho.grid) * rho.values, rho.grid))

    def hessian_integral(self, rho: Density) -> np.ndarray:
        return self.curvature.copy()

    def descriptor(self) -> dict:
        return {
            "kind": "quadratic",
            "curvature": self.curvature.tolist(),
            "center": None if self.center is None else self.center.tolist(),
        }


class CosineWell:
    """Separable periodic well a_i (L_i/2pi)^2 (1 - cos(2pi (x_i - c_i)/L_i)).

    The prefactor makes the curvature at the bottom equal a_i, so near the
    well this is the quadratic trap with diag curvature a, but smooth on the
    torus.  Gradient and Hessian are analytic, never FFT-differentiated.
    """

    periodic = True
    is_zero = False

    def __init__(self, strength, center=None):
        self.strength = np.atleast_1d(np.asarray(strength, dtype=float))
        if np.any(self.strength < 0.0):
            raise CoefficientError("cosine well strengths must be >= 0")
        self.center = None if center is None else np.atleast_1d(np.asarray(center, dtype=float))

    def _per_axis(self, grid: Grid):
        a = np.broadcast_to(self.strength, (grid.dim,))
        c = _center(grid, self.center)
        ks = [2.0 * np.pi / L for L in grid.extent]
        return a, c, ks

    def values(self, grid: Grid) -> np.ndarray:
        a, c, ks = self._per_axis(grid)
        out = np.zeros(grid.shape)
        for ax in range(grid.dim):
            x = grid.axis_coordinates[ax]
            shape = [1] * grid.dim
            shape[ax] = x.size
            out = out + (a[ax] / ks[ax] ** 2) * (1.0 - np.cos(ks[ax] * (x - c[ax]))).reshape(shape)
        return out

    def gradient_values(self, grid: Grid) -> np.ndarray:
        a, c, ks = self._per_axis(grid)
        out = np.zeros((grid.dim, *grid.shape))
        for ax in range(grid.dim):
            x = grid.axis_coordinates[ax]
            shape = [1] * grid.dim
            shape[ax] = x.size
            out[ax] = np.broadcast_to(
                ((a[ax] / ks[ax]) * np.sin(ks[ax] * (x - c[ax]))).reshape(shape), grid.shape
            )
        return out

    def hessian_values(self, grid: Grid) -> np.ndarray:
        a, c, ks = self._per_axis(grid)
        out = np.zeros((grid.dim, grid.dim, *grid.shape))
        for ax in range(grid.dim):
            x = grid.axis_coordinates[ax]
            shape = [1] * grid.dim
            shape[ax] = x.size
            out[ax, ax] = np.broadcast_to(
                (a[ax] * np.cos(ks[ax] * (x - c[ax]))).reshape(shape), grid.shape
            )
        return out

    def integral_against(self, rho: Density) -> float:
        return float(integrate(self.values(rho.grid) * rho.values, rho.grid))

    def hessian_integral(self, rho: Density) -> np.ndarray:
        H = self.hessian_values(rho.grid)
        grid = rho.grid
        n = grid.dim
        out = np.zeros((n, n))
        for i in range(n):
            out[i, i] = integrate(H[i, i] * rho.values, grid)
        return out

    def descriptor(self) -> dict:
        return {
            "kind": "cosine_well",
            "strength": self.strength.tolist(),
            "center": None if self.center is None else self.center.tolist(),
        }


class GriddedPotential:
    """Arbitrary smooth periodic potential given by its samples."""

    periodic = True
    is_zero = False

    def __init__(self, field: ScalarField):
        if not isinstance(field, ScalarField):
            raise CoefficientError("gridded potential needs a ScalarField")
        self.field = field
        self._hessian = None

    def values(self, grid: Grid) -> np.ndarray:
        if not grid.compatible(self.field.grid):
            raise CoefficientError("gridded potential lives on a different grid")
        return self.field.values

    def gradient_values(self, grid: Grid) -> np.ndarray:
        self.values(grid)
        return gradient(self.field).values

    def hessian_values(self, grid: Grid) -> np.ndarray:
        self.values(grid)
        if self._hessian is None:
            self._hessian = hessian(self.field)
        return self._hessian

    def integral_against(self, rho: Density) -> float:
        return float(integrate(self.values(rho.grid) * rho.values, rho.grid))

    def hessian_integral(self, rho: Density) -> np.ndarray:
        H = self.hessian_values(rho.grid)
        grid = rho.grid
        n = grid.dim
        out = np.zeros((n, n))
        for i in range(n):
            for j in range(i, n):
                out[i, j] = out[j, i] = integrate(H[i, j] * rho.values, grid)
        return out

    def descriptor(self) -> dict:
        return {"kind": "gridded", "values": self.field.values.tolist()}


# ---------------------------------------------------------------------------
# Interaction kernels


class ZeroInteraction:
    periodic = True
    is_zero = True

    def convolve_values(self, rho: Density) -> np.ndarray:
        return np.zeros(rho.grid.shape)

    def neg_hessian_integral(self, rho: Density) -> np.ndarray:
        n = rho.grid.dim
        return np.zeros((n, n))

    def descriptor(self) -> dict:
        return {"kind": "zero"}


class QuadraticInteraction:
    """Concave quadratic kernel W(z) = -b |z|^2, b >= 0.

    Convolution against a unit-mass density is closed form in moments:
    (W*rho)(x) = -b(|x|^2 - 2 x . m1 + m2), so nothing is FFT'd.
    Its negated Hessian is the constant matrix 2b * Id.
    """

    periodic = False
    is_zero = False

    def __init__(self, strength: float):
        if strength < 0.0:
            raise CoefficientError(
                "interaction strength must be >= 0: the kernel -b|z|^2 must "
                "stay concave for the curvature remainder to be one-signed")
        self.strength = float(strength)
        self.is_zero = self.strength == 0.0

    def convolve_values(self, rho: Density) -> np.ndarray:
        grid = rho.grid
        coords = grid.coordinates()
        m1 = [integrate(coords[ax] * rho.values, grid) for ax in range(grid.dim)]
        m2 = integrate(sum(c * c for c in coords) * rho.values, grid)
        quad = sum(c * c for c in coords)
        cross = sum(2.0 * coords[ax] * m1[ax] for ax in range(grid.dim))
        return -self.strength * (quad - cross + m2)

    def neg_hessian_integral(self, rho: Density) -> np.ndarray:
        return 2.0 * self.strength * np.eye(rho.grid.dim)

    def descriptor(self) -> dict:
        return {"kind": "quadratic", "strength": self.strength}


class GriddedKernel:
    """Smooth periodic kernel given by samples; convolution is spectral."""

    periodic = True
    is_zero = False

    def __init__(self, field: ScalarField):
        if not isinstance(field, ScalarField):
            raise CoefficientError("gridded kernel needs a ScalarField")
        self.field = field
        self._hessian = None

    def convolve_values(self, rho: Density) -> np.ndarray:
        grid = rho.grid
        if not grid.compatible(self.field.grid):
            raise CoefficientError("kernel lives on a different grid")
        spec = grid.forward(self.field.values) * grid.forward(rho.values)
        return grid.inverse(spec) * grid.cell_volume

    def neg_hessian_integral(self, rho: Density) -> np.ndarray:
        grid = rho.grid
        if not grid.compatible(self.field.grid):
            raise CoefficientError("kernel lives on a different grid")
        if self._hessian is None:
            self._hessian = hessian(self.field)
        n = grid.dim
        rho_spec = grid.forward(rho.values)
        out = np.zeros((n, n))
        for i in range(n):
            for j in range(i, n):
                conv = grid.inverse(grid.forward(self._hessian[i, j]) * rho_spec) * grid.cell_volume
                out[i, j] = out[j, i] = -integrate(conv * rho.values, grid)
        return out

    def descriptor(self) -> dict:
        return {"kind": "gridded", "values": self.field.values.tolist()}


def convolve(kernel, rho: Density) -> ScalarField:
    """Evaluate (W * rho) for any interaction descriptor."""
    if isinstance(kernel, ScalarField):
        kernel = GriddedKernel(kernel)
    if not hasattr(kernel, "convolve_values"):
        raise CoefficientError(f"not an interaction descriptor: {type(kernel).__name__}")
    return ScalarField(rho.grid, kernel.convolve_values(rho))


# ---------------------------------------------------------------------------
# Congestion


@dataclass(frozen=True)
class Congestion:
    """Local congestion law f(rho) with its energy density F, f = F + r F'."""

    kind: str
    eps: float = 0.0
    power: float = 1.0

    def f(self, r: np.ndarray) -> np.ndarray:
        if self.kind == "zero":
            return np.zeros_like(r)
        if self.kind == "linear":
            return self.eps * r
        if self.kind == "log":
            return self.eps * np.log(r)
        if self.kind == "power":
            return self.eps * r**self.power
        raise CoefficientError(f"unknown congestion kind {self.kind!r}")

    def f_prime(self, r: np.ndarray) -> np.ndarray:
        if self.kind == "zero":
            return np.zeros_like(r)
        if self.kind == "linear":
            return np.full_like(r, self.eps)
        if self.kind == "log":
            return self.eps / r
        if self.kind == "power":
            return self.eps * self.power * r ** (self.power - 1.0)
        raise CoefficientError(f"unknown congestion kind {self.kind!r}")

    def F(self, r: np.ndarray) -> np.ndarray:
        if self.kind == "zero":
            return np.zeros_like(r)
        if self.kind == "linear":
            return 0.5 * self.eps * r
        if self.kind == "log":
            return self.eps * (np.log(r) - 1.0)
        if self.kind == "power":
            return self.eps * r**self.power / (self.power + 1.0)
        raise CoefficientError(f"unknown congestion kind {self.kind!r}")

    @property
    def is_zero(self) -> bool:
        return self.kind == "zero" or self.eps == 0.0

    def descriptor(self) -> dict:
        return {"kind": self.kind, "eps": self.eps, "power": self.power}


def no_congestion() -> Congestion:
    return Congestion("zero")


def linear_congestion(eps: float) -> Congestion:
    if eps < 0.0:
        raise CoefficientError("linear congestion needs eps >= 0")
    return Congestion("linear", eps=float(eps))


def log_congestion(eps: float) -> Congestion:
    if eps < 0.0:
        raise CoefficientError("log congestion needs eps >= 0")
    return Congestion("log", eps=float(eps))


def power_congestion(eps: float, power: float) -> Congestion:
    if eps < 0.0 or power <= 0.0:
        raise CoefficientError("power congestion needs eps >= 0 and power > 0")
    return Congestion("power", eps=float(eps), power=float(power))


# ---------------------------------------------------------------------------
# Bundle


@dataclass
class CoefficientSet:
    """Diffusion strength plus the three coefficient descriptors."""

    sigma: float
    potential: object = None
    interaction: object = None
    congestion: Congestion = None

    def __post_init__(self):
        if not (np.isfinite(self.sigma) and self.sigma >= 0.0):
            raise CoefficientError(f"sigma must be finite and >= 0, got {self.sigma}")
        self.sigma = float(self.sigma)
        if self.potential is None:
            self.potential = ZeroPotential()
        if self.interaction is None:
            self.interaction = ZeroInteraction()
        if self.congestion is None:
            self.congestion = no_congestion()

    @property
    def is_free(self) -> bool:
        return self.potential.is_zero and self.interaction.is_zero and self.congestion.is_zero

    @property
    def evolution_eligible(self) -> bool:
        return self.potential.periodic and self.interaction.periodic

    def descriptor(self) -> dict:
        return {
            "sigma": self.sigma,
            "potential": self.potential.descriptor(),
            "interaction": self.interaction.descriptor(),
            "congestion": self.congestion.descriptor(),
        }


def free_coefficients(sigma: float) -> CoefficientSet:
    return CoefficientSet(sigma=sigma)


def _potential_from_descriptor(desc: dict, grid: Grid | None):
    kind = desc.get("kind", "zero")
    if kind == "zero":
        return ZeroPotential()
    if kind == "quadratic":
        return QuadraticPotential(desc["curvature"], desc.get("center"))
    if kind == "cosine_well":
        return CosineWell(desc["strength"], desc.get("center"))
    if kind == "gridded":
        if grid is None:
            raise CoefficientError("gridded potential descriptor needs a grid")
        return GriddedPotential(ScalarField(grid, np.asarray(desc["values"])))
    raise CoefficientError(f"unknown potential kind {kind!r}")


def _interaction_from_descriptor(desc: dict, grid: Grid | None):
    kind = desc.get("kind", "zero")
    if kind == "zero":
        return ZeroInteraction()
    if kind == "quadratic":
        return QuadraticInteraction(desc["strength"])
    if kind == "gridded":
        if grid is None:
            raise CoefficientError("gridded kernel descriptor needs a grid")
        return GriddedKernel(ScalarField(grid, np.asarray(desc["values"])))
    raise CoefficientError(f"unknown interaction kind {kind!r}")


def coefficients_from_descriptor(desc: dict, grid: Grid | None = None) -> CoefficientSet:
    """Rebuild a CoefficientSet from its JSON-safe descriptor."""
    if "sigma" not in desc:
        raise CoefficientError("coefficient descriptor needs 'sigma'")
    cong = desc.get("congestion", {"kind": "zero"})
    return CoefficientSet(
        sigma=float(desc["sigma"]),
        potential=_potential_from_descriptor(desc.get("potential", {"kind": "zero"}), grid),
        interaction=_interaction_from_descriptor(desc.get("interaction", {"kind": "zero"}), grid),
        congestion=Congestion(cong.get("kind", "zero"), float(cong.get("eps", 0.0)),
                              float(cong.get("power", 1.0))),
    )
