"""Spectral calculus on uniform periodic boxes.

Fields live on the torus [0, L_1) x ... x [0, L_n), n <= 3, sampled on a
power-of-two lattice per axis.  Every derivative is a Fourier multiplier
applied through real FFTs, quadrature is the uniform rectangle rule
(spectrally exact for resolved periodic integrands), and densities carry a
hard positivity floor so log-derived quantities stay finite.  Products of
evolved fields are de-aliased with the 2/3 rule before differentiation.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "DENSITY_FLOOR",
    "TOTAL_POINT_BUDGET",
    "SEAM_CELLS",
    "GridError",
    "DensityFloorError",
    "Grid",
    "ScalarField",
    "VectorField",
    "Density",
    "gradient",
    "divergence",
    "laplacian",
    "hessian",
    "integrate",
    "heat_propagate",
    "bohm_potential",
    "log_density",
    "spectral_shift",
    "seam_mass",
    "circular_convolve",
]

DENSITY_FLOOR = 1e-30

# Hard cap on total lattice points; refuses accidental 3D monsters.
TOTAL_POINT_BUDGET = 2 ** 22

# Cells counted on each side of every axis by the seam-mass monitor.
SEAM_CELLS = 3


class GridError(ValueError):
    """Invalid grid geometry, or a field/grid mismatch."""


class DensityFloorError(RuntimeError):
    """Density fell below its positivity floor by more than the clamp budget."""


def _as_tuple(value, kind) -> tuple:
    if np.isscalar(value):
        value = (value,)
    return tuple(kind(v) for v in value)


class Grid:
    """Uniform periodic lattice with cached real-FFT wavenumber tables.

    Args:
        extent: box side lengths, one per axis (scalar means 1D).
        points: samples per axis; each must be a power of two, at least 8.
    """

    def __init__(self, extent, points):
        extent = _as_tuple(extent, float)
        points = _as_tuple(points, int)
        if not 1 <= len(points) <= 3:
            raise GridError(f"dimension must be 1, 2 or 3, got {len(points)}")
        if len(extent) != len(points):
            raise GridError(
                f"extent has {len(extent)} axes but points has {len(points)}"
            )
        for L in extent:
            if not (np.isfinite(L) and L > 0):
                raise GridError(f"box lengths must be positive, got {extent}")
        for N in points:
            if N < 8 or (N & (N - 1)) != 0:
                raise GridError(f"points per axis must be a power of two >= 8, got {N}")
        total = int(np.prod(points))
        if total > TOTAL_POINT_BUDGET:
            raise GridError(f"{total} lattice points exceeds budget {TOTAL_POINT_BUDGET}")

        self.extent = extent
        self.points = points
        self.dim = len(points)
        self.shape = points
        self.spacing = tuple(L / N for L, N in zip(extent, points))
        self.cell_volume = float(np.prod(self.spacing))
        self.axis_coordinates = tuple(
            np.arange(N) * h for N, h in zip(points, self.spacing)
        )

        # Broadcastable wavenumber tables on the rfftn layout (last axis halved).
        # _ik zeroes the Nyquist mode: odd-order derivatives of that mode are
        # sign-ambiguous, and a real output requires dropping it.
        self._k = []
        self._ik = []
        for ax in range(self.dim):
            if ax == self.dim - 1:
                k1 = 2.0 * np.pi * np.fft.rfftfreq(points[ax], d=self.spacing[ax])
            else:
                k1 = 2.0 * np.pi * np.fft.fftfreq(points[ax], d=self.spacing[ax])
            shape = [1] * self.dim
            shape[ax] = k1.size
            k1 = k1.reshape(shape)
            nyquist = np.isclose(np.abs(k1), np.pi / self.spacing[ax])
            self._k.append(k1)
            self._ik.append(np.where(nyquist, 0.0, 1j * k1))
        self._k2 = sum(k * k for k in self._k)

        # 2/3-rule mask for de-aliasing products before differentiation.
        mask = np.ones(self._k2.shape, dtype=bool)
        for ax in range(self.dim):
            cutoff = (2.0 / 3.0) * np.pi / self.spacing[ax]
            mask &= np.abs(self._k[ax]) <= cutoff * (1.0 + 1e-12)
        self._dealias_mask = mask

    def coordinates(self) -> tuple[np.ndarray, ...]:
        """Full meshgrid coordinate arrays, one per axis, 'ij' indexing."""
        return tuple(np.meshgrid(*self.axis_coordinates, indexing="ij"))

    def forward(self, values: np.ndarray) -> np.ndarray:
        return np.fft.rfftn(values)

    def inverse(self, spectrum: np.ndarray) -> np.ndarray:
        return np.fft.irfftn(spectrum, s=self.shape, axes=tuple(range(self.dim)))

    def dealias(self, values: np.ndarray) -> np.ndarray:
        """Zero all modes beyond two thirds of the Nyquist band."""
        return self.inverse(self.forward(values) * self._dealias_mask)

    def compatible(self, other: "Grid") -> bool:
        return self.extent == other.extent and self.points == other.points

    def __eq__(self, other):
        return isinstance(other, Grid) and self.compatible(other)

    def __hash__(self):
        return hash((self.extent, self.points))

    def __repr__(self):
        return f"Grid(extent={self.extent}, points={self.points})"


class ScalarField:
    """Real scalar samples bound to a grid."""

    __slots__ = ("grid", "values")

    def __init__(self, grid: Grid, values):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != grid.shape:
            raise GridError(f"field shape {values.shape} != grid shape {grid.shape}")
        self.grid = grid
        self.values = values

    def __repr__(self):
        return f"{type(self).__name__}(grid={self.grid}, values~[{self.values.min():.3g}, {self.values.max():.3g}])"


class VectorField:
    """Real vector samples, components stacked along a leading axis."""

    __slots__ = ("grid", "values")

    def __init__(self, grid: Grid, values):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (grid.dim, *grid.shape):
            raise GridError(
                f"vector field shape {values.shape} != {(grid.dim, *grid.shape)}"
            )
        self.grid = grid
        self.values = values


class Density(ScalarField):
    """Strictly positive unit-mass scalar field.

    Construction clamps values to ``floor`` and renormalizes to unit mass.
    Clamping may only add mass up to ``clamp_budget``; a larger deficit means
    the caller handed in genuinely negative or vacuous data and is an error,
    not something to paper over.

    Attributes:
        floor: positivity floor after clamping.
        clamped_mass: mass added by the clamp (quadrature units).
        renorm_drift: |pre-normalization mass - 1|.
    """

    __slots__ = ("floor", "clamped_mass", "renorm_drift")

    def __init__(self, grid: Grid, values, floor: float = DENSITY_FLOOR,
                 clamp_budget: float = 1e-12):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != grid.shape:
            raise GridError(f"field shape {values.shape} != grid shape {grid.shape}")
        if not np.all(np.isfinite(values)):
            raise DensityFloorError("density data contains non-finite values")
        low = values < floor
        deficit = float((floor - values[low]).sum() * grid.cell_volume) if low.any() else 0.0
        if deficit > clamp_budget:
            raise DensityFloorError(
                f"clamping to floor {floor:g} would add mass {deficit:.3e} "
                f"> budget {clamp_budget:g}; density is negative or vacuous"
            )
        if low.any():
            values = np.where(low, floor, values)
        mass = float(values.sum() * grid.cell_volume)
        if mass <= 0.0:
            raise DensityFloorError("density has non-positive total mass")
        super().__init__(grid, values / mass)
        self.floor = float(floor)
        self.clamped_mass = deficit
        self.renorm_drift = abs(mass - 1.0)


def _field_input(f) -> tuple[Grid, np.ndarray]:
    if isinstance(f, ScalarField):
        return f.grid, f.values
    raise GridError(f"expected a ScalarField, got {type(f).__name__}")


def gradient(f: ScalarField) -> VectorField:
    """Spectral gradient of a scalar field."""
    grid, values = _field_input(f)
    spec = grid.forward(values)
    comps = np.empty((grid.dim, *grid.shape))
    for ax in range(grid.dim):
        comps[ax] = grid.inverse(grid._ik[ax] * spec)
    return VectorField(grid, comps)


def divergence(v: VectorField) -> ScalarField:
    """Spectral divergence of a vector field."""
    if not isinstance(v, VectorField):
        raise GridError(f"expected a VectorField, got {type(v).__name__}")
    grid = v.grid
    spec = np.zeros(grid._k2.shape, dtype=complex)
    for ax in range(grid.dim):
        spec += grid._ik[ax] * grid.forward(v.values[ax])
    return ScalarField(grid, grid.inverse(spec))


def laplacian(f: ScalarField) -> ScalarField:
    """Spectral Laplacian of a scalar field."""
    grid, values = _field_input(f)
    return ScalarField(grid, grid.inverse(-grid._k2 * grid.forward(values)))


def hessian(f: ScalarField) -> np.ndarray:
    """Spectral Hessian, returned as an (n, n, *shape) array, symmetric exactly.

    Diagonal entries use the full -k_i^2 multiplier; off-diagonal entries use
    Nyquist-zeroed factors, matching composition of first derivatives.
    """
    grid, values = _field_input(f)
    spec = grid.forward(values)
    H = np.empty((grid.dim, grid.dim, *grid.shape))
    for i in range(grid.dim):
        H[i, i] = grid.inverse(-(grid._k[i] ** 2) * spec)
        for j in range(i + 1, grid.dim):
            entry = grid.inverse(grid._ik[i] * grid._ik[j] * spec)
            H[i, j] = entry
            H[j, i] = entry
    return H


def integrate(f, grid: Grid | None = None) -> float:
    """Rectangle-rule integral over the box; spectrally exact when resolved.

    Accepts a ScalarField, or a raw ndarray together with ``grid``.
    """
    if isinstance(f, ScalarField):
        return float(f.values.sum() * f.grid.cell_volume)
    if grid is None:
        raise GridError("integrating a raw array requires the grid")
    values = np.asarray(f)
    if values.shape != grid.shape:
        raise GridError(f"array shape {values.shape} != grid shape {grid.shape}")
    return float(values.sum() * grid.cell_volume)


def heat_propagate(f: ScalarField, t: float, sigma: float) -> ScalarField:
    """Apply the diffusion semigroup exp((sigma/2) t Laplacian).

    Mass is conserved by construction (the zero mode's multiplier is one).
    Returns a plain ScalarField even for Density input; callers re-wrap.
    """
    grid, values = _field_input(f)
    if not (np.isfinite(t) and t >= 0.0):
        raise GridError(f"propagation time must be >= 0, got {t}")
    if not (np.isfinite(sigma) and sigma > 0.0):
        raise GridError(f"diffusion strength must be > 0, got {sigma}")
    if t == 0.0:
        return ScalarField(grid, values.copy())
    spec = grid.forward(values) * np.exp(-(0.5 * sigma * t) * grid._k2)
    return ScalarField(grid, grid.inverse(spec))


def log_density(rho: Density) -> ScalarField:
    """Pointwise log of a floored density."""
    if not isinstance(rho, Density):
        raise GridError(f"expected a Density, got {type(rho).__name__}")
    return ScalarField(rho.grid, np.log(rho.values))


def bohm_potential(rho: Density) -> ScalarField:
    """Quarter of |grad log rho|^2 + 2 * laplacian log rho.

    Equal to laplacian(sqrt(rho)) / sqrt(rho) for smooth positive densities;
    the log form is the numerically robust one for floored data.
    """
    s = log_density(rho)
    g = gradient(s)
    quad = np.sum(g.values * g.values, axis=0)
    return ScalarField(rho.grid, 0.25 * (quad + 2.0 * laplacian(s).values))


def spectral_shift(f: ScalarField, offset) -> ScalarField:
    """Translate a field by a constant offset via phase multipliers."""
    grid, values = _field_input(f)
    offset = _as_tuple(offset, float)
    if len(offset) != grid.dim:
        raise GridError(f"offset has {len(offset)} components, grid dim {grid.dim}")
    spec = grid.forward(values)
    for ax in range(grid.dim):
        spec = spec * np.exp(-1j * grid._k[ax] * offset[ax])
    return ScalarField(grid, grid.inverse(spec))


def seam_mass(rho: Density, cells: int = SEAM_CELLS) -> float:
    """Mass within ``cells`` lattice cells of the box seam along any axis."""
    grid = rho.grid
    mask = np.zeros(grid.shape, dtype=bool)
    for ax, N in enumerate(grid.points):
        idx = [slice(None)] * grid.dim
        idx[ax] = np.r_[0:cells, N - cells:N]
        mask[tuple(idx)] = True
    return float(rho.values[mask].sum() * grid.cell_volume)


def circular_convolve(kernel: ScalarField, f: ScalarField) -> ScalarField:
    """Quadrature approximation of the periodic convolution integral.

    (kernel * f)(x) ~ cell_volume * sum_y kernel(x - y) f(y), computed
    spectrally.  With this convention the discrete delta (1/cell_volume at
    the origin cell) is the identity kernel.
    """
    grid, kv = _field_input(kernel)
    _, fv = _field_input(f)
    if not grid.compatible(f.grid):
        raise GridError("kernel and field live on different grids")
    spec = grid.forward(kv) * grid.forward(fv) * grid.cell_volume
    return ScalarField(grid, grid.inverse(spec))
