"""Shared builders for the test suite."""

from __future__ import annotations

import numpy as np

from flowlab.grid import Density, Grid, ScalarField, VectorField


def wrapped_gaussian_values(grid: Grid, mean, var, images: int = 4) -> np.ndarray:
    """Periodized isotropic Gaussian density sampled on the lattice.

    ``var`` is a scalar variance (shared by all axes) or a per-axis sequence.
    Imaging over +-``images`` box copies per axis; for the box sizes used in
    tests the truncation error is far below double precision.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    var = np.broadcast_to(np.asarray(var, dtype=float), (grid.dim,))
    vals = np.ones(grid.shape)
    for ax in range(grid.dim):
        x = grid.axis_coordinates[ax]
        L = grid.extent[ax]
        onedim = np.zeros_like(x)
        for m in range(-images, images + 1):
            onedim += np.exp(-((x - mean[ax] - m * L) ** 2) / (2.0 * var[ax]))
        onedim /= np.sqrt(2.0 * np.pi * var[ax])
        shape = [1] * grid.dim
        shape[ax] = x.size
        vals = vals * onedim.reshape(shape)
    return vals


def gaussian_density(grid: Grid, mean, var) -> Density:
    return Density(grid, wrapped_gaussian_values(grid, mean, var))


def band_limited(grid: Grid, rng: np.random.Generator, max_mode: int = 3,
                 amplitude: float = 1.0, terms: int = 5) -> ScalarField:
    """Random trigonometric polynomial with modes up to ``max_mode`` per axis."""
    coords = grid.coordinates()
    vals = np.zeros(grid.shape)
    for _ in range(terms):
        phase = rng.uniform(0.0, 2.0 * np.pi)
        arg = np.full(grid.shape, phase)
        for ax in range(grid.dim):
            m = int(rng.integers(-max_mode, max_mode + 1))
            arg = arg + (2.0 * np.pi * m / grid.extent[ax]) * coords[ax]
        vals += rng.normal() * np.cos(arg)
    scale = max(1.0, np.abs(vals).max())
    return ScalarField(grid, amplitude * vals / scale)


def band_limited_vector(grid: Grid, rng: np.random.Generator, **kw) -> VectorField:
    comps = np.stack([band_limited(grid, rng, **kw).values for _ in range(grid.dim)])
    return VectorField(grid, comps)
