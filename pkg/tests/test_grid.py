"""Spectral calculus: derivatives, quadrature, semigroup, density hygiene."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowlab.grid import (
    Density,
    DensityFloorError,
    Grid,
    GridError,
    ScalarField,
    VectorField,
    bohm_potential,
    circular_convolve,
    divergence,
    gradient,
    heat_propagate,
    hessian,
    integrate,
    laplacian,
    log_density,
    seam_mass,
    spectral_shift,
)

from conftest import band_limited, band_limited_vector, gaussian_density, wrapped_gaussian_values

seed_strategy = st.integers(min_value=0, max_value=2**32 - 1)
dim_strategy = st.sampled_from([1, 1, 2])


def small_grid(dim: int) -> Grid:
    return Grid((7.0, 5.0, 6.0)[:dim], (64, 32, 16)[:dim])


class TestGridValidation:
    def test_rejects_bad_point_counts(self):
        with pytest.raises(GridError):
            Grid(1.0, 48)
        with pytest.raises(GridError):
            Grid(1.0, 4)

    def test_rejects_dimension_out_of_range(self):
        with pytest.raises(GridError):
            Grid((1.0,) * 4, (8,) * 4)

    def test_rejects_axis_mismatch_and_bad_extent(self):
        with pytest.raises(GridError):
            Grid((1.0, 2.0), (8,))
        with pytest.raises(GridError):
            Grid(-3.0, 8)

    def test_rejects_point_budget_overrun(self):
        with pytest.raises(GridError):
            Grid((1.0, 1.0, 1.0), (256, 256, 256))

    def test_geometry_tables(self):
        g = Grid((2.0, 4.0), (8, 16))
        assert g.spacing == (0.25, 0.25)
        assert g.cell_volume == pytest.approx(0.0625)
        assert g.axis_coordinates[1][1] == pytest.approx(0.25)


class TestDerivatives:
    def test_gradient_of_single_mode_is_exact(self):
        g = Grid(7.0, 64)
        x = g.axis_coordinates[0]
        k = 2.0 * np.pi / 7.0
        grad = gradient(ScalarField(g, np.sin(k * x)))
        assert np.abs(grad.values[0] - k * np.cos(k * x)).max() < 1e-10

    def test_laplacian_of_single_mode_is_exact(self):
        g = Grid(5.0, 32)
        x = g.axis_coordinates[0]
        k = 2.0 * np.pi * 3 / 5.0
        lap = laplacian(ScalarField(g, np.cos(k * x)))
        assert np.abs(lap.values + k * k * np.cos(k * x)).max() < 1e-9

    def test_hessian_of_product_mode(self):
        g = Grid((7.0, 5.0), (64, 32))
        X, Y = g.coordinates()
        kx = 2.0 * np.pi / 7.0
        ky = 2.0 * np.pi * 2 / 5.0
        H = hessian(ScalarField(g, np.sin(kx * X) * np.sin(ky * Y)))
        assert np.abs(H[0, 1] - kx * ky * np.cos(kx * X) * np.cos(ky * Y)).max() < 1e-9
        assert np.abs(H[0, 0] + kx * kx * np.sin(kx * X) * np.sin(ky * Y)).max() < 1e-9
        assert np.array_equal(H[0, 1], H[1, 0])

    @settings(max_examples=25, deadline=None)
    @given(seed=seed_strategy, dim=dim_strategy)
    def test_divergence_of_gradient_is_laplacian(self, seed, dim):
        """For any band-limited field the operator identity holds to 1e-9."""
        g = small_grid(dim)
        f = band_limited(g, np.random.default_rng(seed))
        left = divergence(gradient(f)).values
        right = laplacian(f).values
        assert np.abs(left - right).max() < 1e-9, f"identity broke at seed {seed}"

    @settings(max_examples=25, deadline=None)
    @given(seed=seed_strategy, dim=dim_strategy)
    def test_divergence_integrates_to_zero(self, seed, dim):
        g = small_grid(dim)
        v = band_limited_vector(g, np.random.default_rng(seed))
        assert abs(integrate(divergence(v))) < 1e-11

    @settings(max_examples=25, deadline=None)
    @given(seed=seed_strategy, dim=dim_strategy)
    def test_integration_by_parts(self, seed, dim):
        """integral(f div v) == -integral(grad f . v) on the torus."""
        rng = np.random.default_rng(seed)
        g = small_grid(dim)
        f = band_limited(g, rng)
        v = band_limited_vector(g, rng)
        lhs = integrate(ScalarField(g, f.values * divergence(v).values))
        rhs = -integrate(ScalarField(g, np.sum(gradient(f).values * v.values, axis=0)))
        assert abs(lhs - rhs) < 1e-10, f"IBP violated at seed {seed}: {lhs} vs {rhs}"

    def test_quadrature_of_modes(self):
        g = Grid(7.0, 64)
        x = g.axis_coordinates[0]
        k = 2.0 * np.pi / 7.0
        assert abs(integrate(ScalarField(g, np.sin(k * x)))) < 1e-13
        assert integrate(ScalarField(g, np.sin(k * x) ** 2)) == pytest.approx(3.5, abs=1e-12)


class TestHeatPropagate:
    def test_semigroup_property(self):
        g = Grid(9.0, 128)
        rho = gaussian_density(g, 4.5, 0.3)
        one = heat_propagate(heat_propagate(rho, 0.2, 1.3), 0.5, 1.3)
        two = heat_propagate(rho, 0.7, 1.3)
        assert np.abs(one.values - two.values).max() < 1e-10

    def test_mass_conserved(self):
        g = Grid(9.0, 128)
        rho = gaussian_density(g, 4.0, 0.5)
        out = heat_propagate(rho, 1.1, 0.8)
        assert integrate(out) == pytest.approx(1.0, abs=1e-13)

    def test_matches_gaussian_variance_growth(self):
        # exp((sigma/2) t Lap) turns variance v0 into v0 + sigma t.
        g = Grid(16.0, 256)
        sigma, t, v0 = 0.9, 1.2, 0.4
        out = heat_propagate(gaussian_density(g, 8.0, v0), t, sigma)
        target = wrapped_gaussian_values(g, 8.0, v0 + sigma * t)
        assert np.abs(out.values - target).max() < 1e-12

    def test_rejects_bad_arguments(self):
        g = Grid(4.0, 16)
        rho = gaussian_density(g, 2.0, 0.3)
        with pytest.raises(GridError):
            heat_propagate(rho, -0.1, 1.0)
        with pytest.raises(GridError):
            heat_propagate(rho, 0.1, 0.0)

    def test_zero_time_is_identity(self):
        g = Grid(4.0, 16)
        rho = gaussian_density(g, 2.0, 0.3)
        assert np.array_equal(heat_propagate(rho, 0.0, 1.0).values, rho.values)


class TestDensity:
    def test_renormalizes_and_records_drift(self):
        g = Grid(6.0, 64)
        rho = Density(g, 3.0 * wrapped_gaussian_values(g, 3.0, 0.4))
        assert integrate(rho) == pytest.approx(1.0, abs=1e-14)
        assert rho.renorm_drift == pytest.approx(2.0, abs=1e-10)

    def test_floor_clamps_tiny_negatives(self):
        g = Grid(6.0, 64)
        vals = wrapped_gaussian_values(g, 3.0, 0.2)
        vals[0] = -1e-16
        rho = Density(g, vals)
        assert rho.values.min() > 0.0
        assert rho.clamped_mass < 1e-12

    def test_rejects_genuinely_negative_data(self):
        g = Grid(6.0, 64)
        vals = wrapped_gaussian_values(g, 3.0, 0.2)
        vals[:8] = -0.05
        with pytest.raises(DensityFloorError):
            Density(g, vals)

    def test_rejects_nonfinite(self):
        g = Grid(6.0, 64)
        vals = wrapped_gaussian_values(g, 3.0, 0.2)
        vals[5] = np.nan
        with pytest.raises(DensityFloorError):
            Density(g, vals)

    def test_seam_mass_of_uniform_density(self):
        g = Grid(6.0, 64)
        rho = Density(g, np.full(g.shape, 1.0 / 6.0))
        assert seam_mass(rho) == pytest.approx(6.0 / 64.0, abs=1e-14)


class TestBohmPotential:
    def test_cosine_density_closed_form(self):
        # rho ~ exp(cos(kx)): grad log = -k sin, lap log = -k^2 cos.
        g = Grid(7.0, 128)
        x = g.axis_coordinates[0]
        k = 2.0 * np.pi / 7.0
        rho = Density(g, np.exp(np.cos(k * x)))
        expected = 0.25 * (k**2 * np.sin(k * x) ** 2 - 2.0 * k**2 * np.cos(k * x))
        assert np.abs(bohm_potential(rho).values - expected).max() < 1e-10

    def test_matches_sqrt_form_on_smooth_density(self):
        g = Grid(12.0, 256)
        rho = gaussian_density(g, 6.0, 0.8)
        sqrt_field = ScalarField(g, np.sqrt(rho.values))
        alt = laplacian(sqrt_field).values / sqrt_field.values
        q = bohm_potential(rho).values
        center = np.abs(g.axis_coordinates[0] - 6.0) < 3.0
        assert np.abs((q - alt)[center]).max() < 1e-4

    def test_gaussian_window_closed_form(self):
        g = Grid(12.0, 256)
        v = 0.8
        rho = gaussian_density(g, 6.0, v)
        x = g.axis_coordinates[0]
        expected = 0.25 * ((x - 6.0) ** 2 / v**2 - 2.0 / v)
        window = np.abs(x - 6.0) < 3.0
        assert np.abs((bohm_potential(rho).values - expected)[window]).max() < 1e-4


class TestConvolveAndShift:
    def test_discrete_delta_is_identity(self):
        g = Grid(5.0, 64)
        rho = gaussian_density(g, 2.5, 0.3)
        delta = np.zeros(g.shape)
        delta[0] = 1.0 / g.cell_volume
        out = circular_convolve(ScalarField(g, delta), rho)
        assert np.abs(out.values - rho.values).max() < 1e-12

    def test_gaussian_kernel_adds_variance(self):
        g = Grid(20.0, 256)
        rho = gaussian_density(g, 10.0, 0.5)
        kernel = ScalarField(g, wrapped_gaussian_values(g, 0.0, 0.7))
        out = circular_convolve(kernel, rho)
        target = wrapped_gaussian_values(g, 10.0, 1.2)
        assert np.abs(out.values - target).max() < 1e-12

    def test_spectral_shift_quarter_period(self):
        g = Grid(8.0, 64)
        x = g.axis_coordinates[0]
        k = 2.0 * np.pi / 8.0
        shifted = spectral_shift(ScalarField(g, np.sin(k * x)), 2.0)
        assert np.abs(shifted.values - np.sin(k * (x - 2.0))).max() < 1e-12


class TestFieldValidation:
    def test_shape_mismatch(self):
        g = Grid(5.0, 64)
        with pytest.raises(GridError):
            ScalarField(g, np.zeros(32))
        with pytest.raises(GridError):
            VectorField(g, np.zeros((2, 64)))

    def test_log_density_requires_density(self):
        g = Grid(5.0, 64)
        with pytest.raises(GridError):
            log_density(ScalarField(g, np.ones(g.shape)))


if __name__ == "__main__":
    pytest.main([__file__, "-v", "--tb=short"])
