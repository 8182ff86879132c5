"""Tests for the spectral core.

Validates:
- grid geometry (frequency lattice, volumes, Nyquist)
- forward/inverse transforms, Parseval pairing
- Fourier multipliers and the zero-mode rule
- Helmholtz projection
- Lebesgue norms by quadrature
- reality, linearity, derivative-commutation invariants
"""

import numpy as np
import pytest

from cnslab.fourier import (
    FourierSymbol,
    SpectralField,
    TorusGrid,
    abs_velocity_power,
    apply_symbol,
    divergence,
    grad_inv_laplacian,
    gradient,
    helmholtz_project,
    laplacian,
    lebesgue_norm,
    make_grid,
    random_field,
    transform,
)


class TestTorusGrid:
    def test_basic_geometry(self):
        grid = make_grid(2, 64, 8.0)
        assert grid.shape == (64, 64)
        assert np.isclose(grid.cell_volume, (2 * np.pi * 8 / 64) ** 2)
        assert np.isclose(grid.box_volume, (16 * np.pi) ** 2)
        assert np.isclose(grid.nyquist, 4.0)  # (N/2)/M

    def test_lowest_nonzero_frequency_is_one_over_M(self):
        grid = make_grid(2, 64, 8.0)
        r = grid.xi_norm()
        assert np.isclose(np.min(r[r > 0]), 1.0 / 8.0)

    @pytest.mark.parametrize("d", [0, 4])
    def test_dimension_validation(self, d):
        with pytest.raises(ValueError):
            make_grid(d, 16)

    def test_size_validation(self):
        with pytest.raises(ValueError):
            make_grid(2, 6)       # too small
        with pytest.raises(ValueError):
            make_grid(2, 33)      # odd

    def test_equality_and_hash(self):
        assert make_grid(2, 32) == make_grid(2, 32, 1.0)
        assert make_grid(2, 32) != make_grid(2, 32, 2.0)
        assert hash(TorusGrid(1, 16, 4.0)) == hash(make_grid(1, 16, 4.0))


class TestTransform:
    def test_single_mode_coefficient(self):
        # f(x) = e^{i3x} on d=1, M=1 -> one coefficient of value 2*pi
        grid = make_grid(1, 32)
        f = SpectralField.from_samples(grid, np.exp(3j * grid.x_axis))
        idx = np.flatnonzero(grid.k_axis == 3)[0]
        c = f.coeffs.copy()
        assert np.isclose(c[idx], 2 * np.pi)
        c[idx] = 0.0
        assert np.max(np.abs(c)) < 1e-12

    def test_roundtrip_identity(self, grid2d, rng):
        u = random_field(grid2d, rng)
        v = transform(transform(u, "inverse"), "forward", grid=grid2d)
        assert np.allclose(v.coeffs, u.coeffs, rtol=0, atol=1e-12 * u.l2())

    def test_parseval(self, grid2d, rng):
        u = random_field(grid2d, rng)
        phys = np.sum(np.abs(u.samples()) ** 2) * grid2d.cell_volume
        spec = np.sum(np.abs(u.coeffs) ** 2) / grid2d.box_volume
        assert np.isclose(phys, spec, rtol=1e-10)

    def test_size_mismatch(self, grid2d):
        with pytest.raises(ValueError):
            SpectralField(grid2d, np.zeros((16, 16), dtype=np.complex128))

    def test_vector_field_shape(self, grid2d, rng):
        u = random_field(grid2d, rng, ncomp=2)
        assert u.is_vector and u.ncomp == 2
        assert u.component(0).coeffs.shape == grid2d.shape


class TestApplySymbol:
    def test_abs_d_on_single_mode(self):
        grid = make_grid(1, 32)
        f = SpectralField.from_samples(grid, np.exp(3j * grid.x_axis))
        g = apply_symbol(f, abs_velocity_power(1.0))
        assert np.allclose(g.coeffs, 3.0 * f.coeffs, atol=1e-12)

    def test_abs_d_zero_is_identity_on_mean_free(self, grid2d, rng):
        u = random_field(grid2d, rng, mean_zero=True)
        g = apply_symbol(u, abs_velocity_power(0.0))
        assert np.allclose(g.coeffs, u.coeffs, atol=1e-12)

    def test_grad_inv_laplacian_single_mode(self):
        # grad (-Lap)^{-1} e^{i xi.x} has coefficients i xi / |xi|^2
        grid = make_grid(2, 32)
        xi = np.array([2.0, 1.0])
        x = grid.x_vectors()
        f = SpectralField.from_samples(
            grid, np.exp(1j * (xi[0] * x[0] + xi[1] * x[1])))
        w = grad_inv_laplacian(f)
        k = grid.k_axis
        i0 = np.flatnonzero(k == 2)[0]
        i1 = np.flatnonzero(k == 1)[0]
        expect = 1j * xi / 5.0 * (2 * np.pi) ** 2
        assert np.allclose(w.coeffs[:, i0, i1], expect, atol=1e-12)

    def test_symbol_nonfinite_rejected(self, grid2d, rng):
        u = random_field(grid2d, rng)
        bad = FourierSymbol(lambda xi, r: 1.0 / (r - 1.0), name="pole")
        with np.errstate(divide="ignore"), pytest.raises(ValueError, match="finite"):
            apply_symbol(u, bad)

    def test_zero_mode_rule(self, grid2d, rng):
        u = random_field(grid2d, rng, mean_zero=False)
        g = apply_symbol(u, abs_velocity_power(0.0))
        assert abs(g.mean()) < 1e-14            # default annihilates the mean
        g2 = apply_symbol(u, abs_velocity_power(0.0), zero_mode=1.0)
        assert np.isclose(g2.mean(), u.mean())

    def test_linearity(self, grid2d, rng):
        u = random_field(grid2d, rng)
        v = random_field(grid2d, rng)
        sym = abs_velocity_power(0.5)
        lhs = apply_symbol(u * 2.0 + v * (-0.7), sym)
        rhs = apply_symbol(u, sym) * 2.0 + apply_symbol(v, sym) * (-0.7)
        assert np.allclose(lhs.coeffs, rhs.coeffs, atol=1e-12 * u.l2())


class TestHelmholtz:
    def test_pure_gradient(self):
        # u = grad(sin x1) = (cos x1, 0): P u = 0, Q u = u
        grid = make_grid(2, 32)
        x = grid.x_vectors()
        vals = np.stack([np.cos(x[0]), np.zeros_like(x[0])])
        u = SpectralField.from_samples(grid, vals)
        Pu, Qu = helmholtz_project(u)
        assert Pu.l2() < 1e-12
        assert np.allclose(Qu.coeffs, u.coeffs, atol=1e-12)

    def test_divergence_free(self):
        # u = (-d2 psi, d1 psi) with psi = sin x1 sin x2
        grid = make_grid(2, 32)
        x = grid.x_vectors()
        vals = np.stack([-np.sin(x[0]) * np.cos(x[1]),
                         np.cos(x[0]) * np.sin(x[1])])
        u = SpectralField.from_samples(grid, vals)
        Pu, Qu = helmholtz_project(u)
        assert Qu.l2() < 1e-12
        assert np.allclose(Pu.coeffs, u.coeffs, atol=1e-12)

    def test_idempotent_and_complementary(self, grid2d, rng):
        u = random_field(grid2d, rng, ncomp=2)
        Pu, Qu = helmholtz_project(u)
        PPu, _ = helmholtz_project(Pu)
        assert np.allclose(PPu.coeffs, Pu.coeffs, atol=1e-12 * u.l2())
        assert np.allclose((Pu + Qu).coeffs, u.coeffs, atol=1e-13 * u.l2())
        dP = divergence(Pu)
        assert np.max(np.abs(dP.coeffs)) < 1e-12 * u.l2()

    def test_l2_orthogonality(self, grid2d, rng):
        u = random_field(grid2d, rng, ncomp=2)
        Pu, Qu = helmholtz_project(u)
        assert np.isclose(u.l2() ** 2, Pu.l2() ** 2 + Qu.l2() ** 2, rtol=1e-10)

    def test_scalar_input_rejected(self, grid2d, rng):
        with pytest.raises(ValueError):
            helmholtz_project(random_field(grid2d, rng))


class TestLebesgueNorm:
    def test_constant_field(self):
        grid = make_grid(2, 16)
        one = SpectralField.from_samples(grid, np.ones(grid.shape))
        assert np.isclose(lebesgue_norm(one, 2.0), 2 * np.pi)

    @pytest.mark.parametrize("p", [1.0, 2.0, 3.5, np.inf])
    def test_unimodular_exponential(self, p):
        grid = make_grid(1, 32, 2.0)
        f = SpectralField.from_samples(grid, np.exp(3j * 0.5 * grid.x_axis))
        expect = 1.0 if p == np.inf else (4 * np.pi) ** (1.0 / p)
        assert np.isclose(lebesgue_norm(f, p), expect, rtol=1e-12)

    def test_l2_matches_parseval(self, grid2d, rng):
        u = random_field(grid2d, rng)
        assert np.isclose(lebesgue_norm(u, 2.0), u.l2(), rtol=1e-10)

    def test_p_below_one_rejected(self, grid2d, rng):
        with pytest.raises(ValueError):
            lebesgue_norm(random_field(grid2d, rng), 0.5)


class TestInvariants:
    def test_reality_preserved(self, grid2d, rng):
        u = random_field(grid2d, rng)
        v = apply_symbol(u, abs_velocity_power(1.0))
        linf = lebesgue_norm(v, np.inf)
        assert v.imag_residue() <= 1e-10 * max(linf, 1e-30)

    def test_mixed_partials_commute(self, grid2d, rng):
        u = random_field(grid2d, rng)
        g = gradient(u)
        d12 = gradient(g.component(0)).component(1)
        d21 = gradient(g.component(1)).component(0)
        # the multiplier xi_1*xi_2 is symmetric; sequential application
        # only reorders the rounding
        scale = np.max(np.abs(d12.coeffs))
        assert np.allclose(d12.coeffs, d21.coeffs, rtol=0, atol=1e-13 * scale)

    def test_laplacian_is_div_grad(self, grid2d, rng):
        u = random_field(grid2d, rng)
        lhs = laplacian(u)
        rhs = divergence(gradient(u))
        assert np.allclose(lhs.coeffs, rhs.coeffs, atol=1e-12 * u.l2())

    def test_field_times_field_is_rejected(self, grid2d, rng):
        u = random_field(grid2d, rng)
        with pytest.raises(TypeError, match="dealias_product"):
            u * u

    def test_random_field_normalization(self, grid2d, rng):
        u = random_field(grid2d, rng, amplitude=0.37, mean_zero=True)
        assert np.isclose(u.l2(), 0.37, rtol=1e-12)
        assert abs(u.mean()) < 1e-14

    def test_random_field_band_limit(self, grid2d, rng):
        # band truncates per axis: |k_i| <= band on every axis
        u = random_field(grid2d, rng, band=5)
        k = np.abs(grid2d.k_axis)
        outside = (k.reshape(-1, 1) > 5) | (k.reshape(1, -1) > 5)
        assert np.max(np.abs(u.coeffs[outside])) == 0.0
