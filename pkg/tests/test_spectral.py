import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from heisenflag.fields import GridField, GridSpec, conv1, interior_mask, lp_norm, sublaplacian
from heisenflag.spectral import (
    Multiplier2D, SpectralCalculus, band_levels, delta_symbol, dyadic_partition, eta, eta_sq,
    linear_spacing_defect, mrs_weight, mrs_weight_factors, smooth_step, sobolev_norm,
    twisted_matrix, weighted_kernel_norm,
)


def rand_field(spec, seed):
    return GridField(spec, np.random.default_rng(seed).standard_normal(spec.shape))


def test_fibres_are_hermitian_and_conjugate(small_spec):
    A1 = twisted_matrix(small_spec, 3)
    assert np.allclose(A1, A1.conj().T)
    assert np.allclose(twisted_matrix(small_spec, small_spec.n_t - 3), A1.conj())
    # the zero fibre is the horizontal graph Laplacian: rows sum to zero
    assert np.allclose(twisted_matrix(small_spec, 0).sum(1), 0)


def test_identity_multiplier_and_sublaplacian(small_calc, small_spec):
    f = rand_field(small_spec, 0)
    assert np.allclose(small_calc.apply(lambda mu, lam: np.ones_like(mu), f).values, f.values)
    Lf = small_calc.apply(lambda mu, lam: mu, f)
    assert np.allclose(Lf.values, sublaplacian(f).values, atol=1e-10)


def test_forward_inverse_and_parseval(small_calc, small_spec):
    f = rand_field(small_spec, 1)
    g = small_calc.inverse(small_calc.forward(f), real=True)
    assert np.allclose(g.values, f.values)
    assert np.isclose(small_calc.mode_energies(f).sum(), lp_norm(f) ** 2)
    C = small_calc.coefficients(f.flat)
    assert np.allclose(small_calc.synthesize(C), f.flat)


def test_multipliers_compose(small_calc, small_spec):
    f = rand_field(small_spec, 2)
    a = small_calc.heat(0.3, small_calc.heat(0.2, f))
    b = small_calc.heat(0.5, f)
    assert np.allclose(a.values, b.values)
    p = small_calc.power(0.5, small_calc.power(0.5, f))
    q = small_calc.power(1.0, f)
    assert np.allclose(p.values, q.values, atol=1e-9)


def test_central_derivative_symbol(small_calc, small_spec):
    f = rand_field(small_spec, 3)
    g = small_calc.apply(lambda mu, lam: delta_symbol(lam, small_spec.dt) * np.ones_like(mu), f)
    v = f.flat
    d = (2 * v - np.roll(v, 1, 1) - np.roll(v, -1, 1)) / small_spec.dt ** 2
    assert np.allclose(g.flat, d)


def test_polynomial_kernel_is_right_convolution_in_interior(small_calc, small_spec):
    # a polynomial in L has a local stencil, so the free boundary is felt only near the edge
    f = rand_field(small_spec, 4)
    m = lambda mu, lam: mu + 0.3 * mu * mu
    k = small_calc.kernel(m, real=True)
    inside = interior_mask(small_spec, 2)
    a, b = conv1(f, k).values, small_calc.apply(m, f).values
    assert np.allclose(a[inside], b[inside], atol=1e-9)


def test_flag_multiplier_kills_zero_mode(small_calc, small_spec):
    m = Multiplier2D(lambda x, lam: np.ones_like(x), flag=True)
    f = GridField(small_spec, np.ones(small_spec.shape))
    assert np.allclose(small_calc.apply(m, f).values, 0, atol=1e-12)
    assert small_calc.sup_on_spectrum(m) == 1.0


def test_nonfinite_multiplier_rejected(small_calc, small_spec):
    with pytest.raises(FloatingPointError):
        small_calc.apply(lambda mu, lam: np.full_like(mu, np.inf), rand_field(small_spec, 5))


def test_build_rejects_unsupported_grids():
    with pytest.raises(ValueError):
        SpectralCalculus.build(GridSpec(Z=1, T=2, n_z=8, n_t=16, t_periodic=False))
    with pytest.raises(ValueError):
        SpectralCalculus.build(GridSpec(n_z=32, n_t=128))


def test_eigen_cache_round_trip(tmp_path, small_spec, small_calc):
    a = SpectralCalculus.build(small_spec, cache_dir=str(tmp_path))
    b = SpectralCalculus.build(small_spec, cache_dir=str(tmp_path))
    assert any(tmp_path.iterdir())
    for k in range(small_spec.n_t):
        assert np.array_equal(a.evals[k], b.evals[k])
        assert np.allclose(a.evals[k], small_calc.evals[k])


def test_spectrum_nonnegative(small_calc):
    mu, lam, sig = small_calc.spectrum()
    assert mu.min() > -1e-10 and sig.min() >= 0
    assert mu.size == small_calc.spec.size


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-3, 1e3))
def test_partitions_of_unity(x):
    js = range(-14, 14)
    assert np.isclose(sum(p(x) for p in dyadic_partition(js)), 1.0)
    assert np.isclose(sum(p(x) ** 2 for p in dyadic_partition(js, squared=True)), 1.0)


def test_partition_bumps_supported_on_annulus():
    x = np.linspace(0, 4, 401)
    e = eta(x)
    assert np.all(e[(x <= 0.5) | (x >= 2)] == 0)
    assert np.all(eta_sq(x) >= 0)
    assert smooth_step(0.5) == 1.0 and smooth_step(1.0) == 0.0
    js = band_levels(0.3, 5.0)
    for v in (0.3, 1.0, 5.0):
        assert np.isclose(sum(p(v) for p in dyadic_partition(js)), 1.0)


def test_linear_spacing_defect():
    assert linear_spacing_defect([1.0, 3.0, 5.0, 7.0]) < 1e-12
    assert np.isclose(linear_spacing_defect([0.0, 1.0, 1.0]), 1 / 3 / 0.5)


def test_weights_factorize(small_spec):
    w = mrs_weight(1, 2, 0.5, small_spec)
    w1, w2 = mrs_weight_factors(1, 2, 0.5, small_spec)
    assert np.allclose(w.values, w1.values * w2.values)
    one = GridField(small_spec, np.ones(small_spec.shape))
    assert np.isclose(weighted_kernel_norm(one, one), lp_norm(one))
    with pytest.raises(ValueError):
        mrs_weight(0, 0, 0.0, small_spec)


def test_sobolev_norm_of_gaussian():
    # unweighted: Plancherel gives the L2 norm of the samples
    g = lambda x, y: np.exp(-((x - 2) ** 2 + y ** 2) * 4)
    n0 = sobolev_norm(g, 0.0, 0.0, n=256)
    assert np.isclose(n0, np.sqrt(np.pi / 8), rtol=1e-6)
    assert sobolev_norm(g, 1.0, 1.0) > n0
