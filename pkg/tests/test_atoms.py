from dataclasses import replace

import numpy as np
import pytest

from heisenflag.atoms import (
    Atom, CompactPair, SupportError, _rect_from_key, apply_LD, atomic_decompose, bump_in_rect,
    default_alpha, default_M, default_slots, grand_maximal_of_atom_tail, load_decomposition, lowpass_apply,
    lowpass_coeffs, lowpass_symbol, make_particle, particle_b_bound, reconstruct, rect_centers,
    save_decomposition, tube_mask, validate_atom, walk_support,
)
from heisenflag.experiments import random_bandlimited
from heisenflag.fields import GridField, laplacian_matrix, lp_norm
from heisenflag.group import HPoint
from heisenflag.kernels import spectral_radius_bound
from heisenflag.tiling import GridSet, enlarge, rect_from_point, rect_labels


@pytest.fixture(scope="module")
def decomposition(small_spec, small_calc):
    f = random_bandlimited(small_spec, 0)
    return f, atomic_decompose(f, small_calc)


def test_default_orders():
    assert [default_M(nu) for nu in (1, 2, 3)] == [1, 2, 2]
    assert all(2 * default_M(nu) > nu for nu in range(1, 6))
    assert 0 < default_alpha(1) < 1


def test_lowpass_polynomial_is_normalized_and_nonnegative():
    for K in (0, 1, 5, 12):
        assert np.isclose(lowpass_coeffs(K).sum(), 1.0)
        x = np.linspace(0, 1, 201)
        sym = lowpass_symbol(x, K, 1.0)
        assert np.isclose(sym[0], 1.0) and sym.min() > -1e-12


def test_lowpass_apply_matches_symbol_and_stays_local(small_spec, small_calc):
    K = 2
    L = laplacian_matrix(small_spec)
    mx = spectral_radius_bound(small_spec)
    d = GridField.delta(small_spec)
    sparse = lowpass_apply(L, d.values.ravel(), K, mx).reshape(small_spec.shape)
    spectral = small_calc.apply(lambda mu, lam: lowpass_symbol(mu, K, mx), d).values
    assert np.allclose(sparse, spectral, atol=1e-10)
    reach = walk_support(small_spec, K)
    assert np.all(np.abs(sparse[~reach]) == 0)
    assert reach.sum() < walk_support(small_spec, K + 1).sum()


def test_tube_mask_and_rect_centres(small_spec):
    R = rect_from_point(HPoint((0.1,), (0.0,), 0.2), -1, -1)
    m = tube_mask(enlarge(R), small_spec)
    assert m.any()
    labels, keys, _ = rect_labels(small_spec, -1, -1)
    c = rect_centers(keys[:5], -1, -1, 1)
    for row, k in zip(c, keys[:5]):
        assert np.allclose(row, _rect_from_key(k, -1, -1, 1).center.to_array())


def test_particle_support_checked(spec):
    R = rect_from_point(HPoint((0.0,), (0.0,), 0.0), -1, -1)
    b = bump_in_rect(R, spec)
    p = make_particle(b, R)
    assert np.allclose(p.a.values, apply_LD(b, 1, 1).values)
    assert particle_b_bound(p) > 0
    far = GridField(spec, np.where(np.abs(spec.coordinate(2)) > 6, 1.0, 0.0))
    with pytest.raises(SupportError) as ei:
        make_particle(far, R)
    assert len(ei.value.offending) > 0
    with pytest.raises(ValueError):
        make_particle(b, R, M=0)
    with pytest.raises(ValueError):
        make_particle(b, R, N=0)


def test_compact_pair_partition(small_spec, small_calc):
    pair = CompactPair(small_calc, default_slots(small_spec))
    assert np.isclose(pair.F.max(), 1.0)
    total = sum(p * q for p, q in zip(pair.psi_tables, pair.phi_tables))
    assert np.allclose(total[pair.covered], 1.0)
    sl = pair.slots[0]
    v = np.zeros((small_spec.n_horizontal, small_spec.n_t))
    v[small_spec.n_horizontal // 2 + small_spec.n_z // 2, small_spec.n_t // 2] = 1.0
    sparse = pair.apply_psi_tilde_sparse(sl, v)
    C = small_calc.coefficients(v)
    spectral = small_calc.synthesize(C * pair.psi_tilde_table(sl))
    assert np.allclose(sparse, spectral, atol=1e-10 * np.abs(spectral).max())


def test_decomposition_reconstructs(decomposition):
    f, d = decomposition
    assert d.levels == sorted(d.levels) and all(lam > 0 for lam in d.lambdas)
    assert np.allclose(reconstruct(d).values, f.values, atol=1e-12)
    # the residual is exactly the part of f outside the covered spectrum
    assert np.isclose(d.diagnostics["residual_rel"], d.diagnostics["coverage_defect"], rtol=1e-6)
    assert d.diagnostics["unassigned_rects"] == 0


def test_particles_sum_to_atom_and_fit_their_rectangles(decomposition, small_spec):
    _, d = decomposition
    k = 0
    parts = d.particles(k)
    assert len(parts) == len(d.atoms[k])
    total = sum(p.a.values for p in parts)
    assert np.allclose(total, d.atoms[k].value().values, atol=1e-10 * np.abs(total).max())
    for p in parts[:20]:
        star = tube_mask(enlarge(p.rect, p.kappa), small_spec)
        big = np.abs(p.b.values) > 1e-12 * np.abs(p.b.values).max()
        assert not np.any(big & ~star)


def test_atom_size_condition(decomposition):
    _, d = decomposition
    for atom in d.atoms:
        res = validate_atom(atom, n_signs=4)
        assert res["n_particles"] == len(atom) and res["max_ratio"] <= 1.0 + 1e-9


def test_explicit_atom_and_empty_atom(spec):
    R = rect_from_point(HPoint((0.0,), (0.0,), 0.0), -1, -1)
    p = make_particle(bump_in_rect(R, spec), R)
    omega = GridSet(spec, tube_mask(enlarge(R), spec))
    atom = Atom(omega, (p,))
    assert np.allclose(atom.value().values, p.a.values)
    res = validate_atom(atom, n_signs=2)
    assert np.isclose(res["l2_ratio"], lp_norm(p.a) * np.sqrt(omega.measure))
    assert validate_atom(Atom(omega), n_signs=2)["max_ratio"] == 0.0


def test_zero_field_has_no_atoms(small_spec, small_calc):
    d = atomic_decompose(GridField.zeros(small_spec), small_calc)
    assert d.atoms == [] and d.lambda_sum == 0.0


def test_save_load_round_trip(tmp_path, decomposition):
    # the lowest level alone keeps the number of particle files small
    _, full = decomposition
    d = replace(full, levels=full.levels[:1], lambdas=full.lambdas[:1], atoms=full.atoms[:1],
                level_data=full.level_data[:1])
    save_decomposition(d, str(tmp_path / "dec"))
    got = load_decomposition(str(tmp_path / "dec"))
    assert got["manifest"]["levels"] == d.levels
    assert np.array_equal(got["residual"].values, d.residual.values)
    parts = d.particles(0)
    loaded = got["atoms"][0]["particles"]
    assert len(loaded) == len(parts)
    assert loaded[3].rect == parts[3].rect
    assert np.allclose(loaded[3].a.values, parts[3].a.values)


def test_tail_rejects_unknown_operator(spec, calc):
    R = rect_from_point(HPoint((0.0,), (0.0,), 0.0), -1, -1)
    p = make_particle(bump_in_rect(R, spec), R)
    with pytest.raises(ValueError):
        grand_maximal_of_atom_tail(p, R, "bogus", calc)
