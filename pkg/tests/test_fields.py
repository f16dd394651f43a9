import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from heisenflag.fields import (
    GridField, GridSpec, Line, conv1, conv2, half_width, inner, interior_mask, lattice_point,
    laplacian_matrix, lp_norm, origin_component, read_hfld, read_hfld_header, right_shift_array,
    right_translate, sublaplacian, t_window, translate_field, tube_reduce, tube_sample_count,
    vector_field, write_hfld,
)
from heisenflag.group import mul_arr


def rand_field(spec, seed, cplx=False):
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(spec.shape)
    if cplx:
        v = v + 1j * rng.standard_normal(spec.shape)
    return GridField(spec, v)


def test_grid_geometry_and_validation():
    s = GridSpec()
    assert (s.dz, s.dt, s.shift_ratio) == (0.25, 0.25, 1.0)
    assert s.shape == (16, 16, 64) and s.size == 16 * 16 * 64
    assert s.require_commensurate() == 1
    assert GridSpec(n_z=8, n_t=32).require_commensurate() == 2
    with pytest.raises(ValueError):
        GridSpec(n_z=32, n_t=128).require_commensurate()
    for bad in ({"n_z": 7}, {"n_t": 2}, {"Z": 0.0}, {"nu": 0}):
        with pytest.raises(ValueError):
            GridSpec(**bad)
    c = s.coords()
    assert np.allclose(c[s.origin_index()], 0.0)


def test_field_rejects_bad_values(small_spec):
    with pytest.raises(ValueError):
        GridField(small_spec, np.zeros(5))
    with pytest.raises(ValueError):
        GridField(small_spec, np.full(small_spec.shape, np.nan))
    f = GridField.zeros(small_spec)
    with pytest.raises(ValueError):
        f.values[0] = 1.0
    assert np.isclose(GridField.delta(small_spec).integral(), 1.0)


def test_hfld_round_trip(tmp_path, small_spec):
    for cplx in (False, True):
        f = rand_field(small_spec, 1, cplx)
        buf = io.BytesIO()
        write_hfld(f, buf)
        buf.seek(0)
        g = read_hfld(buf)
        assert g.spec == f.spec and np.array_equal(g.values, f.values)
    p = tmp_path / "f.hfld"
    write_hfld(f, p)
    assert read_hfld_header(p)["dtype"] == "c128"
    assert np.array_equal(read_hfld(p).values, f.values)


def test_lattice_shift_matches_group_product(small_spec):
    s = small_spec
    f = GridField.from_function(s, lambda c: np.sin(c[..., 0]) + c[..., 1] * c[..., 2])
    ia, kb = np.array([1, -2]), 3
    out = right_shift_array(s, f.flat, ia, kb, fill=np.nan).reshape(s.shape)
    h = lattice_point(s, ia, kb).to_array()
    pts = mul_arr(s.coords(), h, 1)
    ok = ~np.isnan(out)
    tper = (pts[..., 2] + s.T) % (2 * s.T) - s.T
    expect = np.sin(pts[..., 0]) + pts[..., 1] * tper
    assert ok.sum() > 0.5 * s.size
    assert np.allclose(out[ok], expect[ok])


def test_right_translations_compose(small_spec):
    f = rand_field(small_spec, 2)
    a = right_translate(right_translate(f, [1, 0]), [0, 1])
    # shifting by e_x then e_y reads f(g e_y e_x), and e_y e_x = (1, 1, +m_c dt)
    b = right_translate(f, [1, 1], small_spec.require_commensurate())
    mask = interior_mask(small_spec, 2)
    assert np.allclose(a.values[mask], b.values[mask])


def test_conv1_methods_agree_and_delta_is_identity(small_spec):
    rng = np.random.default_rng(3)
    f = rand_field(small_spec, 4)
    kv = np.zeros(small_spec.shape)
    o = small_spec.origin_index()
    for _ in range(5):
        d = rng.integers(-1, 2, 3)
        kv[tuple(np.array(o) + d)] = rng.standard_normal()
    k = GridField(small_spec, kv)
    assert np.allclose(conv1(f, k, "direct").values, conv1(f, k, "fft").values, atol=1e-12)
    delta = GridField.delta(small_spec)
    assert np.allclose(conv1(f, delta).values, f.values)
    with pytest.raises(ValueError):
        conv1(f, k, "bogus")


def test_conv2_line_kernel(small_spec):
    f = rand_field(small_spec, 5)
    ln = Line.for_spec(small_spec)
    v = np.zeros(ln.n)
    v[ln.n // 2] = 1 / ln.dt
    assert np.allclose(conv2(f, Line(ln.half_extent, ln.n, v)).values, f.values)
    with pytest.raises(ValueError):
        conv2(f, Line(1.0, 4))


def test_sublaplacian_symmetric_psd_conserving(small_spec):
    A = laplacian_matrix(small_spec)
    assert abs(A - A.T).max() < 1e-12
    f = rand_field(small_spec, 6)
    Lf = sublaplacian(f)
    assert np.allclose(A @ f.values.ravel(), Lf.values.ravel())
    assert abs(Lf.integral()) < 1e-9
    assert inner(Lf, f).real >= 0
    assert np.allclose(sublaplacian(GridField(small_spec, np.ones(small_spec.shape))).values, 0)


def test_vector_fields_on_coordinates(spec):
    x = GridField(spec, spec.coordinate(0))
    t = GridField(spec, spec.coordinate(2))
    m = interior_mask(spec, 1)
    assert np.allclose(vector_field(x, "X1").values[m], 1.0)
    # T(t) = 1 away from the periodic seam
    inner_t = np.abs(spec.coordinate(2)) < spec.T - 2 * spec.dt
    assert np.allclose(vector_field(t, "T").values[inner_t], 1.0)
    with pytest.raises(ValueError):
        vector_field(x, "X2")


def test_origin_component_has_index_two_m_c(small_spec):
    mask = origin_component(small_spec)
    assert mask[small_spec.origin_index()]
    assert np.isclose(mask.mean(), 1 / (2 * small_spec.require_commensurate()))


def test_norms(small_spec):
    f = GridField(small_spec, np.ones(small_spec.shape))
    vol = (2 * small_spec.Z) ** 2 * 2 * small_spec.T
    assert np.isclose(lp_norm(f, 1), vol)
    assert np.isclose(lp_norm(f, 2), vol ** 0.5)
    assert lp_norm(f, np.inf) == 1.0
    with pytest.raises(ValueError):
        lp_norm(f, 0.5)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 3.0), st.floats(0.01, 1.0))
def test_half_width_is_strict(r, step):
    k = half_width(step, r)
    assert k == 0 or k * step < r
    assert (k + 1) * step >= r - 1e-9 * step or k == 0


@pytest.mark.parametrize("periodic", [True, False])
def test_t_window_matches_brute_force(periodic):
    rng = np.random.default_rng(7)
    a = rng.standard_normal((3, 12))
    K = 2
    out = t_window(a, K, periodic)
    mx = t_window(a, K, periodic, "max")
    for i in range(12):
        idx = np.arange(i - K, i + K + 1)
        if periodic:
            win = a[:, idx % 12]
        else:
            win = a[:, idx[(idx >= 0) & (idx < 12)]]
        assert np.allclose(out[:, i], win.sum(1))
        assert np.allclose(mx[:, i], win.max(1))


def test_tube_mean_of_constant_and_max_bounds(small_spec):
    one = np.ones((small_spec.n_horizontal, small_spec.n_t))
    assert np.allclose(tube_reduce(one, small_spec, 0.5, 0.5), 1.0)
    a = np.abs(rand_field(small_spec, 8).flat)
    mean = tube_reduce(a, small_spec, 0.5, 0.5)
    mx = tube_reduce(a, small_spec, 0.5, 0.5, "max")
    assert np.all(mx >= a - 1e-15) and np.all(mean <= mx + 1e-12)
    assert tube_sample_count(small_spec, 0.5, 0.5) == 3 * 3 * 5


def test_translate_field_by_lattice_point_matches_shift(small_spec):
    f = GridField.from_function(small_spec, lambda c: np.exp(-np.sum(c ** 2, -1)))
    g = lattice_point(small_spec, [1, 0], 1)
    a = translate_field(f, g)
    # (g f)(g) = f(o), and g sits one step along x and t from the origin
    o = np.array(small_spec.origin_index())
    assert np.allclose(small_spec.coords()[tuple(o + [1, 0, 1])], g.to_array())
    assert np.isclose(a.values[tuple(o + [1, 0, 1])], f.values[tuple(o)], atol=1e-12)
