import numpy as np
import pytest

from heisenflag.experiments import (
    FIELD_KINDS, FUNCTIONALS, MULTIPLIER_NAMES, equivalence_row, generate_field, indicator_field,
    log_fit, map_ordered, multiplier_table, named_multiplier, origin_particle,
    proper_subspace_grid, random_bandlimited, ratio_summary, region_tail_budget, witness_field,
)
from heisenflag.fields import lp_norm
from heisenflag.operators import ScaleGrid


def test_map_ordered_keeps_input_order():
    items = list(range(20))
    assert map_ordered(lambda x: x * x, items, threads=4) == [x * x for x in items]
    assert map_ordered(lambda x: -x, items, threads=1) == [-x for x in items]


@pytest.mark.parametrize("kind", FIELD_KINDS)
def test_generators_are_deterministic(kind, small_spec):
    a = generate_field(kind, small_spec, seed=3)
    b = generate_field(kind, small_spec, seed=3)
    assert a.values.tobytes() == b.values.tobytes()
    with pytest.raises(ValueError):
        generate_field("nope", small_spec)


def test_indicator_integral_is_box_volume(spec):
    assert np.isclose(indicator_field(spec).integral(), 8.0)
    assert np.isclose(indicator_field(spec, 0.5, 2.0).integral(), 1.0 * 4.0)


def test_witness_normalization(spec):
    a = witness_field(spec, True)
    c = witness_field(spec, False)
    assert abs(a.integral()) < 1e-12
    assert np.isclose(c.integral(), 1.0)
    slab = a.values[..., spec.n_t // 2]
    assert np.all(c.values[np.abs(spec.coordinate(2)) >= 1] == 0)
    assert np.abs(slab).sum() > 0


def test_random_field_has_no_zero_t_mode(small_spec):
    f = random_bandlimited(small_spec, 1)
    assert np.allclose(f.flat.mean(axis=1), 0)
    assert not np.array_equal(f.values, random_bandlimited(small_spec, 2).values)


def test_origin_particle_has_vanishing_moments(spec):
    p = origin_particle(spec)
    assert abs(p.a.integral()) < 1e-10 * lp_norm(p.a, 1)


def test_equivalence_row_of_zero_and_random(small_spec, small_calc):
    z = equivalence_row(generate_field("zero", small_spec), small_calc)
    assert z == {k: 0.0 for k in FUNCTIONALS}
    row = equivalence_row(random_bandlimited(small_spec, 0), small_calc,
                          ScaleGrid((0.5,), (0.5, 1.0)))
    assert set(row) == set(FUNCTIONALS) and all(v > 0 for v in row.values())
    summ = ratio_summary([row, row])
    assert len(summ) == len(FUNCTIONALS) * (len(FUNCTIONALS) - 1)
    assert all(s["min"] == s["median"] == s["max"] for s in summ)


def test_log_fit_recovers_slope():
    H = np.array([4.0, 8.0, 16.0, 32.0])
    fit = log_fit(H, 2.0 + 3.0 * np.log(H))
    assert np.isclose(fit["slope"], 3.0) and np.isclose(fit["r2"], 1.0)
    assert np.isclose(log_fit(H, np.ones(4))["rel_slope"], 0.0)


def test_proper_subspace_grid_is_commensurate():
    for H in (4, 8, 16, 32):
        g = proper_subspace_grid(H)
        assert g.T == H and g.require_commensurate() == 1


def test_named_multipliers():
    x = np.array([0.5, 1.0, 2.0])
    y = np.array([-1.0, 1.0, 3.0])
    assert np.allclose(named_multiplier("one")(x, y), 1.0)
    assert np.allclose(np.abs(named_multiplier("imag_power")(x, y)), 1.0)
    assert np.all(np.abs(named_multiplier("smooth")(x, y)) < 1.0)
    assert set(MULTIPLIER_NAMES) == {"one", "imag_power", "smooth"}
    with pytest.raises(ValueError):
        named_multiplier("nope")


def test_multiplier_table_and_budget(small_calc):
    rows = multiplier_table(named_multiplier("smooth"), small_calc, [2], [0], n_sobolev=64)
    assert rows[0]["sobolev"] > 0 and rows[0]["ratio"] >= 0
    b = region_tail_budget(named_multiplier("smooth"), small_calc)
    assert b["budget_total"] + b["uncovered"] == pytest.approx(b["tail"])
    assert all(v >= 0 for v in b["regions"].values())
