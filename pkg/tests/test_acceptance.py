"""Acceptance suite: one PASS/FAIL line per criterion, printed at the end of the run.

Each test computes every sub-check of its criterion, records a single summary
line (see conftest), and then asserts the overall verdict.
"""

import time

import numpy as np
import pytest

from conftest import record
from heisenflag import experiments as E
from heisenflag.atoms import atomic_decompose, slot_coefficients, tent_area, validate_atom
from heisenflag.fields import GridField, GridSpec, interior_mask, lp_norm
from heisenflag.group import (
    dilate_arr, distance_arr, koranyi_comparison_constant, koranyi_norm_arr,
    koranyi_sharp_constant, mul_arr, random_points,
)
from heisenflag.kernels import (
    gaussian_log_ratio, heat_evolve, heat_kernels, poisson_band, poisson_kernel,
)
from heisenflag.operators import (
    ConeSpec, ScaleGrid, area_fn, flag_maximal, gauss_pair, grand_maximal, iterated_maximal,
    khinchin_square_check, maximal_sandwich, mexican_hat_pair, nontangential_maximal,
    partition_pair, poisson_pair, radial_maximal, reproduce, spectral_band, square_cts,
    square_dis,
)
from heisenflag.spectral import (
    SpectralCalculus, delta_symbol, fan_levels, linear_spacing_defect,
)
from heisenflag.tiling import (
    GridSet, TileId, Tube, enlarge, fibre_interval, journe_sum, parent_tile, tile_height_fn,
    tile_locate_arr, tube_measure, tube_volume_mc,
)
from heisenflag.group import HPoint

# constants recorded when the suite was calibrated; see the decisions ledger
PARTICLE_LAMBDA_C = 7.25     # 1.25 x the measured 5.80 for the unit (0, 0) particle
GAUSS_C = 0.0                # log of the constant 1 in r^{D/2} h_r <= C exp(...)
KHINCHIN_C = 1.65            # 1.25 x the measured maximum 1.32 over seeds 0..9


def _fmt(x):
    return f"{x:.3g}"


# ---------------------------------------------------------------------------
# 1. group and geometry

def _koranyi_ball_bracket(r: float, h: float = 1 / 40):
    """Inner/outer cell counts of the dilated unit Korányi ball on a fixed grid (nu = 1).

    Membership of p in delta_r(B) is tested as delta_{1/r}(p) in B.  The ball
    is convex, so cells with all corners inside lie in it; the bracket is
    [cells with all corners inside, cells with some corner inside].
    """
    zmax, tmax = r, r * r / 2
    nz = int(np.ceil(zmax / h)) + 1
    nt = int(np.ceil(tmax / h)) + 1
    xs = np.arange(-nz, nz + 1) * h
    ts = np.arange(-nt, nt + 1) * h
    X, Y, T = np.meshgrid(xs, xs, ts, indexing="ij")
    p = np.stack([X, Y, T], axis=-1)
    inside = koranyi_norm_arr(dilate_arr(p, 1.0 / r, 1), 1) <= 1.0
    c = [inside[i:inside.shape[0] - 1 + i, j:inside.shape[1] - 1 + j, k:inside.shape[2] - 1 + k]
         for i in (0, 1) for j in (0, 1) for k in (0, 1)]
    all_in = np.logical_and.reduce(c)
    any_in = np.logical_or.reduce(c)
    vol = h ** 3
    return all_in.sum() * vol, any_in.sum() * vol


def test_criterion_1_group_geometry():
    t0 = time.time()
    n = 10 ** 5
    tol = 1e-12
    worst = {"assoc": 0.0, "left_inv": 0.0, "dilation": 0.0}
    lower_viol = stated_viol = sharp_viol = 0
    for nu in (1, 2):
        rng = np.random.default_rng(nu)
        a, b, c, g = (random_points(n, nu, 1.0, rng) for _ in range(4))
        lhs = mul_arr(mul_arr(a, b, nu), c, nu)
        rhs = mul_arr(a, mul_arr(b, c, nu), nu)
        worst["assoc"] = max(worst["assoc"],
                             float(np.max(np.abs(lhs - rhs) / np.maximum(1, np.abs(lhs)))))
        for metric in ("gauge", "koranyi"):
            d0 = distance_arr(a, b, nu, metric)
            d1 = distance_arr(mul_arr(g, a, nu), mul_arr(g, b, nu), nu, metric)
            worst["left_inv"] = max(worst["left_inv"], float(np.max(np.abs(d1 - d0) / d0)))
        r = rng.uniform(0.1, 10.0, size=(n, 1))
        da = np.concatenate([a[:, :2 * nu] * r, a[:, 2 * nu:] * r * r], axis=1)
        db = np.concatenate([b[:, :2 * nu] * r, b[:, 2 * nu:] * r * r], axis=1)
        ab = mul_arr(a, b, nu)
        dab = np.concatenate([ab[:, :2 * nu] * r, ab[:, 2 * nu:] * r * r], axis=1)
        worst["dilation"] = max(worst["dilation"], float(np.max(
            np.abs(dab - mul_arr(da, db, nu)) / np.maximum(1, np.abs(dab)))))
        d = distance_arr(a, b, nu)
        dk = distance_arr(a, b, nu, "koranyi")
        lower_viol += int(np.sum(d > dk * (1 + tol)))
        stated_viol += int(np.sum(dk > koranyi_comparison_constant(nu) * d * (1 + tol)))
        sharp_viol += int(np.sum(dk > koranyi_sharp_constant(nu) * d * (1 + tol)))
    exact = np.pi ** 2 / 4
    scaling_ok = True
    for r in (0.5, 1.0, 2.0):
        lo, hi = _koranyi_ball_bracket(r)
        scaling_ok &= lo <= r ** 4 * exact <= hi
    elapsed = time.time() - t0
    ok_alg = all(v <= tol for v in worst.values())
    passed = ok_alg and lower_viol == 0 and stated_viol == 0 and scaling_ok and elapsed < 10
    record(1, passed,
           f"assoc {_fmt(worst['assoc'])} left-inv {_fmt(worst['left_inv'])} "
           f"dilation {_fmt(worst['dilation'])} (tol 1e-12); d<=d_K violations {lower_viol}; "
           f"d_K<=(4nu^2+2nu)^(1/4) d violations {stated_viol}/{2 * n} "
           f"(sharp (8nu^2)^(1/4): {sharp_viol}); |delta_r B| in grid bracket {scaling_ok}; "
           f"{elapsed:.1f}s")
    assert passed


# ---------------------------------------------------------------------------
# 2. tiling

def _random_grid_set(spec: GridSpec, seed: int) -> GridSet:
    rng = np.random.default_rng(seed)
    pts = spec.coords()
    m = np.zeros(spec.shape, dtype=bool)
    for _ in range(rng.integers(1, 4)):
        c = HPoint.from_array(np.r_[rng.uniform(-0.5, 0.5, 2), rng.uniform(-2, 2)])
        m |= Tube(c, rng.uniform(1.0, 1.6), rng.uniform(1.5, 3.0)).contains(pts)
    return GridSet(spec, m)


def test_criterion_2_tiling():
    t0 = time.time()
    rng = np.random.default_rng(0)
    pts = random_points(10 ** 4, 1, 3.0, rng)
    bnd_rates, part_bad, nest_bad = [], 0, 0
    located = {}
    for j in range(-2, 3):
        a, k, b = tile_locate_arr(pts, j, 1)
        located[j] = (a, k, b)
        bnd_rates.append(float(b.mean()))
        # independent check: the point's t lies in the fibre of its tile
        for i in np.nonzero(~b)[0][:2000]:
            T = TileId(j, tuple(a[i]), int(k[i]))
            lo, hi = fibre_interval(T, pts[i, :2])
            part_bad += not (lo - 1e-9 < pts[i, 2] <= hi + 1e-9)
    for j in range(-2, 2):
        a, k, b = located[j]
        a1, k1, b1 = located[j + 1]
        for i in np.nonzero(~(b | b1))[0][:1000]:
            nest_bad += parent_tile(TileId(j, tuple(a[i]), int(k[i]))) != \
                TileId(j + 1, tuple(a1[i]), int(k1[i]))
    f0 = tile_height_fn((0.0, 0.0))
    mc_err = max(abs(tube_volume_mc(t, 10 ** 6, s) / tube_measure(t) - 1) for s, t in enumerate([
        Tube(HPoint.identity(1), 0.5, 0.125), Tube(HPoint((0.3,), (-0.7,), 1.1), 0.8, 0.3),
        Tube(HPoint((-1.0,), (0.4,), -2.0), 1.3, 2.0)]))
    unit = tube_measure(Tube(HPoint.identity(1), 0.5, 1 / 8))
    c_delta = {}
    for spec in (GridSpec(), GridSpec(n_z=8, n_t=32)):
        vals = [journe_sum(om, 1.0) / om.measure
                for om in (_random_grid_set(spec, s) for s in range(20))]
        c_delta[spec.n_z] = max(vals)
    drift = abs(c_delta[8] / c_delta[16] - 1)
    elapsed = time.time() - t0
    checks = {
        "boundary": max(bnd_rates) < 0.01,
        "partition": part_bad == 0,
        "nesting": nest_bad == 0,
        "f0": f0 == 0.5,
        "mc": mc_err < 0.02,
        "unit": unit == 0.75,
        "journe": drift <= 0.2,
    }
    passed = all(checks.values()) and elapsed < 120
    failed = [k for k, v in checks.items() if not v]
    record(2, passed,
           f"boundary rate max {_fmt(max(bnd_rates))}; partition misses {part_bad}; "
           f"nesting misses {nest_bad}; f(0) = {f0:.12g} (required 1/2); tube MC err "
           f"{_fmt(mc_err)}; |T(o,1/2,1/8)| = {unit}; c_1 = {c_delta[16]:.3f} at 16x64, "
           f"{c_delta[8]:.3f} at 8x32 (drift {drift:.1%}); {elapsed:.0f}s"
           + (f"; failing: {', '.join(failed)}" if failed else ""))
    assert passed


# ---------------------------------------------------------------------------
# 3. kernels

def test_criterion_3_kernels(spec, calc):
    t0 = time.time()
    rs = [0.25, 0.3, 0.5, 0.75, 1.0, 2.0]
    hs = dict(zip(rs, heat_kernels(rs, spec)))
    drift = max(abs(h.integral() - 1) for h in hs.values())
    (u,) = heat_evolve(hs[0.3].values, spec, [0.45])
    semi = float(np.linalg.norm(u - hs[0.75].values) / np.linalg.norm(hs[0.75].values))
    delta = GridField.delta(spec)
    oracle = max(lp_norm(hs[r] - calc.heat(r, delta)) / lp_norm(calc.heat(r, delta))
                 for r in (0.25, 0.5, 1.0))
    bands = {}
    for n_nodes in (64, 128):
        bands[n_nodes] = poisson_band(poisson_kernel(1.0, spec, n_nodes, check=False), 1.0)
    band_drift = max(abs(bands[128][i] / bands[64][i] - 1) for i in (0, 1))
    glr = {r: gaussian_log_ratio(hs[r], r, 1.0) for r in (0.25, 0.5, 1.0, 2.0)}
    glr_ok = all(np.isfinite(v) for v in glr.values()) and max(glr.values()) <= GAUSS_C
    elapsed = time.time() - t0
    passed = drift < 1e-6 and semi < 1e-3 and oracle < 1e-3 and band_drift <= 0.1 and glr_ok \
        and elapsed < 180
    record(3, passed,
           f"mass drift {_fmt(drift)}; semigroup {_fmt(semi)}; heat vs spectral {_fmt(oracle)}; "
           f"Poisson band r=1 [{bands[64][0]:.4f}, {bands[64][1]:.4f}] node-doubling drift "
           f"{_fmt(band_drift)}; Gaussian log-ratio (delta=1) sup "
           f"{max(glr.values()):.3f} <= C={GAUSS_C} over r in 0.25..2; {elapsed:.0f}s")
    assert passed


# ---------------------------------------------------------------------------
# 4. spectral calculus

def _resolved_modes(calc):
    """Fibres whose magnetic length |lam|^{-1/2} lies in [3 dz, 0.6 Z]."""
    spec = calc.spec
    out = []
    for m in range(1, spec.n_t // 2):
        ell = abs(calc.lams[m]) ** -0.5
        if 3 * spec.dz <= ell <= 0.6 * spec.Z:
            out.append(m)
    return out


def test_criterion_4_spectral():
    t0 = time.time()
    spec = GridSpec()
    calc = SpectralCalculus.build(spec)
    rng = np.random.default_rng(0)
    f = GridField(spec, rng.normal(size=spec.shape))
    parseval = abs(calc.mode_energies(f).sum() / lp_norm(f) ** 2 - 1)

    def m1(mu, lam):
        return np.exp(-0.3 * mu) * (1 + np.cos(lam))

    def m2(mu, lam):
        return 1.0 / (1.0 + mu + lam ** 2)

    comp = lp_norm(calc.apply(m1, calc.apply(m2, f))
                   - calc.apply(lambda mu, lam: m1(mu, lam) * m2(mu, lam), f)) / lp_norm(f)
    modes = _resolved_modes(calc)
    defects = {m: linear_spacing_defect(fan_levels(calc, m, 3)) for m in range(1, 9)}
    fan_ok = bool(modes) and all(defects[m] <= 0.1 for m in modes)
    a, b, c, d = spectral_band(calc)
    inband = calc.apply(lambda mu, lam: ((mu > 4 * a * a) & (mu < b * b / 4)
                                         & (delta_symbol(lam, spec.dt) > 4 * c * c)
                                         & (delta_symbol(lam, spec.dt) < d * d / 4)).astype(float), f)
    planch = abs(lp_norm(square_dis(inband, partition_pair(), calc)) / lp_norm(inband) - 1)
    rep = lp_norm(reproduce(inband, partition_pair(), calc) - inband) / lp_norm(inband)
    elapsed = time.time() - t0
    passed = parseval < 1e-10 and comp < 1e-10 and fan_ok and planch < 1e-10 and rep < 1e-8 \
        and elapsed < 300
    record(4, passed,
           f"Parseval {_fmt(parseval)}; composition {_fmt(comp)}; fan spacing defect on "
           f"resolved modes {modes}: max {max(defects[m] for m in modes):.3f} (all modes 1..8: "
           + ", ".join(f"{defects[m]:.2f}" for m in range(1, 9))
           + f"); Plancherel {_fmt(planch)}; reproducing {_fmt(rep)}; {elapsed:.0f}s")
    assert passed


# ---------------------------------------------------------------------------
# 5. operator comparability

def test_criterion_5_operators(spec, calc):
    sc = ScaleGrid.for_spec(spec)
    c1, c2 = maximal_sandwich(spec, sc)
    lo_allowed, hi_allowed = 0.7 / c2, 1.3 / c1
    inner = interior_mask(spec, 2).reshape(spec.n_horizontal, spec.n_t)
    lo, hi, viol_rn, viol_ng, bit = np.inf, 0.0, 0, 0, True
    P = poisson_pair()
    fam = [P, P.with_cone(1.0), gauss_pair()]
    hat = mexican_hat_pair()
    for f in (E.random_bandlimited(spec, 0), E.gaussian_bump(spec), E.indicator_field(spec)):
        mf, mi = flag_maximal(f, sc).flat, iterated_maximal(f, sc).flat
        sel = inner & (mi > 0)
        ratio = mf[sel] / mi[sel]
        lo, hi = min(lo, ratio.min()), max(hi, ratio.max())
        u = radial_maximal(f, sc, calc).flat
        us = nontangential_maximal(f, ConeSpec(1.0), sc, calc).flat
        g = grand_maximal(f, fam, sc, calc).flat
        viol_rn += int(np.sum(u > us))
        viol_ng += int(np.sum(us > g))
        bit &= np.array_equal(area_fn(f, hat, 0.0, 0.0, sc, calc).values,
                              square_cts(f, hat, sc, calc).values)
    passed = lo >= lo_allowed and hi <= hi_allowed and viol_rn == 0 and viol_ng == 0 and bit
    record(5, passed,
           f"M_F/M_it in [{lo:.3f}, {hi:.3f}] vs sandwich [1/c2, 1/c1] = [{1 / c2:.3f}, "
           f"{1 / c1:.3f}] with 30% slack; radial>nontangential {viol_rn}, "
           f"nontangential>grand {viol_ng}; area(0,0) == square_cts bitwise: {bit}")
    assert passed


# ---------------------------------------------------------------------------
# 6. atoms

def _atom_ratio(f, calc):
    d = atomic_decompose(f, calc)
    S = tent_area(slot_coefficients(f, d.pair), d.pair)
    return d, d.lambda_sum / (S.sum() * f.spec.cell_volume)


def test_criterion_6_atoms(spec, calc):
    t0 = time.time()
    p = E.origin_particle(spec, 0, 0)
    a = p.a * (1.0 / (lp_norm(p.a) * np.sqrt(tube_measure(enlarge(p.rect, 3.0)))))
    dp = atomic_decompose(a, calc)
    p_res, p_sum = dp.diagnostics["residual_rel"], dp.lambda_sum
    ratios = {}
    first = None
    for grid in (spec, GridSpec(n_t=128)):
        gcalc = calc if grid == spec else SpectralCalculus.build(grid)
        vals = []
        for seed in range(10):
            d, r = _atom_ratio(E.random_bandlimited(grid, seed), gcalc)
            vals.append(r)
            if first is None:
                first = d
        ratios[grid.n_t] = vals
    c64, c128 = max(ratios[64]), max(ratios[128])
    drift = abs(c128 / c64 - 1)
    a2 = max(validate_atom(at, 64, 0)["max_ratio"] for at in first.atoms)
    elapsed = time.time() - t0
    passed = p_res < 1e-6 and p_sum <= PARTICLE_LAMBDA_C and drift <= 0.25 and a2 <= 1.05 \
        and elapsed < 600
    record(6, passed,
           f"particle residual {_fmt(p_res)}, sum|lambda| {p_sum:.3f} <= C={PARTICLE_LAMBDA_C}; "
           f"sum|lambda|/||S_area f||_1 max {c64:.3f} (16x64), {c128:.3f} (16x128), drift "
           f"{drift:.1%}; A2 max ratio {a2:.3f}; {elapsed:.0f}s")
    assert passed


# ---------------------------------------------------------------------------
# 7. proper subspace

def test_criterion_7_proper_subspace():
    t0 = time.time()
    out = E.proper_subspace_sweep((4, 8, 16, 32))
    w, c, o = out["witness_fit"], out["control_fit"], out["one_param_fit"]
    elapsed = time.time() - t0
    witness_ok = w["slope"] > 0 and w["r2"] > 0.9
    control_ok = abs(c["rel_slope"]) <= 0.05
    passed = witness_ok and control_ok and elapsed < 300
    record(7, passed,
           f"witness ||u+||_1 slope {w['slope']:.4f} per ln H, R^2 {w['r2']:.4f}; "
           f"mean-nonzero control relative slope {c['rel_slope']:.3f} (required |.|<=0.05, "
           f"R^2 {c['r2']:.3f}); one-parameter relative slope {o['rel_slope']:.4f}; "
           f"{elapsed:.0f}s")
    assert passed


# ---------------------------------------------------------------------------
# 8. multipliers

def test_criterion_8_multipliers(spec, calc):
    t0 = time.time()
    js, ells = [2, 3, 4, 5, 6], [-1, 0, 1, 2, 3]
    fine = GridSpec(n_t=128)
    fcalc = SpectralCalculus.build(fine)
    maxima = {}
    for name in E.MULTIPLIER_NAMES:
        m = E.named_multiplier(name)
        coarse = max(r["ratio"] for r in E.multiplier_table(m, calc, js, ells))
        refined = max(r["ratio"] for r in E.multiplier_table(m, fcalc, js, ells))
        maxima[name] = (coarse, refined)
    drift = max(abs(b / a - 1) for a, b in maxima.values())
    finite = all(np.isfinite(a) and np.isfinite(b) for a, b in maxima.values())
    budget = E.region_tail_budget(E.named_multiplier("smooth"), calc, -1, -1, 3.0)
    elapsed = time.time() - t0
    passed = finite and drift <= 0.25 and budget["rel_gap"] <= 0.05 and elapsed < 600
    record(8, passed,
           "max weighted/Sobolev ratio " + ", ".join(
               f"{k} {a:.3f}->{b:.3f}" for k, (a, b) in maxima.items())
           + f" (16x64 -> 16x128, drift {drift:.1%}); region budget gap "
           f"{_fmt(budget['rel_gap'])}; {elapsed:.0f}s")
    assert passed


# ---------------------------------------------------------------------------
# 9. Khinchin randomization

def test_criterion_9_khinchin(spec, calc):
    res = [khinchin_square_check(E.random_bandlimited(spec, s), calc, n_draws=64, seed=s)
           for s in range(10)]
    ratios = np.array([r["ratio"] for r in res])
    se = max(r["rel_std_error"] for r in res)
    spread = (ratios.max() - ratios.min()) / np.median(ratios)
    passed = ratios.max() <= KHINCHIN_C and se < 0.1 and spread <= 0.25
    record(9, passed,
           f"ratio in [{ratios.min():.3f}, {ratios.max():.3f}] <= C={KHINCHIN_C}; "
           f"max relative SE {se:.3f} at 64 draws; spread across 10 seeds {spread:.1%}")
    assert passed
