"""Test-field generators and the batch experiments behind the CLI."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence

import numpy as np
from scipy.stats import linregress

from .atoms import atomic_decompose, bump_in_rect, make_particle, tube_mask
from .fields import GridField, GridSpec, lp_norm
from .group import HPoint, inv_arr, mul_arr
from .operators import (ConeSpec, FlagPair, ScaleGrid, area_fn, flag_riesz, central_riesz,
                        gauss_pair, grand_maximal, mexican_hat_pair, nontangential_maximal,
                        partition_pair, poisson_pair, radial_maximal, riesz_horizontal,
                        square_cts, square_dis)
from .spectral import (Multiplier2D, SpectralCalculus, eta, mrs_weight, multiplier_piece,
                       sobolev_norm, weighted_kernel_norm)
from .tiling import enlarge, rect_from_point


def map_ordered(fn: Callable, items: Sequence, threads: int = 1) -> list:
    """fn over items in a worker pool; results come back in input order."""
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# test fields

def _bump(u):
    """cos^2 bump on |u| < 1."""
    u = np.abs(u)
    return np.where(u < 1, np.cos(0.5 * np.pi * np.minimum(u, 1.0)) ** 2, 0.0)


def zero_field(spec: GridSpec) -> GridField:
    return GridField.zeros(spec)


def gaussian_bump(spec: GridSpec, width: float = 0.5, t_width: float = 1.0) -> GridField:
    c = spec.coords()
    z2 = np.sum(c[..., :2 * spec.nu] ** 2, axis=-1)
    return GridField(spec, np.exp(-z2 / width ** 2 - c[..., -1] ** 2 / t_width ** 2))


def _edge_weight(x, a: float, tol: float = 1e-9):
    """1 inside |x| < a, 1/2 on |x| = a, 0 outside."""
    d = np.abs(x) - a
    return np.where(d < -tol, 1.0, np.where(d <= tol, 0.5, 0.0))


def indicator_field(spec: GridSpec, radius: float = 1.0, half_height: float = 1.0) -> GridField:
    """Indicator of the box |z|_inf < radius, |t| < half_height.

    Samples on a face get weight 1/2 per axis, so the grid integral is the
    trapezoid value, exact when the faces lie on grid lines.
    """
    c = spec.coords()
    w = _edge_weight(c[..., -1], half_height)
    for k in range(2 * spec.nu):
        w = w * _edge_weight(c[..., k], radius)
    return GridField(spec, w)


def witness_field(spec: GridSpec, mean_zero: bool = True) -> GridField:
    """a(z, t) = psi(z) phi(t) with psi in the unit ball and phi in (-1, 1).

    psi is a radial bump, tilted to have zero grid mean when ``mean_zero``;
    it is normalized to grid L1 norm 1, and phi to grid integral 1.
    """
    nu = spec.nu
    c = spec.coords()
    z2 = np.sum(c[..., :2 * nu] ** 2, axis=-1)
    b = _bump(np.sqrt(z2))
    psi = b * (1.0 - (b.sum() / (b * z2).sum()) * z2) if mean_zero else b
    phi = _bump(c[..., -1])
    slab = (0,) * (2 * nu)
    psi = psi / (np.abs(psi[..., 0]).sum() * spec.dz ** (2 * nu))
    phi = phi / (phi[slab].sum() * spec.dt)
    return GridField(spec, psi * phi)


def random_bandlimited(spec: GridSpec, seed: int = 0, n_packets: int = 4) -> GridField:
    """Sum of smooth Gaussian wave packets with random centres, widths and phases.

    Packet widths stay above a few cells and t-frequencies below 1, so the
    spectrum is concentrated well inside the grid band; the t-mean of every
    horizontal fibre is removed so nothing sits on the lam = 0 fibre.
    """
    rng = np.random.default_rng(seed)
    nu = spec.nu
    c = spec.coords()
    zmax = 0.4 * spec.Z
    tmax = 0.375 * spec.T
    out = np.zeros(spec.shape)
    for _ in range(n_packets):
        zc = rng.uniform(-zmax, zmax, 2 * nu)
        tc = rng.uniform(-tmax, tmax)
        w = rng.uniform(0.6, 1.0)
        wt = rng.uniform(1.0, 2.0)
        om = rng.uniform(0.3, 1.0)
        ph = rng.uniform(0.0, 2 * np.pi)
        amp = rng.normal()
        dz2 = np.sum((c[..., :2 * nu] - zc) ** 2, axis=-1)
        dtt = c[..., -1] - tc
        out += amp * np.exp(-dz2 / w ** 2 - dtt ** 2 / wt ** 2) * np.cos(om * dtt + ph)
    out -= out.mean(axis=-1, keepdims=True)
    return GridField(spec, out)


def origin_particle(spec: GridSpec, width_level: int = -1, height_level: int = -1,
                    kappa: float = 3.0, M: int | None = None, N: int = 1):
    """Particle L^M Delta^N b on the rectangle through the origin."""
    nu = spec.nu
    R = rect_from_point(HPoint((0.0,) * nu, (0.0,) * nu, 0.0), width_level, height_level)
    b = bump_in_rect(R, spec, kappa)
    return make_particle(b, R, M, N, kappa)


def particle_field(spec: GridSpec, width_level: int = -1, height_level: int = -1) -> GridField:
    return origin_particle(spec, width_level, height_level).a


FIELD_KINDS = ("zero", "gaussian", "indicator", "witness", "witness_nonzero_mean",
               "random", "particle")


def generate_field(kind: str, spec: GridSpec, seed: int = 0, **params) -> GridField:
    if kind == "zero":
        return zero_field(spec)
    if kind == "gaussian":
        return gaussian_bump(spec, **params)
    if kind == "indicator":
        return indicator_field(spec, **params)
    if kind == "witness":
        return witness_field(spec, True)
    if kind == "witness_nonzero_mean":
        return witness_field(spec, False)
    if kind == "random":
        return random_bandlimited(spec, seed, **params)
    if kind == "particle":
        return particle_field(spec, **params)
    raise ValueError(f"unknown field kind {kind!r}; expected one of {', '.join(FIELD_KINDS)}")


# ---------------------------------------------------------------------------
# norm equivalence

FUNCTIONALS = ("atom_sum", "S_dis", "S_cts", "S_area", "u_plus", "u_star", "M_gmax", "riesz")


def riesz_l1(f: GridField, calc: SpectralCalculus) -> float:
    """||f||_1 + sum ||R_j f||_1 + ||R_t f||_1 + sum ||R_j R_t f||_1."""
    parts = [f, central_riesz(f)] + riesz_horizontal(f, calc) + flag_riesz(f, calc)
    return float(sum(lp_norm(p, 1) for p in parts))


def equivalence_row(f: GridField, calc: SpectralCalculus, scales: ScaleGrid | None = None,
                    kappa: float = 3.0) -> dict:
    """The eight Hardy-type functionals of f."""
    scales = scales or ScaleGrid.for_spec(f.spec)
    hat = mexican_hat_pair()
    P = poisson_pair()
    fam = [P, P.with_cone(1.0), gauss_pair()]
    if lp_norm(f) == 0:
        return {k: 0.0 for k in FUNCTIONALS}
    dec = atomic_decompose(f, calc, kappa=kappa)
    return {
        "atom_sum": dec.lambda_sum,
        "S_dis": lp_norm(square_dis(f, partition_pair(), calc), 1),
        "S_cts": lp_norm(square_cts(f, hat, scales, calc), 1),
        "S_area": lp_norm(area_fn(f, hat, 1.0, 1.0, scales, calc), 1),
        "u_plus": lp_norm(radial_maximal(f, scales, calc), 1),
        "u_star": lp_norm(nontangential_maximal(f, ConeSpec(1.0), scales, calc), 1),
        "M_gmax": lp_norm(grand_maximal(f, fam, scales, calc), 1),
        "riesz": riesz_l1(f, calc),
    }


def ratio_summary(rows: list) -> list:
    """min / median / max of A/B over rows with B > 0, for every ordered pair."""
    out = []
    for a in FUNCTIONALS:
        for b in FUNCTIONALS:
            if a == b:
                continue
            r = np.array([row[a] / row[b] for row in rows if row[b] > 0])
            if r.size == 0:
                continue
            out.append({"num": a, "den": b, "min": float(r.min()),
                        "median": float(np.median(r)), "max": float(r.max()), "n": int(r.size)})
    return out


# ---------------------------------------------------------------------------
# proper subspace

def one_parameter_pair() -> FlagPair:
    """Horizontal Poisson kernel alone (no central smoothing)."""
    return FlagPair(lambda x: np.exp(-x), lambda y: np.ones_like(y), "poisson1")


def proper_subspace_grid(H: float, nu: int = 1, Z: float = 2.0, n_z: int = 16,
                         dt: float = 0.25) -> GridSpec:
    n_t = int(round(2 * H / dt))
    n_t += n_t % 2
    return GridSpec(nu=nu, Z=Z, T=float(H), n_z=n_z, n_t=n_t)


def proper_subspace_point(H: float, nu: int = 1, Z: float = 2.0, n_z: int = 16, dt: float = 0.25,
                          r_values=(0.5, 1.0, 2.0), s_min: float = 0.5,
                          cache_dir: str | None = None) -> dict:
    """||u+||_1 on |t| <= H for the witness, its nonzero-mean control and the one-parameter maximal."""
    spec = proper_subspace_grid(H, nu, Z, n_z, dt)
    calc = SpectralCalculus.build(spec, cache_dir)
    k1 = int(np.floor(np.log2(H) + 1e-9))
    s_values = tuple(2.0 ** k for k in range(int(np.round(np.log2(s_min))), k1 + 1))
    flag_scales = ScaleGrid(tuple(r_values), s_values)
    one_scales = ScaleGrid(tuple(r_values), (1.0,))
    a = witness_field(spec, True)
    c = witness_field(spec, False)
    return {
        "H": float(H),
        "n_t": spec.n_t,
        "u_plus_l1": lp_norm(radial_maximal(a, flag_scales, calc), 1),
        "control_l1": lp_norm(radial_maximal(c, flag_scales, calc), 1),
        "one_param_l1": lp_norm(radial_maximal(a, one_scales, calc, one_parameter_pair()), 1),
    }


def log_fit(H, y) -> dict:
    """Least squares y = a + b ln H; relative slope is b / mean(y)."""
    fit = linregress(np.log(np.asarray(H, float)), np.asarray(y, float))
    mean = float(np.mean(y))
    return {"slope": float(fit.slope), "intercept": float(fit.intercept),
            "r2": float(fit.rvalue ** 2), "rel_slope": float(fit.slope / mean) if mean else 0.0}


def proper_subspace_sweep(H_values=(4, 8, 16, 32), threads: int = 1, **kw) -> dict:
    rows = map_ordered(lambda H: proper_subspace_point(H, **kw), list(H_values), threads)
    H = [r["H"] for r in rows]
    return {"rows": rows,
            "witness_fit": log_fit(H, [r["u_plus_l1"] for r in rows]),
            "control_fit": log_fit(H, [r["control_l1"] for r in rows]),
            "one_param_fit": log_fit(H, [r["one_param_l1"] for r in rows])}


# ---------------------------------------------------------------------------
# multipliers

def _imag_power(gamma: float):
    def fn(x, y):
        x = np.asarray(x, float)
        ay = np.abs(np.asarray(y, float))
        px = np.where(x > 0, np.exp(1j * gamma * np.log(np.where(x > 0, x, 1.0))), 0.0)
        py = np.where(ay > 0, np.exp(1j * gamma * np.log(np.where(ay > 0, ay, 1.0))), 0.0)
        return px * py
    return fn


def _one(x, y):
    return np.ones(np.broadcast(np.asarray(x), np.asarray(y)).shape, dtype=complex)


def _smooth(x, y):
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    return x / (1 + x) * y * y / (1 + y * y) + 0j


def named_multiplier(name: str, gamma: float = 0.5) -> Callable:
    """Named multipliers m(x, lam), evaluated at x = mu / |lam|."""
    if name == "one":
        return _one
    if name == "imag_power":
        return _imag_power(gamma)
    if name == "smooth":
        return _smooth
    raise ValueError(f"unknown multiplier {name!r}; expected one, imag_power or smooth")


MULTIPLIER_NAMES = ("one", "imag_power", "smooth")


def dilated_sobolev(m: Callable, j: int, ell: int, alpha: float, beta: float, n: int = 128) -> float:
    """Sobolev norm of eta(x) eta(|y|) m(2^j x, 2^ell y)."""
    return sobolev_norm(lambda x, y: eta(x) * eta(np.abs(y)) * m(2.0 ** j * x, 2.0 ** ell * y),
                        alpha, beta, n)


def multiplier_table(m: Callable, calc: SpectralCalculus, j_values, ell_values,
                     eps: float = 0.5, n_sobolev: int = 128) -> list:
    """Weighted kernel norm, Sobolev norm and their ratio for each (j, ell) piece."""
    spec = calc.spec
    M = Multiplier2D(m, flag=True)
    alpha, beta = spec.nu + eps, (1 + eps) / 2
    rows = []
    for j in j_values:
        for ell in ell_values:
            K = multiplier_piece(calc, M, j, ell, eta, eta)
            wn = weighted_kernel_norm(K, mrs_weight(j, ell, eps, spec))
            sn = dilated_sobolev(m, j, ell, alpha, beta, n_sobolev)
            rows.append({"j": int(j), "ell": int(ell), "weighted": wn, "sobolev": sn,
                         "ratio": wn / sn if sn > 0 else (0.0 if wn == 0 else np.inf)})
    return rows


def region_tail_budget(m: Callable, calc: SpectralCalculus, width_level: int = -1,
                       height_level: int = -1, kappa: float = 3.0) -> dict:
    """Tail of m(L/|T|, iT) a outside S* split over the regions I-IV.

    With local coordinates (z, u) = cent(S*)^{-1} g, r* and h* the radius and
    half height of S* and h the height of the rectangle:
    I = {|z| <= 8 nu, |u| > h*}, II = {|z| > 8 nu, |u| > h*},
    III = {|z| >= r*, |u| > 8 nu h}, IV = {|z| >= r*, |u| <= 8 nu h}.
    III and IV include the sphere |z| = r*, which has positive measure on
    a grid.  Each tail cell is charged to the first region containing it, so the
    budget never double counts; cells in no region are reported separately.
    """
    spec = calc.spec
    nu = spec.nu
    p = origin_particle(spec, width_level, height_level, kappa)
    Aa = calc.apply(Multiplier2D(m, flag=True), p.a)
    S = enlarge(p.rect, kappa)
    outside = ~tube_mask(S, spec)
    loc = mul_arr(inv_arr(S.center.to_array()), spec.coords(), nu)
    if spec.t_periodic:
        loc[..., -1] = (loc[..., -1] + spec.T) % (2 * spec.T) - spec.T
    z = np.sqrt(np.sum(loc[..., :2 * nu] ** 2, axis=-1))
    u = np.abs(loc[..., -1])
    r_s, h_s, h = S.radius, S.half_height, p.rect.height
    regions = {
        "I": (z <= 8 * nu) & (u > h_s),
        "II": (z > 8 * nu) & (u > h_s),
        "III": (z >= r_s) & (u > 8 * nu * h),
        "IV": (z >= r_s) & (u <= 8 * nu * h),
    }
    dens = np.abs(Aa.values) * spec.cell_volume
    taken = np.zeros(spec.shape, bool)
    budget = {}
    for name, mask in regions.items():
        sel = mask & outside & ~taken
        budget[name] = float(dens[sel].sum())
        taken |= sel
    tail = float(dens[outside].sum())
    total = sum(budget.values())
    return {"regions": budget, "budget_total": total, "tail": tail,
            "uncovered": float(dens[outside & ~taken].sum()),
            "rel_gap": abs(total - tail) / tail if tail > 0 else 0.0,
            "r_star": r_s, "h_star": h_s, "height": h, "a_l2": lp_norm(p.a)}
