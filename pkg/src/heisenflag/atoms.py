"""Particles, atoms and the constructive atomic decomposition.

The decomposition follows the tent argument on a discrete scale plane.
Scales come in slots (r, s).  Each r lies in a width slot (q/N, q] of an
adapted-rectangle width q = N^j.  Each s lies in a height slot (h/N^2, h] of a
rectangle height h = N^{2j'}/(2 nu), or in (0, h] for tiles.  Every cell
(g, r, s) therefore belongs to exactly one adapted rectangle R, the one
containing g with the width and height set by the slot.

The synthesis kernels psi~_{r,s} are Chebyshev low-pass polynomials (Jackson
kernels) in the sparse sub-Laplacian and the discrete -d^2/dt^2.  Degree K
gives a kernel supported within K lattice steps with frequency scale about
1/(K step), the discrete form of finite propagation speed, which gives the
compact support that particles need.  The analysis multipliers are
phi = psi / sum(psi^2), so the discrete reproducing formula holds exactly
wherever that sum is positive.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp_sparse

from .fields import (GridField, GridSpec, central_second_difference, laplacian_matrix, lp_norm,
                     read_hfld, sublaplacian, tube_reduce, write_hfld)
from .group import HPoint
from .kernels import spectral_radius_bound
from .spectral import SpectralCalculus, delta_symbol
from .tiling import (AdaptedRect, GridSet, TileId, Tube, _base, enlarge, enlarged_set,
                     rect_labels, tile_height_series, tube_measure)

log = logging.getLogger(__name__)


def default_M(nu: int) -> int:
    """Smallest integer strictly greater than nu / 2."""
    return nu // 2 + 1


def default_alpha(nu: int, kappa: float = 3.0) -> float:
    """Threshold for the enlarged set {M_F(1_Omega) > alpha} guaranteeing R* inside it."""
    D = 2 * nu + 2
    return 1.0 / (2 ** (2 * nu) * kappa ** D * (5 * nu + 2))


# ---------------------------------------------------------------------------
# support geometry on the grid

def _periodic_images(spec: GridSpec) -> tuple:
    return (-2, -1, 0, 1, 2) if spec.t_periodic else (0,)


def _tube_hits(spec: GridSpec, center: np.ndarray, radius: float, half_height: float):
    """(horizontal indices, boolean (n_sel, n_t)) of grid points in T(center, radius, half_height).

    On a periodic grid the t offset is reduced modulo the period.
    """
    nu = spec.nu
    zg = spec.z_coords()
    zc = center[:2 * nu]
    H = np.nonzero(np.max(np.abs(zg - zc), axis=1) < radius)[0]
    if H.size == 0:
        return H, np.zeros((0, spec.n_t), dtype=bool)
    zp = zg[H]
    # t-coordinate of center^{-1} . p
    S = -4 * nu * (zp[:, :nu] @ zc[nu:] - zp[:, nu:] @ zc[:nu])
    tt = spec.axis_t()[None, :] - center[2 * nu] + S[:, None]
    if spec.t_periodic:
        tt = (tt + spec.T) % (2 * spec.T) - spec.T
    return H, np.abs(tt) < radius * radius + half_height


def tube_mask(t: Tube, spec: GridSpec) -> np.ndarray:
    """Grid points inside the tube, with t taken modulo the period on periodic grids."""
    out = np.zeros((spec.n_horizontal, spec.n_t), dtype=bool)
    H, hit = _tube_hits(spec, t.center.to_array(), t.radius, t.half_height)
    out[H] = hit
    return out.reshape(spec.shape)


def rect_centers(keys: np.ndarray, j: int, jp: int, nu: int) -> np.ndarray:
    """Centres of the rectangles encoded by rect_labels keys, vectorized."""
    N = _base(nu)
    q = float(N) ** j
    qq = float(N) ** jp
    cube = keys[:, :2 * nu].astype(float)
    a = keys[:, 2 * nu:4 * nu].astype(float)
    k = keys[:, 4 * nu].astype(float)
    zc = cube * q
    u = zc / qq - a
    f, _, _ = tile_height_series(u, nu)
    S = 4 * nu * (np.sum(a[:, nu:] * u[:, :nu], axis=1) - np.sum(a[:, :nu] * u[:, nu:], axis=1))
    top = k / (2 * nu) + S + f
    t = (top - 1 / (4 * nu)) * qq * qq
    return np.concatenate([zc, t[:, None]], axis=1)


def _support(x: np.ndarray, rel: float = 1e-12) -> np.ndarray:
    a = np.abs(x)
    m = a.max(initial=0.0)
    return a > rel * m if m > 0 else np.zeros(a.shape, dtype=bool)


# ---------------------------------------------------------------------------
# particles and atoms

class SupportError(ValueError):
    def __init__(self, message, offending):
        super().__init__(message)
        self.offending = offending


@dataclass(frozen=True, eq=False)
class Particle:
    rect: AdaptedRect
    b: GridField
    a: GridField
    M: int
    N: int
    kappa: float = 3.0


def apply_LD(b: GridField, M: int, N: int) -> GridField:
    """L^M Delta^N b with the grid operators."""
    out = b
    for _ in range(N):
        out = central_second_difference(out)
    for _ in range(M):
        out = sublaplacian(out)
    return out


def make_particle(b: GridField, R: AdaptedRect, M: int | None = None, N: int = 1,
                  kappa: float = 3.0, rel: float = 1e-12) -> Particle:
    """Particle a = L^M Delta^N b after checking supp b inside R^{*,kappa}."""
    nu = b.spec.nu
    M = default_M(nu) if M is None else M
    if not 2 * M > nu:
        raise ValueError("M must exceed nu / 2")
    if N < 1:
        raise ValueError("N must be at least 1")
    star = tube_mask(enlarge(R, kappa), b.spec)
    bad = _support(b.values, rel) & ~star
    if bad.any():
        idx = np.argwhere(bad)
        raise SupportError(f"{len(idx)} samples of b lie outside R*", idx)
    return Particle(R, b, apply_LD(b, M, N), M, N, kappa)


def bump_in_rect(R: AdaptedRect, spec: GridSpec, kappa: float = 3.0, shrink: float = 0.5) -> GridField:
    """Smooth bump centred at cent(R) supported well inside R^{*,kappa}."""
    t = enlarge(R, kappa)
    nu = spec.nu
    c = spec.coords()
    from .group import inv_arr, mul_arr
    loc = mul_arr(inv_arr(t.center.to_array()), c, nu)
    rho, tau = shrink * t.radius, shrink * (t.radius ** 2 + t.half_height)
    if spec.t_periodic:
        loc[..., -1] = (loc[..., -1] + spec.T) % (2 * spec.T) - spec.T
    u = np.max(np.abs(loc[..., :2 * nu]), axis=-1) / rho
    v = np.abs(loc[..., -1]) / tau
    w = np.where((u < 1) & (v < 1), np.cos(0.5 * np.pi * np.minimum(u, 1)) ** 4
                 * np.cos(0.5 * np.pi * np.minimum(v, 1)) ** 4, 0.0)
    return GridField(spec, w)


def particle_b_bound(p: Particle) -> float:
    """Measured C in ||b|| <= C q^{2M} h^{2N} ||a||."""
    q, h = p.rect.width, p.rect.height
    na = lp_norm(p.a)
    return lp_norm(p.b) / (q ** (2 * p.M) * h ** (2 * p.N) * na) if na > 0 else 0.0


@dataclass(frozen=True, eq=False)
class Atom:
    """An atom a = sum of particles associated to the grid set omega.

    ``signed_sum`` evaluates sum sigma_R a_R; for decomposition atoms it is
    computed in the spectral domain without materializing every particle.
    """

    omega: GridSet
    particles: tuple = ()
    signed_sum_fn: object = None
    n_particles: int | None = None

    def __len__(self):
        return self.n_particles if self.n_particles is not None else len(self.particles)

    def signed_sum(self, signs) -> GridField:
        if self.signed_sum_fn is not None:
            return self.signed_sum_fn(np.asarray(signs, float))
        spec = self.omega.spec
        out = np.zeros(spec.shape)
        for s, p in zip(signs, self.particles):
            out = out + s * p.a.values.real
        return GridField(spec, out)

    def value(self) -> GridField:
        return self.signed_sum(np.ones(len(self)))


def validate_atom(atom: Atom, n_signs: int = 64, seed: int = 0) -> dict:
    """Monte-Carlo check of ||sum sigma_R a_R||_2 <= |Omega|^{-1/2} plus the l^2 condition."""
    n = len(atom)
    meas = atom.omega.measure
    if n == 0:
        return {"max_ratio": 0.0, "l2_ratio": 0.0, "n_signs": n_signs, "seed": seed,
                "n_particles": 0, "omega_measure": meas}
    rng = np.random.default_rng(seed)
    best = 0.0
    for _ in range(n_signs):
        sig = rng.choice([-1.0, 1.0], size=n)
        best = max(best, lp_norm(atom.signed_sum(sig)))
    out = {"max_ratio": best * np.sqrt(meas), "n_signs": n_signs, "seed": seed,
           "n_particles": n, "omega_measure": meas}
    if atom.particles:
        out["l2_ratio"] = float(np.sqrt(sum(lp_norm(p.a) ** 2 for p in atom.particles) * meas))
    return out


# ---------------------------------------------------------------------------
# compactly supported synthesis pairs

def lowpass_coeffs(K: int) -> np.ndarray:
    """Chebyshev coefficients c_0..c_K of the degree-K Jackson kernel, summing to 1.

    sum_k c_k cos(k theta) is nonnegative, equals 1 at theta = 0 and has
    width about pi / K in theta.
    """
    if K <= 0:
        return np.ones(1)
    k = np.arange(K + 1)
    a = np.pi / (K + 2)
    g = ((K + 2 - k) * np.cos(a * k) + np.sin(a * k) / np.tan(a)) / (K + 2)
    c = np.where(k == 0, g, 2 * g)
    return c / c.sum()


def lowpass_symbol(x, K: int, xmax: float):
    """sum_k c_k T_k(1 - 2 x / xmax), the symbol of the degree-K low-pass polynomial."""
    theta = np.arccos(np.clip(1.0 - 2.0 * np.asarray(x, float) / xmax, -1.0, 1.0))
    c = lowpass_coeffs(K)
    return np.cos(np.multiply.outer(theta, np.arange(K + 1))) @ c


def lowpass_apply(A, v: np.ndarray, K: int, xmax: float) -> np.ndarray:
    """sum_k c_k T_k(I - 2 A / xmax) v by the three-term recurrence."""
    c = lowpass_coeffs(K)
    t_prev = v
    out = c[0] * v
    if K == 0:
        return out
    t_cur = v - 2.0 * (A @ v) / xmax
    out = out + c[1] * t_cur
    for k in range(2, K + 1):
        t_next = 2.0 * (t_cur - 2.0 * (A @ t_cur) / xmax) - t_prev
        out = out + c[k] * t_next
        t_prev, t_cur = t_cur, t_next
    return out


def delta_matrix(spec: GridSpec):
    """Sparse discrete -d^2/dt^2 on the flattened grid."""
    n = spec.n_t
    D = sp_sparse.diags([2 * np.ones(n), -np.ones(n - 1), -np.ones(n - 1)], [0, 1, -1], format="lil")
    if spec.t_periodic:
        D[0, n - 1] = -1
        D[n - 1, 0] = -1
    D = D.tocsr() / spec.dt ** 2
    return sp_sparse.kron(sp_sparse.identity(spec.n_horizontal), D, format="csr")


def walk_support(spec: GridSpec, K: int) -> np.ndarray:
    """Grid points reachable from the origin in at most K horizontal steps."""
    A = laplacian_matrix(spec)
    P = (A != 0).astype(np.int8)
    v = np.zeros(spec.size, dtype=np.int8)
    v[np.ravel_multi_index(spec.origin_index(), spec.shape)] = 1
    for _ in range(K):
        v = ((P @ v) > 0).astype(np.int8)
    return v.reshape(spec.shape).astype(bool)


@lru_cache(maxsize=256)
def _horizontal_degree(key, r: float) -> int:
    spec = GridSpec(**dict(key))
    c = spec.coords()
    nu = spec.nu
    K = 0
    while K < 64:
        sup = walk_support(spec, K + 1)
        z = np.max(np.abs(c[..., :2 * nu]), axis=-1)[sup]
        t = np.abs(c[..., -1])[sup]
        if z.max() < r and t.max() < r * r and z.max() < spec.Z - spec.dz:
            K += 1
        else:
            break
    return K


def horizontal_degree(spec: GridSpec, r: float) -> int:
    """Largest K with K-step walk support inside B1(o, r) = {|z| < r, |t| < r^2}."""
    return _horizontal_degree(tuple(sorted(_spec_dict(spec).items())), float(r))


def vertical_degree(spec: GridSpec, s: float) -> int:
    """Largest K with K dt < s."""
    return max(int(np.ceil(s / spec.dt - 1e-9)) - 1, 0)


def _spec_dict(spec: GridSpec) -> dict:
    return dict(nu=spec.nu, Z=spec.Z, T=spec.T, n_z=spec.n_z, n_t=spec.n_t, t_periodic=spec.t_periodic)


@dataclass(frozen=True)
class ScaleSlot:
    r: float
    s: float
    width_level: int
    s_level: int           # height level j' with s in (h_{j'}/N^2, h_{j'}]

    def rect_levels(self) -> tuple:
        """(width level, height level) of the rectangles owning this slot's cells."""
        return self.width_level, max(self.s_level, self.width_level)


class CompactPair:
    """Synthesis kernels psi~_{r,s} with compact support and the matching analysis multipliers.

    psi_{r,s} = c_{r,s} (r^2 L)^M (s^2 Delta)^N p_{K_r}(L / mu_max) p_{K_s}(Delta / sig_max)
    with p_K the Jackson low-pass of degree K, whose kernel is supported
    within K lattice steps; K is the largest degree whose support fits
    T(o, r, s).  With ``balanced`` each slot has peak symbol 1 before the
    common scaling.  The analysis multipliers are phi = psi / F with
    F = sum over slots of psi^2 and sup F = 1; spectral points with F below
    ``floor`` are left uncovered.  ``headroom`` scales mu_max and sig_max.
    """

    def __init__(self, calc: SpectralCalculus, slots, M: int | None = None, N: int = 1,
                 floor: float = 1e-12, headroom: float = 1.0, balanced: bool = True):
        spec = calc.spec
        self.calc = calc
        self.spec = spec
        self.slots = list(slots)
        self.M = default_M(spec.nu) if M is None else M
        self.N = N
        self.mu_max = headroom * spectral_radius_bound(spec)
        self.sig_max = headroom * 4.0 / spec.dt ** 2
        self.deg_r = {sl.r: horizontal_degree(spec, sl.r) for sl in self.slots}
        self.deg_s = {sl.s: vertical_degree(spec, sl.s) for sl in self.slots}
        tabs = [self._psi_table(sl) for sl in self.slots]
        peaks = [float(np.abs(t).max()) for t in tabs]
        if balanced:
            tabs = [t / p if p > 0 else t for t, p in zip(tabs, peaks)]
        F = sum(np.abs(t) ** 2 for t in tabs)
        fmax = float(F.max())
        if fmax <= 0:
            raise ValueError("synthesis pair vanishes on the spectrum")
        g = 1.0 / np.sqrt(fmax)
        self.slot_scale = {sl: g / p if (balanced and p > 0) else g for sl, p in zip(self.slots, peaks)}
        self.psi_tables = [t * g for t in tabs]
        self.F = F / fmax
        self.phi_tables = []
        pos = self.F > floor
        for t in self.psi_tables:
            ph = np.zeros_like(t)
            ph[pos] = t[pos] / self.F[pos]
            self.phi_tables.append(ph)
        self.covered = pos

    # -- multipliers -------------------------------------------------------------
    def _psi_tilde_fn(self, sl: ScaleSlot):
        Kr, Ks = self.deg_r[sl.r], self.deg_s[sl.s]
        mu_max, sig_max, dt = self.mu_max, self.sig_max, self.spec.dt

        def fn(mu, lam):
            sig = delta_symbol(lam, dt)
            return lowpass_symbol(mu, Kr, mu_max) * lowpass_symbol(sig, Ks, sig_max)
        return fn

    def _psi_table(self, sl: ScaleSlot) -> np.ndarray:
        r, s, M, N, dt = sl.r, sl.s, self.M, self.N, self.spec.dt
        tilde = self._psi_tilde_fn(sl)

        def fn(mu, lam):
            sig = delta_symbol(lam, dt)
            return (r * r * mu) ** M * (s * s * sig) ** N * tilde(mu, lam)
        return self.calc.table(fn).real

    def psi_tilde_table(self, sl: ScaleSlot) -> np.ndarray:
        r, s = sl.r, sl.s
        return self.calc.table(self._psi_tilde_fn(sl)).real * self.slot_scale[sl] * r ** (2 * self.M) * s ** (2 * self.N)

    # -- sparse application -------------------------------------------------------
    def apply_psi_tilde_sparse(self, sl: ScaleSlot, flat: np.ndarray) -> np.ndarray:
        """psi~_{r,s} * v with sparse polynomials; the result has compact support."""
        L = laplacian_matrix(self.spec)
        Dm = delta_matrix(self.spec)
        v = np.asarray(flat, float).ravel()
        w = lowpass_apply(Dm, v, self.deg_s[sl.s], self.sig_max)
        w = lowpass_apply(L, w, self.deg_r[sl.r], self.mu_max)
        w = w * self.slot_scale[sl] * sl.r ** (2 * self.M) * sl.s ** (2 * self.N)
        return w.reshape(self.spec.n_horizontal, self.spec.n_t)

    def coverage(self, f: GridField) -> float:
        """Relative L^2 mass of f on spectral points where the pair vanishes."""
        C = self.calc.coefficients(f.flat)
        tot = float(np.sum(np.abs(C) ** 2))
        return float(np.sqrt(np.sum(np.abs(C[~self.covered]) ** 2) / tot)) if tot > 0 else 0.0


def default_slots(spec: GridSpec, r_sub: int = 2, s_sub: int = 2, level_range=None,
                  height_range=None) -> list:
    """Scale slots for the adapted rectangles that fit the grid box.

    Width levels j have N^j in [dz, 2 Z]; height levels j' run from the
    smallest width level up to the largest with h_{j'} <= 2 T.
    """
    nu = spec.nu
    N = _base(nu)
    if level_range is None:
        j0 = int(np.ceil(np.log(spec.dz) / np.log(N) - 1e-9))
        j1 = int(np.floor(np.log(2 * spec.Z) / np.log(N) + 1e-9))
        level_range = range(j0, j1 + 1)
    js = list(level_range)
    if height_range is None:
        jp1 = js[0]
        while float(N) ** (2 * (jp1 + 1)) / (2 * nu) <= 2 * spec.T:
            jp1 += 1
        height_range = range(js[0], jp1 + 1)
    slots = []
    for j in js:
        q = float(N) ** j
        for a in range(r_sub):
            r = q * float(N) ** (-a / r_sub)
            for jp in height_range:
                h = float(N) ** (2 * jp) / (2 * nu)
                for b in range(s_sub):
                    s = h * float(N) ** (-2 * b / s_sub)
                    slots.append(ScaleSlot(r, s, j, jp))
    return slots


# ---------------------------------------------------------------------------
# decomposition

@dataclass(eq=False)
class LevelData:
    level: int
    lam: float
    omega: GridSet            # Omega_ell
    omega_tilde: GridSet      # enlarged set carrying the atom
    rects: list               # AdaptedRect per particle
    cells: dict               # slot index -> (flat indices, particle index per cell)


@dataclass(eq=False)
class AtomicDecomposition:
    spec: GridSpec
    levels: list
    lambdas: list
    atoms: list
    residual: GridField
    pair: CompactPair | None = None
    level_data: list = field(default_factory=list)
    coefficients: dict = field(default_factory=dict)   # slot index -> u_slot (flat)
    diagnostics: dict = field(default_factory=dict)

    @property
    def lambda_sum(self) -> float:
        return float(np.sum(np.abs(self.lambdas)))

    def particles(self, k: int, indices=None) -> list:
        """Materialize particles of level index k with compact sparse kernels."""
        ld = self.level_data[k]
        pair = self.pair
        out = []
        which = range(len(ld.rects)) if indices is None else indices
        for pi in which:
            R = ld.rects[pi]
            b = np.zeros((self.spec.n_horizontal, self.spec.n_t))
            for si, (idx, owner) in ld.cells.items():
                sel = idx[owner == pi]
                if sel.size == 0:
                    continue
                v = np.zeros(self.spec.size)
                v[sel] = self.coefficients[si].ravel()[sel]
                b += pair.apply_psi_tilde_sparse(pair.slots[si], v)
            bf = GridField(self.spec, (b / ld.lam).reshape(self.spec.shape))
            out.append(Particle(R, bf, apply_LD(bf, pair.M, pair.N), pair.M, pair.N))
        return out


def slot_coefficients(f: GridField, pair: CompactPair) -> list:
    """u_slot = f * phi_slot for every slot."""
    C = pair.calc.coefficients(f.flat)
    return [pair.calc.synthesize(C * ph, real=True) for ph in pair.phi_tables]


def tent_area(us: list, pair: CompactPair) -> np.ndarray:
    """Discrete area function: sqrt(sum over slots of the tube mean of |u|^2 over T(g, r, s))."""
    spec = pair.spec
    acc = np.zeros((spec.n_horizontal, spec.n_t))
    for u, sl in zip(us, pair.slots):
        acc += tube_reduce(np.abs(u) ** 2, spec, sl.r, sl.s, "mean")
    return np.sqrt(acc)


def _rect_from_key(kk, j, jp, nu) -> AdaptedRect:
    return AdaptedRect(j, tuple(int(v) for v in kk[:2 * nu]),
                       TileId(jp, tuple(int(v) for v in kk[2 * nu:4 * nu]), int(kk[4 * nu])))


def _kth_largest(vals: np.ndarray, k: int) -> float:
    if k > vals.size:
        return 0.0
    return float(np.partition(vals, vals.size - k)[vals.size - k])


def atomic_decompose(f: GridField, calc: SpectralCalculus, pair: CompactPair | None = None,
                     kappa: float = 3.0, slots=None, alpha: float | None = None,
                     max_levels: int = 32, area=None) -> AtomicDecomposition:
    """Atomic decomposition of f through level sets of the discrete area function.

    Cells (g, slot) are grouped by their rectangle R.  R joins the family of
    level l when |R* cap Omega_l| > |R*| / (3 kappa^D) >= |R* cap Omega_{l+1}|,
    with Omega_l = {S f > 2^l}.  The level-l atom lives on the enlarged set
    {M_F(1_{Omega_l}) > alpha}.
    """
    spec = f.spec
    nu, D = spec.nu, spec.D
    if pair is None:
        pair = CompactPair(calc, slots or default_slots(spec))
    alpha = default_alpha(nu, kappa) if alpha is None else alpha
    theta = 1.0 / (3 * kappa ** D)
    us = slot_coefficients(f, pair)
    S = tent_area(us, pair) if area is None else area
    diag = {"coverage_defect": pair.coverage(f), "theta": theta, "alpha": alpha}
    if diag["coverage_defect"] > 1e-8:
        log.warning("scale band misses part of the spectrum of f (relative L2 %.3g)",
                    diag["coverage_defect"])
    smax = float(S.max(initial=0.0))
    if smax <= 0:
        return AtomicDecomposition(spec, [], [], [], f.like(np.array(f.values, copy=True)),
                                   pair, [], {}, diag)
    l_hi = int(np.ceil(np.log2(smax)))
    l_lo = l_hi - max_levels
    # rectangle families per (width, height) level and their level index
    S2 = S.reshape(spec.n_horizontal, spec.n_t)
    level_of = {}      # (j, jp) -> (labels, rect level per label, keys)
    n_factor_viol = 0
    for si, sl in enumerate(pair.slots):
        key = sl.rect_levels()
        if key in level_of:
            continue
        j, jp = key
        labels, keys, _ = rect_labels(spec, j, jp)
        lv = np.full(len(keys), l_lo - 1, dtype=int)
        centers = rect_centers(keys, j, jp, nu)
        q = float(_base(nu)) ** j
        h = float(_base(nu)) ** (2 * jp) / (2 * nu)
        rad, hh = kappa * q / 2, kappa ** 2 * (4 * h + q * q) / 8
        for idx in range(len(keys)):
            H, hit = _tube_hits(spec, centers[idx], rad, hh)
            vals = S2[H][hit]
            k = int(np.floor(theta * vals.size)) + 1
            x = _kth_largest(vals, k)
            if x > 0:
                lv[idx] = int(np.ceil(np.log2(x))) - 1
        level_of[key] = (labels, lv, keys)
    for si, sl in enumerate(pair.slots):
        j, jp = sl.rect_levels()
        R0 = AdaptedRect(j, (0,) * (2 * nu), TileId(jp, (0,) * (2 * nu), 0))
        tm = tube_measure(enlarge(R0, kappa))
        if theta * tm > 0.5 * tube_measure(Tube(HPoint.identity(nu), sl.r, sl.s)) * (1 + 1e-12):
            n_factor_viol += 1
    diag["tent_factor_violations"] = n_factor_viol
    levels, lambdas, atoms, lds = [], [], [], []
    cv = spec.cell_volume
    unassigned = 0
    for ell in range(l_lo, l_hi + 1):
        omega = GridSet(spec, S > 2.0 ** ell)
        if not omega.mask.any():
            continue
        cells = {}
        rect_index = {}
        rects = []
        energy = 0.0
        for si, sl in enumerate(pair.slots):
            key = sl.rect_levels()
            labels, lv, keys = level_of[key]
            sel_lab = np.nonzero(lv == ell)[0]
            if sel_lab.size == 0:
                continue
            cell_mask = np.isin(labels, sel_lab)
            idx = np.nonzero(cell_mask)[0]
            owner = np.empty(idx.size, dtype=int)
            for n_i, lab in enumerate(labels[idx]):
                rk = (key, int(lab))
                if rk not in rect_index:
                    rect_index[rk] = len(rects)
                    rects.append(_rect_from_key(keys[lab], key[0], key[1], nu))
                owner[n_i] = rect_index[rk]
            cells[si] = (idx, owner)
            energy += float(np.sum(us[si].ravel()[idx] ** 2) * cv)
        if not cells:
            continue
        omega_t = enlarged_set(omega, alpha)
        if omega_t.mask.all():
            log.info("level %d: enlarged set is the whole grid", ell)
        lam = float(np.sqrt(energy) * np.sqrt(omega_t.measure))
        if lam == 0:
            continue
        ld = LevelData(ell, lam, omega, omega_t, rects, cells)
        levels.append(ell)
        lambdas.append(lam)
        lds.append(ld)
        atoms.append(Atom(omega_t, (), _signed_sum_factory(spec, pair, us, ld), len(rects)))
    total = np.zeros((spec.n_horizontal, spec.n_t))
    for ld, atom in zip(lds, atoms):
        total += ld.lam * atom.value().flat
    for si in range(len(pair.slots)):
        key = pair.slots[si].rect_levels()
        labels, lv, _ = level_of[key]
        unassigned += int(np.sum((lv < l_lo) | (lv > l_hi)))
    diag["unassigned_rects"] = unassigned
    residual = f.like(f.flat - total)
    diag["residual_rel"] = lp_norm(residual) / max(lp_norm(f), 1e-300)
    return AtomicDecomposition(spec, levels, lambdas, atoms, residual, pair, lds,
                               {i: u for i, u in enumerate(us)}, diag)


def _signed_sum_factory(spec: GridSpec, pair: CompactPair, us: list, ld: LevelData):
    def fn(signs: np.ndarray) -> GridField:
        C = np.zeros((spec.n_horizontal, spec.n_t), dtype=complex)
        for si, (idx, owner) in ld.cells.items():
            v = np.zeros(spec.size)
            v[idx] = us[si].ravel()[idx] * signs[owner]
            C += pair.psi_tables[si] * pair.calc.coefficients(v.reshape(spec.n_horizontal, spec.n_t))
        out = pair.calc.synthesize(C, real=True) / ld.lam
        return GridField(spec, out.reshape(spec.shape))
    return fn


def reconstruct(d: AtomicDecomposition) -> GridField:
    """sum over levels of lambda_l a_l plus the residual."""
    out = d.residual.flat.copy()
    for lam, atom in zip(d.lambdas, d.atoms):
        out = out + lam * atom.value().flat
    return d.residual.like(out)


# ---------------------------------------------------------------------------
# tails of operators applied to particles

def rho(R: AdaptedRect, S: AdaptedRect, d1: float, d2: float) -> float:
    return (R.height / S.height) ** d1 + (R.width / S.width) ** d2


def grand_maximal_of_atom_tail(particle: Particle, S: AdaptedRect, operator_id: str,
                               calc: SpectralCalculus, scales=None, kappa: float = 3.0) -> float:
    """int over the complement of S* of |A a_R|, divided by rho(R, S) |R|^{1/2} ||a_R||_2.

    rho uses the exponents (3/2, 2M - D/2).
    """
    from . import operators as ops
    a = particle.a
    na = lp_norm(a)
    if na == 0:
        return 0.0
    spec = a.spec
    scales = scales or ops.ScaleGrid.for_spec(spec)
    if operator_id == "area_fn":
        A = ops.area_fn(a, ops.mexican_hat_pair(), 1.0, 1.0, scales, calc, check=False)
    elif operator_id == "square_cts":
        A = ops.square_cts(a, ops.mexican_hat_pair(), scales, calc, check=False)
    elif operator_id == "grand_maximal":
        A = ops.grand_maximal(a, [ops.poisson_pair().with_cone(1.0), ops.gauss_pair()], scales,
                              calc, validate=False)
    else:
        raise ValueError(f"unknown operator {operator_id!r}")
    outside = ~tube_mask(enlarge(S, kappa), spec)
    tail = float(np.sum(np.abs(A.values)[outside]) * spec.cell_volume)
    R = particle.rect
    return tail / (rho(R, S, 1.5, 2 * particle.M - spec.D / 2) * np.sqrt(R.measure) * na)


# ---------------------------------------------------------------------------
# serialization

def _rect_json(R: AdaptedRect) -> dict:
    return {"j": R.width_level, "cube": list(R.cube), "jp": R.height_level,
            "a": list(R.tall.a), "k": R.tall.k}


def _rect_from_json(d: dict) -> AdaptedRect:
    return AdaptedRect(d["j"], tuple(d["cube"]), TileId(d["jp"], tuple(d["a"]), d["k"]))


def save_decomposition(d: AtomicDecomposition, path: str, particles: bool = True) -> None:
    """Write a manifest JSON and per-particle .hfld files into a directory."""
    os.makedirs(path, exist_ok=True)
    manifest = {"grid": d.spec.to_header(), "levels": d.levels, "lambdas": d.lambdas,
                "diagnostics": {k: v for k, v in d.diagnostics.items()}, "atoms": []}
    for k, ld in enumerate(d.level_data):
        entry = {"level": ld.level, "lambda": ld.lam, "rects": [_rect_json(R) for R in ld.rects],
                 "files": []}
        if particles:
            for pi, p in enumerate(d.particles(k)):
                name = f"level{ld.level}_p{pi}_b.hfld"
                write_hfld(p.b, os.path.join(path, name))
                entry["files"].append(name)
        manifest["atoms"].append(entry)
    write_hfld(d.residual, os.path.join(path, "residual.hfld"))
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_decomposition(path: str, M: int | None = None, N: int = 1) -> dict:
    """Read a saved decomposition: manifest plus particles rebuilt from their b files."""
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    out = {"manifest": manifest, "residual": read_hfld(os.path.join(path, "residual.hfld")),
           "atoms": []}
    for entry in manifest["atoms"]:
        parts = []
        for R_json, name in zip(entry["rects"], entry["files"]):
            b = read_hfld(os.path.join(path, name))
            Mv = default_M(b.spec.nu) if M is None else M
            parts.append(Particle(_rect_from_json(R_json), b, apply_LD(b, Mv, N), Mv, N))
        out["atoms"].append({"level": entry["level"], "lambda": entry["lambda"], "particles": parts})
    return out
