"""Maximal, square and area functions, Riesz transforms and the central
Hilbert transform on grid fields.

Two-parameter convolutions f *1 phi1_r *2 phi2_s are realized as spectral
multipliers psi1(r sqrt(mu)) psi2(s sqrt(sigma)), where mu is the sub-Laplacian
eigenvalue and sigma the symbol of the discrete -d^2/dt^2.  Suprema and
integrals over (r, s) run over a dyadic :class:`ScaleGrid`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .fields import GridField, GridSpec, half_width, t_window, tube_reduce, vector_field
from .spectral import SpectralCalculus, delta_symbol, eta_sq


# ---------------------------------------------------------------------------
# scales

@dataclass(frozen=True)
class ScaleGrid:
    r_values: tuple
    s_values: tuple

    def __post_init__(self):
        r = tuple(float(v) for v in self.r_values)
        s = tuple(float(v) for v in self.s_values)
        if not r or not s:
            raise ValueError("scale grid must be nonempty")
        if any(v <= 0 for v in r + s):
            raise ValueError("scales must be positive")
        object.__setattr__(self, "r_values", tuple(sorted(r)))
        object.__setattr__(self, "s_values", tuple(sorted(s)))

    @classmethod
    def dyadic(cls, j_min: int, j_max: int, k_min: int, k_max: int) -> "ScaleGrid":
        return cls(tuple(2.0 ** j for j in range(j_min, j_max + 1)),
                   tuple(2.0 ** k for k in range(k_min, k_max + 1)))

    @classmethod
    def for_spec(cls, spec: GridSpec) -> "ScaleGrid":
        """Dyadic scales inside the resolvable band [2 dz, Z] x [2 dt, T]."""
        j0 = int(np.ceil(np.log2(2 * spec.dz) - 1e-9))
        j1 = int(np.floor(np.log2(spec.Z) + 1e-9))
        k0 = int(np.ceil(np.log2(2 * spec.dt) - 1e-9))
        k1 = int(np.floor(np.log2(spec.T) + 1e-9))
        return cls.dyadic(j0, j1, k0, k1)

    def check_band(self, spec: GridSpec) -> bool:
        """True when every scale lies in [2 dz, Z] x [2 dt, T]."""
        eps = 1e-12
        return (min(self.r_values) >= 2 * spec.dz - eps and max(self.r_values) <= spec.Z + eps
                and min(self.s_values) >= 2 * spec.dt - eps and max(self.s_values) <= spec.T + eps)

    def pairs(self):
        return [(r, s) for r in self.r_values for s in self.s_values]

    def log_weights(self, values):
        """Trapezoid-free log-spacing weights d(log v) for a sorted geometric list."""
        v = np.asarray(values)
        if v.size == 1:
            return np.ones(1)
        lw = np.log(v)
        d = np.diff(lw)
        w = np.empty(v.size)
        w[0] = d[0]
        w[-1] = d[-1]
        w[1:-1] = 0.5 * (d[:-1] + d[1:])
        return w

    def band(self) -> dict:
        return {"r": [min(self.r_values), max(self.r_values)],
                "s": [min(self.s_values), max(self.s_values)]}


@dataclass(frozen=True)
class ConeSpec:
    beta: float = 1.0

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("cone aperture must be positive")


# ---------------------------------------------------------------------------
# pairs of one-parameter kernels, described by their spectral profiles

@dataclass(frozen=True)
class FlagPair:
    """phi1_r *2 phi2_s with multiplier psi1(r sqrt(mu)) psi2(s sqrt(sigma)).

    ``cone`` > 0 marks a family member that also contains every translate of
    the kernel by elements of the cone of that aperture; maximal functions
    then take the sup over the cone tube.
    """

    psi1: Callable
    psi2: Callable
    name: str = "pair"
    cone: float = 0.0
    order1: int = 0          # vanishing order of psi1 at 0 (in powers of r sqrt(mu))
    order2: int = 0

    def multiplier(self, r: float, s: float, dt: float):
        p1, p2 = self.psi1, self.psi2

        def fn(mu, lam):
            x = r * np.sqrt(np.clip(mu, 0.0, None))
            y = s * np.sqrt(delta_symbol(lam, dt))
            return p1(x) * p2(y)
        return fn

    def with_cone(self, beta: float) -> "FlagPair":
        return FlagPair(self.psi1, self.psi2, f"{self.name}@cone{beta:g}", beta,
                        self.order1, self.order2)


def poisson_pair() -> FlagPair:
    """The flag Poisson kernel p_{r,s}: multiplier exp(-r sqrt(L)) exp(-s sqrt(Delta))."""
    return FlagPair(lambda x: np.exp(-x), lambda y: np.exp(-y), "poisson")


def gauss_pair() -> FlagPair:
    """Heat kernels h_{r^2} *2 h_{s^2}: multiplier exp(-r^2 L) exp(-s^2 Delta)."""
    return FlagPair(lambda x: np.exp(-x * x), lambda y: np.exp(-y * y), "gauss")


def partition_pair() -> FlagPair:
    """eta_sq in both variables; sum over dyadic (m, n) of the squared multipliers is 1."""
    return FlagPair(eta_sq, eta_sq, "partition", order1=10 ** 6, order2=10 ** 6)


def mexican_hat_pair(M: int = 1, N: int = 1) -> FlagPair:
    """(r^2 L)^M e^{-r^2 L} times (s^2 Delta)^N e^{-s^2 Delta}."""
    return FlagPair(lambda x: x ** (2 * M) * np.exp(-x * x), lambda y: y ** (2 * N) * np.exp(-y * y),
                    f"hat{M}{N}", order1=2 * M, order2=2 * N)


def dyadic_range(lo: float, hi: float) -> range:
    """Integers m with the bumps eta_sq(2^m x) covering [lo, hi]."""
    return range(int(np.floor(-np.log2(hi))) - 1, int(np.ceil(-np.log2(lo))) + 2)


def spectral_band(calc: SpectralCalculus, tol: float = 1e-9):
    """(min positive sqrt(mu), max sqrt(mu), min positive sqrt(sigma), max sqrt(sigma))."""
    mu = np.concatenate([w for k, w in enumerate(calc.evals) if calc.lams[k] != 0])
    sig = delta_symbol(calc.lams[calc.lams != 0], calc.spec.dt)
    return (float(np.sqrt(mu[mu > tol].min())), float(np.sqrt(mu.max())),
            float(np.sqrt(sig.min())), float(np.sqrt(sig.max())))


def dyadic_blocks(calc: SpectralCalculus):
    """(m, n) ranges whose partition bumps cover the spectrum off the lam = 0 fibre."""
    a, b, c, d = spectral_band(calc)
    return dyadic_range(a, b), dyadic_range(c, d)


# ---------------------------------------------------------------------------
# validation of pairs

class PairValidationError(ValueError):
    pass


def validate_cancellation(pair: FlagPair, calc: SpectralCalculus, M: int = 1,
                          r: float = 1.0, s: float = 1.0, rel: float = 1e-8) -> dict:
    """Check the moment conditions required of an analysing pair.

    At kernel level: int phi1 = 0, int phi2 = 0 and int t phi2 = 0 (computed
    from the sampled kernels).  Higher horizontal moments up to degree 2M are
    checked through the vanishing order of psi1 at the origin.
    """
    spec = calc.spec
    k1 = calc.kernel(lambda mu, lam: pair.psi1(r * np.sqrt(np.clip(mu, 0, None))) + 0 * lam,
                     real=True)
    lam = calc.lams
    line = pair.psi2(s * np.sqrt(delta_symbol(lam, spec.dt)))
    k2 = np.fft.ifft(line).real / spec.dt
    k2 = np.fft.fftshift(k2)
    t = (np.arange(spec.n_t) - spec.n_t // 2) * spec.dt
    if spec.n_t % 2 == 0:
        t[0] = 0.0  # the point at -T has no mirror partner on a periodic grid
    m0 = abs(k1.integral())
    n1 = float(np.sum(np.abs(k1.values)) * spec.cell_volume)
    m2 = abs(np.sum(k2) * spec.dt)
    m3 = abs(np.sum(t * k2) * spec.dt)
    n2 = float(np.sum(np.abs(k2)) * spec.dt)
    xs = np.array([1e-3, 2e-3])
    vals = np.abs(pair.psi1(xs))
    if np.all(vals == 0):
        order_ok = True
        order = np.inf
    else:
        order = float(np.log(vals[1] / max(vals[0], 1e-300)) / np.log(2.0))
        order_ok = order >= 2 * M - 1e-3
    res = {"int_phi1": m0, "int_phi2": m2, "int_t_phi2": m3, "psi1_order": order,
           "ok": bool(m0 <= rel * n1 and m2 <= rel * n2 and m3 <= rel * n2 * spec.T and order_ok)}
    if not res["ok"]:
        raise PairValidationError(f"pair {pair.name!r} lacks cancellation: {res}")
    return res


def validate_poisson_bounded(pair: FlagPair, calc: SpectralCalculus, r: float = 1.0,
                             s: float = 1.0, orders=((0, 0), (1, 0), (0, 1), (1, 1), (2, 0), (0, 2),
                                                     (2, 1), (1, 2), (2, 2)),
                             bound: float | None = None) -> dict:
    """Measured decay constants of L^m Delta^n applied to the pair kernel.

    For each (m, n) the constant is
    sup |r^{2m} s^{2n} L^m Delta^n phi_{r,s}(g)| r^{-1} s^{-1} (r^2 + ||g||^2)^{(D+1)/2} (s^2 + t^2) / s
    normalized by the same quantity for the flag Poisson kernel, and must be
    finite (and at most ``bound`` when given).
    """
    from .group import gauge_norm_arr
    spec = calc.spec
    c = spec.coords()
    g = gauge_norm_arr(c, spec.nu)
    t = c[..., -1]
    weight = (r * r + g * g) ** ((spec.D + 1) / 2) / r * (s * s + t * t) / s
    out = {}
    for m, n in orders:
        fn = pair.multiplier(r, s, spec.dt)

        def mult(mu, lam, fn=fn, m=m, n=n):
            return fn(mu, lam) * (r * r * mu) ** m * (s * s * delta_symbol(lam, spec.dt)) ** n
        k = calc.kernel(mult, real=True)
        C = float(np.max(np.abs(k.values) * weight))
        if not np.isfinite(C) or (bound is not None and C > bound):
            raise PairValidationError(f"pair {pair.name!r} fails decay bound at order {(m, n)}: {C}")
        out[(m, n)] = C
    return out


# ---------------------------------------------------------------------------
# maximal functions

def _flat_abs(f: GridField) -> np.ndarray:
    return np.abs(f.flat).astype(float)


def flag_maximal(f: GridField, scales: ScaleGrid) -> GridField:
    """sup over (r, s) of the mean of |f| over T(g, r, s)."""
    a = _flat_abs(f)
    best = np.zeros_like(a)
    for r, s in scales.pairs():
        best = np.maximum(best, tube_reduce(a, f.spec, r, s, "mean"))
    return f.like(best)


def ball_mean(a: np.ndarray, spec: GridSpec, r: float) -> np.ndarray:
    """|f| *1 chi1_r: mean over the ball g . B1(o, r)."""
    return tube_reduce(a, spec, r, 0.0, "mean")


def interval_mean(a: np.ndarray, spec: GridSpec, s: float) -> np.ndarray:
    """*2 chi2_s: mean over the central interval (t - s, t + s)."""
    K = half_width(spec.dt, s)
    num = t_window(a, K, spec.t_periodic, "sum")
    den = t_window(np.ones_like(a), K, spec.t_periodic, "sum")
    return num / den


def iterated_average(a: np.ndarray, spec: GridSpec, r: float, s: float) -> np.ndarray:
    return interval_mean(ball_mean(a, spec, r), spec, s)


def iterated_maximal(f: GridField, scales: ScaleGrid) -> GridField:
    """sup over (r, s) of |f| *1 chi1_r *2 chi2_s."""
    a = _flat_abs(f)
    best = np.zeros_like(a)
    for r in scales.r_values:
        b = ball_mean(a, f.spec, r)
        for s in scales.s_values:
            best = np.maximum(best, interval_mean(b, f.spec, s))
    return f.like(best)


def iterated_weights(spec: GridSpec, r: float, s: float) -> np.ndarray:
    """Weights of chi1_r *2 chi2_s on the tube offsets, indexed by |b| (t offset)."""
    A = half_width(spec.dz, r)
    Kb = half_width(spec.dt, r * r)
    Ks = half_width(spec.dt, s)
    nb = (2 * A + 1) ** (2 * spec.nu) * (2 * Kb + 1)
    w = np.zeros(Kb + Ks + 1)
    for b in range(-Kb, Kb + 1):
        for u in range(-Ks, Ks + 1):
            w[abs(b + u)] += 1.0 / (nb * (2 * Ks + 1))
    # each |offset| > 0 value counted from both signs
    w[1:] /= 2.0
    return w


def maximal_sandwich(spec: GridSpec, scales: ScaleGrid) -> tuple:
    """Constants (c1, c2) with c1 A_{r,s/2} <= I_{r,s} and I_{r,s} <= c2 A_{r,s}.

    A is the tube mean and I the iterated average, on interior points of the
    grid; they bound the ratio flag / iterated maximal function within
    [1/c2, 1/c1] up to the truncation of the scale grid.
    """
    c1, c2 = np.inf, 0.0
    for r, s in scales.pairs():
        w = iterated_weights(spec, r, s)
        A = half_width(spec.dz, r)
        n_slab = (2 * A + 1) ** (2 * spec.nu)
        K = half_width(spec.dt, r * r + s)
        K2 = half_width(spec.dt, r * r + s / 2)
        cnt = n_slab * (2 * K + 1)
        cnt2 = n_slab * (2 * K2 + 1)
        wfull = np.zeros(max(K, len(w) - 1) + 1)
        wfull[:len(w)] = w
        c2 = max(c2, float(wfull[:K + 1].max() * cnt))
        c1 = min(c1, float(wfull[:K2 + 1].min() * cnt2))
    return c1, c2


def _pair_field(f: GridField, calc: SpectralCalculus, pair: FlagPair, r: float, s: float) -> np.ndarray:
    return calc.apply(pair.multiplier(r, s, f.spec.dt), f).flat


def radial_maximal(f: GridField, scales: ScaleGrid, calc: SpectralCalculus,
                   pair: FlagPair | None = None) -> GridField:
    """u+(g) = sup over (r, s) of |f *1 p_{r,s}(g)|."""
    pair = pair or poisson_pair()
    best = np.zeros((f.spec.n_horizontal, f.spec.n_t))
    for r, s in scales.pairs():
        best = np.maximum(best, np.abs(_pair_field(f, calc, pair, r, s)))
    return f.like(best)


def nontangential_maximal(f: GridField, cone: ConeSpec, scales: ScaleGrid,
                          calc: SpectralCalculus, pair: FlagPair | None = None) -> GridField:
    """u*(g): sup of |u(g', r, s)| over g' in g . B1(o, beta r) . B2(0, beta^2 s)."""
    pair = pair or poisson_pair()
    best = np.zeros((f.spec.n_horizontal, f.spec.n_t))
    for r, s in scales.pairs():
        u = np.abs(_pair_field(f, calc, pair, r, s))
        best = np.maximum(best, tube_reduce(u, f.spec, r, s, "max", beta=cone.beta))
    return f.like(best)


def grand_maximal(f: GridField, family: Sequence[FlagPair], scales: ScaleGrid,
                  calc: SpectralCalculus, validate: bool = True) -> GridField:
    """sup over the family and the scales of |f *1 phi_{r,s}|.

    Members with ``cone > 0`` contribute all their translates by cone
    elements, which is the sup over the cone tube.
    """
    if validate:
        for p in family:
            validate_poisson_bounded(p, calc)
    best = np.zeros((f.spec.n_horizontal, f.spec.n_t))
    for p in family:
        for r, s in scales.pairs():
            u = np.abs(_pair_field(f, calc, p, r, s))
            if p.cone > 0:
                u = tube_reduce(u, f.spec, r, s, "max", beta=p.cone)
            best = np.maximum(best, u)
    return f.like(best)


# ---------------------------------------------------------------------------
# square and area functions

def _area_core(f: GridField, pair: FlagPair, scales: ScaleGrid, calc: SpectralCalculus,
               beta: float, gamma: float, check: bool) -> np.ndarray:
    if check:
        validate_cancellation(pair, calc)
    wr = scales.log_weights(scales.r_values)
    ws = scales.log_weights(scales.s_values)
    acc = np.zeros((f.spec.n_horizontal, f.spec.n_t))
    for i, r in enumerate(scales.r_values):
        for k, s in enumerate(scales.s_values):
            u2 = np.abs(_pair_field(f, calc, pair, r, s)) ** 2
            if beta > 0 or gamma > 0:
                u2 = ball_mean(u2, f.spec, beta * r) if beta > 0 else u2
                u2 = interval_mean(u2, f.spec, gamma * s) if gamma > 0 else u2
            acc += wr[i] * ws[k] * u2
    return np.sqrt(acc)


def square_cts(f: GridField, pair: FlagPair, scales: ScaleGrid, calc: SpectralCalculus,
               check: bool = True) -> GridField:
    """(int int |f *1 phi1_r *2 phi2_s|^2 dr/r ds/s)^{1/2} on the log-spaced scale grid."""
    return f.like(_area_core(f, pair, scales, calc, 0.0, 0.0, check))


def area_fn(f: GridField, pair: FlagPair, beta: float, gamma: float, scales: ScaleGrid,
            calc: SpectralCalculus, check: bool = True) -> GridField:
    """Area function: |u|^2 averaged by chi1_{beta r} *2 chi2_{gamma s}, then integrated.

    beta = gamma = 0 means no averaging and reproduces :func:`square_cts`.
    """
    if not (0 <= beta and 0 <= gamma):
        raise ValueError("beta and gamma must be nonnegative")
    return f.like(_area_core(f, pair, scales, calc, beta, gamma, check))


def square_dis(f: GridField, pair: FlagPair, calc: SpectralCalculus,
               blocks=None, check: bool = True) -> GridField:
    """(sum over dyadic (m, n) of |f *1 phi1_{2^m} *2 phi2_{2^n}|^2)^{1/2}."""
    if check:
        validate_cancellation(pair, calc)
    ms, ns = blocks or dyadic_blocks(calc)
    acc = np.zeros((f.spec.n_horizontal, f.spec.n_t))
    for m in ms:
        for n in ns:
            acc += np.abs(_pair_field(f, calc, pair, 2.0 ** m, 2.0 ** n)) ** 2
    return f.like(np.sqrt(acc))


def dyadic_pieces(f: GridField, pair: FlagPair, calc: SpectralCalculus, blocks=None) -> dict:
    ms, ns = blocks or dyadic_blocks(calc)
    return {(m, n): _pair_field(f, calc, pair, 2.0 ** m, 2.0 ** n) for m in ms for n in ns}


def reproduce(f: GridField, pair: FlagPair, calc: SpectralCalculus, blocks=None) -> GridField:
    """sum over (m, n) of phi_{m,n} * phi_{m,n} * f, the discrete reproducing formula."""
    ms, ns = blocks or dyadic_blocks(calc)

    def fn(mu, lam):
        tot = np.zeros_like(mu)
        for m in ms:
            for n in ns:
                tot = tot + np.abs(pair.multiplier(2.0 ** m, 2.0 ** n, f.spec.dt)(mu, lam)) ** 2
        return tot
    return calc.apply(fn, f)


# ---------------------------------------------------------------------------
# singular integrals

def _t_multiplier(f: GridField, sym: Callable) -> GridField:
    spec = f.spec
    if not spec.t_periodic:
        raise ValueError("central Fourier multipliers need a t-periodic grid")
    om = 2 * np.pi * np.fft.fftfreq(spec.n_t, d=spec.dt)
    F = np.fft.fft(f.flat, axis=1) * sym(om)[None, :]
    out = np.fft.ifft(F, axis=1)
    if not np.iscomplexobj(f.values):
        out = out.real
    return f.like(out)


def hilbert_central(f: GridField) -> GridField:
    """Periodic Hilbert transform in t: multiplier -i sgn(omega)."""
    return _t_multiplier(f, lambda om: -1j * np.sign(om))


def central_riesz(f: GridField) -> GridField:
    """Delta^{-1/2} d/dt: multiplier i sgn(omega)."""
    return _t_multiplier(f, lambda om: 1j * np.sign(om))


def riesz_horizontal(f: GridField, calc: SpectralCalculus) -> list:
    """[X_1 L^{-1/2} f, ..., Y_nu L^{-1/2} f] with the kernel of L sent to 0."""
    if calc.spec != f.spec:
        raise ValueError("calculus grid does not match the field")
    g = calc.power(-0.5, f)
    nu = f.spec.nu
    names = [f"X{j}" for j in range(1, nu + 1)] + [f"Y{j}" for j in range(1, nu + 1)]
    return [vector_field(g, w) for w in names]


def flag_riesz(f: GridField, calc: SpectralCalculus, central_first: bool = True) -> list:
    """Horizontal Riesz components composed with the central Riesz transform."""
    if central_first:
        return riesz_horizontal(central_riesz(f), calc)
    return [central_riesz(c) for c in riesz_horizontal(f, calc)]


def operator_norm_power(apply: Callable, spec: GridSpec, n_iter: int = 50, seed: int = 0) -> float:
    """Power iteration estimate of the L^2 norm of a real linear map given with its adjoint.

    ``apply(v)`` returns (A v, A^T A v) where v is a real array of spec.shape.
    """
    rng = np.random.default_rng(seed)
    v = rng.normal(size=spec.shape)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(n_iter):
        _, w = apply(v)
        n = np.linalg.norm(w)
        if n == 0:
            return 0.0
        est = np.sqrt(n)
        v = w / n
    return float(est)


def khinchin_square_check(f: GridField, calc: SpectralCalculus, pair: FlagPair | None = None,
                          n_draws: int = 64, seed: int = 0, blocks=None) -> dict:
    """Compare ||S_dis f||_1 with the mean of ||sum_{m,n} r_m s_n f_{m,n}||_1.

    r_m and s_n are independent Rademacher signs drawn from numpy's PCG64.
    """
    pair = pair or partition_pair()
    pieces = dyadic_pieces(f, pair, calc, blocks)
    cv = f.spec.cell_volume
    S = np.sqrt(sum(np.abs(p) ** 2 for p in pieces.values()))
    sq_l1 = float(np.sum(S) * cv)
    ms = sorted({k[0] for k in pieces})
    ns = sorted({k[1] for k in pieces})
    rng = np.random.default_rng(seed)
    vals = []
    for _ in range(n_draws):
        rm = dict(zip(ms, rng.choice([-1.0, 1.0], size=len(ms))))
        sn = dict(zip(ns, rng.choice([-1.0, 1.0], size=len(ns))))
        tot = sum(rm[m] * sn[n] * p for (m, n), p in pieces.items())
        vals.append(float(np.sum(np.abs(tot)) * cv))
    vals = np.array(vals)
    mean = float(vals.mean())
    se = float(vals.std(ddof=1) / np.sqrt(n_draws)) if n_draws > 1 else float("nan")
    ratio = sq_l1 / mean if mean > 0 else (0.0 if sq_l1 == 0 else np.inf)
    return {"square_l1": sq_l1, "mean_random_l1": mean, "std_error": se,
            "rel_std_error": se / mean if mean > 0 else 0.0, "ratio": ratio,
            "n_draws": n_draws, "seed": seed, "rng": "numpy.PCG64"}
