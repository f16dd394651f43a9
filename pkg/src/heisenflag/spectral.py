"""Joint functional calculus of the grid sub-Laplacian and the central derivative.

On a t-periodic commensurate grid the sub-Laplacian commutes with
t-translations, so a discrete Fourier transform in t splits it into one
Hermitian matrix per t-frequency.  For frequency index m the matrix acts on
the horizontal grid as a magnetic (Peierls) Laplacian: the hop z -> z + e
carries the phase exp(2 pi i m s(z, e) / n_t) where s is the integer t-shift
of the group step.  Diagonalizing every fibre gives Phi(L, lambda) for any
function Phi of the eigenvalue mu and the t-frequency lambda.

Convention: ``lam`` is the angular t-frequency 2 pi m / (n_t dt) of the
Fourier mode exp(i lam t), and ``delta_symbol(lam)`` is the symbol of the
discrete -d^2/dt^2.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .fields import GridField, GridSpec, _t_shift_table, _unit, _z_shift_rows


def spec_hash(spec: GridSpec) -> str:
    return hashlib.sha256(spec.key().encode()).hexdigest()[:16]


def delta_symbol(lam, dt: float):
    """Symbol of the centered second difference: (4/dt^2) sin^2(lam dt / 2)."""
    return 4.0 / dt ** 2 * np.sin(np.asarray(lam) * dt / 2) ** 2


def twisted_matrix(spec: GridSpec, m: int) -> np.ndarray:
    """The fibre of the grid sub-Laplacian at t-frequency index m."""
    n = spec.n_horizontal
    A = np.zeros((n, n), dtype=complex)
    deg = np.zeros(n)
    rows = np.arange(n)
    for ax in range(2 * spec.nu):
        e = _unit(spec, ax)
        for sgn in (1, -1):
            nb, valid = _z_shift_rows(spec, sgn * e)
            s = _t_shift_table(spec, sgn * e)
            phase = np.exp(2j * np.pi * m * s / spec.n_t)
            A[rows[valid], nb[valid]] -= phase[valid]
            deg += valid
    A[rows, rows] += deg
    return A / spec.dz ** 2


@dataclass(frozen=True)
class Multiplier2D:
    """A function m(mu, lam) of the sub-Laplacian eigenvalue and the t-frequency.

    With ``flag=True`` the evaluator is called at (mu / |lam|, lam), which is
    how m(L/|T|, iT) is formed; the lam = 0 fibre is then set to zero.
    """

    fn: Callable
    flag: bool = False
    meta: dict = field(default_factory=dict)

    def __call__(self, mu, lam):
        mu = np.asarray(mu, dtype=float)
        if self.flag:
            if lam == 0:
                return np.zeros(mu.shape, dtype=complex)
            return np.asarray(self.fn(mu / abs(lam), lam), dtype=complex) * np.ones(mu.shape)
        return np.asarray(self.fn(mu, lam), dtype=complex) * np.ones(mu.shape)


class SpectralCalculus:
    """Per-frequency eigendecompositions of the grid sub-Laplacian."""

    def __init__(self, spec: GridSpec, evals: list, evecs: list):
        self.spec = spec
        self.evals = evals
        self.evecs = evecs
        self.lams = 2 * np.pi * np.fft.fftfreq(spec.n_t, d=spec.dt)

    # -- construction ---------------------------------------------------------
    @classmethod
    def build(cls, spec: GridSpec, cache_dir: str | None = None) -> "SpectralCalculus":
        if not spec.t_periodic:
            raise ValueError("the spectral calculus needs a t-periodic grid")
        spec.require_commensurate()
        if spec.n_horizontal > 4096:
            raise ValueError(f"horizontal grid too large for dense eigensolves "
                             f"({spec.n_horizontal} > 4096)")
        evals, evecs = [None] * spec.n_t, [None] * spec.n_t
        for m in range(spec.n_t):
            mneg = (-m) % spec.n_t
            if evals[mneg] is not None and mneg != m:
                # fibre -m is the complex conjugate of fibre m
                evals[m] = evals[mneg]
                evecs[m] = np.conj(evecs[mneg])
                continue
            got = _cache_load(cache_dir, spec, m) if cache_dir else None
            if got is None:
                A = twisted_matrix(spec, m)
                asym = np.max(np.abs(A - A.conj().T))
                if asym > 1e-9 * np.max(np.abs(A)):
                    raise RuntimeError(f"fibre {m} is not Hermitian (asymmetry {asym:g})")
                w, V = np.linalg.eigh(A)
                if cache_dir:
                    _cache_save(cache_dir, spec, m, w, V)
            else:
                w, V = got
            evals[m], evecs[m] = w, V
        return cls(spec, evals, evecs)

    # -- transforms -------------------------------------------------------------
    def forward(self, f: GridField) -> list:
        """Coefficients of f in the joint eigenbasis, one vector per t-mode."""
        self._check(f)
        F = np.fft.fft(f.flat, axis=1) / np.sqrt(self.spec.n_t)
        return [self.evecs[m].conj().T @ F[:, m] for m in range(self.spec.n_t)]

    def inverse(self, coeffs: list, real: bool | None = None) -> GridField:
        F = np.stack([self.evecs[m] @ coeffs[m] for m in range(self.spec.n_t)], axis=1)
        out = np.fft.ifft(F * np.sqrt(self.spec.n_t), axis=1)
        if real:
            out = out.real
        return GridField(self.spec, out.reshape(self.spec.shape))

    def mode_energies(self, f: GridField) -> np.ndarray:
        """|coefficient|^2 summed per t-mode, scaled so the total is ||f||_2^2."""
        c = self.forward(f)
        return np.array([np.sum(np.abs(v) ** 2) for v in c]) * self.spec.cell_volume

    def apply(self, m, f: GridField, real: bool | None = None) -> GridField:
        """Apply the multiplier m(mu, lam) (a callable or :class:`Multiplier2D`)."""
        self._check(f)
        if real is None:
            real = not np.iscomplexobj(f.values)
        F = np.fft.fft(f.flat, axis=1)
        out = np.empty_like(F)
        for k in range(self.spec.n_t):
            vals = np.asarray(m(self.evals[k], self.lams[k]), dtype=complex)
            if np.any(~np.isfinite(vals)):
                raise FloatingPointError(f"multiplier returned non-finite values on mode {k}")
            V = self.evecs[k]
            out[:, k] = V @ (vals * (V.conj().T @ F[:, k]))
        res = np.fft.ifft(out, axis=1)
        if real:
            res = res.real
        return GridField(self.spec, res.reshape(self.spec.shape))

    def coefficients(self, flats: np.ndarray) -> np.ndarray:
        """Unnormalized eigen-coefficients of arrays shaped (..., n_horizontal, n_t)."""
        F = np.fft.fft(np.asarray(flats), axis=-1)
        out = np.empty(F.shape, dtype=complex)
        for k in range(self.spec.n_t):
            out[..., :, k] = F[..., :, k] @ self.evecs[k].conj()
        return out

    def synthesize(self, C: np.ndarray, real: bool = True) -> np.ndarray:
        """Inverse of :meth:`coefficients`; returns arrays shaped like the input."""
        F = np.empty(C.shape, dtype=complex)
        for k in range(self.spec.n_t):
            F[..., :, k] = C[..., :, k] @ self.evecs[k].T
        out = np.fft.ifft(F, axis=-1)
        return out.real if real else out

    def table(self, m) -> np.ndarray:
        """Multiplier values as an (n_horizontal, n_t) array aligned with coefficients."""
        return np.stack([np.broadcast_to(np.asarray(m(self.evals[k], self.lams[k]), dtype=complex),
                                         self.evals[k].shape) for k in range(self.spec.n_t)], axis=1)

    def kernel(self, m, real: bool | None = None) -> GridField:
        """Right-convolution kernel of m: the multiplier applied to the discrete delta."""
        return self.apply(m, GridField.delta(self.spec), real=real)

    def sup_on_spectrum(self, m) -> float:
        return max(float(np.max(np.abs(m(self.evals[k], self.lams[k]))))
                   for k in range(self.spec.n_t))

    def spectrum(self):
        """Arrays (mu, lam, sigma) over all joint eigenpairs."""
        mu = np.concatenate(self.evals)
        lam = np.concatenate([np.full(len(w), l) for w, l in zip(self.evals, self.lams)])
        return mu, lam, delta_symbol(lam, self.spec.dt)

    def _check(self, f: GridField) -> None:
        if f.spec != self.spec:
            raise ValueError("field grid does not match the calculus grid")

    # -- common multipliers -------------------------------------------------------
    def heat(self, r: float, f: GridField) -> GridField:
        return self.apply(lambda mu, lam: np.exp(-r * mu), f)

    def power(self, p: float, f: GridField, tol: float = 1e-10) -> GridField:
        """L^p with the kernel of L mapped to zero for negative p."""
        def fn(mu, lam):
            out = np.zeros_like(mu)
            pos = mu > tol
            out[pos] = mu[pos] ** p
            return out
        return self.apply(fn, f)

    def bulk_weights(self, m: int, inner: float) -> np.ndarray:
        """Fraction of each eigenvector's mass on |z|_inf < inner."""
        zc = self.spec.z_coords()
        sel = np.max(np.abs(zc), axis=1) < inner
        V = self.evecs[m]
        return np.sum(np.abs(V[sel]) ** 2, axis=0)


def build_calculus(spec: GridSpec, cache_dir: str | None = None) -> SpectralCalculus:
    return SpectralCalculus.build(spec, cache_dir)


def apply_multiplier(calc: SpectralCalculus, m, f: GridField) -> GridField:
    return calc.apply(m, f)


# ---------------------------------------------------------------------------
# eigen cache: JSON header line, then eigenvalues (<f8) and eigenvectors (<c16)

def _cache_path(cache_dir: str, spec: GridSpec, m: int) -> str:
    return os.path.join(cache_dir, f"eig_{spec_hash(spec)}_{m:05d}.bin")


def _cache_save(cache_dir: str, spec: GridSpec, m: int, w, V) -> None:
    os.makedirs(cache_dir, exist_ok=True)
    head = {"spec_hash": spec_hash(spec), "lam_index": m, "n": int(w.size)}
    tmp = _cache_path(cache_dir, spec, m) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(head, sort_keys=True).encode() + b"\n")
        fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(V, dtype="<c16").tobytes())
    os.replace(tmp, _cache_path(cache_dir, spec, m))


def _cache_load(cache_dir: str, spec: GridSpec, m: int):
    path = _cache_path(cache_dir, spec, m)
    if not os.path.exists(path):
        return None
    with open(path, "rb") as fh:
        head = json.loads(fh.readline())
        if head.get("spec_hash") != spec_hash(spec) or head.get("lam_index") != m:
            return None
        n = head["n"]
        w = np.frombuffer(fh.read(8 * n), dtype="<f8").copy()
        V = np.frombuffer(fh.read(16 * n * n), dtype="<c16").reshape(n, n).copy()
    return w, V


# ---------------------------------------------------------------------------
# dyadic partitions of unity

def smooth_step(x):
    """C-infinity step: 1 for x <= 1/2, 0 for x >= 1."""
    x = np.asarray(x, dtype=float)
    u = np.clip((1.0 - x) * 2.0, 0.0, 1.0)   # 0 at x = 1, 1 at x = 1/2
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(u > 0, np.exp(-1.0 / np.where(u > 0, u, 1.0)), 0.0)
        b = np.where(u < 1, np.exp(-1.0 / np.where(u < 1, 1.0 - u, 1.0)), 0.0)
    return a / (a + b)


def eta(x):
    """Bump supported in [1/2, 2] with sum_j eta(2^{-j} x) = 1 for x > 0."""
    x = np.abs(np.asarray(x, dtype=float))
    return smooth_step(x / 2) - smooth_step(x)


def eta_sq(x):
    """Bump supported in [1/2, 2] with sum_j eta_sq(2^{-j} x)^2 = 1."""
    return np.sqrt(np.clip(eta(x), 0.0, None))


def dyadic_partition(j_range, squared: bool = False) -> list:
    """The bumps x -> eta(2^{-j} x) for j in j_range (eta_sq when ``squared``)."""
    base = eta_sq if squared else eta
    return [(lambda x, j=j: base(np.asarray(x) * 2.0 ** (-j))) for j in j_range]


def band_levels(lo: float, hi: float) -> range:
    """Dyadic j with the bumps eta(2^{-j} x) covering every x in [lo, hi]."""
    return range(int(np.floor(np.log2(lo))) - 1, int(np.ceil(np.log2(hi))) + 2)


# ---------------------------------------------------------------------------
# the Heisenberg fan

def fan_levels(calc: SpectralCalculus, m: int, n_levels: int = 3, inner: float | None = None,
               min_weight: float = 0.3, rel_gap: float = 0.25):
    """Cluster centres of the bulk eigenvalues of fibre m.

    Edge states of the bounded box pollute the raw spectrum, so only
    eigenvectors with at least ``min_weight`` of their mass on
    |z|_inf < ``inner`` are kept.  They are grouped by gaps larger than
    ``rel_gap`` times the lowest kept eigenvalue and each cluster is
    summarized by its bulk-weighted mean.
    """
    spec = calc.spec
    if inner is None:
        inner = spec.Z / 2
    w = calc.evals[m]
    wt = calc.bulk_weights(m, inner)
    keep = wt > min_weight
    order = np.argsort(w[keep])
    vals, wts = w[keep][order], wt[keep][order]
    if vals.size == 0:
        return np.array([])
    gap = rel_gap * vals[0]
    clusters = [[0]]
    for i in range(1, vals.size):
        if vals[i] - vals[clusters[-1][-1]] > gap:
            if len(clusters) == n_levels:
                break
            clusters.append([i])
        else:
            clusters[-1].append(i)
    return np.array([np.average(vals[c], weights=wts[c]) for c in clusters])


def linear_spacing_defect(levels) -> float:
    """Largest deviation of levels from their least-squares line, relative to its slope."""
    levels = np.asarray(levels, dtype=float)
    d = np.arange(levels.size)
    slope, icpt = np.polyfit(d, levels, 1)
    return float(np.max(np.abs(levels - (icpt + slope * d))) / abs(slope))


# ---------------------------------------------------------------------------
# multiplier pieces, weights, Sobolev norms

def multiplier_piece(calc: SpectralCalculus, m: Multiplier2D, j: int, ell: int,
                     psi1: Callable, psi2: Callable) -> GridField:
    """Kernel of m(L/|T|, iT) psi1(2^{-j} L/|T|) psi2(2^{-ell} T)."""
    def fn(mu, lam):
        if lam == 0:
            return np.zeros_like(mu, dtype=complex)
        x = mu / abs(lam)
        return m.fn(x, lam) * psi1(2.0 ** (-j) * x) * psi2(2.0 ** (-ell) * abs(lam))
    return calc.kernel(fn)


def mrs_weight(j: int, ell: int, eps: float, spec: GridSpec) -> GridField:
    """2^{-nu(j+l)} (1 + 2^{j+l}|z|^2)^{nu(1+eps)} 2^{-l} (1 + 2^l |t|)^{1+eps}."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    nu = spec.nu
    z2 = spec.z_norm2()
    t = np.abs(spec.coordinate(2 * nu))
    w1 = 2.0 ** (-nu * (j + ell)) * (1 + 2.0 ** (j + ell) * z2) ** (nu * (1 + eps))
    w2 = 2.0 ** (-ell) * (1 + 2.0 ** ell * t) ** (1 + eps)
    return GridField(spec, w1 * w2)


def mrs_weight_factors(j: int, ell: int, eps: float, spec: GridSpec):
    nu = spec.nu
    z2 = spec.z_norm2()
    t = np.abs(spec.coordinate(2 * nu))
    w1 = 2.0 ** (-nu * (j + ell)) * (1 + 2.0 ** (j + ell) * z2) ** (nu * (1 + eps))
    w2 = 2.0 ** (-ell) * (1 + 2.0 ** ell * t) ** (1 + eps)
    return GridField(spec, w1), GridField(spec, w2)


def weighted_kernel_norm(K: GridField, w: GridField) -> float:
    if K.spec != w.spec:
        raise ValueError("grid mismatch")
    return float(np.sqrt(np.sum(np.abs(K.values) ** 2 * w.values) * K.spec.cell_volume))


def sobolev_norm(m: Callable, alpha: float, beta: float, n: int = 128,
                 box: tuple = (0.0, 4.0, -4.0, 4.0)) -> float:
    """( int |m_hat(xi)|^2 (1 + |xi1|)^alpha (1 + |xi1| + |xi2|)^beta dxi )^(1/2).

    ``m`` is sampled on an n x n grid over ``box = (x0, x1, y0, y1)`` (it
    should vanish near the box edge) and transformed with the FFT; the
    Fourier transform is taken with the unitary convention.
    """
    x0, x1, y0, y1 = box
    hx, hy = (x1 - x0) / n, (y1 - y0) / n
    X = x0 + hx * np.arange(n)
    Y = y0 + hy * np.arange(n)
    vals = np.asarray(m(X[:, None], Y[None, :]), dtype=complex) * np.ones((n, n))
    mh = np.fft.fft2(vals) * hx * hy / (2 * np.pi)
    xi1 = 2 * np.pi * np.fft.fftfreq(n, d=hx)
    xi2 = 2 * np.pi * np.fft.fftfreq(n, d=hy)
    w = (1 + np.abs(xi1))[:, None] ** alpha * (1 + np.abs(xi1)[:, None] + np.abs(xi2)[None, :]) ** beta
    dxi = (2 * np.pi / (n * hx)) * (2 * np.pi / (n * hy))
    return float(np.sqrt(np.sum(np.abs(mh) ** 2 * w) * dxi))


def off_diagonal_check(calc: SpectralCalculus, eta_piece: Callable, E: np.ndarray, F: np.ndarray,
                       s_order: float, j: int, n_iter: int = 60, seed: int = 0) -> dict:
    """Operator norm of 1_F eta(2^{-j} L) 1_E by power iteration, with the decay bound."""
    from .group import distance_arr
    spec = calc.spec
    E = np.asarray(E, bool).reshape(spec.shape)
    F = np.asarray(F, bool).reshape(spec.shape)
    if np.any(E & F):
        return {"norm": None, "gap": 0.0, "bound": None, "vacuous": True}
    pe = spec.coords()[E]
    pf = spec.coords()[F]
    gap = np.inf
    for chunk in np.array_split(pe, max(1, len(pe) // 256)):
        d = distance_arr(pf[None, :, :], chunk[:, None, :], spec.nu, "koranyi")
        gap = min(gap, float(d.min()))
    if gap <= 0:
        raise ValueError("sets have zero Koranyi gap")

    def op(v):
        u = GridField(spec, np.where(E, v, 0.0))
        u = calc.apply(lambda mu, lam: eta_piece(2.0 ** (-j) * mu), u, real=True)
        return np.where(F, u.values, 0.0)

    def opT(v):
        u = GridField(spec, np.where(F, v, 0.0))
        u = calc.apply(lambda mu, lam: eta_piece(2.0 ** (-j) * mu), u, real=True)
        return np.where(E, u.values, 0.0)

    rng = np.random.default_rng(seed)
    v = np.where(E, rng.normal(size=spec.shape), 0.0)
    v /= np.linalg.norm(v)
    sig = 0.0
    for _ in range(n_iter):
        w = opT(op(v))
        nrm = np.linalg.norm(w)
        if nrm == 0:
            sig = 0.0
            break
        sig = np.sqrt(nrm)
        v = w / nrm
    bound = (2.0 ** (j / 2) * gap) ** (-s_order)
    return {"norm": float(sig), "gap": gap, "bound": float(bound), "vacuous": False}
