"""Sampled functions on a box in H^nu and the grid operations they support.

Grid points are ``x = (i - n_z/2) dz`` on each of the 2 nu horizontal axes and
``t = (k - n_t/2) dt`` on the central axis, with ``dz = 2Z/n_z`` and
``dt = 2T/n_t``.  Arrays are stored with axes ordered x_1..x_nu, y_1..y_nu, t,
so t is the fastest-varying index in row-major layout.

When ``m_c = 4 nu dz^2 / dt`` is a positive integer the grid is *commensurate*:
right translation by a lattice element (dz * integer vector, dt * integer)
maps grid points to grid points, with the symplectic term producing an integer
shift of the t index.  All group-structured stencils and convolutions below
rely on this and are therefore exact up to floating point.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field, replace
from functools import cached_property, lru_cache
from typing import Iterable

import numpy as np
from scipy import ndimage, signal

from .group import HPoint

FORMAT_VERSION = 1


@dataclass(frozen=True)
class GridSpec:
    nu: int = 1
    Z: float = 2.0
    T: float = 8.0
    n_z: int = 16
    n_t: int = 64
    t_periodic: bool = True

    def __post_init__(self):
        if int(self.nu) != self.nu or self.nu < 1:
            raise ValueError("nu must be a positive integer")
        for name in ("n_z", "n_t"):
            n = getattr(self, name)
            if int(n) != n or n < 4 or n % 2:
                raise ValueError(f"{name} must be an even integer >= 4, got {n!r}")
        if not (self.Z > 0 and self.T > 0):
            raise ValueError("half extents must be positive")
        object.__setattr__(self, "nu", int(self.nu))
        object.__setattr__(self, "n_z", int(self.n_z))
        object.__setattr__(self, "n_t", int(self.n_t))
        object.__setattr__(self, "Z", float(self.Z))
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "t_periodic", bool(self.t_periodic))

    # -- geometry ---------------------------------------------------------
    @property
    def dz(self) -> float:
        return 2.0 * self.Z / self.n_z

    @property
    def dt(self) -> float:
        return 2.0 * self.T / self.n_t

    @property
    def D(self) -> int:
        return 2 * self.nu + 2

    @property
    def cell_volume(self) -> float:
        return self.dz ** (2 * self.nu) * self.dt

    @property
    def shape(self) -> tuple:
        return (self.n_z,) * (2 * self.nu) + (self.n_t,)

    @property
    def n_horizontal(self) -> int:
        """Number of horizontal grid points n_z^(2 nu)."""
        return self.n_z ** (2 * self.nu)

    @property
    def size(self) -> int:
        return self.n_horizontal * self.n_t

    @property
    def shift_ratio(self) -> float:
        """m_c = 4 nu dz^2 / dt, the t-index shift per unit of integer symplectic form."""
        return 4.0 * self.nu * self.dz ** 2 / self.dt

    @property
    def is_commensurate(self) -> bool:
        m = self.shift_ratio
        return m >= 1 - 1e-12 and abs(m - round(m)) < 1e-9

    def require_commensurate(self) -> int:
        if not self.is_commensurate:
            raise ValueError(
                f"grid is not commensurate: 4*nu*dz^2/dt = {self.shift_ratio!r} must be a "
                "positive integer for exact lattice translations")
        return int(round(self.shift_ratio))

    def axis_z(self) -> np.ndarray:
        return (np.arange(self.n_z) - self.n_z // 2) * self.dz

    def axis_t(self) -> np.ndarray:
        return (np.arange(self.n_t) - self.n_t // 2) * self.dt

    @cached_property
    def z_index(self) -> np.ndarray:
        """Centered integer horizontal indices, shape (n_horizontal, 2 nu)."""
        grids = np.meshgrid(*([np.arange(self.n_z) - self.n_z // 2] * (2 * self.nu)), indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1)

    def z_coords(self) -> np.ndarray:
        return self.z_index * self.dz

    def coords(self) -> np.ndarray:
        """All grid points as an array of shape spec.shape + (2 nu + 1,)."""
        axes = [self.axis_z()] * (2 * self.nu) + [self.axis_t()]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def coordinate(self, axis: int) -> np.ndarray:
        """The coordinate function along ``axis`` broadcast to the full shape."""
        ax = self.axis_t() if axis == 2 * self.nu else self.axis_z()
        shp = [1] * (2 * self.nu + 1)
        shp[axis] = ax.size
        return np.broadcast_to(ax.reshape(shp), self.shape).copy()

    def z_norm2(self) -> np.ndarray:
        """|z|^2 broadcast to the full shape."""
        r2 = np.sum(self.z_coords() ** 2, axis=-1).reshape((self.n_z,) * (2 * self.nu) + (1,))
        return np.broadcast_to(r2, self.shape).copy()

    def origin_index(self) -> tuple:
        return (self.n_z // 2,) * (2 * self.nu) + (self.n_t // 2,)

    def to_header(self) -> dict:
        return {"nu": self.nu, "Z": self.Z, "T": self.T, "n_z": self.n_z,
                "n_t": self.n_t, "t_periodic": self.t_periodic}

    def with_(self, **kw) -> "GridSpec":
        return replace(self, **kw)

    def key(self) -> str:
        return json.dumps(self.to_header(), sort_keys=True)


@dataclass(frozen=True, eq=False)
class GridField:
    """A sampled real or complex function on a :class:`GridSpec`."""

    spec: GridSpec
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.dtype.kind not in "fc":
            v = v.astype(float)
        if v.shape != self.spec.shape:
            if v.size == self.spec.size:
                v = v.reshape(self.spec.shape)
            else:
                raise ValueError(f"values shape {v.shape} does not match grid {self.spec.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")
        v = np.array(v, copy=True)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, spec: GridSpec, dtype=float) -> "GridField":
        return cls(spec, np.zeros(spec.shape, dtype=dtype))

    @classmethod
    def from_function(cls, spec: GridSpec, fn) -> "GridField":
        """Sample ``fn(coords)`` where coords has trailing axis (x.., y.., t)."""
        return cls(spec, fn(spec.coords()))

    @classmethod
    def delta(cls, spec: GridSpec) -> "GridField":
        """Discrete unit mass at the origin (value 1/cell_volume)."""
        v = np.zeros(spec.shape)
        v[spec.origin_index()] = 1.0 / spec.cell_volume
        return cls(spec, v)

    @property
    def flat(self) -> np.ndarray:
        """Values reshaped to (n_horizontal, n_t)."""
        return self.values.reshape(self.spec.n_horizontal, self.spec.n_t)

    def like(self, values) -> "GridField":
        return GridField(self.spec, np.asarray(values).reshape(self.spec.shape))

    def __add__(self, other):
        return self.like(self.values + _vals(other, self.spec))

    def __sub__(self, other):
        return self.like(self.values - _vals(other, self.spec))

    def __mul__(self, c):
        if isinstance(c, GridField):
            return self.like(self.values * _vals(c, self.spec))
        return self.like(self.values * c)

    __rmul__ = __mul__

    def __neg__(self):
        return self.like(-self.values)

    def integral(self) -> complex | float:
        return np.sum(self.values) * self.spec.cell_volume

    def real(self) -> "GridField":
        return self.like(self.values.real)

    def abs(self) -> "GridField":
        return self.like(np.abs(self.values))


def _vals(other, spec) -> np.ndarray:
    if isinstance(other, GridField):
        if other.spec != spec:
            raise ValueError("grid specs differ")
        return other.values
    return np.asarray(other)


def _check_same(f: GridField, g: GridField) -> None:
    if f.spec != g.spec:
        raise ValueError(f"grid specs differ: {f.spec} vs {g.spec}")


@dataclass(frozen=True, eq=False)
class Line:
    """Samples of a function on the real line at ``(k - n/2) * (2 half_extent / n)``."""

    half_extent: float
    n: int
    values: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.n % 2 or self.n < 2:
            raise ValueError("Line needs an even number of samples")
        v = np.zeros(self.n) if self.values is None else np.asarray(self.values)
        if v.shape != (self.n,):
            raise ValueError("values length mismatch")
        if not np.all(np.isfinite(v)):
            raise ValueError("values must be finite")
        v = np.array(v, copy=True)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def dt(self) -> float:
        return 2.0 * self.half_extent / self.n

    def axis(self) -> np.ndarray:
        return (np.arange(self.n) - self.n // 2) * self.dt

    @classmethod
    def for_spec(cls, spec: GridSpec, fn=None) -> "Line":
        ln = cls(spec.T, spec.n_t)
        if fn is None:
            return ln
        return cls(spec.T, spec.n_t, fn(ln.axis()))

    def integral(self) -> float:
        return np.sum(self.values) * self.dt


# ---------------------------------------------------------------------------
# exact lattice translations

def _t_shift_table(spec: GridSpec, ia: np.ndarray) -> np.ndarray:
    """t-index shift m_c * sigma(z, a) for every horizontal grid point z."""
    m_c = spec.require_commensurate()
    nu = spec.nu
    iz = spec.z_index
    sig = iz[:, nu:] @ ia[:nu] - iz[:, :nu] @ ia[nu:]
    return m_c * sig


def _z_shift_rows(spec: GridSpec, ia: np.ndarray):
    """Row index of z + a for every z, plus a validity mask."""
    n = spec.n_z
    idx = spec.z_index + ia + n // 2
    valid = np.all((idx >= 0) & (idx < n), axis=1)
    idx = np.clip(idx, 0, n - 1)
    rows = np.ravel_multi_index(tuple(idx.T), (n,) * (2 * spec.nu))
    return rows, valid


@lru_cache(maxsize=8192)
def _shift_index(spec: GridSpec, ia: tuple, kb: int):
    """Flat gather index of g . h for every grid point g, and the in-box mask (None if all in)."""
    rows, valid = _z_shift_rows(spec, np.asarray(ia, dtype=int))
    tshift = _t_shift_table(spec, np.asarray(ia, dtype=int)) + kb
    k = np.arange(spec.n_t)[None, :] + tshift[:, None]
    if spec.t_periodic:
        k = np.mod(k, spec.n_t)
        tvalid = np.ones_like(k, dtype=bool)
    else:
        tvalid = (k >= 0) & (k < spec.n_t)
        k = np.clip(k, 0, spec.n_t - 1)
    lin = (rows[:, None] * spec.n_t + k).ravel()
    ok = (valid[:, None] & tvalid).ravel()
    lin.setflags(write=False)
    ok.setflags(write=False)
    return lin, (None if ok.all() else ok)


def right_shift_array(spec: GridSpec, flat: np.ndarray, ia, kb: int = 0, fill=0.0) -> np.ndarray:
    """Return F with F(g) = f(g . h) for the lattice element h = (ia*dz, kb*dt).

    ``flat`` has shape (n_horizontal, n_t, ...).  Points leaving the box read
    ``fill`` except along a periodic t axis, which wraps.
    """
    lin, ok = _shift_index(spec, tuple(int(v) for v in np.ravel(ia)), int(kb))
    rest = flat.shape[2:]
    out = np.take(flat.reshape((-1,) + rest), lin, axis=0)
    if ok is not None:
        out = np.where(ok.reshape(ok.shape + (1,) * len(rest)), out, fill)
    return out.reshape(flat.shape[:2] + rest)


def right_translate(f: GridField, ia, kb: int = 0) -> GridField:
    """f(. h) for a lattice element h, zero outside the box."""
    return f.like(right_shift_array(f.spec, f.flat, ia, kb))


def lattice_point(spec: GridSpec, ia, kb: int = 0) -> HPoint:
    ia = np.asarray(ia, dtype=float) * spec.dz
    return HPoint(tuple(ia[:spec.nu]), tuple(ia[spec.nu:]), kb * spec.dt)


# ---------------------------------------------------------------------------
# convolutions

def conv1(f: GridField, k: GridField, method: str = "auto") -> GridField:
    """Group convolution (f *1 k)(g) = sum_{g1} f(g1) k(g1^{-1} g) * cell_volume.

    ``method`` is "direct" (gather over the support of k) or "fft" (per
    t-frequency twisted convolution); both are exact on a commensurate grid.
    """
    _check_same(f, k)
    spec = f.spec
    spec.require_commensurate()
    if method == "auto":
        method = "fft"
    if method == "direct":
        return _conv1_direct(f, k)
    if method == "fft":
        return _conv1_fft(f, k)
    raise ValueError(f"unknown method {method!r}")


def _conv1_direct(f: GridField, k: GridField) -> GridField:
    spec = f.spec
    kf = k.flat
    dtype = np.result_type(f.values, k.values)
    out = np.zeros((spec.n_horizontal, spec.n_t), dtype=dtype)
    rows, cols = np.nonzero(kf)
    ff = f.flat.astype(dtype)
    for r, c in zip(rows, cols):
        ia = spec.z_index[r]
        kb = c - spec.n_t // 2
        # (f *1 k)(g) = sum_h f(g h^{-1}) k(h)
        out += kf[r, c] * right_shift_array(spec, ff, -ia, -kb)
    return f.like(out * spec.cell_volume)


def _conv1_fft(f: GridField, k: GridField) -> GridField:
    spec = f.spec
    m_c = spec.require_commensurate()
    nu, n_t, nz = spec.nu, spec.n_t, spec.n_z
    iz = spec.z_index
    # sigma(z1, z) for all pairs; c(z,t) = sum f(z1,t1) k(z - z1, t - t1 - m_c sigma(z1,z))
    sig = iz[:, None, nu:] * iz[None, :, :nu] - iz[:, None, :nu] * iz[None, :, nu:]
    sig = m_c * sig.sum(-1)                      # [z1, z]
    diff = iz[None, :, :] - iz[:, None, :]       # z - z1, [z1, z]
    inside = np.all((diff + nz // 2 >= 0) & (diff + nz // 2 < nz), axis=-1)
    drow = np.ravel_multi_index(tuple(np.clip(diff + nz // 2, 0, nz - 1).transpose(2, 0, 1)),
                                (nz,) * (2 * nu))
    if spec.t_periodic:
        L = n_t
    else:
        smax = int(np.max(np.abs(sig))) if sig.size else 0
        L = int(2 ** np.ceil(np.log2(2 * n_t + smax + 1)))
    # place the centered t origin at index 0 of the transform
    fpad = np.zeros((spec.n_horizontal, L), dtype=complex)
    kpad = np.zeros((spec.n_horizontal, L), dtype=complex)
    kidx = (np.arange(n_t) - n_t // 2) % L
    fpad[:, kidx] = f.flat
    kpad[:, kidx] = k.flat
    F = np.fft.fft(fpad, axis=1)
    K = np.fft.fft(kpad, axis=1)
    C = np.empty_like(F)
    for m in range(L):
        phase = np.exp(-2j * np.pi * m * sig / L)
        P = np.where(inside, K[drow, m] * phase, 0.0)   # [z1, z]
        C[:, m] = F[:, m] @ P
    c = np.fft.ifft(C, axis=1)[:, kidx]
    if not (np.iscomplexobj(f.values) or np.iscomplexobj(k.values)):
        c = c.real
    return f.like(c * spec.cell_volume)


def conv2(f: GridField, k: Line) -> GridField:
    """Central convolution (f *2 k)(z,t) = sum_u f(z, t - u) k(u) dt."""
    spec = f.spec
    if abs(k.dt - spec.dt) > 1e-12 * spec.dt:
        raise ValueError(f"line spacing {k.dt} differs from grid dt {spec.dt}")
    return f.like(_conv_t(f.flat, k.values, spec.t_periodic) * spec.dt)


def _conv_t(flat: np.ndarray, kern: np.ndarray, periodic: bool) -> np.ndarray:
    n_t = flat.shape[1]
    nk = kern.size
    c0 = nk // 2
    if periodic:
        kk = np.zeros(n_t, dtype=kern.dtype)
        idx = (np.arange(nk) - c0) % n_t
        np.add.at(kk, idx, kern)
        out = np.fft.ifft(np.fft.fft(flat, axis=1) * np.fft.fft(kk)[None, :], axis=1)
        if not (np.iscomplexobj(flat) or np.iscomplexobj(kern)):
            out = out.real
        return out
    full = signal.fftconvolve(flat, kern[None, :], mode="full", axes=1)
    return full[:, c0:c0 + n_t]


# ---------------------------------------------------------------------------
# derivatives

def _unit(spec: GridSpec, axis: int) -> np.ndarray:
    e = np.zeros(2 * spec.nu, dtype=int)
    e[axis] = 1
    return e


def interior_mask(spec: GridSpec, width: int = 1) -> np.ndarray:
    """Points whose group neighbourhood of the given stencil width stays in the box."""
    ok = np.ones((spec.n_horizontal, spec.n_t), dtype=bool)
    ones = np.ones((spec.n_horizontal, spec.n_t))
    for ax in range(2 * spec.nu):
        for w in range(1, width + 1):
            for sgn in (1, -1):
                ok &= right_shift_array(spec, ones, sgn * w * _unit(spec, ax)) > 0
    if not spec.t_periodic:
        ok[:, :width] = False
        ok[:, spec.n_t - width:] = False
    return ok.reshape(spec.shape)


def vector_field(f: GridField, which: str) -> GridField:
    """Centered differences along the left-invariant fields X_j, Y_j or T.

    ``which`` is "X1".."Xnu", "Y1".."Ynu" or "T".  X_j f(g) is approximated by
    (f(g h) - f(g h^{-1})) / (2 dz) with h = exp(dz X_j), which is second order
    accurate; values needing samples outside the box use zero extension (see
    :func:`interior_mask`).
    """
    spec = f.spec
    if which == "T":
        v = f.flat
        if spec.t_periodic:
            d = (np.roll(v, -1, axis=1) - np.roll(v, 1, axis=1)) / (2 * spec.dt)
        else:
            p = np.pad(v, ((0, 0), (1, 1)))
            d = (p[:, 2:] - p[:, :-2]) / (2 * spec.dt)
        return f.like(d)
    axis = _field_axis(spec, which)
    e = _unit(spec, axis)
    fp = right_shift_array(spec, f.flat, e)
    fm = right_shift_array(spec, f.flat, -e)
    return f.like((fp - fm) / (2 * spec.dz))


def _field_axis(spec: GridSpec, which: str) -> int:
    kind, j = which[0].upper(), int(which[1:])
    if not 1 <= j <= spec.nu or kind not in "XY":
        raise ValueError(f"unknown vector field {which!r}")
    return j - 1 if kind == "X" else spec.nu + j - 1


def sublaplacian(f: GridField) -> GridField:
    """Graph sub-Laplacian built from the steps exp(+-dz X_j), exp(+-dz Y_j).

    Lf(g) = sum over neighbours g h inside the box of (f(g) - f(g h)) / dz^2.
    Neighbours outside the box are dropped (free boundary), so the operator
    is symmetric positive semidefinite, kills constants and conserves mass.
    In the interior it is the centered second difference of -sum X_j^2.
    """
    spec = f.spec
    v = f.flat
    out = np.zeros_like(v, dtype=np.result_type(v, float))
    for ax in range(2 * spec.nu):
        e = _unit(spec, ax)
        for sgn in (1, -1):
            nb = right_shift_array(spec, v, sgn * e)
            ok = right_shift_array(spec, np.ones(v.shape), sgn * e) > 0
            out += np.where(ok, v - nb, 0.0)
    return f.like(out / spec.dz ** 2)


_LAP_CACHE: dict = {}


def laplacian_matrix(spec: GridSpec):
    """Sparse matrix of :func:`sublaplacian` acting on values flattened row-major."""
    from scipy import sparse
    key = spec
    if key in _LAP_CACHE:
        return _LAP_CACHE[key]
    n = spec.size
    idx = np.arange(n).reshape(spec.n_horizontal, spec.n_t)
    rows, cols = [], []
    deg = np.zeros(n)
    for ax in range(2 * spec.nu):
        e = _unit(spec, ax)
        for sgn in (1, -1):
            nb = right_shift_array(spec, idx, sgn * e, fill=-1).ravel()
            ok = nb >= 0
            rows.append(np.nonzero(ok)[0])
            cols.append(nb[ok])
            deg += ok
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    A = sparse.csr_matrix((-np.ones(rows.size), (rows, cols)), shape=(n, n))
    A = (A + sparse.diags(deg)) / spec.dz ** 2
    _LAP_CACHE[key] = A.tocsr()
    return _LAP_CACHE[key]


def central_second_difference(f: GridField) -> GridField:
    """Discrete -d^2/dt^2 (periodic or with zero extension)."""
    spec = f.spec
    v = f.flat
    if spec.t_periodic:
        d = 2 * v - np.roll(v, 1, axis=1) - np.roll(v, -1, axis=1)
    else:
        p = np.pad(v, ((0, 0), (1, 1)))
        d = 2 * v - p[:, :-2] - p[:, 2:]
    return f.like(d / spec.dt ** 2)


def lp_norm(f: GridField, p: float = 2) -> float:
    a = np.abs(f.values).ravel()
    if p == np.inf or p == "inf":
        return float(a.max(initial=0.0))
    if p < 1:
        raise ValueError("p must be >= 1")
    return float((np.sum(a ** p) * f.spec.cell_volume) ** (1.0 / p))


def inner(f: GridField, g: GridField) -> complex:
    _check_same(f, g)
    return np.vdot(g.values.ravel(), f.values.ravel()) * f.spec.cell_volume


# ---------------------------------------------------------------------------
# resampling

def _interp(f: GridField, pts: np.ndarray) -> np.ndarray:
    spec = f.spec
    nu = spec.nu
    idx = np.empty_like(pts)
    idx[..., :2 * nu] = pts[..., :2 * nu] / spec.dz + spec.n_z // 2
    idx[..., 2 * nu] = pts[..., 2 * nu] / spec.dt + spec.n_t // 2
    vals = f.values
    if spec.t_periodic:
        idx[..., 2 * nu] = np.mod(idx[..., 2 * nu], spec.n_t)
        vals = np.concatenate([vals, vals[..., :1]], axis=-1)
    coords = np.moveaxis(idx, -1, 0)

    def run(v):
        return ndimage.map_coordinates(v, coords, order=1, mode="constant", cval=0.0)

    if np.iscomplexobj(vals):
        return run(vals.real) + 1j * run(vals.imag)
    return run(vals)


def translate_field(f: GridField, g: HPoint) -> GridField:
    """Left translate: (g f)(g') = f(g^{-1} g'), by multilinear interpolation."""
    from .group import inv_arr, mul_arr
    nu = f.spec.nu
    pts = mul_arr(inv_arr(g.to_array()), f.spec.coords(), nu)
    return f.like(_interp(f, pts))


def dilate_field(f: GridField, r: float, normalized: bool = False) -> GridField:
    """f o delta_{1/r}, times r^{-D} when ``normalized`` (which preserves L^1)."""
    from .group import dilate_arr
    if not r > 0:
        raise ValueError("r must be positive")
    pts = dilate_arr(f.spec.coords(), 1.0 / r, f.spec.nu)
    out = _interp(f, pts)
    if normalized:
        out = out * r ** (-f.spec.D)
    return f.like(out)


# ---------------------------------------------------------------------------
# tube averages and maxima
#
# T(g, r, s) = g . B1(o, r) . B2(0, s) = {g . (a, b) : |a|_inf < r, |b| < r^2 + s}.

def half_width(step: float, radius: float) -> int:
    """Largest integer k with k * step < radius (at least 0)."""
    if radius <= 0:
        return 0
    return max(int(np.ceil(radius / step - 1e-9)) - 1, 0)


def t_window(flat: np.ndarray, K: int, periodic: bool, reduce: str = "sum") -> np.ndarray:
    """Sum or max of ``flat`` over t-offsets |b| <= K (zero outside unless periodic)."""
    if K <= 0:
        return flat.copy()
    n_t = flat.shape[1]
    if reduce == "max":
        if periodic and 2 * K + 1 >= n_t:
            return np.repeat(flat.max(axis=1, keepdims=True), n_t, axis=1)
        mode = "wrap" if periodic else "constant"
        return ndimage.maximum_filter1d(flat, size=2 * K + 1, axis=1, mode=mode, cval=-np.inf)
    if periodic:
        if 2 * K + 1 > n_t:
            # window wraps more than once: circular convolution with offset counts
            counts = np.zeros(n_t)
            np.add.at(counts, np.arange(-K, K + 1) % n_t, 1.0)
            out = np.fft.ifft(np.fft.fft(flat, axis=1) * np.fft.fft(counts)[None, :], axis=1)
            return out if np.iscomplexobj(flat) else out.real
        ext = np.concatenate([flat[:, -K:], flat, flat[:, :K]], axis=1)
    else:
        ext = np.pad(flat, ((0, 0), (K, K)))
    cs = np.concatenate([np.zeros((flat.shape[0], 1), dtype=ext.dtype), np.cumsum(ext, axis=1)], axis=1)
    return cs[:, 2 * K + 1:2 * K + 1 + n_t] - cs[:, :n_t]


def z_offsets(spec: GridSpec, A: int) -> np.ndarray:
    rng = np.arange(-A, A + 1)
    grids = np.meshgrid(*([rng] * (2 * spec.nu)), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=-1)


def tube_reduce(flat: np.ndarray, spec: GridSpec, r: float, s: float, reduce: str = "mean",
                beta: float = 1.0) -> np.ndarray:
    """Mean or max of |values| over the tubes T(g, beta r, beta^2 s) for every grid g.

    ``flat`` has shape (n_horizontal, n_t) and should be nonnegative for
    "max".  The mean is taken over the tube samples that lie in the box.
    """
    A = half_width(spec.dz, beta * r)
    K = half_width(spec.dt, (beta * r) ** 2 + beta ** 2 * s)
    red = "max" if reduce == "max" else "sum"
    W = t_window(flat, K, spec.t_periodic, red)
    if reduce == "max":
        acc = None
        for ia in z_offsets(spec, A):
            piece = right_shift_array(spec, W, ia, fill=-np.inf)
            acc = piece if acc is None else np.maximum(acc, piece)
        return acc
    # sums and sample counts shifted together
    C = t_window(np.ones(flat.shape, dtype=float), K, spec.t_periodic, "sum")
    both = np.stack([W, C.astype(W.dtype)], axis=-1)
    acc = np.zeros_like(both)
    for ia in z_offsets(spec, A):
        acc += right_shift_array(spec, both, ia)
    return acc[..., 0] / np.maximum(acc[..., 1].real, 1)


def tube_sample_count(spec: GridSpec, r: float, s: float) -> int:
    A = half_width(spec.dz, r)
    K = half_width(spec.dt, r * r + s)
    return (2 * A + 1) ** (2 * spec.nu) * (2 * K + 1)


# ---------------------------------------------------------------------------
# .hfld files

def write_hfld(f: GridField, path_or_buf) -> None:
    spec = f.spec
    cplx = np.iscomplexobj(f.values)
    header = {"version": FORMAT_VERSION, **spec.to_header(),
              "dtype": "c128" if cplx else "f64", "layout": "t-fastest"}
    payload = np.ascontiguousarray(f.values, dtype="<c16" if cplx else "<f8").tobytes()
    data = json.dumps(header, sort_keys=True).encode("utf-8") + b"\n" + payload
    if isinstance(path_or_buf, (io.IOBase,)) or hasattr(path_or_buf, "write"):
        path_or_buf.write(data)
    else:
        with open(path_or_buf, "wb") as fh:
            fh.write(data)


def read_hfld(path_or_buf) -> GridField:
    if hasattr(path_or_buf, "read"):
        data = path_or_buf.read()
    else:
        with open(path_or_buf, "rb") as fh:
            data = fh.read()
    nl = data.index(b"\n")
    header = json.loads(data[:nl].decode("utf-8"))
    if header.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported field file version {header.get('version')!r}")
    if header.get("layout") != "t-fastest":
        raise ValueError("unsupported layout")
    spec = GridSpec(header["nu"], header["Z"], header["T"], header["n_z"], header["n_t"],
                    header["t_periodic"])
    dt = {"c128": "<c16", "f64": "<f8"}[header["dtype"]]
    vals = np.frombuffer(data[nl + 1:], dtype=dt)
    if vals.size != spec.size:
        raise ValueError("payload size does not match header")
    return GridField(spec, vals.reshape(spec.shape))


def read_hfld_header(path) -> dict:
    with open(path, "rb") as fh:
        return json.loads(fh.readline().decode("utf-8"))


def gridset_mask(spec: GridSpec, pred: Iterable | np.ndarray) -> np.ndarray:
    m = np.asarray(pred, dtype=bool)
    if m.size != spec.size:
        raise ValueError("mask size mismatch")
    return m.reshape(spec.shape)


def origin_component(spec: GridSpec) -> np.ndarray:
    """Grid points reachable from the origin by the horizontal steps exp(+-dz X_j), exp(+-dz Y_j).

    These steps generate a subgroup of index 2 m_c in the grid lattice, so
    kernels of functions of the sub-Laplacian alone live on this mask.
    """
    from scipy.sparse.csgraph import connected_components
    A = laplacian_matrix(spec)
    _, labels = connected_components(A, directed=False)
    o = np.ravel_multi_index(spec.origin_index(), spec.shape)
    return (labels == labels[o]).reshape(spec.shape)
