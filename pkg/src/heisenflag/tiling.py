"""Self-similar tiles of H^nu, adapted rectangles, tubes and the Journe sum.

The basic tile is T_o = {(z, t) : z in Q_0, f(z) - 1/(2 nu) <= t < f(z)} with
Q_0 = [-1/2, 1/2)^{2 nu}.  Writing N = 2 nu + 1, the subdivision rule
delta_N(T_o) = union of d . T_o over the digits d forces

    N^2 f(z) = nu + 1 + S(a, N z) + f(N z - a),   a = round(N z),

so f is the sum of the series  sum_k N^{-2(k+1)} (nu + 1 + S(a_k, z_{k+1}))
with z_0 = z, a_k = round(N z_k), z_{k+1} = N z_k - a_k.  Every term is
bounded, which gives rigorous brackets for truncations.

Level-j tiles are delta_{N^j} of level-0 tiles, and level-0 tiles are the
lattice translates gamma . T_o with gamma in Z^{2 nu} x (1/(2 nu)) Z.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from .fields import GridSpec, half_width, tube_reduce
from .group import HPoint, dilate_arr, inv_arr, mul_arr, symplectic


class TileConvergenceError(RuntimeError):
    def __init__(self, message, bracket):
        super().__init__(message)
        self.bracket = bracket


def _base(nu: int) -> int:
    return 2 * nu + 1


def _term_bound(nu: int) -> float:
    # |a_k|_inf <= nu and |z_{k+1}|_inf <= 1/2, so |S| <= 4 nu * 2 nu * nu / 2
    return nu + 1 + 4.0 * nu ** 3


def _round_half_up(w):
    return np.floor(w + 0.5)


def tile_height_series(u: np.ndarray, nu: int, n_terms: int = 40):
    """Vectorized partial sums of the tile function.

    ``u`` has shape (..., 2 nu) with entries in [-1/2, 1/2).  Returns
    ``(f, tail, face_dist)`` where ``tail`` bounds the truncation error and
    ``face_dist[..., k]`` is the distance from u to the nearest point where
    the k-th digit changes.
    """
    u = np.asarray(u, dtype=float)
    N = _base(nu)
    f = np.zeros(u.shape[:-1])
    zk = u.copy()
    face = np.empty(u.shape[:-1] + (n_terms,))
    for k in range(n_terms):
        w = N * zk
        a = _round_half_up(w)
        znext = w - a
        s = symplectic(a[..., :nu], a[..., nu:], znext[..., :nu], znext[..., nu:], nu)
        f += N ** (-2.0 * (k + 1)) * (nu + 1 + s)
        face[..., k] = np.min(0.5 - np.abs(znext), axis=-1) / N ** (k + 1)
        zk = znext
    tail = _term_bound(nu) * N ** (-2.0 * (n_terms + 1)) / (1 - N ** -2.0)
    return f, tail, face


def tile_height_fn(z: Sequence[float], tol: float = 1e-12, nu: int | None = None,
                   max_terms: int = 200) -> float:
    """Value of the tile function at z in Q_0, accurate to ``tol``.

    Terms of the series are added until the rigorous bracket around the
    partial sum is narrower than ``tol``.  Results are memoized on the exact
    input (the function is discontinuous, so quantized keys would be unsafe).
    """
    z = tuple(float(v) for v in np.ravel(z))
    if nu is None:
        nu = len(z) // 2
    if len(z) != 2 * nu:
        raise ValueError("z must have 2 nu coordinates")
    if not tol > 0:
        raise ValueError("tol must be positive")
    if any(v < -0.5 or v >= 0.5 for v in z):
        raise ValueError("z must lie in the base cube [-1/2, 1/2)^{2 nu}")
    return _tile_height_cached(z, float(tol), int(nu), int(max_terms))


@lru_cache(maxsize=65536)
def _tile_height_cached(z: tuple, tol: float, nu: int, max_terms: int) -> float:
    N = _base(nu)
    B = _term_bound(nu)
    zk = np.array(z)
    f = 0.0
    for k in range(max_terms):
        w = N * zk
        a = _round_half_up(w)
        znext = w - a
        s = float(symplectic(a[:nu], a[nu:], znext[:nu], znext[nu:], nu))
        f += N ** (-2.0 * (k + 1)) * (nu + 1 + s)
        zk = znext
        tail = B * N ** (-2.0 * (k + 2)) / (1 - N ** -2.0)
        if 2 * tail < tol:
            return f
    raise TileConvergenceError("tile function did not converge", (f - tail, f + tail))


def tile_height_bracket(nu: int) -> tuple:
    """The bracket [1/(4nu(nu+1)), (2nu+1)/(4nu(nu+1))] quoted for f in the literature."""
    return 1.0 / (4 * nu * (nu + 1)), (2 * nu + 1) / (4 * nu * (nu + 1))


# ---------------------------------------------------------------------------
# tiles

@dataclass(frozen=True)
class TileId:
    """A tile of level j: delta_{N^j}(gamma . T_o) with gamma = (a, k / (2 nu))."""

    level: int
    a: tuple          # integer horizontal lattice coordinates of gamma
    k: int            # gamma.t = k / (2 nu)

    @property
    def nu(self) -> int:
        return len(self.a) // 2

    @property
    def width(self) -> float:
        return float(_base(self.nu) ** self.level)

    @property
    def height(self) -> float:
        return _base(self.nu) ** (2.0 * self.level) / (2 * self.nu)

    @property
    def lattice(self) -> HPoint:
        """cent(T) = delta_{N^j}(gamma)."""
        nu = self.nu
        q = self.width
        a = np.asarray(self.a, dtype=float) * q
        return HPoint(tuple(a[:nu]), tuple(a[nu:]), self.k / (2 * nu) * q * q)

    center = lattice


BOUNDARY = None


@dataclass(frozen=True)
class Boundary:
    """Marker for points within tolerance of a tile boundary."""

    level: int


def _locate_level0(p: np.ndarray, nu: int, tol: float, n_terms: int = 40):
    z = p[..., :2 * nu]
    t = p[..., 2 * nu]
    a = _round_half_up(z)
    u = z - a
    f, tail, face = tile_height_series(u, nu, n_terms)
    S = symplectic(a[..., :nu], a[..., nu:], u[..., :nu], u[..., nu:], nu)
    x = 2 * nu * (t - S - f)
    k = np.floor(x) + 1
    # uncertainty of x under perturbations of size tol in every coordinate
    N = _base(nu)
    B = _term_bound(nu)
    lip = 1.0 + 8.0 * nu ** 3 + 8.0 * nu ** 3 / (N - 1) + 4.0 * nu * np.max(np.abs(a), axis=-1) * 2 * nu
    u_face = np.min(0.5 - np.abs(u), axis=-1)
    u_face = np.minimum(u_face, np.min(u + 0.5, axis=-1))
    near = face < tol
    first = np.where(near.any(axis=-1), near.argmax(axis=-1), n_terms)
    jump = 2 * B * N ** (-2.0 * (first + 1)) / (1 - N ** -2.0)
    margin = 2 * nu * (lip * tol + jump + tail)
    xfrac = np.abs(x - np.round(x))
    boundary = (xfrac <= margin) | (u_face < tol)
    return a.astype(np.int64), k.astype(np.int64), boundary


def tile_locate_arr(points: np.ndarray, j: int, nu: int, tol: float = 1e-9):
    """Vectorized tile location.

    Returns integer arrays (a, k) describing delta_{N^j}((a, k/(2nu)) . T_o)
    and a boolean boundary mask.  ``tol`` is measured in units of the level-j
    tile width.
    """
    N = _base(nu)
    p = dilate_arr(np.asarray(points, dtype=float), float(N) ** (-j), nu)
    return _locate_level0(p, nu, tol)


def tile_locate(g: HPoint, j: int, tol: float = 1e-9) -> TileId | Boundary:
    """The tile of level j containing g, or :class:`Boundary` near a tile edge."""
    return _tile_locate_cached(g.to_array().tobytes(), g.nu, int(j), float(tol))


@lru_cache(maxsize=65536)
def _tile_locate_cached(key: bytes, nu: int, j: int, tol: float):
    p = np.frombuffer(key, dtype=float)
    a, k, b = tile_locate_arr(p[None, :], j, nu, tol)
    if b[0]:
        return Boundary(j)
    return TileId(j, tuple(int(v) for v in a[0]), int(k[0]))


def tile_contains(T: TileId, pts: np.ndarray, tol: float = 1e-9):
    """Membership of points in a tile: (inside, boundary) boolean arrays."""
    a, k, b = tile_locate_arr(pts, T.level, T.nu, tol)
    inside = np.all(a == np.asarray(T.a), axis=-1) & (k == T.k)
    return inside & ~b, b


def tile_sample(T: TileId, n: int, rng=None) -> np.ndarray:
    """n uniform random points of the tile T."""
    rng = np.random.default_rng(rng)
    nu = T.nu
    u = rng.uniform(-0.5, 0.5, size=(n, 2 * nu))
    f, _, _ = tile_height_series(u, nu)
    t = f - rng.uniform(0.0, 1.0, size=n) / (2 * nu)
    base = np.concatenate([u, t[:, None]], axis=1)
    gamma = np.concatenate([np.asarray(T.a, float), [T.k / (2 * nu)]])
    pts = mul_arr(gamma, base, nu)
    return dilate_arr(pts, float(_base(nu)) ** T.level, nu)


def translate_tile(T: TileId, gamma: HPoint) -> TileId:
    """gamma . T for gamma in the level-j lattice."""
    nu = T.nu
    q = T.width
    g0 = dilate_arr(gamma.to_array(), 1.0 / q, nu)
    base = np.concatenate([np.asarray(T.a, float), [T.k / (2 * nu)]])
    new = mul_arr(g0, base, nu)
    a = np.round(new[:2 * nu])
    k = np.round(new[2 * nu] * 2 * nu)
    if np.max(np.abs(new[:2 * nu] - a)) > 1e-9 or abs(new[2 * nu] * 2 * nu - k) > 1e-9:
        raise ValueError("translation is not a lattice element of this level")
    return TileId(T.level, tuple(int(v) for v in a), int(k))


def parent_tile(T: TileId) -> TileId:
    """The level j+1 tile containing T (located through its centre)."""
    res = tile_locate(T.lattice, T.level + 1)
    if isinstance(res, Boundary):
        raise RuntimeError("tile centre unexpectedly on a boundary")
    return res


# ---------------------------------------------------------------------------
# tubes

@dataclass(frozen=True)
class Tube:
    """T(g, r, s) = g . B1(o, r) . B2(0, s)."""

    center: HPoint
    radius: float
    half_height: float

    def __post_init__(self):
        if not (self.radius > 0 and self.half_height >= 0):
            raise ValueError("tube needs r > 0 and s >= 0")

    @property
    def nu(self) -> int:
        return self.center.nu

    def contains(self, pts: np.ndarray) -> np.ndarray:
        nu = self.nu
        loc = mul_arr(inv_arr(self.center.to_array()), np.asarray(pts, float), nu)
        r = self.radius
        return (np.max(np.abs(loc[..., :2 * nu]), axis=-1) < r) & \
            (np.abs(loc[..., 2 * nu]) < r * r + self.half_height)

    def bounding_box(self):
        """Axis-aligned box (lo, hi) containing the tube."""
        nu = self.nu
        c = self.center.to_array()
        r = self.radius
        zc = c[:2 * nu]
        # |S(c, a)| <= 4 nu r (sum |x_c| + |y_c|) for |a|_inf < r
        smax = 4 * nu * r * np.sum(np.abs(zc))
        lo = np.concatenate([zc - r, [c[2 * nu] - r * r - self.half_height - smax]])
        hi = np.concatenate([zc + r, [c[2 * nu] + r * r + self.half_height + smax]])
        return lo, hi


def tube_measure(t: Tube) -> float:
    nu = t.nu
    return 2.0 ** (2 * nu + 1) * t.radius ** (2 * nu) * (t.radius ** 2 + t.half_height)


def tube_volume_mc(t: Tube, n: int = 10 ** 6, rng=None) -> float:
    """Rejection-sampling estimate of the tube volume."""
    rng = np.random.default_rng(rng)
    lo, hi = t.bounding_box()
    pts = rng.uniform(lo, hi, size=(n, lo.size))
    return float(np.prod(hi - lo) * np.mean(t.contains(pts)))


# ---------------------------------------------------------------------------
# adapted rectangles

@dataclass(frozen=True)
class AdaptedRect:
    """P^{-1}(P(T)) cap T' for tiles T in level j inside T' in level j' >= j.

    Stored as the small tile's horizontal cube (``cube``, integer
    coordinates at level j) and the tall tile T'.
    """

    width_level: int
    cube: tuple
    tall: TileId

    def __post_init__(self):
        if self.tall.level < self.width_level:
            raise ValueError("height level must be at least the width level")

    @property
    def nu(self) -> int:
        return len(self.cube) // 2

    @property
    def height_level(self) -> int:
        return self.tall.level

    @property
    def width(self) -> float:
        return float(_base(self.nu) ** self.width_level)

    @property
    def height(self) -> float:
        return self.tall.height

    @property
    def measure(self) -> float:
        return self.width ** (2 * self.nu) * self.height

    @property
    def center(self) -> HPoint:
        """Midpoint of the fibre of T' over the centre of the cube."""
        nu = self.nu
        zc = np.asarray(self.cube, float) * self.width
        lo, hi = fibre_interval(self.tall, zc)
        return HPoint(tuple(zc[:nu]), tuple(zc[nu:]), 0.5 * (lo + hi))

    def contains(self, pts: np.ndarray, tol: float = 1e-9):
        """(inside, boundary) for each point."""
        pts = np.asarray(pts, float)
        nu = self.nu
        q = self.width
        cube = np.asarray(self.cube)
        zc = _round_half_up(pts[..., :2 * nu] / q)
        in_cube = np.all(zc == cube, axis=-1)
        u = pts[..., :2 * nu] / q - cube
        near_face = np.min(0.5 - np.abs(u), axis=-1) < tol
        inside, bnd = tile_contains(self.tall, pts, tol)
        return in_cube & inside & ~near_face, bnd | (near_face & in_cube)


def fibre_interval(T: TileId, z: np.ndarray) -> tuple:
    """The t-interval {t : (z, t) in T} for z in P(T)."""
    nu = T.nu
    q = T.width
    z0 = np.asarray(z, float) / q
    a = np.asarray(T.a, float)
    u = z0 - a
    if np.any(u < -0.5) or np.any(u >= 0.5):
        raise ValueError("z is not over this tile")
    f, _, _ = tile_height_series(u[None, :], nu)
    S = symplectic(a[:nu], a[nu:], u[:nu], u[nu:], nu)
    top = T.k / (2 * nu) + S + f[0]
    return (top - 1 / (2 * nu)) * q * q, top * q * q


def rect_from_point(g: HPoint, j: int, jp: int, tol: float = 1e-9) -> AdaptedRect:
    """The adapted rectangle of width level j and height level jp containing g."""
    tall = tile_locate(g, jp, tol)
    if isinstance(tall, Boundary):
        raise ValueError("point lies on a tile boundary")
    q = float(_base(g.nu) ** j)
    cube = tuple(int(v) for v in _round_half_up(g.to_array()[:2 * g.nu] / q))
    return AdaptedRect(j, cube, tall)


def rect_contains(R: AdaptedRect, g: HPoint, tol: float = 1e-9):
    """(contained, on_boundary) for a single point; boundary points report False."""
    inside, bnd = R.contains(g.to_array()[None, :], tol)
    return bool(inside[0]), bool(bnd[0])


def rect_sample(R: AdaptedRect, n: int, rng=None) -> np.ndarray:
    rng = np.random.default_rng(rng)
    nu = R.nu
    q = R.width
    z = (np.asarray(R.cube, float) + rng.uniform(-0.5, 0.5, size=(n, 2 * nu))) * q
    tall = R.tall
    qq = tall.width
    a = np.asarray(tall.a, float)
    u = z / qq - a
    f, _, _ = tile_height_series(u, nu)
    S = symplectic(a[:nu], a[nu:], u[:, :nu], u[:, nu:], nu)
    top = tall.k / (2 * nu) + S + f
    t = (top - rng.uniform(0, 1, size=n) / (2 * nu)) * qq * qq
    return np.concatenate([z, t[:, None]], axis=1)


def rect_measure_grid(R: AdaptedRect, spec: GridSpec) -> float:
    pts = spec.coords().reshape(-1, 2 * spec.nu + 1)
    inside, _ = R.contains(pts)
    return float(inside.sum() * spec.cell_volume)


def enlarge(R: AdaptedRect, kappa: float = 3.0) -> Tube:
    """R^{*,kappa} = T(cent(R), kappa q / 2, kappa^2 (4h + q^2) / 8)."""
    if kappa < 1:
        raise ValueError("kappa must be >= 1")
    q, h = R.width, R.height
    return Tube(R.center, kappa * q / 2, kappa ** 2 * (4 * h + q * q) / 8)


def tube_to_rect(t: Tube) -> AdaptedRect:
    """An adapted rectangle R with R inside t and t inside R^{*,(2nu+1)^2}.

    Chooses the widest width level whose rectangle through the tube centre
    fits and then the tallest admissible height, checking containment on the
    rectangle's bounding tube.
    """
    nu = t.nu
    N = _base(nu)
    g = t.center
    r, s = t.radius, t.half_height
    j = int(np.floor(np.log(2 * r) / np.log(N)))
    for jj in range(j, j - 10, -1):
        # tallest height level with the bounding tube of R inside t
        jp = jj
        best = None
        while True:
            try:
                R = rect_from_point(g, jj, jp)
            except ValueError:
                break
            if _rect_in_tube(R, t):
                best = R
                jp += 1
                if jp > jj + 40:
                    break
            else:
                break
        if best is not None:
            return best
    raise RuntimeError("no adapted rectangle fits inside the tube")


def _rect_in_tube(R: AdaptedRect, t: Tube, n: int = 2000) -> bool:
    pts = rect_sample(R, n, rng=0)
    lo, hi = rect_box_corners(R)
    return bool(np.all(t.contains(pts)) and np.all(t.contains(np.vstack([lo, hi]))))


def rect_box_corners(R: AdaptedRect):
    """Sample points on the horizontal faces and the top and bottom of R."""
    nu = R.nu
    q = R.width
    corners = np.array(np.meshgrid(*([[-0.4999999, 0.4999999]] * (2 * nu)), indexing="ij"))
    corners = corners.reshape(2 * nu, -1).T
    z = (np.asarray(R.cube, float) + corners) * q
    lo, hi = [], []
    for zz in z:
        a, b = fibre_interval(R.tall, zz)
        lo.append(np.concatenate([zz, [a]]))
        hi.append(np.concatenate([zz, [b - 1e-12]]))
    return np.array(lo), np.array(hi)


def rect_dagger(R: AdaptedRect) -> AdaptedRect:
    """The adapted rectangle of width (2nu+1) q containing R.

    Its height level is max(j', j+1) so it is at least one tile tall.
    """
    j = R.width_level + 1
    jp = max(R.height_level, j)
    return rect_from_point(R.center, j, jp)


def rect_subset(R1: AdaptedRect, R2: AdaptedRect) -> bool:
    """Exact containment test through the nesting of the grid."""
    if R1.width_level > R2.width_level or R1.height_level > R2.height_level:
        return False
    N = _base(R1.nu)
    f = N ** (R2.width_level - R1.width_level)
    c1 = np.asarray(R1.cube)
    # the level j1 cube lies in the level j2 cube containing its centre
    if tuple(_round_half_up(c1 / f).astype(int)) != tuple(R2.cube):
        return False
    T = R1.tall
    while T.level < R2.height_level:
        T = parent_tile(T)
    return T == R2.tall


# ---------------------------------------------------------------------------
# grid sets and maximal rectangles

@dataclass(frozen=True, eq=False)
class GridSet:
    spec: GridSpec
    mask: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool)
        if m.size != self.spec.size:
            raise ValueError("mask size does not match grid")
        m = m.reshape(self.spec.shape).copy()
        m.setflags(write=False)
        object.__setattr__(self, "mask", m)

    @property
    def measure(self) -> float:
        return float(self.mask.sum() * self.spec.cell_volume)

    def points(self) -> np.ndarray:
        return self.spec.coords()[self.mask]


@dataclass
class RectSearch:
    rects: list
    levels: list          # (j, j') pairs searched
    truncated: bool       # True when larger levels were skipped for not fitting the box


def _grid_levels(spec: GridSpec, level_range=None):
    nu = spec.nu
    N = _base(nu)
    if level_range is not None:
        js = list(level_range)
    else:
        jmin = int(np.ceil(np.log(spec.dz) / np.log(N) - 1e-9))
        jmax = int(np.floor(np.log(2 * spec.Z) / np.log(N) + 1e-9))
        js = list(range(jmin, jmax + 1))
    pairs = []
    truncated = False
    for j in js:
        q = float(N) ** j
        if q > 2 * spec.Z:
            truncated = True
            continue
        jp = j
        while True:
            h = float(N) ** (2 * jp) / (2 * nu)
            if h < spec.dt:
                jp += 1
                continue
            if h + q * q > 2 * spec.T:
                truncated = True
                break
            pairs.append((j, jp))
            jp += 1
    return pairs, truncated


@lru_cache(maxsize=64)
def rect_labels(spec: GridSpec, j: int, jp: int):
    """Label every grid point by its (width j, height jp) rectangle.

    Returns read-only arrays (labels, keys, boundary) where labels index into keys.
    """
    nu = spec.nu
    N = _base(nu)
    pts = spec.coords().reshape(-1, 2 * nu + 1)
    a, k, bnd = tile_locate_arr(pts, jp, nu)
    q = float(N) ** j
    cube = _round_half_up(pts[:, :2 * nu] / q).astype(np.int64)
    key = np.concatenate([cube, a, k[:, None]], axis=1)
    keys, labels = np.unique(key, axis=0, return_inverse=True)
    out = (labels.ravel(), keys, bnd)
    for a in out:
        a.setflags(write=False)
    return out


@lru_cache(maxsize=1 << 18)
def _rect_fits(R: AdaptedRect, spec: GridSpec) -> bool:
    t = enlarge(R, 1.0)
    lo, hi = t.bounding_box()
    return bool(np.all(lo[:-1] >= -spec.Z - 1e-12) and np.all(hi[:-1] <= spec.Z + 1e-12)
                and (spec.t_periodic or (lo[-1] >= -spec.T and hi[-1] <= spec.T)))


def candidate_rects(omega: GridSet, level_range=None):
    """All adapted rectangles whose grid samples lie in omega and which fit the box."""
    spec = omega.spec
    nu = spec.nu
    pairs, truncated = _grid_levels(spec, level_range)
    m = omega.mask.ravel()
    out = []
    for j, jp in pairs:
        labels, keys, bnd = rect_labels(spec, j, jp)
        total = np.bincount(labels, minlength=len(keys))
        inside = np.bincount(labels, weights=m.astype(float), minlength=len(keys))
        full = np.nonzero((total > 0) & (inside == total))[0]
        for idx in full:
            kk = keys[idx]
            R = AdaptedRect(j, tuple(int(v) for v in kk[:2 * nu]),
                            TileId(jp, tuple(int(v) for v in kk[2 * nu:4 * nu]), int(kk[4 * nu])))
            if _rect_fits(R, spec) and _cube_inside_tall(R):
                out.append((R, np.nonzero(labels == idx)[0]))
    return out, pairs, truncated


def _cube_inside_tall(R: AdaptedRect) -> bool:
    # P(T) must lie in P(T'): the cube's centre lies over T' and the cube is aligned
    N = _base(R.nu)
    f = N ** (R.height_level - R.width_level)
    c = np.asarray(R.cube)
    return tuple(_round_half_up(c / f).astype(int)) == tuple(R.tall.a)


def containing_rect(R: AdaptedRect, j: int, jp: int) -> AdaptedRect:
    """The unique rectangle of levels (j, jp) containing R, for j >= R's width level
    and jp >= R's height level."""
    if j < R.width_level or jp < R.height_level or jp < j:
        raise ValueError("levels must dominate those of R")
    f = _base(R.nu) ** (j - R.width_level)
    cube = tuple(int(v) for v in _round_half_up(np.asarray(R.cube) / f))
    T = R.tall
    while T.level < jp:
        T = parent_tile(T)
    return AdaptedRect(j, cube, T)


def _strict_ancestors(R: AdaptedRect, levels) -> list:
    out = []
    for j, jp in levels:
        if (j, jp) != (R.width_level, R.height_level) and j >= R.width_level \
                and jp >= R.height_level:
            out.append(containing_rect(R, j, jp))
    return out


def maximal_rects(omega: GridSet, level_range=None) -> RectSearch:
    """Maximal adapted rectangles whose samples lie in omega.

    By nesting of the grid, a rectangle R is contained in S exactly when S is
    the rectangle of S's levels containing R, so each candidate is compared
    only with its ancestors.
    """
    cands, pairs, truncated = candidate_rects(omega, level_range)
    found = {R for R, _ in cands}
    keep = [R for R, _ in cands if not any(S in found for S in _strict_ancestors(R, pairs))]
    return RectSearch(keep, pairs, truncated)


def rect_up(R: AdaptedRect, omega_tilde: GridSet, maximal: list | None = None,
            axis: str = "width") -> AdaptedRect:
    """The widest (or tallest) maximal rectangle of omega_tilde containing R."""
    if maximal is None:
        maximal = maximal_rects(omega_tilde).rects
    found = set(maximal)
    levels = sorted({(S.width_level, S.height_level) for S in maximal})
    sup = [S for S in [R] + _strict_ancestors(R, levels) if S in found]
    if not sup:
        raise ValueError("R is not contained in any maximal rectangle of omega_tilde")
    if axis == "width":
        return max(sup, key=lambda S: (S.width, S.measure))
    return max(sup, key=lambda S: (S.height, S.measure))


def enlarged_set(omega: GridSet, alpha: float = 0.5, scales=None) -> GridSet:
    """{M_F(1_omega) > alpha} computed with tube averages on the grid."""
    spec = omega.spec
    ind = omega.mask.reshape(spec.n_horizontal, spec.n_t).astype(float)
    if scales is None:
        scales = default_tube_scales(spec)
    best = ind.copy()
    seen = set()
    for r, s in scales:
        # scales sharing a sample window give the same average
        key = (half_width(spec.dz, r), half_width(spec.dt, r * r + s))
        if key in seen:
            continue
        seen.add(key)
        best = np.maximum(best, tube_reduce(ind, spec, r, s, "mean"))
    return GridSet(spec, (best > alpha) | omega.mask.reshape(best.shape))


def default_tube_scales(spec: GridSpec):
    rs = spec.dz * 2.0 ** np.arange(0, 12)
    rs = rs[rs <= spec.Z]
    ss = spec.dt * 2.0 ** np.arange(-1, 14)
    ss = ss[ss <= 2 * spec.T]
    return [(r, s) for r in rs for s in np.concatenate([[0.0], ss])]


def journe_sum(omega: GridSet, delta: float = 1.0, axis: str = "width", alpha: float = 0.5,
               omega_tilde: GridSet | None = None):
    """Sum over maximal R of (width(R)/width(R_up))^delta |R|, with R_up taken in omega_tilde."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    if omega_tilde is None:
        omega_tilde = enlarged_set(omega, alpha)
    M = maximal_rects(omega).rects
    Mt = maximal_rects(omega_tilde).rects
    total = 0.0
    for R in M:
        S = rect_up(R, omega_tilde, Mt, axis)
        ratio = R.width / S.width if axis == "width" else R.height / S.height
        total += ratio ** delta * R.measure
    return total


# ---------------------------------------------------------------------------
# csv

def write_rects_csv(rects: Iterable[AdaptedRect], path) -> None:
    rects = list(rects)
    nu = rects[0].nu if rects else 1
    cols = [f"cx{i+1}" for i in range(nu)] + [f"cy{i+1}" for i in range(nu)] + ["ct", "j", "jp"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for R in rects:
            c = R.center.to_array()
            w.writerow([repr(float(v)) for v in c] + [R.width_level, R.height_level])


def read_rects_csv(path) -> list:
    out = []
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        head = next(rd)
        nu = (len(head) - 3) // 2
        for row in rd:
            c = np.array([float(v) for v in row[:2 * nu + 1]])
            j, jp = int(row[-2]), int(row[-1])
            out.append(rect_from_point(HPoint.from_array(c), j, jp))
    return out
