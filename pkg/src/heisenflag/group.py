"""Arithmetic and geometry of the Heisenberg group H^nu.

Points are written (z, t) with z = x + iy in C^nu.  The product is

    (z', t') . (z, t) = (z' + z, t' + t + S(z', z)),
    S(z', z) = 4 nu (<y', x> - <x', y>),

so the symplectic factor is 4 nu rather than the more common 1/2.

Besides the scalar :class:`HPoint` API there are array versions that act on
stacked coordinates ``(..., 2 nu + 1)`` ordered ``x_1..x_nu, y_1..y_nu, t``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class GroupContext:
    """Dimension data derived from nu."""

    nu: int = 1

    def __post_init__(self):
        if int(self.nu) != self.nu or self.nu < 1:
            raise ValueError(f"nu must be a positive integer, got {self.nu!r}")

    @property
    def D(self) -> int:
        return 2 * self.nu + 2

    @property
    def base(self) -> int:
        """Tiling base 2 nu + 1."""
        return 2 * self.nu + 1

    @property
    def symplectic(self) -> float:
        return 4.0 * self.nu


@dataclass(frozen=True)
class HPoint:
    """An element (x + iy, t) of H^nu."""

    x: tuple
    y: tuple
    t: float

    def __post_init__(self):
        x = tuple(float(v) for v in np.atleast_1d(self.x))
        y = tuple(float(v) for v in np.atleast_1d(self.y))
        if len(x) != len(y) or not x:
            raise ValueError("x and y must have the same positive length")
        t = float(self.t)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y)) and np.isfinite(t)):
            raise ValueError("coordinates must be finite")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "t", t)

    @property
    def nu(self) -> int:
        return len(self.x)

    @property
    def z(self) -> np.ndarray:
        return np.asarray(self.x) + 1j * np.asarray(self.y)

    @classmethod
    def from_complex(cls, z, t) -> "HPoint":
        z = np.atleast_1d(np.asarray(z, dtype=complex))
        return cls(tuple(z.real), tuple(z.imag), t)

    @classmethod
    def identity(cls, nu: int = 1) -> "HPoint":
        return cls((0.0,) * nu, (0.0,) * nu, 0.0)

    def to_array(self) -> np.ndarray:
        return np.array(self.x + self.y + (self.t,))

    @classmethod
    def from_array(cls, a: Sequence[float]) -> "HPoint":
        a = np.asarray(a, dtype=float)
        nu = (a.shape[-1] - 1) // 2
        return cls(tuple(a[:nu]), tuple(a[nu:2 * nu]), a[2 * nu])

    def __mul__(self, other: "HPoint") -> "HPoint":
        return mul(self, other)


def _check_same_nu(a: HPoint, b: HPoint) -> None:
    if a.nu != b.nu:
        raise ValueError(f"points live in different groups (nu={a.nu} vs nu={b.nu})")


def symplectic(x1, y1, x2, y2, nu: int):
    """S((x1,y1),(x2,y2)) = 4 nu (<y1,x2> - <x1,y2>), summed over the last axis."""
    x1, y1, x2, y2 = map(np.asarray, (x1, y1, x2, y2))
    return 4.0 * nu * (np.sum(y1 * x2, axis=-1) - np.sum(x1 * y2, axis=-1))


def mul(a: HPoint, b: HPoint) -> HPoint:
    _check_same_nu(a, b)
    s = symplectic(a.x, a.y, b.x, b.y, a.nu)
    return HPoint(
        tuple(p + q for p, q in zip(a.x, b.x)),
        tuple(p + q for p, q in zip(a.y, b.y)),
        a.t + b.t + float(s),
    )


def inv(a: HPoint) -> HPoint:
    return HPoint(tuple(-v for v in a.x), tuple(-v for v in a.y), -a.t)


def dilate(a: HPoint, r: float) -> HPoint:
    if not r > 0:
        raise ValueError(f"dilation factor must be positive, got {r!r}")
    return HPoint(tuple(r * v for v in a.x), tuple(r * v for v in a.y), r * r * a.t)


def gauge_norm(a: HPoint) -> float:
    """max(|x_j|, |y_j|, |t|^(1/2))."""
    return float(max(max(abs(v) for v in a.x), max(abs(v) for v in a.y), abs(a.t) ** 0.5))


def koranyi_norm(a: HPoint) -> float:
    """(|z|^4 + 4 nu^2 t^2)^(1/4)."""
    z2 = sum(v * v for v in a.x) + sum(v * v for v in a.y)
    return float((z2 * z2 + 4.0 * a.nu ** 2 * a.t ** 2) ** 0.25)


def distance(a: HPoint, b: HPoint, metric: str = "gauge") -> float:
    """Left-invariant distance ||b^{-1} a||."""
    _check_same_nu(a, b)
    g = mul(inv(b), a)
    if metric == "gauge":
        return gauge_norm(g)
    if metric == "koranyi":
        return koranyi_norm(g)
    raise ValueError(f"unknown metric {metric!r}")


def koranyi_comparison_constant(nu: int) -> float:
    """The stated upper constant (4 nu^2 + 2 nu)^(1/4) for d_K <= C d.

    It is too small: at gauge norm 1 the Korányi norm reaches (8 nu^2)^(1/4),
    see :func:`koranyi_sharp_constant`.
    """
    return (4.0 * nu * nu + 2.0 * nu) ** 0.25


def koranyi_sharp_constant(nu: int) -> float:
    """Best C with d_K <= C d, attained at |x_j| = |y_j| = |t| = 1."""
    return (8.0 * nu * nu) ** 0.25


# ---------------------------------------------------------------------------
# array versions, last axis = (x_1..x_nu, y_1..y_nu, t)

def _split(a: np.ndarray, nu: int):
    return a[..., :nu], a[..., nu:2 * nu], a[..., 2 * nu]


def mul_arr(a: np.ndarray, b: np.ndarray, nu: int) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ax, ay, at = _split(a, nu)
    bx, by, bt = _split(b, nu)
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[..., :nu] = ax + bx
    out[..., nu:2 * nu] = ay + by
    out[..., 2 * nu] = at + bt + symplectic(ax, ay, bx, by, nu)
    return out


def inv_arr(a: np.ndarray) -> np.ndarray:
    return -np.asarray(a, dtype=float)


def dilate_arr(a: np.ndarray, r: float, nu: int) -> np.ndarray:
    if not r > 0:
        raise ValueError(f"dilation factor must be positive, got {r!r}")
    out = np.array(a, dtype=float, copy=True)
    out[..., :2 * nu] *= r
    out[..., 2 * nu] *= r * r
    return out


def gauge_norm_arr(a: np.ndarray, nu: int) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    return np.maximum(np.max(np.abs(a[..., :2 * nu]), axis=-1), np.sqrt(np.abs(a[..., 2 * nu])))


def koranyi_norm_arr(a: np.ndarray, nu: int) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    z2 = np.sum(a[..., :2 * nu] ** 2, axis=-1)
    return (z2 * z2 + 4.0 * nu * nu * a[..., 2 * nu] ** 2) ** 0.25


def distance_arr(a: np.ndarray, b: np.ndarray, nu: int, metric: str = "gauge") -> np.ndarray:
    g = mul_arr(inv_arr(b), a, nu)
    if metric == "gauge":
        return gauge_norm_arr(g, nu)
    if metric == "koranyi":
        return koranyi_norm_arr(g, nu)
    raise ValueError(f"unknown metric {metric!r}")


def random_points(n: int, nu: int = 1, scale: float = 1.0, rng=None) -> np.ndarray:
    """n points with z uniform in [-scale, scale]^{2nu} and t in [-scale^2, scale^2]."""
    rng = np.random.default_rng(rng)
    a = rng.uniform(-1.0, 1.0, size=(n, 2 * nu + 1))
    return dilate_arr(a, scale, nu)
