"""Heat and Poisson kernels of the grid sub-Laplacian, the central Poisson
kernel, and two explicit singular kernels.

The heat kernel is obtained by classical fourth-order Runge-Kutta stepping of
du/dr = -L u from the discrete unit mass at the origin.  Because the grid
sub-Laplacian has a free boundary, column sums of L vanish and the stepping
conserves mass to rounding error.  Poisson kernels come from subordination,

    exp(-r sqrt(mu)) = pi^{-1/2} int_0^inf e^{-v} v^{-1/2} exp(-r^2 mu / (4v)) dv,

evaluated with generalized Gauss-Laguerre quadrature (weight v^{-1/2} e^{-v}).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import roots_genlaguerre

from .fields import GridField, GridSpec, Line, conv2, laplacian_matrix, origin_component
from .group import koranyi_norm_arr, gauge_norm_arr

RK4_STABILITY = 2.785


class KernelError(RuntimeError):
    """Raised for unstable stepping or non-converged quadrature."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class KernelEstimate:
    exponents: tuple
    constant: float
    form: str            # "heat_gaussian" or "poisson_rational"

    def __post_init__(self):
        if not self.constant > 0:
            raise ValueError("estimate constant must be positive")
        if self.form not in ("heat_gaussian", "poisson_rational"):
            raise ValueError(f"unknown estimate form {self.form!r}")

    def to_json(self) -> dict:
        return {"exponents": list(self.exponents), "constant": self.constant, "form": self.form}


def spectral_radius_bound(spec: GridSpec) -> float:
    """Gershgorin bound 8 nu / dz^2 for the grid sub-Laplacian."""
    return 8.0 * spec.nu / spec.dz ** 2


def heat_evolve(u0: np.ndarray, spec: GridSpec, times, dt: float | None = None):
    """RK4 solution of du/dr = -L u at each of the (sorted) ``times``."""
    A = laplacian_matrix(spec)
    rho = spectral_radius_bound(spec)
    if dt is None:
        dt = 1.0 / rho
    if dt * rho > RK4_STABILITY:
        raise KernelError("time step exceeds the RK4 stability limit",
                          {"dt": dt, "suggested_dt": 0.9 * RK4_STABILITY / rho})
    times = np.asarray(times, dtype=float)
    order = np.argsort(times)
    out = [None] * len(times)
    u = np.array(u0, dtype=float).ravel()
    norm0 = np.linalg.norm(u)
    cur = 0.0
    for idx in order:
        target = times[idx]
        if target < cur - 1e-15:
            raise ValueError("times must be nonnegative")
        span = target - cur
        nsteps = int(np.ceil(span / dt - 1e-12)) if span > 0 else 0
        if nsteps:
            h = span / nsteps
            for _ in range(nsteps):
                k1 = -(A @ u)
                k2 = -(A @ (u + 0.5 * h * k1))
                k3 = -(A @ (u + 0.5 * h * k2))
                k4 = -(A @ (u + h * k3))
                u = u + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            if not np.isfinite(u).all() or np.linalg.norm(u) > 10 * norm0:
                raise KernelError("heat stepping became unstable",
                                  {"dt": h, "suggested_dt": h / 2})
        cur = target
        out[idx] = u.reshape(spec.shape).copy()
    return out


def heat_kernel(r: float, spec: GridSpec, dt: float | None = None) -> GridField:
    """Kernel of exp(-r L): the discrete heat flow of the unit mass at the origin."""
    if not r > 0:
        raise ValueError("r must be positive")
    (u,) = heat_evolve(GridField.delta(spec).values, spec, [r], dt)
    return GridField(spec, u)


def heat_kernels(rs, spec: GridSpec, dt: float | None = None) -> list:
    """Heat kernels at several times from a single stepping run."""
    return [GridField(spec, u) for u in heat_evolve(GridField.delta(spec).values, spec, rs, dt)]


def subordination_nodes(n: int):
    """Nodes v_i and weights w_i / sqrt(pi) of the subordination quadrature."""
    v, w = roots_genlaguerre(n, -0.5)
    return v, w / np.sqrt(np.pi)


def _heat_snapshots(spec: GridSpec, times, heat_source: str, dt=None) -> list:
    if heat_source == "spectral":
        from .spectral import build_calculus
        calc = build_calculus(spec)
        d = GridField.delta(spec)
        return [calc.heat(tm, d).values for tm in times]
    if heat_source != "pde":
        raise ValueError(f"unknown heat source {heat_source!r}")
    return heat_evolve(GridField.delta(spec).values, spec, times, dt)


def poisson_kernel(r: float, spec: GridSpec, n_nodes: int = 64, check: bool = True,
                   heat_source: str = "pde", tol: float = 1e-4, dt=None) -> GridField:
    """Kernel of exp(-r sqrt(L)) by Gauss-Laguerre subordination over heat kernels.

    Heat kernels come from time stepping (``heat_source="pde"``) or from the
    spectral calculus (``"spectral"``).  With ``check`` the quadrature is
    repeated with twice the nodes (sharing one stepping run) and a
    :class:`KernelError` is raised if the relative L^2 change exceeds ``tol``.
    Gauss-Laguerre converges slowly for modes with r^2 mu below about 1, so
    small r on a coarse box may fail the check.
    """
    if not r > 0:
        raise ValueError("r must be positive")
    v1, w1 = subordination_nodes(n_nodes)
    if check:
        v2, w2 = subordination_nodes(2 * n_nodes)
        v = np.concatenate([v1, v2])
    else:
        v = v1
    hs = _heat_snapshots(spec, r * r / (4.0 * v), heat_source, dt)
    p = np.zeros(spec.shape)
    for wi, h in zip(w1, hs[:n_nodes]):
        p += wi * h
    if check:
        p2 = np.zeros(spec.shape)
        for wi, h in zip(w2, hs[n_nodes:]):
            p2 += wi * h
        rel = float(np.linalg.norm(p2 - p) / np.linalg.norm(p2))
        if rel > tol:
            raise KernelError("subordination quadrature did not converge",
                              {"relative_change": rel, "nodes": n_nodes, "r": r})
    return GridField(spec, p)


def poisson_spectral(r: float, calc) -> GridField:
    """exp(-r sqrt(L)) applied to the unit mass, straight from the spectral calculus."""
    return calc.kernel(lambda mu, lam: np.exp(-r * np.sqrt(np.clip(mu, 0, None))), real=True)


def poisson_1d(s: float, line: Line, periodic: bool = False) -> Line:
    """The Cauchy-Poisson kernel s / (pi (s^2 + t^2)) sampled on ``line``.

    With ``periodic`` the kernel is summed over all translates by the line
    length, which is the Poisson kernel of the circle.
    """
    if not s > 0:
        raise ValueError("s must be positive")
    t = line.axis()
    if not periodic:
        return Line(line.half_extent, line.n, s / (np.pi * (s * s + t * t)))
    L = 2 * line.half_extent
    a = 2 * np.pi / L
    vals = np.sinh(a * s) / (L * (np.cosh(a * s) - np.cos(a * t)))
    return Line(line.half_extent, line.n, vals)


def flag_poisson(r: float, s: float, spec: GridSpec, p1: GridField | None = None,
                 **kw) -> GridField:
    """p_{r,s} = p_r *2 p_s on the grid."""
    if p1 is None:
        p1 = poisson_kernel(r, spec, **kw)
    p2 = poisson_1d(s, Line.for_spec(spec), periodic=spec.t_periodic)
    return conv2(p1, p2)


def poisson_band(p: GridField, r: float, bulk: np.ndarray | None = None) -> tuple:
    """min and max of p(g) (r^2 + ||g||^2)^{(D+1)/2} / r over the bulk."""
    spec = p.spec
    g = gauge_norm_arr(spec.coords(), spec.nu)
    ratio = p.values * (r * r + g * g) ** ((spec.D + 1) / 2) / r
    if bulk is None:
        bulk = default_bulk(spec)
    vals = ratio[bulk]
    return float(vals.min()), float(vals.max())


def default_bulk(spec: GridSpec, frac: float = 0.5) -> np.ndarray:
    """Points with |z|_inf <= frac Z and |t| <= frac T reachable from the origin.

    Kernels of functions of the sub-Laplacian vanish off the origin's
    component of the horizontal-step graph, see :func:`origin_component`.
    """
    c = spec.coords()
    nu = spec.nu
    return origin_component(spec) & (np.max(np.abs(c[..., :2 * nu]), axis=-1) <= frac * spec.Z + 1e-12) & \
        (np.abs(c[..., 2 * nu]) <= frac * spec.T + 1e-12)


def gaussian_log_ratio(h: GridField, r: float, delta: float = 0.0, bulk=None,
                       floor: float = 1e-12) -> float:
    """sup over the bulk of log(r^{D/2} h_r(g)) + ||g||_K^2 / (4 pi (1 + delta) r).

    The Gaussian bound is stated for the control distance, which is at least
    ||g||_K / sqrt(pi); hence the factor pi.  Points where h is below
    ``floor`` times its maximum are ignored: there the lattice kernel is in its
    non-Gaussian large-deviation regime.
    """
    spec = h.spec
    if bulk is None:
        bulk = default_bulk(spec)
    hv = h.values
    sel = bulk & (hv > floor * hv.max())
    k = koranyi_norm_arr(spec.coords(), spec.nu)
    vals = np.log(r ** (spec.D / 2) * hv[sel]) + k[sel] ** 2 / (4 * np.pi * (1 + delta) * r)
    return float(vals.max())


# ---------------------------------------------------------------------------
# explicit singular kernels

def _sphere_mean(omega_fn, nu: int, n: int = 4096, seed: int = 0) -> complex:
    if nu == 1:
        th = 2 * np.pi * (np.arange(n) + 0.5) / n
        pts = np.stack([np.cos(th), np.sin(th)], axis=-1)
    else:
        rng = np.random.default_rng(seed)
        pts = rng.normal(size=(64 * n, 2 * nu))
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    return complex(np.mean(omega_fn(pts)))


def phong_stein_kernel(spec: GridSpec, omega_fn, tol: float = 1e-6) -> GridField:
    """omega(z) / (|z|^2 + t^2)^nu * 1 / (|z|^2 + i t) with the origin cell set to 0.

    ``omega_fn`` maps points of shape (..., 2 nu) (x's then y's) to values
    and must be homogeneous of degree 0 with mean zero on the unit sphere.
    """
    mean = _sphere_mean(omega_fn, spec.nu)
    if abs(mean) > tol:
        raise ValueError(f"omega does not have mean zero on the sphere (mean {mean:.3g})")
    c = spec.coords()
    nu = spec.nu
    z = c[..., :2 * nu]
    t = c[..., 2 * nu]
    z2 = np.sum(z * z, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        k = omega_fn(z) / (z2 * z2 + t * t) ** nu / (z2 + 1j * t)
    k = np.where(np.isfinite(k), k, 0.0)
    k[spec.origin_index()] = 0.0
    return GridField(spec, k)


def cauchy_szego_kernel(spec: GridSpec, c: float = 1.0) -> GridField:
    """c / (|z|^2 + i t)^{nu + 1} with the origin cell set to 0."""
    co = spec.coords()
    nu = spec.nu
    z2 = np.sum(co[..., :2 * nu] ** 2, axis=-1)
    t = co[..., 2 * nu]
    with np.errstate(divide="ignore", invalid="ignore"):
        k = c / (z2 + 1j * t) ** (nu + 1)
    k = np.where(np.isfinite(k), k, 0.0)
    k[spec.origin_index()] = 0.0
    return GridField(spec, k)


def excision_sensitivity(kernel: GridField, f: GridField, cells: int = 1) -> float:
    """Relative change of kernel convolution when a (2 cells + 1)^D block at 0 is zeroed."""
    from .fields import conv1
    spec = kernel.spec
    o = spec.origin_index()
    k2 = np.array(kernel.values)
    sl = tuple(slice(i - cells, i + cells + 1) for i in o)
    k2[sl] = 0.0
    a = conv1(f, kernel)
    b = conv1(f, GridField(spec, k2))
    return float(np.linalg.norm(a.values - b.values) / max(np.linalg.norm(a.values), 1e-300))
