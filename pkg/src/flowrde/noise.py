"""Fractional Brownian motion: exact sampling, mollification, covariances.

The driving path W has covariance C_H (t^{2H} + s^{2H} - |t-s|^{2H}) on the
positive quadrant and is extended by zero to t <= 0.  Sampling is exact
(Cholesky of the covariance on the grid) and deterministic per seed.  The
mollifier is the one-sided bump c exp(-1/(x(1-x))) on (0,1), so the smoothed
noise xi_eps(t) only looks at W on [t - eps, t].
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad

from .kernels import GridFunction, TimeGrid

__all__ = [
    "NoiseSpec", "NoisePath", "Mollifier",
    "cov_w", "sample_fbm", "mollify", "mollify_on", "cov_eps",
    "rho", "rho_prime", "rho_normalization",
]


def _bump_unnormalized(x: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x)
    inside = (x > 0.0) & (x < 1.0)
    xi = x[inside]
    out[inside] = np.exp(-1.0 / (xi * (1.0 - xi)))
    return out


def rho_normalization() -> float:
    """1 / integral of exp(-1/(x(1-x))) over (0,1), computed once."""
    global _RHO_NORM
    if _RHO_NORM is None:
        val, _ = quad(lambda x: math.exp(-1.0 / (x * (1.0 - x))), 0.0, 1.0,
                      limit=200, epsabs=1e-15, epsrel=1e-13)
        _RHO_NORM = 1.0 / val
    return _RHO_NORM


_RHO_NORM: float | None = None


def rho(x) -> np.ndarray:
    """The unit-mass bump on (0,1)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return rho_normalization() * _bump_unnormalized(x)


def rho_prime(x) -> np.ndarray:
    """Derivative of the bump; exact via the chain rule."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.zeros_like(x)
    inside = (x > 0.0) & (x < 1.0)
    xi = x[inside]
    g = xi * (1.0 - xi)
    out[inside] = np.exp(-1.0 / g) * (1.0 - 2.0 * xi) / g ** 2
    return rho_normalization() * out


@dataclass(frozen=True)
class NoiseSpec:
    """Parameters of the driving fractional noise."""

    H: float
    m: int = 1
    seed: int = 0
    C_H: float = 0.5

    def __post_init__(self):
        if not 0.25 < self.H <= 0.5:
            raise ValueError(f"H={self.H} outside (1/4, 1/2]")
        if self.m < 1:
            raise ValueError("noise dimension m must be >= 1")


@dataclass
class NoisePath:
    """A sampled driving path on a grid; W(0) = 0, zero for t <= 0."""

    W: GridFunction
    spec: NoiseSpec

    def save(self, csv_path, sidecar_path=None) -> None:
        self.W.to_csv(csv_path)
        if sidecar_path is not None:
            meta = {"H": self.spec.H, "m": self.spec.m, "seed": self.spec.seed,
                    "C_H": self.spec.C_H, "level": self.W.grid.level}
            with open(sidecar_path, "w") as fh:
                json.dump(meta, fh, indent=1, sort_keys=True)

    @staticmethod
    def load(csv_path, sidecar_path) -> "NoisePath":
        with open(sidecar_path) as fh:
            meta = json.load(fh)
        spec = NoiseSpec(meta["H"], meta["m"], meta["seed"], meta["C_H"])
        shape = (meta["m"],) if meta["m"] > 1 else ()
        W = GridFunction.from_csv(csv_path, component_shape=shape, causal=True)
        return NoisePath(W, spec)


@dataclass(frozen=True)
class Mollifier:
    """The scaled bump rho_eps = eps^-1 rho(./eps), supported on [0, eps]."""

    epsilon: float

    def __post_init__(self):
        if not 0.0 < self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in (0, 1]")

    def value(self, t) -> np.ndarray:
        return rho(np.asarray(t, dtype=float) / self.epsilon) / self.epsilon

    def derivative(self, t) -> np.ndarray:
        return rho_prime(np.asarray(t, dtype=float) / self.epsilon) / self.epsilon ** 2


def cov_w(t: float, s: float, spec: NoiseSpec) -> float:
    """Covariance of one component of W; zero off the positive quadrant."""
    if t <= 0.0 or s <= 0.0:
        return 0.0
    H = spec.H
    return spec.C_H * (t ** (2 * H) + s ** (2 * H) - abs(t - s) ** (2 * H))


def _cov_matrix(pts: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    H2 = 2.0 * spec.H
    t = pts[:, None]
    s = pts[None, :]
    return spec.C_H * (t ** H2 + s ** H2 - np.abs(t - s) ** H2)


def sample_fbm(grid: TimeGrid, spec: NoiseSpec) -> NoisePath:
    """Exact Gaussian sample of W on the grid (Cholesky), W(0) = 0."""
    if grid.n_points - 1 > 2 ** 14:
        raise ValueError("grid too large for dense Cholesky sampling")
    pts = grid.points[1:]
    gram = _cov_matrix(pts, spec)
    try:
        chol = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError:
        try:
            chol = np.linalg.cholesky(gram + 1e-12 * np.eye(len(pts)))
        except np.linalg.LinAlgError as exc:
            raise RuntimeError("covariance matrix not positive definite") from exc
    rng = np.random.default_rng(spec.seed)
    z = rng.standard_normal((len(pts), spec.m))
    w = chol @ z
    vals = np.zeros((grid.n_points, spec.m))
    vals[1:] = w
    if spec.m == 1:
        vals = vals[:, 0]
    return NoisePath(GridFunction(grid, vals, causal=True), spec)


# per grid cell, 8-point Gauss-Legendre resolves the analytic bump factors
_GLN, _GLW = np.polynomial.legendre.leggauss(8)


def _path_interp(path_vals: np.ndarray, grid: TimeGrid, t: np.ndarray) -> np.ndarray:
    """Piecewise-linear evaluation of the path, zero before time zero."""
    flat = path_vals.reshape(grid.n_points, -1)
    out = np.empty(t.shape + (flat.shape[1],))
    for c in range(flat.shape[1]):
        out[..., c] = np.interp(t, grid.points, flat[:, c], left=0.0)
    return out.reshape(t.shape + path_vals.shape[1:])


def mollify_on(path: NoisePath, eps: float, t_eval: np.ndarray,
               grid_step: float | None = None) -> np.ndarray:
    """xi_eps at arbitrary times: int rho_eps'(t - s) W(s) ds.

    The path is read as its piecewise-linear interpolant.  Integration cells
    in u = t - s are aligned with the path's grid kinks (cell edges at
    u = t - t_j), so each cell's integrand is analytic and the per-cell
    Gauss-Legendre rule resolves the integral to near machine precision.
    """
    grid = path.W.grid
    h = grid.step if grid_step is None else grid_step
    moll = Mollifier(eps)
    t_eval = np.asarray(t_eval, dtype=float)
    flat_t = np.atleast_1d(t_eval).ravel()
    acc = np.zeros((flat_t.size,) + path.W.values.shape[1:])

    # group evaluation times by their offset within a grid cell
    frac = np.round(np.mod(flat_t / h, 1.0), 9) % 1.0
    for delta in np.unique(frac):
        sel = frac == delta
        ts = flat_t[sel]
        edges = [0.0]
        if delta > 0.0:
            edges.append(min(delta * h, eps))
        k = 0
        while (delta + k) * h < eps:
            edges.append(min((delta + k + 1) * h, eps))
            k += 1
        edges = np.unique(edges)
        part = np.zeros((ts.size,) + path.W.values.shape[1:])
        for a, b in zip(edges[:-1], edges[1:]):
            mid, rad = 0.5 * (a + b), 0.5 * (b - a)
            if rad <= 0.0:
                continue
            u = mid + rad * _GLN
            kern = moll.derivative(u) * (rad * _GLW)
            s = ts[:, None] - u
            wvals = _path_interp(path.W.values, grid, s)  # (nt, k) + comp
            part += np.tensordot(wvals, kern, axes=([1], [0]))
        acc[sel] = part
    return acc.reshape(t_eval.shape + path.W.values.shape[1:])


def mollify(path: NoisePath, eps: float) -> GridFunction:
    """The mollified noise xi_eps on the path's own grid."""
    grid = path.W.grid
    if eps < 4.0 * grid.step:
        raise ValueError(f"eps={eps} under-resolved: need eps >= 4h = {4 * grid.step}")
    vals = mollify_on(path, eps, grid.points)
    return GridFunction(grid, vals, causal=True)


def smooth_w(path: NoisePath, eps: float) -> GridFunction:
    """rho_eps * W on the grid -- the mollified path itself."""
    grid = path.W.grid
    moll = Mollifier(eps)
    h = grid.step
    n_cells = int(math.ceil(eps / h))
    acc = np.zeros_like(path.W.values)
    for c in range(n_cells):
        a, b = c * h, min((c + 1) * h, eps)
        mid, rad = 0.5 * (a + b), 0.5 * (b - a)
        if rad <= 0.0:
            continue
        u = mid + rad * _GLN
        kern = moll.value(u) * (rad * _GLW)
        s = grid.points[:, None] - u
        wvals = _path_interp(path.W.values, grid, s)  # (t, k, *comp)
        acc += np.einsum("tk...,k->t...", wvals, kern)
    return GridFunction(grid, acc, causal=True)


def cov_eps(t: float, s: float, eps: float, spec: NoiseSpec,
            panels: int = 12) -> float:
    """Mollified noise covariance by 2D Gauss quadrature.

    Cov_eps(t,s) = int int rho_eps'(t-a) rho_eps'(s-b) Cov_W(a,b) da db,
    panels split each mollifier support so the |a-b|^{2H} diagonal kink and
    the quadrant boundary are resolved.
    """
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    moll = Mollifier(eps)
    edges_a = t - np.linspace(0.0, eps, panels + 1)[::-1]
    edges_b = s - np.linspace(0.0, eps, panels + 1)[::-1]
    H2 = 2.0 * spec.H
    total = 0.0
    for a0, a1 in zip(edges_a[:-1], edges_a[1:]):
        am, ar = 0.5 * (a0 + a1), 0.5 * (a1 - a0)
        av = am + ar * _GLN
        wa = moll.derivative(t - av) * (ar * _GLW)
        for b0, b1 in zip(edges_b[:-1], edges_b[1:]):
            bm, br = 0.5 * (b0 + b1), 0.5 * (b1 - b0)
            bv = bm + br * _GLN
            wb = moll.derivative(s - bv) * (br * _GLW)
            A = av[:, None]
            B = bv[None, :]
            cov = np.where((A > 0) & (B > 0),
                           spec.C_H * (np.abs(A) ** H2 + np.abs(B) ** H2
                                       - np.abs(A - B) ** H2), 0.0)
            total += float(wa @ cov @ wb)
    return total
