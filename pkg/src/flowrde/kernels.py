"""Scale-space kernel algebra on a uniform time grid.

Provides the smooth cutoff ``chi`` and the derived cut-off Green's function
G_mu, its scale derivative, the exponential smoothing kernels Q_mu and
K_{N,mu}, the differential operators (1 + mu d/dt)^N, closed-form composite
kernels used by the remainder solver, and Besov-norm estimators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import gammainc, gammainccinv

__all__ = [
    "TimeGrid", "GridFunction", "KernelOp",
    "chi", "chi_derivative", "g_mu", "gdot_mu", "gdot_mass",
    "gamma_kernel", "gamma_cell_weights", "gamma_truncation_radius",
    "convolve_K", "apply_P",
    "band_weights", "gdot_weights", "rdotg_kernel", "rdotg_weights",
    "r_dotg_kernel", "ktilde", "apply_ktilde", "besov_norm",
    "band_apply", "dyadic_mu_grid",
]

# ----------------------------------------------------------------------------
# grid and grid functions


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_i = i * 2^-level on [0, 1]."""

    level: int

    @property
    def step(self) -> float:
        return 2.0 ** (-self.level)

    @property
    def n_points(self) -> int:
        return 2 ** self.level + 1

    @property
    def points(self) -> np.ndarray:
        return np.arange(self.n_points) * self.step

    def coarsen(self, levels: int = 1) -> "TimeGrid":
        if levels > self.level:
            raise ValueError("cannot coarsen below level 0")
        return TimeGrid(self.level - levels)


@dataclass
class GridFunction:
    """Values of a (possibly tensor-valued) function of time on a TimeGrid.

    ``values`` has shape (n_points, *component_shape).  ``causal`` marks
    functions that vanish at t <= 0, which controls how convolutions extend
    them to negative times (zero vs. edge value).
    """

    grid: TimeGrid
    values: np.ndarray
    causal: bool = False
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape[0] != self.grid.n_points:
            raise ValueError(
                f"values length {self.values.shape[0]} != grid size {self.grid.n_points}")

    @property
    def component_shape(self) -> tuple[int, ...]:
        return self.values.shape[1:]

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values)))

    def copy(self) -> "GridFunction":
        return GridFunction(self.grid, self.values.copy(), self.causal, self.warnings)

    def with_values(self, values: np.ndarray) -> "GridFunction":
        return GridFunction(self.grid, values, self.causal, self.warnings)

    def restrict(self, coarse: TimeGrid) -> "GridFunction":
        """Restriction to a coarser dyadic grid (exact subsampling)."""
        stride = 2 ** (self.grid.level - coarse.level)
        return GridFunction(coarse, self.values[::stride].copy(), self.causal)

    def to_csv(self, path) -> None:
        flat = self.values.reshape(self.grid.n_points, -1)
        data = np.column_stack([self.grid.points, flat])
        header = "t," + ",".join(f"c{i}" for i in range(flat.shape[1]))
        np.savetxt(path, data, delimiter=",", header=header, comments="")

    @staticmethod
    def from_csv(path, component_shape: tuple[int, ...] = (),
                 causal: bool = False) -> "GridFunction":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        n = data.shape[0]
        level = int(round(math.log2(n - 1)))
        if 2 ** level + 1 != n:
            raise ValueError("CSV does not hold a dyadic grid")
        vals = data[:, 1:]
        if component_shape:
            vals = vals.reshape(n, *component_shape)
        else:
            vals = vals[:, 0] if vals.shape[1] == 1 else vals
        return GridFunction(TimeGrid(level), vals, causal=causal)


def _extend(values: np.ndarray, pad: int, causal: bool) -> np.ndarray:
    """Left-extension for causal convolutions."""
    if pad <= 0:
        return values
    if causal:
        left = np.zeros((pad,) + values.shape[1:])
    else:
        left = np.broadcast_to(values[0], (pad,) + values.shape[1:]).copy()
    return np.concatenate([left, values], axis=0)


def band_apply(weights: np.ndarray, f: GridFunction) -> np.ndarray:
    """Causal discrete convolution y_i = sum_k w_k f_{i-k}."""
    pad = len(weights) - 1
    ext = _extend(f.values, pad, f.causal)
    flat = ext.reshape(ext.shape[0], -1)
    out = np.empty((f.grid.n_points, flat.shape[1]))
    for c in range(flat.shape[1]):
        out[:, c] = np.convolve(flat[:, c], weights, mode="valid")
    return out.reshape(f.values.shape)


# ----------------------------------------------------------------------------
# cutoff function chi and the cut-off Green's function

# C^4 degree-9 smoothstep on [0,1], ascending powers u^5..u^9
_S4 = np.array([126.0, -420.0, 540.0, -315.0, 70.0])
_S4_POLY = np.concatenate([np.zeros(5), _S4])  # ascending coefficients


def _s4_deriv_coeffs(k: int) -> np.ndarray:
    c = _S4_POLY.copy()
    for _ in range(k):
        c = np.polynomial.polynomial.polyder(c)
    return c


_S4_DERIVS = [_s4_deriv_coeffs(k) for k in range(11)]


def chi(x) -> np.ndarray | float:
    """Smooth increasing cutoff: 0 on (-inf,1], 1 on [2,inf), C^4 smoothstep between."""
    x = np.asarray(x, dtype=float)
    out = np.where(x >= 2.0, 1.0, 0.0)
    mid = (x > 1.0) & (x < 2.0)
    if np.any(mid):
        out = np.array(out, dtype=float)
        out[mid] = np.polynomial.polynomial.polyval(x[mid] - 1.0, _S4_POLY)
    return out if out.ndim else float(out)


def chi_derivative(x, k: int):
    """k-th derivative of chi (k >= 1); piecewise polynomial, zero off (1,2)."""
    if k == 0:
        return chi(x)
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    mid = (x > 1.0) & (x < 2.0)
    if np.any(mid):
        out[mid] = np.polynomial.polynomial.polyval(x[mid] - 1.0, _S4_DERIVS[k])
    return out if out.ndim else float(out)


def g_mu(t, mu: float):
    """Cut-off Green's function G_mu(t) = chi(t/mu); G_0 is the Heaviside step."""
    t = np.asarray(t, dtype=float)
    if mu == 0.0:
        out = np.where(t >= 0.0, 1.0, 0.0)
        return out if out.ndim else float(out)
    return chi(t / mu)


def gdot_mu(t, mu: float):
    """Scale derivative of G_mu: -(t/mu^2) chi'(t/mu), supported on [mu, 2mu]."""
    if mu <= 0.0:
        raise ValueError("mu must be positive")
    t = np.asarray(t, dtype=float)
    out = -(t / mu ** 2) * chi_derivative(t / mu, 1)
    return out if out.ndim else float(out)


def gdot_mass() -> float:
    """Total mass of gdot_mu (scale independent): -int_0^inf (1 - chi(y)) dy = -3/2."""
    return -1.5


# ----------------------------------------------------------------------------
# exponential kernels K_{N,mu} = Q_mu^{*N}

#: dropped tail mass for truncated kernels
TAIL_MASS = 1e-12


def gamma_kernel(t, N: int, mu: float):
    """Closed form K_{N,mu}(t) = t^{N-1} e^{-t/mu} / ((N-1)! mu^N) on t >= 0."""
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    pos = t >= 0.0
    out[pos] = t[pos] ** (N - 1) * np.exp(-t[pos] / mu) / (math.factorial(N - 1) * mu ** N)
    return out if out.ndim else float(out)


def gamma_truncation_radius(N: int, mu: float, tail: float = TAIL_MASS) -> float:
    return float(mu * gammainccinv(N, tail))


def gamma_cell_weights(N: int, mu: float, h: float, tail: float = TAIL_MASS) -> np.ndarray:
    """Cell-integrated discrete kernel for K_{N,mu} on offsets k*h.

    Weight k holds the kernel mass of the cell around k*h, so the discrete
    kernel has total mass 1 - tail exactly and maps constants to constants.
    """
    radius = gamma_truncation_radius(N, mu, tail)
    n = max(1, int(math.ceil(radius / h)) + 1)
    edges = (np.arange(n + 1) - 0.5) * h
    edges[0] = 0.0
    cdf = gammainc(N, np.maximum(edges, 0.0) / mu)
    return np.diff(cdf)


def convolve_K(f: GridFunction, N: int, mu: float) -> GridFunction:
    """Smooth ``f`` with the mass-one kernel K_{N,mu} (causal convolution)."""
    if N < 1:
        raise ValueError("N must be >= 1")
    if mu <= 0.0:
        raise ValueError("mu must be positive")
    w = gamma_cell_weights(N, mu, f.grid.step)
    return f.with_values(band_apply(w, f))


# ----------------------------------------------------------------------------
# the differential operators P_{N,mu} = (1 + mu d/dt)^N


def _derivative_4th(values: np.ndarray, h: float) -> np.ndarray:
    """Fourth-order finite-difference d/dt along axis 0."""
    f = values
    d = np.empty_like(f)
    d[2:-2] = (-f[4:] + 8 * f[3:-1] - 8 * f[1:-3] + f[:-4]) / (12 * h)
    d[0] = (-25 * f[0] + 48 * f[1] - 36 * f[2] + 16 * f[3] - 3 * f[4]) / (12 * h)
    d[1] = (-3 * f[0] - 10 * f[1] + 18 * f[2] - 6 * f[3] + f[4]) / (12 * h)
    d[-2] = (3 * f[-1] + 10 * f[-2] - 18 * f[-3] + 6 * f[-4] - f[-5]) / (12 * h)
    d[-1] = (25 * f[-1] - 48 * f[-2] + 36 * f[-3] - 16 * f[-4] + 3 * f[-5]) / (12 * h)
    return d


def apply_P(f: GridFunction, N: int, mu: float) -> GridFunction:
    """(1 + mu d/dt)^N f by centred fourth-order differences."""
    h = f.grid.step
    vals = f.values
    for _ in range(N):
        vals = vals + mu * _derivative_4th(vals, h)
    warn = f.warnings
    if mu < h:
        warn = warn + (f"apply_P under-resolved: mu={mu} < h={h}",)
    return GridFunction(f.grid, vals, f.causal, warn)


# ----------------------------------------------------------------------------
# closed-form composite kernels

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(8)


def band_weights(fn, support: tuple[float, float], knots: tuple[float, ...],
                 h: float) -> tuple[np.ndarray, int]:
    """Cell-integrated weights of a compactly supported kernel.

    Returns (weights, first_offset): weight j is the integral of ``fn`` over
    the grid cell centred at (first_offset + j) * h, split at ``knots`` so
    piecewise-polynomial kernels integrate exactly under Gauss-Legendre.
    """
    lo, hi = support
    k0 = int(math.floor(lo / h + 0.5))
    k1 = int(math.ceil(hi / h - 0.5))
    pts = []
    for k in range(k0, k1 + 1):
        a, b = (k - 0.5) * h, (k + 0.5) * h
        cuts = sorted({a, b, *[x for x in (lo, hi, *knots) if a < x < b]})
        pts.append(cuts)
    weights = np.zeros(k1 - k0 + 1)
    for j, cuts in enumerate(pts):
        acc = 0.0
        for a, b in zip(cuts[:-1], cuts[1:]):
            mid, rad = 0.5 * (a + b), 0.5 * (b - a)
            acc += rad * np.dot(_GL_WEIGHTS, fn(mid + rad * _GL_NODES))
        weights[j] = acc
    return weights, k0


def gdot_weights(mu: float, h: float) -> tuple[np.ndarray, int]:
    """Cell-integrated weights of the kernel of gdot_mu (support [mu, 2mu])."""
    return band_weights(lambda t: gdot_mu(t, mu), (mu, 2 * mu), (1.5 * mu,), h)


def _chi_tilde_derivative(y: np.ndarray, k: int) -> np.ndarray:
    """k-th derivative of chi_tilde(y) = -y chi'(y)."""
    out = -(y * chi_derivative(y, k + 1))
    if k >= 1:
        out = out - k * chi_derivative(y, k)
    return out


def rdotg_kernel(t, mu_p: float, nu: float):
    """Kernel of (1 + mu_p d/dt)^4 applied to gdot_nu, for mu_p <= nu.

    Closed form nu^-1 sum_k C(4,k) (mu_p/nu)^k chi_tilde^(k)(t/nu); uses
    chi' .. chi^(5) only, so it stays an integrable function.
    """
    t = np.asarray(t, dtype=float)
    y = t / nu
    r = mu_p / nu
    acc = np.zeros_like(y)
    for k in range(5):
        acc += math.comb(4, k) * r ** k * _chi_tilde_derivative(y, k)
    out = acc / nu
    return out if out.ndim else float(out)


def rdotg_weights(mu_p: float, nu: float, h: float) -> tuple[np.ndarray, int]:
    """Cell-integrated weights of the composite (1 + mu_p d/dt)^4 gdot_nu."""
    if mu_p > nu:
        raise ValueError("need mu_p <= nu for the closed-form composite")
    return band_weights(lambda t: rdotg_kernel(t, mu_p, nu),
                        (nu, 2 * nu), (1.5 * nu,), h)


@dataclass(frozen=True)
class KernelOp:
    """A discretized convolution kernel with its metadata."""

    kind: str
    mu: float
    N: int
    truncation_radius: float
    weights: np.ndarray = field(repr=False)
    first_offset: int = 0

    def apply(self, f: GridFunction) -> GridFunction:
        if self.first_offset >= 0:
            w = np.concatenate([np.zeros(self.first_offset), self.weights])
            return f.with_values(band_apply(w, f))
        raise ValueError("non-causal kernel")

    def kernel_sup(self, h: float) -> float:
        """Sup of the underlying kernel, estimated from cell averages."""
        return float(np.max(np.abs(self.weights))) / h

    def kernel_l1(self) -> float:
        return float(np.sum(np.abs(self.weights)))


def r_dotg_kernel(mu: float, h: float) -> KernelOp:
    """The composite R_mu Gdot_mu = (1 + mu d/dt)^4 gdot_mu as a KernelOp."""
    w, k0 = rdotg_weights(mu, mu, h)
    return KernelOp("R_dotG", mu, 4, 2 * mu, w, k0)


# ----------------------------------------------------------------------------
# Ktilde_{mu,nu} = R_nu K_mu for nu <= mu


def ktilde(mu: float, nu: float) -> list[tuple[float, int]]:
    """Mixture decomposition of R_nu K_mu for 0 <= nu <= mu.

    (1 + nu d/dt) Q_mu = (nu/mu) delta + (1 - nu/mu) Q_mu, so the fourth
    power expands binomially into delta and Q_mu^{*k}; returns weight/k pairs,
    k = 0 denoting the identity.
    """
    if not 0 <= nu <= mu:
        raise ValueError(f"need 0 <= nu <= mu, got nu={nu}, mu={mu}")
    r = nu / mu
    return [(math.comb(4, k) * r ** (4 - k) * (1 - r) ** k, k) for k in range(5)]


def apply_ktilde(f: GridFunction, mu: float, nu: float) -> GridFunction:
    """Apply Ktilde_{mu,nu} = R_nu K_mu to a grid function."""
    terms = ktilde(mu, nu)
    out = np.zeros_like(f.values)
    for coef, k in terms:
        if coef == 0.0:
            continue
        if k == 0:
            out = out + coef * f.values
        else:
            out = out + coef * convolve_K(f, k, mu).values
    return f.with_values(out)


# ----------------------------------------------------------------------------
# Besov-norm estimators


def besov_norm(f: GridFunction, beta: float, mu_grid) -> float:
    """Finite-scale Hoelder-Besov seminorm surrogate.

    beta in (0,1): sup_mu mu^-beta ||(K_{4,mu} - Id) f||_inf;
    beta in (-2,0): sup_mu mu^-beta ||K_{ceil(-beta),mu} f||_inf.
    """
    mu_grid = np.atleast_1d(np.asarray(mu_grid, dtype=float))
    if mu_grid.size == 0:
        raise ValueError("mu grid is empty")
    if not (-2.0 < beta < 1.0) or beta == 0.0:
        raise ValueError(f"beta={beta} outside (-2,1) \\ {{0}}")
    best = 0.0
    for mu in mu_grid:
        if beta > 0:
            g = convolve_K(f, 4, mu).values - f.values
        else:
            g = convolve_K(f, math.ceil(-beta), mu).values
        best = max(best, float(mu ** (-beta) * np.max(np.abs(g))))
    return best


def dyadic_mu_grid(h: float, lo_factor: float = 4.0, hi: float = 0.25,
                   per_octave: int = 2) -> np.ndarray:
    """Geometric scale ladder over the resolved window [lo_factor*h, hi]."""
    lo = lo_factor * h
    if lo >= hi:
        raise ValueError("no resolved scales on this grid")
    n = int(math.floor(math.log2(hi / lo) * per_octave)) + 1
    return hi * 2.0 ** (-np.arange(n)[::-1] / per_octave)
