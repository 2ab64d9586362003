"""Truncated scale flow for the force coefficients.

Coefficients zeta^tau live on banded arrays: the root time is pinned (the
universal root delta is factored out) and every non-root node is stored by
its offset from its parent, which stays within [0, 2*mu] along the whole
flow.  The flow couples the four driving trees hierarchically; the noise
coefficient never moves.

The same module evaluates the effective force F_mu[v], its directional
derivative DF_mu[v, w], and the overflow term I_mu[v] generated by graft
results falling outside the driving set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .differentials import DomainError, VectorField
from .kernels import GridFunction, TimeGrid, chi, gdot_mu
from .trees import CHAIN3, CHERRY, SINGLE, STAR3, Tree, ind_set

__all__ = [
    "ForceCoefficient", "ForceState",
    "init_force", "closed_form_cherry", "closed_form_chain", "closed_form_star",
    "flow_step", "check_support", "flow_scale_grid", "run_flow",
    "eval_force", "eval_DF", "eval_I", "overflow_pairs",
    "FlowForceFamily", "ClosedForceFamily",
]

#: driving trees in evaluation order
DRIVING = (SINGLE, CHERRY, CHAIN3, STAR3)

#: extra zero cells kept beyond the support band, for support verification
SUPPORT_MARGIN = 4


def _assert_index_structure():
    """The hard-coded flow routing must match the combinatorial index sets."""
    ind_c = {(e.tau1, e.tau2, e.positions) for e in ind_set(CHERRY)}
    assert ind_c == {(SINGLE, SINGLE, (0,))}
    ind_ch = {(e.tau1, e.tau2, e.positions) for e in ind_set(CHAIN3)}
    assert ind_ch == {(SINGLE, CHERRY, (0,)), (CHERRY, SINGLE, (1,))}
    ind_st = {(e.tau1, e.tau2, e.positions) for e in ind_set(STAR3)}
    assert ind_st == {(CHERRY, SINGLE, (0,))}


_assert_index_structure()


def edge_band_pts(mu: float, h: float) -> int:
    """Grid cells per parent-relative edge offset: ceil(2 mu / h)."""
    return int(math.ceil(2.0 * mu / h - 1e-12))


def w_profile(mu: float, h: float, npts: int) -> np.ndarray:
    """(G - G_mu)(k h) = 1 - chi(k h / mu) for offsets k = 0..npts."""
    x = np.arange(npts + 1) * h
    return 1.0 - np.asarray(chi(x / mu), dtype=float)


def gdot_points(mu: float, h: float, npts: int) -> np.ndarray:
    """gdot_mu sampled at offsets k h, k = 0..npts."""
    return np.asarray(gdot_mu(np.arange(npts + 1) * h, mu), dtype=float)


@dataclass
class ForceCoefficient:
    """Banded values of one reduced force coefficient zeta^tau at scale mu.

    ``zeta`` has shape (M+1,) + (B+1,)*order + (m,)*size: root time index,
    one parent-relative offset per edge (canonical preorder), one noise leg
    per node.
    """

    tree: Tree
    mu: float
    grid: TimeGrid
    m: int
    zeta: np.ndarray

    @property
    def band_pts(self) -> int:
        return 0 if self.tree.order == 0 else self.zeta.shape[1] - 1

    def copy(self) -> "ForceCoefficient":
        return ForceCoefficient(self.tree, self.mu, self.grid, self.m, self.zeta.copy())


@dataclass
class ForceState:
    """The family {zeta^tau}_{tau in T} at one scale, tied to one noise."""

    grid: TimeGrid
    eps: float
    mu: float
    xi: np.ndarray  # (M+1, m)
    coefficients: dict[Tree, ForceCoefficient]

    @property
    def m(self) -> int:
        return self.xi.shape[1]

    def copy(self) -> "ForceState":
        return ForceState(self.grid, self.eps, self.mu, self.xi,
                          {t: c.copy() for t, c in self.coefficients.items()})


def _xi2d(xi: GridFunction) -> np.ndarray:
    return xi.values.reshape(xi.grid.n_points, -1)


def _shift_rows(arr: np.ndarray, k: int) -> np.ndarray:
    """Row gather arr[i-k] with zero fill for i < k."""
    if k == 0:
        return arr
    out = np.zeros_like(arr)
    out[k:] = arr[:-k or None]
    return out


def _gather1(arr: np.ndarray, B: int) -> np.ndarray:
    """out[i, k] = arr[i-k] (zero below zero), k = 0..B."""
    M = arr.shape[0]
    idx = np.arange(M)[:, None] - np.arange(B + 1)[None, :]
    mask = idx >= 0
    out = arr[np.clip(idx, 0, None)]
    out[~mask] = 0.0
    return out


# ----------------------------------------------------------------------------
# closed-form coefficients (exact solutions of the truncated flow)


def closed_form_cherry(xi: GridFunction, mu: float, band: int | None = None) -> ForceCoefficient:
    """zeta^cherry(s, s-kh) = (G - G_mu)(kh) xi(s) (x) xi(s-kh), exactly."""
    if not 0.0 < mu <= 1.0:
        raise ValueError("mu must lie in (0, 1]")
    grid = xi.grid
    x2 = _xi2d(xi)
    B = edge_band_pts(mu, grid.step) + SUPPORT_MARGIN if band is None else band
    w = w_profile(mu, grid.step, B)
    xg = _gather1(x2, B)
    zeta = np.einsum("ia,k,ikb->ikab", x2, w, xg)
    return ForceCoefficient(CHERRY, mu, grid, x2.shape[1], zeta)


def closed_form_chain(xi: GridFunction, mu: float, band: int | None = None) -> ForceCoefficient:
    """zeta^chain = w(k) w(l) xi(s) (x) xi(s-k) (x) xi(s-k-l)."""
    grid = xi.grid
    x2 = _xi2d(xi)
    B = edge_band_pts(mu, grid.step) + SUPPORT_MARGIN if band is None else band
    w = w_profile(mu, grid.step, B)
    xg1 = _gather1(x2, B)
    M = grid.n_points
    idx2 = np.arange(M)[:, None, None] - np.arange(B + 1)[None, :, None] \
        - np.arange(B + 1)[None, None, :]
    mask = idx2 >= 0
    xg2 = x2[np.clip(idx2, 0, None)]
    xg2[~mask] = 0.0
    zeta = np.einsum("ia,k,ikb,l,iklc->iklabc", x2, w, xg1, w, xg2)
    return ForceCoefficient(CHAIN3, mu, grid, x2.shape[1], zeta)


def closed_form_star(xi: GridFunction, mu: float, band: int | None = None) -> ForceCoefficient:
    """zeta^star = (1/2) w(k) w(l) xi(s) (x) xi(s-k) (x) xi(s-l)."""
    grid = xi.grid
    x2 = _xi2d(xi)
    B = edge_band_pts(mu, grid.step) + SUPPORT_MARGIN if band is None else band
    w = w_profile(mu, grid.step, B)
    xg = _gather1(x2, B)
    zeta = 0.5 * np.einsum("ia,k,ikb,l,ilc->iklabc", x2, w, xg, w, xg)
    return ForceCoefficient(STAR3, mu, grid, x2.shape[1], zeta)


def init_force(xi: GridFunction, eps: float, mu0: float | None = None) -> ForceState:
    """Initial force family at mu0 (default: one grid step).

    The noise coefficient is xi itself; the others carry their exact
    scale-integrals from 0 to mu0, which at this band-unresolved scale is
    just the closed form evaluated at mu0.
    """
    grid = xi.grid
    mu0 = grid.step if mu0 is None else mu0
    x2 = _xi2d(xi)
    m = x2.shape[1]
    coeffs = {
        SINGLE: ForceCoefficient(SINGLE, mu0, grid, m, x2),
        CHERRY: closed_form_cherry(xi, mu0),
        CHAIN3: closed_form_chain(xi, mu0),
        STAR3: closed_form_star(xi, mu0),
    }
    return ForceState(grid, eps, mu0, x2, coeffs)


# ----------------------------------------------------------------------------
# the flow step


def _embed(coef: ForceCoefficient, B: int) -> np.ndarray:
    """Zero-pad a banded array to band B (per edge axis)."""
    order = coef.tree.order
    if order == 0:
        return coef.zeta
    old = coef.band_pts
    if old == B:
        return coef.zeta
    shape = list(coef.zeta.shape)
    for ax in range(1, 1 + order):
        shape[ax] = B + 1
    out = np.zeros(shape, dtype=float)
    sl = tuple([slice(None)] + [slice(0, old + 1)] * order)
    out[sl] = coef.zeta
    return out


def _rhs(xi2: np.ndarray, z_c: np.ndarray, mu: float, grid: TimeGrid,
         B: int) -> dict[Tree, np.ndarray]:
    """Right-hand side of the flow at scale mu, on band-B arrays.

    Cherry is driven by noise*noise; chain by cherry-at-leaf and
    noise-onto-cherry grafts; star by the root graft of noise onto cherry,
    symmetrized over its two branches.
    """
    h = grid.step
    gd = gdot_points(mu, h, B)
    xg1 = _gather1(xi2, B)

    rhs_c = -np.einsum("ia,k,ikb->ikab", xi2, gd, xg1)

    M = grid.n_points
    idx2 = np.arange(M)[:, None, None] - np.arange(B + 1)[None, :, None] \
        - np.arange(B + 1)[None, None, :]
    mask = idx2 >= 0
    xg2 = xi2[np.clip(idx2, 0, None)]
    xg2[~mask] = 0.0
    # graft noise below the cherry leaf: zeta^c(s, s-k) gdot(l) xi(s-k-l)
    t1 = np.einsum("ikab,l,iklc->iklabc", z_c, gd, xg2)
    # graft the cherry below the noise root: xi(s) gdot(k) zeta^c(s-k, l)
    m = xi2.shape[1]
    zg = np.zeros((M, B + 1, B + 1, m, m))
    for k in range(B + 1):
        zg[:, k] = _shift_rows(z_c, k)
    t2 = np.einsum("ia,k,iklbc->iklabc", xi2, gd, zg)
    rhs_ch = -(t1 + t2)

    # root graft of noise onto the cherry: zeta^c(s, s-k) gdot(l) xi(s-l)
    raw = np.einsum("ikab,l,ilc->iklabc", z_c, gd, xg1)
    rhs_st = -0.5 * (raw + raw.transpose(0, 2, 1, 3, 5, 4))
    return {CHERRY: rhs_c, CHAIN3: rhs_ch, STAR3: rhs_st}


def flow_step(state: ForceState, d_mu: float, check: bool = False) -> ForceState:
    """One explicit-midpoint step of the coupled flow, mu -> mu + d_mu."""
    if d_mu > state.mu / 4.0 + 1e-14:
        raise ValueError(f"step {d_mu} too large for mu={state.mu} (need <= mu/4)")
    grid, mu = state.grid, state.mu
    B_new = edge_band_pts(mu + d_mu, grid.step) + SUPPORT_MARGIN
    z = {t: _embed(state.coefficients[t], B_new) for t in (CHERRY, CHAIN3, STAR3)}

    k1 = _rhs(state.xi, z[CHERRY], mu, grid, B_new)
    mid_c = z[CHERRY] + 0.5 * d_mu * k1[CHERRY]
    k2 = _rhs(state.xi, mid_c, mu + 0.5 * d_mu, grid, B_new)

    coeffs = {SINGLE: ForceCoefficient(SINGLE, mu + d_mu, grid, state.m, state.xi)}
    for t in (CHERRY, CHAIN3, STAR3):
        coeffs[t] = ForceCoefficient(t, mu + d_mu, grid, state.m,
                                     z[t] + d_mu * k2[t])
    out = ForceState(grid, state.eps, mu + d_mu, state.xi, coeffs)
    if check:
        check_support(out)
    return out


def check_support(state: ForceState, tol: float = 1e-13) -> None:
    """Assert every coefficient vanishes outside its support band.

    Parent-relative offsets must die beyond 2*mu (within one grid cell),
    which implies the total window [t - 2 mu o(tau), t]; roots at t <= 0
    must carry zeros by causality of the noise.
    """
    h = state.grid.step
    scale = max(1.0, float(np.max(np.abs(state.xi)))) ** 3
    limit = edge_band_pts(state.mu, h) + 1  # one-cell slack
    for tree, coef in state.coefficients.items():
        if tree.order == 0:
            continue
        for ax in range(1, 1 + tree.order):
            sl = [slice(None)] * coef.zeta.ndim
            sl[ax] = slice(limit + 1, None)
            bad = np.max(np.abs(coef.zeta[tuple(sl)])) if coef.zeta[tuple(sl)].size else 0.0
            if bad > tol * scale:
                raise AssertionError(
                    f"support violation for {tree!r} at mu={state.mu}: "
                    f"|zeta|={bad:.2e} beyond offset {limit}")


def flow_scale_grid(h: float, top: float, per_octave: int = 8) -> np.ndarray:
    """Geometric mu ladder from mu0 = h up to ``top`` (included)."""
    if top <= h:
        raise ValueError("top scale must exceed the grid step")
    n = int(math.ceil(math.log2(top / h) * per_octave))
    grid = h * 2.0 ** (np.arange(n + 1) / per_octave)
    grid[-1] = top
    if grid[-1] <= grid[-2]:
        grid = np.delete(grid, -2)
    return grid


def run_flow(xi: GridFunction, eps: float, scales: np.ndarray,
             check: bool = False) -> list[ForceState]:
    """Flow from scales[0] (init) through the ladder, keeping every state."""
    state = init_force(xi, eps, mu0=scales[0])
    out = [state]
    for nu in scales[1:]:
        while state.mu < nu - 1e-15:
            d = min(nu - state.mu, state.mu / 4.0)
            state = flow_step(state, d, check=check)
        out.append(state)
    return out


# ----------------------------------------------------------------------------
# force / derivative / overflow evaluation, scalar state (n = 1)


def _trap_weights(B: int, h: float) -> np.ndarray:
    wt = np.full(B + 1, h)
    wt[0] = 0.5 * h
    return wt


def _phi(field: VectorField, x: np.ndarray, order: int) -> np.ndarray:
    """V^(order) along the state path, shape (M+1, m); n = 1 only."""
    return field.scalar_derivative(order, x)


def _pair_scalar(coef: ForceCoefficient, payloads: list[np.ndarray],
                 h: float) -> np.ndarray:
    """Companion-integrated contraction of a coefficient with node payloads.

    ``payloads[j]`` is an (M+1, m) array: the j-th node's factor evaluated
    along the grid.  Returns the (M+1,) force contribution.
    """
    tree = coef.tree
    z = coef.zeta
    if tree == SINGLE:
        return np.einsum("ia,ia->i", z, payloads[0])
    B = coef.band_pts
    wt = _trap_weights(B, h)
    if tree == CHERRY:
        P1 = _gather1(payloads[1], B)
        return np.einsum("ikab,ia,ikb,k->i", z, payloads[0], P1, wt)
    if tree == CHAIN3:
        M = z.shape[0]
        P1 = _gather1(payloads[1], B)
        idx2 = np.arange(M)[:, None, None] - np.arange(B + 1)[None, :, None] \
            - np.arange(B + 1)[None, None, :]
        mask = idx2 >= 0
        P2 = payloads[2][np.clip(idx2, 0, None)]
        P2[~mask] = 0.0
        return np.einsum("iklabc,ia,ikb,iklc,k,l->i", z, payloads[0], P1, P2, wt, wt)
    if tree == STAR3:
        P1 = _gather1(payloads[1], B)
        P2 = _gather1(payloads[2], B)
        return np.einsum("iklabc,ia,ikb,ilc,k,l->i", z, payloads[0], P1, P2, wt, wt)
    raise ValueError(f"unsupported tree {tree!r}")


def _state_path(v: GridFunction, u0: np.ndarray, field: VectorField) -> np.ndarray:
    x = v.values.reshape(v.grid.n_points, -1)[:, 0] + float(np.asarray(u0).reshape(-1)[0])
    bad = np.abs(x) > field.domain_radius
    if np.any(bad):
        t_bad = v.grid.points[np.argmax(bad)]
        raise DomainError(f"state leaves the trusted ball at t={t_bad:.4g}")
    return x


def _active(field: VectorField, trees) -> list[Tree]:
    """Drop trees whose elementary differential vanishes identically."""
    need = {SINGLE: 0, CHERRY: 1, CHAIN3: 1, STAR3: 2}
    out = []
    for t in trees:
        if field.max_derivative_order is None or need[t] <= field.max_derivative_order:
            out.append(t)
    return out


def eval_force(state: ForceState, v: GridFunction, u0, field: VectorField,
               trees=DRIVING) -> GridFunction:
    """Effective force F_mu[v] for scalar state (n = 1)."""
    if field.n != 1:
        return _eval_force_general(state, v, u0, field, trees)
    x = _state_path(v, u0, field)
    h = state.grid.step
    out = np.zeros(state.grid.n_points)
    phis = {d: _phi(field, x, d) for d in range(3)}
    payload_map = {
        SINGLE: [phis[0]],
        CHERRY: [phis[1], phis[0]],
        CHAIN3: [phis[1], phis[1], phis[0]],
        STAR3: [phis[2], phis[0], phis[0]],
    }
    for t in _active(field, trees):
        out += _pair_scalar(state.coefficients[t], payload_map[t], h)
    return GridFunction(state.grid, out, causal=True)


def eval_DF(state: ForceState, v: GridFunction, u0, field: VectorField,
            w: GridFunction, trees=DRIVING) -> GridFunction:
    """Directional derivative DF_mu[v, w] for scalar state (n = 1)."""
    if field.n != 1:
        return _eval_DF_general(state, v, u0, field, w, trees)
    x = _state_path(v, u0, field)
    wv = w.values.reshape(w.grid.n_points, -1)[:, 0]
    h = state.grid.step
    out = np.zeros(state.grid.n_points)
    phis = {d: _phi(field, x, d) for d in range(4)}

    def bump(d):
        return phis[d + 1] * wv[:, None]

    node_orders = {SINGLE: [0], CHERRY: [1, 0], CHAIN3: [1, 1, 0], STAR3: [2, 0, 0]}
    for t in _active(field, trees):
        orders = node_orders[t]
        base = [phis[d] for d in orders]
        for j in range(len(orders)):
            if field.max_derivative_order is not None \
                    and orders[j] + 1 > field.max_derivative_order:
                continue
            payloads = list(base)
            payloads[j] = bump(orders[j])
            out += _pair_scalar(state.coefficients[t], payloads, h)
    return GridFunction(state.grid, out, causal=True)


def overflow_pairs() -> list[tuple[Tree, Tree]]:
    """Graft pairs whose results land outside the driving set (order >= 3)."""
    return [(t1, t2) for t1 in DRIVING for t2 in DRIVING
            if t1.order + t2.order + 1 >= 3]


def eval_I(state: ForceState, v: GridFunction, u0, field: VectorField) -> GridFunction:
    """Overflow term I_mu[v]: graft terms projected out of the driving set.

    Equal to the sum over overflow pairs (tau1, tau2) of the tau1-restricted
    directional derivative in the direction gdot_mu * F^{tau2}[v]; grouping
    by tau1 collapses this to one DF-evaluation per driving tree.
    """
    grid, h, mu = state.grid, state.grid.step, state.mu
    B = edge_band_pts(mu, h)
    gw = gdot_points(mu, h, B) * _trap_weights(B, h)

    links: dict[Tree, GridFunction] = {}
    for t2 in _active(field, DRIVING):
        f2 = eval_force(state, v, u0, field, trees=(t2,))
        links[t2] = GridFunction(grid, band_apply_weights(gw, f2.values), causal=True)

    out = np.zeros(grid.n_points)
    for t1 in _active(field, DRIVING):
        partners = [t2 for (a, t2) in overflow_pairs() if a == t1]
        w_tot = np.zeros(grid.n_points)
        got = False
        for t2 in partners:
            if t2 in links:
                w_tot = w_tot + links[t2].values
                got = True
        if got:
            out += eval_DF(state, v, u0, field,
                           GridFunction(grid, w_tot, causal=True), trees=(t1,)).values
    return GridFunction(grid, out, causal=True)


def band_apply_weights(weights: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Causal band convolution y_i = sum_k w_k x_{i-k} for plain arrays."""
    pad = len(weights) - 1
    ext = np.concatenate([np.zeros((pad,) + values.shape[1:]), values], axis=0)
    if ext.ndim == 1:
        return np.convolve(ext, weights, mode="valid")
    flat = ext.reshape(ext.shape[0], -1)
    out = np.stack([np.convolve(flat[:, c], weights, mode="valid")
                    for c in range(flat.shape[1])], axis=1)
    return out.reshape((values.shape[0],) + values.shape[1:])


# ----------------------------------------------------------------------------
# general-n evaluation (small grids; tensor-valued states)


def _dgrids(field: VectorField, xg: np.ndarray, orders) -> dict[int, np.ndarray]:
    out = {}
    for d in set(orders):
        cb = field.derivative(d)
        rows = [np.asarray(cb(x)) for x in xg]
        out[d] = np.stack(rows, axis=0)
    return out


def _state_path_general(v: GridFunction, u0, field: VectorField) -> np.ndarray:
    xg = v.values.reshape(v.grid.n_points, field.n) + np.asarray(u0, dtype=float).reshape(field.n)
    norms = np.linalg.norm(xg, axis=1)
    if np.any(norms > field.domain_radius):
        t_bad = v.grid.points[int(np.argmax(norms > field.domain_radius))]
        raise DomainError(f"state leaves the trusted ball at t={t_bad:.4g}")
    return xg


def _pair_general(coef: ForceCoefficient, field: VectorField, xg: np.ndarray,
                  h: float, bump: int | None = None,
                  wg: np.ndarray | None = None) -> np.ndarray:
    """Tensor contraction for general n; ``bump`` marks the derivative node.

    xg is the state path (M+1, n); wg the direction path (M+1, n) when bump
    is set.  Returns (M+1, n).
    """
    tree, z, B = coef.tree, coef.zeta, coef.band_pts
    M = xg.shape[0]
    maxo = field.max_derivative_order

    def D(order, gathered=None):
        if maxo is not None and order > maxo:
            shape = (M, field.n, field.m) + (field.n,) * order
            return np.zeros(shape)
        grids = _dgrids(field, xg, [order])
        return grids[order]

    def coll(idx, arr):
        mask = idx >= 0
        out = arr[np.clip(idx, 0, None)]
        out[~mask] = 0.0
        return out

    if tree == SINGLE:
        if bump is None:
            V0 = D(0)
            return np.einsum("ixa,ia->ix", V0, z)
        V1 = np.einsum("ixap,ip->ixa", D(1), wg)
        return np.einsum("ixa,ia->ix", V1, z)

    wt = _trap_weights(B, h)
    k_idx = np.arange(M)[:, None] - np.arange(B + 1)[None, :]
    if tree == CHERRY:
        D1 = D(2) if bump == 0 else D(1)
        if bump == 0:
            D1 = np.einsum("ixapq,iq->ixap", D1, wg)
        V0g = coll(k_idx, D(1) if bump == 1 else D(0))
        if bump == 1:
            V0g = np.einsum("ikpbr,ikr->ikpb", V0g, coll(k_idx, wg))
        ups = np.einsum("ixap,ikpb->ikxab", D1, V0g)
        return np.einsum("ikxab,ikab,k->ix", ups, z, wt)
    if tree == CHAIN3:
        idx2 = k_idx[:, :, None] - np.arange(B + 1)[None, None, :]
        Droot = D(2) if bump == 0 else D(1)
        if bump == 0:
            Droot = np.einsum("ixapq,iq->ixap", Droot, wg)
        Dmid = D(2) if bump == 1 else D(1)
        Dmid_g = coll(k_idx, Dmid)
        if bump == 1:
            Dmid_g = np.einsum("ikpbqr,ikr->ikpbq", Dmid_g, coll(k_idx, wg))
        Vleaf = D(1) if bump == 2 else D(0)
        Vleaf_g = coll(idx2, Vleaf)
        if bump == 2:
            Vleaf_g = np.einsum("iklqcr,iklr->iklqc", Vleaf_g, coll(idx2, wg))
        ups = np.einsum("ixap,ikpbq,iklqc->iklxabc", Droot, Dmid_g, Vleaf_g)
        return np.einsum("iklxabc,iklabc,k,l->ix", ups, z, wt, wt)
    if tree == STAR3:
        Droot = D(3) if bump == 0 else D(2)
        if bump == 0:
            Droot = np.einsum("ixapqr,ir->ixapq", Droot, wg)
        V1 = D(1) if bump == 1 else D(0)
        V1g = coll(k_idx, V1)
        if bump == 1:
            V1g = np.einsum("ikpbr,ikr->ikpb", V1g, coll(k_idx, wg))
        V2 = D(1) if bump == 2 else D(0)
        V2g = coll(k_idx, V2)
        if bump == 2:
            V2g = np.einsum("ilqcr,ilr->ilqc", V2g, coll(k_idx, wg))
        ups = np.einsum("ixapq,ikpb,ilqc->iklxabc", Droot, V1g, V2g)
        return np.einsum("iklxabc,iklabc,k,l->ix", ups, z, wt, wt)
    raise ValueError(f"unsupported tree {tree!r}")


def _eval_force_general(state: ForceState, v: GridFunction, u0,
                        field: VectorField, trees) -> GridFunction:
    xg = _state_path_general(v, u0, field)
    out = np.zeros((state.grid.n_points, field.n))
    for t in _active(field, trees):
        out += _pair_general(state.coefficients[t], field, xg, state.grid.step)
    return GridFunction(state.grid, out, causal=True)


def _eval_DF_general(state: ForceState, v: GridFunction, u0,
                     field: VectorField, w: GridFunction, trees) -> GridFunction:
    xg = _state_path_general(v, u0, field)
    wg = w.values.reshape(w.grid.n_points, field.n)
    out = np.zeros((state.grid.n_points, field.n))
    node_counts = {SINGLE: 1, CHERRY: 2, CHAIN3: 3, STAR3: 3}
    for t in _active(field, trees):
        for j in range(node_counts[t]):
            out += _pair_general(state.coefficients[t], field, xg,
                                 state.grid.step, bump=j, wg=wg)
    return GridFunction(state.grid, out, causal=True)


# ----------------------------------------------------------------------------
# force families consumed by the remainder solver


class FlowForceFamily:
    """Force data on a scale ladder, backed by flowed coefficient arrays."""

    def __init__(self, xi: GridFunction, eps: float, scales: np.ndarray,
                 check_supports: bool = False):
        self.xi = xi
        self.eps = eps
        self.scales = np.asarray(scales, dtype=float)
        self.states = run_flow(xi, eps, self.scales, check=check_supports)

    def truncate(self, n_scales: int) -> "FlowForceFamily":
        out = object.__new__(FlowForceFamily)
        out.xi, out.eps = self.xi, self.eps
        out.scales = self.scales[:n_scales]
        out.states = self.states[:n_scales]
        return out

    def force(self, j: int, v: GridFunction, u0, field: VectorField) -> GridFunction:
        return eval_force(self.states[j], v, u0, field)

    def dforce(self, j: int, v: GridFunction, u0, field: VectorField,
               w: GridFunction) -> GridFunction:
        return eval_DF(self.states[j], v, u0, field, w)

    def overflow(self, j: int, v: GridFunction, u0, field: VectorField) -> GridFunction:
        return eval_I(self.states[j], v, u0, field)


class ClosedForceFamily:
    """Force data built from the closed-form coefficients (n = 1 only).

    Every evaluation composes 1D band convolutions against the profile
    w_mu = 1 - chi(./mu), so no 3-index coefficient arrays are materialized;
    this is what makes large grids affordable.
    """

    def __init__(self, xi: GridFunction, eps: float, scales: np.ndarray):
        self.xi = xi
        self.eps = eps
        self.scales = np.asarray(scales, dtype=float)
        self._xi2 = _xi2d(xi)
        self._grid = xi.grid

    def truncate(self, n_scales: int) -> "ClosedForceFamily":
        return ClosedForceFamily(self.xi, self.eps, self.scales[:n_scales])

    def _w_conv(self, mu: float):
        h = self._grid.step
        B = edge_band_pts(mu, h)
        wts = w_profile(mu, h, B) * _trap_weights(B, h)
        return lambda sig: band_apply_weights(wts, sig)

    def _factors(self, v: GridFunction, u0, field: VectorField) -> dict[int, np.ndarray]:
        x = _state_path(v, u0, field)
        return {d: np.einsum("ia,ia->i", self._xi2, _phi(field, x, d))
                for d in range(4)}

    @staticmethod
    def _tree_value(tree: Tree, fac: list[np.ndarray], conv) -> np.ndarray:
        if tree == SINGLE:
            return fac[0]
        if tree == CHERRY:
            return fac[0] * conv(fac[1])
        if tree == CHAIN3:
            return fac[0] * conv(fac[1] * conv(fac[2]))
        if tree == STAR3:
            return 0.5 * fac[0] * conv(fac[1]) * conv(fac[2])
        raise ValueError(f"unsupported tree {tree!r}")

    _NODE_ORDERS = {SINGLE: [0], CHERRY: [1, 0], CHAIN3: [1, 1, 0], STAR3: [2, 0, 0]}

    def _force_values(self, mu: float, a: dict[int, np.ndarray],
                      field: VectorField, trees) -> np.ndarray:
        conv = self._w_conv(mu)
        out = np.zeros(self._grid.n_points)
        for t in _active(field, trees):
            fac = [a[d] for d in self._NODE_ORDERS[t]]
            out += self._tree_value(t, fac, conv)
        return out

    def force(self, j: int, v: GridFunction, u0, field: VectorField,
              trees=DRIVING) -> GridFunction:
        a = self._factors(v, u0, field)
        vals = self._force_values(self.scales[j], a, field, trees)
        return GridFunction(self._grid, vals, causal=True)

    def _dforce_values(self, mu: float, v, u0, field, w_vals: np.ndarray,
                       trees) -> np.ndarray:
        x = _state_path(v, u0, field)
        conv = self._w_conv(mu)
        a = self._factors(v, u0, field)
        aw = {d: np.einsum("ia,ia->i", self._xi2, _phi(field, x, d + 1)) * w_vals
              for d in range(3)}
        out = np.zeros(self._grid.n_points)
        for t in _active(field, trees):
            orders = self._NODE_ORDERS[t]
            for j in range(len(orders)):
                if field.max_derivative_order is not None \
                        and orders[j] + 1 > field.max_derivative_order:
                    continue
                fac = [a[d] for d in orders]
                fac[j] = aw[orders[j]]
                out += self._tree_value(t, fac, conv)
        return out

    def dforce(self, j: int, v: GridFunction, u0, field: VectorField,
               w: GridFunction) -> GridFunction:
        wv = w.values.reshape(self._grid.n_points, -1)[:, 0]
        vals = self._dforce_values(self.scales[j], v, u0, field, wv, DRIVING)
        return GridFunction(self._grid, vals, causal=True)

    def overflow(self, j: int, v: GridFunction, u0, field: VectorField) -> GridFunction:
        mu = self.scales[j]
        h = self._grid.step
        B = edge_band_pts(mu, h)
        gw = gdot_points(mu, h, B) * _trap_weights(B, h)
        a = self._factors(v, u0, field)
        conv = self._w_conv(mu)
        links = {}
        for t2 in _active(field, DRIVING):
            f2 = self._tree_value(t2, [a[d] for d in self._NODE_ORDERS[t2]], conv)
            links[t2] = band_apply_weights(gw, f2)
        out = np.zeros(self._grid.n_points)
        for t1 in _active(field, DRIVING):
            partners = [t2 for (x1, t2) in overflow_pairs() if x1 == t1]
            w_tot = np.zeros(self._grid.n_points)
            got = False
            for t2 in partners:
                if t2 in links:
                    w_tot += links[t2]
                    got = True
            if got:
                out += self._dforce_values(mu, v, u0, field, w_tot, (t1,))
        return GridFunction(self._grid, out, causal=True)
