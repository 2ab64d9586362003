"""Elementary differentials of the driving vector field, indexed by trees.

A tree with nodes (root-first canonical preorder) stands for the recursive
contraction  d^k V(x_root)[U_1, ..., U_k]  where U_i are the child values;
each node carries one noise index, so the value for a tree with s nodes is a
tensor in R^n x (R^m)^s.  The per-node directional derivatives feed the
linearized force.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Callable

import numpy as np

from .trees import Tree

__all__ = [
    "VectorField", "DomainError", "DerivativeUnavailable",
    "upsilon", "upsilon_directional",
    "constant_field", "linear_field", "sin_field", "poly_field", "field_by_name",
]


class DomainError(ValueError):
    """State left the ball where the field's derivatives are trusted."""


class DerivativeUnavailable(RuntimeError):
    """A required derivative callback is missing."""


@dataclass
class VectorField:
    """The equation's nonlinearity V: R^n -> L(R^m, R^n) with derivatives.

    Derivative callbacks return total derivatives as tensors with trailing
    derivative slots: d1 -> (n,m,n), d2 -> (n,m,n,n), d3 -> (n,m,n,n,n).
    ``max_derivative_order`` is set when all higher derivatives vanish
    identically (constant: 0, linear: 1); None means generic.
    """

    n: int
    m: int
    eval: Callable[[np.ndarray], np.ndarray]
    d1: Callable[[np.ndarray], np.ndarray] | None = None
    d2: Callable[[np.ndarray], np.ndarray] | None = None
    d3: Callable[[np.ndarray], np.ndarray] | None = None
    domain_radius: float = np.inf
    max_derivative_order: int | None = None
    name: str = "custom"
    approx_derivatives: bool = dc_field(default=False)
    #: optional fast path (order, x-array) -> x.shape + (m,), n = 1 only
    vectorized: Callable[[int, np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if self.d1 is None or self.d2 is None or self.d3 is None:
            self._install_fd_fallback()

    def _install_fd_fallback(self, step: float = 1e-5):
        self.approx_derivatives = True
        n = self.n

        def fd(fun, shape_extra):
            def deriv(x):
                x = np.asarray(x, dtype=float)
                out = np.empty(fun(x).shape + (n,))
                for k in range(n):
                    e = np.zeros(n)
                    e[k] = step
                    out[..., k] = (fun(x + e) - fun(x - e)) / (2 * step)
                return out
            return deriv

        if self.d1 is None:
            self.d1 = fd(self.eval, 1)
        if self.d2 is None:
            self.d2 = fd(self.d1, 2)
        if self.d3 is None:
            self.d3 = fd(self.d2, 3)

    def check_domain(self, x: np.ndarray):
        if np.linalg.norm(np.atleast_1d(x)) > self.domain_radius:
            raise DomainError(
                f"state norm {np.linalg.norm(x):.3g} exceeds domain radius "
                f"{self.domain_radius:.3g}")

    def derivative(self, order: int) -> Callable[[np.ndarray], np.ndarray]:
        if order == 0:
            return self.eval
        cb = (self.d1, self.d2, self.d3)[order - 1] if order <= 3 else None
        if cb is None:
            raise DerivativeUnavailable(f"derivative of order {order} not available")
        return cb

    def scalar_derivative(self, order: int, x: np.ndarray) -> np.ndarray:
        """V^(order) for n = 1, returned with shape x.shape + (m,).

        Vectorized over ``x``; library fields install a fast path in
        ``vectorized`` while custom callbacks fall back to a point loop.
        """
        if self.n != 1:
            raise ValueError("scalar_derivative requires n == 1")
        xs = np.atleast_1d(np.asarray(x, dtype=float))
        if self.max_derivative_order is not None and order > self.max_derivative_order:
            return np.zeros(xs.shape + (self.m,))
        if self.vectorized is not None:
            return self.vectorized(order, xs)
        cb = self.derivative(order)
        flat = xs.reshape(-1)
        out = np.empty((flat.size, self.m))
        for i, xv in enumerate(flat):
            out[i] = np.asarray(cb(np.array([xv]))).reshape(self.m)
        return out.reshape(xs.shape + (self.m,))


def _node_payload(tree: Tree) -> list[Tree]:
    """Subtree rooted at each node, canonical preorder."""
    out = [tree]
    for c in tree.children():
        out.extend(_node_payload(c))
    return out


_LETTERS = "abcdefghijklmnopqrstuvwxyz"


def upsilon(tree: Tree, field: VectorField, x_nodes: np.ndarray) -> np.ndarray:
    """Elementary differential of ``field`` at per-node states.

    ``x_nodes`` has shape (s, n) in canonical preorder; the result has shape
    (n,) + (m,)*s with noise legs in the same node order.
    """
    x_nodes = np.asarray(x_nodes, dtype=float).reshape(tree.size, field.n)
    for x in x_nodes:
        field.check_domain(x)
    return _upsilon_rec(tree, field, x_nodes, 0)


def _upsilon_rec(tree: Tree, field: VectorField, xs: np.ndarray, base: int) -> np.ndarray:
    kids = tree.children()
    k = len(kids)
    x_root = xs[base]
    if field.max_derivative_order is not None and k > field.max_derivative_order:
        return np.zeros((field.n,) + (field.m,) * tree.size)
    D = np.asarray(field.derivative(k)(x_root))  # (n, m, n^k)
    pieces = []
    off = base + 1
    for c in kids:
        pieces.append(_upsilon_rec(c, field, xs, off))
        off += c.size
    return _contract(D, pieces, tree, field)


def _contract(D: np.ndarray, pieces: list[np.ndarray], tree: Tree,
              field: VectorField) -> np.ndarray:
    """Contract child n-legs into derivative slots, tensoring the m-legs.

    D carries indices (a, j, b_1..b_k): output leg, root noise leg, one
    derivative slot per child; child piece i carries (b_i, own noise legs).
    """
    k = len(pieces)
    pool = iter(_LETTERS)
    a, j = next(pool), next(pool)
    slots = [next(pool) for _ in range(k)]
    d_str = a + j + "".join(slots)
    operands = [D]
    child_strs = []
    out_ms = []
    for i, (c, piece) in enumerate(zip(tree.children(), pieces)):
        legs = "".join(next(pool) for _ in range(c.size))
        child_strs.append(slots[i] + legs)
        out_ms.append(legs)
        operands.append(piece)
    spec = ",".join([d_str] + child_strs) + "->" + a + j + "".join(out_ms)
    return np.einsum(spec, *operands)


def upsilon_directional(tree: Tree, field: VectorField, x_nodes: np.ndarray,
                        node_index: int, direction: np.ndarray) -> np.ndarray:
    """d/dx_node of the elementary differential, contracted with a direction.

    Differentiation hits only the V-factor sitting at ``node_index``
    (canonical preorder); the extra derivative slot takes ``direction`` and
    carries no noise leg, so shapes match :func:`upsilon`.
    """
    x_nodes = np.asarray(x_nodes, dtype=float).reshape(tree.size, field.n)
    direction = np.asarray(direction, dtype=float).reshape(field.n)
    if not 0 <= node_index < tree.size:
        raise ValueError(f"node index {node_index} out of range")
    for x in x_nodes:
        field.check_domain(x)
    return _upsilon_dir_rec(tree, field, x_nodes, 0, node_index, direction)


def _upsilon_dir_rec(tree: Tree, field: VectorField, xs: np.ndarray, base: int,
                     target: int, direction: np.ndarray) -> np.ndarray:
    kids = tree.children()
    k = len(kids)
    pieces = []
    off = base + 1
    target_child = None
    for i, c in enumerate(kids):
        if off <= target < off + c.size:
            target_child = i
            pieces.append(_upsilon_dir_rec(c, field, xs, off, target, direction))
        else:
            pieces.append(_upsilon_rec(c, field, xs, off))
        off += c.size
    if target == base:
        if field.max_derivative_order is not None and k + 1 > field.max_derivative_order:
            return np.zeros((field.n,) + (field.m,) * tree.size)
        D = np.asarray(field.derivative(k + 1)(xs[base]))
        D = np.tensordot(D, direction, axes=([-1], [0]))  # fill last slot
        return _contract(D, pieces, tree, field)
    if field.max_derivative_order is not None and k > field.max_derivative_order:
        return np.zeros((field.n,) + (field.m,) * tree.size)
    D = np.asarray(field.derivative(k)(xs[base]))
    return _contract(D, pieces, tree, field)


# ----------------------------------------------------------------------------
# built-in field library


def constant_field(B: np.ndarray, n: int | None = None, m: int | None = None) -> VectorField:
    B = np.atleast_2d(np.asarray(B, dtype=float))
    n = B.shape[0] if n is None else n
    m = B.shape[1] if m is None else m
    B = B.reshape(n, m)
    zero = {1: np.zeros((n, m, n)), 2: np.zeros((n, m, n, n)), 3: np.zeros((n, m, n, n, n))}
    vec = None
    if n == 1:
        def vec(order, xs):
            out = np.zeros(xs.shape + (m,))
            if order == 0:
                out[:] = B[0]
            return out
    return VectorField(n, m, lambda x: B, lambda x: zero[1], lambda x: zero[2],
                       lambda x: zero[3], max_derivative_order=0, name="constant",
                       vectorized=vec)


def linear_field(A: np.ndarray, B: np.ndarray | None = None) -> VectorField:
    """V(x) = A x + B with A of shape (n, m, n)."""
    A = np.asarray(A, dtype=float)
    if A.ndim == 0:
        A = A.reshape(1, 1, 1)
    n, m = A.shape[0], A.shape[1]
    B0 = np.zeros((n, m)) if B is None else np.asarray(B, dtype=float).reshape(n, m)
    z2, z3 = np.zeros((n, m, n, n)), np.zeros((n, m, n, n, n))
    vec = None
    if n == 1:
        def vec(order, xs):
            if order == 0:
                return xs[..., None] * A[0, :, 0] + B0[0]
            out = np.zeros(xs.shape + (m,))
            if order == 1:
                out[:] = A[0, :, 0]
            return out
    return VectorField(n, m,
                       lambda x: A @ np.asarray(x, dtype=float).reshape(n) + B0,
                       lambda x: A, lambda x: z2, lambda x: z3,
                       max_derivative_order=1, name="linear", vectorized=vec)


def sin_field(shift: float = 2.0) -> VectorField:
    """Scalar bounded field V(x) = sin(x) + shift."""
    cycle = [np.sin, np.cos, lambda x: -np.sin(x), lambda x: -np.cos(x)]

    def vec(order, xs):
        if order == 0:
            return (np.sin(xs) + shift)[..., None]
        return cycle[order % 4](xs)[..., None]

    return VectorField(
        1, 1,
        lambda x: np.array([[np.sin(x[0]) + shift]]),
        lambda x: np.array([[[np.cos(x[0])]]]),
        lambda x: np.array([[[[-np.sin(x[0])]]]]),
        lambda x: np.array([[[[[-np.cos(x[0])]]]]]),
        name="sin", vectorized=vec)


def poly_field(coeffs, domain_radius: float = np.inf) -> VectorField:
    """Scalar polynomial field V(x) = sum_k coeffs[k] x^k."""
    c = np.asarray(coeffs, dtype=float)
    ds = [c]
    for _ in range(3):
        ds.append(np.polynomial.polynomial.polyder(ds[-1]))

    def make(k):
        def cb(x):
            v = np.polynomial.polynomial.polyval(x[0], ds[k]) if len(ds[k]) else 0.0
            return np.full((1,) * (2 + k), v)
        return cb

    def vec(order, xs):
        if order >= len(ds) or len(ds[order]) == 0:
            return np.zeros(xs.shape + (1,))
        return np.polynomial.polynomial.polyval(xs, ds[order])[..., None]

    return VectorField(1, 1, make(0), make(1), make(2), make(3),
                       domain_radius=domain_radius,
                       max_derivative_order=max(0, len(c) - 1), name="poly",
                       vectorized=vec)


def field_by_name(name: str, params: dict, n: int = 1, m: int = 1) -> VectorField:
    """Build a library field from a name and a parameter dict (CLI entry)."""
    if name == "constant":
        return constant_field(np.asarray(params.get("value", 1.0), dtype=float), n, m)
    if name == "linear":
        A = np.asarray(params.get("matrix", 1.0), dtype=float)
        if A.ndim == 0:
            A = A.reshape(1, 1, 1)
        B = params.get("offset")
        return linear_field(A, None if B is None else np.asarray(B, dtype=float))
    if name == "sin":
        return sin_field(float(params.get("shift", 2.0)))
    if name == "poly":
        return poly_field(params.get("coeffs", [0.0, 1.0]),
                          float(params.get("domain_radius", np.inf)))
    raise ValueError(f"unknown field {name!r}")
