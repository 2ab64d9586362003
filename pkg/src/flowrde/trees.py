"""Rooted-tree combinatorics for the truncated flow.

Trees are stored as canonical level sequences (AHU encoding): two labelled
rooted trees get the same ``Tree`` iff they are isomorphic as rooted trees.
Grafting, automorphism counts and the truncation/index sets that drive the
flow equations are all derived from this canonical form.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import factorial
from typing import Iterable, Mapping, Sequence


class TreeStructureError(ValueError):
    """Raised when a labelled input is not a rooted tree."""


@dataclass(frozen=True, order=True)
class Tree:
    """Canonical unlabelled rooted tree.

    ``code`` is the level sequence of the canonical representative: node
    depths in preorder, children visited in sorted (descending) order of
    their own canonical codes.  Equal codes <=> isomorphic trees.
    """

    code: tuple[int, ...]

    def __post_init__(self):
        if not self.code or self.code[0] != 0:
            raise TreeStructureError(f"invalid level sequence {self.code!r}")

    @property
    def size(self) -> int:
        """Number of nodes s(tau)."""
        return len(self.code)

    @property
    def order(self) -> int:
        """Number of edges o(tau) = s(tau) - 1."""
        return len(self.code) - 1

    def children(self) -> tuple["Tree", ...]:
        """Canonical child subtrees of the root, in canonical node order."""
        subs = []
        i = 1
        while i < len(self.code):
            j = i + 1
            while j < len(self.code) and self.code[j] > 1:
                j += 1
            subs.append(Tree(tuple(d - 1 for d in self.code[i:j])))
            i = j
        return tuple(subs)

    def parents(self) -> tuple[int, ...]:
        """Parent index per node in canonical preorder (root gets -1)."""
        par = [-1] * self.size
        stack: list[int] = []
        for i, d in enumerate(self.code):
            while len(stack) > d:
                stack.pop()
            if stack:
                par[i] = stack[-1]
            stack.append(i)
        return tuple(par)

    def out_degrees(self) -> tuple[int, ...]:
        """Number of children per node in canonical preorder."""
        deg = [0] * self.size
        for i, p in enumerate(self.parents()):
            if p >= 0:
                deg[p] += 1
        return tuple(deg)

    def to_parens(self) -> str:
        """Nested-parenthesis form: "()" for the single node."""
        return "(" + "".join(c.to_parens() for c in self.children()) + ")"

    @staticmethod
    def from_parens(s: str) -> "Tree":
        s = s.strip()
        pos = 0

        def parse() -> Tree:
            nonlocal pos
            if pos >= len(s) or s[pos] != "(":
                raise TreeStructureError(f"bad parenthesis form {s!r}")
            pos += 1
            kids = []
            while pos < len(s) and s[pos] == "(":
                kids.append(parse())
            if pos >= len(s) or s[pos] != ")":
                raise TreeStructureError(f"bad parenthesis form {s!r}")
            pos += 1
            return tree_from_children(kids)

        out = parse()
        if pos != len(s):
            raise TreeStructureError(f"trailing input in {s!r}")
        return out

    def __repr__(self) -> str:
        return f"Tree({self.to_parens()!r})"


def tree_from_children(children: Iterable[Tree]) -> Tree:
    """Join child subtrees at a new root, in canonical order."""
    blocks = sorted((c.code for c in children), reverse=True)
    code = [0]
    for b in blocks:
        code.extend(d + 1 for d in b)
    return Tree(tuple(code))


#: The four building blocks of the truncation set.
SINGLE = Tree((0,))
CHERRY = tree_from_children([SINGLE])
CHAIN3 = tree_from_children([CHERRY])
STAR3 = tree_from_children([SINGLE, SINGLE])


def canonicalize(nodes: Sequence[int], edges: Iterable[tuple[int, int]],
                 root: int) -> Tree:
    """Canonical form of a labelled rooted tree given as node/edge sets.

    Raises :class:`TreeStructureError` on disconnected or cyclic input.
    """
    nodes = list(nodes)
    if root not in nodes:
        raise TreeStructureError(f"root {root} not a node")
    adj: dict[int, list[int]] = {v: [] for v in nodes}
    n_edges = 0
    for a, b in edges:
        if a not in adj or b not in adj:
            raise TreeStructureError(f"edge ({a},{b}) uses unknown node")
        adj[a].append(b)
        adj[b].append(a)
        n_edges += 1
    if n_edges != len(nodes) - 1:
        raise TreeStructureError("edge count does not match a tree")

    seen = {root}

    def build(v: int, parent: int | None) -> Tree:
        kids = []
        for w in adj[v]:
            if w == parent:
                continue
            if w in seen:
                raise TreeStructureError("cycle detected")
            seen.add(w)
            kids.append(build(w, v))
        return tree_from_children(kids)

    out = build(root, None)
    if len(seen) != len(nodes):
        raise TreeStructureError("graph is disconnected")
    return out


@lru_cache(maxsize=None)
def aut_size(tree: Tree) -> int:
    """Size of the automorphism group of any labelling of ``tree``."""
    kids = tree.children()
    total = 1
    mult: dict[Tree, int] = {}
    for c in kids:
        mult[c] = mult.get(c, 0) + 1
        total *= aut_size(c)
    for k in mult.values():
        total *= factorial(k)
    return total


def scaling(tree: Tree, H: float) -> float:
    """Scaling |tau| = -1 + s(tau) * H, for Hurst index H in (1/4, 1/2]."""
    if not 0.25 < H <= 0.5:
        raise ValueError(f"H={H} outside (1/4, 1/2]")
    return -1.0 + tree.size * H


@dataclass(frozen=True)
class GraftTerm:
    """One isomorphism class produced by grafting, with its node multiplicity."""

    result: Tree
    multiplicity: int


def graft_at(tau2: Tree, tau1: Tree, node: int) -> Tree:
    """Graft tau2 below node ``node`` (canonical preorder index) of tau1."""
    code = list(tau1.code)
    depth = code[node]
    # insertion point: after node's whole subtree block
    j = node + 1
    while j < len(code) and code[j] > depth:
        j += 1
    block = [d + depth + 1 for d in tau2.code]
    labelled = code[:j] + block + code[j:]
    # re-canonicalize via parent structure
    par = [-1] * len(labelled)
    stack: list[int] = []
    for i, d in enumerate(labelled):
        while len(stack) > d:
            stack.pop()
        if stack:
            par[i] = stack[-1]
        stack.append(i)
    children: dict[int, list[int]] = {i: [] for i in range(len(labelled))}
    for i, p in enumerate(par):
        if p >= 0:
            children[p].append(i)

    def build(i: int) -> Tree:
        return tree_from_children([build(c) for c in children[i]])

    return build(0)


def graft_all(tau2: Tree, tau1: Tree) -> dict[Tree, int]:
    """All classes of tau2 grafted onto tau1, node position counts included.

    The multiplicities sum to s(tau1).
    """
    out: dict[Tree, int] = {}
    for n in range(tau1.size):
        res = graft_at(tau2, tau1, n)
        out[res] = out.get(res, 0) + 1
    return out


def graft_positions(tau2: Tree, tau1: Tree) -> dict[Tree, tuple[int, ...]]:
    """Like :func:`graft_all` but listing the producing node indices."""
    out: dict[Tree, list[int]] = {}
    for n in range(tau1.size):
        out.setdefault(graft_at(tau2, tau1, n), []).append(n)
    return {k: tuple(v) for k, v in out.items()}


def truncation_sets() -> tuple[list[Tree], list[Tree]]:
    """The driving set T (order <= 2) and its graft closure T*."""
    t_set = [SINGLE, CHERRY, CHAIN3, STAR3]
    star_set = {SINGLE}
    for t1 in t_set:
        for t2 in t_set:
            star_set.update(graft_all(t2, t1))
    return t_set, sorted(star_set, key=lambda t: (t.size, t.code))


@dataclass(frozen=True)
class IndEntry:
    """A pair (tau1, tau2) in T^2 grafting into a target class.

    ``node_count`` is the number of grafting positions of a fixed labelling
    of tau1 that produce the target; ``positions`` lists them in canonical
    preorder of tau1.
    """

    tau1: Tree
    tau2: Tree
    node_count: int
    positions: tuple[int, ...]


def ind_set(tau: Tree) -> list[IndEntry]:
    """All grafting pairs from T^2 producing ``tau`` (must lie in T*)."""
    t_set, star_set = truncation_sets()
    if tau not in star_set:
        raise ValueError(f"{tau!r} is not in the graft closure of T")
    out = []
    for t1 in t_set:
        for t2 in t_set:
            pos = graft_positions(t2, t1).get(tau)
            if pos:
                out.append(IndEntry(t1, t2, len(pos), pos))
    return out


def all_rooted_trees(max_nodes: int) -> list[Tree]:
    """Every isomorphism class of rooted trees with up to ``max_nodes`` nodes."""
    by_size: list[list[Tree]] = [[], [SINGLE]]
    for n in range(2, max_nodes + 1):
        found: set[Tree] = set()
        for k in range(1, n):
            for t1 in by_size[k]:
                for t2 in by_size[n - k]:
                    found.update(graft_all(t2, t1))
        by_size.append(sorted(found, key=lambda t: t.code))
    out: list[Tree] = []
    for group in by_size[1:]:
        out.extend(group)
    return out


def labellings(tree: Tree, labels: Sequence[int]) -> list[tuple[list[int], list[tuple[int, int]], int]]:
    """All labelled (nodes, edges, root) triples of ``tree`` on given labels.

    Brute-force helper for tests; sizes beyond ~7 nodes get expensive.
    """
    from itertools import permutations

    if len(labels) != tree.size:
        raise ValueError("label count must match tree size")
    par = tree.parents()
    out = []
    for perm in permutations(labels):
        nodes = list(labels)
        edges = [(perm[p], perm[i]) for i, p in enumerate(par) if p >= 0]
        out.append((nodes, edges, perm[0]))
    return out
