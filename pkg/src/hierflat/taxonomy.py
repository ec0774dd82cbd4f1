"""Category hierarchy and structural transformations.

A :class:`Taxonomy` is an immutable rooted tree over integer node ids. The
root sits at level 0; every other node is a category. Examples are only ever
assigned to leaves.
"""
from __future__ import annotations

import enum
import gzip
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping


class TaxonomyError(ValueError):
    """Raised for malformed hierarchies or invalid structural edits."""


class Method(str, enum.Enum):
    LEVEL_INF = "LevelINF"
    GLOBAL_INF = "GlobalINF"
    TLF = "TLF"
    BLF = "BLF"
    MLF = "MLF"
    MANUAL = "Manual"


@dataclass(frozen=True)
class FlatteningPlan:
    """Set of internal nodes to remove from a taxonomy in one batch.

    ``provenance`` optionally maps node id to ``(fstar, tau)`` so reports can
    show why a node was selected.
    """

    removed: frozenset
    method: Method = Method.MANUAL
    provenance: Mapping = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "removed", frozenset(int(n) for n in self.removed))
        object.__setattr__(self, "method", Method(self.method))

    def __len__(self):
        return len(self.removed)


class Taxonomy:
    """Rooted tree of categories.

    Parameters
    ----------
    parent_of : mapping
        Child id to parent id for every non-root node.

    Use :func:`load_hierarchy` or :meth:`from_edges` rather than building the
    parent map by hand; both validate the structure.
    """

    def __init__(self, parent_of: Mapping[int, int]):
        parent_of = {int(c): int(p) for c, p in parent_of.items()}
        if not parent_of:
            raise TaxonomyError("hierarchy has no edges")
        children: dict[int, list[int]] = {}
        for c, p in parent_of.items():
            if c == p:
                raise TaxonomyError(f"self-edge on node {c}")
            children.setdefault(p, []).append(c)
        roots = {p for p in children if p not in parent_of}
        if not roots:
            raise TaxonomyError("cycle detected: no root node")
        if len(roots) > 1:
            raise TaxonomyError(f"multiple roots: {sorted(roots)}")
        root = roots.pop()

        level = {root: 0}
        queue = deque([root])
        while queue:
            p = queue.popleft()
            for c in children.get(p, ()):
                level[c] = level[p] + 1
                queue.append(c)
        if len(level) != len(parent_of) + 1:
            unreachable = sorted(set(parent_of) - set(level))
            raise TaxonomyError(f"cycle detected among nodes {unreachable}")

        self._root = root
        self._parent = MappingProxyType(parent_of)
        self._children = MappingProxyType(
            {n: tuple(sorted(children.get(n, ()))) for n in level}
        )
        self._level = MappingProxyType(level)
        self._leaves = frozenset(n for n in level if not self._children[n])

    @classmethod
    def from_edges(cls, edges: Iterable[tuple[int, int]]) -> Taxonomy:
        parent_of: dict[int, int] = {}
        for p, c in edges:
            p, c = int(p), int(c)
            if p < 0 or c < 0:
                raise TaxonomyError(f"negative node id in edge ({p}, {c})")
            if c == p:
                raise TaxonomyError(f"self-edge on node {c}")
            if c in parent_of and parent_of[c] != p:
                raise TaxonomyError(
                    f"node {c} has two parents: {parent_of[c]} and {p}"
                )
            parent_of[c] = p
        return cls(parent_of)

    def __reduce__(self):
        return (Taxonomy, (dict(self._parent),))

    # -- read-only views -------------------------------------------------

    @property
    def root(self) -> int:
        return self._root

    @property
    def parent_of(self) -> Mapping[int, int]:
        return self._parent

    @property
    def children_of(self) -> Mapping[int, tuple[int, ...]]:
        return self._children

    @property
    def level_of(self) -> Mapping[int, int]:
        return self._level

    @property
    def leaves(self) -> frozenset:
        return self._leaves

    @cached_property
    def nodes(self) -> tuple[int, ...]:
        """All non-root nodes in breadth-first, ascending-id order."""
        return tuple(n for n in self._bfs() if n != self._root)

    @cached_property
    def internal_nodes(self) -> tuple[int, ...]:
        """Non-root, non-leaf nodes."""
        return tuple(n for n in self.nodes if n not in self._leaves)

    @cached_property
    def depth(self) -> int:
        return max(self._level.values())

    def nodes_at_level(self, k: int) -> tuple[int, ...]:
        return tuple(n for n in self.nodes if self._level[n] == k)

    def is_leaf(self, n: int) -> bool:
        return n in self._leaves

    def __contains__(self, n) -> bool:
        return n in self._level

    def __len__(self) -> int:
        return len(self._level)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Taxonomy):
            return NotImplemented
        return dict(self._parent) == dict(other._parent)

    def __hash__(self):
        return hash(frozenset(self._parent.items()))

    def __repr__(self) -> str:
        return (
            f"Taxonomy(root={self._root}, nodes={len(self)}, "
            f"leaves={len(self._leaves)}, depth={self.depth})"
        )

    def _bfs(self):
        queue = deque([self._root])
        while queue:
            n = queue.popleft()
            yield n
            queue.extend(self._children[n])

    def edges(self) -> list[tuple[int, int]]:
        """Edges as ``(parent, child)`` in breadth-first order."""
        return [(self._parent[n], n) for n in self.nodes]

    def path(self, n: int) -> tuple[int, ...]:
        """Root-to-``n`` path, both ends included."""
        out = [n]
        while n != self._root:
            n = self._parent[n]
            out.append(n)
        return tuple(reversed(out))

    def ancestors(self, n: int) -> frozenset:
        """Ancestors of ``n`` including ``n`` itself, excluding the root."""
        return frozenset(self.path(n)[1:])

    @cached_property
    def _leaves_under(self) -> Mapping[int, frozenset]:
        under: dict[int, frozenset] = {}
        for n in reversed(list(self._bfs())):
            kids = self._children[n]
            if not kids:
                under[n] = frozenset([n])
            else:
                under[n] = frozenset().union(*(under[c] for c in kids))
        return MappingProxyType(under)

    def leaves_under(self, n: int) -> frozenset:
        """Leaves in the subtree rooted at ``n`` (``{n}`` for a leaf)."""
        return self._leaves_under[n]

    def lca(self, a: int, b: int) -> int:
        la, lb = self._level[a], self._level[b]
        while la > lb:
            a, la = self._parent[a], la - 1
        while lb > la:
            b, lb = self._parent[b], lb - 1
        while a != b:
            a, b = self._parent[a], self._parent[b]
        return a

    def distance(self, a: int, b: int) -> int:
        """Number of edges on the undirected tree path between ``a`` and ``b``."""
        c = self.lca(a, b)
        return self._level[a] + self._level[b] - 2 * self._level[c]

    def to_text(self) -> str:
        return "".join(f"{p} {c}\n" for p, c in self.edges())


def load_hierarchy(edges: Iterable[tuple[int, int]]) -> Taxonomy:
    """Build a validated taxonomy from ``(parent, child)`` pairs."""
    edges = list(edges)
    if not edges:
        raise TaxonomyError("edge list is empty")
    return Taxonomy.from_edges(edges)


def parse_hierarchy(text: str) -> Taxonomy:
    """Parse "parent child" lines; blank lines and ``#`` comments are skipped."""
    edges = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise TaxonomyError(f"line {lineno}: expected 'parent child', got {raw!r}")
        try:
            edges.append((int(parts[0]), int(parts[1])))
        except ValueError:
            raise TaxonomyError(f"line {lineno}: non-integer node id in {raw!r}") from None
    return load_hierarchy(edges)


def read_hierarchy(path) -> Taxonomy:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rt", encoding="utf-8") as fh:
        return parse_hierarchy(fh.read())


def write_hierarchy(tax: Taxonomy, path) -> None:
    Path(path).write_text(tax.to_text(), encoding="utf-8")


def flatten(tax: Taxonomy, plan: FlatteningPlan | Iterable[int]) -> Taxonomy:
    """Remove internal nodes, reattaching survivors to their nearest kept ancestor.

    Removal is a single batch, so nested removed nodes cascade and the result
    does not depend on any ordering of ``plan``.
    """
    removed = plan.removed if isinstance(plan, FlatteningPlan) else frozenset(plan)
    if not removed:
        return tax
    bad = sorted(n for n in removed if n not in tax)
    if bad:
        raise TaxonomyError(f"plan references unknown nodes {bad}")
    if tax.root in removed:
        raise TaxonomyError("cannot flatten the root")
    leaves = sorted(removed & tax.leaves)
    if leaves:
        raise TaxonomyError(f"cannot flatten leaf nodes {leaves}")

    parent_of = {}
    for n in tax.nodes:
        if n in removed:
            continue
        p = tax.parent_of[n]
        while p in removed:
            p = tax.parent_of[p]
        parent_of[n] = p
    return Taxonomy(parent_of)


def internal_levels(tax: Taxonomy) -> list[int]:
    """Levels (>= 1) that contain at least one internal node."""
    return sorted({tax.level_of[n] for n in tax.internal_nodes})


def level_flatten(tax: Taxonomy, levels: Iterable[int]) -> Taxonomy:
    """Remove every internal node whose level is in ``levels``."""
    levels = set(int(k) for k in levels)
    if not levels:
        raise TaxonomyError("no levels given")
    available = set(internal_levels(tax))
    missing = sorted(levels - available)
    if missing:
        raise TaxonomyError(
            f"levels {missing} hold no internal nodes (taxonomy depth {tax.depth})"
        )
    removed = {n for n in tax.internal_nodes if tax.level_of[n] in levels}
    return flatten(tax, removed)


def level_plan(tax: Taxonomy, method: Method | str) -> FlatteningPlan:
    """Removal plan for the TLF, BLF and MLF level-flattening baselines."""
    method = Method(method)
    internal = internal_levels(tax)
    if method is Method.TLF:
        levels = {1}
    elif method is Method.BLF:
        levels = {internal[-1]} if internal else set()
    elif method is Method.MLF:
        levels = {1, 3}
    else:
        raise ValueError(f"{method.value} is not a level-flattening method")
    missing = sorted(levels - set(internal))
    if not levels or missing:
        raise TaxonomyError(
            f"{method.value} not possible: levels {missing or sorted(levels)} "
            f"hold no internal nodes (depth {tax.depth})"
        )
    removed = frozenset(n for n in tax.internal_nodes if tax.level_of[n] in levels)
    return FlatteningPlan(removed, method)


def fanout_profile(tax: Taxonomy) -> dict[int, int]:
    """Total number of children per level, for levels with any children."""
    out: dict[int, int] = {}
    for n, kids in tax.children_of.items():
        if kids:
            k = tax.level_of[n]
            out[k] = out.get(k, 0) + len(kids)
    return dict(sorted(out.items()))
