"""Synthetic hierarchies with a planted inconsistent node.

Sixteen Gaussian leaf classes are grouped geometrically into three
super-clusters (A, B with three sub-clusters each, C with two), each
sub-cluster holding two leaves. The taxonomy follows the geometry except for
one level-1 node, ``corrupted``, whose children are the third sub-cluster of A
and the third of B.

Sub-cluster offsets share one 2-D plane: A's sit at 0, 120 and 240 degrees,
B's are the mirror images (180, 300, 60) and C's at 90 and 270. The two
leaves of a sub-cluster sit at +/- ``leaf_scale`` on one more shared axis.
The mean of the corrupted node's leaves then equals the mean of the other
four A/B sub-clusters' leaves, so no hyperplane separates the corrupted
node's examples from the rest: its classifier stays poor and its validation
objective high. Every geometry-consistent node is linearly separable.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .taxonomy import Taxonomy

ROOT = 0
LEVEL1 = {"A": 1, "B": 2, "C": 3, "K": 4}
SUB_ANGLES = {
    "A": (0.0, 120.0, 240.0),
    "B": (180.0, 300.0, 60.0),
    "C": (90.0, 270.0),
}


@dataclass(frozen=True)
class PlantedProblem:
    taxonomy: Taxonomy
    consistent_taxonomy: Taxonomy
    train: Dataset
    test: Dataset
    corrupted: int
    means: dict


def _layout():
    """Sub-clusters as (super, index, angle); node ids assigned breadth-first."""
    subs = [(g, j, a) for g, angles in SUB_ANGLES.items() for j, a in enumerate(angles)]
    sub_ids = {(g, j): 5 + i for i, (g, j, _) in enumerate(subs)}
    leaf_ids = {}
    nxt = 5 + len(subs)
    for g, j, _ in subs:
        for k in range(2):
            leaf_ids[(g, j, k)] = nxt
            nxt += 1
    return subs, sub_ids, leaf_ids


def planted_taxonomies() -> tuple[Taxonomy, Taxonomy, int]:
    """(corrupted taxonomy, geometry-consistent taxonomy, corrupted node id)."""
    subs, sub_ids, leaf_ids = _layout()
    k = LEVEL1["K"]
    corrupt, clean = {}, {}
    for g, j, _ in subs:
        s = sub_ids[(g, j)]
        planted = (g, j) in {("A", 2), ("B", 2)}
        corrupt[s] = k if planted else LEVEL1[g]
        clean[s] = LEVEL1[g]
        for b in range(2):
            corrupt[leaf_ids[(g, j, b)]] = s
            clean[leaf_ids[(g, j, b)]] = s
    for g in ("A", "B", "C", "K"):
        corrupt[LEVEL1[g]] = ROOT
        if g != "K":
            clean[LEVEL1[g]] = ROOT
    return Taxonomy(corrupt), Taxonomy(clean), k


def make_planted(seed: int = 0, n_train: int = 40, n_test: int = 40,
                 super_scale: float = 3.0, sub_scale: float = 1.5,
                 leaf_scale: float = 2.0, noise: float = 0.6) -> PlantedProblem:
    """Draw train/test sets of ``n_train``/``n_test`` examples per leaf.

    Features: three super-cluster axes, the shared sub-cluster plane, the
    shared leaf axis, and a trailing constant 1 acting as a bias.
    """
    tax, clean, corrupted = planted_taxonomies()
    subs, _, leaf_ids = _layout()
    dim = 3 + 2 + 1 + 1
    supers = {"A": 0, "B": 1, "C": 2}

    means = {}
    for (g, j, b), leaf in sorted(leaf_ids.items(), key=lambda t: t[1]):
        angle = np.deg2rad(SUB_ANGLES[g][j])
        m = np.zeros(dim)
        m[supers[g]] = super_scale
        m[3] = sub_scale * np.cos(angle)
        m[4] = sub_scale * np.sin(angle)
        m[5] = leaf_scale if b == 0 else -leaf_scale
        means[leaf] = m

    rng = np.random.default_rng(seed)

    def draw(n):
        X, y = [], []
        for leaf, m in means.items():
            pts = m + noise * rng.standard_normal((n, dim))
            pts[:, -1] = 1.0
            X.append(pts)
            y.append(np.full(n, leaf))
        return Dataset(np.vstack(X), np.concatenate(y))

    return PlantedProblem(tax, clean, draw(n_train), draw(n_test), corrupted, means)
