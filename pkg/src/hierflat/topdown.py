"""Hierarchical one-vs-rest training and top-down / flat prediction."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

import numpy as np
import scipy.sparse as sp
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import Dataset, split_train_validation
from .linreg import TrainConfig, train
from .metrics import macro_f1
from .taxonomy import FlatteningPlan, Method, Taxonomy, flatten, level_plan

log = logging.getLogger(__name__)

DEFAULT_C_GRID = (1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3)


@dataclass
class NodeModel:
    node: int
    weights: np.ndarray
    C_used: float
    fstar: float | None = None
    degenerate: bool = False

    def __post_init__(self):
        if self.fstar is not None and self.fstar < 0:
            raise ValueError(f"fstar must be nonnegative, got {self.fstar}")


@dataclass
class HierModel:
    """Per-node weight vectors for every non-root node of ``taxonomy``."""

    taxonomy: Taxonomy
    models: dict[int, NodeModel]
    dim: int
    _columns: dict = field(default=None, init=False, repr=False, compare=False)
    _W: object = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        missing = sorted(set(self.taxonomy.nodes) - set(self.models))
        if missing:
            raise ValueError(f"no model for nodes {missing}")

    def weight_matrix(self):
        """Sparse ``dim x n_nodes`` matrix and a node -> column map."""
        if self._W is None:
            nodes = self.taxonomy.nodes
            self._columns = {n: j for j, n in enumerate(nodes)}
            W = np.column_stack([self.models[n].weights for n in nodes])
            self._W = sp.csc_matrix(W)
        return self._W, self._columns

    def node_scores(self, X) -> tuple[np.ndarray, dict]:
        W, cols = self.weight_matrix()
        X = _as_csr(X, self.dim)
        S = X @ W
        S = S.toarray() if sp.issparse(S) else np.asarray(S)
        return S, cols

    def predict(self, X, return_paths: bool = False):
        """Top-down prediction for every row of ``X`` at once."""
        S, cols = self.node_scores(X)
        return _descend(self.taxonomy, S, cols, return_paths)

    def restrict(self, tax: Taxonomy) -> HierModel:
        """Same node models, viewed through a flattened taxonomy."""
        return HierModel(tax, {n: self.models[n] for n in tax.nodes}, self.dim)


def _as_csr(X, dim: int) -> sp.csr_matrix:
    X = sp.csr_matrix(X, dtype=np.float64)
    if X.shape[1] > dim:
        raise ValueError(f"input has {X.shape[1]} features, model was trained on {dim}")
    if X.shape[1] < dim:
        X = sp.csr_matrix((X.data, X.indices, X.indptr), shape=(X.shape[0], dim))
    return X


def _descend(tax: Taxonomy, S: np.ndarray, cols: Mapping[int, int],
             return_paths: bool):
    n = S.shape[0]
    current = np.full(n, tax.root, dtype=np.int64)
    paths = [[tax.root] for _ in range(n)] if return_paths else None
    active = np.ones(n, dtype=bool)
    while active.any():
        for p in np.unique(current[active]):
            rows = np.flatnonzero(active & (current == p))
            kids = tax.children_of[int(p)]
            # argmax returns the first maximum; kids are in ascending id order
            pick = np.argmax(S[np.ix_(rows, [cols[k] for k in kids])], axis=1)
            current[rows] = np.asarray(kids)[pick]
        if return_paths:
            for i in np.flatnonzero(active):
                paths[i].append(int(current[i]))
        active = np.array([not tax.is_leaf(int(c)) for c in current])
    if return_paths:
        return current, [tuple(p) for p in paths]
    return current


def binary_labels(tax: Taxonomy, y, n: int) -> np.ndarray:
    """+1 where the label lies in the subtree of ``n`` (inclusive policy), else -1."""
    if n == tax.root:
        raise ValueError("the root has no classifier")
    if n not in tax:
        raise KeyError(f"node {n} not in taxonomy")
    positives = np.fromiter(tax.leaves_under(n), dtype=np.int64)
    return np.where(np.isin(np.asarray(y), positives), 1.0, -1.0)


def binary_f1(y_true, scores) -> float | None:
    """F1 of the positive class with the ``score >= 0`` rule; ``None`` if no positives."""
    y_true = np.asarray(y_true) > 0
    if not y_true.any():
        return None
    pred = np.asarray(scores) >= 0
    tp = np.sum(pred & y_true)
    return 2.0 * tp / (2.0 * tp + np.sum(pred & ~y_true) + np.sum(~pred & y_true))


def default_C(C_grid) -> float:
    """Fallback when validation cannot rank the grid: the value nearest 1 on a log scale."""
    grid = np.asarray(sorted(C_grid), dtype=np.float64)
    return float(grid[np.argmin(np.abs(np.log(grid)))])


@dataclass(frozen=True)
class StageFits:
    """Train-only fits of one node task at every grid value of C.

    ``f1`` holds the validation binary F1 per grid value, or is empty when the
    validation split cannot rank them (no validation data or no positives).
    """

    weights: tuple
    degenerate: bool
    f1: tuple = ()


C_SELECTION = ("global", "node")


class NodeModelBank:
    """Fits and memoises one-vs-rest node models.

    Under the inclusive policy a node's binary task depends only on the set of
    leaves beneath it, so fits are cached on that set. Flattening never changes
    the leaf set of a surviving node, which makes retraining on a flattened
    taxonomy a cache lookup that returns exactly what a fresh fit would.

    :meth:`stage` holds the train-only fits along the whole C grid (warm-started
    in ascending C); :meth:`weights` returns either one of those or the refit on
    ``train`` plus ``valid`` for a given C.
    """

    def __init__(self, train: Dataset, valid: Dataset | None, C_grid=DEFAULT_C_GRID,
                 grad_tol: float = 1e-4, max_iter: int = 1000, n_jobs=None):
        if not len(C_grid):
            raise ValueError("C_grid is empty")
        if any(float(c) <= 0 for c in C_grid):
            raise ValueError("C values must be positive")
        dim = max(train.dim, valid.dim if valid is not None else 0)
        self.train = train.with_dim(dim)
        self.valid = valid.with_dim(dim) if valid is not None and len(valid) else None
        self.full = self.train if self.valid is None else self.train.concat(self.valid)
        self.C_grid = tuple(sorted({float(c) for c in C_grid}))
        self.grad_tol = grad_tol
        self.max_iter = max_iter
        self.n_jobs = n_jobs
        self.dim = dim
        self._stage: dict[frozenset, StageFits] = {}
        self._final: dict[tuple, np.ndarray] = {}

    def __len__(self):
        return len(self._stage)

    def _cfg(self, C):
        return TrainConfig(C, self.grad_tol, self.max_iter)

    def _grid_index(self, C) -> int:
        try:
            return self.C_grid.index(float(C))
        except ValueError:
            raise ValueError(f"C={C} is not in the grid {self.C_grid}") from None

    def _targets(self, ds: Dataset, positives) -> np.ndarray:
        pos = np.fromiter(positives, dtype=np.int64)
        return np.where(np.isin(ds.y, pos), 1.0, -1.0)

    def fit_stage(self, positives: frozenset) -> StageFits:
        y_tr = self._targets(self.train, positives)
        if np.all(y_tr == y_tr[0]):
            zero = np.zeros(self.dim)
            return StageFits(tuple(zero for _ in self.C_grid), True)
        fits, w = [], None
        for C in self.C_grid:
            w = train(self.train.X, y_tr, self._cfg(C), warm_start=w)
            fits.append(w)
        f1 = ()
        if self.valid is not None:
            y_va = self._targets(self.valid, positives)
            scores = [binary_f1(y_va, self.valid.X @ w) for w in fits]
            if scores[0] is not None:
                f1 = tuple(float(v) for v in scores)
        return StageFits(tuple(fits), False, f1)

    def _fit_final(self, positives: frozenset, C: float) -> np.ndarray:
        st = self.stage(positives)
        w0 = st.weights[self._grid_index(C)]
        if st.degenerate or self.valid is None:
            return w0
        return train(self.full.X, self._targets(self.full, positives), self._cfg(C),
                     warm_start=w0)

    def _run(self, fn, args):
        if self.n_jobs in (None, 1) or len(args) <= 1:
            return [fn(*a) for a in args]
        return Parallel(n_jobs=self.n_jobs)(delayed(fn)(*a) for a in args)

    def fit_many(self, leaf_sets: Iterable[frozenset]) -> None:
        """Stage fits for every set in ``leaf_sets`` not yet cached."""
        todo = [s for s in dict.fromkeys(leaf_sets) if s not in self._stage]
        self._stage.update(zip(todo, self._run(self.fit_stage, [(s,) for s in todo])))

    def refit_many(self, pairs: Iterable[tuple[frozenset, float]]) -> None:
        """Train-plus-validation refits for ``(leaf set, C)`` pairs not yet cached."""
        todo = [(s, float(C)) for s, C in dict.fromkeys(pairs)
                if (s, float(C)) not in self._final]
        self.fit_many(s for s, _ in todo)
        self._final.update(zip(todo, self._run(self._fit_final, todo)))

    def stage(self, positives: frozenset) -> StageFits:
        if positives not in self._stage:
            self._stage[positives] = self.fit_stage(positives)
        return self._stage[positives]

    def node_C(self, positives: frozenset) -> float:
        """Per-node choice: best validation binary F1, smallest C on ties."""
        if len(self.C_grid) == 1:
            return self.C_grid[0]
        f1 = self.stage(positives).f1
        if not f1:
            return default_C(self.C_grid)
        return self.C_grid[int(np.argmax(f1))]  # argmax keeps the first maximum

    def weights(self, positives: frozenset, C: float, refit: bool) -> np.ndarray:
        if not refit:
            return self.stage(positives).weights[self._grid_index(C)]
        key = (positives, float(C))
        if key not in self._final:
            self._final[key] = self._fit_final(positives, C)
        return self._final[key]


def check_leaf_coverage(tax: Taxonomy, ds: Dataset) -> None:
    labels = set(np.unique(ds.y).tolist())
    unknown = sorted(labels - tax.leaves)
    if unknown:
        raise ValueError(f"labels {unknown} are not leaves of the taxonomy")
    empty = sorted(tax.leaves - labels)
    if empty:
        raise ValueError(f"leaf {empty[0]} has no training examples"
                         + (f" (and {len(empty) - 1} more)" if len(empty) > 1 else ""))


def _assemble(tax: Taxonomy, bank: NodeModelBank, C_of: Mapping[int, float],
              refit: bool) -> HierModel:
    models = {}
    for n in tax.nodes:
        leaves = tax.leaves_under(n)
        models[n] = NodeModel(n, bank.weights(leaves, C_of[n], refit), C_of[n], None,
                              bank.stage(leaves).degenerate)
    return HierModel(tax, models, bank.dim)


def select_shared_C(tax: Taxonomy, bank: NodeModelBank) -> tuple[float, list]:
    """One C for every node, by top-down macro-F1 on the validation split.

    Returns the chosen value and the ``(C, macro-F1)`` curve. Ties go to the
    smaller C; without validation data the grid value nearest 1 is used.
    """
    bank.fit_many(tax.leaves_under(n) for n in tax.nodes)
    if len(bank.C_grid) == 1:
        return bank.C_grid[0], []
    if bank.valid is None:
        return default_C(bank.C_grid), []
    leaves = sorted(tax.leaves)
    curve = []
    for C in bank.C_grid:
        hm = _assemble(tax, bank, dict.fromkeys(tax.nodes, C), refit=False)
        curve.append((C, macro_f1(bank.valid.y, hm.predict(bank.valid.X), leaves)))
    best = max(curve, key=lambda t: (t[1], -t[0]))
    return best[0], curve


def train_hierarchy(tax: Taxonomy, train: Dataset, valid: Dataset | None,
                    C_grid=DEFAULT_C_GRID, *, refit: bool = True,
                    bank: NodeModelBank | None = None, C_selection="global",
                    grad_tol: float = 1e-4, max_iter: int = 1000,
                    n_jobs=None) -> HierModel:
    """Train one classifier per non-root node.

    ``C_selection`` is ``"global"`` (one C for all nodes, see
    :func:`select_shared_C`), ``"node"`` (each node by its own validation
    binary F1, smallest C on ties) or a grid value used everywhere. Nodes are
    then refitted on ``train`` plus ``valid`` when ``refit`` is true; with
    ``refit=False`` the returned weights are the train-only fits.
    """
    check_leaf_coverage(tax, train)
    if valid is not None and len(valid):
        unknown = sorted(set(np.unique(valid.y).tolist()) - tax.leaves)
        if unknown:
            raise ValueError(f"validation labels {unknown} are not leaves of the taxonomy")
    if bank is None:
        bank = NodeModelBank(train, valid, C_grid, grad_tol, max_iter, n_jobs)
    bank.fit_many(tax.leaves_under(n) for n in tax.nodes)
    if isinstance(C_selection, str):
        if C_selection == "global":
            C, _ = select_shared_C(tax, bank)
            C_of = dict.fromkeys(tax.nodes, C)
        elif C_selection == "node":
            C_of = {n: bank.node_C(tax.leaves_under(n)) for n in tax.nodes}
        else:
            raise ValueError(f"C_selection must be one of {C_SELECTION} or a grid value, "
                             f"got {C_selection!r}")
    else:
        C_of = dict.fromkeys(tax.nodes, float(C_selection))
    if refit:
        bank.refit_many((tax.leaves_under(n), C_of[n]) for n in tax.nodes)
    return _assemble(tax, bank, C_of, refit)


def predict_topdown(hm: HierModel, x, return_path: bool = False):
    """Greedy descent from the root, taking the best-scoring child each step."""
    x = _as_csr(x, hm.dim)
    if x.shape[0] != 1:
        raise ValueError("predict_topdown takes a single example; use HierModel.predict")
    tax = hm.taxonomy
    p = tax.root
    path = [p]
    while not tax.is_leaf(p):
        best, best_score = None, -np.inf
        for q in tax.children_of[p]:
            s = float((x @ hm.models[q].weights)[0])
            if best is None or s > best_score:
                best, best_score = q, s
        p = best
        path.append(p)
    return (p, tuple(path)) if return_path else p


def predict_flat(models: Mapping[int, np.ndarray], x):
    """Leaf with the largest one-vs-rest score; lowest id wins ties.

    ``x`` may hold several rows, in which case an array of leaves is returned.
    """
    if not models:
        raise ValueError("no models")
    leaves = sorted(models)
    W = np.column_stack([np.asarray(models[n], dtype=np.float64) for n in leaves])
    X = _as_csr(x, W.shape[0])
    S = np.asarray(X @ W)
    pick = np.asarray(leaves)[np.argmax(S, axis=1)]
    return int(pick[0]) if X.shape[0] == 1 and not _is_matrix(x) else pick


def _is_matrix(x) -> bool:
    return sp.issparse(x) or np.ndim(x) == 2


def as_taxonomy(hierarchy, y=None) -> Taxonomy:
    """Coerce a Taxonomy, an edge list, or ``None`` (flat over ``y``)."""
    if isinstance(hierarchy, Taxonomy):
        return hierarchy
    if hierarchy is None:
        if y is None:
            raise ValueError("a flat taxonomy needs labels")
        leaves = np.unique(y)
        root = int(leaves.max()) + 1
        return Taxonomy({int(c): root for c in leaves})
    return Taxonomy.from_edges(hierarchy)


def flat_taxonomy(tax: Taxonomy) -> Taxonomy:
    """Depth-one taxonomy with every leaf hung directly off the root."""
    if not tax.internal_nodes:
        return tax
    return flatten(tax, tax.internal_nodes)


def resolve_plan(tax: Taxonomy, flattening) -> FlatteningPlan:
    if flattening is None:
        return FlatteningPlan(frozenset())
    if isinstance(flattening, FlatteningPlan):
        return flattening
    if isinstance(flattening, str):
        if flattening.lower() == "flat":
            return FlatteningPlan(frozenset(tax.internal_nodes))
        return level_plan(tax, flattening)
    return FlatteningPlan(frozenset(flattening), Method.MANUAL)


class TopDownClassifier(ClassifierMixin, BaseEstimator):
    """Top-down hierarchical logistic regression.

    Parameters
    ----------
    hierarchy : Taxonomy, list of (parent, child) or None
        Category tree; ``None`` means a flat tree over the observed labels.
    C_grid : sequence of float
        Candidate penalties, selected on a held-out split.
    C_selection : {"global", "node"} or float
        ``"global"`` picks one C for every node by top-down validation
        macro-F1; ``"node"`` picks each node's C by its own validation binary
        F1. A number fixes C (it must belong to ``C_grid``).
    split_ratio : float
        Training fraction of the internal train/validation split.
    seed : int
        Seed for the split.
    flattening : None, "TLF", "BLF", "MLF", "flat", FlatteningPlan or node ids
        Structural edit applied to ``hierarchy`` before training.
    n_jobs : int or None
        Worker processes for per-node fits.

    Attributes
    ----------
    C_ : float or None
        Shared penalty in use, ``None`` under per-node selection.
    C_curve_ : list of (C, validation macro-F1)
        Empty unless the shared C was selected on validation data.
    """

    def __init__(self, hierarchy=None, C_grid=DEFAULT_C_GRID, split_ratio=0.9,
                 seed=0, flattening=None, grad_tol=1e-4, max_iter=1000, n_jobs=None,
                 C_selection="global"):
        self.hierarchy = hierarchy
        self.C_grid = C_grid
        self.C_selection = C_selection
        self.split_ratio = split_ratio
        self.seed = seed
        self.flattening = flattening
        self.grad_tol = grad_tol
        self.max_iter = max_iter
        self.n_jobs = n_jobs

    def _validate(self, X, y):
        X, y = check_X_y(X, y, accept_sparse="csr", dtype=np.float64)
        y = y.astype(np.int64)
        tax = as_taxonomy(self.hierarchy, y)
        ds = Dataset(X, y)
        check_leaf_coverage(tax, ds)
        return ds, tax

    def _split(self, ds):
        if len(ds) < 2 or len(self.C_grid) == 1:
            return ds, None
        train, valid = split_train_validation(ds, self.split_ratio, self.seed)
        return train, (valid if len(valid) else None)

    def _bank(self, train, valid):
        return NodeModelBank(train, valid, self.C_grid, self.grad_tol,
                             self.max_iter, self.n_jobs)

    def fit(self, X, y):
        ds, tax = self._validate(X, y)
        self.original_taxonomy_ = tax
        self.plan_ = resolve_plan(tax, self.flattening)
        self.taxonomy_ = flatten(tax, self.plan_)
        train, valid = self._split(ds)
        self.bank_ = self._bank(train, valid)
        C = self._choose_C(self.taxonomy_)
        self.model_ = train_hierarchy(self.taxonomy_, train, valid, bank=self.bank_,
                                      C_selection=C)
        self._finish(ds)
        return self

    def _choose_C(self, tax: Taxonomy):
        """Resolve ``C_selection`` on ``tax``; returns a grid value or ``"node"``."""
        self.C_curve_ = []
        sel = self.C_selection
        if isinstance(sel, str):
            if sel == "node":
                self.C_ = None
                return "node"
            if sel != "global":
                raise ValueError(f"C_selection must be one of {C_SELECTION} or a number, "
                                 f"got {sel!r}")
            self.C_, self.C_curve_ = select_shared_C(tax, self.bank_)
        else:
            self.C_ = self.C_grid_value(sel)
        return self.C_

    def C_grid_value(self, C) -> float:
        C = float(C)
        if C not in {float(c) for c in self.C_grid}:
            raise ValueError(f"C={C} is not in C_grid")
        return C

    def _finish(self, ds):
        self.classes_ = np.array(sorted(self.taxonomy_.leaves))
        self.n_features_in_ = ds.dim

    def _X(self, X):
        check_is_fitted(self, "model_")
        return check_array(X, accept_sparse="csr", dtype=np.float64)

    def predict(self, X):
        X = self._X(X)
        return self.model_.predict(X)

    def decision_path(self, X):
        """Root-to-leaf node sequences actually visited for each row."""
        X = self._X(X)
        return self.model_.predict(X, return_paths=True)[1]

    def decision_function(self, X):
        """Per-node scores, columns ordered as ``taxonomy_.nodes``."""
        X = self._X(X)
        return self.model_.node_scores(X)[0]


class FlatLogisticRegression(TopDownClassifier):
    """One-vs-rest logistic regression over leaf categories only."""

    def __init__(self, hierarchy=None, C_grid=DEFAULT_C_GRID, split_ratio=0.9,
                 seed=0, grad_tol=1e-4, max_iter=1000, n_jobs=None,
                 C_selection="global"):
        super().__init__(hierarchy=hierarchy, C_grid=C_grid, split_ratio=split_ratio,
                         seed=seed, flattening="flat", grad_tol=grad_tol,
                         max_iter=max_iter, n_jobs=n_jobs, C_selection=C_selection)

    @property
    def leaf_weights_(self) -> dict[int, np.ndarray]:
        check_is_fitted(self, "model_")
        return {n: self.model_.models[n].weights for n in self.taxonomy_.leaves}

    def predict(self, X):
        X = self._X(X)
        return predict_flat(self.leaf_weights_, X)


def with_fstar(hm: HierModel, values: Mapping[int, float]) -> HierModel:
    models = {n: replace(m, fstar=float(values[n])) if n in values else m
              for n, m in hm.models.items()}
    return HierModel(hm.taxonomy, models, hm.dim)
