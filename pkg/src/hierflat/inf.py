"""Inconsistent node identification and flattening.

Each node's trained classifier is scored on held-out data with the same
regularised objective it was trained on (the "validation objective", f*).
Nodes whose f* exceeds ``mean + psi * std`` of a reference set are flattened;
the reference set is either the node's level (level-wise) or every non-root
node (global). Leaves are never flattened, though their f* values do enter
the statistics.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .data import Dataset, split_train_validation
from .linreg import objective
from .metrics import macro_f1
from .taxonomy import FlatteningPlan, Method, Taxonomy, flatten
from .topdown import (DEFAULT_C_GRID, HierModel, NodeModel, TopDownClassifier,
                      binary_labels, train_hierarchy, with_fstar)

log = logging.getLogger(__name__)

DEFAULT_PSI_GRID = tuple(round(0.1 * i, 1) for i in range(31))


class Scope(str, enum.Enum):
    LEVEL = "level"
    GLOBAL = "global"


@dataclass(frozen=True)
class ThresholdSpec:
    scope: Scope
    mean: float
    std: float
    psi: float
    tau: float
    level: int | None = None


def fstar(model: NodeModel, valid: Dataset, tax: Taxonomy) -> float:
    """Regularised logistic objective of ``model`` on ``valid``, using its own C."""
    if len(valid) == 0:
        raise ValueError("validation set is empty")
    y = binary_labels(tax, valid.y, model.node)
    X = valid.with_dim(model.weights.shape[0]).X
    return objective(model.weights, X, y, model.C_used)


def compute_fstar(hm: HierModel, valid: Dataset) -> HierModel:
    """Copy of ``hm`` with ``fstar`` filled in for every node."""
    values = {n: fstar(m, valid, hm.taxonomy) for n, m in hm.models.items()}
    return with_fstar(hm, values)


def threshold(values, psi: float, scope: Scope | str = Scope.GLOBAL,
              level: int | None = None) -> ThresholdSpec:
    """``tau = mean + psi * std`` with the population standard deviation."""
    if psi < 0:
        raise ValueError(f"psi must be nonnegative, got {psi}")
    values = np.asarray(list(values), dtype=np.float64)
    if values.size == 0:
        raise ValueError("no values to threshold")
    mean = float(values.mean())
    std = float(values.std(ddof=0))
    return ThresholdSpec(Scope(scope), mean, std, float(psi), mean + psi * std, level)


def _fstars(hm: HierModel, valid: Dataset | None) -> dict[int, float]:
    if any(m.fstar is None for m in hm.models.values()):
        if valid is None:
            raise ValueError("node models lack fstar values and no validation set was given")
        hm = compute_fstar(hm, valid)
    return {n: hm.models[n].fstar for n in hm.taxonomy.nodes}


def select_level_inf(hm: HierModel, valid: Dataset | None,
                     psi_per_level: float | Mapping[int, float]
                     ) -> tuple[FlatteningPlan, list[ThresholdSpec]]:
    """Per-level thresholds; returns the plan and the threshold used at each level."""
    tax = hm.taxonomy
    values = _fstars(hm, valid)
    removed, provenance, specs = set(), {}, []
    for k in range(1, tax.depth + 1):
        nodes = tax.nodes_at_level(k)
        if not nodes:
            continue
        psi = psi_per_level if np.isscalar(psi_per_level) else psi_per_level.get(k)
        if psi is None:
            raise ValueError(f"no psi given for level {k}")
        spec = threshold([values[n] for n in nodes], psi, Scope.LEVEL, k)
        specs.append(spec)
        for n in nodes:
            if values[n] > spec.tau and not tax.is_leaf(n):
                removed.add(n)
                provenance[n] = (values[n], spec.tau)
    return FlatteningPlan(frozenset(removed), Method.LEVEL_INF, provenance), specs


def select_global_inf(hm: HierModel, valid: Dataset | None, psi: float
                      ) -> tuple[FlatteningPlan, ThresholdSpec]:
    """One threshold over every non-root node (leaves included in the statistics)."""
    tax = hm.taxonomy
    values = _fstars(hm, valid)
    spec = threshold([values[n] for n in tax.nodes], psi, Scope.GLOBAL)
    removed = {n for n in tax.internal_nodes if values[n] > spec.tau}
    provenance = {n: (values[n], spec.tau) for n in removed}
    return FlatteningPlan(frozenset(removed), Method.GLOBAL_INF, provenance), spec


def select(hm, valid, psi, strategy: Scope | str = Scope.GLOBAL):
    """Plan for either strategy; Level-INF uses ``psi`` at every level unless a mapping is given."""
    if Scope(strategy) is Scope.GLOBAL:
        plan, spec = select_global_inf(hm, valid, psi)
        return plan, [spec]
    return select_level_inf(hm, valid, psi)


def sweep_psi(pipeline: Callable[[float], float], grid=DEFAULT_PSI_GRID
              ) -> tuple[float, list[tuple[float, float]]]:
    """Evaluate ``pipeline(psi)`` (validation macro-F1) over ``grid``.

    Returns the best psi and the whole ``(psi, score)`` curve. Ties go to the
    smaller psi, i.e. to more flattening.
    """
    grid = sorted(float(p) for p in grid)
    if not grid:
        raise ValueError("psi grid is empty")
    curve = [(psi, float(pipeline(psi))) for psi in grid]
    best = max(curve, key=lambda t: (t[1], -t[0]))
    return best[0], curve


def validation_pipeline(stage: HierModel, valid: Dataset, strategy=Scope.GLOBAL,
                        bank=None, C_selection="node") -> Callable[[float], float]:
    """Closure ``psi -> validation macro-F1`` for the flattened hierarchy.

    ``stage`` must hold train-only fits with f* already computed. Retraining on
    the flattened taxonomy goes through ``bank`` when given, so it costs only
    lookups; otherwise the surviving node models are reused directly, which is
    the same thing under the inclusive policy. ``C_selection`` is passed to
    :func:`train_hierarchy` and should be the policy that produced ``stage``.
    """
    tax = stage.taxonomy
    leaves = sorted(tax.leaves)
    X = valid.with_dim(stage.dim).X

    def run(psi: float) -> float:
        plan, _ = select(stage, None, psi, strategy)
        flat = flatten(tax, plan)
        if bank is not None:
            model = train_hierarchy(flat, bank.train, bank.valid, refit=False, bank=bank,
                                    C_selection=C_selection)
        else:
            model = stage.restrict(flat)
        return macro_f1(valid.y, model.predict(X), leaves)

    return run


class InconsistentNodeFlattening(TopDownClassifier):
    """Top-down classifier trained on a hierarchy with inconsistent nodes flattened.

    Parameters
    ----------
    strategy : {"global", "level"}
        One threshold for the whole hierarchy, or one per level.
    psi : float, mapping or None
        Fitness parameter. ``None`` sweeps ``psi_grid`` on the validation split
        and keeps the best value by macro-F1. A mapping ``level -> psi`` is
        accepted for the level-wise strategy.
    psi_grid : sequence of float
        Candidates for the sweep.
    C_selection : {"global", "node"} or float
        As for :class:`TopDownClassifier`. C is resolved once on the original
        hierarchy and kept for the flattened one, so f* values stay comparable
        across nodes and the final model uses the C they were computed with.

    The remaining parameters are those of :class:`TopDownClassifier`.

    Attributes
    ----------
    stage_model_ : HierModel
        Train-split models on the original hierarchy, with f* filled in.
    plan_ : FlatteningPlan
    thresholds_ : list of ThresholdSpec
    psi_ : float or mapping
    sweep_curve_ : list of (psi, validation macro-F1), empty if psi was given
    """

    def __init__(self, hierarchy=None, strategy="global", psi=None,
                 psi_grid=DEFAULT_PSI_GRID, C_grid=DEFAULT_C_GRID, split_ratio=0.9,
                 seed=0, grad_tol=1e-4, max_iter=1000, n_jobs=None,
                 C_selection="global"):
        super().__init__(hierarchy=hierarchy, C_grid=C_grid, split_ratio=split_ratio,
                         seed=seed, flattening=None, grad_tol=grad_tol,
                         max_iter=max_iter, n_jobs=n_jobs, C_selection=C_selection)
        self.strategy = strategy
        self.psi = psi
        self.psi_grid = psi_grid

    def fit(self, X, y):
        ds, tax = self._validate(X, y)
        train, valid, C = self._restructure(ds, tax)
        # C stays the one the f* values were computed with
        self.model_ = train_hierarchy(self.taxonomy_, train, valid, bank=self.bank_,
                                      C_selection=C)
        self._finish(ds)
        return self

    def restructure(self, X, y):
        """Run identification and flattening only; every fitted attribute but ``model_``."""
        ds, tax = self._validate(X, y)
        self._restructure(ds, tax)
        return self

    def _restructure(self, ds, tax):
        self.original_taxonomy_ = tax
        train, valid = split_train_validation(ds, self.split_ratio, self.seed)
        if not len(valid):
            raise ValueError("validation split is empty; f* needs held-out examples")
        self.bank_ = self._bank(train, valid)
        C = self._choose_C(tax)
        stage = train_hierarchy(tax, train, valid, refit=False, bank=self.bank_,
                                C_selection=C)
        self.stage_model_ = compute_fstar(stage, valid)
        self.fstar_ = {n: m.fstar for n, m in self.stage_model_.models.items()}

        if self.psi is None:
            run = validation_pipeline(self.stage_model_, valid, self.strategy, self.bank_, C)
            self.psi_, self.sweep_curve_ = sweep_psi(run, self.psi_grid)
        else:
            self.psi_, self.sweep_curve_ = self.psi, []

        self.plan_, self.thresholds_ = select(self.stage_model_, None, self.psi_,
                                              self.strategy)
        self.taxonomy_ = flatten(tax, self.plan_)
        log.info("flattening %d of %d internal nodes (psi=%s)",
                 len(self.plan_), len(tax.internal_nodes), self.psi_)
        return train, valid, C

    def flattening_report(self) -> list[dict]:
        """One row per non-root node of the original hierarchy."""
        tax = self.original_taxonomy_
        by_level = {s.level: s.tau for s in self.thresholds_}
        rows = []
        for n in tax.nodes:
            k = tax.level_of[n]
            tau = by_level.get(k) if Scope(self.strategy) is Scope.LEVEL else by_level[None]
            rows.append({
                "node": n,
                "level": k,
                "leaf": tax.is_leaf(n),
                "C": self.stage_model_.models[n].C_used,
                "fstar": self.fstar_[n],
                "tau": tau,
                "flagged": n in self.plan_.removed,
            })
        return rows
