from __future__ import annotations

import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from hierflat.data import Dataset, split_train_validation
from hierflat.inf import (DEFAULT_PSI_GRID, InconsistentNodeFlattening, Scope,
                          compute_fstar, fstar, select_global_inf, select_level_inf,
                          sweep_psi, threshold, validation_pipeline)
from hierflat.linreg import objective
from hierflat.synthetic import make_planted
from hierflat.taxonomy import Taxonomy, load_hierarchy
from hierflat.topdown import HierModel, NodeModel, TopDownClassifier, binary_labels
from oracles import random_parent_map


def with_values(tax: Taxonomy, values: dict[int, float]) -> HierModel:
    return HierModel(tax, {n: NodeModel(n, np.zeros(1), 1.0, values[n]) for n in tax.nodes}, 1)


@pytest.fixture(scope="module")
def planted():
    return make_planted(seed=3)


class TestFstar:
    def test_zero_weights(self, toy):
        valid = Dataset(sp.csr_matrix(np.ones((7, 2))), [3, 4, 5, 3, 3, 4, 5])
        m = NodeModel(1, np.zeros(2), 0.1)
        assert fstar(m, valid, toy) == pytest.approx(0.1 * 7 * math.log(2), rel=1e-14)

    def test_large_margin_limit(self, toy):
        X = sp.csr_matrix([[1.0], [-1.0]])
        valid = Dataset(X, [3, 5])
        m = NodeModel(1, np.array([60.0]), 1.0)
        assert fstar(m, valid, toy) == pytest.approx(0.5 * 60.0 ** 2, rel=1e-15)

    def test_equals_objective(self, toy, rng):
        X = sp.csr_matrix(rng.standard_normal((12, 4)))
        y = rng.choice([3, 4, 5], 12)
        valid = Dataset(X, y)
        for n in toy.nodes:
            w = rng.standard_normal(4)
            m = NodeModel(n, w, 2.5)
            assert fstar(m, valid, toy) == objective(w, X, binary_labels(toy, y, n), 2.5)

    def test_order_invariant(self, toy, rng):
        X = rng.standard_normal((20, 3))
        y = rng.choice([3, 4, 5], 20)
        m = NodeModel(2, rng.standard_normal(3), 1.0)
        perm = rng.permutation(20)
        a = fstar(m, Dataset(X, y), toy)
        b = fstar(m, Dataset(X[perm], y[perm]), toy)
        assert a == pytest.approx(b, rel=1e-13)

    def test_empty(self, toy):
        with pytest.raises(ValueError, match="empty"):
            fstar(NodeModel(1, np.zeros(1), 1.0), Dataset(sp.csr_matrix((0, 1)), []), toy)

    def test_negative_fstar_rejected(self):
        with pytest.raises(ValueError):
            NodeModel(1, np.zeros(1), 1.0, fstar=-1.0)


class TestThreshold:
    def test_psi_zero_is_mean(self):
        assert threshold([1, 2, 3], 0).tau == 2

    def test_zero_variance(self):
        for psi in (0, 1, 5):
            spec = threshold([5, 5, 5], psi)
            assert spec.tau == 5 and spec.std == 0

    def test_one_to_ten(self):
        spec = threshold(range(1, 11), 1)
        assert spec.mean == 5.5
        assert spec.std == pytest.approx(math.sqrt(8.25))
        assert spec.tau == pytest.approx(8.3723, abs=1e-4)
        assert [v for v in range(1, 11) if v > spec.tau] == [9, 10]

    @given(st.lists(st.floats(0, 1e6), min_size=1, max_size=30), st.floats(0, 10))
    def test_tau_definition(self, values, psi):
        spec = threshold(values, psi)
        assert spec.tau == spec.mean + psi * spec.std
        assert spec.std == pytest.approx(float(np.std(values)), abs=1e-9 * (1 + max(values)))

    def test_errors(self):
        with pytest.raises(ValueError):
            threshold([], 1)
        with pytest.raises(ValueError):
            threshold([1.0], -0.1)


class TestSelect:
    two_levels = load_hierarchy([(0, 1), (0, 2), (1, 3), (2, 4), (3, 5), (4, 6)])

    def test_level_arithmetic(self):
        hm = with_values(self.two_levels, {1: 1, 2: 9, 3: 4, 4: 6, 5: 0, 6: 100})
        plan, specs = select_level_inf(hm, None, 0.0)
        assert plan.removed == {2, 4}
        assert [s.tau for s in specs] == [5, 5, 50]
        assert plan.provenance[2] == (9, 5)

    def test_level_large_psi(self):
        hm = with_values(self.two_levels, {1: 1, 2: 9, 3: 4, 4: 6, 5: 0, 6: 100})
        assert not select_level_inf(hm, None, 10.0)[0].removed

    def test_level_per_level_mapping(self):
        hm = with_values(self.two_levels, {1: 1, 2: 9, 3: 4, 4: 6, 5: 0, 6: 100})
        plan, _ = select_level_inf(hm, None, {1: 0.0, 2: 10.0, 3: 0.0})
        assert plan.removed == {2}
        with pytest.raises(ValueError, match="level 2"):
            select_level_inf(hm, None, {1: 0.0})

    def test_level_threshold_is_layer_threshold(self, rng):
        tax = Taxonomy(random_parent_map(rng, 40, max_depth=4))
        values = {n: float(rng.random() * 10) for n in tax.nodes}
        hm = with_values(tax, values)
        plan, specs = select_level_inf(hm, None, 0.7)
        for spec in specs:
            layer = tax.nodes_at_level(spec.level)
            assert spec.tau == threshold([values[n] for n in layer], 0.7).tau
            flagged = {n for n in layer if values[n] > spec.tau and not tax.is_leaf(n)}
            assert flagged == {n for n in plan.removed if tax.level_of[n] == spec.level}

    def test_global_arithmetic(self):
        tax = load_hierarchy([(0, 1), (0, 2), (1, 3), (1, 4), (2, 5), (2, 6)])
        hm = with_values(tax, {1: 2, 2: 20, 3: 1, 4: 1, 5: 1, 6: 1})
        plan, spec = select_global_inf(hm, None, 1.0)
        assert spec.mean == pytest.approx(26 / 6)
        assert spec.std == pytest.approx(math.sqrt(1772 / 36), rel=1e-12)
        assert spec.tau == pytest.approx(26 / 6 + math.sqrt(1772 / 36), rel=1e-12)
        assert spec.tau == pytest.approx(11.34, abs=0.01)
        assert plan.removed == {2}

    def test_global_large_psi(self, toy):
        hm = with_values(toy, {1: 3, 2: 30, 3: 1, 4: 2, 5: 0})
        assert not select_global_inf(hm, None, 10.0)[0].removed

    def test_leaf_never_removed(self, toy):
        hm = with_values(toy, {1: 1, 2: 1, 3: 1000, 4: 1, 5: 1})
        assert not select_global_inf(hm, None, 0.0)[0].removed
        assert not select_level_inf(hm, None, 0.0)[0].removed

    def test_missing_fstar(self, toy):
        hm = HierModel(toy, {n: NodeModel(n, np.zeros(1), 1.0) for n in toy.nodes}, 1)
        with pytest.raises(ValueError, match="fstar"):
            select_global_inf(hm, None, 1.0)

    @given(st.integers(0, 2**32 - 1), st.floats(0, 3), st.floats(0, 3))
    def test_monotone_in_psi(self, seed, a, b):
        rng = np.random.default_rng(seed)
        tax = Taxonomy(random_parent_map(rng, int(rng.integers(3, 60))))
        hm = with_values(tax, {n: float(rng.exponential()) for n in tax.nodes})
        lo, hi = sorted((a, b))
        for sel in (select_global_inf, select_level_inf):
            assert sel(hm, None, hi)[0].removed <= sel(hm, None, lo)[0].removed
            assert all(not tax.is_leaf(n) for n in sel(hm, None, lo)[0].removed)


class TestSweep:
    def test_single_value(self):
        assert sweep_psi(lambda p: 0.3, [1.7]) == (1.7, [(1.7, 0.3)])

    def test_tie_prefers_smaller(self):
        best, curve = sweep_psi(lambda p: 1.0 if p >= 0.5 else 0.0, [2.0, 0.5, 1.0, 0.0])
        assert best == 0.5
        assert [p for p, _ in curve] == [0.0, 0.5, 1.0, 2.0]

    def test_empty(self):
        with pytest.raises(ValueError):
            sweep_psi(lambda p: 0, [])

    def test_default_grid(self):
        assert DEFAULT_PSI_GRID[0] == 0.0 and DEFAULT_PSI_GRID[-1] == 3.0
        assert len(DEFAULT_PSI_GRID) == 31


class TestEstimator:
    def test_planted_sweep(self, planted):
        est = InconsistentNodeFlattening(planted.taxonomy, seed=3).fit(
            planted.train.X, planted.train.y)
        assert planted.corrupted in est.plan_.removed
        scores = [s for _, s in est.sweep_curve_]
        assert max(scores) > min(scores)
        _, valid = split_train_validation(planted.train, 0.9, 3)
        run = validation_pipeline(est.stage_model_, valid, "global", est.bank_, est.C_)
        assert max(scores) > run(1e9)
        report = est.flattening_report()
        assert len(report) == len(planted.taxonomy.nodes)
        flagged = {r["node"] for r in report if r["flagged"]}
        assert flagged == set(est.plan_.removed)

    def test_psi_infinity_is_topdown(self, planted):
        X, y = planted.train.X, planted.train.y
        inf = InconsistentNodeFlattening(planted.taxonomy, psi=1e9, seed=3).fit(X, y)
        td = TopDownClassifier(planted.taxonomy, seed=3).fit(X, y)
        assert inf.taxonomy_ == planted.taxonomy
        np.testing.assert_array_equal(inf.predict(planted.test.X), td.predict(planted.test.X))

    def test_level_strategy(self, planted):
        est = InconsistentNodeFlattening(planted.taxonomy, strategy="level", psi=0.0,
                                         seed=3).fit(planted.train.X, planted.train.y)
        assert all(s.scope is Scope.LEVEL for s in est.thresholds_)
        assert est.sweep_curve_ == []

    def test_restructure_only(self, planted):
        est = InconsistentNodeFlattening(planted.taxonomy, psi=1.0).restructure(
            planted.train.X, planted.train.y)
        assert not hasattr(est, "model_") and hasattr(est, "plan_")

    def test_compute_fstar_fills_all(self, planted):
        td = TopDownClassifier(planted.taxonomy, C_grid=(1.0,)).fit(
            planted.train.X, planted.train.y)
        hm = compute_fstar(td.model_, planted.test)
        assert all(m.fstar is not None and m.fstar >= 0 for m in hm.models.values())
