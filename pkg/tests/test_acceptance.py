"""Acceptance criteria 1-9.

Each test records its outcome in ``RESULTS``; ``conftest.py`` prints one
PASS/FAIL/SKIP line per criterion at the end of the run. Where a criterion
states something that does not hold (criteria 2 and 9), the checkable part is
asserted normally and the literal statement is kept as a strict xfail so the
discrepancy stays visible.
"""
from __future__ import annotations

import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import scipy.sparse as sp

from hierflat.baselines import CodeBook, ecoc_predict, ecoc_train, hamming_decode
from hierflat.data import Dataset, read_svmlight
from hierflat.inf import InconsistentNodeFlattening, select_global_inf, select_level_inf
from hierflat.linreg import TrainConfig, gradient, objective, train
from hierflat.metrics import hier_prf, levelwise_error, macro_f1, micro_f1, tree_error
from hierflat.synthetic import make_planted
from hierflat.taxonomy import Taxonomy, flatten, read_hierarchy
from hierflat.topdown import (HierModel, NodeModel, TopDownClassifier, predict_flat,
                              predict_topdown, with_fstar)
from helpers import central_difference, random_instance
from oracles import (bisect, chain, hamming_oracle, hier_oracle, macro_f1_oracle,
                     micro_f1_oracle, random_parent_map, te_oracle, walk_flatten)

CRITERIA = {
    1: "gradient matches finite differences",
    2: "solver fixed point and monotone objective",
    3: "metrics match brute-force oracles",
    4: "flattening invariants",
    5: "degenerate-threshold equivalences",
    6: "planted inconsistency end to end",
    7: "CLEF reproduction",
    8: "level-wise error on planted data",
    9: "ECOC sanity",
}
RESULTS: dict[int, list[tuple[str, bool | None, str]]] = {}
SEEDS = range(10)


def record(cid: int, part: str, ok: bool | None, detail: str) -> None:
    RESULTS.setdefault(cid, []).append((part, ok, detail))


# -- 1 ---------------------------------------------------------------------

def test_c1_gradient():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        w, X, y, C = random_instance(rng)
        g = gradient(w, X, y, C)
        fd = central_difference(lambda v: objective(v, X, y, C), w)
        worst = max(worst, np.linalg.norm(g - fd) / np.linalg.norm(g))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-6 and elapsed < 5
    record(1, "", ok, f"max relative error {worst:.2e} < 1e-6, {elapsed:.2f}s < 5s")
    assert ok


# -- 2 ---------------------------------------------------------------------

STATED_FIXED_POINT = 0.4012


def _fixed_point_fit() -> tuple[float, float]:
    w = float(train(sp.csr_matrix([[1.0]]), [1], TrainConfig(1.0, grad_tol=1e-12))[0])
    root = bisect(lambda v: v - 1.0 / (1.0 + math.exp(v)), 0.0, 1.0)
    return w, root


def test_c2_solver():
    w, root = _fixed_point_fit()
    rng = np.random.default_rng(2)
    monotone = 0
    for _ in range(50):
        _, X, y, C = random_instance(rng)
        _, info = train(X, y, TrainConfig(C), return_info=True)
        monotone += bool(np.all(np.diff(info["objective_trace"]) <= 0))
    ok = abs(w - root) < 1e-10 and monotone == 50
    record(2, "oracle", ok, f"w={w:.10f} vs bisection root {root:.10f} "
           f"(|diff|={abs(w - root):.1e}); monotone on {monotone}/50")
    assert ok


@pytest.mark.xfail(strict=True, reason="the true root of w = sigma(-w) is 0.4010581, which is "
                   "1.42e-4 from the stated 0.4012, outside the stated 1e-4 tolerance")
def test_c2_stated_constant():
    w, root = _fixed_point_fit()
    gap = abs(w - STATED_FIXED_POINT)
    record(2, "stated constant", gap < 1e-4,
           f"|w - 0.4012| = {gap:.2e} (stated tolerance 1e-4; exact root {root:.7f})")
    assert gap < 1e-4


# -- 3 ---------------------------------------------------------------------

def _small_instance(rng):
    while True:
        tax = Taxonomy(random_parent_map(rng, int(rng.integers(2, 16)), max_depth=4))
        if 2 <= len(tax.leaves) <= 6:
            break
    leaves = sorted(tax.leaves)
    n = int(rng.integers(1, 25))
    true = rng.choice(leaves, n)
    pred = np.where(rng.random(n) < 0.5, true, rng.choice(leaves, n))
    return tax, leaves, true, pred


def test_c3_metric_oracles():
    rng = np.random.default_rng(3)
    mismatches = {"micro": 0, "macro": 0, "hF1": 0, "TE": 0, "micro=acc": 0}
    for _ in range(1000):
        tax, leaves, true, pred = _small_instance(rng)
        parent = dict(tax.parent_of)
        t, p = true.tolist(), pred.tolist()
        checks = {
            "micro": micro_f1(true, pred, leaves) == float(micro_f1_oracle(t, p, leaves)),
            "macro": macro_f1(true, pred, leaves) == float(macro_f1_oracle(t, p, leaves)),
            "hF1": hier_prf(true, pred, tax) == tuple(float(v) for v in
                                                      hier_oracle(t, p, parent)),
            "TE": tree_error(true, pred, tax) == float(te_oracle(t, p, parent)),
            "micro=acc": micro_f1(true, pred, leaves) == np.mean(true == pred),
        }
        for k, same in checks.items():
            mismatches[k] += not same
    ok = not any(mismatches.values())
    record(3, "", ok, "exact float equality on 1000 instances; mismatches " +
           ", ".join(f"{k}={v}" for k, v in mismatches.items()))
    assert ok


# -- 4 ---------------------------------------------------------------------

def test_c4_flattening_invariants():
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    failures = {"leaves": 0, "order": 0, "cascade": 0, "walk": 0, "monotone": 0}
    for _ in range(500):
        tax = Taxonomy(random_parent_map(rng, int(rng.integers(2, 201))))
        parent = dict(tax.parent_of)
        removed = {v for v in tax.internal_nodes if rng.random() < 0.4}
        out = flatten(tax, removed)
        failures["leaves"] += out.leaves != tax.leaves
        failures["walk"] += dict(out.parent_of) != walk_flatten(parent, removed)
        for n in out.nodes:
            kept = [a for a in chain(parent, n)[1:] if a not in removed]
            if kept != list(reversed(out.path(n)[:-1])):
                failures["order"] += 1
                break
        first = {v for v in removed if rng.random() < 0.5}
        failures["cascade"] += flatten(flatten(tax, first), removed - first) != out

        hm = HierModel(tax, {n: NodeModel(n, np.zeros(1), 1.0, float(rng.exponential()))
                             for n in tax.nodes}, 1)
        lo, hi = sorted(rng.uniform(0, 3, 2))
        for sel in (select_global_inf, select_level_inf):
            if not sel(hm, None, hi)[0].removed <= sel(hm, None, lo)[0].removed:
                failures["monotone"] += 1
    elapsed = time.perf_counter() - t0
    ok = not any(failures.values()) and elapsed < 10
    record(4, "", ok, f"500 taxonomies, failures {failures}, {elapsed:.2f}s < 10s")
    assert ok


# -- 5 ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def planted_runs():
    """TD-LR and Global-INF (psi swept) on the planted problem for ten seeds."""
    t0 = time.perf_counter()
    runs = []
    for seed in SEEDS:
        pp = make_planted(seed=seed)
        td = TopDownClassifier(pp.taxonomy, seed=seed).fit(pp.train.X, pp.train.y)
        inf = InconsistentNodeFlattening(pp.taxonomy, seed=seed).fit(pp.train.X, pp.train.y)
        runs.append((seed, pp, td, inf))
    return runs, time.perf_counter() - t0


def test_c5_degenerate_thresholds():
    # psi -> infinity: nothing is flattened, so Global-INF is TD-LR
    pp = make_planted(seed=0)
    X, y = pp.train.X, pp.train.y
    td = TopDownClassifier(pp.taxonomy, seed=0).fit(X, y)
    inf = InconsistentNodeFlattening(pp.taxonomy, psi=math.inf, seed=0).fit(X, y)
    rng = np.random.default_rng(5)
    probe = np.vstack([pp.test.X.toarray(), rng.normal(0, 3, (1000, pp.train.dim))])
    same_inf = inf.taxonomy_ == pp.taxonomy and np.array_equal(td.predict(probe),
                                                                inf.predict(probe))

    # tau below every internal f*: all internal nodes go, top-down becomes flat argmax
    tax = pp.taxonomy
    values = {n: (100.0 + rng.random()) if not tax.is_leaf(n) else rng.random()
              for n in tax.nodes}
    hm = with_fstar(td.model_, values)
    plan, spec = select_global_inf(hm, None, 0.0)
    internal_f = [values[n] for n in tax.internal_nodes]
    below = spec.tau < min(internal_f) and plan.removed == set(tax.internal_nodes)
    flat_tax = flatten(tax, plan)
    models = dict(td.model_.models)
    leaves = sorted(tax.leaves)
    # force exact ties between two leaves to exercise the tie rule
    models[leaves[5]] = NodeModel(leaves[5], models[leaves[2]].weights.copy(), 1.0)
    flat_model = HierModel(flat_tax, {n: models[n] for n in flat_tax.nodes}, hm.dim)
    Xr = rng.normal(0, 3, (1000, hm.dim))
    Xr[:10] = 0.0  # every score zero
    flat = predict_flat({n: models[n].weights for n in leaves}, Xr)
    single = np.array([predict_topdown(flat_model, Xr[i:i + 1]) for i in range(len(Xr))])
    batch = flat_model.predict(Xr)
    same_flat = np.array_equal(single, flat) and np.array_equal(batch, flat)
    ok = same_inf and below and same_flat
    record(5, "", ok, f"psi=inf equals TD-LR on {len(probe)} inputs: {same_inf}; "
           f"full flattening equals flat argmax on 1000 inputs (with ties): {same_flat}")
    assert ok


# -- 6 ---------------------------------------------------------------------

def test_c6_planted_end_to_end(planted_runs):
    runs, elapsed = planted_runs
    flagged = wins = 0
    for seed, pp, td, inf in runs:
        flagged += pp.corrupted in inf.plan_.removed
        leaves = sorted(pp.taxonomy.leaves)
        wins += (macro_f1(pp.test.y, inf.predict(pp.test.X), leaves)
                 > macro_f1(pp.test.y, td.predict(pp.test.X), leaves))
    ok = flagged >= 8 and wins >= 8 and elapsed < 120
    record(6, "", ok, f"corrupted node flagged {flagged}/10 (need 8), Global-INF MF1 > "
           f"TD-LR {wins}/10 (need 8), {elapsed:.1f}s < 120s")
    assert ok


# -- 7 ---------------------------------------------------------------------

def test_c7_clef():
    root = os.environ.get("HIERFLAT_CLEF_DIR")
    if not root:
        record(7, "", None, "CLEF data not available (set HIERFLAT_CLEF_DIR to a directory "
               "with hierarchy.txt, train.svm, test.svm)")
        pytest.skip("CLEF benchmark not available")
    root = Path(root)
    t0 = time.perf_counter()
    tax = read_hierarchy(root / "hierarchy.txt")
    tr, te = read_svmlight(root / "train.svm"), read_svmlight(root / "test.svm")
    dim = max(tr.dim, te.dim)
    tr, te = tr.with_dim(dim), te.with_dim(dim)
    leaves = sorted(tax.leaves)
    scores = {}
    for name, est in (("TD-LR", TopDownClassifier(tax)),
                      ("Global-INF", InconsistentNodeFlattening(tax))):
        pred = est.fit(tr.X, tr.y).predict(te.X)
        scores[name] = (100 * micro_f1(te.y, pred, leaves), 100 * macro_f1(te.y, pred, leaves))
    elapsed = time.perf_counter() - t0
    (td_mi, td_ma), (gi_mi, gi_ma) = scores["TD-LR"], scores["Global-INF"]
    ok = (abs(td_mi - 72.74) <= 2.0 and abs(gi_mi - 77.14) <= 2.0
          and gi_mi > td_mi and gi_ma > td_ma and elapsed < 600)
    record(7, "", ok, f"TD-LR uF1 {td_mi:.2f} MF1 {td_ma:.2f}; Global-INF uF1 {gi_mi:.2f} "
           f"MF1 {gi_ma:.2f}; {elapsed:.0f}s")
    assert ok


# -- 8 ---------------------------------------------------------------------

def test_c8_levelwise(planted_runs):
    runs, _ = planted_runs
    fewer = 0
    counts = []
    for seed, pp, td, inf in runs:
        top_td = levelwise_error(pp.test.y, td.decision_path(pp.test.X), td.taxonomy_)[0]
        top_inf = levelwise_error(pp.test.y, inf.decision_path(pp.test.X), inf.taxonomy_)[0]
        fewer += top_inf.cum_misclassified <= top_td.cum_misclassified
        counts.append((top_inf.cum_misclassified, top_td.cum_misclassified))
    ok = fewer >= 8
    record(8, "", ok, f"top-level misclassified Global-INF <= TD-LR in {fewer}/10 seeds "
           f"(need 8); (INF, TD) per seed {counts}")
    assert ok


# -- 9 ---------------------------------------------------------------------

def _identity_problem():
    rng = np.random.default_rng(9)
    centers = rng.normal(0, 1, (4, 5))
    y = rng.integers(0, 4, 200)
    ds = Dataset(sp.csr_matrix(centers[y] + rng.normal(0, 1.2, (200, 5))), y + 1)
    book = CodeBook.identity([1, 2, 3, 4])
    bits = ecoc_train(ds, book, TrainConfig(1.0))
    Xt = rng.normal(0, 1.5, (1000, 5))
    S = Xt @ bits.weights
    assert np.all(S != 0)
    flat = predict_flat({c: bits.weights[:, i] for i, c in enumerate(book.class_ids)}, Xt)
    return ds, book, bits, Xt, S, flat


def test_c9_ecoc():
    ds, book, bits, Xt, S, flat = _identity_problem()
    cfg = TrainConfig(1.0)
    same_weights = all(
        np.array_equal(bits.weights[:, i], train(ds.X, np.where(ds.y == c, 1.0, -1.0), cfg))
        for i, c in enumerate(book.class_ids))
    one_pos = np.sum(S > 0, axis=1) == 1
    agree_one = np.array_equal(ecoc_predict(bits, book, Xt[one_pos]), flat[one_pos])

    rng = np.random.default_rng(90)
    oracle_bad = 0
    for _ in range(1000):
        k, B = int(rng.integers(2, 10)), int(rng.integers(4, 40))
        cb = CodeBook.random(rng.choice(500, k, replace=False), B, seed=int(rng.integers(1e6)))
        q = rng.integers(0, 2, B)
        rows = {c: cb.codeword(c).tolist() for c in cb.class_ids}
        oracle_bad += int(hamming_decode(q, cb)[0]) != hamming_oracle(q.tolist(), rows)
    ok = same_weights and agree_one and oracle_bad == 0
    record(9, "reduction and oracle", ok,
           f"identity-book bit models equal flat LR: {same_weights}; agree with flat argmax "
           f"on the {int(one_pos.sum())} inputs with one positive score: {agree_one}; "
           f"Hamming oracle mismatches {oracle_bad}/1000")
    assert ok


@pytest.mark.xfail(strict=True, reason="with an identity codebook, Hamming decoding returns "
                   "the lowest-id class with a nonnegative score, which differs from the "
                   "argmax whenever zero or several scores are positive")
def test_c9_identity_all_nonzero_inputs():
    _, book, bits, Xt, S, flat = _identity_problem()
    bad = int(np.sum(ecoc_predict(bits, book, Xt) != flat))
    n_pos = np.sum(S > 0, axis=1)
    record(9, "stated identity claim", bad == 0,
           f"identity ECOC vs flat argmax on 1000 inputs with no zero score: {bad} disagree "
           f"({int(np.sum(n_pos != 1))} inputs have zero or several positive scores)")
    assert bad == 0
