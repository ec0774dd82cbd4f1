from __future__ import annotations

import sys

import numpy as np
import pytest
from hypothesis import settings

from hierflat.taxonomy import Taxonomy

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

TOY_EDGES = [(0, 1), (0, 2), (1, 3), (1, 4), (2, 5)]


@pytest.fixture
def toy():
    """root 0 -> {1, 2}; 1 -> {3, 4}; 2 -> {5}."""
    return Taxonomy.from_edges(TOY_EDGES)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)



def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None:
        return
    terminalreporter.section("acceptance criteria")
    for cid, title in mod.CRITERIA.items():
        parts = mod.RESULTS.get(cid)
        if not parts:
            terminalreporter.write_line(f"C{cid} NOT RUN  {title}")
            continue
        if any(ok is False for _, ok, _ in parts):
            status = "FAIL"
        elif all(ok is None for _, ok, _ in parts):
            status = "SKIP"
        else:
            status = "PASS"
        detail = "; ".join(f"[{part}] {d}" if part else d for part, _, d in parts)
        terminalreporter.write_line(f"C{cid} {status}  {title}: {detail}")
