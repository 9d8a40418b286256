"""Shared fixtures: tiny worlds and hand-built feature batches."""
import sys

import numpy as np
import pytest

from relctr.model import FeatureBatch
from relctr.synth import WorldConfig, generate_world


def make_batch(B=6, d=4, m=3, k=2, n_ids=5, dense_dim=3, seed=0, click=None, rsl=None, empty_rows=()):
    """Random FeatureBatch with padded own/cross sequences."""
    rng = np.random.default_rng(seed)
    own_mask = np.ones((B, m), dtype=bool)
    cross_mask = np.ones((B, k), dtype=bool)
    own_mask[:, m - 1] = rng.random(B) < 0.5  # ragged lengths
    for r in empty_rows:
        own_mask[r] = False
        cross_mask[r] = False
    return FeatureBatch(
        user=rng.integers(0, n_ids, B), query=rng.integers(0, n_ids, B), item=rng.integers(0, n_ids, B),
        category=rng.integers(0, 2, B),
        rsl=np.asarray(rsl) if rsl is not None else rng.integers(1, 5, B),
        dense=rng.normal(size=(B, dense_dim)),
        q_emb=rng.normal(size=(B, d)), i_emb=rng.normal(size=(B, d)), r_cur=rng.normal(size=(B, d)),
        own_q=rng.normal(size=(B, m, d)), own_r=rng.normal(size=(B, m, d)), own_mask=own_mask,
        cross_q=rng.normal(size=(B, k, d)), cross_r=rng.normal(size=(B, k, d)), cross_mask=cross_mask,
        click=np.asarray(click) if click is not None else rng.integers(0, 2, B),
        exposed=np.ones(B, dtype=np.int64),
    )


@pytest.fixture(scope="session")
def small_world():
    cfg = WorldConfig(n_users=60, n_items=120, n_queries=24, n_categories=3)
    return generate_world(cfg, seed=3)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
