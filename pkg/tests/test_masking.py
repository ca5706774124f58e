import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from marlin.data import PRIORITY_REGIONS, RegionLabel
from marlin.masking import (
    STRATEGIES,
    MaskPlan,
    expected_masked_count,
    fasking,
    frame_mask,
    make_plan,
    masked_count,
    merge_tokens,
    random_mask,
    split_tokens,
    tube_mask,
)
from marlin.tokenizer import TokenGridSpec

from oracles import fasking_oracle

PRIORITY = {int(r) for r in PRIORITY_REGIONS}


label_vectors = st.integers(1, 64).flatmap(lambda k: st.lists(st.integers(0, 6), min_size=k, max_size=k))


@settings(max_examples=200, deadline=None)
@given(label_vectors, st.floats(0, 1), st.integers(0, 2**32 - 1))
def test_fasking_matches_oracle(labels, r, seed):
    labels = np.array(labels, dtype=np.uint8)
    plan = fasking(labels, r, seed)
    assert np.array_equal(plan.masked, fasking_oracle(labels, r, seed))


@settings(max_examples=200, deadline=None)
@given(label_vectors, st.floats(0, 1), st.integers(0, 2**32 - 1))
def test_fasking_dominance(labels, r, seed):
    labels = np.array(labels, dtype=np.uint8)
    plan = fasking(labels, r, seed)
    assert plan.n == masked_count(r, len(labels))
    prio = np.isin(labels, list(PRIORITY))
    if (plan.masked & ~prio).any():
        # a background/skin token is masked only once every priority token is
        assert plan.masked[prio].all()
        if (plan.masked & (labels == RegionLabel.BACKGROUND)).any():
            assert plan.masked[labels == RegionLabel.SKIN].all()


def test_fasking_frozen_example():
    labels = np.array([0, 0, 1, 1, 2, 3, 4, 5, 6, 1], dtype=np.uint8)
    plan = fasking(labels, 0.5, 0)
    assert plan.n == 5
    # all five priority tokens masked, background and skin visible
    assert plan.masked.tolist() == [False] * 4 + [True] * 5 + [False]
    plan = fasking(labels, 0.8, 0)
    # two visible slots, exactly the two background tokens
    assert plan.masked_index.tolist() == list(range(2, 10))


def test_fasking_deterministic_and_seed_sensitive():
    labels = np.random.default_rng(0).integers(0, 7, 64).astype(np.uint8)
    a, b = fasking(labels, 0.5, 11), fasking(labels, 0.5, 11)
    assert np.array_equal(a.masked, b.masked)
    assert any(not np.array_equal(a.masked, fasking(labels, 0.5, s).masked) for s in range(5))


def test_masked_count_floor_is_robust():
    assert masked_count(0.29, 100) == 29
    assert masked_count(0.9, 1568) == 1411
    assert masked_count(1.0, 7) == 7
    assert masked_count(0.0, 7) == 0


def test_ratio_out_of_range():
    with pytest.raises(ValueError):
        fasking(np.zeros(4, np.uint8), 1.5, 0)
    with pytest.raises(ValueError):
        random_mask(4, -0.1, 0)


def test_baseline_structure():
    spec = TokenGridSpec(3, 8, 32, 32, 2, 8, 8)  # grid 4 x 4 x 4
    gt, gh, gw = spec.grid
    frame = frame_mask(spec, 0.5, 3).masked.reshape(gt, gh * gw)
    assert all(row.all() or not row.any() for row in frame)
    assert frame.all(axis=1).sum() == 2
    tube = tube_mask(spec, 0.5, 3).masked.reshape(gt, gh * gw)
    assert (tube == tube[0]).all() and tube[0].sum() == 8
    assert random_mask(spec.k, 0.5, 3).n == 32


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_popcount_matches_declared_formula(strategy):
    spec = TokenGridSpec(3, 16, 224, 224)
    labels = np.random.default_rng(0).integers(0, 7, spec.k).astype(np.uint8)
    for r in np.round(np.arange(0, 1.0001, 0.05), 2):
        assert make_plan(strategy, spec, r, 0, labels).n == expected_masked_count(strategy, spec, r)


def test_random_mask_uniform():
    counts = np.zeros(10)
    for s in range(2000):
        counts += random_mask(10, 0.3, s).masked
    assert np.allclose(counts / 2000, 0.3, atol=0.04)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 64), st.floats(0, 1), st.integers(0, 2**31))
def test_plan_json_roundtrip(k, r, seed):
    plan = random_mask(k, r, seed)
    back = MaskPlan.from_json(plan.to_json())
    assert np.array_equal(back.masked, plan.masked)
    assert (back.k, back.n, back.seed, back.strategy) == (plan.k, plan.n, plan.seed, plan.strategy)


def test_plan_json_format_frozen():
    plan = MaskPlan(np.array([1, 0, 0, 1, 1, 0, 0, 0, 1], bool), 0.5, "random", 7)
    d = plan.to_dict()
    assert d["masked"] == "GQE="  # bytes 0b00011001, 0b00000001 little-endian bit order
    assert (d["k"], d["n"], d["label_histogram"]) == (9, 4, None)


def test_label_histogram_counts_masked_tokens():
    labels = np.array([0, 0, 1, 1, 2, 3, 4, 5, 6, 1], dtype=np.uint8)
    hist = fasking(labels, 0.5, 0).label_histogram()
    assert hist == {"background": 0, "skin": 0, "left_eye": 1, "right_eye": 1, "nose": 1, "mouth": 1, "hair": 1}


def test_bad_bitset_header_rejected():
    d = random_mask(8, 0.5, 0).to_dict()
    d["n"] = 3
    with pytest.raises(ValueError):
        MaskPlan.from_dict(d)


def test_make_plan_needs_labels_for_fasking():
    with pytest.raises(ValueError):
        make_plan("fasking", TokenGridSpec(1, 2, 8, 8, 2, 8, 8), 0.5, 0)
    with pytest.raises(ValueError):
        make_plan("checkerboard", TokenGridSpec(1, 2, 8, 8, 2, 8, 8), 0.5, 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.floats(0, 1), st.integers(0, 2**31))
def test_split_merge_roundtrip(k, r, seed):
    tokens = np.random.default_rng(seed).standard_normal((k, 5))
    plan = random_mask(k, r, seed)
    vis, msk, vi, mi = split_tokens(tokens, plan)
    assert vis.shape[0] == k - plan.n and msk.shape[0] == plan.n
    assert np.all(np.diff(vi) > 0) and np.all(np.diff(mi) > 0)
    assert np.array_equal(merge_tokens(vis, msk, vi, mi), tokens)
