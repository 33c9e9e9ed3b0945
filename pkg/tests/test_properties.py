import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from caprec.core import ContextVectors, LatentModel, sigmoid
from caprec.evaluate import post_process_baseline, rank_items, recommendation_load
from caprec.geo import latlon_to_tile
from caprec.objective import expected_usage, surrogate_loss

finite = st.floats(-1e6, 1e6, allow_nan=False)


@given(arrays(np.float64, st.integers(1, 50), elements=finite))
def test_sigmoid_bounds_and_symmetry(x):
    s = sigmoid(x)
    assert np.all((s >= 0) & (s <= 1))
    np.testing.assert_allclose(s + sigmoid(-x), 1.0, atol=1e-15)


@given(arrays(np.float64, st.integers(2, 40), elements=st.floats(-50, 50)))
def test_surrogates_non_increasing(d):
    d = np.sort(d)
    for kind in ("logistic", "exponential", "hinge"):
        assert np.all(np.diff(surrogate_loss(kind, d)) <= 1e-12)


@settings(max_examples=50)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_expected_usage_bounded_by_total_propensity(M, N, seed):
    rng = np.random.default_rng(seed)
    m = LatentModel(rng.normal(0, 3, (2, M)), rng.normal(0, 3, (2, N)))
    p = rng.uniform(0, 1, M)
    usage = expected_usage(m, p)
    assert np.all(usage >= 0) and np.all(usage <= p.sum() + 1e-12)


@settings(max_examples=60)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 10), st.integers(0, 2**32 - 1))
def test_baseline_never_exceeds_floor_capacity(M, N, top, seed):
    rng = np.random.default_rng(seed)
    scores = np.round(rng.normal(size=(M, N)), 1)
    c = rng.uniform(0.01, M + 1, N)
    ranked = post_process_baseline(scores, ContextVectors(np.full(M, 0.5), c), top)
    assert np.all(recommendation_load(ranked, np.ones(M), N, top) <= np.floor(c))
    # each list is a score-ordered subsequence of the unconstrained ranking
    full = rank_items(scores)
    for i in range(M):
        order = {j: r for r, j in enumerate(full[i].tolist())}
        ranks = [order[j] for j in ranked[i].tolist()]
        assert ranks == sorted(ranks) and len(ranks) <= top


@given(st.floats(-89.9, 89.9), st.floats(-180, 180), st.floats(-89.9, 89.9))
def test_tile_y_monotone_in_latitude(lat_a, lon, lat_b):
    lo, hi = sorted([lat_a, lat_b])
    assert latlon_to_tile(hi, lon).tile_y <= latlon_to_tile(lo, lon).tile_y
