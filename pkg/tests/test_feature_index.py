"""Exact and approximate nearest-neighbor search over stored features."""
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from patchsvdd.feature_index import IndexBuildConfig, build_index, load_index, save_index


def _naive(feats, queries):
    """Double-loop float64 scan with lowest-index tie-breaking."""
    f = feats.astype(np.float64)
    out_d, out_i = [], []
    for q in queries.astype(np.float64):
        best, arg = np.inf, -1
        for i in range(len(f)):
            d = np.sqrt(np.sum((f[i] - q) ** 2))
            if d < best:
                best, arg = d, i
        out_d.append(best)
        out_i.append(arg)
    return np.array(out_d), np.array(out_i)


def test_single_feature_answers_every_query():
    idx = build_index(np.ones((1, 5)))
    for q in np.random.default_rng(0).standard_normal((10, 5)):
        d, prov = idx.nn_exact(q)
        assert prov == (0, 0, 0)
        assert d == pytest.approx(np.linalg.norm(q - 1))


def test_zero_vector_and_unit_query():
    idx = build_index(np.zeros((1, 64)))
    e1 = np.zeros(64)
    e1[0] = 1
    assert idx.nn_exact(e1)[0] == 1.0


def test_query_equal_to_stored_gives_zero_and_its_provenance():
    rng = np.random.default_rng(1)
    feats = rng.standard_normal((300, 64)).astype(np.float32)
    prov = np.stack([np.arange(300) // 10, np.arange(300) % 7, np.arange(300) % 5], 1)
    idx = build_index(feats, prov)
    for i in (0, 17, 299):
        d, p = idx.nn_exact(feats[i])
        assert d == 0.0
        assert p == tuple(prov[i])


def test_empty_and_malformed_inputs_raise():
    with pytest.raises(ValueError):
        build_index(np.zeros((0, 4)))
    with pytest.raises(ValueError):
        build_index(np.zeros((3, 4)), np.zeros((2, 3)))
    idx = build_index(np.zeros((3, 4)))
    with pytest.raises(ValueError):
        idx.nn_exact(np.zeros(5))
    with pytest.raises(ValueError):
        IndexBuildConfig(n_trees=0)
    with pytest.raises(ValueError):
        IndexBuildConfig(mode="fast")


def test_exact_matches_naive_scan():
    rng = np.random.default_rng(2)
    feats = rng.standard_normal((1000, 64)).astype(np.float32)
    queries = rng.standard_normal((100, 64)).astype(np.float32)
    d, i = build_index(feats).search_exact(queries)
    nd, ni = _naive(feats, queries)
    np.testing.assert_allclose(d, nd, rtol=0, atol=1e-6)
    assert np.array_equal(i, ni)


def test_exact_close_candidates_resolved_in_float64():
    # near-duplicates that float32 expanded distances cannot separate
    rng = np.random.default_rng(3)
    base = (100 + rng.standard_normal(64)).astype(np.float32)
    feats = np.stack([base + np.float32(k * 1e-5) for k in range(40)])
    q = base + np.float32(7e-5)
    d, i = build_index(feats).search_exact(q[None])
    nd, ni = _naive(feats, q[None])
    assert i[0] == ni[0]
    assert d[0] == pytest.approx(nd[0], abs=1e-9)


def test_ties_go_to_lowest_insertion_order():
    feats = np.array([[1, 0], [0, 1], [-1, 0], [1, 0]], np.float32)
    idx = build_index(feats)
    _, i = idx.search_exact(np.zeros((1, 2)))
    assert i[0] == 0
    _, i = idx.search_exact(np.array([[1.0, 0.0]]))
    assert i[0] == 0  # duplicates at 0 and 3
    many = np.tile(np.float32([[2.0, 3.0]]), (50, 1))
    assert build_index(many).search_exact(np.zeros((1, 2)))[1][0] == 0


@settings(max_examples=40, deadline=None)
@given(feats=arrays(np.float32, st.tuples(st.integers(1, 40), st.just(6)),
                    elements=st.floats(-10, 10, width=32)),
       q=arrays(np.float32, 6, elements=st.floats(-10, 10, width=32)))
def test_exact_minimality(feats, q):
    d, i = build_index(feats).search_exact(q[None])
    all_d = np.sqrt(((feats.astype(np.float64) - q) ** 2).sum(1))
    assert np.all(d[0] <= all_d + 1e-12)
    assert i[0] == np.flatnonzero(all_d == all_d.min())[0]


def test_approx_on_exact_index_raises():
    idx = build_index(np.zeros((5, 3)))
    with pytest.raises(ValueError):
        idx.nn_approx(np.zeros(3))


def test_approx_single_feature_equals_exact():
    idx = build_index(np.full((1, 8), 0.5), config=IndexBuildConfig(mode="approx"))
    q = np.random.default_rng(4).standard_normal(8)
    assert idx.nn_approx(q) == idx.nn_exact(q)


def test_approx_distance_is_true_and_never_below_exact():
    rng = np.random.default_rng(5)
    feats = rng.standard_normal((3000, 16)).astype(np.float32)
    queries = rng.standard_normal((200, 16))
    idx = build_index(feats, config=IndexBuildConfig(mode="approx", search_budget=16))
    da, ia = idx.search_approx(queries)
    de, _ = idx.search_exact(queries)
    assert np.all(da >= de - 1e-9)
    true = np.sqrt(((feats[ia].astype(np.float64) - queries) ** 2).sum(1))
    np.testing.assert_allclose(da, true, rtol=0, atol=1e-12)


def test_approx_with_duplicates_builds_and_finds_zero():
    feats = np.repeat(np.random.default_rng(6).standard_normal((4, 8)).astype(np.float32), 50, axis=0)
    idx = build_index(feats, config=IndexBuildConfig(mode="approx", leaf_size=4))
    d, i = idx.search_approx(feats[::50])
    assert np.all(d == 0)


def test_build_deterministic_for_seed():
    rng = np.random.default_rng(7)
    feats = rng.standard_normal((2000, 32)).astype(np.float32)
    queries = rng.standard_normal((100, 32))
    cfg = IndexBuildConfig(mode="approx", search_budget=64, seed=11)
    a, b = build_index(feats, config=cfg), build_index(feats, config=cfg)
    ra, rb = a.search_approx(queries), b.search_approx(queries)
    assert np.array_equal(ra[0], rb[0]) and np.array_equal(ra[1], rb[1])


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    feats = rng.standard_normal((1500, 24)).astype(np.float32)
    prov = rng.integers(0, 100, (1500, 3))
    queries = rng.standard_normal((100, 24))
    for mode in ("exact", "approx"):
        idx = build_index(feats, prov, IndexBuildConfig(mode=mode, search_budget=128, seed=3))
        save_index(idx, tmp_path / f"{mode}.psix")
        back = load_index(tmp_path / f"{mode}.psix")
        assert back.config == idx.config
        assert np.array_equal(back.features, idx.features)
        assert np.array_equal(back.provenance, idx.provenance)
        for x, y in zip(back.search(queries), idx.search(queries)):
            assert np.array_equal(x, y)


def test_load_rejects_foreign_file(tmp_path):
    p = tmp_path / "bogus.psix"
    p.write_bytes(b"NOPE" + bytes(64))
    with pytest.raises(ValueError):
        load_index(p)


def test_index_is_immutable_and_queries_do_not_mutate():
    rng = np.random.default_rng(9)
    feats = rng.standard_normal((500, 8)).astype(np.float32)
    idx = build_index(feats, config=IndexBuildConfig(mode="approx"))
    with pytest.raises(ValueError):
        idx.features[0, 0] = 1.0
    before = idx.features.copy()
    idx.search_exact(rng.standard_normal((20, 8)))
    idx.search_approx(rng.standard_normal((20, 8)))
    assert np.array_equal(idx.features, before)


def test_concurrent_queries_match_serial():
    rng = np.random.default_rng(10)
    feats = rng.standard_normal((2000, 16)).astype(np.float32)
    queries = rng.standard_normal((64, 16))
    idx = build_index(feats, config=IndexBuildConfig(mode="approx", search_budget=64))
    serial = [idx.search_approx(queries[k::4]) for k in range(4)] + [idx.search_exact(queries[k::4]) for k in range(4)]
    results = [None] * 8

    def work(j):
        if j < 4:
            results[j] = idx.search_approx(queries[j::4])
        else:
            results[j] = idx.search_exact(queries[j - 4::4])

    threads = [threading.Thread(target=work, args=(j,)) for j in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for got, want in zip(results, serial):
        assert np.array_equal(got[0], want[0]) and np.array_equal(got[1], want[1])


@pytest.mark.slow
def test_approx_recall_benchmark():
    rng = np.random.default_rng(12)
    feats = rng.standard_normal((10_000, 64)).astype(np.float32)
    queries = rng.standard_normal((1000, 64)).astype(np.float32)
    idx = build_index(feats, config=IndexBuildConfig(mode="approx"))
    de, ie = idx.search_exact(queries)
    da, ia = idx.search_approx(queries)
    assert np.mean(ia == ie) >= 0.95
    assert np.mean(da / de) <= 1.02
