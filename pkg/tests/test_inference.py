"""Patch scores, pixel maps, multi-scale aggregation and map files."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from patchsvdd.data import SyntheticConfig, preprocess, render_defect, render_normal
from patchsvdd.feature_index import build_index
from patchsvdd.inference import (
    AnomalyMap,
    PatchFeaturizer,
    aggregate_multiscale,
    build_scale_indexes,
    distribute_to_pixels,
    image_score,
    inspect_image,
    patch_score,
    read_pgm,
    read_raw_map,
    write_pgm,
    write_raw_map,
)
from patchsvdd.model import EncoderConfig, init_random
from patchsvdd.sampling import extract_grid


@pytest.fixture(scope="module")
def featurizer():
    enc, _ = init_random(EncoderConfig(), 0)
    return PatchFeaturizer(enc)


@pytest.fixture(scope="module")
def object_train():
    cfg = SyntheticConfig(style="placed-object")
    return cfg, [preprocess(render_normal(cfg, "train", i)) for i in range(4)]


def _oracle_distribute(grid, scores):
    """Per-pixel: sum the covering patches' scores in grid order, then divide."""
    h, w = grid.image_shape
    K = grid.K
    out = np.zeros((h, w), np.float32)
    for i in range(h):
        for j in range(w):
            acc, n = 0.0, 0
            for (r, c), s in zip(grid.coords, scores):
                if r <= i < r + K and c <= j < c + K:
                    acc += float(s)
                    n += 1
            out[i, j] = acc / n
    return out


def _fast_oracle(grid, scores):
    # same accumulation order per pixel, vectorized over pixels
    h, w = grid.image_shape
    acc = np.zeros((h, w))
    n = np.zeros((h, w))
    for (r, c), s in zip(grid.coords, np.asarray(scores, np.float64)):
        acc[r:r + grid.K, c:c + grid.K] += s
        n[r:r + grid.K, c:c + grid.K] += 1
    return (acc / n).astype(np.float32)


# -- distribute_to_pixels -------------------------------------------------------

def test_single_patch_gives_constant_map():
    m = distribute_to_pixels(extract_grid((32, 32), 32, 4), [2.5])
    assert np.all(m.values == 2.5)


def test_two_patches_strip_is_their_mean():
    grid = extract_grid((8, 12), 8, 4)
    assert grid.coords == ((0, 0), (0, 4))
    m = distribute_to_pixels(grid, [1.0, 3.0]).values
    assert np.all(m[:, :4] == 1.0)
    assert np.all(m[:, 4:8] == 2.0)
    assert np.all(m[:, 8:] == 3.0)


def test_small_grid_matches_double_loop_oracle():
    grid = extract_grid((20, 24), 8, 3, cover_edge=True)
    scores = np.random.default_rng(0).random(len(grid)).astype(np.float32)
    assert np.array_equal(distribute_to_pixels(grid, scores).values, _oracle_distribute(grid, scores))


@pytest.mark.parametrize("K,S,n", [(64, 16, 169), (32, 4, 3249)])
def test_full_grid_matches_accumulate_oracle(K, S, n):
    grid = extract_grid((256, 256), K, S)
    assert len(grid) == n
    scores = np.random.default_rng(K).random(n).astype(np.float32)
    assert np.array_equal(distribute_to_pixels(grid, scores).values, _fast_oracle(grid, scores))


def test_uncovered_pixels_take_nearest_covered_value():
    grid = extract_grid((10, 10), 4, 4)  # rows/cols 8..9 uncovered
    m = distribute_to_pixels(grid, np.arange(4, dtype=np.float32)).values
    assert m[9, 9] == m[7, 7] == 3.0
    assert m[9, 0] == m[7, 0] == 2.0


@settings(max_examples=30, deadline=None)
@given(h=st.integers(6, 30), w=st.integers(6, 30), K=st.integers(2, 6), S=st.integers(1, 6), seed=st.integers(0, 99))
def test_coverage_weighted_mean_is_preserved(h, w, K, S, seed):
    grid = extract_grid((h, w), K, S)
    scores = np.random.default_rng(seed).random(len(grid))
    m = distribute_to_pixels(grid, scores).values.astype(np.float64)
    count = np.zeros((h, w))
    for r, c in grid.coords:
        count[r:r + K, c:c + K] += 1
    covered = count > 0
    lhs = (m[covered] * count[covered]).sum() / count.sum()
    assert lhs == pytest.approx(scores.mean(), rel=1e-5)


def test_distribute_length_mismatch():
    with pytest.raises(ValueError):
        distribute_to_pixels(extract_grid((8, 8), 4, 4), [1.0, 2.0])


# -- aggregation and image score ----------------------------------------------

def test_aggregate_identities():
    rng = np.random.default_rng(1)
    big = AnomalyMap(rng.random((16, 16)), "big")
    assert np.array_equal(aggregate_multiscale(AnomalyMap(np.ones((16, 16)), "small"), big).values, big.values)
    zero = aggregate_multiscale(AnomalyMap(np.zeros((16, 16)), "small"), big)
    assert not zero.values.any() and zero.scale == "multi"


def test_aggregate_matches_per_pixel_product():
    rng = np.random.default_rng(2)
    a, b = rng.random((64, 48)).astype(np.float32), rng.random((64, 48)).astype(np.float32)
    out = aggregate_multiscale(AnomalyMap(a, "small"), AnomalyMap(b, "big")).values
    for i in range(64):
        for j in range(48):
            assert out[i, j] == np.float32(a[i, j] * b[i, j])


def test_aggregate_shape_mismatch():
    with pytest.raises(ValueError):
        aggregate_multiscale(AnomalyMap(np.ones((4, 4)), "small"), AnomalyMap(np.ones((4, 5)), "big"))


def test_image_score_examples():
    assert image_score(AnomalyMap(np.full((5, 5), 0.7), "multi")) == pytest.approx(0.7)
    m = np.zeros((9, 9))
    m[3, 4] = 5.0
    assert image_score(AnomalyMap(m, "multi")) == 5.0
    r = np.random.default_rng(3).random((30, 30)).astype(np.float32)
    assert image_score(AnomalyMap(r, "multi")) == float(max(r.ravel()))


def test_unknown_scale_tag():
    with pytest.raises(ValueError):
        AnomalyMap(np.zeros((2, 2)), "medium")


# -- scores from encoders ---------------------------------------------------------

def test_patch_score_composition(featurizer, object_train):
    _, train = object_train
    enc = featurizer.encoder
    stored = np.stack([train[0][r:r + 32, c:c + 32] for r, c in extract_grid((256, 256), 32, 16).coords])
    # one patch per call, like the query below: BLAS blocking varies with batch size
    feats = np.concatenate([featurizer.encode_patches("small", stored[i:i + 1]) for i in range(len(stored))])
    idx = build_index(feats)
    rng = np.random.default_rng(4)
    for _ in range(50):
        r, c = rng.integers(0, 225, size=2)
        p = train[1][r:r + 32, c:c + 32]
        s = patch_score(idx, lambda x: featurizer.encode_patches("small", x), p)
        assert s >= 0
        assert s == idx.nn_exact(enc.encode_small(p).data)[0]
    assert patch_score(idx, lambda x: featurizer.encode_patches("small", x), stored[5]) == 0.0


def test_index_growth_never_raises_scores(featurizer, object_train):
    _, train = object_train
    img = train[3]
    small = build_scale_indexes(train[:1], featurizer)
    large = build_scale_indexes(train[:3], featurizer)
    a, b = inspect_image(img, featurizer, small), inspect_image(img, featurizer, large)
    for scale in ("small", "big"):
        assert np.all(b.patch_scores[scale] <= a.patch_scores[scale])


def test_training_image_scores_zero(featurizer, object_train):
    _, train = object_train
    indexes = build_scale_indexes(train[:2], featurizer)
    res = inspect_image(train[1], featurizer, indexes)
    assert res.image_score == 0.0
    for scale in ("small", "big", "multi"):
        assert not res.maps[scale].values.any()


def test_inspect_result_contract(featurizer, object_train):
    cfg, train = object_train
    indexes = build_scale_indexes(train, featurizer)
    img, _, _, _ = render_defect(cfg, 0)
    res = inspect_image(preprocess(img), featurizer, indexes)
    for m in res.maps.values():
        assert m.shape == (256, 256)
        assert np.isfinite(m.values).all() and m.values.min() >= 0
    assert np.array_equal(res.maps["multi"].values, res.maps["small"].values * res.maps["big"].values)
    assert res.image_score == float(res.maps["multi"].values.max())
    assert len(res.patch_scores["small"]) == 3249 and len(res.patch_scores["big"]) == 169


def test_missing_scale_raises(featurizer, object_train):
    _, train = object_train
    indexes = build_scale_indexes(train[:1], featurizer)
    with pytest.raises(KeyError):
        inspect_image(train[0], featurizer, {"small": indexes["small"]})


@pytest.mark.parametrize("style", ["placed-object", "stripes"])
def test_defect_localization(featurizer, style):
    cfg = SyntheticConfig(style=style)
    train = [preprocess(render_normal(cfg, "train", i)) for i in range(4)]
    indexes = build_scale_indexes(train, featurizer)
    for k in range(3):
        img, mask, _, _ = render_defect(cfg, k)
        m = inspect_image(preprocess(img), featurizer, indexes).maps["multi"].values
        peak = np.unravel_index(m.argmax(), m.shape)
        assert ndimage.binary_dilation(mask, iterations=16)[peak]


# -- map files ------------------------------------------------------------------

def test_raw_map_round_trip_exact(tmp_path):
    vals = np.random.default_rng(5).random((37, 41)).astype(np.float32) * 1e3
    write_raw_map(tmp_path / "m.raw", AnomalyMap(vals, "big"))
    back = read_raw_map(tmp_path / "m.raw")
    assert back.scale == "big"
    assert back.values.tobytes() == vals.tobytes()


def test_raw_map_rejects_garbage(tmp_path):
    (tmp_path / "x.raw").write_bytes(b"JUNK" + bytes(40))
    with pytest.raises(ValueError):
        read_raw_map(tmp_path / "x.raw")


def test_pgm_scaling(tmp_path):
    vals = np.array([[0.0, 1.0], [2.0, 4.0]], np.float32)
    vmax = write_pgm(tmp_path / "m.pgm", AnomalyMap(vals, "multi"))
    assert vmax == 4.0
    assert read_pgm(tmp_path / "m.pgm").tolist() == [[0, 16384], [32768, 65535]]
    assert write_pgm(tmp_path / "z.pgm", AnomalyMap(np.zeros((3, 3)), "multi")) == 0.0
    assert not read_pgm(tmp_path / "z.pgm").any()
