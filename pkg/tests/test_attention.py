import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from awada.attention import (AttentionSource, CacheError, attention_for_image, awm_weight, build_attention_map,
                             cache_representation, crop_resize, inflate_boxes, load_attention_cache, mask_from_gt,
                             precompute_attention_cache, random_mask)
from awada.nets import Proposal
from awada.synthdata import generate_source
from awada.tensor import ShapeError, Tensor

from helpers import brute_force_attention


def random_proposals(rng, n, w, h, integer=False):
    props = []
    for _ in range(n):
        if integer:
            x1, x2 = sorted(rng.choice(w + 1, size=2, replace=False))
            y1, y2 = sorted(rng.choice(h + 1, size=2, replace=False))
        else:
            x1, x2 = sorted(rng.uniform(-5, w + 5, size=2))
            y1, y2 = sorted(rng.uniform(-5, h + 5, size=2))
            if x1 == x2 or y1 == y2:
                continue
        props.append(Proposal(float(x1), float(y1), float(x2), float(y2), float(rng.random())))
    return props


def test_no_proposals_gives_zero_map():
    assert not build_attention_map([], 0.5, 7, 5).any()


def test_single_box_hard():
    amap = build_attention_map([Proposal(2, 2, 5, 5, 0.9)], 0.5, 8, 8)
    expected = np.zeros((8, 8))
    expected[2:5, 2:5] = 1
    np.testing.assert_array_equal(amap, expected)


def test_low_confidence_below_threshold():
    assert not build_attention_map([Proposal(0, 0, 4, 4, 0.4)], 0.5, 8, 8).any()


def test_mean_accumulation_in_overlap():
    props = [Proposal(0, 0, 4, 4, 0.6), Proposal(2, 2, 6, 6, 0.8)]
    amap = build_attention_map(props, 0.5, 8, 8, fn="mean")
    assert amap[3, 3] == pytest.approx(0.7)
    assert amap[0, 0] == pytest.approx(0.6)
    assert amap[5, 5] == pytest.approx(0.8)
    assert amap[7, 7] == 0


@pytest.mark.parametrize("fn", ["hard", "mean", "median", "max"])
def test_matches_brute_force_all_modes(fn):
    rng = np.random.default_rng(11)
    for _ in range(30):
        w, h = (int(v) for v in rng.integers(1, 24, size=2))
        props = random_proposals(rng, int(rng.integers(0, 8)), w, h, integer=rng.random() < 0.5)
        c = float(rng.random())
        np.testing.assert_allclose(build_attention_map(props, c, w, h, fn),
                                   brute_force_attention(props, c, w, h, fn), atol=1e-15)


def test_shared_edge_counted_once():
    props = [Proposal(0, 0, 2, 4, 0.9), Proposal(2, 0, 4, 4, 0.7)]
    amap = build_attention_map(props, 0.5, 4, 4, fn="mean")
    np.testing.assert_array_equal(amap[:, 1], 0.9)
    np.testing.assert_array_equal(amap[:, 2], 0.7)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_hard_monotone_in_proposals_and_threshold(seed):
    rng = np.random.default_rng(seed)
    props = random_proposals(rng, 6, 20, 16)
    extra = random_proposals(rng, 1, 20, 16)
    base = build_attention_map(props, 0.5, 20, 16)
    assert np.all(build_attention_map(props + extra, 0.5, 20, 16) >= base)
    c1, c2 = sorted(rng.random(2))
    assert np.all(build_attention_map(props, c2, 20, 16) <= build_attention_map(props, c1, 20, 16))
    for fn in ("mean", "median", "max"):
        amap = build_attention_map(props, c1, 20, 16, fn)
        assert amap.min() >= 0 and amap.max() <= 1


def test_inflate_arithmetic():
    assert inflate_boxes([(10, 10, 30, 50)], 1.2, 100, 100) == [(8.0, 6.0, 32.0, 54.0)]
    assert inflate_boxes([(10, 10, 30, 50)], 1.0, 100, 100) == [(10.0, 10.0, 30.0, 50.0)]
    assert inflate_boxes([(0, 0, 10, 10)], 2.0, 64, 64) == [(0.0, 0.0, 15.0, 15.0)]


def test_inflate_drops_degenerate_with_warning(caplog):
    with caplog.at_level(logging.WARNING):
        out = inflate_boxes([(70, 70, 80, 80), (1, 1, 3, 3)], 1.2, 64, 64)
    assert out == [pytest.approx((0.8, 0.8, 3.2, 3.2))]
    assert "dropped 1" in caplog.text
    with pytest.raises(ValueError):
        inflate_boxes([(0, 0, 1, 1)], 0.0, 4, 4)


def test_random_mask_extremes_and_determinism():
    assert not random_mask(0.0, 16, 16, 1).any()
    assert random_mask(1.0, 16, 16, 1).all()
    np.testing.assert_array_equal(random_mask(0.3, 32, 32, 7), random_mask(0.3, 32, 32, 7))
    assert not np.array_equal(random_mask(0.3, 32, 32, 7), random_mask(0.3, 32, 32, 8))


@pytest.mark.parametrize("p", [0.1, 0.3, 0.5])
def test_random_mask_binomial_fraction(p):
    n = 128 * 128
    sigma = np.sqrt(p * (1 - p) / n)
    for seed in range(5):
        frac = random_mask(p, 128, 128, seed).mean()
        assert abs(frac - p) <= 4 * sigma
        assert abs(frac - p) <= 0.02


def test_mask_from_gt():
    assert not mask_from_gt([], 8, 6).any()
    assert mask_from_gt([(0, 0, 8, 6)], 8, 6).all()
    m = np.zeros((6, 8), dtype=np.uint8)
    m[1, 2] = 255
    np.testing.assert_array_equal(mask_from_gt(m, 8, 6), (m > 0).astype(float))
    with pytest.raises(ValueError, match="outside"):
        mask_from_gt([(0, 0, 9, 6)], 8, 6)
    with pytest.raises(ShapeError):
        mask_from_gt(np.zeros((5, 8)), 8, 6)


def test_gt_boxes_equal_confident_proposals():
    ds = generate_source(30, seed=12)
    for boxes in ds.boxes:
        props = [Proposal(*map(float, b), 1.0) for b in boxes]
        np.testing.assert_array_equal(mask_from_gt(boxes, 64, 64), build_attention_map(props, 0.5, 64, 64))


def test_crop_resize_identity_and_constant():
    amap = np.random.default_rng(0).random((12, 10))
    np.testing.assert_array_equal(crop_resize(amap, (0, 0, 10, 12), 10, 12), amap)
    const = np.full((12, 10), 0.25)
    np.testing.assert_array_equal(crop_resize(const, (3, 1, 5, 7), 4, 9), 0.25)
    with pytest.raises(ValueError):
        crop_resize(amap, (6, 0, 5, 5), 2, 2)


def test_crop_resize_checkerboard_downscale():
    board = (np.indices((16, 16)).sum(axis=0) % 2).astype(float)
    out = crop_resize(board, (2, 4, 8, 8), 4, 4)
    # manual nearest-neighbour pick: output i reads source offset floor((i + 0.5) * 2) = 2i + 1
    manual = np.array([[board[4 + 2 * i + 1, 2 + 2 * j + 1] for j in range(4)] for i in range(4)])
    np.testing.assert_array_equal(out, manual)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_crop_resize_preserves_value_set(seed):
    rng = np.random.default_rng(seed)
    amap = rng.integers(0, 4, size=(20, 20)) / 3.0
    x, y = (int(v) for v in rng.integers(0, 10, size=2))
    w, h = (int(v) for v in rng.integers(1, 11, size=2))
    out = crop_resize(amap, (x, y, w, h), int(rng.integers(1, 30)), int(rng.integers(1, 30)))
    assert set(np.unique(out)) <= set(np.unique(amap[y:y + h, x:x + w]))


def test_awm_examples():
    loss = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert awm_weight(Tensor(loss), np.array([[1.0, 0.0], [1.0, 0.0]])).item() == 1.0
    assert awm_weight(Tensor(loss), np.ones((2, 2))).item() == 2.5
    x = Tensor(loss, requires_grad=True)
    out = awm_weight(x, np.zeros((2, 2)))
    out.backward()
    assert out.item() == 0.0
    assert np.all(x.grad == 0)
    with pytest.raises(ShapeError):
        awm_weight(Tensor(loss), np.ones((2, 3)))


def test_awm_normalized_variant():
    loss = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert awm_weight(loss, np.array([[1.0, 0.0], [1.0, 0.0]]), normalize=True).item() == 2.0
    assert awm_weight(loss, np.zeros((2, 2)), normalize=True).item() == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_awm_gradient_is_attention_over_size(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(int(v) for v in rng.integers(1, 9, size=2))
    attn = rng.random(shape) * (rng.random(shape) < 0.5)
    x = Tensor(rng.normal(size=shape), requires_grad=True)
    out = awm_weight(x, attn)
    out.backward()
    np.testing.assert_array_equal(x.grad, attn * (1.0 / attn.size))
    assert np.all(x.grad[attn == 0] == 0)


@pytest.fixture()
def small_ds():
    return generate_source(5, seed=4)


@pytest.mark.parametrize("src", [AttentionSource("all_ones"), AttentionSource("random", p=0.3, seed=7),
                                 AttentionSource("gt_boxes"), AttentionSource("gt_inflate"),
                                 AttentionSource("gt_masks")])
def test_cache_round_trip(tmp_path, small_ds, src):
    precompute_attention_cache(small_ds, src, tmp_path, "source")
    maps = load_attention_cache(tmp_path, "source", small_ds.ids)
    for i, image_id in enumerate(small_ds.ids):
        direct = attention_for_image(src, i, 64, 64, boxes=small_ds.boxes[i], mask=small_ds.masks[i])
        np.testing.assert_array_equal(maps[image_id], cache_representation(direct, src.fractional))
    if src.kind == "all_ones":
        assert all(np.all(m == 1.0) for m in maps.values())


def test_cache_round_trip_fractional(tmp_path, small_ds, trained_detector):
    src = AttentionSource("detector", fn="mean")
    precompute_attention_cache(small_ds, src, tmp_path, "source", detector=trained_detector)
    maps = load_attention_cache(tmp_path, "source", small_ds.ids)
    imgs = small_ds.network_images()
    for i, image_id in enumerate(small_ds.ids):
        direct = attention_for_image(src, i, 64, 64, image=imgs[i], detector=trained_detector)
        np.testing.assert_array_equal(maps[image_id], direct.astype(np.float32).astype(np.float64))
    assert (tmp_path / "attn" / "source" / f"{small_ds.ids[0]}.f32").exists()


def test_cache_is_deterministic(tmp_path, small_ds):
    src = AttentionSource("random", p=0.3, seed=7)
    a = precompute_attention_cache(small_ds, src, tmp_path / "a", "source")
    b = precompute_attention_cache(small_ds, src, tmp_path / "b", "source")
    for f in sorted(a.iterdir()):
        assert f.read_bytes() == (b / f.name).read_bytes()


def test_cache_errors(tmp_path, small_ds):
    with pytest.raises(ValueError, match="detector"):
        precompute_attention_cache(small_ds, AttentionSource("detector"), tmp_path, "source")
    with pytest.raises(CacheError, match="build-attn"):
        load_attention_cache(tmp_path, "source", small_ds.ids)
    out = precompute_attention_cache(small_ds, AttentionSource("all_ones"), tmp_path, "source")
    with pytest.raises(CacheError, match="99999"):
        load_attention_cache(tmp_path, "source", small_ds.ids + ["99999"])
    (out / f"{small_ds.ids[2]}.png").unlink()
    with pytest.raises(CacheError, match=small_ds.ids[2]):
        load_attention_cache(tmp_path, "source", small_ds.ids)


def test_partial_cache_resume_and_rebuild(tmp_path, small_ds):
    src = AttentionSource("random", p=0.5, seed=3)
    out = precompute_attention_cache(small_ds, src, tmp_path, "source")
    reference = {f.name: f.read_bytes() for f in out.iterdir()}
    (out / "index").unlink()
    (out / f"{small_ds.ids[0]}.png").unlink()
    stale = out / f"{small_ds.ids[1]}.png"
    stale.write_bytes(reference[f"{small_ds.ids[3]}.png"])
    precompute_attention_cache(small_ds, src, tmp_path, "source", resume=True)
    assert stale.read_bytes() == reference[f"{small_ds.ids[3]}.png"]  # resume keeps existing files
    precompute_attention_cache(small_ds, src, tmp_path, "source", resume=False)
    assert {f.name: f.read_bytes() for f in out.iterdir()} == reference
