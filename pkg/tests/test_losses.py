import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from awada import tensor as T
from awada.losses import (AwmPlacement, LossWeights, cycle_loss, gan_loss_discriminator, gan_loss_generator,
                          semantic_loss, total_loss)
from awada.nets import DiscriminatorNet, GeneratorNet, SegmenterNet, discriminate, generate, segment
from awada.tensor import GradientError, ShapeError, Tensor


def full(shape, v):
    return Tensor(np.full(shape, float(v)), requires_grad=True)


def test_discriminator_examples():
    s = (1, 1, 4, 4)
    assert gan_loss_discriminator(full(s, 0.5), full(s, 0.5), "log").item() == pytest.approx(2 * math.log(2))
    assert gan_loss_discriminator(full(s, 1.0), full(s, 0.0), "least_squares").item() == 0.0


def test_discriminator_masked_fake_term():
    rng = np.random.default_rng(0)
    s = (2, 1, 3, 3)
    real = Tensor(rng.uniform(0.1, 0.9, s), requires_grad=True)
    fake = Tensor(rng.uniform(0.1, 0.9, s), requires_grad=True)
    for form in ("log", "least_squares"):
        real.zero_grad()
        fake.zero_grad()
        loss = gan_loss_discriminator(real, fake, form, attn_fake=np.zeros(s))
        only_real = gan_loss_discriminator(real, Tensor(np.full(s, 0.5)), form, attn_fake=np.zeros(s))
        assert loss.item() == only_real.item()
        loss.backward()
        assert np.all(fake.grad == 0)
        assert np.any(real.grad != 0)


def test_generator_examples():
    s = (1, 1, 4, 4)
    assert gan_loss_generator(full(s, 1.0), "least_squares").item() == 0.0
    assert gan_loss_generator(full(s, 0.5), "log").item() == pytest.approx(math.log(2))
    half = np.zeros(s)
    half[..., :2] = 1
    for form in ("log", "least_squares"):
        d = full(s, 0.3)
        assert gan_loss_generator(d, form, attn=half).item() == pytest.approx(
            0.5 * gan_loss_generator(d, form).item(), abs=1e-15)


def test_cycle_examples():
    x = Tensor(np.random.default_rng(1).uniform(-1, 1, (2, 3, 4, 4)))
    assert cycle_loss(x, x, x, x).item() == 0.0
    shifted = T.add(x, 0.5)
    assert cycle_loss(x, shifted, x, x).item() == pytest.approx(0.5)
    ones = np.ones((2, 4, 4))
    assert cycle_loss(x, shifted, x, shifted, ones, ones).item() == cycle_loss(x, shifted, x, shifted).item()
    with pytest.raises(ShapeError):
        cycle_loss(x, Tensor(np.zeros((2, 3, 4, 5))), x, x)


def _dist(rng, shape):
    e = np.exp(rng.normal(size=shape))
    return e / e.sum(axis=1, keepdims=True)


def test_semantic_examples():
    rng = np.random.default_rng(2)
    q = _dist(rng, (1, 2, 3, 3))
    assert semantic_loss(q, Tensor(q)).item() == pytest.approx(0.0, abs=1e-15)
    p = np.zeros((1, 2, 3, 3))
    p[:, 0] = 1.0
    assert semantic_loss(np.full((1, 2, 3, 3), 0.5), Tensor(p)).item() == pytest.approx(math.log(2))
    with pytest.raises(ValueError, match="distribution"):
        semantic_loss(np.full((1, 2, 3, 3), 0.7), Tensor(p))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_semantic_kl_nonnegative(seed):
    rng = np.random.default_rng(seed)
    shape = (1, int(rng.integers(2, 4)), 3, 3)
    assert semantic_loss(_dist(rng, shape), Tensor(_dist(rng, shape))).item() >= -1e-15


def test_semantic_loss_leaves_frozen_segmenter_untouched():
    seg = SegmenterNet(0)
    seg.freeze()
    g = GeneratorNet(1)
    x = Tensor(np.random.default_rng(3).uniform(-1, 1, (1, 3, 16, 16)))
    loss = semantic_loss(segment(seg, x).data, segment(seg, generate(g, x)))
    loss.backward()
    assert all(p.grad is None and not p.requires_grad for p in seg.parameters())
    assert any(np.any(p.grad != 0) for p in g.parameters())


def test_total_examples():
    ones = {k: Tensor(1.0) for k in ("gan_st", "gan_ts", "cyc", "sem")}
    assert total_loss(ones, LossWeights()).item() == 13.0
    assert total_loss(ones, LossWeights(0, 0, 0, 0)).item() == 0.0
    comps = {"gan_st": Tensor(0.3), "gan_ts": Tensor(0.2), "cyc": Tensor(0.7), "sem": Tensor(0.1)}
    base = total_loss(comps, LossWeights(1, 1, 10, 1)).item()
    doubled = total_loss(comps, LossWeights(1, 1, 20, 1)).item()
    assert doubled - base == pytest.approx(10 * 0.7, abs=1e-12)
    comps["cyc"] = Tensor(float("nan"))
    with pytest.raises(GradientError, match="cyc"):
        total_loss(comps, LossWeights())
    with pytest.raises(ValueError):
        LossWeights(-1, 1, 1, 1)


def test_placement_labels():
    assert AwmPlacement().label() == "xx--"
    assert AwmPlacement.none().label() == "----"


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_all_ones_attention_equals_unweighted(seed):
    rng = np.random.default_rng(seed)
    s = (2, 1, 3, 4)
    d1, d2 = Tensor(rng.uniform(0.05, 0.95, s)), Tensor(rng.uniform(0.05, 0.95, s))
    ones = np.ones(s)
    for form in ("log", "least_squares"):
        assert gan_loss_discriminator(d1, d2, form, ones, ones).item() == gan_loss_discriminator(d1, d2, form).item()
        assert gan_loss_generator(d1, form, ones).item() == gan_loss_generator(d1, form).item()
    x, r = Tensor(rng.normal(size=(2, 3, 3, 4))), Tensor(rng.normal(size=(2, 3, 3, 4)))
    assert cycle_loss(x, r, x, r, ones[:, 0], ones[:, 0]).item() == cycle_loss(x, r, x, r).item()
    q, p = _dist(rng, (2, 2, 3, 4)), Tensor(_dist(rng, (2, 2, 3, 4)))
    assert semantic_loss(q, p, ones).item() == semantic_loss(q, p).item()


def test_masked_discriminator_outputs_block_generator_gradient():
    """Input pixels seen only by attention-zero score cells receive exactly zero gradient."""
    disc = DiscriminatorNet(0)
    fake = Tensor(np.random.default_rng(4).uniform(-1, 1, (1, 3, 32, 32)), requires_grad=True)
    attn = np.zeros((1, 1, 4, 4))
    attn[..., 2:] = 1.0  # right half of the 4x4 score map
    for form in ("log", "least_squares"):
        fake.zero_grad()
        disc.zero_grad()
        gan_loss_generator(discriminate(disc, fake), form, attn=attn).backward()
        # the leftmost input column reached by score column 2 is 9 (three k4/s2/p1 layers)
        assert np.all(fake.grad[..., :9] == 0)
        assert np.any(fake.grad[..., 9:] != 0)


def test_fully_masked_discriminator_gives_zero_generator_parameter_gradient():
    g, disc = GeneratorNet(0), DiscriminatorNet(1)
    x = Tensor(np.random.default_rng(5).uniform(-1, 1, (2, 3, 32, 32)))
    gan_loss_generator(discriminate(disc, generate(g, x)), attn=np.zeros((2, 1, 4, 4))).backward()
    assert all(np.all(p.grad == 0) for p in g.parameters())


def test_loss_shape_checks():
    with pytest.raises(ShapeError):
        gan_loss_discriminator(full((1, 1, 2, 2), 0.5), full((1, 1, 3, 3), 0.5))
    with pytest.raises(ShapeError):
        gan_loss_generator(full((1, 1, 2, 2), 0.5), attn=np.ones((3, 3)))
    with pytest.raises(ValueError):
        gan_loss_generator(full((1, 1, 2, 2), 0.5), form="wasserstein")
