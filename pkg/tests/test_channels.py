import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from fedalign.channels import (
    GRID,
    ChannelTriplet,
    MeasureMode,
    barycentric_map,
    channel_histograms,
    image_to_channel_measures,
    intensity_lut,
    on_grid,
    pooled_channel_measures,
    project_image,
    projection_luts,
)
from fedalign.errors import ConvergenceError, ValidationError
from fedalign.ot import DiscreteMeasure, SinkhornConfig, build_cost, exact_1d_wasserstein, sinkhorn

HIST = MeasureMode.histogram()


def ramp_image(lo=0, hi=191, shape=(16, 12)):
    lv = np.linspace(lo, hi, shape[0] * shape[1]).round().astype(np.uint8)
    return np.stack([lv] * 3, -1).reshape(*shape, 3)


def textured(rng, shift=0):
    base = rng.normal(110, 30, (24, 24, 3)) + np.linspace(0, 40, 24)[:, None, None]
    return np.clip(base + shift, 0, 255).astype(np.uint8)


def triplet(measure):
    return ChannelTriplet(measure, measure, measure)


images = arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12), st.just(3)))


# -- measures ----------------------------------------------------------------


def test_constant_image_is_dirac():
    img = np.full((5, 7, 3), 128, np.uint8)
    for mode in (HIST, MeasureMode.subsample()):
        for m in image_to_channel_measures(img, mode):
            assert m.support.tolist() == [128 / 255]
            assert m.weights.tolist() == [1.0]


def test_two_pixel_histogram():
    img = np.array([[[0, 0, 0]], [[255, 255, 255]]], np.uint8)
    for m in image_to_channel_measures(img, HIST):
        assert m.support.tolist() == [0.0, 1.0]
        assert m.weights.tolist() == [0.5, 0.5]


def test_subsample_clamps_to_pixel_count():
    img = np.arange(300, dtype=np.uint8)[:300].reshape(10, 10, 3)
    tri = image_to_channel_measures(img, MeasureMode.subsample(500))
    for m in tri:
        assert len(m) == 100
        assert np.allclose(m.weights, 1 / 100)


def test_subsample_uses_same_positions_for_all_channels(rng):
    img = rng.integers(0, 256, (20, 20, 3), dtype=np.uint8)
    img[..., 1] = img[..., 0]
    img[..., 2] = img[..., 0]
    r, g, b = image_to_channel_measures(img, MeasureMode.subsample(50), seed=(3, 1, 2))
    assert r.equals(g) and g.equals(b)


def test_subsample_seeding(rng):
    img = rng.integers(0, 256, (30, 30, 3), dtype=np.uint8)
    mode = MeasureMode.subsample(40)
    a = image_to_channel_measures(img, mode, seed=(0, 1, 2))
    b = image_to_channel_measures(img, mode, seed=(0, 1, 2))
    c = image_to_channel_measures(img, mode, seed=(0, 1, 3))
    assert a.equals(b)
    assert not a.equals(c)


def test_reduced_bins():
    img = np.array([[[0, 0, 0], [1, 1, 1], [255, 255, 255]]], np.uint8)
    m = image_to_channel_measures(img, MeasureMode.histogram(bins=2))[0]
    assert len(m) == 2
    assert m.weights.tolist() == pytest.approx([2 / 3, 1 / 3])


def test_pooled_single_image(rng):
    img = textured(rng)
    assert pooled_channel_measures([img], HIST).equals(image_to_channel_measures(img, HIST))


def test_pooled_two_constants():
    imgs = [np.zeros((3, 3, 3), np.uint8), np.full((3, 3, 3), 255, np.uint8)]
    for m in pooled_channel_measures(imgs, HIST):
        assert m.support.tolist() == [0.0, 1.0]
        assert m.weights.tolist() == [0.5, 0.5]


def test_pooled_copies_idempotent(rng):
    img = textured(rng)
    assert pooled_channel_measures([img, img], HIST).equals(pooled_channel_measures([img], HIST))


def test_bad_images_rejected():
    with pytest.raises(ValidationError):
        image_to_channel_measures(np.zeros((4, 4), np.uint8))
    with pytest.raises(ValidationError):
        image_to_channel_measures(np.full((2, 2, 3), 300))
    with pytest.raises(ValidationError):
        pooled_channel_measures([])
    with pytest.raises(ValidationError):
        MeasureMode("joint")


def test_on_grid_expands(rng):
    m = image_to_channel_measures(textured(rng), HIST)[0]
    full = on_grid(m)
    assert len(full) == 256
    occupied = full.weights > 0
    assert np.allclose(full.support[occupied], m.support)
    assert np.allclose(full.weights[occupied], m.weights, rtol=1e-12, atol=0)


# -- barycentric map ---------------------------------------------------------


def test_barycentric_map_identity_plan(rng):
    src = DiscreteMeasure(rng.random(8), rng.dirichlet(np.ones(8)))
    plan, _ = sinkhorn(src, src, build_cost(src.support, src.support, 2), SinkhornConfig(1e-1))
    from fedalign.ot import TransportPlan

    ident = TransportPlan(np.diag(src.weights), src.weights, src.weights, 0.0, True, 0, 0.0)
    assert np.allclose(barycentric_map(ident, src, src.support), src.support)
    assert plan.converged


def test_barycentric_map_single_atom(rng):
    src = DiscreteMeasure.dirac(0.3)
    tgt = DiscreteMeasure(rng.random(5), rng.dirichlet(np.ones(5)))
    plan, _ = sinkhorn(src, tgt, build_cost(src.support, tgt.support, 2), SinkhornConfig(1e-2))
    assert barycentric_map(plan, src, tgt.support)[0] == pytest.approx(tgt.mean()[0])


def test_barycentric_map_two_atoms():
    src = DiscreteMeasure.uniform([0.0, 1.0])
    tgt = DiscreteMeasure.uniform([0.25, 0.75])
    plan, _ = sinkhorn(src, tgt, build_cost(src.support, tgt.support, 2), SinkhornConfig(1e-3))
    T = barycentric_map(plan, src, tgt.support)
    assert T == pytest.approx([0.25, 0.75], abs=0.02)


@given(
    st.lists(st.floats(0, 1), min_size=1, max_size=30, unique=True),
    st.lists(st.floats(0, 1), min_size=30, max_size=30),
)
def test_lut_monotone_and_in_range(xs, ts):
    lut = intensity_lut(np.array(xs), np.array(ts[: len(xs)]))
    assert lut.dtype == np.uint8 and lut.shape == (256,)
    assert np.all(np.diff(lut.astype(int)) >= 0)


def test_lut_translation_outside_support():
    lut = intensity_lut(np.array([100, 110]) / 255, np.array([120, 130]) / 255)
    assert lut[50] == 70
    assert lut[200] == 220
    assert lut[105] == 125


# -- projection --------------------------------------------------------------


def test_constant_image_to_dirac():
    img = np.full((6, 6, 3), 100, np.uint8)
    out = project_image(img, triplet(DiscreteMeasure.dirac(150 / 255)), HIST, SinkhornConfig(1e-2))
    assert np.all(out == 150)


@pytest.mark.parametrize("kind", ["histogram", "subsample"])
def test_self_projection_near_identity(rng, kind):
    img = textured(rng)
    mode = MeasureMode(kind)
    target = pooled_channel_measures([img], mode, seed=(0, 0, 0))
    out = project_image(img, target, mode, SinkhornConfig(1e-3), seed=(0, 0, 0))
    assert np.abs(out.astype(int) - img).mean() <= 2


def test_pure_shift_recovered():
    img = ramp_image(0, 191)
    target = triplet(DiscreteMeasure.uniform(GRID[64:]))
    out = project_image(img, target, HIST, SinkhornConfig(1e-4))
    diff = out.astype(int) - img
    assert diff.min() >= 62 and diff.max() <= 66


def test_projection_shape_range_determinism(rng):
    img = textured(rng)
    target = pooled_channel_measures([textured(rng, 40)], MeasureMode())
    a, luts = project_image(img, target, MeasureMode(), SinkhornConfig(1e-2), seed=5, return_luts=True)
    b = project_image(img, target, MeasureMode(), SinkhornConfig(1e-2), seed=5)
    assert a.shape == img.shape and a.dtype == np.uint8
    assert np.array_equal(a, b)
    assert np.all(np.diff(luts.astype(int), axis=1) >= 0)
    assert np.array_equal(luts, projection_luts(img, target, MeasureMode(), SinkhornConfig(1e-2), 5))


@pytest.mark.parametrize("shift", [16, 40, -30])
def test_projection_reduces_pair_discrepancy(rng, shift):
    a, b = textured(rng), textured(rng, shift)
    target = pooled_channel_measures([a, b], HIST)
    cfg = SinkhornConfig(1e-2)
    pa, pb = project_image(a, target, HIST, cfg), project_image(b, target, HIST, cfg)
    before = [exact_1d_wasserstein(x, y) for x, y in zip(channel_histograms([a]), channel_histograms([b]))]
    after = [exact_1d_wasserstein(x, y) for x, y in zip(channel_histograms([pa]), channel_histograms([pb]))]
    assert all(y < x for x, y in zip(before, after))


@given(images)
def test_projection_luts_always_monotone(img):
    target = triplet(DiscreteMeasure.uniform(GRID[::17]))
    out, luts = project_image(img, target, HIST, SinkhornConfig(1e-2), return_luts=True)
    assert out.shape == img.shape
    assert np.all(np.diff(luts.astype(int), axis=1) >= 0)


def test_projection_nonconvergence_names_channel(rng):
    img = textured(rng)
    target = pooled_channel_measures([textured(rng, 60)], HIST)
    with pytest.raises(ConvergenceError, match="channel=red"):
        project_image(img, target, HIST, SinkhornConfig(1e-3, max_iterations=1))
