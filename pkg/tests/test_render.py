import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import composite_oracle
from patchsmith import seeding
from patchsmith.errors import ConfigError, ShapeMismatchError
from patchsmith.render import (
    BoundingBox,
    PlacementPolicy,
    SceneSample,
    TransformParams,
    TransformRanges,
    apply_transform,
    patch_region,
    place_patch,
    render_scene,
    sample_transform,
)

# the region equals the box itself, so pixel-aligned boxes give unresized tiles
FILL = PlacementPolicy(width_frac=1.0, center_y_frac=0.5, height_frac=1.0)


def _box_px(top, left, h, w, size=16):
    return BoundingBox((left + w / 2) / size, (top + h / 2) / size, w / size, h / size)


def _patch(h=4, w=4, seed=0, dtype=torch.float64):
    return seeding.uniform((3, h, w), seed, 0.0, 1.0, dtype)


# ------------------------------------------------------------ transforms


def test_identity_transform_is_exact():
    p = _patch()
    assert torch.equal(apply_transform(p, TransformParams()), p)
    assert torch.equal(render_scene(SceneSample(torch.zeros(3, 8, 8)), p, TransformRanges.identity(), 3).image,
                       torch.zeros(3, 8, 8))


def test_brightness_and_contrast_examples():
    p = torch.full((3, 2, 2), 0.5, dtype=torch.float64)
    assert torch.allclose(apply_transform(p, TransformParams(brightness_shift=0.1)), torch.full_like(p, 0.6))
    q = torch.full((3, 2, 2), 0.75, dtype=torch.float64)
    assert torch.allclose(apply_transform(q, TransformParams(contrast_gain=0.5)), torch.full_like(q, 0.625))
    assert torch.equal(apply_transform(q, TransformParams(contrast_gain=3.0)), torch.ones_like(q))


def test_noise_bounded_and_seeded():
    p = torch.full((3, 8, 8), 0.5, dtype=torch.float64)
    a = apply_transform(p, TransformParams(noise_amplitude=0.05, seed=4))
    b = apply_transform(p, TransformParams(noise_amplitude=0.05, seed=4))
    c = apply_transform(p, TransformParams(noise_amplitude=0.05, seed=5))
    assert torch.equal(a, b) and not torch.equal(a, c)
    assert (a - p).abs().max().item() <= 0.05 + 1e-15
    assert (a - p).abs().max().item() > 0.0


def test_full_turn_rotation_and_quarter_turn():
    p = _patch(6, 6)
    assert torch.allclose(apply_transform(p, TransformParams(rotation_deg=360.0)), p, atol=1e-9)
    q = apply_transform(p, TransformParams(rotation_deg=90.0))
    assert any(torch.allclose(q, torch.rot90(p, k, dims=(1, 2)), atol=1e-9) for k in (1, 3))


def test_transform_rejects_bad_shape():
    with pytest.raises(ShapeMismatchError):
        apply_transform(torch.zeros(4, 4), TransformParams())


@pytest.mark.parametrize("bad", [
    dict(contrast=(1.2, 0.8)), dict(contrast=(0.0, 1.0)), dict(scale=(-1.0, 1.0)), dict(noise=(-0.1, 0.0)),
])
def test_invalid_ranges(bad):
    with pytest.raises(ConfigError):
        sample_transform(TransformRanges(**bad), 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_sampled_params_within_ranges(seed):
    r = TransformRanges()
    p = sample_transform(r, seed)
    assert r.brightness[0] <= p.brightness_shift <= r.brightness[1]
    assert r.contrast[0] <= p.contrast_gain <= r.contrast[1]
    assert r.noise[0] <= p.noise_amplitude <= r.noise[1]
    assert r.rotation[0] <= p.rotation_deg <= r.rotation[1]
    assert r.scale[0] <= p.scale_jitter <= r.scale[1]
    assert sample_transform(r, seed) == p


def test_contrast_draws_are_uniform_on_average():
    r = TransformRanges()
    gains = np.array([sample_transform(r, s).contrast_gain for s in range(4000)])
    mean, se = gains.mean(), gains.std(ddof=1) / math.sqrt(len(gains))
    assert abs(mean - 1.0) < 4 * se
    # variance of U(a, b) is (b - a)^2 / 12
    assert gains.var() == pytest.approx(0.4 ** 2 / 12, rel=0.1)


# ------------------------------------------------------------ compositing


def test_region_example():
    box = BoundingBox(0.5, 0.5, 0.5, 0.5)
    # 32 px box, patch 65% wide = 20.8 -> 21 px, square; centre 45% down from the top
    top, left, h, w = patch_region(box, (64, 64), (16, 16), PlacementPolicy())
    assert (h, w) == (21, 21)
    assert left == round(32 - 10.5) and top == round(16 + 0.45 * 32 - 10.5)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 12), st.integers(0, 12)), min_size=1, max_size=3),
       st.integers(0, 1000))
def test_place_matches_overwrite_oracle(corners, seed):
    img = seeding.uniform((3, 16, 16), seed, 0.0, 1.0, torch.float64)
    patch = _patch(4, 4, seed + 1)
    scene = SceneSample(img, [_box_px(top, left, 4, 4) for top, left in corners])
    out = place_patch(scene, patch, FILL).image
    ref = composite_oracle(img.tolist(), [(top, left, patch.tolist()) for top, left in corners])
    assert torch.equal(out, torch.tensor(ref, dtype=torch.float64))


def test_later_box_wins_and_edges_clip():
    img = torch.zeros(3, 16, 16, dtype=torch.float64)
    first, second = torch.full((3, 4, 4), 0.25, dtype=torch.float64), torch.full((3, 4, 4), 0.75, dtype=torch.float64)
    scene = SceneSample(img, [_box_px(2, 2, 4, 4), _box_px(4, 4, 4, 4)])
    out = place_patch(scene, torch.cat([first[:, :2], second[:, 2:]], 1), FILL).image
    # the overlap 4..6 x 4..6 holds the top rows of the second placement
    assert torch.equal(out[:, 4:6, 4:6], torch.full((3, 2, 2), 0.25, dtype=torch.float64))
    assert out.gt(0).sum().item() == 3 * (32 - 4)
    edge = SceneSample(img, [_box_px(-2, 14, 4, 4)])
    out = place_patch(edge, first, FILL).image
    assert out.gt(0).sum().item() == 3 * 2 * 2
    assert torch.equal(out[:, 0:2, 14:16], torch.full((3, 2, 2), 0.25, dtype=torch.float64))


def test_no_boxes_leaves_scene_untouched():
    scene = SceneSample(torch.rand(3, 8, 8))
    assert place_patch(scene, _patch()) is scene


def test_box_validation():
    with pytest.raises(ConfigError):
        BoundingBox(0.5, 0.5, 0.0, 0.1)
    with pytest.raises(ConfigError):
        SceneSample(torch.zeros(3, 8, 8), [BoundingBox(2.0, 2.0, 0.1, 0.1)])
    b = SceneSample(torch.zeros(3, 8, 8), [BoundingBox(0.0, 0.5, 0.4, 0.4)]).boxes[0]
    assert b.xyxy() == pytest.approx((0.0, 0.3, 0.2, 0.7))


# ------------------------------------------------------------ gradients


def test_gradient_is_local_and_counts_coverage():
    img = torch.zeros(3, 16, 16, dtype=torch.float64)
    scene = SceneSample(img, [_box_px(2, 2, 4, 4), _box_px(10, 9, 4, 4)])
    patch = _patch().requires_grad_(True)
    out = place_patch(scene, patch, FILL).image
    weights = torch.zeros_like(out)
    weights[:, 0:1, :] = 1.0  # a row no box touches
    (out * weights).sum().backward()
    assert patch.grad.abs().max().item() == 0.0
    patch.grad = None
    place_patch(scene, patch, FILL).image.sum().backward()
    assert torch.equal(patch.grad, torch.full_like(patch, 2.0))


def test_render_gradient_matches_finite_differences():
    img = seeding.uniform((3, 16, 16), 2, 0.0, 1.0, torch.float64)
    scene = SceneSample(img, [BoundingBox(0.45, 0.5, 0.5, 0.7)])
    ranges = TransformRanges(noise=(0.0, 0.0))
    # an interior patch keeps the clamp away from its kinks
    patch = 0.3 + 0.4 * _patch(8, 8, 6)
    w = seeding.gaussian((3, 16, 16), 9, torch.float64)

    def f(p):
        return (render_scene(scene, p, ranges, seed=13).image * w).sum()

    torch.autograd.gradcheck(f, (patch.clone().requires_grad_(True),), eps=1e-6, atol=1e-6)
