import numpy as np
import pytest

from ig_crowd.density import (
    DensityError,
    DensityMap,
    PatchBank,
    SceneSampler,
    StitchError,
    block_sum,
    extract_patch,
    extract_patch_at,
    flip_augment,
    grid_patches,
    make_density_map,
    roi_grid,
    sample_patches,
    stitch_predictions,
)
from ig_crowd.schemas.core import PatchSpec


def test_mass_conservation_random_point_sets():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        h, w = int(rng.integers(8, 33)), int(rng.integers(8, 33))
        n = int(rng.integers(0, 12))
        pts = np.stack([rng.uniform(0, w, n), rng.uniform(0, h, n)], axis=1)
        if n:
            # pin one head next to a corner
            pts[0] = [rng.choice([0.0, w - 1e-6]), rng.choice([0.0, h - 1e-6])]
        sigma = float(rng.uniform(0.3, 4.0))
        dm = make_density_map(pts, (h, w), sigma)
        assert abs(dm.count - n) <= 1e-6 * max(n, 1)
        assert (dm.values >= 0).all()


def test_density_map_shape_and_peak():
    dm = make_density_map([(5.5, 3.5)], (8, 12), sigma=1.0)
    assert (dm.height, dm.width) == (8, 12)
    assert np.unravel_index(dm.values.argmax(), dm.values.shape) == (3, 5)
    assert make_density_map([], (4, 4)).count == 0.0


def test_density_map_rejects_bad_input():
    with pytest.raises(DensityError, match="head point 1"):
        make_density_map([(1.0, 1.0), (4.0, 1.0)], (4, 4))
    with pytest.raises(DensityError):
        make_density_map([(1.0, 1.0)], (4, 4), sigma=0.0)
    with pytest.raises(DensityError):
        DensityMap(np.zeros((0, 3)))


def test_block_sum():
    values = np.arange(64.0).reshape(8, 8)
    out = block_sum(values)
    assert out.shape == (2, 2)
    assert out.sum() == values.sum()
    assert out[0, 0] == values[:4, :4].sum()
    with pytest.raises(DensityError):
        block_sum(np.zeros((6, 8)))


def test_extract_patch_zero_pads_border(spec):
    image = np.ones((32, 32))
    gt = make_density_map([(1.5, 1.5), (20.0, 20.0)], (32, 32), sigma=1.0).values
    patch, roi_gt, count = extract_patch_at(image, gt, 0, 0, spec)
    assert patch.shape == (16, 16)
    mt, ml = spec.margin
    assert (patch[:mt, :] == 0).all() and (patch[:, :ml] == 0).all()
    assert (patch[mt:, ml:] == 1).all()
    assert roi_gt.shape == spec.roi_map_shape
    assert count == pytest.approx(gt[:8, :8].sum())
    centered = extract_patch(image, gt, (4, 4), spec)
    assert centered[2] == count
    with pytest.raises(DensityError):
        extract_patch_at(image, gt, 28, 0, spec)


def test_roi_grid_covers_image(spec):
    grid = roi_grid((32, 36), spec)
    tops = sorted({t for t, _ in grid})
    lefts = sorted({l for _, l in grid})
    assert tops == [0, 4, 8, 12, 16, 20, 24]
    assert lefts[-1] == 36 - spec.roi_w
    covered = np.zeros((32, 36), dtype=bool)
    for t, l in grid:
        covered[t:t + spec.roi_h, l:l + spec.roi_w] = True
    assert covered.all()


def test_stitch_averages_overlaps():
    a = np.full((2, 2), 1.0)
    b = np.full((2, 2), 3.0)
    dm = stitch_predictions([(a, (0, 0)), (b, (0, 1))], (2, 3))
    assert np.allclose(dm.values, [[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]])
    with pytest.raises(StitchError, match="not covered"):
        stitch_predictions([(a, (0, 0))], (2, 3))
    with pytest.raises(StitchError):
        stitch_predictions([(a, (1, 2))], (2, 3))


def test_grid_patches_stitch_back_to_gt(tiny_scenes, spec):
    scene = tiny_scenes[-1]
    bank = grid_patches(scene, spec)
    maps = [(bank.gts[i, 0], (t // 4, l // 4)) for i, (t, l) in enumerate(bank.placements)]
    stitched = stitch_predictions(maps, (32 // 4, 32 // 4))
    assert np.allclose(stitched.values, block_sum(scene.density))


def test_patch_bank_subset_and_rois(bank, spec):
    sub = bank.subset([2, 0])
    assert len(sub) == 2
    assert sub.ids == [bank.ids[2], bank.ids[0]]
    assert np.array_equal(sub.images[1], bank.images[0])
    rois = bank.rois()
    assert rois.shape == (len(bank), 1, spec.roi_h, spec.roi_w)
    assert len(PatchBank.empty(spec)) == 0
    assert bank.draw(np.random.default_rng(0)) is bank


def test_sampling_is_seeded(tiny_scenes, spec):
    a = sample_patches(tiny_scenes, spec, 3, np.random.default_rng(5))
    b = sample_patches(tiny_scenes, spec, 3, np.random.default_rng(5))
    assert a.ids == b.ids
    assert len(a) == 3 * len(tiny_scenes)
    assert np.allclose(a.counts, a.gts.reshape(len(a), -1).sum(axis=1))
    sampler = SceneSampler(tiny_scenes, spec, per_draw=5)
    assert len(sampler.draw(np.random.default_rng(0))) == 5
    with pytest.raises(DensityError):
        SceneSampler([], spec, per_draw=5).draw(np.random.default_rng(0))


def test_patch_spec_geometry():
    spec = PatchSpec()
    assert spec.margin == (16, 16)
    assert spec.roi_map_shape == (8, 8)
    assert spec.resolved_stride == 16
    with pytest.raises(ValueError):
        PatchSpec(patch_w=64, roi_w=36)
    with pytest.raises(ValueError):
        PatchSpec(patch_w=16, roi_w=32)


def test_flip_mirrors_patch_and_gt():
    patch = np.arange(12.0).reshape(1, 3, 4)
    gt = np.zeros((1, 2, 5))
    gt[0, 1, 1] = 1.0
    fp, fg = flip_augment(patch, gt)
    assert fg[0, 1, 5 - 1 - 1] == 1.0 and fg.sum() == gt.sum()
    assert np.array_equal(fp[0, 0], [3.0, 2.0, 1.0, 0.0])
    back = flip_augment(fp, fg)
    assert np.array_equal(back[0], patch) and np.array_equal(back[1], gt)
