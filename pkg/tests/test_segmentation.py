import math

import numpy as np
import pytest

from mriqa.metrics import EmptyRegion, fg_bg_stats
from mriqa.segmentation import (
    DegenerateVolume, background_mask, dice, foreground_mask, guard_band, otsu_bin,
)
from mriqa.volume_io import PhantomSpec, Volume, generate_phantom
from oracles import components_26


def test_phantom_dice():
    v, gt = generate_phantom(PhantomSpec(tissue_intensity=100, background_noise_sigma=1, seed=5))
    assert dice(foreground_mask(v), gt.mask) >= 0.99


def test_constant_volume_is_degenerate():
    with pytest.raises(DegenerateVolume):
        foreground_mask(Volume(np.full((8, 8, 8), 3.0)))


def test_largest_component_only():
    data = np.zeros((30, 30, 30), dtype=np.float32)
    data[2:12, 2:12, 2:12] = 100  # 1000 voxels
    data[20:25, 20:25, 20:28] = 100  # 200 voxels
    sizes = sorted(len(c) for c in components_26(data.astype(bool).tolist()))
    assert sizes == [200, 1000]
    fg = foreground_mask(Volume(data))
    assert int(fg.sum()) == 1000
    assert fg[2:12, 2:12, 2:12].all()
    assert not fg[20:25, 20:25, 20:28].any()


def test_closing_fills_pinhole():
    data = np.zeros((20, 20, 20), dtype=np.float32)
    data[4:16, 4:16, 4:16] = 100
    data[10, 10, 10] = 0
    fg = foreground_mask(Volume(data))
    assert fg[10, 10, 10]


def test_background_excludes_guard_band(small_phantom):
    v, _ = small_phantom
    fg = foreground_mask(v)
    bg = background_mask(v, fg)
    band = guard_band(fg, bg)
    assert not (fg & bg).any()
    assert ((fg.astype(int) + bg.astype(int) + band.astype(int)) == 1).all()
    assert band.any()


def test_background_empty_when_foreground_fills_volume():
    data = np.full((6, 6, 6), 100.0, dtype=np.float32)
    data[0, 0, 0] = 0.0
    v = Volume(data)
    fg = np.ones(v.dims, bool)
    fg[0, 0, 0] = False
    bg = background_mask(v, fg)
    assert not bg.any()
    with pytest.raises(EmptyRegion):
        fg_bg_stats(v, fg, bg)


def test_background_mean_near_zero(phantom):
    v, gt = phantom
    fg = foreground_mask(v)
    bg = background_mask(v, fg)
    vals = v.data[bg].astype(np.float64)
    bound = 3 * 5.0 / math.sqrt(vals.size)
    assert abs(vals.mean()) <= bound


@pytest.mark.parametrize("a,b", [(0.5, 0.0), (2.0, 0.0), (4.0, 16.0), (3.0, 7.0), (0.01, -2.0)])
def test_affine_rescaling_invariance(small_phantom, a, b):
    v, _ = small_phantom
    fg = foreground_mask(v)
    scaled = Volume(v.data.astype(np.float64) * a + b)
    assert np.array_equal(foreground_mask(scaled), fg)


def test_otsu_tie_goes_low():
    # two equal clusters with an empty gap: every split inside the gap scores equally
    vals = np.array([0.0] * 10 + [1.0] * 10)
    _, split = otsu_bin(vals, nbins=4)
    assert split == 0


def test_otsu_two_level_split():
    vals = np.concatenate([np.zeros(50), np.full(50, 10.0)])
    idx, split = otsu_bin(vals)
    assert ((idx > split) == (vals > 5)).all()
