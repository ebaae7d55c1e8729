import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from smparse import synthdata as sd
from smparse.config import GridSpec, level_for_scale
from smparse.targets import (assign_targets, center_region, downsample_mask, flat_part_list, mask_extent,
                             round_half_up, to_grid)


def test_center_region_example():
    assert sorted(center_region(5.5, 5.5, 10, 10, 0.2, 40)) == [(5, 5), (5, 6), (6, 5), (6, 6)]


def test_center_region_fallback():
    assert center_region(7.3, 2.6, 1, 1, 0.2, 40) == [(7, 3)]
    assert center_region(7.5, 2.5, 1, 1, 0.2, 40) == [(8, 3)]


def test_center_region_clamped_to_grid():
    cells = center_region(0.2, 39.8, 20, 20, 0.2, 40)
    assert all(0 <= i < 40 and 0 <= j < 40 for i, j in cells)
    assert (0, 39) in cells


@given(cx=st.floats(0, 39), cy=st.floats(0, 39), h=st.floats(0.5, 30), w=st.floats(0.5, 30))
def test_center_region_monotone_in_eps(cx, cy, h, w):
    big = set(center_region(cx, cy, h, w, 0.2, 40))
    small = set(center_region(cx, cy, h, w, 0.1, 40))
    assert len(small) <= len(big)
    assert (round_half_up(cx), round_half_up(cy)) in big or len(big) > 0


def test_to_grid_cell_centers():
    # pixel 3 of an 8-pixel axis on a 2-cell grid lies in cell 0; pixel 4 in cell 1
    assert round_half_up(to_grid(3, 8, 2)) == 0
    assert round_half_up(to_grid(4, 8, 2)) == 1
    assert to_grid(-0.5, 8, 2) == -0.5 and to_grid(7.5, 8, 2) == 1.5


def _scene_with_human_at(rects, size=256, cats=(0, 1)):
    humans = []
    for rs in rects:
        parts = []
        for cat, (x0, y0, x1, y1) in zip(cats, rs):
            m = np.zeros((size, size), dtype=bool)
            m[y0:y1, x0:x1] = True
            parts.append(sd.PartInstance(cat, m))
        humans.append(sd.HumanInstance(parts))
    return sd.ParsingScene(np.zeros((size, size, 3), np.uint8), humans, "t", 6)


def test_offsets_brute_force_single():
    s = _scene_with_human_at([[(64, 64, 96, 96), (64, 96, 96, 160)]])
    t = assign_targets(s, GridSpec(), 0.2)
    S = 40
    for p in s.humans[0].parts:
        bx, by = p.barycenter
        gx, gy = (bx + 0.5) * S / 256 - 0.5, (by + 0.5) * S / 256 - 0.5
        jj, ii = np.nonzero(t.offset_valid[p.category])
        assert len(ii) > 0
        assert np.array_equal(t.offset[p.category, 0, jj, ii], gx - ii)
        assert np.array_equal(t.offset[p.category, 1, jj, ii], gy - jj)


def test_offset_valid_only_on_center_cells_of_owners():
    spec = sd.SceneSpec(num_humans=(2, 3), num_part_classes=6, occlusion=True)
    for seed in range(10):
        s = sd.generate_scene(seed, spec)
        t = assign_targets(s, GridSpec(), 0.2)
        for p in range(6):
            jj, ii = np.nonzero(t.offset_valid[p])
            for j, i in zip(jj, ii):
                assert t.center_pos[j, i] == 1
                assert p in s.humans[t.center_owner[j, i]].categories


def test_smaller_human_wins_contested_cells():
    big = [(40, 40, 140, 140), (40, 140, 140, 200)]
    small = [(84, 84, 104, 104), (84, 104, 104, 116)]
    s = _scene_with_human_at([big, small])
    t = assign_targets(s, GridSpec(), 0.6)
    area_big, area_small = s.humans[0].union_mask.sum(), s.humans[1].union_mask.sum()
    assert area_small < area_big
    eh, ew = mask_extent(s.humans[1].union_mask)
    cx, cy = (to_grid(v, 256, 40) for v in s.humans[1].barycenter)
    cells_small = set(center_region(cx, cy, eh * 40 / 256, ew * 40 / 256, 0.6, 40))
    owners = {t.center_owner[j, i] for i, j in cells_small}
    assert owners == {1}
    # offsets at a contested cell point to the small human's parts
    i, j = next(iter(cells_small))
    bx, _ = s.humans[1].parts[0].barycenter
    assert t.offset[0, 0, j, i] == to_grid(bx, 256, 40) - i


def test_scale_100_part_routes_to_f3_f4():
    s = _scene_with_human_at([[(60, 60, 160, 160)]], cats=(2,))
    assert s.humans[0].parts[0].area == 100 * 100
    t = assign_targets(s, GridSpec(), 0.2)
    levels = [lv for lv in range(5) if t.part_pos[lv].any()]
    assert levels == [1, 2]
    assert all(not t.part_pos[lv][[0, 1, 3, 4, 5]].any() for lv in range(5))


def test_empty_scene_all_negative():
    s = sd.ParsingScene(np.zeros((64, 64, 3), np.uint8), [], "e", 6)
    t = assign_targets(s, GridSpec(), 0.2)
    assert t.center_pos.sum() == 0 and t.offset_valid.sum() == 0
    assert not t.mask_targets and all(p.sum() == 0 for p in t.part_pos)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6), occ=st.booleans())
def test_target_invariants(seed, occ):
    s = sd.generate_scene(seed, sd.SceneSpec(occlusion=occ))
    g = GridSpec()
    t = assign_targets(s, g, 0.2)
    flat = flat_part_list(s)
    for mt in t.mask_targets:
        assert mt.mask.any()
        assert mt.mask.shape == (64, 64)
    for lv in range(5):
        cs, js, is_ = np.nonzero(t.part_pos[lv])
        for c, j, i in zip(cs, js, is_):
            _, part = flat[t.part_owner[lv][c, j, i]]
            assert lv in level_for_scale(math.sqrt(part.area), g)
            assert part.category == c
    assert len(t.mask_targets) == sum(int(p.sum()) for p in t.part_pos)
    assert (t.offset_weight >= 0).all()


def test_offset_weight_inverse_sqrt_extent():
    s = _scene_with_human_at([[(64, 64, 96, 96), (64, 96, 96, 160)]])
    t = assign_targets(s, GridSpec(), 0.2)
    h, w = 96 * 40 / 256, 32 * 40 / 256
    vals = t.offset_weight[t.offset_valid > 0]
    assert np.allclose(vals, 1 / math.sqrt(h * w), rtol=0, atol=1e-15)


def test_downsample_keeps_binary_and_exact_on_lattice():
    m = np.zeros((64, 64), dtype=bool)
    m[8:24, 16:40] = True
    d = downsample_mask(m)
    assert d.dtype == bool and d.shape == (16, 16)
    assert np.array_equal(np.repeat(np.repeat(d, 4, 0), 4, 1), m)
