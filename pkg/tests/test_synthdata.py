import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image
from scipy import ndimage

from smparse import synthdata as sd


def test_barycenter_of_single_human():
    s = sd.generate_scene(7, sd.SceneSpec(num_humans=(1, 1)))
    h = s.humans[0]
    union = np.zeros(s.shape, dtype=bool)
    for p in h.parts:
        union |= p.mask
    ys, xs = np.nonzero(union)
    assert h.barycenter == (xs.mean(), ys.mean())


def test_same_seed_is_bit_identical():
    spec = sd.SceneSpec(num_humans=(2, 3), occlusion=True)
    a, b = sd.generate_scene(7, spec), sd.generate_scene(7, spec)
    assert a == b
    assert a.image.tobytes() == b.image.tobytes()


def test_occluded_parts_are_nonempty_or_dropped():
    s = sd.generate_scene(11, sd.SceneSpec(num_humans=(3, 3), occlusion=True))
    s.validate()
    for h in s.humans:
        for p in h.parts:
            assert p.mask.sum() >= 1


def test_occlusion_later_human_wins():
    spec = sd.SceneSpec(num_humans=(3, 3), occlusion=True, human_scale=(120.0, 160.0))
    found = False
    for seed in range(20):
        s = sd.generate_scene(seed, spec)
        unions = [h.union_mask for h in s.humans]
        for a in range(len(unions)):
            for b in range(a + 1, len(unions)):
                assert not (unions[a] & unions[b]).any()
        found |= len(s.humans) == 3
    assert found


def test_humans_are_connected():
    for seed in range(30):
        s = sd.generate_scene(seed, sd.SceneSpec())
        for h in s.humans:
            assert ndimage.label(h.union_mask, structure=np.ones((3, 3)))[1] == 1


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), c=st.integers(1, 10), occ=st.booleans())
def test_part_count_and_uniqueness(seed, c, occ):
    s = sd.generate_scene(seed, sd.SceneSpec(num_part_classes=c, occlusion=occ))
    s.validate()
    for h in s.humans:
        cats = h.categories
        assert 1 <= len(cats) <= c
        assert len(set(cats)) == len(cats)
        union = np.zeros(s.shape, dtype=bool)
        for p in h.parts:
            union |= p.mask
        assert np.array_equal(union, h.union_mask)


def test_barycenter_recomputation_exact():
    for seed in range(10):
        s = sd.generate_scene(seed, sd.SceneSpec(occlusion=True))
        for h in s.humans:
            for p in h.parts:
                ys, xs = np.nonzero(p.mask)
                bx, by = p.barycenter
                assert abs(bx - xs.mean()) < 1e-9 and abs(by - ys.mean()) < 1e-9


def test_infeasible_spec_raises():
    with pytest.raises(sd.InfeasibleSceneError):
        sd.generate_scene(0, sd.SceneSpec(num_humans=(6, 6), human_scale=(200.0, 220.0), max_tries=5))
    with pytest.raises(ValueError):
        sd.generate_scene(0, sd.SceneSpec(height=32, width=32))


def test_single_category_scenes():
    s = sd.generate_scene(3, sd.SceneSpec(num_part_classes=1))
    assert all(h.categories == [0] for h in s.humans)


def test_scene_json_lists_humans(tmp_path):
    s = sd.generate_scene(5, sd.SceneSpec(num_humans=(2, 2)))
    sd.write_scene(s, tmp_path / "s")
    meta = json.loads((tmp_path / "s" / "scene.json").read_text())
    assert meta["format"] == 1
    assert len(meta["humans"]) == 2
    assert [e["categories"] for e in meta["humans"]] == [h.categories for h in s.humans]


def test_round_trip_50_scenes(tmp_path):
    spec = sd.SceneSpec(occlusion=True)
    scenes = sd.generate_dataset(50, 3, spec)
    sd.write_dataset(scenes, tmp_path)
    back = sd.read_dataset(tmp_path)
    assert back == scenes


def test_round_trip_keeps_scores(tmp_path):
    s = sd.generate_scene(1, sd.SceneSpec(num_humans=(1, 1)))
    h = s.humans[0]
    for k, p in enumerate(h.parts):
        p.score = 0.5 + 0.01 * k
    h.score = 0.875
    sd.write_scene(s, tmp_path / "x")
    assert sd.read_scene(tmp_path / "x") == s


def test_category_out_of_range_png(tmp_path):
    s = sd.generate_scene(1, sd.SceneSpec(num_humans=(1, 1)))
    d = sd.write_scene(s, tmp_path / "x")
    lab = np.array(Image.open(d / "human_000.png"))
    lab[lab == 1] = s.num_part_classes + 1
    Image.fromarray(lab).save(d / "human_000.png")
    with pytest.raises(sd.CategoryRangeError):
        sd.read_scene(d)


def test_missing_file_and_size_mismatch(tmp_path):
    s = sd.generate_scene(1, sd.SceneSpec(num_humans=(1, 1)))
    d = sd.write_scene(s, tmp_path / "x")
    Image.fromarray(np.zeros((8, 8), dtype=np.uint8)).save(d / "human_000.png")
    with pytest.raises(sd.RasterSizeError):
        sd.read_scene(d)
    (d / "human_000.png").unlink()
    with pytest.raises(sd.MissingFileError):
        sd.read_scene(d)
    assert issubclass(sd.MissingFileError, FileNotFoundError)


def test_duplicate_categories_rejected():
    m = np.ones((4, 4), dtype=bool)
    with pytest.raises(sd.SceneFormatError):
        sd.HumanInstance([sd.PartInstance(0, m), sd.PartInstance(0, m)])


def test_confusable_colors_are_close():
    spec = sd.SceneSpec(confusable=((2, 3),))
    colors = sd._category_colors(spec)
    assert np.abs(colors[2] - colors[3]).max() <= 10
