import json

import numpy as np
import pytest

from owseg.data import (CategorySplit, GroundTruthInstance, SceneSpec, augment,
                        generate_synthetic, load_coco, rasterize_polygon, save_dataset)
from owseg.geometry import mask_to_box, rle_encode


def write_coco(tmp_path, annotations, categories=None, images=None):
    coco = {
        "images": images or [{"id": 1, "file_name": "a.png", "height": 20, "width": 20}],
        "annotations": annotations,
        "categories": categories or [{"id": 1, "name": "a"}, {"id": 2, "name": "b"},
                                     {"id": 3, "name": "c"}],
    }
    path = tmp_path / "ann.json"
    path.write_text(json.dumps(coco))
    return path


def square_ann(cat, x, y, s=4, **extra):
    return {"image_id": 1, "category_id": cat, "bbox": [x, y, s, s],
            "segmentation": [[x, y, x + s, y, x + s, y + s, x, y + s]], **extra}


def test_base_only_filters_supervision_but_not_evaluation(tmp_path):
    path = write_coco(tmp_path, [square_ann(1, 0, 0), square_ann(2, 6, 0), square_ann(3, 12, 0)])
    split = CategorySplit({1, 2}, {3})
    ds = load_coco(path, split, supervision="base_only")
    s = ds[0]
    assert [i.category_id for i in s.instances] == [1, 2]
    assert [(i.category_id, i.is_base) for i in s.eval_instances] == [
        (1, True), (2, True), (3, False)]
    assert len(load_coco(path, split, supervision="all")[0].instances) == 3


def test_polygon_rasterization():
    m = rasterize_polygon([2, 3, 6, 3, 6, 5, 2, 5], 8, 8)
    assert m.sum() == 8 and mask_to_box(m).tolist() == [2, 3, 6, 5]


def test_rle_segmentation_and_area_check(tmp_path):
    m = np.zeros((20, 20), bool)
    m[2:6, 3:9] = True
    rle = rle_encode(m).to_coco()
    ok = {"image_id": 1, "category_id": 1, "bbox": [3, 2, 6, 4], "segmentation": rle,
          "area": 24}
    ds = load_coco(write_coco(tmp_path, [ok]))
    assert np.array_equal(ds[0].instances[0].mask, m)
    bad = dict(ok, area=30)
    with pytest.raises(ValueError, match="annotation 1"):
        load_coco(write_coco(tmp_path, [ok, bad]))


def test_empty_annotations(tmp_path):
    ds = load_coco(write_coco(tmp_path, []))
    assert len(ds) == 1 and ds[0].instances == [] and ds[0].eval_instances == []


@pytest.mark.parametrize("ann, message", [
    (square_ann(9, 0, 0), "unknown category"),
    (dict(square_ann(1, 0, 0), image_id=5), "unknown image"),
    (dict(square_ann(1, 0, 0), segmentation={"size": [20, 20], "counts": "abc"}),
     "bad segmentation"),
])
def test_errors_name_the_record(tmp_path, ann, message):
    with pytest.raises(ValueError, match=rf"annotation 2: {message}"):
        load_coco(write_coco(tmp_path, [square_ann(1, 0, 0), square_ann(2, 5, 5), ann]))


def test_malformed_file(tmp_path):
    p = tmp_path / "x.json"
    p.write_text("{not json")
    with pytest.raises(ValueError, match="malformed"):
        load_coco(p)
    p.write_text("{}")
    with pytest.raises(ValueError, match="images"):
        load_coco(p)


def test_split_must_be_disjoint():
    with pytest.raises(ValueError):
        CategorySplit({1, 2}, {2})


def test_synthetic_is_deterministic():
    spec = SceneSpec(seed=3)
    a, b = generate_synthetic(spec, 6), generate_synthetic(spec, 6)
    for x, y in zip(a.samples, b.samples):
        assert np.array_equal(x.image, y.image)
        assert len(x.instances) == len(y.instances)
        for i, j in zip(x.instances, y.instances):
            assert np.array_equal(i.mask, j.mask) and i.category_id == j.category_id
    # scene i does not depend on how many scenes were requested
    c = generate_synthetic(spec, 3)
    assert np.array_equal(c[2].image, a[2].image)
    assert not np.array_equal(generate_synthetic(SceneSpec(seed=4), 1)[0].image, a[0].image)


def test_synthetic_boxes_are_tight_mask_boxes():
    ds = generate_synthetic(SceneSpec(), 20)
    for s in ds.samples:
        assert s.image.shape == (64, 64, 3) and s.image.dtype == np.uint8
        for inst in s.instances:
            assert inst.area >= 4
            assert inst.box.tolist() == mask_to_box(inst.mask).tolist()
        # occlusion keeps instance masks disjoint
        if s.instances:
            stack = np.stack([i.mask for i in s.instances]).sum(0)
            assert stack.max() <= 1


def test_synthetic_split_and_base_only():
    spec = SceneSpec()
    split = spec.split_by_family(["ring", "cross"])
    ds = generate_synthetic(spec, 30, split, supervision="base_only")
    novel_ids = split.novel_ids
    assert any(not i.is_base for s in ds.samples for i in s.eval_instances)
    for s in ds.samples:
        assert all(i.category_id not in novel_ids for i in s.instances)
        for i in s.eval_instances:
            assert i.is_base == (i.category_id not in novel_ids)
    with pytest.raises(ValueError):
        spec.split_by_family(["hexagon"])


def inst_from_box(box, h, w, cat=1):
    m = np.zeros((h, w), bool)
    m[box[1]:box[3], box[0]:box[2]] = True
    return GroundTruthInstance(np.array(box, float), m, cat)


def test_flip_example_and_involution(rng):
    img = rng.integers(0, 255, (10, 100, 3), dtype=np.uint8)
    inst = inst_from_box([10, 0, 20, 10], 10, 100)
    f_img, (f,) = augment(img, [inst], "flip", apply=True)
    assert f.box.tolist() == [80, 0, 90, 10]
    assert f.box.tolist() == mask_to_box(f.mask).tolist()
    g_img, (g,) = augment(f_img, [f], "flip", apply=True)
    assert np.array_equal(g_img, img) and np.array_equal(g.mask, inst.mask)
    assert g.box.tolist() == inst.box.tolist()
    same, _ = augment(img, [inst], "flip", apply=False)
    assert np.array_equal(same, img)


def test_lsj_identity_at_unit_scale():
    ds = generate_synthetic(SceneSpec(), 3)
    for s in ds.samples:
        img, insts = augment(s.image, s.instances, "lsj", scale=1.0, offset=(0, 0))
        assert np.array_equal(img, s.image)
        for a, b in zip(insts, s.instances):
            assert np.array_equal(a.mask, b.mask) and a.box.tolist() == b.box.tolist()


def test_lsj_random_keeps_boxes_consistent(rng):
    ds = generate_synthetic(SceneSpec(), 10)
    for s in ds.samples:
        img, insts = augment(s.image, s.instances, "lsj", rng)
        assert img.shape == s.image.shape
        for inst in insts:
            assert inst.mask.shape == (64, 64) and inst.area >= 4
            assert inst.box.tolist() == mask_to_box(inst.mask).tolist()


def test_lsj_upscale_doubles_box():
    inst = inst_from_box([4, 4, 8, 8], 16, 16)
    img = np.zeros((16, 16, 3), np.uint8)
    _, (out,) = augment(img, [inst], "lsj", scale=2.0, offset=(0, 0))
    assert out.box.tolist() == [8, 8, 16, 16]


def test_unknown_augmentation():
    with pytest.raises(ValueError):
        augment(np.zeros((4, 4, 3), np.uint8), [], "mosaic")


def test_save_and_reload_round_trip(tmp_path):
    spec = SceneSpec()
    split = spec.split_by_family(["triangle"])
    ds = generate_synthetic(spec, 5, split)
    path = save_dataset(ds, tmp_path / "a")
    again = load_coco(path, split, image_root=path.parent)
    for x, y in zip(ds.samples, again.samples):
        assert np.array_equal(x.image, y.image)
        for i, j in zip(x.eval_instances, y.eval_instances):
            assert np.array_equal(i.mask, j.mask)
            assert i.box.tolist() == j.box.tolist() and i.is_base == j.is_base
    # writing twice gives identical bytes
    path2 = save_dataset(again, tmp_path / "b")
    assert path.read_bytes() == path2.read_bytes()
    for f in sorted((tmp_path / "a" / "images").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / "images" / f.name).read_bytes()
