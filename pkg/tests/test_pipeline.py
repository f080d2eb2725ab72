import hashlib
import json
import shutil

import numpy as np
import pytest
from PIL import Image
from scipy import ndimage

from synthpan import annotate
from synthpan.pipeline import (
    DatasetManifest, FrameRecord, GenerateConfig, PipelineError, SplitSpec, derive_rng, load_manifest, preview,
    run_evaluate, run_generate, split_dataset, validate_manifest,
)
from synthpan.scene import miniworksite_path
from synthpan.tour import CameraIntrinsics

from oracles import box_iou_ref, brute_force_pq, pixel_count_iou, pixel_set, reference_ap, set_iou

SMALL = CameraIntrinsics(width=160, height=90, fx=125, fy=125, cx=80, cy=45)


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    manifest = run_generate(miniworksite_path(), out, GenerateConfig(n_frames=10, seed=3, intrinsics=SMALL))
    return out, manifest


def _copy(dataset, tmp_path):
    src, _ = dataset
    dst = tmp_path / "copy"
    shutil.copytree(src, dst)
    return dst, load_manifest(dst / "manifest.json")


# ---------------------------------------------------------------------------
# splits


def _untagged(n):
    return DatasetManifest(frames=[FrameRecord(i, f"{i}.png", f"{i}_sem.png") for i in range(n)])


@pytest.mark.parametrize("n, ratios, sizes", [
    (10, (0.7, 0.1, 0.2), (7, 1, 2)),
    (25079, (0.7, 0.1, 0.2), (17555, 2509, 5015)),
    (100, (0.71, 0.0, 0.29), (71, 0, 29)),
    (3, (1.0, 0.0, 0.0), (3, 0, 0)),
])
def test_split_sizes(n, ratios, sizes):
    assert SplitSpec(ratios=ratios).sizes(n) == sizes


def test_absolute_counts():
    m = split_dataset(_untagged(868), SplitSpec(counts=(200, 0, 668), seed=1))
    assert m.split_counts() == {"train": 200, "val": 0, "test": 668}
    with pytest.raises(PipelineError):
        SplitSpec(counts=(800, 0, 100)).sizes(868)


def test_split_spec_validation():
    with pytest.raises(ValueError):
        SplitSpec(ratios=(0.5, 0.5, 0.5))
    with pytest.raises(ValueError):
        SplitSpec(ratios=(0.7, 0.3, 0.0), counts=(1, 1, 1))
    with pytest.raises(ValueError):
        SplitSpec(ratios=(1.2, -0.2, 0.0))


def test_split_partitions_and_is_deterministic():
    spec = SplitSpec(ratios=(0.7, 0.1, 0.2), seed=9)
    a = split_dataset(_untagged(57), spec)
    b = split_dataset(_untagged(57), spec)
    assert [f.split for f in a.frames] == [f.split for f in b.frames]
    assert all(f.split in ("train", "val", "test") for f in a.frames)
    assert a.split_counts() == {"train": 39, "val": 7, "test": 11}
    with pytest.raises(PipelineError):
        split_dataset(a, spec)
    c = split_dataset(a, SplitSpec(ratios=(0.7, 0.1, 0.2), seed=10), overwrite=True)
    assert [f.split for f in c.frames] != [f.split for f in a.frames]


def test_derive_rng_roles_are_independent():
    a = derive_rng(5, "tour").random(4)
    assert np.array_equal(a, derive_rng(5, "tour").random(4))
    assert not np.array_equal(a, derive_rng(5, "split").random(4))
    assert not np.array_equal(derive_rng(5, "placement", 0).random(4), derive_rng(5, "placement", 1).random(4))


# ---------------------------------------------------------------------------
# generation


def test_zero_frames_writes_nothing(tmp_path):
    m = run_generate(miniworksite_path(), tmp_path / "out", GenerateConfig(n_frames=0, seed=1))
    assert m.frames == []
    assert not (tmp_path / "out").exists()


def test_generated_file_counts(dataset):
    out, manifest = dataset
    frames = out / "frames"
    assert len(manifest.frames) == 10
    assert len(list(frames.glob("??????.png"))) == 10
    assert len(list(frames.glob("*_sem.png"))) == 10
    assert len(list(frames.glob("*_inst.png"))) == 10
    assert len(list(frames.glob("*_pan.png"))) == 10
    assert (out / "instances.json").is_file() and (out / "panoptic.json").is_file()
    assert [f.epoch for f in manifest.frames] == [0] * 5 + [1] * 5
    assert (manifest.width, manifest.height) == (160, 90)
    again = load_manifest(out / "manifest.json")
    assert again == manifest


def test_generation_is_deterministic(dataset, tmp_path):
    out, _ = dataset
    run_generate(miniworksite_path(), tmp_path / "b", GenerateConfig(n_frames=10, seed=3, intrinsics=SMALL))
    assert tree_digest(out) == tree_digest(tmp_path / "b")


def test_parallel_generation_matches_serial(dataset, tmp_path):
    out, _ = dataset
    run_generate(miniworksite_path(), tmp_path / "p",
                 GenerateConfig(n_frames=10, seed=3, intrinsics=SMALL, workers=2))
    assert tree_digest(out) == tree_digest(tmp_path / "p")


def test_different_seed_differs(dataset, tmp_path):
    out, _ = dataset
    run_generate(miniworksite_path(), tmp_path / "c", GenerateConfig(n_frames=10, seed=4, intrinsics=SMALL))
    assert tree_digest(out) != tree_digest(tmp_path / "c")


def test_coco_documents_cover_every_frame(dataset):
    out, _ = dataset
    for name in ("instances.json", "panoptic.json"):
        doc = annotate.read_document(out / name)
        assert sorted(im["id"] for im in doc["images"]) == list(range(10))
    pan = annotate.read_document(out / "panoptic.json")
    assert [a["file_name"] for a in pan["annotations"]] == [f"{i:06d}_pan.png" for i in range(10)]


# ---------------------------------------------------------------------------
# validation


def test_fresh_dataset_validates(dataset):
    out, _ = dataset
    report = validate_manifest(out / "manifest.json")
    assert report.ok, [str(v) for v in report.violations]
    assert report.frames_checked == 10
    assert validate_manifest(out / "manifest.json", sample=3).frames_checked == 3


def test_deleted_semantic_file(dataset, tmp_path):
    root, m = _copy(dataset, tmp_path)
    (root / m.frames[4].semantic).unlink()
    report = validate_manifest(m)
    assert len(report.violations) == 1
    v = report.violations[0]
    assert v.kind == "missing-file" and v.frame == 4


def test_corrupted_panoptic_pixel(dataset, tmp_path):
    root, m = _copy(dataset, tmp_path)
    path = root / m.frames[2].panoptic
    pan = np.array(Image.open(path))
    pan[17, 33] = 254 if pan[17, 33] != 254 else 253
    Image.fromarray(pan, "L").save(path)
    report = validate_manifest(m)
    assert len(report.violations) == 1
    v = report.violations[0]
    assert v.kind == "pixel-agreement" and v.frame == 2
    assert "(x=33, y=17)" in v.message


def test_wrong_dimensions_and_bad_split(dataset, tmp_path):
    root, m = _copy(dataset, tmp_path)
    Image.new("RGB", (10, 10)).save(root / m.frames[0].rgb)
    m.frames[1].split = "holdout"
    m.frames[2].id = 3
    report = validate_manifest(m)
    assert report.count("dimensions") == 1
    assert report.count("split") == 1
    assert report.count("duplicate-id") == 1


# ---------------------------------------------------------------------------
# evaluation


def _gt(out):
    m = load_manifest(out / "manifest.json")
    tax = m.load_taxonomy()
    return m, tax, annotate.parse_panoptic_coco(annotate.read_document(out / "panoptic.json"), tax)


def test_evaluate_exported_ground_truth(dataset, tmp_path):
    out, _ = dataset
    report = run_evaluate(out / "manifest.json", out / "panoptic.json", report_path=tmp_path / "r.json")
    for v in (report.pq, report.sq, report.rq, report.miou, report.ap_bbox, report.ap_seg):
        assert v == 100.0
    assert json.loads((tmp_path / "r.json").read_text())["pq"] == 100.0
    assert report.n_images == 10


def test_evaluate_empty_predictions(dataset):
    out, _ = dataset
    m, tax, frames = _gt(out)
    doc = annotate.export_panoptic_coco([(meta, [], None) for meta, _ in frames], tax)
    report = run_evaluate(m, doc)
    assert report.pq == 0 and report.rq == 0 and report.miou == 0
    assert report.n_pred_segments == 0


def test_evaluate_unknown_image(dataset):
    out, _ = dataset
    m, tax, _ = _gt(out)
    doc = annotate.export_panoptic_coco([({"id": 999, "file_name": "x.png", "width": 160, "height": 90}, [], None)],
                                        tax)
    with pytest.raises(PipelineError, match="999"):
        run_evaluate(m, doc)


def test_evaluate_respects_split(dataset, tmp_path):
    root, m = _copy(dataset, tmp_path)
    m = split_dataset(m, SplitSpec(ratios=(0.5, 0.2, 0.3), seed=0))
    m.save()
    report = run_evaluate(root / "manifest.json", root / "panoptic.json", split="test")
    assert report.n_images == 3


def test_evaluate_eroded_predictions_matches_oracles(dataset):
    out, _ = dataset
    m, tax, frames = _gt(out)
    rng = np.random.default_rng(0)
    pred_frames, preds = [], []
    for meta, segs in frames:
        ps = []
        for s in segs:
            eroded = ndimage.binary_erosion(s.mask)
            if eroded.any():
                ps.append(annotate.Segment(s.category, eroded, s.panoptic_id, s.instance,
                                           score=float(rng.integers(1, 5)) / 4))
        preds.append(ps)
        pred_frames.append((meta, ps, None))
    report = run_evaluate(m, annotate.export_panoptic_coco(pred_frames, tax))

    gts = [segs for _, segs in frames]
    shape = (90, 160)
    images = []
    for g, p in zip(gts, preds):
        void = np.ones(shape, bool)
        for s in g:
            void &= ~s.mask
        images.append(([(s.category, pixel_set(s.mask)) for s in g], [(s.category, pixel_set(s.mask)) for s in p],
                       pixel_set(void)))
    _, pq, sq, rq = brute_force_pq(images)
    assert (report.pq, report.sq, report.rq) == pytest.approx((100 * pq, 100 * sq, 100 * rq), abs=1e-9)

    def catmap(segs):
        out = np.full(shape, -1)
        for s in segs:
            out[s.mask] = s.category
        return out

    _, miou = pixel_count_iou([catmap(g) for g in gts], [catmap(p) for p in preds], len(tax))
    assert report.miou == pytest.approx(100 * miou, abs=1e-9)

    things = [c.index for c in tax.things]
    g_seg = [[(s.category, pixel_set(s.mask)) for s in g if s.isthing] for g in gts]
    p_seg = [[(s.category, pixel_set(s.mask), s.score) for s in p if s.isthing] for p in preds]
    assert report.ap_seg == pytest.approx(reference_ap(g_seg, p_seg, set_iou, things), abs=1e-9)
    g_box = [[(s.category, s.bbox) for s in g if s.isthing] for g in gts]
    p_box = [[(s.category, s.bbox, s.score) for s in p if s.isthing] for p in preds]
    assert report.ap_bbox == pytest.approx(reference_ap(g_box, p_box, box_iou_ref, things), abs=1e-9)
    assert 0 < report.pq < 100


# ---------------------------------------------------------------------------
# preview


def test_preview_sheet(dataset, tmp_path):
    out, _ = dataset
    path = preview(out / "manifest.json", tmp_path / "sheet.png", [0, 5], scale=0.5)
    with Image.open(path) as im:
        assert im.size == (3 * 80, 2 * 45)
    with pytest.raises(PipelineError):
        preview(out / "manifest.json", tmp_path / "x.png", [42])
