"""Acceptance suite: one test per criterion, each at its stated tolerance.

Run with ``pytest tests/test_acceptance.py``; a PASS/FAIL line per criterion
is printed in the terminal summary.
"""

import hashlib
import time

import numpy as np
import pytest
from scipy.spatial import Delaunay

from synthpan.annotate import decode_segment_id, encode_segment_id, Segment
from synthpan.metrics import average_precision, evaluate, match_segments, mean_iou, panoptic_quality
from synthpan.pipeline import GenerateConfig, SplitSpec, derive_rng, run_evaluate, run_generate
from synthpan.render import assemble, new_buffers, rasterize_mesh, rasterize_triangle, shade
from synthpan.scene import miniworksite_path, place_movables
from synthpan.taxonomy import from_records
from synthpan.tour import CameraIntrinsics, TourParams, generate_tour

from cases import as_oracle_image, random_panoptic_instance
from oracles import brute_force_pq, ray_cast
from test_annotate import check_against_flood_fill, random_semantic
import test_golden

acceptance = pytest.mark.acceptance


@acceptance(1, "metric-oracle equivalence on 1,000 random panoptic instances")
def test_metric_oracle_equivalence():
    rng = np.random.default_rng(20240601)
    start = time.perf_counter()
    for _ in range(1000):
        g, p, shape = random_panoptic_instance(rng, max_side=64, max_segments=6, max_categories=4)
        got = panoptic_quality([match_segments(g, p, shape=shape)])
        per, pq, sq, rq = brute_force_pq([as_oracle_image(g, p, shape)])
        assert set(got.per_category) == set(per)
        for c, v in per.items():
            for key in ("pq", "sq", "rq"):
                assert abs(got.per_category[c][key] - 100 * v[key]) <= 1e-9
        assert abs(got.pq - 100 * pq) <= 1e-9
        assert abs(got.sq - 100 * sq) <= 1e-9
        assert abs(got.rq - 100 * rq) <= 1e-9
    assert time.perf_counter() - start < 60


@acceptance(2, "PQ = SQ x RQ per category; perfect predictions score 100")
def test_pq_identity_and_perfect_scores():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        g, p, shape = random_panoptic_instance(rng, max_side=32)
        for v in panoptic_quality([match_segments(g, p, shape=shape)]).per_category.values():
            if v["tp"]:
                assert abs(v["pq"] - v["sq"] * v["rq"] / 100) <= 1e-9
    tax = from_records([("floor", (1, 1, 1), "stuff"), ("wall", (2, 2, 2), "stuff"),
                        ("tool", (3, 3, 3), "thing"), ("box", (4, 4, 4), "thing")])
    for _ in range(20):
        g, _, shape = random_panoptic_instance(rng, max_side=32)
        segs = [Segment(s.category, s.mask, s.panoptic_id, instance=s.panoptic_id if s.category >= 2 else None)
                for s in g]
        if not any(s.isthing for s in segs):
            continue
        r = evaluate([segs], [segs], tax, [shape])
        assert (r.pq, r.sq, r.rq, r.miou, r.ap_bbox, r.ap_seg) == (100.0,) * 6


@acceptance(3, "hand-worked PQ case: TP at IoU 2/3 with one FP and one FN")
def test_hand_worked_pq():
    shape = (30, 20)

    def seg(rows, cols, pid):
        m = np.zeros(shape, bool)
        m[rows, cols] = True
        return Segment(0, m, pid)

    gt = [seg(slice(0, 10), slice(0, 10), 1), seg(slice(20, 25), slice(0, 20), 2)]
    pred = [seg(slice(0, 10), slice(2, 12), 1), seg(slice(12, 17), slice(0, 20), 3)]
    r = panoptic_quality([match_segments(gt, pred, void_mask=np.zeros(shape, bool))])
    assert abs(r.sq - 66.67) <= 0.01
    assert abs(r.rq - 50.0) <= 0.01
    assert abs(r.pq - 33.33) <= 0.01


@acceptance(4, "panoptic id formula round trip on 10^6 ids")
def test_panoptic_id_round_trip():
    assert encode_segment_id((12, 2, 1)) == 66060
    ids = np.random.default_rng(4).integers(0, 1 << 24, size=1_000_000).tolist()
    start = time.perf_counter()
    mismatches = sum(encode_segment_id(decode_segment_id(i)) != i for i in ids)
    elapsed = time.perf_counter() - start
    assert mismatches == 0
    assert elapsed < 10


def _watertight(points, width, height):
    count = np.zeros((height, width), int)
    for simplex in Delaunay(points).simplices:
        buf = new_buffers(width, height)
        rasterize_triangle(buf, points[simplex], np.ones(3), 0)
        count += buf.face >= 0
    return count


@acceptance(5, "rendering alignment with a ray-cast oracle over 50 poses")
def test_rendering_alignment(miniworksite):
    start = time.perf_counter()
    k = CameraIntrinsics()
    plan = generate_tour(miniworksite.free_space, 50, k, TourParams(), derive_rng(5, "tour"))
    comps = miniworksite.static.thing_components(miniworksite.taxonomy)
    palette = np.concatenate([miniworksite.taxonomy.palette(), np.zeros((1, 3), np.uint8)])
    placements = {}
    mismatched = finite = 0
    for fr in plan.frames:
        if fr.epoch not in placements:
            placements[fr.epoch] = place_movables(miniworksite.surface, miniworksite.movables,
                                                  derive_rng(5, "placement", fr.epoch))[0]
        geo = assemble(miniworksite.static, placements[fr.epoch], miniworksite.movable_index,
                       miniworksite.taxonomy, comps)
        fs = shade(geo, rasterize_mesh(geo.mesh, fr.pose, k), miniworksite.taxonomy)
        face, _ = ray_cast(geo.mesh.face_vertices(), fr.pose.rotation(), fr.pose.position, k.fx, k.fy, k.cx,
                           k.cy, k.width, k.height)
        cats = np.where(face >= 0, geo.mesh.categories[np.maximum(face, 0)], -1)
        expected = palette[np.where(cats < 0, len(palette) - 1, cats)]
        sel = np.isfinite(fs.depth)
        finite += int(sel.sum())
        mismatched += int((fs.semantic[sel] != expected[sel]).any(axis=1).sum())
    assert finite > 0 and mismatched == 0

    rng = np.random.default_rng(55)
    for _ in range(20):
        assert _watertight(rng.uniform(-1, 49, size=(40, 2)), 48, 32).max() <= 1
        grid = np.unique(rng.integers(0, 32, size=(40, 2)), axis=0) + 0.5
        count = _watertight(grid.astype(float), 32, 32)
        tri = Delaunay(grid)
        ys, xs = np.mgrid[:32, :32] + 0.5
        inside = tri.find_simplex(np.stack([xs.ravel(), ys.ravel()], 1)).reshape(32, 32) >= 0
        assert count.max() <= 1
        # no cracks: interior pixel centers are all written
        hull_edge = np.zeros((32, 32), bool)
        for a, b in tri.convex_hull:
            p, q = grid[a], grid[b]
            hull_edge |= np.abs((q[0] - p[0]) * (ys - p[1]) - (q[1] - p[1]) * (xs - p[0])) < 1e-9
        assert (count[inside & ~hull_edge] == 1).all()
    assert time.perf_counter() - start < 300


@acceptance(6, "conversion equals flood fill on 200 random images, both connectivities")
def test_conversion_equivalence():
    tax = from_records([("floor", (128, 64, 128), "stuff"), ("wall", (70, 70, 70), "stuff"),
                        ("clamp", (0, 0, 70), "thing"), ("hammer", (9, 8, 7), "thing"),
                        ("drill", (1, 200, 3), "thing")])
    rng = np.random.default_rng(66)
    for _ in range(200):
        h, w = (int(v) for v in rng.integers(1, 65, size=2))
        img, labels = random_semantic(rng, tax, h, w, int(rng.integers(1, 6)), int(rng.integers(0, 5)))
        for connectivity in (4, 8):
            check_against_flood_fill(img, labels, tax, connectivity)


@acceptance(7, "protocol arithmetic: splits and epoch cadence")
def test_protocol_arithmetic():
    assert SplitSpec(ratios=(0.7, 0.1, 0.2)).sizes(25079) == (17555, 2509, 5015)
    assert SplitSpec(counts=(200, 0, 668)).sizes(868) == (200, 0, 668)
    from synthpan.scene import FreeSpace
    plan = generate_tour(FreeSpace(((0, 0, 4, 4),)), 100, rng=np.random.default_rng(0))
    epochs = [f.epoch for f in plan.frames]
    assert epochs == [i // 5 for i in range(100)]


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@acceptance(8, "end-to-end determinism and all-100 evaluation of exported ground truth")
def test_end_to_end(tmp_path):
    config = GenerateConfig(n_frames=10, seed=8)
    run_generate(miniworksite_path(), tmp_path / "a", config)
    run_generate(miniworksite_path(), tmp_path / "b", config)
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
    report = run_evaluate(tmp_path / "a" / "manifest.json", tmp_path / "a" / "panoptic.json")
    assert (report.pq, report.sq, report.rq, report.miou, report.ap_bbox, report.ap_seg) == (100.0,) * 6


@acceptance(9, "golden COCO exports are byte-identical and re-parse losslessly")
def test_golden_stability():
    test_golden.test_exports_are_byte_identical_to_golden_files()
    test_golden.test_golden_files_reparse_losslessly()
