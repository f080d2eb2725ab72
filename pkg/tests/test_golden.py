from pathlib import Path

import numpy as np

from synthpan.annotate import dumps, parse_instance_coco, parse_panoptic_coco, read_document
from synthpan.taxonomy import default_taxonomy

from cases import golden_documents

GOLDEN = Path(__file__).parent / "golden"


def test_exports_are_byte_identical_to_golden_files():
    inst, pan = golden_documents()
    assert dumps(inst) == (GOLDEN / "fixture_instances.json").read_text()
    assert dumps(pan) == (GOLDEN / "fixture_panoptic.json").read_text()


def test_golden_files_reparse_losslessly():
    tax = default_taxonomy()
    inst_doc = read_document(GOLDEN / "fixture_instances.json")
    pan_doc = read_document(GOLDEN / "fixture_panoptic.json")
    ((_, things),) = parse_instance_coco(inst_doc, tax)
    ((_, segs),) = parse_panoptic_coco(pan_doc, tax)
    info = pan_doc["annotations"][0]["segments_info"]
    assert [(s.panoptic_id, s.category + 1, s.area, list(s.bbox)) for s in segs] == \
        [(e["id"], e["category_id"], e["area"], e["bbox"]) for e in info]
    assert sum(s.area for s in segs) == 1280 * 720
    by_id = {s.panoptic_id: s for s in segs}
    for t in things:
        assert np.array_equal(t.mask, by_id[t.panoptic_id].mask)
    assert [a["area"] for a in inst_doc["annotations"]] == [t.area for t in things]
