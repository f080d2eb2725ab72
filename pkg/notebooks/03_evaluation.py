"""
Scoring predictions
===================

PQ, SQ and RQ with IoU > 0.5 matching, mIoU from the pixel confusion
matrix, and COCO-style AP for boxes and masks. Here the "predictions" are the
ground-truth masks eroded by one pixel, which keeps most matches but
lowers their IoU.
"""

# %%
from pathlib import Path

import numpy as np
from scipy import ndimage

from synthpan import annotate
from synthpan.pipeline import GenerateConfig, load_manifest, run_evaluate, run_generate
from synthpan.scene import miniworksite_path
from synthpan.tour import CameraIntrinsics

OUT = Path(__file__).resolve().parent / "out" / "eval"
manifest = run_generate(miniworksite_path(), OUT, GenerateConfig(n_frames=5, seed=1,
                                                                  intrinsics=CameraIntrinsics().scaled(0.25)))
tax = manifest.load_taxonomy()

# %%
gt = annotate.parse_panoptic_coco(annotate.read_document(OUT / "panoptic.json"), tax)
pred_frames = []
for meta, segs in gt:
    eroded = []
    for s in segs:
        m = ndimage.binary_erosion(s.mask)
        if m.any():
            eroded.append(annotate.Segment(s.category, m, s.panoptic_id, s.instance, score=0.9))
    pred_frames.append((meta, eroded, None))
predictions = annotate.export_panoptic_coco(pred_frames, tax)

# %%
print(run_evaluate(load_manifest(OUT / "manifest.json"), OUT / "panoptic.json").table())
print()
print(run_evaluate(load_manifest(OUT / "manifest.json"), predictions).table())
