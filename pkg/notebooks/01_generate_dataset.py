"""
Generating a synthetic dataset from the bundled worksite
=========================================================

A short walk through the generation path: load the labeled scene, sample a
camera tour, drop the movable tools on the bench, render one frame, then
let the pipeline do the same for a whole tour.

Run from the repository root: ``python notebooks/01_generate_dataset.py``.
Outputs land in ``notebooks/out/``.
"""

# %%
from pathlib import Path

import numpy as np

from synthpan.pipeline import GenerateConfig, derive_rng, preview, run_generate, validate_manifest
from synthpan.render import render_frame, write_frame
from synthpan.scene import load_scene_descriptor, miniworksite_path, place_movables
from synthpan.tour import CameraIntrinsics, generate_tour

OUT = Path(__file__).resolve().parent / "out"

# %% [markdown]
# The fixture is a 6 x 5 m room with a workbench, a cabinet and five tools.
# Face labels come from the material diffuse colors, matched against the
# 35-category palette.

# %%
scene = load_scene_descriptor(miniworksite_path())
print(scene.taxonomy.things[:3], "...")
print("static faces:", scene.static.n_faces, "movables:", [m.id for m in scene.movables])

# %% [markdown]
# A tour is a seeded random walk inside the free-space rectangles. Every
# stochastic stage draws from its own generator derived from one seed.

# %%
k = CameraIntrinsics().scaled(0.25)
plan = generate_tour(scene.free_space, 12, k, rng=derive_rng(0, "tour"))
for fr in plan.frames[:6]:
    print(fr.index, fr.epoch, np.round(fr.pose.position, 2))

# %%
placed, skipped = place_movables(scene.surface, scene.movables, derive_rng(0, "placement", 0))
print("placed:", [p.object_id for p in placed], "skipped:", skipped)

# render the first epoch and keep the frame that sees the most instances
frames = [render_frame(scene.static, placed, scene.movable_index, fr.pose, k, scene.taxonomy)
          for fr in plan.frames[:5]]
best = max(range(5), key=lambda i: len(np.unique(frames[i].instance)))
fs = frames[best]
print("frame", best, "hit pixels:", int(np.isfinite(fs.depth).sum()), "of", fs.depth.size)
print("instances in view:", np.unique(fs.instance)[1:])
write_frame(fs, OUT / "single", best)

# %% [markdown]
# The pipeline strings these steps together, writes the PNGs and both COCO
# documents, and records everything in ``manifest.json``.

# %%
manifest = run_generate(miniworksite_path(), OUT / "dataset", GenerateConfig(n_frames=10, seed=0, intrinsics=k))
report = validate_manifest(manifest)
print(len(manifest.frames), "frames,", len(report.violations), "violations")
print(preview(manifest, OUT / "contact_sheet.png", scale=1.0))
