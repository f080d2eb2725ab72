"""
From semantic masks to panoptic annotations
===========================================

Semantic images are the source of truth. Stuff categories become one segment
each, things become one segment per instance (or per connected component
when no instance buffer exists). Ids follow the RGB rule
``R + 256 G + 65536 B``.
"""

# %%
import numpy as np

from synthpan import annotate
from synthpan.taxonomy import default_taxonomy

tax = default_taxonomy()
floor, wall, clamp = (tax.by_name(n) for n in ("floor", "wall", "clamp"))

# %%
img = np.zeros((6, 10, 3), np.uint8)
img[:3] = wall.color
img[3:] = floor.color
img[4, 1:3] = clamp.color
img[4, 6:9] = clamp.color
img[0, 9] = 0  # an unlabeled pixel

segments = annotate.semantic_to_segments(img, tax)
for s in segments:
    print(tax[s.category].name, "id", s.panoptic_id, "area", s.area, "bbox", s.bbox, "instance", s.instance)

# %% [markdown]
# Two clamps share a color, so the second one gets its ordinal folded into
# the high bits of the id: ``id + 1 * 2**24``.

# %%
print(annotate.encode_segment_id(clamp.color), annotate.decode_segment_id(annotate.encode_segment_id(clamp.color)))

# %% [markdown]
# The 8-bit panoptic image marks things 0, stuff 1..n in palette order and
# unlabeled pixels 255.

# %%
print(annotate.build_panoptic_image(img, tax))

# %%
meta = {"id": 0, "file_name": "demo.png", "width": 10, "height": 6}
doc = annotate.export_panoptic_coco([(meta, segments, None)], tax)
print(annotate.dumps(doc)[:300], "...")
((_, back),) = annotate.parse_panoptic_coco(doc, tax)
print("round trip equal:", all(np.array_equal(a.mask, b.mask) for a, b in zip(segments, back)))
