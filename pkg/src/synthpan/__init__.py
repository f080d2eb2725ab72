"""Synthetic panoptic-segmentation datasets from labeled 3D scenes.

The package is organised by stage:

- ``taxonomy``: category palette and color/id lookups.
- ``scene``: labeled meshes, movable objects and workbench placements.
- ``tour``: camera intrinsics, poses, random tours and pinhole projection.
- ``render``: z-buffered software rasterizer producing aligned buffers.
- ``annotate``: semantic buffers to segments, panoptic images and COCO docs.
- ``metrics``: PQ/SQ/RQ, mIoU and COCO-style AP.
- ``pipeline``: manifests, splits, generation and evaluation runs.
"""

__version__ = "0.1.0"
