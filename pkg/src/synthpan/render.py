"""Software rasterizer producing pixel-aligned RGB, semantic, instance and depth buffers.

Every covered pixel is resolved to one front-most face id first; the RGB,
semantic, instance and depth values are all read from that face, so the
buffers cannot disagree. Neither pass is lit or anti-aliased.

Rasterization rules:

- Coverage is tested at pixel centers with a top-left fill rule, so two
  triangles sharing an edge never both write (or both skip) a pixel on it.
  Edge functions are evaluated in a canonical endpoint order, making the
  shared-edge decision exact in floating point.
- Depth is camera-frame z, interpolated perspective-correctly (1/z is
  affine in screen space). The depth test is strictly-less, so on exact
  ties the first-drawn face wins. Faces are drawn in mesh order: static
  geometry first, then placed movables in placement order.
- Triangles are clipped against the near plane (``NEAR`` meters) before
  projection. No back-face culling.
- Texture lookups use nearest-texel sampling with wrap-around.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from synthpan.scene import LabeledMesh, MovableObject, Placement, concatenate_meshes, empty_mesh, placed_meshes
from synthpan.taxonomy import UNLABELED, Taxonomy
from synthpan.tour import CameraIntrinsics, CameraPose, camera_to_image, world_to_camera

NEAR = 0.05


@dataclass
class FrameSet:
    """Aligned per-pixel buffers for one camera pose.

    Attributes:
      rgb: (H, W, 3) uint8 appearance image.
      semantic: (H, W, 3) uint8 palette colors, black where nothing labeled was hit.
      instance: (H, W) uint16, 0 = no instance.
      depth: (H, W) float64 camera z in meters, +inf where nothing was hit.
      face: (H, W) int32 index of the front-most face in the frame's merged
        mesh, -1 where nothing was hit.
    """

    rgb: np.ndarray
    semantic: np.ndarray
    instance: np.ndarray
    depth: np.ndarray
    face: np.ndarray

    @property
    def shape(self) -> Tuple[int, int]:
        return self.depth.shape


class _Buffers:
    """Depth and face-id targets filled by :func:`rasterize_triangle`."""

    def __init__(self, width: int, height: int):
        self.width = width
        self.height = height
        self.depth = np.full((height, width), np.inf)
        self.face = np.full((height, width), -1, dtype=np.int32)
        self.uv = np.zeros((height, width, 2))


def new_buffers(width: int, height: int) -> _Buffers:
    return _Buffers(width, height)


def _edge(a: np.ndarray, b: np.ndarray, px: np.ndarray, py: np.ndarray) -> Tuple[np.ndarray, bool]:
    """Edge function of directed edge a->b at points p, plus its top-left flag.

    Computed from the lexicographically smaller endpoint so the reversed
    edge gives the exact negation.
    """
    flip = (b[0], b[1]) < (a[0], a[1])
    p0, p1 = (b, a) if flip else (a, b)
    dx, dy = p1[0] - p0[0], p1[1] - p0[1]
    e = dx * (py - p0[1]) - dy * (px - p0[0])
    if flip:
        e = -e
        dx, dy = -dx, -dy
    # interior is where e > 0; y grows downward
    top_left = dy < 0 or (dy == 0 and dx > 0)
    return e, top_left


def rasterize_triangle(buf: _Buffers, xy: np.ndarray, z: np.ndarray, face_id: int,
                       uv: Optional[np.ndarray] = None) -> int:
    """Scan-convert one projected triangle into the buffers.

    Args:
      buf: target buffers.
      xy: (3, 2) pixel coordinates of the corners.
      z: (3,) positive camera-frame depths of the corners.
      face_id: value written to the face buffer.
      uv: optional (3, 2) texture coordinates, interpolated
        perspective-correctly.

    Returns:
      Number of pixels written.
    """
    xy = np.asarray(xy, dtype=np.float64)
    a, b, c = xy
    area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    if area == 0 or not np.isfinite(area):
        return 0
    if area < 0:
        xy = xy[[0, 2, 1]]
        z = np.asarray(z)[[0, 2, 1]]
        if uv is not None:
            uv = np.asarray(uv)[[0, 2, 1]]
        a, b, c = xy
        area = -area

    lo = np.floor(xy.min(axis=0) - 0.5)
    hi = np.ceil(xy.max(axis=0) - 0.5)
    x0, y0 = int(max(lo[0], 0)), int(max(lo[1], 0))
    x1, y1 = int(min(hi[0], buf.width - 1)), int(min(hi[1], buf.height - 1))
    if x0 > x1 or y0 > y1:
        return 0
    px = np.arange(x0, x1 + 1, dtype=np.float64)[None, :] + 0.5
    py = np.arange(y0, y1 + 1, dtype=np.float64)[:, None] + 0.5

    # edge opposite each vertex: w0 <- (b, c), w1 <- (c, a), w2 <- (a, b)
    inside = None
    weights = []
    for p, q in ((b, c), (c, a), (a, b)):
        e, tl = _edge(p, q, px, py)
        cover = (e >= 0) if tl else (e > 0)
        inside = cover if inside is None else inside & cover
        weights.append(e)
    if not inside.any():
        return 0

    rows, cols = np.nonzero(inside)
    inv_area = 1.0 / area
    l0, l1, l2 = (wt[rows, cols] * inv_area for wt in weights)
    w0, w1, w2 = l0 / z[0], l1 / z[1], l2 / z[2]
    inv_z = w0 + w1 + w2
    depth = 1.0 / inv_z

    ys, xs = rows + y0, cols + x0
    closer = depth < buf.depth[ys, xs]
    if not closer.any():
        return 0
    ys, xs = ys[closer], xs[closer]
    buf.depth[ys, xs] = depth[closer]
    buf.face[ys, xs] = face_id
    if uv is not None:
        uv = np.asarray(uv, dtype=np.float64)
        s = (w0[closer, None] * uv[0] + w1[closer, None] * uv[1] + w2[closer, None] * uv[2]) / inv_z[closer, None]
        buf.uv[ys, xs] = s
    return int(closer.sum())


def _clip_near(pts: np.ndarray, uvs: np.ndarray, near: float) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Clip a camera-space triangle to z >= near; returns a fan of triangles."""
    inside = pts[:, 2] >= near
    if inside.all():
        return [(pts, uvs)]
    if not inside.any():
        return []
    poly_p, poly_uv = [], []
    for i in range(3):
        j = (i + 1) % 3
        if inside[i]:
            poly_p.append(pts[i])
            poly_uv.append(uvs[i])
        if inside[i] != inside[j]:
            # canonical direction so a shared edge is cut at the same point
            s, e = (i, j) if tuple(pts[i]) < tuple(pts[j]) else (j, i)
            t = (near - pts[s, 2]) / (pts[e, 2] - pts[s, 2])
            p = pts[s] + t * (pts[e] - pts[s])
            p[2] = near
            poly_p.append(p)
            poly_uv.append(uvs[s] + t * (uvs[e] - uvs[s]))
    return [(np.array([poly_p[0], poly_p[k], poly_p[k + 1]]), np.array([poly_uv[0], poly_uv[k], poly_uv[k + 1]]))
            for k in range(1, len(poly_p) - 1)]


def rasterize_mesh(mesh: LabeledMesh, pose: CameraPose, intrinsics: CameraIntrinsics,
                   near: float = NEAR) -> _Buffers:
    """Depth/face-id (and uv) buffers for a whole mesh."""
    buf = _Buffers(intrinsics.width, intrinsics.height)
    if mesh.n_faces == 0:
        return buf
    cam = world_to_camera(pose, mesh.vertices)
    front = cam[:, 2] >= near
    xy = np.zeros((len(cam), 2))
    xy[front] = camera_to_image(intrinsics, cam[front])
    textured = mesh.texture_ids >= 0
    for f, tri in enumerate(mesh.triangles):
        uv = mesh.uvs[f] if textured[f] else None
        if front[tri].all():
            rasterize_triangle(buf, xy[tri], cam[tri, 2], f, uv)
            continue
        for p, q in _clip_near(cam[tri], mesh.uvs[f], near):
            rasterize_triangle(buf, camera_to_image(intrinsics, p), p[:, 2], f, q if textured[f] else None)
    return buf


def _sample_textures(mesh: LabeledMesh, face: np.ndarray, uv: np.ndarray, rgb: np.ndarray) -> None:
    tex_of_pixel = np.where(face >= 0, mesh.texture_ids[np.maximum(face, 0)], -1)
    for t, tex in enumerate(mesh.textures):
        sel = tex_of_pixel == t
        if not sel.any():
            continue
        th, tw = tex.shape[:2]
        u = uv[sel, 0] - np.floor(uv[sel, 0])
        v = uv[sel, 1] - np.floor(uv[sel, 1])
        tx = np.clip((u * tw).astype(np.int64), 0, tw - 1)
        ty = np.clip(((1.0 - v) * th).astype(np.int64), 0, th - 1)
        rgb[sel] = tex[ty, tx]


@dataclass(frozen=True, eq=False)
class FrameGeometry:
    """Static scene plus placed movables, merged, with per-face instance ids."""

    mesh: LabeledMesh
    face_instance: np.ndarray


def assemble(static: LabeledMesh, placements: Sequence[Placement], objects: Dict[str, MovableObject],
             taxonomy: Taxonomy, static_components: Optional[np.ndarray] = None) -> FrameGeometry:
    """Merge geometry for one frame and assign instance ids.

    Placed movables of a thing category get ids 1..k in placement order
    (stuff movables get 0). Static thing components follow as k+1, k+2, ...
    in component order.
    """
    movers = placed_meshes(placements, objects)
    mesh = concatenate_meshes([static, *movers]) if (static.n_faces or movers) else empty_mesh()
    if static_components is None:
        static_components = static.thing_components(taxonomy)
    inst = np.zeros(mesh.n_faces, dtype=np.int64)
    k = 0
    offset = static.n_faces
    for m in movers:
        cat = int(m.categories[0])
        if cat != UNLABELED and taxonomy[cat].isthing:
            k += 1
            inst[offset:offset + m.n_faces] = k
        offset += m.n_faces
    inst[:static.n_faces] = np.where(static_components >= 0, static_components + k + 1, 0)
    if inst.max(initial=0) > np.iinfo(np.uint16).max:
        raise ValueError("too many instances for a 16-bit instance buffer")
    return FrameGeometry(mesh, inst)


def shade(geometry: FrameGeometry, buf: _Buffers, taxonomy: Taxonomy) -> FrameSet:
    """Resolve face ids into the four output buffers."""
    mesh = geometry.mesh
    face = buf.face
    hit = face >= 0
    h, w = face.shape
    rgb = np.zeros((h, w, 3), np.uint8)
    semantic = np.zeros((h, w, 3), np.uint8)
    instance = np.zeros((h, w), np.uint16)
    if hit.any():
        f = face[hit]
        rgb[hit] = mesh.colors[f]
        lut = np.concatenate([taxonomy.palette(), np.zeros((1, 3), np.uint8)])
        cats = mesh.categories[f]
        semantic[hit] = lut[np.where(cats < 0, len(taxonomy), cats)]
        instance[hit] = geometry.face_instance[f]
        _sample_textures(mesh, face, buf.uv, rgb)
    return FrameSet(rgb, semantic, instance, buf.depth, face)


def render_frame(static: LabeledMesh, placements: Sequence[Placement], objects: Dict[str, MovableObject],
                 pose: CameraPose, intrinsics: CameraIntrinsics, taxonomy: Taxonomy,
                 static_components: Optional[np.ndarray] = None) -> FrameSet:
    """Render RGB, semantic, instance and depth buffers for one pose.

    Args:
      static: the labeled environment mesh.
      placements: movable placements for this frame.
      objects: movable objects by id.
      pose, intrinsics: the camera.
      taxonomy: palette used for the semantic pass and thing/stuff kinds.
      static_components: precomputed ``static.thing_components(taxonomy)``.

    Returns:
      A FrameSet. Faces whose label color was off-palette occlude like any
      other face but render black in the semantic buffer.
    """
    geometry = assemble(static, placements, objects, taxonomy, static_components)
    buf = rasterize_mesh(geometry.mesh, pose, intrinsics)
    return shade(geometry, buf, taxonomy)


# ---------------------------------------------------------------------------
# File output


def frame_paths(directory, frame: int) -> Dict[str, Path]:
    d = Path(directory)
    return {
        "rgb": d / f"{frame:06d}.png",
        "semantic": d / f"{frame:06d}_sem.png",
        "instance": d / f"{frame:06d}_inst.png",
        "depth": d / f"{frame:06d}_depth.bin",
    }


def write_frame(frames: FrameSet, directory, frame: int, depth: bool = False) -> Dict[str, Path]:
    """Write a FrameSet as PNGs (+ optional raw float32 depth, row-major, little endian)."""
    paths = frame_paths(directory, frame)
    Path(directory).mkdir(parents=True, exist_ok=True)
    Image.fromarray(frames.rgb, "RGB").save(paths["rgb"])
    Image.fromarray(frames.semantic, "RGB").save(paths["semantic"])
    Image.fromarray(frames.instance.astype(np.uint16)).save(paths["instance"])
    if depth:
        frames.depth.astype("<f4").tofile(paths["depth"])
    else:
        del paths["depth"]
    return paths


def read_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im.convert("RGB"))


def read_gray(path) -> np.ndarray:
    """Single-channel PNG (8 or 16 bit) as an integer array."""
    with Image.open(path) as im:
        arr = np.array(im)
    return arr.astype(np.int64) if arr.dtype != np.uint8 else arr


def read_depth(path, width: int, height: int) -> np.ndarray:
    return np.fromfile(path, dtype="<f4").reshape(height, width)
