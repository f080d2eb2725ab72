"""Labeled meshes, movable objects and their placement on a work surface.

World frame: meters, z up, floor at z = 0.

Meshes are read from Wavefront OBJ files with an MTL material library. Each
material carries two colors:

- ``Kd``: the semantic label color. It is rounded to 8 bits
  (``round(Kd * 255)``) and matched exactly against the taxonomy palette.
- ``Ka`` (optional, defaults to ``Kd``): the flat RGB appearance color.
- ``map_Ka`` (optional): an RGB appearance texture sampled with the face's
  ``vt`` coordinates. Takes precedence over ``Ka``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from synthpan.taxonomy import UNLABELED, Taxonomy, color_to_category, load_taxonomy

logger = logging.getLogger(__name__)

DEGENERATE_AREA = 1e-12
DEFAULT_MAX_ATTEMPTS = 100


class MeshFormatError(ValueError):
    """Raised for unreadable or inconsistent mesh files."""


@dataclass(frozen=True, eq=False)
class LabeledMesh:
    """Triangle mesh with one category and one appearance source per face.

    Attributes:
      vertices: (V, 3) float64 positions in meters.
      triangles: (F, 3) int64 vertex indices.
      categories: (F,) int32 taxonomy indices, ``UNLABELED`` allowed.
      colors: (F, 3) uint8 flat appearance colors.
      uvs: (F, 3, 2) float64 texture coordinates, or None.
      texture_ids: (F,) int32 index into ``textures``, -1 for flat faces.
      textures: tuple of (H, W, 3) uint8 images.
      unlabeled_faces: faces whose label color was not in the palette.
      dropped_degenerate: zero-area faces removed at load.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    categories: np.ndarray
    colors: np.ndarray
    uvs: Optional[np.ndarray] = None
    texture_ids: Optional[np.ndarray] = None
    textures: Tuple[np.ndarray, ...] = ()
    unlabeled_faces: int = 0
    dropped_degenerate: int = 0

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        n = len(t)
        c = np.ascontiguousarray(self.categories, dtype=np.int32).reshape(n)
        col = np.ascontiguousarray(self.colors, dtype=np.uint8).reshape(n, 3)
        if n and (t.min() < 0 or t.max() >= len(v)):
            raise MeshFormatError("triangle references a missing vertex")
        tex_ids = self.texture_ids
        if tex_ids is None:
            tex_ids = np.full(n, -1, dtype=np.int32)
        tex_ids = np.ascontiguousarray(tex_ids, dtype=np.int32).reshape(n)
        uvs = self.uvs
        if uvs is None:
            uvs = np.zeros((n, 3, 2))
        uvs = np.ascontiguousarray(uvs, dtype=np.float64).reshape(n, 3, 2)
        if n and tex_ids.max() >= len(self.textures):
            raise MeshFormatError("face references a missing texture")
        for name, arr in (("vertices", v), ("triangles", t), ("categories", c),
                          ("colors", col), ("uvs", uvs), ("texture_ids", tex_ids)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_faces(self) -> int:
        return len(self.triangles)

    def face_vertices(self) -> np.ndarray:
        """(F, 3, 3) corner positions per face."""
        return self.vertices[self.triangles]

    def validate(self, taxonomy: Taxonomy) -> None:
        bad = (self.categories != UNLABELED) & ((self.categories < 0) | (self.categories >= len(taxonomy)))
        if bad.any():
            raise MeshFormatError(f"{int(bad.sum())} faces have category indices outside the taxonomy")

    def transformed(self, rotation: np.ndarray, translation: Sequence[float]) -> "LabeledMesh":
        """Copy with vertices mapped by ``R @ v + t``."""
        verts = self.vertices @ np.asarray(rotation, dtype=np.float64).T + np.asarray(translation, dtype=np.float64)
        return replace(self, vertices=verts)

    def thing_components(self, taxonomy: Taxonomy) -> np.ndarray:
        """Connected components of thing-category faces.

        Two faces are connected when they share a vertex and a category.
        Returns an (F,) int32 array of component ordinals (numbered by first
        face in face order), -1 for faces that are not things.
        """
        isthing = np.array([c.isthing for c in taxonomy] + [False], dtype=bool)
        cats = np.where(self.categories < 0, len(taxonomy), self.categories)
        thing_faces = np.flatnonzero(isthing[cats])
        out = np.full(self.n_faces, -1, dtype=np.int32)
        if len(thing_faces) == 0:
            return out
        # bipartite graph: face nodes, then (vertex, category) nodes
        tri = self.triangles[thing_faces]
        keys = tri * (len(taxonomy) + 1) + cats[thing_faces, None]
        _, key_ids = np.unique(keys.ravel(), return_inverse=True)
        nf = len(thing_faces)
        rows = np.repeat(np.arange(nf), 3)
        cols = nf + key_ids
        size = nf + key_ids.max() + 1
        graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(size, size))
        _, labels = connected_components(graph, directed=False)
        face_labels = labels[:nf]
        # renumber by first appearance so ids follow face order
        _, first = np.unique(face_labels, return_index=True)
        order = np.argsort(first)
        remap = np.empty(labels.max() + 1, dtype=np.int32)
        remap[np.unique(face_labels)[order]] = np.arange(len(order), dtype=np.int32)
        out[thing_faces] = remap[face_labels]
        return out


def concatenate_meshes(meshes: Sequence[LabeledMesh]) -> LabeledMesh:
    """Merge meshes into one, reindexing vertices and textures."""
    if not meshes:
        return empty_mesh()
    verts, tris, cats, cols, uvs, tex_ids, textures = [], [], [], [], [], [], []
    v_off = 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + v_off)
        cats.append(m.categories)
        cols.append(m.colors)
        uvs.append(m.uvs)
        tex_ids.append(np.where(m.texture_ids >= 0, m.texture_ids + len(textures), -1))
        textures.extend(m.textures)
        v_off += len(m.vertices)
    return LabeledMesh(
        vertices=np.concatenate(verts), triangles=np.concatenate(tris),
        categories=np.concatenate(cats), colors=np.concatenate(cols),
        uvs=np.concatenate(uvs), texture_ids=np.concatenate(tex_ids),
        textures=tuple(textures),
        unlabeled_faces=sum(m.unlabeled_faces for m in meshes),
        dropped_degenerate=sum(m.dropped_degenerate for m in meshes))


def empty_mesh() -> LabeledMesh:
    return LabeledMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64), np.zeros(0, np.int32), np.zeros((0, 3), np.uint8))


# ---------------------------------------------------------------------------
# OBJ / MTL reading


@dataclass
class _Material:
    label: Tuple[int, int, int] = (0, 0, 0)
    appearance: Optional[Tuple[int, int, int]] = None
    texture: Optional[Path] = None


def _to_byte(values: Sequence[str]) -> Tuple[int, int, int]:
    return tuple(int(round(min(max(float(v), 0.0), 1.0) * 255)) for v in values[:3])


def _read_mtl(path: Path) -> Dict[str, _Material]:
    materials: Dict[str, _Material] = {}
    current = None
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise MeshFormatError(f"cannot read material library {path}: {exc}") from exc
    for line in lines:
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        key, args = parts[0], parts[1:]
        if key == "newmtl":
            current = materials.setdefault(" ".join(args), _Material())
        elif current is None:
            continue
        elif key == "Kd":
            current.label = _to_byte(args)
        elif key == "Ka":
            current.appearance = _to_byte(args)
        elif key == "map_Ka":
            current.texture = path.parent / " ".join(args)
    return materials


def _obj_index(token: str, count: int) -> int:
    i = int(token)
    return i - 1 if i > 0 else count + i


def load_obj(path, taxonomy: Taxonomy) -> LabeledMesh:
    """Read an OBJ file into a LabeledMesh.

    Polygons are fan-triangulated. Faces whose material label color is not
    in the palette (or that have no material) keep the ``UNLABELED``
    category; the count is stored in ``unlabeled_faces`` and logged.
    Zero-area triangles are dropped and counted in ``dropped_degenerate``.

    Raises:
      MeshFormatError: unreadable file, bad syntax or a face referencing a
        missing vertex.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise MeshFormatError(f"cannot read mesh {path}: {exc}") from exc

    vertices: List[List[float]] = []
    texcoords: List[List[float]] = []
    materials: Dict[str, _Material] = {}
    faces: List[Tuple[Tuple[int, int, int], Tuple[int, int, int], Optional[str]]] = []
    current: Optional[str] = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        key, args = parts[0], parts[1:]
        try:
            if key == "v":
                vertices.append([float(a) for a in args[:3]])
            elif key == "vt":
                texcoords.append([float(a) for a in args[:2]])
            elif key == "mtllib":
                for name in args:
                    materials.update(_read_mtl(path.parent / name))
            elif key == "usemtl":
                current = " ".join(args)
            elif key == "f":
                vi, ti = [], []
                for corner in args:
                    fields = corner.split("/")
                    vi.append(_obj_index(fields[0], len(vertices)))
                    ti.append(_obj_index(fields[1], len(texcoords)) if len(fields) > 1 and fields[1] else -1)
                if len(vi) < 3:
                    raise MeshFormatError(f"{path}:{lineno}: face with fewer than 3 corners")
                for k in range(1, len(vi) - 1):
                    faces.append(((vi[0], vi[k], vi[k + 1]), (ti[0], ti[k], ti[k + 1]), current))
        except (ValueError, IndexError) as exc:
            raise MeshFormatError(f"{path}:{lineno}: {exc}") from exc

    verts = np.array(vertices, dtype=np.float64).reshape(-1, 3)
    tc = np.array(texcoords, dtype=np.float64).reshape(-1, 2)
    tris = np.array([f[0] for f in faces], dtype=np.int64).reshape(-1, 3)
    if len(tris) and (tris.min() < 0 or tris.max() >= len(verts)):
        raise MeshFormatError(f"{path}: face references a missing vertex")
    tex_refs = np.array([f[1] for f in faces], dtype=np.int64).reshape(-1, 3)
    if len(tex_refs) and tex_refs.max() >= len(tc):
        raise MeshFormatError(f"{path}: face references a missing texture coordinate")

    texture_paths: List[Path] = []
    categories = np.full(len(faces), UNLABELED, dtype=np.int32)
    colors = np.full((len(faces), 3), 128, dtype=np.uint8)
    texture_ids = np.full(len(faces), -1, dtype=np.int32)
    uvs = np.zeros((len(faces), 3, 2))
    mat_cache: Dict[Optional[str], Tuple[int, Tuple[int, int, int], int]] = {}
    for i, (_, tref, mname) in enumerate(faces):
        if mname not in mat_cache:
            mat = materials.get(mname) if mname is not None else None
            if mat is None:
                mat_cache[mname] = (UNLABELED, (128, 128, 128), -1)
            else:
                tex = -1
                if mat.texture is not None:
                    if mat.texture not in texture_paths:
                        texture_paths.append(mat.texture)
                    tex = texture_paths.index(mat.texture)
                appearance = mat.appearance if mat.appearance is not None else mat.label
                mat_cache[mname] = (color_to_category(taxonomy, mat.label), appearance, tex)
        cat, appearance, tex = mat_cache[mname]
        categories[i] = cat
        colors[i] = appearance
        if tex >= 0 and min(tref) >= 0:
            texture_ids[i] = tex
            uvs[i] = tc[list(tref)]

    textures = []
    for tp in texture_paths:
        try:
            with Image.open(tp) as im:
                textures.append(np.array(im.convert("RGB")))
        except OSError as exc:
            raise MeshFormatError(f"cannot read texture {tp}: {exc}") from exc

    corners = verts[tris] if len(tris) else np.zeros((0, 3, 3))
    areas = 0.5 * np.linalg.norm(np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0]), axis=1)
    keep = areas > DEGENERATE_AREA
    dropped = int((~keep).sum())
    unlabeled = int((categories[keep] == UNLABELED).sum())
    if dropped:
        logger.warning("%s: dropped %d degenerate triangles", path, dropped)
    if unlabeled:
        logger.warning("%s: %d faces have off-palette label colors", path, unlabeled)
    return LabeledMesh(verts, tris[keep], categories[keep], colors[keep], uvs[keep],
                       texture_ids[keep], tuple(textures), unlabeled, dropped)


def load_scene(path, taxonomy: Taxonomy) -> LabeledMesh:
    """Load the static labeled environment mesh."""
    mesh = load_obj(path, taxonomy)
    mesh.validate(taxonomy)
    return mesh


def category_face_counts(mesh: LabeledMesh, taxonomy: Taxonomy) -> Dict[str, int]:
    """Face count per category name (``"unlabeled"`` for unmatched faces)."""
    counts: Dict[str, int] = {}
    for c in mesh.categories:
        name = "unlabeled" if c == UNLABELED else taxonomy[int(c)].name
        counts[name] = counts.get(name, 0) + 1
    return counts


# ---------------------------------------------------------------------------
# Movable objects and placements


@dataclass(frozen=True, eq=False)
class MovableObject:
    """A scanned object that can be dropped onto the work surface.

    The mesh is expressed in object coordinates; its horizontal origin is the
    center of the footprint circle.
    """

    id: str
    mesh: LabeledMesh
    footprint_radius: float
    base_offset: float

    def __post_init__(self):
        cats = np.unique(self.mesh.categories)
        if len(cats) != 1 or cats[0] == UNLABELED:
            raise MeshFormatError(f"movable {self.id!r} must have exactly one labeled category, got {cats.tolist()}")
        if not self.footprint_radius > 0:
            raise ValueError(f"movable {self.id!r}: footprint_radius must be positive")

    @property
    def category(self) -> int:
        return int(self.mesh.categories[0])

    @classmethod
    def from_mesh(cls, id: str, mesh: LabeledMesh, footprint_radius: Optional[float] = None) -> "MovableObject":
        """Derive footprint radius and base offset from the mesh extent."""
        v = mesh.vertices
        if footprint_radius is None:
            footprint_radius = float(np.sqrt((v[:, :2] ** 2).sum(axis=1)).max())
        return cls(id, mesh, footprint_radius, float(-v[:, 2].min()))


@dataclass(frozen=True)
class SurfaceRegion:
    """Horizontal rectangle ``[x_min, x_max] x [y_min, y_max]`` at ``height``."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    height: float

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError("surface region must have positive extent on both axes")

    def contains_circle(self, x: float, y: float, r: float) -> bool:
        return (self.x_min + r <= x <= self.x_max - r) and (self.y_min + r <= y <= self.y_max - r)


@dataclass(frozen=True)
class Placement:
    object_id: str
    position: Tuple[float, float, float]
    yaw: float

    def rotation(self) -> np.ndarray:
        return yaw_matrix(self.yaw)


def yaw_matrix(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def place_movables(region: SurfaceRegion, objects: Sequence[MovableObject], rng: np.random.Generator,
                   max_attempts: int = DEFAULT_MAX_ATTEMPTS) -> Tuple[List[Placement], List[str]]:
    """Drop objects at random, non-overlapping spots on the surface.

    Objects are processed in list order. Each gets up to ``max_attempts``
    rejection-sampling draws of (x, y, yaw); a draw is accepted when the
    footprint circle lies inside the region and is disjoint from every
    circle already placed.

    Returns:
      ``(placements, skipped_ids)``. Placements are in list order; the base
      of each object rests on the surface height.
    """
    placed: List[Tuple[float, float, float]] = []
    placements: List[Placement] = []
    skipped: List[str] = []
    for obj in objects:
        r = obj.footprint_radius
        lo_x, hi_x = region.x_min + r, region.x_max - r
        lo_y, hi_y = region.y_min + r, region.y_max - r
        if lo_x > hi_x or lo_y > hi_y:
            skipped.append(obj.id)
            continue
        for _ in range(max_attempts):
            x = rng.uniform(lo_x, hi_x)
            y = rng.uniform(lo_y, hi_y)
            yaw = rng.uniform(0.0, 2.0 * math.pi)
            if all(math.hypot(x - px, y - py) >= r + pr for px, py, pr in placed):
                placed.append((x, y, r))
                placements.append(Placement(obj.id, (x, y, region.height + obj.base_offset), yaw))
                break
        else:
            skipped.append(obj.id)
    return placements, skipped


def placed_meshes(placements: Sequence[Placement], objects: Dict[str, MovableObject]) -> List[LabeledMesh]:
    """World-space meshes for each placement, in placement order."""
    return [objects[p.object_id].mesh.transformed(p.rotation(), p.position) for p in placements]


# ---------------------------------------------------------------------------
# Scene descriptor


@dataclass(frozen=True)
class FreeSpace:
    """Walkable area: union of floor rectangles plus an eye-height range."""

    rectangles: Tuple[Tuple[float, float, float, float], ...]
    eye_height: Tuple[float, float] = (1.5, 1.8)

    def __post_init__(self):
        for x0, y0, x1, y1 in self.rectangles:
            if not (x1 > x0 and y1 > y0):
                raise ValueError(f"free-space rectangle {(x0, y0, x1, y1)} has no area")
        if not self.eye_height[1] >= self.eye_height[0]:
            raise ValueError("eye_height range must be (low, high) with low <= high")

    def contains(self, x: float, y: float) -> bool:
        return any(x0 <= x <= x1 and y0 <= y <= y1 for x0, y0, x1, y1 in self.rectangles)


@dataclass(frozen=True, eq=False)
class Scene:
    """Everything a generation run needs, as read from a scene descriptor."""

    taxonomy: Taxonomy
    static: LabeledMesh
    movables: Tuple[MovableObject, ...]
    surface: SurfaceRegion
    free_space: FreeSpace
    intrinsics: Optional[dict] = None
    source: Optional[Path] = None
    movable_index: Dict[str, MovableObject] = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        index = {}
        for m in self.movables:
            index.setdefault(m.id, m)
        object.__setattr__(self, "movable_index", index)


def load_scene_descriptor(path) -> Scene:
    """Read a JSON scene descriptor.

    Paths inside the descriptor are relative to the descriptor file::

        {
          "taxonomy": "../worksite35.txt",
          "static_mesh": "room.obj",
          "movables": [{"id": "clamp", "mesh": "clamp.obj"}, ...],
          "surface": {"x": [1.0, 3.0], "y": [3.6, 4.4], "height": 0.9},
          "free_space": {"rectangles": [[x0, y0, x1, y1], ...],
                         "eye_height": [1.5, 1.8]},
          "intrinsics": {"width": 1280, "height": 720, ...}   # optional
        }

    A movable entry may carry ``"footprint_radius"`` to override the value
    derived from the mesh; repeated ids give duplicate instances.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise MeshFormatError(f"cannot read scene descriptor {path}: {exc}") from exc
    root = path.parent
    taxonomy = load_taxonomy(root / doc["taxonomy"])
    static = load_scene(root / doc["static_mesh"], taxonomy)
    cache: Dict[str, LabeledMesh] = {}
    movables = []
    for entry in doc.get("movables", []):
        mpath = entry["mesh"]
        if mpath not in cache:
            cache[mpath] = load_scene(root / mpath, taxonomy)
        obj = MovableObject.from_mesh(entry["id"], cache[mpath], entry.get("footprint_radius"))
        if not taxonomy[obj.category].isthing:
            raise MeshFormatError(f"movable {obj.id!r} has stuff category {taxonomy[obj.category].name!r}")
        movables.append(obj)
    s = doc["surface"]
    surface = SurfaceRegion(s["x"][0], s["x"][1], s["y"][0], s["y"][1], s["height"])
    fs = doc["free_space"]
    free_space = FreeSpace(tuple(tuple(float(v) for v in r) for r in fs["rectangles"]),
                           tuple(fs.get("eye_height", (1.5, 1.8))))
    return Scene(taxonomy, static, tuple(movables), surface, free_space, doc.get("intrinsics"), path)


def miniworksite_path() -> Path:
    """Path of the bundled fixture scene descriptor."""
    from importlib import resources

    return Path(str(resources.files("synthpan").joinpath("data/miniworksite/scene.json")))
