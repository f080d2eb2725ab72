"""Semantic buffers to segments, panoptic images and COCO-style documents.

Segment ids
-----------
Stuff segments use the class color id ``R + G*256 + B*256**2``. Thing
segments add ``ordinal * 2**24`` to it, where ``ordinal`` counts instances
of that category within the image from 0, so the first instance of a class
carries the plain color id and every id in an image is unique.

Panoptic image
--------------
8-bit single channel: thing pixels are 0, stuff pixels hold the 1-based
ordinal of their category among the taxonomy's stuff categories (taxonomy
order), unlabeled pixels are 255.

Mask RLE
--------
Masks are stored as ``{"size": [height, width], "counts": [...]}``. The
mask is flattened in row-major (C) order and ``counts`` lists the lengths of
alternating runs of 0s and 1s, starting with a run of 0s (which may have
length 0). The counts sum to ``height * width``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from synthpan.taxonomy import UNLABELED, Taxonomy, image_to_categories, pack_rgb

ID_LIMIT = 1 << 24
VOID = 255
MAX_STUFF = 254


class ConversionError(ValueError):
    pass


class CocoError(ValueError):
    pass


def encode_segment_id(color: Sequence[int]) -> int:
    """``R + G*256 + B*65536`` for an 8-bit RGB triplet."""
    r, g, b = (int(c) for c in color)
    if not all(0 <= c <= 255 for c in (r, g, b)):
        raise ValueError(f"color channels must be in 0..255, got {color}")
    return r + g * 256 + b * 65536


def decode_segment_id(segment_id: int) -> Tuple[int, int, int]:
    """Inverse of :func:`encode_segment_id` on ``[0, 2**24)``."""
    segment_id = int(segment_id)
    if not 0 <= segment_id < ID_LIMIT:
        raise ValueError(f"segment id {segment_id} outside [0, 2**24)")
    return segment_id % 256, (segment_id // 256) % 256, segment_id // 65536


def thing_segment_id(color: Sequence[int], ordinal: int) -> int:
    return encode_segment_id(color) + int(ordinal) * ID_LIMIT


# ---------------------------------------------------------------------------
# Masks


def rle_encode(mask: np.ndarray) -> dict:
    flat = np.asarray(mask, dtype=bool).ravel()
    h, w = np.shape(mask)
    if flat.size == 0:
        return {"size": [int(h), int(w)], "counts": []}
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts.insert(0, 0)
    return {"size": [int(h), int(w)], "counts": counts}


def rle_decode(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    counts = np.asarray(rle["counts"], dtype=np.int64)
    if counts.sum() != h * w:
        raise CocoError(f"RLE counts sum to {int(counts.sum())}, expected {h * w}")
    values = np.zeros(len(counts), dtype=bool)
    values[1::2] = True
    return np.repeat(values, counts).reshape(h, w)


def mask_to_bbox(mask: np.ndarray) -> Tuple[int, int, int, int]:
    """Tight ``(x, y, w, h)`` box of the set pixels.

    Raises:
      ValueError: if the mask is empty.
    """
    mask = np.asarray(mask, dtype=bool)
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        raise ValueError("empty mask has no bounding box")
    cols = np.flatnonzero(mask.any(axis=0))
    return int(cols[0]), int(rows[0]), int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1)


@dataclass(frozen=True, eq=False)
class Segment:
    """One labeled region of an image.

    ``instance`` is the per-category ordinal for things and None for stuff.
    ``score`` is only set on predictions.
    """

    category: int
    mask: np.ndarray
    panoptic_id: int
    instance: Optional[int] = None
    score: Optional[float] = None
    area: int = field(init=False)
    bbox: Tuple[int, int, int, int] = field(init=False)

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)
        area = int(mask.sum())
        if area < 1:
            raise ValueError("segment mask is empty")
        object.__setattr__(self, "area", area)
        object.__setattr__(self, "bbox", mask_to_bbox(mask))

    @property
    def isthing(self) -> bool:
        return self.instance is not None

    @property
    def rle(self) -> dict:
        return rle_encode(self.mask)


# ---------------------------------------------------------------------------
# Conversion


_STRUCTURES = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


def _categories(semantic: np.ndarray, taxonomy: Taxonomy, strict: bool) -> np.ndarray:
    semantic = np.asarray(semantic)
    if semantic.ndim != 3 or semantic.shape[2] != 3:
        raise ConversionError(f"semantic image must be (H, W, 3), got {semantic.shape}")
    cats = image_to_categories(taxonomy, semantic)
    if strict:
        off = (cats == UNLABELED) & (pack_rgb(semantic) != 0)
        if off.any():
            y, x = np.argwhere(off)[0]
            raise ConversionError(
                f"off-palette color {tuple(int(c) for c in semantic[y, x])} at pixel (x={x}, y={y})")
    return cats


def semantic_to_segments(semantic: np.ndarray, taxonomy: Taxonomy, instance: Optional[np.ndarray] = None,
                         connectivity: int = 8, strict: bool = True) -> List[Segment]:
    """Split a semantic label image into panoptic segments.

    Stuff categories give one segment each. Thing categories give one
    segment per instance id when an instance buffer is supplied (thing
    pixels with instance 0 fall back to connected components), otherwise one
    segment per connected component of the category mask.

    Segments are ordered by category index, then by instance id or by the
    row-major position of each component's first pixel.

    Args:
      semantic: (H, W, 3) uint8 palette-colored image, black = unlabeled.
      taxonomy: the palette.
      instance: optional (H, W) integer instance buffer, 0 = none.
      connectivity: 4 or 8.
      strict: raise on off-palette colors; when False they count as
        unlabeled.

    Raises:
      ConversionError: off-palette pixel in strict mode, or bad shapes.
    """
    if connectivity not in _STRUCTURES:
        raise ValueError("connectivity must be 4 or 8")
    cats = _categories(semantic, taxonomy, strict)
    if instance is not None:
        instance = np.asarray(instance)
        if instance.shape != cats.shape:
            raise ConversionError("instance buffer and semantic image differ in shape")
    present = np.unique(cats)
    segments: List[Segment] = []
    for c in present:
        if c == UNLABELED:
            continue
        cat = taxonomy[int(c)]
        cmask = cats == c
        if not cat.isthing:
            segments.append(Segment(cat.index, cmask, encode_segment_id(cat.color)))
            continue
        masks: List[np.ndarray] = []
        rest = cmask
        if instance is not None:
            ids = instance[cmask]
            for iid in np.unique(ids[ids > 0]):
                masks.append(cmask & (instance == iid))
            rest = cmask & (instance <= 0)
        if rest.any():
            labels, n = ndimage.label(rest, structure=_STRUCTURES[connectivity])
            # ndimage numbers components by first pixel in row-major order
            masks.extend(labels == k for k in range(1, n + 1))
        for ordinal, m in enumerate(masks):
            segments.append(Segment(cat.index, m, thing_segment_id(cat.color, ordinal), instance=ordinal))
    return segments


def stuff_ordinals(taxonomy: Taxonomy) -> np.ndarray:
    """Panoptic-image value per category index (0 for things)."""
    out = np.zeros(len(taxonomy), dtype=np.int64)
    k = 0
    for cat in taxonomy:
        if not cat.isthing:
            k += 1
            out[cat.index] = k
    return out


def build_panoptic_image(semantic: np.ndarray, taxonomy: Taxonomy, strict: bool = True) -> np.ndarray:
    """(H, W) uint8 panoptic image: things 0, stuff 1..n, unlabeled 255."""
    if len(taxonomy.stuff) > MAX_STUFF:
        raise ConversionError(f"at most {MAX_STUFF} stuff categories fit in an 8-bit panoptic image")
    cats = _categories(semantic, taxonomy, strict)
    lut = np.concatenate([stuff_ordinals(taxonomy), [VOID]]).astype(np.uint8)
    return lut[np.where(cats < 0, len(taxonomy), cats)]


def segments_to_semantic(segments: Iterable[Segment], taxonomy: Taxonomy, shape: Tuple[int, int]) -> np.ndarray:
    """Paint segments back into an (H, W, 3) semantic image."""
    out = np.zeros((*shape, 3), np.uint8)
    for s in segments:
        out[s.mask] = taxonomy[s.category].color
    return out


def segments_to_category_map(segments: Iterable[Segment], shape: Tuple[int, int]) -> np.ndarray:
    out = np.full(shape, UNLABELED, dtype=np.int32)
    for s in segments:
        out[s.mask] = s.category
    return out


# ---------------------------------------------------------------------------
# COCO documents


def category_id(index: int) -> int:
    """COCO category id for a taxonomy index (ids start at 1)."""
    return index + 1


def coco_categories(taxonomy: Taxonomy, things_only: bool = False) -> List[dict]:
    return [{"id": category_id(c.index), "name": c.name, "isthing": int(c.isthing), "color": list(c.color)}
            for c in taxonomy if c.isthing or not things_only]


def _image_entry(meta: dict) -> dict:
    return {"id": int(meta["id"]), "file_name": str(meta["file_name"]),
            "width": int(meta["width"]), "height": int(meta["height"])}


def _check_segments(meta: dict, segments: Sequence[Segment], taxonomy: Taxonomy) -> None:
    for s in segments:
        if not 0 <= s.category < len(taxonomy):
            raise CocoError(f"image {meta['id']}: segment references unknown category index {s.category}")
        if s.mask.shape != (int(meta["height"]), int(meta["width"])):
            raise CocoError(f"image {meta['id']}: segment mask shape {s.mask.shape} does not match image size")


def export_instance_coco(frames: Sequence[Tuple[dict, Sequence[Segment]]], taxonomy: Taxonomy) -> dict:
    """COCO instance document for the thing segments of each frame.

    Args:
      frames: ``(image_meta, segments)`` pairs in frame order. ``image_meta``
        holds ``id``, ``file_name``, ``width`` and ``height``.

    Annotation ids run from 1 in frame order. Prediction segments (with a
    score) carry a ``score`` field.
    """
    images, annotations = [], []
    for meta, segments in frames:
        _check_segments(meta, segments, taxonomy)
        images.append(_image_entry(meta))
        for s in segments:
            if not taxonomy[s.category].isthing:
                continue
            ann = {"id": len(annotations) + 1, "image_id": int(meta["id"]), "category_id": category_id(s.category),
                   "segmentation": s.rle, "area": s.area, "bbox": list(s.bbox), "iscrowd": 0}
            if s.score is not None:
                ann["score"] = float(s.score)
            annotations.append(ann)
    doc = {"images": images, "annotations": annotations, "categories": coco_categories(taxonomy, things_only=True)}
    validate_coco(doc)
    return doc


def panoptic_file_name(meta: dict) -> str:
    if "panoptic_file_name" in meta:
        return str(meta["panoptic_file_name"])
    return Path(meta["file_name"]).stem + "_pan.png"


def export_panoptic_coco(frames: Sequence[Tuple[dict, Sequence[Segment], Optional[np.ndarray]]], taxonomy: Taxonomy,
                         out_dir=None) -> dict:
    """COCO panoptic document; optionally writes the per-frame panoptic PNGs.

    Each ``segments_info`` entry carries the segment's panoptic id, category,
    area, bbox and RLE mask, so the document alone is enough to evaluate
    against.
    """
    images, annotations = [], []
    for meta, segments, panoptic in frames:
        _check_segments(meta, segments, taxonomy)
        images.append(_image_entry(meta))
        fname = panoptic_file_name(meta)
        info = []
        for s in segments:
            entry = {"id": int(s.panoptic_id), "category_id": category_id(s.category), "area": s.area,
                     "bbox": list(s.bbox), "iscrowd": 0, "segmentation": s.rle}
            if s.score is not None:
                entry["score"] = float(s.score)
            info.append(entry)
        annotations.append({"image_id": int(meta["id"]), "file_name": fname, "segments_info": info})
        if out_dir is not None and panoptic is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            Image.fromarray(np.asarray(panoptic, dtype=np.uint8), "L").save(Path(out_dir) / fname)
    doc = {"images": images, "annotations": annotations, "categories": coco_categories(taxonomy)}
    validate_coco(doc)
    return doc


def validate_coco(doc: dict) -> None:
    """Check references and id uniqueness in an instance or panoptic document.

    Raises:
      CocoError: dangling image/category references or duplicate ids.
    """
    for key in ("images", "annotations", "categories"):
        if not isinstance(doc.get(key), list):
            raise CocoError(f"document is missing list {key!r}")
    image_ids = [im["id"] for im in doc["images"]]
    cat_ids = [c["id"] for c in doc["categories"]]
    if len(set(image_ids)) != len(image_ids):
        raise CocoError("duplicate image ids")
    if len(set(cat_ids)) != len(cat_ids):
        raise CocoError("duplicate category ids")
    images, cats = set(image_ids), set(cat_ids)
    ann_ids = []
    for ann in doc["annotations"]:
        if ann["image_id"] not in images:
            raise CocoError(f"annotation references unknown image id {ann['image_id']}")
        if "segments_info" in ann:
            seg_ids = [s["id"] for s in ann["segments_info"]]
            if len(set(seg_ids)) != len(seg_ids):
                raise CocoError(f"duplicate segment ids in image {ann['image_id']}")
            for s in ann["segments_info"]:
                if s["category_id"] not in cats:
                    raise CocoError(f"segment references unknown category id {s['category_id']}")
        else:
            ann_ids.append(ann["id"])
            if ann["category_id"] not in cats:
                raise CocoError(f"annotation references unknown category id {ann['category_id']}")
    if len(set(ann_ids)) != len(ann_ids):
        raise CocoError("duplicate annotation ids")


def _segment_from_entry(entry: dict, taxonomy: Taxonomy) -> Tuple[np.ndarray, int]:
    index = int(entry["category_id"]) - 1
    if not 0 <= index < len(taxonomy):
        raise CocoError(f"unknown category id {entry['category_id']}")
    return rle_decode(entry["segmentation"]), index


def parse_instance_coco(doc: dict, taxonomy: Taxonomy) -> List[Tuple[dict, List[Segment]]]:
    """Rebuild ``(image_meta, segments)`` pairs from an instance document.

    Instance ordinals are recovered in annotation order per category.
    """
    validate_coco(doc)
    by_image: Dict[int, List[Segment]] = {im["id"]: [] for im in doc["images"]}
    seen: Dict[Tuple[int, int], int] = {}
    for ann in doc["annotations"]:
        mask, index = _segment_from_entry(ann, taxonomy)
        ordinal = seen.get((ann["image_id"], index), 0)
        seen[(ann["image_id"], index)] = ordinal + 1
        by_image[ann["image_id"]].append(Segment(index, mask, thing_segment_id(taxonomy[index].color, ordinal),
                                                 instance=ordinal, score=ann.get("score")))
    return [(dict(im), by_image[im["id"]]) for im in doc["images"]]


def parse_panoptic_coco(doc: dict, taxonomy: Taxonomy) -> List[Tuple[dict, List[Segment]]]:
    """Rebuild ``(image_meta, segments)`` pairs from a panoptic document."""
    validate_coco(doc)
    by_image: Dict[int, List[Segment]] = {im["id"]: [] for im in doc["images"]}
    for ann in doc["annotations"]:
        segs = by_image[ann["image_id"]]
        for entry in ann["segments_info"]:
            mask, index = _segment_from_entry(entry, taxonomy)
            pid = int(entry["id"])
            instance = pid // ID_LIMIT if taxonomy[index].isthing else None
            segs.append(Segment(index, mask, pid, instance=instance, score=entry.get("score")))
    return [(dict(im), by_image[im["id"]]) for im in doc["images"]]


def dumps(doc: dict) -> str:
    """Canonical serialization used for every exported document."""
    return json.dumps(doc, separators=(",", ":")) + "\n"


def write_document(doc: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(doc), encoding="utf-8")
    return path


def read_document(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CocoError(f"cannot read document {path}: {exc}") from exc
