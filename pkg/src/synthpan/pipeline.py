"""Dataset orchestration: generation, splits, conversion, evaluation and validation.

Output tree of a generation run::

    out/
      manifest.json      frame index (paths relative to this directory)
      taxonomy.txt       copy of the palette used
      tour.json          camera tour
      instances.json     COCO instance annotations (things)
      panoptic.json      COCO panoptic annotations (all segments)
      frames/
        000000.png       RGB
        000000_sem.png   semantic label image
        000000_inst.png  16-bit instance ids
        000000_pan.png   8-bit panoptic image
        000000_depth.bin optional float32 depth

Seeding: every random stream is derived from the run seed and a role label
(``"tour"``, ``"placement"`` plus the epoch index, ``"split"``) through
:func:`derive_rng`, so each stage can be re-run on its own and still draw the
same numbers.
"""

from __future__ import annotations

import json
import logging
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from synthpan import __version__
from synthpan import annotate, metrics, render, taxonomy as taxmod
from synthpan.scene import Scene, load_scene_descriptor, place_movables
from synthpan.tour import CameraIntrinsics, TourParams, generate_tour

logger = logging.getLogger(__name__)

MANIFEST_FORMAT = "synthpan-manifest"
MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")


class PipelineError(RuntimeError):
    pass


def derive_rng(seed: int, role: str, *extra: int) -> np.random.Generator:
    """Independent generator for one role of a seeded run."""
    return np.random.default_rng([int(seed), zlib.crc32(role.encode("utf-8")), *(int(e) for e in extra)])


# ---------------------------------------------------------------------------
# Manifest


@dataclass
class FrameRecord:
    id: int
    rgb: str
    semantic: str
    instance: Optional[str] = None
    panoptic: Optional[str] = None
    depth: Optional[str] = None
    position: Optional[List[float]] = None
    quaternion: Optional[List[float]] = None
    epoch: Optional[int] = None
    split: Optional[str] = None


@dataclass
class DatasetManifest:
    frames: List[FrameRecord]
    taxonomy: str = "taxonomy.txt"
    seed: Optional[int] = None
    width: int = 1280
    height: int = 720
    instances: Optional[str] = "instances.json"
    panoptic: Optional[str] = "panoptic.json"
    toolkit_version: str = __version__
    root: Optional[Path] = field(default=None, compare=False)

    def path(self, rel: str) -> Path:
        return (self.root or Path(".")) / rel

    def to_json(self) -> str:
        doc = {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION}
        for k, v in asdict(self).items():
            if k not in ("root", "frames"):
                doc[k] = v
        doc["frames"] = [asdict(f) for f in self.frames]
        return json.dumps(doc, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str, root: Optional[Path] = None) -> "DatasetManifest":
        doc = json.loads(text)
        if doc.pop("format", None) != MANIFEST_FORMAT:
            raise PipelineError("not a dataset manifest")
        if doc.pop("version", None) != MANIFEST_VERSION:
            raise PipelineError("unsupported manifest version")
        frames = [FrameRecord(**f) for f in doc.pop("frames")]
        return cls(frames=frames, root=root, **doc)

    def save(self, path=None) -> Path:
        path = Path(path) if path is not None else self.path("manifest.json")
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    def split_counts(self) -> Dict[str, int]:
        return {s: sum(f.split == s for f in self.frames) for s in SPLITS}

    def load_taxonomy(self) -> taxmod.Taxonomy:
        return taxmod.load_taxonomy(self.path(self.taxonomy))


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise PipelineError(f"cannot read manifest {path}: {exc}") from exc
    return DatasetManifest.from_json(text, root=path.parent)


# ---------------------------------------------------------------------------
# Splits


@dataclass(frozen=True)
class SplitSpec:
    """Either ratios ``(train, val, test)`` summing to 1, or absolute counts."""

    ratios: Optional[Tuple[float, float, float]] = None
    counts: Optional[Tuple[int, int, int]] = None
    seed: int = 0

    def __post_init__(self):
        if (self.ratios is None) == (self.counts is None):
            raise ValueError("give exactly one of ratios or counts")
        if self.ratios is not None:
            if len(self.ratios) != 3 or any(r < 0 for r in self.ratios):
                raise ValueError("ratios must be three non-negative numbers (train, val, test)")
            if abs(math.fsum(self.ratios) - 1.0) > 1e-9:
                raise ValueError(f"ratios must sum to 1, got {math.fsum(self.ratios)}")
        else:
            if len(self.counts) != 3 or any(c < 0 for c in self.counts):
                raise ValueError("counts must be three non-negative integers (train, val, test)")

    def sizes(self, n: int) -> Tuple[int, int, int]:
        """(train, val, test) sizes for ``n`` frames.

        Ratios: train and test are floored, val takes the remainder. Counts:
        train and test are used as given and val takes every remaining frame.
        """
        if self.ratios is not None:
            # guard against products like 0.29 * 100 = 28.999999999999996
            train = math.floor(self.ratios[0] * n + 1e-9)
            test = math.floor(self.ratios[2] * n + 1e-9)
            return train, n - train - test, test
        train, val, test = self.counts
        if train + val + test > n:
            raise PipelineError(f"split counts {self.counts} exceed {n} frames")
        return train, n - train - test, test


def split_dataset(manifest: DatasetManifest, spec: SplitSpec, rng: Optional[np.random.Generator] = None,
                  overwrite: bool = False) -> DatasetManifest:
    """Tag frames train/val/test by a seeded random permutation."""
    if not overwrite and any(f.split is not None for f in manifest.frames):
        raise PipelineError("manifest is already split (pass overwrite=True to redo it)")
    n = len(manifest.frames)
    train, val, test = spec.sizes(n)
    if rng is None:
        rng = derive_rng(spec.seed, "split")
    perm = rng.permutation(n)
    tags: List[Optional[str]] = [None] * n
    for rank, i in enumerate(perm):
        tags[i] = "train" if rank < train else ("test" if rank < train + test else "val")
    frames = [replace(f, split=t) for f, t in zip(manifest.frames, tags)]
    return replace(manifest, frames=frames)


# ---------------------------------------------------------------------------
# Generation


@dataclass(frozen=True)
class GenerateConfig:
    n_frames: int
    seed: int
    tour: TourParams = TourParams()
    intrinsics: Optional[CameraIntrinsics] = None
    write_depth: bool = False
    connectivity: int = 8
    workers: int = 1


_WORKER_SCENE: Dict[str, Scene] = {}


def _scene_for(descriptor: str) -> Scene:
    if descriptor not in _WORKER_SCENE:
        _WORKER_SCENE[descriptor] = load_scene_descriptor(descriptor)
    return _WORKER_SCENE[descriptor]


def _frame_job(args):
    descriptor, frame, placements, intrinsics, out_dir, write_depth, connectivity = args
    scene = _scene_for(descriptor)
    comps = scene.static.thing_components(scene.taxonomy)
    try:
        fs = render.render_frame(scene.static, placements, scene.movable_index, frame.pose, intrinsics,
                                 scene.taxonomy, comps)
        paths = render.write_frame(fs, Path(out_dir) / "frames", frame.index, depth=write_depth)
        segments = annotate.semantic_to_segments(fs.semantic, scene.taxonomy, fs.instance, connectivity)
        panoptic = annotate.build_panoptic_image(fs.semantic, scene.taxonomy)
        pan_path = Path(out_dir) / "frames" / f"{frame.index:06d}_pan.png"
        Image.fromarray(panoptic, "L").save(pan_path)
    except Exception as exc:
        raise PipelineError(f"frame {frame.index}: {exc}") from exc
    return frame.index, {k: str(p.relative_to(out_dir)) for k, p in paths.items()}, segments


def run_generate(descriptor, out_dir, config: GenerateConfig) -> DatasetManifest:
    """Render a seeded tour of a scene and write the full annotated dataset.

    Movable placements are redrawn at every epoch boundary
    (``config.tour.epoch_length`` frames). With ``n_frames == 0`` nothing is
    written and an empty manifest is returned.

    Raises:
      PipelineError: naming the failing frame id when any stage fails.
    """
    descriptor = str(Path(descriptor).resolve())
    out_dir = Path(out_dir)
    scene = _scene_for(descriptor)
    intrinsics = config.intrinsics or CameraIntrinsics.from_dict(scene.intrinsics)
    empty = DatasetManifest(frames=[], seed=config.seed, width=intrinsics.width, height=intrinsics.height,
                            root=out_dir)
    if config.n_frames == 0:
        return empty
    scene.taxonomy.require_panoptic()
    plan = generate_tour(scene.free_space, config.n_frames, intrinsics, config.tour, derive_rng(config.seed, "tour"))
    placements = {}
    for fr in plan.frames:
        if fr.epoch not in placements:
            placed, skipped = place_movables(scene.surface, scene.movables,
                                             derive_rng(config.seed, "placement", fr.epoch))
            if skipped:
                logger.warning("epoch %d: could not place %s", fr.epoch, ", ".join(skipped))
            placements[fr.epoch] = placed

    (out_dir / "frames").mkdir(parents=True, exist_ok=True)
    jobs = [(descriptor, fr, placements[fr.epoch], intrinsics, str(out_dir), config.write_depth,
             config.connectivity) for fr in plan.frames]
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_frame_job, jobs))
    else:
        results = [_frame_job(j) for j in jobs]
    results.sort(key=lambda r: r[0])

    records, inst_frames, pan_frames = [], [], []
    for (index, paths, segments), fr in zip(results, plan.frames):
        meta = {"id": index, "file_name": Path(paths["rgb"]).name, "width": intrinsics.width,
                "height": intrinsics.height, "panoptic_file_name": f"{index:06d}_pan.png"}
        inst_frames.append((meta, segments))
        pan_frames.append((meta, segments, None))
        records.append(FrameRecord(
            id=index, rgb=paths["rgb"], semantic=paths["semantic"], instance=paths["instance"],
            panoptic=f"frames/{index:06d}_pan.png", depth=paths.get("depth"),
            position=list(fr.pose.position), quaternion=list(fr.pose.orientation), epoch=fr.epoch))
    annotate.write_document(annotate.export_instance_coco(inst_frames, scene.taxonomy), out_dir / "instances.json")
    annotate.write_document(annotate.export_panoptic_coco(pan_frames, scene.taxonomy), out_dir / "panoptic.json")
    (out_dir / "tour.json").write_text(plan.to_json() + "\n", encoding="utf-8")
    (out_dir / "taxonomy.txt").write_text(taxmod.dumps(scene.taxonomy), encoding="utf-8")
    manifest = replace(empty, frames=records)
    manifest.save()
    return manifest


# ---------------------------------------------------------------------------
# Conversion of external masks


def convert_masks(semantic_paths: Sequence, tax: taxmod.Taxonomy, out_dir, connectivity: int = 8,
                  strict: bool = False, start_id: int = 0) -> Tuple[dict, dict]:
    """Annotate externally produced semantic masks.

    Thing instances come from connected components, since no instance buffer
    exists. Off-palette pixels become unlabeled unless ``strict``. Writes
    ``instances.json``, ``panoptic.json`` and one ``*_pan.png`` per mask into
    ``out_dir``.
    """
    tax.require_panoptic()
    out_dir = Path(out_dir)
    inst_frames, pan_frames = [], []
    for k, p in enumerate(semantic_paths):
        p = Path(p)
        sem = render.read_rgb(p)
        segments = annotate.semantic_to_segments(sem, tax, None, connectivity, strict=strict)
        pan = annotate.build_panoptic_image(sem, tax, strict=strict)
        meta = {"id": start_id + k, "file_name": p.name, "width": sem.shape[1], "height": sem.shape[0],
                "panoptic_file_name": p.stem + "_pan.png"}
        inst_frames.append((meta, segments))
        pan_frames.append((meta, segments, pan))
    inst = annotate.export_instance_coco(inst_frames, tax)
    pan = annotate.export_panoptic_coco(pan_frames, tax, out_dir=out_dir)
    annotate.write_document(inst, out_dir / "instances.json")
    annotate.write_document(pan, out_dir / "panoptic.json")
    return inst, pan


# ---------------------------------------------------------------------------
# Evaluation


def evaluation_frames(manifest: DatasetManifest, split: Optional[str] = "test") -> List[FrameRecord]:
    """Frames of ``split``, or all frames if the manifest carries no split tags."""
    if split is None or all(f.split is None for f in manifest.frames):
        return list(manifest.frames)
    return [f for f in manifest.frames if f.split == split]


def run_evaluate(manifest, predictions, split: Optional[str] = "test", report_path=None) -> metrics.MetricReport:
    """Score a panoptic prediction document against a dataset's ground truth.

    Args:
      manifest: DatasetManifest or path to one.
      predictions: panoptic-format document (dict) or path. Segment entries
        may carry a ``score`` (default 1.0). Evaluated images without an
        entry count as empty predictions.
      split: which split to score; all frames when the manifest is untagged.
      report_path: optional path for the JSON report.

    Raises:
      PipelineError: a prediction references an image the manifest does not
        have. Predictions for frames of other splits are ignored.
    """
    if not isinstance(manifest, DatasetManifest):
        manifest = load_manifest(manifest)
    if not isinstance(predictions, dict):
        predictions = annotate.read_document(predictions)
    if any("segments_info" not in a for a in predictions.get("annotations", [])):
        raise annotate.CocoError("predictions must be a panoptic-format document")
    tax = manifest.load_taxonomy()
    gt_doc = annotate.read_document(manifest.path(manifest.panoptic))
    gt = {meta["id"]: (meta, segs) for meta, segs in annotate.parse_panoptic_coco(gt_doc, tax)}
    frames = evaluation_frames(manifest, split)
    wanted = [f.id for f in frames]
    known = {f.id for f in manifest.frames}
    pred: Dict[int, list] = {i: [] for i in wanted}
    for meta, segs in annotate.parse_panoptic_coco(predictions, tax):
        if meta["id"] not in known:
            raise PipelineError(f"prediction references unknown image id {meta['id']}")
        if meta["id"] in pred:
            pred[meta["id"]] = segs
    missing = [i for i in wanted if i not in gt]
    if missing:
        raise PipelineError(f"ground truth has no annotations for frames {missing[:5]}")
    shapes = [(gt[i][0]["height"], gt[i][0]["width"]) for i in wanted]
    report = metrics.evaluate([gt[i][1] for i in wanted], [pred[i] for i in wanted], tax, shapes)
    if report_path is not None:
        Path(report_path).write_text(report.to_json(), encoding="utf-8")
    return report


# ---------------------------------------------------------------------------
# Validation


@dataclass(frozen=True)
class Violation:
    kind: str
    frame: Optional[int]
    message: str

    def __str__(self):
        where = f"frame {self.frame}: " if self.frame is not None else ""
        return f"[{self.kind}] {where}{self.message}"


@dataclass
class ValidationReport:
    violations: List[Violation]
    frames_checked: int

    @property
    def ok(self) -> bool:
        return not self.violations

    def count(self, kind: str) -> int:
        return sum(v.kind == kind for v in self.violations)


def _image_size(path: Path) -> Tuple[int, int]:
    with Image.open(path) as im:
        return im.size


def validate_manifest(manifest, sample: Optional[int] = None, seed: int = 0,
                      max_pixels_per_frame: int = 10) -> ValidationReport:
    """Check a dataset for consistency; never raises on dataset problems.

    Checks: unique frame ids and valid split tags, file existence, image
    dimensions against the manifest, presence and sizes of every frame in
    the COCO documents, and per-pixel agreement between each panoptic image
    and the panoptic image implied by its semantic image. Pixel agreement is
    checked on all frames, or on ``sample`` frames drawn with ``seed``.
    """
    if not isinstance(manifest, DatasetManifest):
        manifest = load_manifest(manifest)
    out: List[Violation] = []
    ids = [f.id for f in manifest.frames]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    for d in dupes:
        out.append(Violation("duplicate-id", d, "frame id appears more than once"))
    for f in manifest.frames:
        if f.split is not None and f.split not in SPLITS:
            out.append(Violation("split", f.id, f"unknown split tag {f.split!r}"))

    try:
        tax = manifest.load_taxonomy()
    except (OSError, taxmod.TaxonomyError) as exc:
        out.append(Violation("taxonomy", None, str(exc)))
        return ValidationReport(out, 0)

    present: Dict[int, Dict[str, Path]] = {}
    for f in manifest.frames:
        files = {}
        for kind in ("rgb", "semantic", "instance", "panoptic", "depth"):
            rel = getattr(f, kind)
            if rel is None:
                if kind in ("rgb", "semantic"):
                    out.append(Violation("missing-file", f.id, f"no {kind} path recorded"))
                continue
            p = manifest.path(rel)
            if not p.is_file():
                out.append(Violation("missing-file", f.id, f"{kind} file {rel} does not exist"))
                continue
            files[kind] = p
            if kind != "depth":
                size = _image_size(p)
                if size != (manifest.width, manifest.height):
                    out.append(Violation("dimensions", f.id,
                                         f"{kind} is {size[0]}x{size[1]}, expected {manifest.width}x{manifest.height}"))
            elif p.stat().st_size != 4 * manifest.width * manifest.height:
                out.append(Violation("dimensions", f.id, "depth file has the wrong byte size"))
        present[f.id] = files

    for key in ("instances", "panoptic"):
        rel = getattr(manifest, key)
        if rel is None:
            continue
        p = manifest.path(rel)
        if not p.is_file():
            out.append(Violation("missing-file", None, f"{key} document {rel} does not exist"))
            continue
        try:
            doc = annotate.read_document(p)
            annotate.validate_coco(doc)
        except annotate.CocoError as exc:
            out.append(Violation("annotation", None, f"{key}: {exc}"))
            continue
        images = {im["id"]: im for im in doc["images"]}
        for f in manifest.frames:
            im = images.get(f.id)
            if im is None:
                out.append(Violation("annotation", f.id, f"missing from {key} document"))
            elif (im["width"], im["height"]) != (manifest.width, manifest.height):
                out.append(Violation("annotation", f.id, f"{key} image entry has size {im['width']}x{im['height']}"))
        for ann in doc["annotations"]:
            entries = ann.get("segments_info", [ann])
            area = 0
            for e in entries:
                seg = e.get("segmentation")
                if seg is not None and tuple(seg["size"]) != (manifest.height, manifest.width):
                    out.append(Violation("annotation", ann["image_id"], f"{key}: mask size {seg['size']}"))
                area += e["area"]
            if "segments_info" in ann and area > manifest.width * manifest.height:
                out.append(Violation("annotation", ann["image_id"], f"{key}: segment areas exceed the image"))

    checked = [f for f in manifest.frames if {"semantic", "panoptic"} <= set(present.get(f.id, {}))]
    if sample is not None and sample < len(checked):
        pick = np.sort(derive_rng(seed, "validate").choice(len(checked), size=sample, replace=False))
        checked = [checked[i] for i in pick]
    for f in checked:
        sem = render.read_rgb(present[f.id]["semantic"])
        pan = render.read_gray(present[f.id]["panoptic"])
        if sem.shape[:2] != pan.shape:
            out.append(Violation("pixel-agreement", f.id, "panoptic and semantic images differ in size"))
            continue
        try:
            expected = annotate.build_panoptic_image(sem, tax)
        except annotate.ConversionError as exc:
            out.append(Violation("pixel-agreement", f.id, f"semantic image: {exc}"))
            continue
        bad = np.argwhere(expected != pan)
        for y, x in bad[:max_pixels_per_frame]:
            out.append(Violation("pixel-agreement", f.id,
                                 f"panoptic pixel (x={x}, y={y}) is {int(pan[y, x])}, semantic implies {int(expected[y, x])}"))
        if len(bad) > max_pixels_per_frame:
            out.append(Violation("pixel-agreement", f.id, f"{len(bad) - max_pixels_per_frame} more mismatched pixels"))
    return ValidationReport(out, len(checked))


# ---------------------------------------------------------------------------
# Preview


def colorize_panoptic(panoptic: np.ndarray, tax: taxmod.Taxonomy) -> np.ndarray:
    """Stuff ordinals painted with their category colors; things gray, void black."""
    lut = np.zeros((256, 3), np.uint8)
    for cat in tax.stuff:
        lut[annotate.stuff_ordinals(tax)[cat.index]] = cat.color
    lut[0] = (255, 255, 255)
    lut[annotate.VOID] = (0, 0, 0)
    return lut[np.asarray(panoptic, dtype=np.uint8)]


def preview(manifest, out_path, frame_ids: Optional[Sequence[int]] = None, max_frames: int = 4,
            scale: float = 0.25) -> Path:
    """Contact sheet with one row per frame: RGB, semantic, panoptic."""
    if not isinstance(manifest, DatasetManifest):
        manifest = load_manifest(manifest)
    tax = manifest.load_taxonomy()
    by_id = {f.id: f for f in manifest.frames}
    ids = list(frame_ids) if frame_ids is not None else [f.id for f in manifest.frames[:max_frames]]
    if not ids:
        raise PipelineError("no frames to preview")
    w = max(1, int(round(manifest.width * scale)))
    h = max(1, int(round(manifest.height * scale)))
    sheet = Image.new("RGB", (3 * w, h * len(ids)))
    for row, i in enumerate(ids):
        if i not in by_id:
            raise PipelineError(f"unknown frame id {i}")
        f = by_id[i]
        tiles = [render.read_rgb(manifest.path(f.rgb)), render.read_rgb(manifest.path(f.semantic))]
        if f.panoptic:
            tiles.append(colorize_panoptic(render.read_gray(manifest.path(f.panoptic)), tax))
        for col, tile in enumerate(tiles):
            im = Image.fromarray(tile).resize((w, h), Image.NEAREST)
            sheet.paste(im, (col * w, row * h))
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    sheet.save(out_path)
    return out_path
