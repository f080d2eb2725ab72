"""Segmentation metrics: PQ/SQ/RQ, mIoU and COCO-style AP.

Panoptic quality follows the standard definition:

- A ground-truth and a predicted segment match when they share a category
  and their IoU is strictly above 0.5. Such a match is necessarily unique.
- Unmatched predictions with more than half of their area on void pixels
  are ignored; the remaining ones are false positives. Unmatched
  ground-truth segments are false negatives.
- Per category, ``SQ = sum(IoU over TP) / TP``,
  ``RQ = TP / (TP + FP/2 + FN/2)`` and ``PQ = SQ * RQ``. A category with
  TP = 0 has SQ = 0.
- Means are taken over categories with at least one ground-truth or
  predicted (non-ignored) segment.

All reported values are percentages.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from synthpan.annotate import Segment, segments_to_category_map
from synthpan.taxonomy import UNLABELED, Taxonomy, image_to_categories

MATCH_IOU = 0.5
VOID_FRACTION = 0.5
AP_IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)
AP_RECALL_POINTS = np.linspace(0.0, 1.0, 101)
AP_MAX_DETS = 100


class MetricError(ValueError):
    pass


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks.

    Raises:
      MetricError: on a shape mismatch or when both masks are empty.
    """
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise MetricError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        raise MetricError("IoU of two empty masks is undefined")
    return np.count_nonzero(a & b) / union


def box_iou(a: Sequence[float], b: Sequence[float]) -> float:
    """IoU of two ``(x, y, w, h)`` boxes."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def _label_map(segments: Sequence[Segment], shape: Tuple[int, int], what: str) -> np.ndarray:
    label = np.full(shape, -1, dtype=np.int64)
    for k, s in enumerate(segments):
        if s.mask.shape != shape:
            raise MetricError(f"{what} segment {k} has shape {s.mask.shape}, expected {shape}")
        if (label[s.mask] >= 0).any():
            raise MetricError(f"{what} segments overlap (segment {k})")
        label[s.mask] = k
    return label


def overlap_matrix(gt: Sequence[Segment], pred: Sequence[Segment], shape: Tuple[int, int]) -> np.ndarray:
    """(len(gt), len(pred)) pixel intersection counts of disjoint segment sets."""
    g = _label_map(gt, shape, "ground-truth")
    p = _label_map(pred, shape, "predicted")
    sel = (g >= 0) & (p >= 0)
    inter = np.zeros((len(gt), len(pred)), dtype=np.int64)
    np.add.at(inter, (g[sel], p[sel]), 1)
    return inter


@dataclass
class CategoryMatches:
    tp: List[Tuple[int, int, float]] = field(default_factory=list)
    fp: List[int] = field(default_factory=list)
    fn: List[int] = field(default_factory=list)
    ignored: List[int] = field(default_factory=list)


@dataclass
class MatchResult:
    """Per-category TP pairs ``(gt index, pred index, IoU)``, FP and FN indices."""

    gt: Sequence[Segment]
    pred: Sequence[Segment]
    categories: Dict[int, CategoryMatches] = field(default_factory=dict)

    def get(self, category: int) -> CategoryMatches:
        return self.categories.setdefault(category, CategoryMatches())


def match_segments(gt: Sequence[Segment], pred: Sequence[Segment],
                   void_mask: Optional[np.ndarray] = None, shape: Optional[Tuple[int, int]] = None) -> MatchResult:
    """Match predicted to ground-truth segments of one image.

    Args:
      gt, pred: pairwise-disjoint segments.
      void_mask: pixels that count as void. Defaults to every pixel not
        covered by a ground-truth segment.
      shape: image shape; needed only when both lists are empty and no void
        mask is given.

    Raises:
      MetricError: overlapping segments within gt or within pred, or shape
        mismatches.
    """
    if shape is None:
        for src in (gt, pred):
            if src:
                shape = src[0].mask.shape
                break
        else:
            shape = void_mask.shape if void_mask is not None else (0, 0)
    shape = tuple(shape)
    inter = overlap_matrix(gt, pred, shape)
    if void_mask is None:
        void_mask = np.ones(shape, dtype=bool)
        for s in gt:
            void_mask &= ~s.mask
    void_mask = np.asarray(void_mask, dtype=bool)
    if void_mask.shape != shape:
        raise MetricError("void mask shape does not match the segments")

    result = MatchResult(gt, pred)
    gt_matched = np.zeros(len(gt), dtype=bool)
    pred_matched = np.zeros(len(pred), dtype=bool)
    for gi, g in enumerate(gt):
        for pi in np.flatnonzero(inter[gi]):
            p = pred[pi]
            if p.category != g.category:
                continue
            i = inter[gi, pi]
            value = i / (g.area + p.area - i)
            if value > MATCH_IOU:
                if gt_matched[gi] or pred_matched[pi]:
                    raise AssertionError("segment matched twice; IoU > 0.5 matching must be unique")
                gt_matched[gi] = pred_matched[pi] = True
                result.get(g.category).tp.append((gi, int(pi), float(value)))
    for gi, g in enumerate(gt):
        if not gt_matched[gi]:
            result.get(g.category).fn.append(gi)
    for pi, p in enumerate(pred):
        if pred_matched[pi]:
            continue
        on_void = np.count_nonzero(p.mask & void_mask)
        if on_void / p.area > VOID_FRACTION:
            result.get(p.category).ignored.append(pi)
        else:
            result.get(p.category).fp.append(pi)
    return result


@dataclass
class PQStat:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    iou_sum: float = 0.0

    @property
    def counted(self) -> bool:
        return self.tp + self.fp + self.fn > 0

    def sq(self) -> float:
        return self.iou_sum / self.tp if self.tp else 0.0

    def rq(self) -> float:
        denom = self.tp + 0.5 * self.fp + 0.5 * self.fn
        return self.tp / denom if denom else 0.0

    def pq(self) -> float:
        return self.sq() * self.rq()


@dataclass
class PQResult:
    """PQ/SQ/RQ per category and averaged, in percent."""

    per_category: Dict[int, Dict[str, float]]
    pq: float
    sq: float
    rq: float
    n_categories: int


def accumulate_pq(matches: Iterable[MatchResult]) -> Dict[int, PQStat]:
    stats: Dict[int, PQStat] = {}
    for m in matches:
        for cat, cm in m.categories.items():
            st = stats.setdefault(cat, PQStat())
            st.tp += len(cm.tp)
            st.fp += len(cm.fp)
            st.fn += len(cm.fn)
            st.iou_sum += math.fsum(v for _, _, v in cm.tp)
    return stats


def panoptic_quality(matches: Iterable[MatchResult], categories: Optional[Iterable[int]] = None) -> PQResult:
    """Aggregate matches over images into PQ, SQ and RQ.

    Args:
      matches: one MatchResult per image.
      categories: restrict the means to these category indices (e.g. only
        things). Per-category values are always reported for every counted
        category.
    """
    stats = accumulate_pq(matches)
    per = {}
    for cat in sorted(stats):
        st = stats[cat]
        if not st.counted:
            continue
        per[cat] = {"pq": 100.0 * st.pq(), "sq": 100.0 * st.sq(), "rq": 100.0 * st.rq(),
                    "tp": st.tp, "fp": st.fp, "fn": st.fn}
    keep = list(per) if categories is None else [c for c in per if c in set(categories)]
    if not keep:
        return PQResult(per, 0.0, 0.0, 0.0, 0)
    mean = lambda key: math.fsum(per[c][key] for c in keep) / len(keep)
    return PQResult(per, mean("pq"), mean("sq"), mean("rq"), len(keep))


# ---------------------------------------------------------------------------
# mIoU


@dataclass
class IoUResult:
    per_category: Dict[int, float]
    miou: float
    confusion: np.ndarray


def _as_category_map(image: np.ndarray, taxonomy: Taxonomy) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim == 3:
        return image_to_categories(taxonomy, image)
    return image.astype(np.int64)


def confusion_matrix(gt: np.ndarray, pred: np.ndarray, n: int) -> np.ndarray:
    """(n, n + 1) pixel counts; rows gt category, last column = unlabeled prediction.

    Unlabeled ground-truth pixels are skipped.
    """
    gt = np.asarray(gt).ravel()
    pred = np.asarray(pred).ravel()
    sel = (gt >= 0) & (gt < n)
    p = pred[sel]
    p = np.where((p >= 0) & (p < n), p, n)
    return np.bincount(gt[sel] * (n + 1) + p, minlength=n * (n + 1)).reshape(n, n + 1)


def mean_iou(gt: Sequence[np.ndarray], pred: Sequence[np.ndarray], taxonomy: Taxonomy) -> IoUResult:
    """Per-category IoU over the aggregated pixel confusion, and their mean.

    Images may be (H, W, 3) semantic images or (H, W) category-index maps
    (``UNLABELED`` = -1). Ground-truth unlabeled pixels are excluded; the
    mean runs over categories present in the ground truth.
    """
    if len(gt) != len(pred):
        raise MetricError("gt and pred image lists differ in length")
    n = len(taxonomy)
    cm = np.zeros((n, n + 1), dtype=np.int64)
    for g, p in zip(gt, pred):
        gc, pc = _as_category_map(g, taxonomy), _as_category_map(p, taxonomy)
        if gc.shape != pc.shape:
            raise MetricError(f"image shapes differ: {gc.shape} vs {pc.shape}")
        cm += confusion_matrix(gc, pc, n)
    tp = np.diag(cm[:, :n])
    gt_count = cm.sum(axis=1)
    pred_count = cm[:, :n].sum(axis=0)
    union = gt_count + pred_count - tp
    per = {c: 100.0 * tp[c] / union[c] for c in range(n) if union[c] > 0}
    present = [c for c in range(n) if gt_count[c] > 0]
    miou = math.fsum(per[c] for c in present) / len(present) if present else 0.0
    return IoUResult(per, miou, cm)


# ---------------------------------------------------------------------------
# Average precision


@dataclass
class APResult:
    ap: float
    per_category: Dict[int, float]
    table: np.ndarray  # (thresholds, categories), -1 where a category has no gt
    categories: List[int]


def _greedy_match(ious: np.ndarray, threshold: float) -> np.ndarray:
    """Score-ordered greedy matching; returns the matched gt per detection or -1."""
    n_det, n_gt = ious.shape
    taken = np.zeros(n_gt, dtype=bool)
    out = np.full(n_det, -1, dtype=np.int64)
    for d in range(n_det):
        best, m = min(threshold, 1 - 1e-10), -1
        for g in range(n_gt):
            if taken[g] or ious[d, g] < best:
                continue
            best, m = ious[d, g], g
        if m >= 0:
            taken[m] = True
            out[d] = m
    return out


def _pairwise_iou(dets: Sequence[Segment], gts: Sequence[Segment], mode: str) -> np.ndarray:
    out = np.zeros((len(dets), len(gts)))
    for i, d in enumerate(dets):
        for j, g in enumerate(gts):
            if mode == "bbox":
                out[i, j] = box_iou(d.bbox, g.bbox)
            else:
                inter = np.count_nonzero(d.mask & g.mask)
                out[i, j] = inter / (d.area + g.area - inter)
    return out


def average_precision(gt: Sequence[Sequence[Segment]], pred: Sequence[Sequence[Segment]], mode: str = "seg",
                      categories: Optional[Iterable[int]] = None, max_dets: int = AP_MAX_DETS) -> APResult:
    """COCO-style AP averaged over IoU thresholds 0.50:0.05:0.95 and categories.

    Per image and category, detections are sorted by descending score (ties
    keep input order), truncated to ``max_dets`` and greedily matched to the
    unmatched ground truth of highest IoU at or above each threshold.
    Precision is made monotone and sampled at 101 recall points. Categories
    without ground truth are left out of the mean; with no ground truth at
    all AP is 0.

    Args:
      gt, pred: per-image segment lists, aligned by position. Predictions
        without a score count as score 1.0.
      mode: ``"bbox"`` or ``"seg"``.
      categories: category indices to evaluate; defaults to all categories
        present in ``gt`` or ``pred`` that have instance ordinals (things).
    """
    if mode not in ("bbox", "seg"):
        raise ValueError("mode must be 'bbox' or 'seg'")
    if len(gt) != len(pred):
        raise MetricError("gt and pred image lists differ in length")
    if categories is None:
        cats = sorted({s.category for img in (*gt, *pred) for s in img if s.isthing})
    else:
        cats = sorted(set(categories))
    n_t = len(AP_IOU_THRESHOLDS)
    table = -np.ones((n_t, len(cats)))
    for k, cat in enumerate(cats):
        scores: List[float] = []
        matched: List[np.ndarray] = []
        n_gt = 0
        for g_img, p_img in zip(gt, pred):
            gts = [s for s in g_img if s.category == cat]
            dets = [s for s in p_img if s.category == cat]
            dscore = np.array([1.0 if s.score is None else float(s.score) for s in dets])
            order = np.argsort(-dscore, kind="mergesort")[:max_dets]
            dets = [dets[i] for i in order]
            n_gt += len(gts)
            ious = _pairwise_iou(dets, gts, mode)
            scores.extend(dscore[order].tolist())
            matched.append(np.stack([_greedy_match(ious, t) >= 0 for t in AP_IOU_THRESHOLDS], axis=0)
                           if dets else np.zeros((n_t, 0), dtype=bool))
        if n_gt == 0:
            continue
        hits = np.concatenate(matched, axis=1)
        order = np.argsort(-np.asarray(scores), kind="mergesort")
        hits = hits[:, order]
        for t in range(n_t):
            tp = np.cumsum(hits[t])
            fp = np.cumsum(~hits[t])
            recall = tp / n_gt
            precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
            precision = np.maximum.accumulate(precision[::-1])[::-1] if len(precision) else precision
            idx = np.searchsorted(recall, AP_RECALL_POINTS, side="left")
            q = np.zeros(len(AP_RECALL_POINTS))
            ok = idx < len(precision)
            q[ok] = precision[idx[ok]]
            table[t, k] = q.mean()
    valid = table > -1
    ap = 100.0 * table[valid].mean() if valid.any() else 0.0
    per = {cat: 100.0 * table[valid[:, k], k].mean() for k, cat in enumerate(cats) if valid[:, k].any()}
    return APResult(ap, per, table, cats)


# ---------------------------------------------------------------------------
# Full report


@dataclass
class MetricReport:
    pq: float
    sq: float
    rq: float
    pq_things: float
    pq_stuff: float
    miou: float
    ap_bbox: float
    ap_seg: float
    n_images: int
    n_gt_segments: int
    n_pred_segments: int
    per_category: Dict[str, Dict[str, float]]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def table(self) -> str:
        """Human-readable summary with one row per headline metric."""
        rows = [("Panoptic Quality [PQ]", self.pq), ("Segmentation Quality [SQ]", self.sq),
                ("Recognition Quality [RQ]", self.rq), ("Average Precision Bounding Box [AP (bbox)]", self.ap_bbox),
                ("Average Precision Segmentation [AP (seg)]", self.ap_seg),
                ("Mean Intersection over Union [mIoU]", self.miou)]
        width = max(len(r[0]) for r in rows)
        lines = [f"{name:<{width}}  {value:6.2f}" for name, value in rows]
        lines.append(f"{'images / gt segments / predicted segments':<{width}}  "
                     f"{self.n_images} / {self.n_gt_segments} / {self.n_pred_segments}")
        return "\n".join(lines)


def evaluate(gt: Sequence[Sequence[Segment]], pred: Sequence[Sequence[Segment]], taxonomy: Taxonomy,
             shapes: Sequence[Tuple[int, int]]) -> MetricReport:
    """All metrics for aligned per-image gt and prediction segment lists.

    Void for PQ is the set of pixels no ground-truth segment covers. mIoU is
    computed on the category maps painted from the segments.
    """
    if not (len(gt) == len(pred) == len(shapes)):
        raise MetricError("gt, pred and shapes must have one entry per image")
    matches = [match_segments(g, p, shape=s) for g, p, s in zip(gt, pred, shapes)]
    pq_all = panoptic_quality(matches)
    pq_th = panoptic_quality(matches, [c.index for c in taxonomy.things])
    pq_st = panoptic_quality(matches, [c.index for c in taxonomy.stuff])
    gmaps = [segments_to_category_map(g, s) for g, s in zip(gt, shapes)]
    pmaps = [segments_to_category_map(p, s) for p, s in zip(pred, shapes)]
    ious = mean_iou(gmaps, pmaps, taxonomy)
    things = [c.index for c in taxonomy.things]
    ap_b = average_precision(gt, pred, "bbox", categories=things)
    ap_s = average_precision(gt, pred, "seg", categories=things)
    per: Dict[str, Dict[str, float]] = {}
    for c, v in pq_all.per_category.items():
        per.setdefault(taxonomy[c].name, {}).update(v)
    for c, v in ious.per_category.items():
        per.setdefault(taxonomy[c].name, {})["iou"] = v
    for c, v in ap_s.per_category.items():
        per.setdefault(taxonomy[c].name, {})["ap_seg"] = v
    for c, v in ap_b.per_category.items():
        per.setdefault(taxonomy[c].name, {})["ap_bbox"] = v
    return MetricReport(
        pq=pq_all.pq, sq=pq_all.sq, rq=pq_all.rq, pq_things=pq_th.pq, pq_stuff=pq_st.pq, miou=ious.miou,
        ap_bbox=ap_b.ap, ap_seg=ap_s.ap, n_images=len(gt),
        n_gt_segments=sum(len(g) for g in gt), n_pred_segments=sum(len(p) for p in pred),
        per_category=per)
