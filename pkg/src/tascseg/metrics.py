"""Panoptic quality (PQ/SQ/RQ), semantic mIoU and mask AP.

Conventions shared by every metric here:

* category id 0 is void; ground-truth void pixels never count against a
  prediction;
* a prediction matches a ground-truth segment of the same category when
  their IoU is strictly above 0.5 (PQ) or at least the AP threshold (AP);
* category means only include categories that appear in the ground truth
  or in the prediction (PQ) or in the ground truth (mIoU, AP).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from tascseg.fusion import Segment, SegmentMap
from tascseg.masks import rasterize
from tascseg.ontology import VOID_ID, Category, Ontology
from tascseg.tasc import Instance

PQ_MATCH_IOU = 0.5
AP_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class CategoryMatch:
  tp: list[tuple[int, int, float]] = field(default_factory=list)
  fp: list[int] = field(default_factory=list)
  fn: list[int] = field(default_factory=list)

  def normalized(self) -> 'CategoryMatch':
    return CategoryMatch(sorted(self.tp), sorted(self.fp), sorted(self.fn))


@dataclass
class MatchResult:
  """TP pairs ``(pred_id, gt_id, iou)``, FP pred ids and FN gt ids per category."""

  per_category: dict[int, CategoryMatch] = field(default_factory=dict)

  def category(self, cid: int) -> CategoryMatch:
    return self.per_category.setdefault(cid, CategoryMatch())

  def normalized(self) -> 'MatchResult':
    return MatchResult({
        cid: m.normalized() for cid, m in sorted(self.per_category.items())
        if m.tp or m.fp or m.fn
    })

  def __eq__(self, other) -> bool:
    if not isinstance(other, MatchResult):
      return NotImplemented
    return self.normalized().per_category == other.normalized().per_category


def _segment_table(segmap: SegmentMap, o: Ontology) -> dict[int, int]:
  table = {}
  for s in segmap.segments:
    if s.category not in o:
      raise ValueError(f'segment {s.id} has category {s.category} outside the ontology')
    table[s.id] = s.category
  return table


def _ids_to_counts(arr: np.ndarray) -> dict[int, int]:
  ids, n = np.unique(arr, return_counts=True)
  return dict(zip(ids.tolist(), n.tolist()))


def match_segments(pred: SegmentMap, gt: SegmentMap, o: Ontology) -> MatchResult:
  """Matches predicted to ground-truth segments for one image.

  All (gt, pred) overlaps are counted in one pass over the pixels by
  encoding each pixel's pair of ids as a single integer.

  Ground-truth void pixels are removed from the union. A predicted segment
  left unmatched is not a false positive when more than half of it lies on
  ground-truth void.
  """
  if pred.ids.shape != gt.ids.shape:
    raise ValueError(f'prediction {pred.ids.shape} and ground truth {gt.ids.shape} differ in size')
  pred_cat = _segment_table(pred, o)
  gt_cat = _segment_table(gt, o)

  offset = int(pred.ids.max()) + 1
  pair_counts = _ids_to_counts(gt.ids * offset + pred.ids)
  gt_area = _ids_to_counts(gt.ids)
  pred_area = _ids_to_counts(pred.ids)

  def on_void(pred_id):
    return pair_counts.get(VOID_ID * offset + pred_id, 0)

  result = MatchResult()
  gt_matched, pred_matched = set(), set()
  for key, inter in pair_counts.items():
    gt_id, pred_id = divmod(key, offset)
    if gt_id == VOID_ID or pred_id == VOID_ID:
      continue
    cat = gt_cat.get(gt_id)
    if cat is None or pred_cat.get(pred_id) != cat:
      continue
    union = gt_area[gt_id] + pred_area[pred_id] - inter - on_void(pred_id)
    iou = inter / union
    if iou > PQ_MATCH_IOU:
      result.category(cat).tp.append((pred_id, gt_id, iou))
      gt_matched.add(gt_id)
      pred_matched.add(pred_id)

  for gt_id, cat in gt_cat.items():
    if gt_area.get(gt_id, 0) and gt_id not in gt_matched:
      result.category(cat).fn.append(gt_id)
  for pred_id, cat in pred_cat.items():
    area = pred_area.get(pred_id, 0)
    if not area or pred_id in pred_matched:
      continue
    if on_void(pred_id) / area > 0.5:
      continue
    result.category(cat).fp.append(pred_id)
  return result.normalized()


@dataclass
class PQStats:
  """Additive per-category counts. Merging is order independent."""

  tp: int = 0
  fp: int = 0
  fn: int = 0
  ious: list[float] = field(default_factory=list)

  def merge(self, other: 'PQStats') -> 'PQStats':
    return PQStats(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
                   self.ious + other.ious)

  @property
  def present(self) -> bool:
    return self.tp + self.fp + self.fn > 0

  def values(self) -> tuple[float, float, float]:
    """Returns ``(pq, sq, rq)``; zeros for an absent category."""
    if not self.present:
      return 0.0, 0.0, 0.0
    # fsum is correctly rounded, so the result does not depend on merge order.
    iou_sum = math.fsum(self.ious)
    denom = self.tp + 0.5 * self.fp + 0.5 * self.fn
    pq = iou_sum / denom
    sq = iou_sum / self.tp if self.tp else 0.0
    rq = self.tp / denom
    return pq, sq, rq


@dataclass
class ClassRow:
  id: int
  name: str
  is_thing: bool
  pq: float
  sq: float
  rq: float
  tp: int
  fp: int
  fn: int
  iou: Optional[float] = None


@dataclass
class AggregateRow:
  name: str
  pq: float
  sq: float
  rq: float
  n: int
  iou: Optional[float] = None


@dataclass
class PQReport:
  classes: list[ClassRow]
  aggregates: dict[str, AggregateRow]
  ap: Optional[float] = None
  ap50: Optional[float] = None

  def row(self, category_id: int) -> ClassRow:
    for r in self.classes:
      if r.id == category_id:
        return r
    raise KeyError(category_id)

  def to_dict(self) -> dict:
    def clean(d):
      return {k: v for k, v in d.items() if v is not None}

    out = {
        'classes': [clean(vars(r)) for r in self.classes],
        'aggregates': [clean(vars(a)) for a in self.aggregates.values()],
    }
    if self.ap is not None:
      # AP is undefined (nan) without thing ground truth; JSON gets null.
      out['ap'] = None if math.isnan(self.ap) else self.ap
      out['ap50'] = None if math.isnan(self.ap50) else self.ap50
    return out


def accumulate_pq(matches: Iterable[MatchResult]) -> dict[int, PQStats]:
  stats: dict[int, PQStats] = {}
  for m in matches:
    for cid, cm in m.per_category.items():
      s = PQStats(len(cm.tp), len(cm.fp), len(cm.fn), [t[2] for t in cm.tp])
      stats[cid] = stats[cid].merge(s) if cid in stats else s
  return stats


def _mean(xs: Sequence[float]) -> float:
  return math.fsum(xs) / len(xs) if xs else 0.0


def report_from_stats(stats: dict[int, PQStats], o: Ontology,
                      miou: Optional[dict[int, float]] = None) -> PQReport:
  rows = []
  for c in sorted(o.categories, key=lambda c: c.id):
    s = stats.get(c.id)
    if s is None or not s.present:
      continue
    pq, sq, rq = s.values()
    rows.append(ClassRow(c.id, c.name, c.is_thing, pq, sq, rq, s.tp, s.fp, s.fn,
                         None if miou is None else miou.get(c.id)))

  aggregates = {}
  for name, keep in (('all', lambda r: True), ('things', lambda r: r.is_thing),
                     ('stuff', lambda r: not r.is_thing)):
    sel = [r for r in rows if keep(r)]
    agg = AggregateRow(name, _mean([r.pq for r in sel]), _mean([r.sq for r in sel]),
                       _mean([r.rq for r in sel]), len(sel))
    if miou is not None and name == 'all':
      agg.iou = _mean(list(miou.values()))
    aggregates[name] = agg
  return PQReport(rows, aggregates)


def compute_pq(matches: Union[MatchResult, Iterable[MatchResult]], o: Ontology) -> PQReport:
  """Per-category and averaged PQ, SQ and RQ.

  ``PQ = sum(IoU over TP) / (|TP| + |FP|/2 + |FN|/2)``, ``SQ`` is the mean
  IoU of the TP pairs and ``RQ = |TP| / (|TP| + |FP|/2 + |FN|/2)``.
  Several images are pooled by summing their counts before dividing.
  """
  if isinstance(matches, MatchResult):
    matches = [matches]
  return report_from_stats(accumulate_pq(matches), o)


class ConfusionCounter:
  """Pixel confusion counts for semantic IoU, accumulated over images."""

  def __init__(self, o: Ontology):
    self.ontology = o
    self.ids = np.asarray(sorted(o.ids))
    k = len(self.ids)
    # Row: gt index, column: pred index; the extra last column is "other".
    self.counts = np.zeros((k, k + 1), dtype=np.int64)

  def add(self, pred, gt):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
      raise ValueError(f'prediction {pred.shape} and ground truth {gt.shape} differ in size')
    k = len(self.ids)
    valid = gt != VOID_ID
    gi = np.searchsorted(self.ids, gt[valid])
    pv = pred[valid]
    pi = np.searchsorted(self.ids, pv)
    pi = np.where((pi < k) & (self.ids[np.minimum(pi, k - 1)] == pv), pi, k)
    if np.any((gi >= k) | (self.ids[np.minimum(gi, k - 1)] != gt[valid])):
      raise ValueError('ground truth contains categories outside the ontology')
    np.add.at(self.counts, (gi, pi), 1)
    return self

  def merge(self, other: 'ConfusionCounter') -> 'ConfusionCounter':
    out = ConfusionCounter(self.ontology)
    out.counts = self.counts + other.counts
    return out

  def per_class_iou(self) -> dict[int, float]:
    k = len(self.ids)
    square = self.counts[:, :k]
    tp = np.diag(square)
    gt_total = self.counts.sum(axis=1)
    pred_total = square.sum(axis=0)
    out = {}
    for i, cid in enumerate(self.ids.tolist()):
      if gt_total[i] == 0:
        continue
      out[cid] = int(tp[i]) / int(gt_total[i] + pred_total[i] - tp[i])
    return out


def compute_miou(pred, gt, o: Ontology) -> tuple[dict[int, float], float]:
  """Semantic IoU per category and its mean over categories present in GT.

  ``pred`` and ``gt`` are label maps, or equal-length lists of label maps that
  are pooled into one confusion matrix.
  """
  counter = ConfusionCounter(o)
  if isinstance(pred, np.ndarray) and pred.ndim == 2:
    pred, gt = [pred], [gt]
  if len(pred) != len(gt):
    raise ValueError('prediction and ground-truth lists differ in length')
  for p, g in zip(pred, gt):
    counter.add(p, g)
  per_class = counter.per_class_iou()
  return per_class, _mean(list(per_class.values()))


def interpolated_ap(recall: np.ndarray, precision: np.ndarray) -> float:
  """Area under the 101-point interpolated precision-recall curve.

  ``recall`` must be non-decreasing. Precision at recall level ``r`` is the
  best precision reached at any recall >= ``r``; unreachable levels score 0.
  """
  if len(recall) == 0:
    return 0.0
  envelope = np.maximum.accumulate(np.asarray(precision, dtype=np.float64)[::-1])[::-1]
  idx = np.searchsorted(recall, RECALL_POINTS, side='left')
  sampled = np.where(idx < len(recall), envelope[np.minimum(idx, len(recall) - 1)], 0.0)
  return float(np.mean(sampled))


@dataclass
class APResult:
  ap: float
  ap50: float
  # (category id, threshold) -> AP
  table: dict[tuple[int, float], float]


def _gt_instances(segmap: SegmentMap, o: Ontology, cid: int) -> list[np.ndarray]:
  return [segmap.mask(s.id) for s in segmap.segments
          if s.category == cid and np.any(segmap.ids == s.id)]


def compute_mask_ap(preds: Sequence[tuple[Instance, str]],
                    gts: Sequence[tuple[SegmentMap, str]], o: Ontology) -> APResult:
  """Mask AP averaged over thing categories and IoU thresholds 0.50:0.05:0.95.

  Predictions of a category are visited by decreasing confidence (ties keep
  input order); each takes the unmatched ground-truth instance of the same
  category and image with the highest IoU, if that IoU reaches the threshold.
  Categories without ground-truth instances are skipped. ``nan`` is returned
  when no category qualifies.
  """
  gt_by_image: dict[str, SegmentMap] = {}
  for segmap, image_id in gts:
    if image_id in gt_by_image:
      raise ValueError(f'duplicate ground-truth image id {image_id!r}')
    gt_by_image[image_id] = segmap
  for _, image_id in preds:
    if image_id not in gt_by_image:
      raise KeyError(f'prediction refers to unknown image id {image_id!r}')

  table = {}
  for cid in sorted(o.thing_ids):
    gt_masks = {img: _gt_instances(sm, o, cid) for img, sm in gt_by_image.items()}
    npos = sum(len(v) for v in gt_masks.values())
    if npos == 0:
      continue
    cand = [(inst, img, k) for k, (inst, img) in enumerate(preds) if inst.category == cid]
    cand.sort(key=lambda t: (-t[0].confidence, t[2]))
    # IoU of every candidate against every GT instance of its image.
    ious = []
    for inst, img, _ in cand:
      sm = gt_by_image[img]
      m = rasterize(inst.mask, inst.box, sm.width, sm.height)
      area = int(np.count_nonzero(m))
      row = []
      for g in gt_masks[img]:
        inter = int(np.count_nonzero(m & g))
        union = area + int(np.count_nonzero(g)) - inter
        row.append(inter / union if union else 0.0)
      ious.append(row)

    for t in AP_THRESHOLDS:
      taken = {img: [False] * len(v) for img, v in gt_masks.items()}
      hits = np.zeros(len(cand))
      for n, ((_, img, _), row) in enumerate(zip(cand, ious)):
        best, best_j = -1.0, -1
        for j, v in enumerate(row):
          if not taken[img][j] and v >= t and v > best:
            best, best_j = v, j
        if best_j >= 0:
          taken[img][best_j] = True
          hits[n] = 1.0
      tp = np.cumsum(hits)
      fp = np.cumsum(1.0 - hits)
      recall = tp / npos
      precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
      table[(cid, t)] = interpolated_ap(recall, precision)

  if not table:
    return APResult(float('nan'), float('nan'), table)
  ap = _mean(list(table.values()))
  ap50 = _mean([v for (c, t), v in table.items() if t == AP_THRESHOLDS[0]])
  return APResult(ap, ap50, table)


def stuff_bias_probe(fraction: float, side: int = 100) -> float:
  """PQ of a single stuff class when only ``fraction`` of it is predicted.

  The ground truth is one stuff segment covering a ``side x side`` image. The
  prediction labels the first ``round(fraction * side**2)`` pixels (row-major)
  with that class and leaves the rest void, so the segment IoU equals the
  fraction.
  """
  if not 0.0 <= fraction <= 1.0:
    raise ValueError(f'fraction must be in [0, 1], got {fraction}')
  o = Ontology((Category(1, 'stuff', False), Category(2, 'thing', True)))
  n = side * side
  gt = SegmentMap(np.ones((side, side), dtype=np.int64), (Segment(1, 1),))
  flat = np.zeros(n, dtype=np.int64)
  flat[:int(round(fraction * n))] = 1
  segs = (Segment(1, 1),) if flat.any() else ()
  pred = SegmentMap(flat.reshape(side, side), segs)
  report = compute_pq(match_segments(pred, gt, o), o)
  return report.row(1).pq
