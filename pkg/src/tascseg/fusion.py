"""Inference post-processing: NMS and mask-guided panoptic fusion."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from tascseg.masks import check_hard, iou_box, rasterize, threshold
from tascseg.ontology import VOID_ID, Ontology
from tascseg.tasc import Instance, ScoreVolume, argmax_by_id, stuff_side_mask

UNION = 'union'
MAX_PAIRWISE = 'max_pairwise'
COVERAGE = 'coverage'
IOU = 'iou'


@dataclass(frozen=True)
class Segment:
  id: int
  category: int
  confidence: Optional[float] = None


@dataclass
class SegmentMap:
  """Per-pixel segment ids plus the table describing each segment.

  Id 0 is void and is never listed in ``segments``.
  """

  ids: np.ndarray
  segments: tuple[Segment, ...] = ()

  def __post_init__(self):
    self.ids = np.asarray(self.ids)
    if self.ids.ndim != 2 or min(self.ids.shape) < 1:
      raise ValueError(f'segment ids must be a non-empty 2-D array, got {self.ids.shape}')
    if self.ids.dtype.kind not in 'iu':
      raise ValueError('segment ids must be integers')
    self.ids = self.ids.astype(np.int64, copy=False)
    self.segments = tuple(self.segments)

  @property
  def height(self) -> int:
    return self.ids.shape[0]

  @property
  def width(self) -> int:
    return self.ids.shape[1]

  def validate(self, o: Optional[Ontology] = None):
    """Raises ``ValueError`` on any broken invariant."""
    listed = [s.id for s in self.segments]
    if len(set(listed)) != len(listed):
      raise ValueError('segment ids are not unique')
    if VOID_ID in listed:
      raise ValueError('void id 0 must not be listed as a segment')
    if self.ids.min() < 0:
      raise ValueError('negative segment id in raster')
    present = set(np.unique(self.ids).tolist()) - {VOID_ID}
    missing = present - set(listed)
    if missing:
      raise ValueError(f'raster ids without a segment record: {sorted(missing)}')
    for s in self.segments:
      if s.confidence is not None and not (0.0 <= s.confidence <= 1.0):
        raise ValueError(f'segment {s.id} confidence {s.confidence} outside [0, 1]')
      if o is not None and s.category not in o:
        raise ValueError(f'segment {s.id} has unknown category {s.category}')

  def category_of(self) -> dict[int, int]:
    return {s.id: s.category for s in self.segments}

  def labelmap(self) -> np.ndarray:
    """Per-pixel category ids (0 for void)."""
    lut_ids = np.array([VOID_ID] + [s.id for s in self.segments], dtype=np.int64)
    lut_cat = np.array([VOID_ID] + [s.category for s in self.segments], dtype=np.int64)
    order = np.argsort(lut_ids)
    pos = np.searchsorted(lut_ids[order], self.ids)
    return lut_cat[order][pos]

  def mask(self, segment_id: int) -> np.ndarray:
    return self.ids == segment_id


@dataclass(frozen=True)
class FusionConfig:
  overlap_max: float = 0.4
  mask_cover_min: float = 0.7
  box_nms_iou: float = 0.3
  mask_nms_iou: float = 0.3
  mask_threshold: float = 0.5
  overlap_mode: str = UNION
  guide_mode: str = COVERAGE

  def __post_init__(self):
    for name in ('overlap_max', 'mask_cover_min', 'box_nms_iou', 'mask_nms_iou', 'mask_threshold'):
      v = getattr(self, name)
      if not (math.isfinite(v) and 0.0 <= v <= 1.0):
        raise ValueError(f'{name} must be in [0, 1], got {v}')
    if self.overlap_mode not in (UNION, MAX_PAIRWISE):
      raise ValueError(f'unknown overlap_mode {self.overlap_mode!r}')
    if self.guide_mode not in (COVERAGE, IOU):
      raise ValueError(f'unknown guide_mode {self.guide_mode!r}')


@dataclass
class PanopticResult:
  segmap: SegmentMap
  # Indices into the fused instance list, in placement order.
  accepted: list[int] = field(default_factory=list)


def by_confidence(instances: Sequence[Instance]) -> list[int]:
  """Indices sorted by decreasing confidence; ties keep input order."""
  return sorted(range(len(instances)), key=lambda i: (-instances[i].confidence, i))


def box_nms(instances: Sequence[Instance], cfg: FusionConfig = FusionConfig()) -> list[Instance]:
  """Greedy per-class NMS on boxes.

  An instance is dropped when its box IoU with an already kept instance of
  the same class is above ``cfg.box_nms_iou``.
  """
  kept: list[Instance] = []
  for i in by_confidence(instances):
    inst = instances[i]
    if any(k.category == inst.category and iou_box(k.box, inst.box) > cfg.box_nms_iou
           for k in kept):
      continue
    kept.append(inst)
  return kept


def mask_nms(instances: Sequence[Instance], image_w: int, image_h: int,
             cfg: FusionConfig = FusionConfig()) -> list[Instance]:
  """Greedy class-agnostic NMS on rasterized instance masks."""
  kept: list[Instance] = []
  kept_masks: list[np.ndarray] = []
  kept_areas: list[int] = []
  for i in by_confidence(instances):
    inst = instances[i]
    m = rasterize(inst.mask, inst.box, image_w, image_h, cfg.mask_threshold)
    area = int(np.count_nonzero(m))
    suppressed = False
    for km, ka in zip(kept_masks, kept_areas):
      inter = int(np.count_nonzero(m & km))
      union = area + ka - inter
      if union > 0 and inter / union > cfg.mask_nms_iou:
        suppressed = True
        break
    if not suppressed:
      kept.append(inst)
      kept_masks.append(m)
      kept_areas.append(area)
  return kept


def semantic_argmax(scores: ScoreVolume, o: Ontology) -> np.ndarray:
  """Per-pixel category id of the highest score; ties go to the lowest id."""
  label, _ = argmax_by_id(scores, o)
  return label


def _iou_counts(inter: int, a: int, b: int) -> float:
  union = a + b - inter
  return inter / union if union else 0.0


def mask_guided_fuse(instances: Sequence[Instance], labelmap, guide, o: Ontology,
                     cfg: FusionConfig = FusionConfig()) -> PanopticResult:
  """Pastes instances over a stuff background, gated by overlap and guide mask.

  Instances are visited by decreasing confidence. One is accepted when

  (a) its IoU with the pixels already placed is zero or below
      ``cfg.overlap_max`` (with ``overlap_mode='max_pairwise'``: its largest
      IoU with any single accepted instance), and
  (b) its agreement with ``guide`` is at least ``cfg.mask_cover_min``, where
      agreement is the fraction of the instance inside the guide
      (``guide_mode='iou'`` uses plain IoU instead).

  An accepted instance claims its not-yet-claimed pixels. Remaining pixels
  labelled with a stuff category join that category's single segment; the
  rest are void.
  """
  labelmap = np.asarray(labelmap)
  guide = check_hard(guide)
  if labelmap.shape != guide.shape:
    raise ValueError(f'labelmap {labelmap.shape} and guide {guide.shape} differ in size')
  h, w = labelmap.shape
  guide_area = int(np.count_nonzero(guide))

  ids = np.zeros((h, w), dtype=np.int64)
  placed = np.zeros((h, w), dtype=bool)
  placed_area = 0
  accepted_masks: list[tuple[np.ndarray, int]] = []
  segments: list[Segment] = []
  accepted: list[int] = []

  for i in by_confidence(instances):
    inst = instances[i]
    m = rasterize(inst.mask, inst.box, w, h, cfg.mask_threshold)
    area = int(np.count_nonzero(m))
    if area == 0:
      continue

    if cfg.overlap_mode == UNION:
      overlap = _iou_counts(int(np.count_nonzero(m & placed)), area, placed_area)
    else:
      overlap = max((_iou_counts(int(np.count_nonzero(m & am)), area, aa)
                     for am, aa in accepted_masks), default=0.0)
    # Zero overlap always passes, so overlap_max=0 still keeps disjoint instances.
    if overlap > 0.0 and overlap >= cfg.overlap_max:
      continue

    in_guide = int(np.count_nonzero(m & guide))
    if cfg.guide_mode == COVERAGE:
      agreement = in_guide / area
    else:
      agreement = _iou_counts(in_guide, area, guide_area)
    if agreement < cfg.mask_cover_min:
      continue

    claim = m & ~placed
    seg_id = len(segments) + 1
    ids[claim] = seg_id
    segments.append(Segment(seg_id, inst.category, float(inst.confidence)))
    accepted.append(i)
    placed |= m
    placed_area = int(np.count_nonzero(placed))
    accepted_masks.append((m, area))

  next_id = len(segments) + 1
  free = ~placed
  for cid in sorted(o.stuff_ids):
    region = free & (labelmap == cid)
    if region.any():
      ids[region] = next_id
      segments.append(Segment(next_id, cid, None))
      next_id += 1
  return PanopticResult(SegmentMap(ids, tuple(segments)), accepted)


def segments_from_labelmap(labelmap, o: Ontology, start_id: int = 1) -> SegmentMap:
  """One segment per stuff category present, regardless of connectivity.

  Thing and void pixels become void.
  """
  labelmap = np.asarray(labelmap)
  ids = np.zeros(labelmap.shape, dtype=np.int64)
  segments = []
  next_id = start_id
  for cid in sorted(o.stuff_ids):
    region = labelmap == cid
    if region.any():
      ids[region] = next_id
      segments.append(Segment(next_id, cid, None))
      next_id += 1
  return SegmentMap(ids, tuple(segments))


def fuse_image(instances: Sequence[Instance], scores: ScoreVolume, o: Ontology,
               cfg: FusionConfig = FusionConfig(), guide_threshold: float = 0.5,
               score_ontology: Optional[Ontology] = None) -> PanopticResult:
  """Full inference chain for one image: box NMS, mask NMS, then fusion.

  The guide is the stuff-side things mask binarized at ``guide_threshold``.
  ``score_ontology`` describes the score planes when they use a different
  catalog than the instances (e.g. all things merged into one class).
  """
  so = score_ontology or o
  kept = box_nms(instances, cfg)
  kept = mask_nms(kept, scores.width, scores.height, cfg)
  guide = threshold(stuff_side_mask(scores, so), guide_threshold)
  labelmap = semantic_argmax(scores, so)
  return mask_guided_fuse(kept, labelmap, guide, so, cfg)
