"""Deterministic synthetic panoptic scenes with controllable prediction noise.

A scene is a stuff background (one base class plus rectangles/ellipses of
other stuff classes) with thing instances layered on top; later instances
occlude earlier ones. Predictions are the ground truth perturbed by

* ``jitter``: integer box shifts of up to this many pixels,
* ``conf_noise``: lowers confidences, blurs instance masks toward 0.5 and
  moves score mass away from the true class,
* ``drop_prob``: probability of losing an instance.

All random draws come from child streams of one ``SeedSequence`` and are made
whatever the noise level, so scaling the noise parameters with the seed held
fixed perturbs the same pixels and instances by proportionally smaller
amounts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tascseg.fusion import Segment, SegmentMap
from tascseg.masks import BBox, iou_box
from tascseg.ontology import Ontology
from tascseg.tasc import Instance, ScoreVolume

MAX_PLACEMENT_TRIES = 200
# Kept below the default box-NMS cutoff so clean predictions survive NMS.
MAX_BOX_IOU = 0.25


@dataclass(frozen=True)
class SceneSpec:
  seed: int = 0
  width: int = 64
  height: int = 64
  num_stuff_regions: int = 3
  num_instances: int = 4
  jitter: int = 0
  conf_noise: float = 0.0
  drop_prob: float = 0.0

  def __post_init__(self):
    if self.width < 8 or self.height < 8:
      raise ValueError('scene dimensions must be >= 8')
    if self.num_stuff_regions < 1 or self.num_instances < 0:
      raise ValueError('need at least one stuff region and a non-negative instance count')
    if self.jitter < 0:
      raise ValueError('jitter must be >= 0')
    for name in ('conf_noise', 'drop_prob'):
      if not 0.0 <= getattr(self, name) <= 1.0:
        raise ValueError(f'{name} must be in [0, 1]')

  def scaled(self, alpha: float) -> 'SceneSpec':
    """Same layout and draws with every noise parameter multiplied by alpha."""
    return SceneSpec(self.seed, self.width, self.height, self.num_stuff_regions,
                     self.num_instances, int(round(self.jitter * alpha)),
                     self.conf_noise * alpha, self.drop_prob * alpha)


@dataclass
class Scene:
  gt: SegmentMap
  gt_labels: np.ndarray
  instances: list[Instance]
  scores: ScoreVolume


def _shape_mask(kind: str, h: int, w: int) -> np.ndarray:
  if kind == 'rect':
    return np.ones((h, w), dtype=bool)
  yy = (np.arange(h) + 0.5 - h / 2) / (h / 2)
  xx = (np.arange(w) + 0.5 - w / 2) / (w / 2)
  return yy[:, None] ** 2 + xx[None, :] ** 2 <= 1.0


def _random_shape(rng, width, height, lo_frac, hi_frac):
  w = int(rng.integers(max(3, int(width * lo_frac)), max(4, int(width * hi_frac)) + 1))
  h = int(rng.integers(max(3, int(height * lo_frac)), max(4, int(height * hi_frac)) + 1))
  x0 = int(rng.integers(0, width - w + 1))
  y0 = int(rng.integers(0, height - h + 1))
  kind = 'rect' if rng.random() < 0.5 else 'ellipse'
  return x0, y0, w, h, kind


def generate_scene(spec: SceneSpec, o: Ontology) -> Scene:
  """Builds a ground-truth scene and noisy predictions for it.

  Raises:
    ValueError: if the ontology lacks the needed classes or the instances
      cannot be placed with pairwise box IoU <= 0.25.
  """
  stuff_ids = sorted(o.stuff_ids)
  thing_ids = sorted(o.thing_ids)
  if not stuff_ids:
    raise ValueError('ontology needs at least one stuff category')
  if spec.num_instances and not thing_ids:
    raise ValueError('ontology needs thing categories to place instances')
  layout_rng, score_rng, inst_rng = (
      np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(3))
  W, H = spec.width, spec.height

  stuff = np.full((H, W), stuff_ids[int(layout_rng.integers(len(stuff_ids)))], dtype=np.int64)
  for _ in range(spec.num_stuff_regions - 1):
    x0, y0, w, h, kind = _random_shape(layout_rng, W, H, 0.25, 0.6)
    cid = stuff_ids[int(layout_rng.integers(len(stuff_ids)))]
    region = stuff[y0:y0 + h, x0:x0 + w]
    region[_shape_mask(kind, h, w)] = cid

  placed = []
  for _ in range(spec.num_instances):
    for _ in range(MAX_PLACEMENT_TRIES):
      x0, y0, w, h, kind = _random_shape(layout_rng, W, H, 0.12, 0.35)
      box = BBox(x0, y0, x0 + w, y0 + h)
      if all(iou_box(box, p[0]) <= MAX_BOX_IOU for p in placed):
        break
    else:
      raise ValueError(f'cannot place {spec.num_instances} instances in a {W}x{H} scene')
    placed.append((box, kind, thing_ids[int(layout_rng.integers(len(thing_ids)))]))

  owner = np.zeros((H, W), dtype=np.int64)
  for k, (box, kind, _) in enumerate(placed):
    x0, y0, x1, y1 = (int(v) for v in box.as_list())
    region = owner[y0:y1, x0:x1]
    region[_shape_mask(kind, y1 - y0, x1 - x0)] = k + 1

  # Ground truth: visible instances first, then one segment per stuff class.
  ids = np.zeros((H, W), dtype=np.int64)
  labels = stuff.copy()
  segments = []
  visible = []
  for k, (box, kind, cid) in enumerate(placed):
    vis = owner == k + 1
    if not vis.any():
      continue
    seg_id = len(segments) + 1
    ids[vis] = seg_id
    labels[vis] = cid
    segments.append(Segment(seg_id, cid))
    visible.append((box, cid, vis))
  things_px = owner > 0
  for cid in stuff_ids:
    region = (stuff == cid) & ~things_px
    if region.any():
      seg_id = len(segments) + 1
      ids[region] = seg_id
      segments.append(Segment(seg_id, cid))
  gt = SegmentMap(ids, tuple(segments))

  instances = []
  for box, cid, vis in visible:
    u_drop, u_dx, u_dy, z_conf = inst_rng.random(4)
    x0, y0, x1, y1 = (int(v) for v in box.as_list())
    u_mask = inst_rng.random((y1 - y0, x1 - x0))
    if u_drop < spec.drop_prob:
      continue
    dx = int(np.rint(spec.jitter * (2.0 * u_dx - 1.0)))
    dy = int(np.rint(spec.jitter * (2.0 * u_dy - 1.0)))
    shifted = BBox(x0 + dx, y0 + dy, x1 + dx, y1 + dy)
    if not shifted.intersects_canvas(W, H):
      shifted = box
    local = vis[y0:y1, x0:x1]
    noise = spec.conf_noise * 0.5 * u_mask
    mask = np.where(local, 1.0 - noise, noise)
    conf = float(np.clip(1.0 - spec.conf_noise * z_conf, 0.0, 1.0))
    instances.append(Instance(shifted, cid, conf, mask))

  # Scores follow a separately jittered rendering of the same instances.
  pred_labels = stuff.copy()
  for box, cid, vis in visible:
    u_dx, u_dy = score_rng.random(2)
    dx = int(np.rint(spec.jitter * (2.0 * u_dx - 1.0)))
    dy = int(np.rint(spec.jitter * (2.0 * u_dy - 1.0)))
    rr, cc = np.nonzero(vis)
    rr, cc = rr + dy, cc + dx
    keep = (rr >= 0) & (rr < H) & (cc >= 0) & (cc < W)
    pred_labels[rr[keep], cc[keep]] = cid
  u = score_rng.random((H, W))
  num_classes = len(o)
  planes = np.zeros((num_classes, H, W))
  cat_ids = np.asarray(o.ids)
  order = np.argsort(cat_ids)
  true_plane = order[np.searchsorted(cat_ids[order], pred_labels)]
  if num_classes > 1:
    removed = spec.conf_noise * u
    planes[:] = (removed / (num_classes - 1))[None]
    np.put_along_axis(planes, true_plane[None], (1.0 - removed)[None], axis=0)
  else:
    planes[:] = 1.0
  return Scene(gt, labels, instances, ScoreVolume(planes))
