"""Things/stuff consistency masks and the residual between them.

Two confidence masks describe which pixels are "things":

* the stuff side comes from dense per-pixel class scores
  (:func:`stuff_side_mask`);
* the things side re-assembles per-RoI instance masks on the image canvas
  (:func:`roi_flatten`).

Their mean squared difference, scaled by ``lam``, is the consistency
residual. :func:`roi_flatten` has a soft mode that replaces the 0.5 cutoff
with a logistic so that the residual is differentiable in the local mask
values; :func:`roi_flatten_soft_grad` returns those derivatives exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from tascseg.masks import BBox, bilinear_resize, check_soft, interp_matrix, paste_window
from tascseg.ontology import Ontology

HARD = 'hard'
SOFT = 'soft'

# Per-pixel class scores must sum to one up to float32 storage error.
NORMALIZATION_TOL = 1e-4


@dataclass
class ScoreVolume:
  """Normalized class scores, ``data[k, row, col]``.

  Plane ``k`` holds the score of the ``k``-th category of the ontology the
  volume is paired with (ontology order, not id order).
  """

  data: np.ndarray

  def __post_init__(self):
    self.data = np.asarray(self.data, dtype=np.float64)
    if self.data.ndim != 3 or min(self.data.shape) < 1:
      raise ValueError(f'score volume must be (classes, height, width), got {self.data.shape}')

  @property
  def num_classes(self) -> int:
    return self.data.shape[0]

  @property
  def height(self) -> int:
    return self.data.shape[1]

  @property
  def width(self) -> int:
    return self.data.shape[2]

  def validate(self, tol: float = NORMALIZATION_TOL):
    d = self.data
    if not np.all(np.isfinite(d)) or d.min() < 0.0 or d.max() > 1.0:
      raise ValueError('scores must lie in [0, 1]')
    if np.abs(d.sum(axis=0) - 1.0).max() > tol:
      raise ValueError('scores must sum to 1 at every pixel')


@dataclass
class Instance:
  """One detection: image-space box, class, confidence and local soft mask.

  ``mask`` is the foreground channel for ``assigned_category``. When the mask
  head output for several classes is available, pass it as ``class_masks``
  and the channel is picked by ``assigned_category``.
  """

  box: BBox
  category: int
  confidence: float
  mask: np.ndarray
  assigned_category: Optional[int] = None
  class_masks: Optional[Mapping[int, np.ndarray]] = field(default=None, repr=False)

  def __post_init__(self):
    if self.assigned_category is None:
      self.assigned_category = self.category
    self.mask = check_soft(self.mask)
    if not 0.0 <= self.confidence <= 1.0:
      raise ValueError(f'confidence must be in [0, 1], got {self.confidence}')

  def selected_mask(self) -> np.ndarray:
    if self.class_masks is not None:
      return np.asarray(self.class_masks[self.assigned_category], dtype=np.float64)
    return self.mask

  def with_mask(self, mask) -> 'Instance':
    return Instance(self.box, self.category, self.confidence, mask, self.assigned_category)


@dataclass(frozen=True)
class TascConfig:
  lam: float = 1.0
  mask_threshold: float = 0.5
  soft_steepness: float = 10.0

  def __post_init__(self):
    for name in ('lam', 'mask_threshold', 'soft_steepness'):
      if not math.isfinite(getattr(self, name)):
        raise ValueError(f'{name} must be finite')
    if self.lam < 0:
      raise ValueError('lam must be >= 0')
    if self.soft_steepness <= 0:
      raise ValueError('soft_steepness must be > 0')


def _sigmoid(x):
  return 0.5 * (1.0 + np.tanh(0.5 * x))


def _check_classes(scores: ScoreVolume, o: Ontology):
  if scores.num_classes != len(o):
    raise ValueError(
        f'score volume has {scores.num_classes} classes, ontology has {len(o)}')


def argmax_by_id(scores: ScoreVolume, o: Ontology):
  """Per-pixel winning category id and its score; ties go to the lowest id."""
  _check_classes(scores, o)
  ids = np.asarray(o.ids)
  order = np.argsort(ids, kind='stable')
  planes = scores.data[order]
  best = np.argmax(planes, axis=0)
  value = np.take_along_axis(planes, best[None], axis=0)[0]
  return ids[order][best], value


def stuff_side_mask(scores: ScoreVolume, o: Ontology, t: float = 0.5) -> np.ndarray:
  """Things confidence derived from dense scores.

  A pixel keeps its winning score when that score exceeds ``t`` and the
  winner is a thing category; every other pixel is 0.
  """
  label, value = argmax_by_id(scores, o)
  thing = np.isin(label, o.thing_ids)
  return np.where(thing & (value > t), value, 0.0)


def _placements(instances: Sequence[Instance], image_w: int, image_h: int):
  for inst in instances:
    if not inst.box.intersects_canvas(image_w, image_h):
      raise ValueError(f'box {inst.box.as_list()} lies outside the {image_w}x{image_h} canvas')
    extent, window = paste_window(inst.box, image_w, image_h)
    yield inst, extent, window


def roi_flatten(instances: Sequence[Instance], image_w: int, image_h: int,
                cfg: TascConfig = TascConfig(), mode: str = HARD) -> np.ndarray:
  """Assembles per-instance masks into one normalized things-confidence mask.

  Each instance's selected mask channel is resized to its box, binarized
  (``hard``) or passed through ``sigmoid(k * (v - t))`` (``soft``), and added
  onto a zero canvas. Each pixel is then divided by its instance count: the
  number of post-threshold hits in hard mode, the number of covering boxes in
  soft mode. Pixels with no count stay 0.
  """
  if mode not in (HARD, SOFT):
    raise ValueError(f'unknown mode {mode!r}')
  total = np.zeros((image_h, image_w))
  count = np.zeros((image_h, image_w))
  for inst, extent, window in _placements(instances, image_w, image_h):
    if window is None:
      continue
    row0, col0, row1, col1 = extent
    r0, c0, r1, c1 = window
    resized = bilinear_resize(inst.selected_mask(), col1 - col0, row1 - row0)
    local = resized[r0 - row0:r1 - row0, c0 - col0:c1 - col0]
    if mode == HARD:
      hit = local > cfg.mask_threshold
      total[r0:r1, c0:c1] += hit
      count[r0:r1, c0:c1] += hit
    else:
      total[r0:r1, c0:c1] += _sigmoid(cfg.soft_steepness * (local - cfg.mask_threshold))
      count[r0:r1, c0:c1] += 1.0
  out = np.zeros_like(total)
  np.divide(total, count, out=out, where=count > 0)
  return out


@dataclass
class InstanceGrad:
  """Jacobian of the soft RoI-Flatten output w.r.t. one instance's mask.

  The Jacobian is separable, so it is kept factored over the canvas window
  the box covers::

    d out[row0 + i, col0 + j] / d mask[a, b] = scale[i, j] * wy[i, a] * wx[j, b]

  and is zero outside the window.
  """

  row0: int
  col0: int
  scale: np.ndarray
  wy: np.ndarray
  wx: np.ndarray
  mask_shape: tuple[int, int]

  def dense(self, image_h: int, image_w: int) -> np.ndarray:
    """Full Jacobian of shape ``(image_h, image_w, mask_h, mask_w)``."""
    out = np.zeros((image_h, image_w) + tuple(self.mask_shape))
    h, w = self.scale.shape
    block = self.scale[:, :, None, None] * self.wy[:, None, :, None] * self.wx[None, :, None, :]
    out[self.row0:self.row0 + h, self.col0:self.col0 + w] = block
    return out

  def vjp(self, upstream: np.ndarray) -> np.ndarray:
    """Pulls a canvas-shaped upstream gradient back to the local mask."""
    h, w = self.scale.shape
    g = upstream[self.row0:self.row0 + h, self.col0:self.col0 + w] * self.scale
    return self.wy.T @ g @ self.wx


def roi_flatten_soft_grad(instances: Sequence[Instance], image_w: int, image_h: int,
                          cfg: TascConfig = TascConfig(), mode: str = SOFT) -> list[InstanceGrad]:
  """Analytic derivatives of soft :func:`roi_flatten` w.r.t. every mask cell.

  The per-pixel box count does not depend on mask values, so each output
  pixel is a sum of independent logistic terms over a fixed denominator.
  """
  if mode != SOFT:
    raise ValueError('gradients exist only in soft mode; the hard threshold is piecewise constant')
  placed = list(_placements(instances, image_w, image_h))
  count = np.zeros((image_h, image_w))
  for _, _, window in placed:
    if window is not None:
      r0, c0, r1, c1 = window
      count[r0:r1, c0:c1] += 1.0

  grads = []
  k = cfg.soft_steepness
  for inst, extent, window in placed:
    m = inst.selected_mask()
    if window is None:
      grads.append(InstanceGrad(0, 0, np.zeros((0, 0)), np.zeros((0, m.shape[0])),
                                np.zeros((0, m.shape[1])), m.shape))
      continue
    row0, col0, row1, col1 = extent
    r0, c0, r1, c1 = window
    wy = interp_matrix(m.shape[0], row1 - row0)[r0 - row0:r1 - row0]
    wx = interp_matrix(m.shape[1], col1 - col0)[c0 - col0:c1 - col0]
    local = wy @ m @ wx.T
    s = _sigmoid(k * (local - cfg.mask_threshold))
    scale = s * (1.0 - s) * k / count[r0:r1, c0:c1]
    grads.append(InstanceGrad(r0, c0, scale, wy, wx, m.shape))
  return grads


def _check_pair(a, b):
  a = np.asarray(a, dtype=np.float64)
  b = np.asarray(b, dtype=np.float64)
  if a.shape != b.shape:
    raise ValueError(f'mask dimensions differ: {a.shape} vs {b.shape}')
  return a, b


def tasc_residual(stuff_mask, things_mask, cfg: TascConfig = TascConfig()) -> float:
  """``lam`` times the mean squared difference of the two masks."""
  a, b = _check_pair(stuff_mask, things_mask)
  if cfg.lam == 0:
    return 0.0
  return float(cfg.lam * np.mean((a - b) ** 2))


def tasc_residual_grad(stuff_mask, things_mask, cfg: TascConfig = TascConfig()):
  """Gradients of :func:`tasc_residual` w.r.t. the stuff and things masks."""
  a, b = _check_pair(stuff_mask, things_mask)
  g = 2.0 * cfg.lam * (a - b) / a.size
  return g, -g


def residual_image(stuff_mask, things_mask) -> np.ndarray:
  a, b = _check_pair(stuff_mask, things_mask)
  return np.abs(a - b)


def consistency_masks(instances: Sequence[Instance], scores: ScoreVolume, o: Ontology,
                      cfg: TascConfig = TascConfig(), mode: str = HARD):
  """The two things masks compared by the residual for one image.

  Returns ``(stuff_side, things_side)``: the stuff head's things mask from
  ``scores`` (described by ``o``) and the RoI-Flatten of ``instances``.
  """
  stuff = stuff_side_mask(scores, o, cfg.mask_threshold)
  things = roi_flatten(instances, scores.width, scores.height, cfg, mode)
  return stuff, things
