"""Raster primitives: hard/soft masks, boxes, bilinear resampling and IoU.

Masks are plain 2-D numpy arrays indexed ``[row, col]``:

  * hard masks are ``bool`` arrays,
  * soft masks are ``float64`` arrays with values in [0, 1].

Boxes use continuous pixel coordinates with the origin at the top-left
corner of the top-left pixel, so pixel ``(r, c)`` covers
``[c, c + 1) x [r, r + 1)`` and has its center at ``(c + 0.5, r + 0.5)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BBox:
  """Axis-aligned box ``(x0, y0, x1, y1)`` in continuous pixel coordinates."""

  x0: float
  y0: float
  x1: float
  y1: float

  def __post_init__(self):
    coords = (self.x0, self.y0, self.x1, self.y1)
    if not all(math.isfinite(v) for v in coords):
      raise ValueError(f'box coordinates must be finite, got {coords}')
    if not (self.x0 < self.x1 and self.y0 < self.y1):
      raise ValueError(f'box must satisfy x0 < x1 and y0 < y1, got {coords}')

  @property
  def area(self) -> float:
    return (self.x1 - self.x0) * (self.y1 - self.y0)

  def as_list(self) -> list[float]:
    return [self.x0, self.y0, self.x1, self.y1]

  def pixel_extent(self) -> tuple[int, int, int, int]:
    """Returns ``(row0, col0, row1, col1)`` of the pixels whose centers lie
    inside the box (half-open, not clipped to any canvas)."""
    col0 = math.ceil(self.x0 - 0.5)
    col1 = math.ceil(self.x1 - 0.5)
    row0 = math.ceil(self.y0 - 0.5)
    row1 = math.ceil(self.y1 - 0.5)
    return row0, col0, row1, col1

  def intersects_canvas(self, width: int, height: int) -> bool:
    return self.x1 > 0 and self.y1 > 0 and self.x0 < width and self.y0 < height


def check_hard(mask) -> np.ndarray:
  mask = np.asarray(mask)
  if mask.ndim != 2 or mask.shape[0] < 1 or mask.shape[1] < 1:
    raise ValueError(f'hard mask must be a non-empty 2-D array, got shape {mask.shape}')
  return mask.astype(bool, copy=False)


def check_soft(mask) -> np.ndarray:
  mask = np.asarray(mask, dtype=np.float64)
  if mask.ndim != 2 or mask.shape[0] < 1 or mask.shape[1] < 1:
    raise ValueError(f'soft mask must be a non-empty 2-D array, got shape {mask.shape}')
  if not np.all(np.isfinite(mask)) or mask.min() < 0.0 or mask.max() > 1.0:
    raise ValueError('soft mask values must lie in [0, 1]')
  return mask


def _check_same_shape(a: np.ndarray, b: np.ndarray):
  if a.shape != b.shape:
    raise ValueError(f'mask dimensions differ: {a.shape} vs {b.shape}')


def iou_hard(a, b) -> float:
  """Pixel IoU of two boolean masks. Two empty masks have IoU 0."""
  a = check_hard(a)
  b = check_hard(b)
  _check_same_shape(a, b)
  inter = int(np.count_nonzero(a & b))
  union = int(np.count_nonzero(a | b))
  if union == 0:
    return 0.0
  return inter / union


def iou_box(a: BBox, b: BBox) -> float:
  iw = min(a.x1, b.x1) - max(a.x0, b.x0)
  ih = min(a.y1, b.y1) - max(a.y0, b.y0)
  if iw <= 0 or ih <= 0:
    return 0.0
  inter = iw * ih
  return inter / (a.area + b.area - inter)


def coverage(a, b) -> float:
  """Fraction of ``a``'s pixels that are also set in ``b``; 0 if ``a`` is empty."""
  a = check_hard(a)
  b = check_hard(b)
  _check_same_shape(a, b)
  area = int(np.count_nonzero(a))
  if area == 0:
    return 0.0
  return int(np.count_nonzero(a & b)) / area


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
  """1-D bilinear resampling weights of shape ``(n_out, n_in)``.

  Output sample ``i`` reads the input at ``(i + 0.5) * n_in / n_out - 0.5``,
  clamped to ``[0, n_in - 1]``. Every row is a convex combination of at most
  two adjacent input cells.
  """
  if n_in < 1 or n_out < 1:
    raise ValueError('interpolation sizes must be >= 1')
  scale = n_in / n_out
  src = (np.arange(n_out) + 0.5) * scale - 0.5
  src = np.clip(src, 0.0, n_in - 1)
  lo = np.floor(src).astype(np.int64)
  hi = np.minimum(lo + 1, n_in - 1)
  frac = src - lo
  weights = np.zeros((n_out, n_in))
  rows = np.arange(n_out)
  np.add.at(weights, (rows, lo), 1.0 - frac)
  np.add.at(weights, (rows, hi), frac)
  return weights


def bilinear_resize(mask, out_w: int, out_h: int) -> np.ndarray:
  """Bilinear resize with half-pixel-center sampling."""
  mask = np.asarray(mask, dtype=np.float64)
  if mask.ndim != 2:
    raise ValueError('expected a 2-D mask')
  if out_w < 1 or out_h < 1:
    raise ValueError(f'output size must be >= 1, got {out_w}x{out_h}')
  h, w = mask.shape
  if (h, w) == (out_h, out_w):
    return mask.copy()
  wy = interp_matrix(h, out_h)
  wx = interp_matrix(w, out_w)
  out = wy @ mask @ wx.T
  # Convex weights can overshoot the input range by an ulp.
  return np.clip(out, mask.min(), mask.max())


def threshold(mask, t: float = 0.5) -> np.ndarray:
  """Strict threshold: a pixel is set iff its value is greater than ``t``."""
  if not 0.0 <= t <= 1.0:
    raise ValueError(f'threshold must be in [0, 1], got {t}')
  return np.asarray(mask, dtype=np.float64) > t


def paste_window(box: BBox, width: int, height: int):
  """Locates a box on a ``width x height`` canvas.

  Returns:
    ``(extent, window)`` where ``extent = (row0, col0, row1, col1)`` is the
    full pixel extent of the box and ``window`` is the same extent clipped to
    the canvas, or ``None`` for either when it covers no pixel.
  """
  row0, col0, row1, col1 = box.pixel_extent()
  if row1 <= row0 or col1 <= col0:
    return None, None
  extent = (row0, col0, row1, col1)
  r0, c0 = max(row0, 0), max(col0, 0)
  r1, c1 = min(row1, height), min(col1, width)
  if r1 <= r0 or c1 <= c0:
    return extent, None
  return extent, (r0, c0, r1, c1)


def resize_to_box(local_mask, box: BBox, width: int, height: int) -> np.ndarray:
  """Soft values of ``local_mask`` resized to ``box`` on the full canvas.

  Pixels outside the box are 0.
  """
  canvas = np.zeros((height, width))
  extent, window = paste_window(box, width, height)
  if window is None:
    return canvas
  row0, col0, row1, col1 = extent
  resized = bilinear_resize(local_mask, col1 - col0, row1 - row0)
  r0, c0, r1, c1 = window
  canvas[r0:r1, c0:c1] = resized[r0 - row0:r1 - row0, c0 - col0:c1 - col0]
  return canvas


def rasterize(local_mask, box: BBox, width: int, height: int, t: float = 0.5) -> np.ndarray:
  """Hard mask at canvas resolution: resize into the box, then threshold."""
  extent, window = paste_window(box, width, height)
  out = np.zeros((height, width), dtype=bool)
  if window is None:
    return out
  row0, col0, row1, col1 = extent
  resized = bilinear_resize(local_mask, col1 - col0, row1 - row0)
  r0, c0, r1, c1 = window
  out[r0:r1, c0:c1] = resized[r0 - row0:r1 - row0, c0 - col0:c1 - col0] > t
  return out
