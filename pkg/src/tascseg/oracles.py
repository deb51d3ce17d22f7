"""Brute-force reference implementations used to check the fast paths.

Nothing here shares code with the routines it checks beyond the data types:
segment matching compares explicit boolean masks pair by pair, gradients
come from central finite differences, and interpolated AP takes a maximum
over every operating point for every recall level.
"""

from __future__ import annotations

import copy
from typing import Sequence

import numpy as np

from tascseg.fusion import SegmentMap
from tascseg.metrics import CategoryMatch, MatchResult, RECALL_POINTS
from tascseg.ontology import VOID_ID, Ontology
from tascseg.tasc import SOFT, Instance, TascConfig, roi_flatten


def oracle_match(pred: SegmentMap, gt: SegmentMap, o: Ontology) -> MatchResult:
  """All-pairs matcher, O(pixels x pred segments x gt segments)."""
  if pred.ids.shape != gt.ids.shape:
    raise ValueError('dimension mismatch')
  for s in list(pred.segments) + list(gt.segments):
    if s.category not in o:
      raise ValueError(f'unknown category {s.category}')
  gt_void = gt.ids == VOID_ID
  preds = [(s, pred.ids == s.id) for s in pred.segments]
  gts = [(s, gt.ids == s.id) for s in gt.segments]
  preds = [(s, m) for s, m in preds if m.sum() > 0]
  gts = [(s, m) for s, m in gts if m.sum() > 0]

  per_cat: dict[int, CategoryMatch] = {}
  matched_pred, matched_gt = set(), set()
  for gs, gm in gts:
    for ps, pm in preds:
      if ps.category != gs.category:
        continue
      inter = int(np.sum(gm & pm))
      union = int(np.sum((gm | pm) & ~gt_void))
      if union and inter / union > 0.5:
        per_cat.setdefault(gs.category, CategoryMatch()).tp.append((ps.id, gs.id, inter / union))
        matched_pred.add(ps.id)
        matched_gt.add(gs.id)
  for gs, _ in gts:
    if gs.id not in matched_gt:
      per_cat.setdefault(gs.category, CategoryMatch()).fn.append(gs.id)
  for ps, pm in preds:
    if ps.id in matched_pred:
      continue
    if np.sum(pm & gt_void) / np.sum(pm) > 0.5:
      continue
    per_cat.setdefault(ps.category, CategoryMatch()).fp.append(ps.id)
  return MatchResult(per_cat).normalized()


def oracle_fd_grad(instances: Sequence[Instance], image_w: int, image_h: int,
                   cfg: TascConfig = TascConfig(), step: float = 1e-4) -> list[np.ndarray]:
  """Central-difference Jacobians of soft RoI-Flatten.

  Returns one ``(image_h, image_w, mask_h, mask_w)`` array per instance.
  Masks are perturbed in place of validation, so cells may leave [0, 1] by
  ``step``.
  """
  if step <= 0:
    raise ValueError('step must be > 0')
  base = list(instances)
  out = []
  for i, inst in enumerate(base):
    m = np.array(inst.selected_mask(), dtype=np.float64)
    jac = np.zeros((image_h, image_w) + m.shape)
    for a in range(m.shape[0]):
      for b in range(m.shape[1]):
        vals = []
        for sign in (1.0, -1.0):
          pert = m.copy()
          pert[a, b] += sign * step
          moved = copy.copy(inst)
          moved.class_masks = None
          moved.mask = pert
          trial = base[:i] + [moved] + base[i + 1:]
          vals.append(roi_flatten(trial, image_w, image_h, cfg, SOFT))
        jac[:, :, a, b] = (vals[0] - vals[1]) / (2.0 * step)
    out.append(jac)
  return out


def oracle_interpolated_ap(recall: Sequence[float], precision: Sequence[float]) -> float:
  """101-point interpolated AP by exhaustive search over operating points."""
  total = 0.0
  for r in RECALL_POINTS:
    best = 0.0
    for rec, prec in zip(recall, precision):
      if rec >= r and prec > best:
        best = prec
    total += best
  return total / len(RECALL_POINTS)
