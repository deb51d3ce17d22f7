import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tascseg.fusion import Segment, SegmentMap, fuse_image
from tascseg.masks import BBox
from tascseg.metrics import (AP_THRESHOLDS, ConfusionCounter, PQStats, accumulate_pq,
                             compute_mask_ap, compute_miou, compute_pq, interpolated_ap,
                             match_segments, stuff_bias_probe)
from tascseg.ontology import Category, Ontology, synthetic
from tascseg.oracles import oracle_interpolated_ap, oracle_match
from tascseg.synth import SceneSpec, generate_scene
from tascseg.tasc import Instance

O = synthetic(3, 3)  # stuff 1..3, things 4..6


def _strip_pair(n_gt, n_pred, overlap, width=None):
  """One-row GT and prediction of one thing class over a stuff background."""
  width = width or n_gt + n_pred
  gt = np.full((1, width), 2, np.int64)
  pred = np.full((1, width), 2, np.int64)
  gt[0, :n_gt] = 1
  start = n_gt - overlap
  pred[0, start:start + n_pred] = 1
  segs = (Segment(1, 4), Segment(2, 1))
  return SegmentMap(pred, segs), SegmentMap(gt, segs)


def _random_segmap(rng, h=16, w=16, blocks=6):
  """Blocky random panoptic map with ids reused across categories."""
  ids = np.zeros((h, w), np.int64)
  for k in range(1, blocks + 1):
    y, x = rng.integers(0, h - 2), rng.integers(0, w - 2)
    ids[y:y + rng.integers(2, 10), x:x + rng.integers(2, 10)] = k
  present = sorted(set(np.unique(ids).tolist()) - {0})
  segs = tuple(Segment(k, int(rng.choice(O.ids))) for k in present)
  return SegmentMap(ids, segs)


def _noisy_pair(seed, noise=0.3):
  spec = SceneSpec(seed=seed, jitter=2, conf_noise=noise, drop_prob=0.2)
  scene = generate_scene(spec, O)
  pred = fuse_image(scene.instances, scene.scores, O).segmap
  return pred, scene.gt


# -- matching ---------------------------------------------------------------------------


def test_pq_micro_check():
  # Areas 100 and 100 overlapping in 80: IoU 80/120, one TP.
  pred, gt = _strip_pair(100, 100, 80)
  r = compute_pq(match_segments(pred, gt, O), O).row(4)
  assert (r.tp, r.fp, r.fn) == (1, 0, 0)
  assert r.pq == pytest.approx(2 / 3, abs=1e-9)
  assert r.sq == pytest.approx(2 / 3, abs=1e-9) and r.rq == 1.0


def test_iou_exactly_half_is_not_a_match():
  # Areas 60 and 60 overlapping in 40: IoU 40/80.
  pred, gt = _strip_pair(60, 60, 40)
  m = match_segments(pred, gt, O)
  assert m.per_category[4].tp == []
  assert m.per_category[4].fp == [1] and m.per_category[4].fn == [1]
  assert compute_pq(m, O).row(4).pq == 0.0


def test_category_mismatch_is_fp_and_fn():
  gt = SegmentMap(np.ones((2, 2), np.int64), (Segment(1, 4),))
  pred = SegmentMap(np.ones((2, 2), np.int64), (Segment(1, 5),))
  m = match_segments(pred, gt, O)
  assert m.per_category[4].fn == [1] and m.per_category[5].fp == [1]


def test_void_is_ignored():
  gt_ids = np.array([[1, 1, 0, 0]])
  pred_ids = np.array([[1, 1, 1, 2]])
  gt = SegmentMap(gt_ids, (Segment(1, 1),))
  pred = SegmentMap(pred_ids, (Segment(1, 1), Segment(2, 4)))
  m = match_segments(pred, gt, O)
  # The void pixel is dropped from the union, so the match is perfect, and
  # segment 2 lies entirely on void, so it is not a false positive.
  assert m.per_category[1].tp == [(1, 1, 1.0)]
  assert 4 not in m.per_category
  assert m == oracle_match(pred, gt, O)


def test_size_mismatch():
  with pytest.raises(ValueError):
    match_segments(SegmentMap(np.zeros((2, 2), int)), SegmentMap(np.zeros((2, 3), int)), O)


@pytest.mark.parametrize('seed', range(20))
def test_matcher_equals_oracle_on_random_maps(seed):
  rng = np.random.default_rng(seed)
  pred, gt = _random_segmap(rng), _random_segmap(rng)
  assert match_segments(pred, gt, O) == oracle_match(pred, gt, O)


@pytest.mark.parametrize('seed', range(10))
def test_matcher_equals_oracle_on_noisy_scenes(seed):
  pred, gt = _noisy_pair(seed)
  fast, slow = match_segments(pred, gt, O), oracle_match(pred, gt, O)
  assert fast == slow
  for cm in fast.per_category.values():
    assert len({p for p, _, _ in cm.tp}) == len(cm.tp)
    assert len({g for _, g, _ in cm.tp}) == len(cm.tp)


# -- PQ aggregation ----------------------------------------------------------------------


@pytest.mark.parametrize('seed', range(10))
def test_pq_equals_sq_times_rq(seed):
  report = compute_pq([match_segments(*_noisy_pair(seed), O)], O)
  for r in report.classes:
    assert abs(r.pq - r.sq * r.rq) <= 1e-12


def test_pq_pooled_over_images_by_counts():
  a = PQStats(1, 0, 1, [0.9])
  b = PQStats(2, 2, 0, [0.6, 0.7])
  pq, sq, rq = a.merge(b).values()
  assert pq == pytest.approx(2.2 / (3 + 1 + 0.5), abs=1e-15)
  assert sq == pytest.approx(2.2 / 3, abs=1e-15)
  assert rq == pytest.approx(3 / 4.5, abs=1e-15)
  assert PQStats().values() == (0.0, 0.0, 0.0)


def test_pq_merge_order_independent():
  matches = [match_segments(*_noisy_pair(s), O) for s in range(6)]
  ref = compute_pq(matches, O).to_dict()
  rng = np.random.default_rng(0)
  for _ in range(5):
    perm = rng.permutation(len(matches))
    assert compute_pq([matches[i] for i in perm], O).to_dict() == ref


def _relabel(sm, rng):
  old = [s.id for s in sm.segments]
  new = rng.choice(np.arange(1, 1000), size=len(old), replace=False).tolist()
  lut = np.zeros(int(sm.ids.max()) + 1, np.int64)
  lut[old] = new
  segs = tuple(Segment(lut[s.id], s.category, s.confidence) for s in sm.segments)
  return SegmentMap(lut[sm.ids], segs)


def test_pq_invariant_under_relabeling():
  pred, gt = _noisy_pair(3)
  ref = compute_pq(match_segments(pred, gt, O), O).to_dict()
  rng = np.random.default_rng(1)
  pred, gt = _relabel(pred, rng), _relabel(gt, rng)
  assert compute_pq(match_segments(pred, gt, O), O).to_dict() == ref


def test_aggregates_skip_absent_categories():
  gt = SegmentMap(np.ones((2, 2), np.int64), (Segment(1, 1),))
  rep = compute_pq(match_segments(gt, gt, O), O)
  assert [r.id for r in rep.classes] == [1]
  assert rep.aggregates['all'].n == 1 and rep.aggregates['things'].n == 0
  assert rep.aggregates['all'].pq == 1.0


@pytest.mark.parametrize('fraction', [0.0, 0.2, 0.49, 0.5])
def test_stuff_bias_below_half_is_zero(fraction):
  assert stuff_bias_probe(fraction) == 0.0


@pytest.mark.parametrize('fraction', [0.51, 0.6, 0.8, 1.0])
def test_stuff_bias_above_half_is_fraction(fraction):
  assert stuff_bias_probe(fraction) == pytest.approx(fraction, abs=1e-9)


# -- semantic IoU ---------------------------------------------------------------------


def test_miou_hand_counted():
  gt = np.array([[1, 1, 2, 2],
                 [1, 1, 2, 2],
                 [3, 3, 0, 0],
                 [3, 3, 0, 0]])
  pred = np.array([[1, 2, 2, 2],
                   [1, 1, 2, 2],
                   [3, 1, 4, 3],
                   [3, 3, 3, 3]])
  per, mean = compute_miou(pred, gt, O)
  assert per == {1: 3 / 5, 2: 4 / 5, 3: 3 / 4}
  assert mean == pytest.approx((0.6 + 0.8 + 0.75) / 3, abs=1e-15)


def test_miou_perfect_and_pooled():
  rng = np.random.default_rng(0)
  maps = [rng.integers(0, 7, size=(5, 6)) for _ in range(3)]
  per, mean = compute_miou(maps, maps, O)
  assert mean == 1.0 and all(v == 1.0 for v in per.values())
  a = ConfusionCounter(O).add(maps[0], maps[1])
  b = ConfusionCounter(O).add(maps[2], maps[0])
  both = ConfusionCounter(O).add(maps[0], maps[1]).add(maps[2], maps[0])
  assert np.array_equal(a.merge(b).counts, both.counts)


def test_miou_unknown_prediction_label_counts_against_class():
  per, _ = compute_miou(np.array([[1, 99]]), np.array([[1, 1]]), O)
  assert per == {1: 0.5}


def test_miou_unknown_gt_label_raises():
  with pytest.raises(ValueError):
    compute_miou(np.array([[1]]), np.array([[42]]), O)


# -- AP --------------------------------------------------------------------------------


def _instance_from_segment(sm, seg_id, conf):
  ys, xs = np.nonzero(sm.ids == seg_id)
  y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
  local = (sm.ids[y0:y1, x0:x1] == seg_id).astype(float)
  cat = sm.category_of()[seg_id]
  return Instance(BBox(x0, y0, x1, y1), cat, conf, local)


def _things_scene():
  ids = np.zeros((10, 20), np.int64)
  ids[1:5, 1:6] = 1
  ids[2:9, 10:18] = 2
  return SegmentMap(ids, (Segment(1, 4), Segment(2, 5)))


def test_ap_perfect_is_one():
  gt = _things_scene()
  preds = [(_instance_from_segment(gt, k, 1.0), 'a') for k in (1, 2)]
  res = compute_mask_ap(preds, [(gt, 'a')], O)
  assert res.ap == 1.0 and res.ap50 == 1.0


def test_ap_no_predictions_is_zero():
  res = compute_mask_ap([], [(_things_scene(), 'a')], O)
  assert res.ap == 0.0 and res.ap50 == 0.0


def test_ap_no_ground_truth_is_nan():
  empty = SegmentMap(np.zeros((3, 3), np.int64))
  assert math.isnan(compute_mask_ap([], [(empty, 'a')], O).ap)


def test_ap_miss_then_hit():
  # One GT; the higher-confidence prediction misses, the other has IoU 0.9.
  ids = np.zeros((10, 20), np.int64)
  ids[0:10, 0:9] = 1
  gt = SegmentMap(ids, (Segment(1, 4),))
  hit = Instance(BBox(0, 0, 10, 10), 4, 0.8, np.ones((10, 10)))
  miss = Instance(BBox(15, 0, 20, 10), 4, 0.9, np.ones((10, 5)))
  res = compute_mask_ap([(hit, 'a'), (miss, 'a')], [(gt, 'a')], O)
  # Operating points: (recall 0, precision 0), (recall 1, precision 1/2).
  expected = oracle_interpolated_ap([0.0, 1.0], [0.0, 0.5])
  assert expected == pytest.approx(0.5, abs=1e-15)
  assert res.ap50 == pytest.approx(expected, abs=1e-12)


def test_ap_unknown_image_and_duplicates():
  gt = _things_scene()
  inst = _instance_from_segment(gt, 1, 1.0)
  with pytest.raises(KeyError):
    compute_mask_ap([(inst, 'b')], [(gt, 'a')], O)
  with pytest.raises(ValueError):
    compute_mask_ap([], [(gt, 'a'), (gt, 'a')], O)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=12))
def test_interpolated_ap_matches_oracle(points):
  recall = np.sort(np.array([p[0] for p in points]))
  precision = np.array([p[1] for p in points])
  assert interpolated_ap(recall, precision) == pytest.approx(
      oracle_interpolated_ap(recall, precision), abs=1e-12)


@pytest.mark.parametrize('seed', range(6))
def test_ap_monotone_in_threshold_and_reorder_invariant(seed):
  scene = generate_scene(SceneSpec(seed=seed, jitter=2, conf_noise=0.3), O)
  preds = [(i, 'img') for i in scene.instances]
  res = compute_mask_ap(preds, [(scene.gt, 'img')], O)
  cats = {c for c, _ in res.table}
  for c in cats:
    vals = [res.table[(c, t)] for t in AP_THRESHOLDS]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
  # Confidence-preserving reorder: stable sort by confidence then reverse ties.
  rng = np.random.default_rng(seed)
  shuffled = [preds[i] for i in rng.permutation(len(preds))]
  confs = [p[0].confidence for p in preds]
  if len(set(confs)) == len(confs):
    assert compute_mask_ap(shuffled, [(scene.gt, 'img')], O).table == res.table


def test_stuff_only_ontology_ap_is_nan():
  o = Ontology((Category(1, 'road', False),))
  gt = SegmentMap(np.ones((2, 2), np.int64), (Segment(1, 1),))
  assert math.isnan(compute_mask_ap([], [(gt, 'a')], o).ap)


def test_accumulate_skips_empty():
  assert accumulate_pq([]) == {}
