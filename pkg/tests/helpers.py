"""Random inputs shared by the unit and acceptance tests."""

import numpy as np

from tascseg.masks import BBox
from tascseg.tasc import Instance


def random_instances(rng, n, width=8, height=8, lo=0.05, hi=0.95, category=3):
  """Soft-mask instances with continuous boxes that may poke off the canvas."""
  out = []
  for _ in range(n):
    mh, mw = rng.integers(2, 6, size=2)
    # Starts >= -1 and sizes >= 2.5 keep at least one pixel centre inside.
    x0, y0 = rng.uniform(-1, width - 2), rng.uniform(-1, height - 2)
    bw, bh = rng.uniform(2.5, 7), rng.uniform(2.5, 7)
    box = BBox(x0, y0, x0 + bw, y0 + bh)
    out.append(Instance(box, category, float(rng.random()),
                        rng.uniform(lo, hi, size=(mh, mw))))
  return out


def random_instance_set(rng, width=32, height=32, category=3):
  """2 to 6 binary-mask instances, a mostly-true guide and an all-stuff labelmap."""
  inst = []
  for _ in range(int(rng.integers(2, 7))):
    x0, y0 = rng.integers(0, width - 4), rng.integers(0, height - 4)
    bw, bh = rng.integers(4, 16, size=2)
    x1, y1 = min(width, x0 + bw), min(height, y0 + bh)
    m = (rng.random((y1 - y0, x1 - x0)) < 0.85).astype(float)
    inst.append(Instance(BBox(x0, y0, x1, y1), category, float(rng.random()), m))
  guide = rng.random((height, width)) < 0.9
  labelmap = np.ones((height, width), dtype=np.int64)
  return inst, labelmap, guide


# -- valid random payloads for the codecs -------------------------------------------


def _f32(x):
  return float(np.float32(x))


def fuzz_segmap(rng, o=None):
  from tascseg.fusion import Segment, SegmentMap
  h, w = (int(v) for v in rng.integers(1, 24, size=2))
  n = int(rng.integers(0, 8))
  # Ids span the whole u32 range; duplicates are vanishingly rare but removed.
  seg_ids = np.unique(rng.integers(1, 2**32, size=n, dtype=np.int64))
  n = len(seg_ids)
  ids = np.zeros((h, w), np.int64)
  if n:
    ids = np.where(rng.random((h, w)) < 0.8, rng.choice(seg_ids, size=(h, w)), 0)
  cats = list(o.ids) if o is not None else list(range(1, 50))
  segs = []
  for sid in seg_ids.tolist():
    conf = None if rng.random() < 0.4 else _f32(rng.random())
    segs.append(Segment(int(sid), int(rng.choice(cats)), conf))
  return SegmentMap(ids, tuple(segs))


def fuzz_scores(rng):
  from tascseg.tasc import ScoreVolume
  c, h, w = (int(v) for v in rng.integers(1, 12, size=3))
  raw = rng.random((c, h, w)) + 1e-3
  data = (raw / raw.sum(axis=0, keepdims=True)).astype(np.float32).astype(np.float64)
  return ScoreVolume(data)


def fuzz_mask(rng):
  h, w = (int(v) for v in rng.integers(1, 20, size=2))
  return rng.random((h, w)).astype(np.float32).astype(np.float64)


def fuzz_instances(rng, o):
  out = []
  for _ in range(int(rng.integers(0, 5))):
    x0, y0 = rng.uniform(-5, 30, size=2)
    bw, bh = rng.uniform(0.5, 20, size=2)
    mh, mw = (int(v) for v in rng.integers(1, 6, size=2))
    cat = int(rng.choice(o.thing_ids))
    assigned = int(rng.choice(o.thing_ids)) if rng.random() < 0.3 else None
    out.append(Instance(BBox(x0, y0, x0 + bw, y0 + bh), cat, float(rng.random()),
                        rng.random((mh, mw)), assigned))
  return out


def fuzz_ontology(rng):
  from tascseg.ontology import Category, Ontology
  n = int(rng.integers(1, 10))
  ids = rng.choice(np.arange(1, 1000), size=n, replace=False).tolist()
  return Ontology(tuple(Category(int(i), f'c{i}', bool(rng.random() < 0.5)) for i in ids))


# PASS/FAIL lines from the acceptance checks, echoed in the terminal summary.
ACCEPTANCE: list[str] = []
