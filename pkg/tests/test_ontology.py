import pytest

from tascseg.ontology import (Category, Ontology, cityscapes_like, collapse_things, counts,
                              synthetic, vistas_like)


def test_counts_match_dataset_shapes():
  assert counts(cityscapes_like()) == (11, 8)
  assert counts(vistas_like()) == (28, 37)
  assert counts(synthetic(1, 1)) == (1, 1)


def test_collapse_cityscapes():
  o = cityscapes_like()
  c, mapping = collapse_things(o)
  assert len(c) == 12
  assert counts(c) == (11, 1)
  assert set(mapping) == set(o.ids)
  merged = c.thing_ids[0]
  for cid in o.thing_ids:
    assert mapping[cid] == merged
  for cid in o.stuff_ids:
    assert mapping[cid] == cid


def test_collapse_single_thing():
  o = synthetic(1, 1)
  c, mapping = collapse_things(o)
  assert len(c) == 2
  assert mapping[o.thing_ids[0]] == c.thing_ids[0]


@pytest.mark.parametrize('o', [cityscapes_like(), vistas_like(), synthetic(2, 5)])
def test_collapse_idempotent(o):
  once, _ = collapse_things(o)
  twice, mapping = collapse_things(once)
  assert twice == once
  assert all(k == v for k, v in mapping.items())


def test_collapse_needs_things():
  with pytest.raises(ValueError):
    collapse_things(Ontology((Category(1, 'road', False),)))


def test_invariants():
  with pytest.raises(ValueError):
    Ontology((Category(0, 'void', False),))
  with pytest.raises(ValueError):
    Ontology((Category(1, 'a', False), Category(1, 'b', True)))
  with pytest.raises(ValueError):
    synthetic(2, 0).require_panoptic()


def test_dict_round_trip():
  o = cityscapes_like()
  assert Ontology.from_dict(o.to_dict()) == o
