"""Category catalog separating things (countable) from stuff (amorphous).

Category ids are supplied by the caller and kept as-is. Id 0 is reserved for
void / unlabeled pixels and never appears in a catalog.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

VOID_ID = 0
THING_NAME = 'thing'


@dataclass(frozen=True)
class Category:
  id: int
  name: str
  is_thing: bool


@dataclass(frozen=True)
class Ontology:
  """Ordered category list. The order defines score-volume plane order."""

  categories: tuple[Category, ...]

  def __post_init__(self):
    object.__setattr__(self, 'categories', tuple(self.categories))
    ids = [c.id for c in self.categories]
    if not ids:
      raise ValueError('ontology has no categories')
    if len(set(ids)) != len(ids):
      raise ValueError(f'duplicate category ids in {ids}')
    for c in self.categories:
      if not isinstance(c.id, int) or isinstance(c.id, bool) or c.id < 1:
        raise ValueError(f'category ids must be integers >= 1, got {c.id!r}')

  @property
  def void_id(self) -> int:
    return VOID_ID

  @property
  def ids(self) -> list[int]:
    return [c.id for c in self.categories]

  @property
  def thing_ids(self) -> list[int]:
    return [c.id for c in self.categories if c.is_thing]

  @property
  def stuff_ids(self) -> list[int]:
    return [c.id for c in self.categories if not c.is_thing]

  def __len__(self) -> int:
    return len(self.categories)

  def __contains__(self, category_id) -> bool:
    return category_id in self._by_id

  @cached_property
  def _by_id(self) -> dict[int, Category]:
    return {c.id: c for c in self.categories}

  def get(self, category_id: int) -> Category:
    try:
      return self._by_id[category_id]
    except KeyError:
      raise KeyError(f'unknown category id {category_id}') from None

  def is_thing(self, category_id: int) -> bool:
    return self.get(category_id).is_thing

  def index(self, category_id: int) -> int:
    return self.ids.index(category_id)

  def require_panoptic(self):
    """Raises unless the catalog has at least one thing and one stuff class."""
    if not self.thing_ids or not self.stuff_ids:
      raise ValueError('panoptic use needs at least one thing and one stuff category')

  def to_dict(self) -> dict:
    return {
        'categories': [
            {'id': c.id, 'name': c.name, 'is_thing': c.is_thing}
            for c in self.categories
        ]
    }

  @classmethod
  def from_dict(cls, payload: dict) -> 'Ontology':
    try:
      cats = [
          Category(int(c['id']), str(c['name']), bool(c['is_thing']))
          for c in payload['categories']
      ]
    except (KeyError, TypeError) as e:
      raise ValueError(f'malformed ontology document: {e}') from None
    return cls(tuple(cats))


def counts(o: Ontology) -> tuple[int, int]:
  """Returns ``(num_stuff, num_things)``."""
  return len(o.stuff_ids), len(o.thing_ids)


def collapse_things(o: Ontology) -> tuple[Ontology, dict[int, int]]:
  """Merges every thing category into a single synthetic ``thing`` class.

  Stuff categories keep their ids and order; the merged class is appended
  last. A catalog that already has exactly one thing class is returned
  unchanged, which makes the operation idempotent.

  Returns:
    The collapsed ontology and a total mapping from original to new ids.
  """
  things = o.thing_ids
  if not things:
    raise ValueError('cannot collapse an ontology without thing categories')
  if len(things) == 1:
    return o, {cid: cid for cid in o.ids}
  merged_id = max(o.ids) + 1
  stuff = [c for c in o.categories if not c.is_thing]
  collapsed = Ontology(tuple(stuff) + (Category(merged_id, THING_NAME, True),))
  mapping = {c.id: (merged_id if c.is_thing else c.id) for c in o.categories}
  return collapsed, mapping


CITYSCAPES_STUFF = (
    'road', 'sidewalk', 'building', 'wall', 'fence', 'pole', 'traffic-light',
    'traffic-sign', 'vegetation', 'terrain', 'sky')
CITYSCAPES_THINGS = (
    'person', 'rider', 'car', 'truck', 'bus', 'train', 'motorcycle', 'bicycle')


def cityscapes_like() -> Ontology:
  """19-class street-scene catalog: 11 stuff, 8 things."""
  names = [(n, False) for n in CITYSCAPES_STUFF] + [(n, True) for n in CITYSCAPES_THINGS]
  return Ontology(tuple(Category(i + 1, n, t) for i, (n, t) in enumerate(names)))


def vistas_like() -> Ontology:
  """65-class catalog shaped like Mapillary Vistas: 28 stuff, 37 things."""
  cats = [Category(i + 1, f'stuff-{i + 1}', False) for i in range(28)]
  cats += [Category(29 + j, f'thing-{j + 1}', True) for j in range(37)]
  return Ontology(tuple(cats))


def synthetic(num_stuff: int = 3, num_things: int = 3) -> Ontology:
  """Small catalog used by the scene generator and tests."""
  cats = [Category(i + 1, f'stuff{i + 1}', False) for i in range(num_stuff)]
  cats += [Category(num_stuff + j + 1, f'thing{j + 1}', True) for j in range(num_things)]
  return Ontology(tuple(cats))
