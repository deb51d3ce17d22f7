"""Binary and JSON codecs.

Binary layouts are little-endian and start with a 4-byte magic and a u32
version (currently 1):

``TSEG`` segment map::

    u32 width, u32 height, u32 segment_count
    u32 ids[height * width]                      row-major
    segment_count x (u32 id, u32 category, f32 confidence)   NaN = absent

``TSCV`` score volume::

    u32 width, u32 height, u32 num_classes
    f32 data[num_classes * height * width]       class-major, row-major

``TSCM`` soft mask: the ``TSCV`` layout with ``num_classes = 1``.

Readers check magic, then version, then length, then content invariants,
and raise a distinct exception for each.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from tascseg.fusion import Segment, SegmentMap
from tascseg.masks import BBox
from tascseg.ontology import Ontology
from tascseg.tasc import Instance, ScoreVolume

VERSION = 1
SEGMAP_MAGIC = b'TSEG'
SCORES_MAGIC = b'TSCV'
MASK_MAGIC = b'TSCM'

_HEADER = struct.Struct('<4sIIII')
_RECORD = np.dtype([('id', '<u4'), ('category', '<u4'), ('confidence', '<f4')])


class TascError(Exception):
  exit_code = 1
  kind = 'error'


class UsageError(TascError):
  exit_code = 1
  kind = 'usage'


class FormatError(TascError):
  exit_code = 2
  kind = 'format'


class BadMagicError(FormatError):
  kind = 'bad_magic'


class VersionError(FormatError):
  kind = 'version'


class TruncatedError(FormatError):
  kind = 'truncated'


class InvariantError(TascError):
  exit_code = 3
  kind = 'invariant'


class MismatchError(TascError):
  exit_code = 4
  kind = 'mismatch'


def _header(magic: bytes, w: int, h: int, n: int) -> bytes:
  return _HEADER.pack(magic, VERSION, w, h, n)


def _read_header(buf: bytes, magic: bytes):
  if len(buf) < 4:
    raise TruncatedError(f'file too short for a {magic.decode()} header')
  if buf[:4] != magic:
    raise BadMagicError(f'expected magic {magic!r}, found {bytes(buf[:4])!r}')
  if len(buf) < _HEADER.size:
    raise TruncatedError(f'file too short for a {magic.decode()} header')
  _, version, w, h, n = _HEADER.unpack_from(buf)
  if version != VERSION:
    raise VersionError(f'unsupported {magic.decode()} version {version}')
  return w, h, n


def _check_length(buf: bytes, expected: int, what: str):
  if len(buf) < expected:
    raise TruncatedError(f'{what}: expected {expected} bytes, got {len(buf)}')
  if len(buf) > expected:
    raise FormatError(f'{what}: {len(buf) - expected} trailing bytes')


def encode_segmap(segmap: SegmentMap) -> bytes:
  if segmap.ids.min() < 0 or segmap.ids.max() > 0xFFFFFFFF:
    raise InvariantError('segment ids must fit in u32')
  recs = np.zeros(len(segmap.segments), dtype=_RECORD)
  for k, s in enumerate(segmap.segments):
    recs[k] = (s.id, s.category, math.nan if s.confidence is None else s.confidence)
  return (_header(SEGMAP_MAGIC, segmap.width, segmap.height, len(segmap.segments))
          + segmap.ids.astype('<u4').tobytes() + recs.tobytes())


def decode_segmap(buf: bytes, o: Optional[Ontology] = None) -> SegmentMap:
  w, h, n = _read_header(buf, SEGMAP_MAGIC)
  npx = w * h
  _check_length(buf, _HEADER.size + 4 * npx + _RECORD.itemsize * n, 'TSEG')
  if w < 1 or h < 1:
    raise InvariantError(f'segment map dimensions must be >= 1, got {w}x{h}')
  ids = np.frombuffer(buf, dtype='<u4', count=npx, offset=_HEADER.size)
  recs = np.frombuffer(buf, dtype=_RECORD, count=n, offset=_HEADER.size + 4 * npx)
  segments = []
  for r in recs:
    conf = float(r['confidence'])
    segments.append(Segment(int(r['id']), int(r['category']), None if math.isnan(conf) else conf))
  segmap = SegmentMap(ids.astype(np.int64).reshape(h, w), tuple(segments))
  try:
    segmap.validate(o)
  except ValueError as e:
    raise InvariantError(str(e)) from None
  return segmap


def encode_scores(scores: ScoreVolume) -> bytes:
  return (_header(SCORES_MAGIC, scores.width, scores.height, scores.num_classes)
          + scores.data.astype('<f4').tobytes())


def _decode_planes(buf: bytes, magic: bytes):
  w, h, n = _read_header(buf, magic)
  _check_length(buf, _HEADER.size + 4 * w * h * n, magic.decode())
  if w < 1 or h < 1 or n < 1:
    raise InvariantError(f'{magic.decode()} dimensions must be >= 1, got {n}x{h}x{w}')
  data = np.frombuffer(buf, dtype='<f4', count=w * h * n, offset=_HEADER.size)
  return data.astype(np.float64).reshape(n, h, w)


def decode_scores(buf: bytes, check: bool = True) -> ScoreVolume:
  scores = ScoreVolume(_decode_planes(buf, SCORES_MAGIC))
  if check:
    try:
      scores.validate()
    except ValueError as e:
      raise InvariantError(str(e)) from None
  return scores


def encode_mask(mask) -> bytes:
  mask = np.asarray(mask)
  if mask.ndim != 2:
    raise InvariantError('soft mask must be 2-D')
  h, w = mask.shape
  return _header(MASK_MAGIC, w, h, 1) + mask.astype('<f4').tobytes()


def decode_mask(buf: bytes) -> np.ndarray:
  w, h, n = _read_header(buf, MASK_MAGIC)
  if n != 1:
    raise InvariantError(f'TSCM must have exactly one plane, got {n}')
  data = _decode_planes(buf, MASK_MAGIC)[0]
  if not np.all(np.isfinite(data)) or data.min() < 0 or data.max() > 1:
    raise InvariantError('soft mask values must lie in [0, 1]')
  return data


def instance_to_dict(inst: Instance) -> dict:
  d = {
      'box': inst.box.as_list(),
      'category': inst.category,
      'confidence': inst.confidence,
      'mask': inst.mask.tolist(),
  }
  if inst.assigned_category != inst.category:
    d['assigned_category'] = inst.assigned_category
  return d


def instance_from_dict(d: dict, o: Optional[Ontology] = None) -> Instance:
  try:
    box = d['box']
    category = d['category']
    confidence = d['confidence']
    mask = d['mask']
    assigned = d.get('assigned_category')
  except (KeyError, TypeError, AttributeError) as e:
    raise FormatError(f'malformed instance record: {e!r}') from None
  try:
    if len(box) != 4:
      raise ValueError('box needs 4 coordinates')
    inst = Instance(BBox(*(float(v) for v in box)), int(category), float(confidence),
                    np.asarray(mask, dtype=np.float64), None if assigned is None else int(assigned))
  except (ValueError, TypeError) as e:
    raise InvariantError(f'invalid instance: {e}') from None
  if o is not None:
    for cid in (inst.category, inst.assigned_category):
      if cid not in o or not o.is_thing(cid):
        raise InvariantError(f'instance category {cid} is not a thing category')
  return inst


def encode_instances(instances) -> bytes:
  return json.dumps([instance_to_dict(i) for i in instances]).encode()


def decode_instances(buf: bytes, o: Optional[Ontology] = None) -> list[Instance]:
  payload = _load_json(buf, 'instance list')
  if not isinstance(payload, list):
    raise FormatError('instance file must hold a JSON list')
  return [instance_from_dict(d, o) for d in payload]


def _load_json(buf: bytes, what: str):
  try:
    return json.loads(buf)
  except (json.JSONDecodeError, UnicodeDecodeError) as e:
    raise FormatError(f'{what} is not valid JSON: {e}') from None


def encode_ontology(o: Ontology) -> bytes:
  return json.dumps(o.to_dict(), indent=2).encode()


def decode_ontology(buf: bytes) -> Ontology:
  payload = _load_json(buf, 'ontology')
  if not isinstance(payload, dict) or not isinstance(payload.get('categories'), list):
    raise FormatError('ontology must be an object with a "categories" list')
  for c in payload['categories']:
    if not isinstance(c, dict) or not {'id', 'name', 'is_thing'} <= set(c):
      raise FormatError(f'malformed category record {c!r}')
  try:
    return Ontology.from_dict(payload)
  except ValueError as e:
    raise InvariantError(str(e)) from None


def segmap_sidecar(segmap: SegmentMap) -> dict:
  ids, areas = np.unique(segmap.ids, return_counts=True)
  area = dict(zip(ids.tolist(), areas.tolist()))
  return {
      'width': segmap.width,
      'height': segmap.height,
      'segments': [
          {'id': s.id, 'category': s.category, 'confidence': s.confidence,
           'area': area.get(s.id, 0)}
          for s in segmap.segments
      ],
  }


def dump_json(payload) -> bytes:
  return (json.dumps(payload, indent=2) + '\n').encode()


@dataclass
class ManifestEntry:
  image_id: str
  instances: Optional[Path] = None
  scores: Optional[Path] = None
  gt: Optional[Path] = None
  segmap: Optional[Path] = None


@dataclass
class Manifest:
  """Per-image file paths; relative paths resolve against the manifest's folder."""

  entries: list[ManifestEntry]
  root: Path = Path('.')

  def ids(self) -> list[str]:
    return [e.image_id for e in self.entries]

  def to_dict(self) -> dict:
    rows = []
    for e in self.entries:
      row = {'image_id': e.image_id}
      for key in ('instances', 'scores', 'gt', 'segmap'):
        p = getattr(e, key)
        if p is not None:
          row[key] = str(p)
      rows.append(row)
    return {'entries': rows}

  def path(self, entry: ManifestEntry, key: str) -> Path:
    p = getattr(entry, key)
    if p is None:
      raise UsageError(f'manifest entry {entry.image_id!r} has no {key!r} path')
    return p if p.is_absolute() else self.root / p


def decode_manifest(buf: bytes, root: Path) -> Manifest:
  payload = _load_json(buf, 'manifest')
  if not isinstance(payload, dict) or not isinstance(payload.get('entries'), list):
    raise FormatError('manifest must be an object with an "entries" list')
  entries = []
  for row in payload['entries']:
    if not isinstance(row, dict) or 'image_id' not in row:
      raise FormatError(f'malformed manifest entry {row!r}')
    entries.append(ManifestEntry(
        str(row['image_id']),
        *(Path(row[k]) if row.get(k) is not None else None
          for k in ('instances', 'scores', 'gt', 'segmap'))))
  ids = [e.image_id for e in entries]
  if len(set(ids)) != len(ids):
    raise InvariantError('manifest image ids are not unique')
  return Manifest(entries, root)


def _read(path) -> bytes:
  try:
    return Path(path).read_bytes()
  except OSError as e:
    raise UsageError(f'cannot read {path}: {e.strerror}') from None


def read_segmap(path, o: Optional[Ontology] = None) -> SegmentMap:
  return decode_segmap(_read(path), o)


def write_segmap(path, segmap: SegmentMap, sidecar: bool = True):
  path = Path(path)
  path.write_bytes(encode_segmap(segmap))
  if sidecar:
    path.with_suffix('.json').write_bytes(dump_json(segmap_sidecar(segmap)))


def read_scores(path) -> ScoreVolume:
  return decode_scores(_read(path))


def write_scores(path, scores: ScoreVolume):
  Path(path).write_bytes(encode_scores(scores))


def read_mask(path) -> np.ndarray:
  return decode_mask(_read(path))


def write_mask(path, mask):
  Path(path).write_bytes(encode_mask(mask))


def read_instances(path, o: Optional[Ontology] = None) -> list[Instance]:
  return decode_instances(_read(path), o)


def write_instances(path, instances):
  Path(path).write_bytes(encode_instances(instances))


def read_ontology(path) -> Ontology:
  return decode_ontology(_read(path))


def write_ontology(path, o: Ontology):
  Path(path).write_bytes(encode_ontology(o))


def read_manifest(path) -> Manifest:
  path = Path(path)
  return decode_manifest(_read(path), path.parent)


def write_manifest(path, manifest: Manifest):
  Path(path).write_bytes(dump_json(manifest.to_dict()))
