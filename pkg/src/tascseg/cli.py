"""Command-line entry point: ``tascseg {synth,fuse,eval,tasc-residual}``.

Exit codes: 0 success, 1 usage, 2 malformed file, 3 invariant violation,
4 prediction/ground-truth id mismatch.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Optional, Sequence

from tascseg import formats
from tascseg.formats import (InvariantError, Manifest, ManifestEntry, MismatchError,
                             TascError, UsageError)
from tascseg.fusion import FusionConfig, SegmentMap, fuse_image
from tascseg.metrics import (ConfusionCounter, accumulate_pq, compute_mask_ap,
                             match_segments, report_from_stats)
from tascseg.ontology import collapse_things, synthetic
from tascseg.synth import SceneSpec, generate_scene
from tascseg.tasc import HARD, SOFT, TascConfig, consistency_masks, residual_image, tasc_residual


class _Parser(argparse.ArgumentParser):

  def error(self, message):
    raise UsageError(message)


def thread_count(flag: Optional[int]) -> int:
  if flag:
    return flag
  env = os.environ.get('TASC_THREADS')
  if env:
    try:
      return max(1, int(env))
    except ValueError:
      raise UsageError(f'TASC_THREADS must be an integer, got {env!r}') from None
  return os.cpu_count() or 1


def _parallel_map(fn: Callable, items: Sequence, threads: int) -> list:
  """Applies ``fn`` to every item; results (or raised errors) keep item order."""

  def guarded(item):
    try:
      return fn(item), None
    except TascError as e:
      return None, e

  if threads <= 1 or len(items) <= 1:
    return [guarded(i) for i in items]
  with ThreadPoolExecutor(max_workers=threads) as pool:
    return list(pool.map(guarded, items))


def _report_failures(results, entries, out=None) -> int:
  out = out or sys.stderr
  code = 0
  for (_, err), entry in zip(results, entries):
    if err is not None:
      print(f'{entry.image_id}: {err.kind} error: {err}', file=out)
      code = code or err.exit_code
  return code


def _remap(segmap: SegmentMap, mapping: dict[int, int]) -> SegmentMap:
  segs = tuple(type(s)(s.id, mapping.get(s.category, s.category), s.confidence)
               for s in segmap.segments)
  return SegmentMap(segmap.ids, segs)


# -- synth -------------------------------------------------------------------


def cmd_synth(args) -> int:
  out = Path(args.out)
  out.mkdir(parents=True, exist_ok=True)
  if args.ontology:
    o = formats.read_ontology(args.ontology)
  else:
    o = synthetic(args.num_stuff, args.num_things)
  formats.write_ontology(out / 'ontology.json', o)
  entries = []
  for k in range(args.count):
    seed = args.seed + k
    try:
      spec = SceneSpec(seed, args.width, args.height, args.stuff_regions, args.instances,
                       args.jitter, args.conf_noise, args.drop_prob)
      scene = generate_scene(spec, o)
    except ValueError as e:
      raise UsageError(f'seed {seed}: {e}') from None
    image_id = f'scene_{seed:06d}'
    formats.write_segmap(out / f'{image_id}.gt.tseg', scene.gt)
    formats.write_scores(out / f'{image_id}.tscv', scene.scores)
    formats.write_instances(out / f'{image_id}.instances.json', scene.instances)
    entries.append(ManifestEntry(image_id, Path(f'{image_id}.instances.json'),
                                 Path(f'{image_id}.tscv'), Path(f'{image_id}.gt.tseg')))
  formats.write_manifest(out / 'manifest.json', Manifest(entries, out))
  print(f'wrote {len(entries)} scenes to {out}')
  return 0


# -- fuse --------------------------------------------------------------------


def _fusion_config(args) -> FusionConfig:
  try:
    return FusionConfig(args.overlap_max, args.mask_cover_min, args.box_nms_iou,
                        args.mask_nms_iou, args.mask_threshold, args.overlap_mode,
                        args.guide_mode)
  except ValueError as e:
    raise UsageError(str(e)) from None


def cmd_fuse(args) -> int:
  manifest = formats.read_manifest(args.manifest)
  o = formats.read_ontology(args.ontology)
  score_o = collapse_things(o)[0] if args.collapse_things else o
  cfg = _fusion_config(args)
  out = Path(args.out)
  out.mkdir(parents=True, exist_ok=True)

  def run(entry: ManifestEntry):
    instances = formats.read_instances(manifest.path(entry, 'instances'), o)
    scores = formats.read_scores(manifest.path(entry, 'scores'))
    try:
      result = fuse_image(instances, scores, o, cfg, args.guide_threshold, score_o)
    except ValueError as e:
      raise InvariantError(str(e)) from None
    formats.write_segmap(out / f'{entry.image_id}.tseg', result.segmap)
    inst_path = manifest.path(entry, 'instances').resolve()
    return ManifestEntry(entry.image_id, Path(os.path.relpath(inst_path, out.resolve())),
                         segmap=Path(f'{entry.image_id}.tseg')), len(result.accepted)

  results = _parallel_map(run, manifest.entries, thread_count(args.threads))
  code = _report_failures(results, manifest.entries)
  done = [r for r, err in results if err is None]
  formats.write_manifest(out / 'manifest.json', Manifest([e for e, _ in done], out))
  placed = sum(n for _, n in done)
  print(f'fused {len(done)}/{len(manifest.entries)} images, {placed} instances placed')
  return code


# -- eval --------------------------------------------------------------------


def format_table(report) -> str:
  lines = [f'{"class":<20} {"PQ":>6} {"SQ":>6} {"RQ":>6} {"IoU":>6}']

  def cell(v):
    return f'{100 * v:6.1f}' if v is not None and not math.isnan(v) else f'{"-":>6}'

  for a in report.aggregates.values():
    lines.append(f'{"mean/" + a.name:<20} {cell(a.pq)} {cell(a.sq)} {cell(a.rq)} {cell(a.iou)}')
  for r in report.classes:
    lines.append(f'{r.name:<20} {cell(r.pq)} {cell(r.sq)} {cell(r.rq)} {cell(r.iou)}')
  if report.ap is not None:
    lines.append(f'mask AP {cell(report.ap).strip()}  AP50 {cell(report.ap50).strip()}')
  return '\n'.join(lines)


def cmd_eval(args) -> int:
  pred_m = formats.read_manifest(args.pred)
  gt_m = formats.read_manifest(args.gt)
  o = formats.read_ontology(args.ontology)
  mapping = None
  if args.collapse_things:
    o, mapping = collapse_things(o)
  want_pq, want_miou, want_ap = args.pq, args.miou, args.ap
  if not (want_pq or want_miou or want_ap):
    want_pq = want_miou = want_ap = True

  pred_ids, gt_ids = set(pred_m.ids()), set(gt_m.ids())
  if pred_ids != gt_ids:
    missing = sorted(gt_ids - pred_ids)
    extra = sorted(pred_ids - gt_ids)
    raise MismatchError(f'image ids differ; missing from predictions: {missing}; '
                        f'unknown to ground truth: {extra}')
  gt_by_id = {e.image_id: e for e in gt_m.entries}

  def run(entry: ManifestEntry):
    key = 'segmap' if entry.segmap is not None else 'gt'
    pred = formats.read_segmap(pred_m.path(entry, key))
    gt = formats.read_segmap(gt_m.path(gt_by_id[entry.image_id], 'gt'))
    if mapping is not None:
      pred, gt = _remap(pred, mapping), _remap(gt, mapping)
    if pred.ids.shape != gt.ids.shape:
      raise MismatchError(f'{entry.image_id}: prediction and ground truth sizes differ')
    try:
      match = match_segments(pred, gt, o) if want_pq or want_miou else None
    except ValueError as e:
      raise InvariantError(str(e)) from None
    instances = []
    if want_ap:
      instances = formats.read_instances(pred_m.path(entry, 'instances'))
      if mapping is not None:
        for inst in instances:
          inst.category = mapping.get(inst.category, inst.category)
    return match, pred.labelmap(), gt, instances

  results = _parallel_map(run, pred_m.entries, thread_count(args.threads))
  code = _report_failures(results, pred_m.entries)
  if code:
    return code

  ok = [(entry.image_id, r) for entry, (r, _) in zip(pred_m.entries, results)]
  stats = accumulate_pq(r[0] for _, r in ok) if want_pq or want_miou else {}
  miou = None
  if want_miou:
    counter = ConfusionCounter(o)
    for _, (_, pred_labels, gt, _) in ok:
      counter.add(pred_labels, gt.labelmap())
    miou = counter.per_class_iou()
  report = report_from_stats(stats, o, miou)
  if want_ap:
    preds = [(inst, image_id) for image_id, r in ok for inst in r[3]]
    gts = [(r[2], image_id) for image_id, r in ok]
    ap = compute_mask_ap(preds, gts, o)
    report.ap, report.ap50 = ap.ap, ap.ap50

  print(format_table(report))
  if args.out:
    Path(args.out).write_bytes(formats.dump_json(report.to_dict()))
  return 0


# -- tasc-residual -------------------------------------------------------------


def cmd_tasc(args) -> int:
  o = formats.read_ontology(args.ontology)
  score_o = collapse_things(o)[0] if args.collapse_things else o
  instances = formats.read_instances(args.instances, o)
  scores = formats.read_scores(args.scores)
  try:
    cfg = TascConfig(args.lam, args.mask_threshold, args.steepness)
  except ValueError as e:
    raise UsageError(str(e)) from None
  try:
    stuff, things = consistency_masks(instances, scores, score_o, cfg, args.mode)
  except ValueError as e:
    raise InvariantError(str(e)) from None
  value = tasc_residual(stuff, things, cfg)
  if args.out:
    formats.write_mask(args.out, residual_image(stuff, things))
  print(repr(value))
  return 0


# -- argument parsing ------------------------------------------------------------


def _add_fusion_flags(p):
  d = FusionConfig()
  p.add_argument('--overlap-max', type=float, default=d.overlap_max,
                 help='reject an instance whose IoU with placed pixels reaches this')
  p.add_argument('--mask-cover-min', type=float, default=d.mask_cover_min,
                 help='minimum agreement between an instance and the guide mask')
  p.add_argument('--box-nms-iou', type=float, default=d.box_nms_iou)
  p.add_argument('--mask-nms-iou', type=float, default=d.mask_nms_iou)
  p.add_argument('--mask-threshold', type=float, default=d.mask_threshold)
  p.add_argument('--guide-threshold', type=float, default=0.5)
  p.add_argument('--overlap-mode', choices=('union', 'max_pairwise'), default=d.overlap_mode)
  p.add_argument('--guide-mode', choices=('coverage', 'iou'), default=d.guide_mode)


def build_parser() -> argparse.ArgumentParser:
  parser = _Parser(prog='tascseg', description=__doc__.splitlines()[0])
  sub = parser.add_subparsers(dest='command', required=True, parser_class=_Parser)

  p = sub.add_parser('synth', help='write synthetic scenes and a manifest')
  p.add_argument('--out', required=True)
  p.add_argument('--seed', type=int, default=0)
  p.add_argument('--count', type=int, default=1)
  p.add_argument('--width', type=int, default=64)
  p.add_argument('--height', type=int, default=64)
  p.add_argument('--stuff-regions', type=int, default=3)
  p.add_argument('--instances', type=int, default=4)
  p.add_argument('--jitter', type=int, default=0)
  p.add_argument('--conf-noise', type=float, default=0.0)
  p.add_argument('--drop-prob', type=float, default=0.0)
  p.add_argument('--ontology', help='ontology JSON (default: 3 stuff + 3 thing classes)')
  p.add_argument('--num-stuff', type=int, default=3)
  p.add_argument('--num-things', type=int, default=3)
  p.set_defaults(func=cmd_synth)

  p = sub.add_parser('fuse', help='NMS + mask-guided fusion for every manifest image')
  p.add_argument('--manifest', required=True)
  p.add_argument('--ontology', required=True)
  p.add_argument('--out', required=True)
  p.add_argument('--collapse-things', action='store_true',
                 help='score planes use the merged N+1 catalog')
  p.add_argument('--threads', type=int, default=None)
  _add_fusion_flags(p)
  p.set_defaults(func=cmd_fuse)

  p = sub.add_parser('eval', help='PQ / mIoU / mask AP of predictions against ground truth')
  p.add_argument('--pred', required=True, help='prediction manifest')
  p.add_argument('--gt', required=True, help='ground-truth manifest')
  p.add_argument('--ontology', required=True)
  p.add_argument('--pq', action='store_true')
  p.add_argument('--miou', action='store_true')
  p.add_argument('--ap', action='store_true')
  p.add_argument('--collapse-things', action='store_true',
                 help='evaluate with all thing classes merged into one')
  p.add_argument('--out', help='write the report JSON here')
  p.add_argument('--threads', type=int, default=None)
  p.set_defaults(func=cmd_eval)

  p = sub.add_parser('tasc-residual', help='consistency residual between the two heads')
  p.add_argument('--instances', required=True)
  p.add_argument('--scores', required=True)
  p.add_argument('--ontology', required=True)
  p.add_argument('--lambda', dest='lam', type=float, default=1.0)
  p.add_argument('--mode', choices=(HARD, SOFT), default=HARD)
  p.add_argument('--steepness', type=float, default=10.0)
  p.add_argument('--mask-threshold', type=float, default=0.5)
  p.add_argument('--collapse-things', action='store_true')
  p.add_argument('--out', help='write the |difference| image as TSCM')
  p.set_defaults(func=cmd_tasc)
  return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
  try:
    args = build_parser().parse_args(argv)
    return args.func(args)
  except TascError as e:
    print(f'tascseg: {e.kind} error: {e}', file=sys.stderr)
    return e.exit_code


if __name__ == '__main__':
  sys.exit(main())
