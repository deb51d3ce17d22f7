"""Things/stuff consistency masks, mask-guided panoptic fusion and panoptic metrics."""

from tascseg.fusion import (FusionConfig, PanopticResult, Segment, SegmentMap, box_nms,
                            fuse_image, mask_guided_fuse, mask_nms, segments_from_labelmap,
                            semantic_argmax)
from tascseg.masks import BBox, bilinear_resize, coverage, iou_box, iou_hard, threshold
from tascseg.metrics import (MatchResult, PQReport, compute_mask_ap, compute_miou, compute_pq,
                             match_segments, stuff_bias_probe)
from tascseg.ontology import Category, Ontology, collapse_things, counts
from tascseg.synth import SceneSpec, generate_scene
from tascseg.tasc import (Instance, ScoreVolume, TascConfig, consistency_masks, residual_image,
                          roi_flatten, roi_flatten_soft_grad, stuff_side_mask, tasc_residual)

__version__ = '0.1.0'
