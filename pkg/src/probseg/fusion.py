"""Grouping of sampled detections into observations.

Detections from the M stochastic passes are clustered with a basic
sequential scheme: each candidate joins the first existing cluster whose
representative mask (the union of the members' binarized masks) overlaps
it with IoU at or above the threshold and whose argmax label matches,
otherwise it opens a new cluster.  Surviving clusters are fused into
Observations by arithmetic averaging.

Ordering conventions that make the sequential pass deterministic:
passes are visited in index order; within a pass detections are visited
by descending score, ties broken by box coordinates.
Threshold conventions: score filter and IoU test are inclusive (>=),
mask binarization is strict (> 0.5).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (
    BBox,
    BinaryMask,
    ClassDist,
    Detection,
    ProbMask,
    SampleSet,
    ValidationError,
)

HEATMAP_TOTAL_PASSES = "total_passes"
HEATMAP_CLUSTER_SIZE = "cluster_size"


@dataclass(frozen=True)
class FusionConfig:
    min_detections: int = 2
    score_threshold: float = 0.5
    iou_threshold: float = 0.5
    heatmap_denominator: str = HEATMAP_TOTAL_PASSES

    def __post_init__(self):
        if self.min_detections < 1:
            raise ValidationError("min_detections must be >= 1")
        for name in ("score_threshold", "iou_threshold"):
            t = getattr(self, name)
            if not 0.0 <= t <= 1.0:
                raise ValidationError(f"{name} must be in [0,1], got {t}")
        if self.heatmap_denominator not in (
            HEATMAP_TOTAL_PASSES,
            HEATMAP_CLUSTER_SIZE,
        ):
            raise ValidationError(
                f"unknown heatmap denominator {self.heatmap_denominator!r}"
            )


@dataclass(frozen=True, eq=False)
class Observation:
    """A cluster of detections plus its fused summary statistics."""

    members: tuple[tuple[int, Detection], ...]
    mean_box: BBox
    mean_classes: ClassDist
    mean_mask: ProbMask
    heatmap: ProbMask

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def label(self) -> int:
        return self.mean_classes.argmax

    @property
    def score(self) -> float:
        return self.mean_classes.score

    def support(self) -> BinaryMask:
        """Union of the members' binarized masks (pixels any member detected)."""
        return BinaryMask(self.heatmap.values > 0.0)


def binarize(m: ProbMask) -> BinaryMask:
    """Threshold at 0.5; a value of exactly 0.5 stays background."""
    return BinaryMask(m.values > 0.5)


def heatmap(
    members, total_passes: int, cfg: FusionConfig | None = None
) -> ProbMask:
    """Per pixel, fraction of passes detecting the pixel.

    A pixel counts as detected in a pass when any member from that pass
    covers it after binarization, so values stay in [0,1] even if a
    cluster picked up two detections from the same pass.  The denominator
    is the total number of passes by default, or the member count with
    the cluster-size option.
    """
    cfg = cfg or FusionConfig()
    members = list(members)
    if not members:
        raise ValidationError("heatmap of an empty member list")
    if total_passes < 1:
        raise ValidationError("total_passes must be >= 1")
    per_pass: dict[int, np.ndarray] = {}
    for pass_index, det in members:
        bits = det.prob_mask.values > 0.5
        if pass_index in per_pass:
            per_pass[pass_index] |= bits
        else:
            per_pass[pass_index] = bits
    counts = np.zeros(members[0][1].prob_mask.values.shape, dtype=np.float64)
    for bits in per_pass.values():
        counts += bits
    if cfg.heatmap_denominator == HEATMAP_CLUSTER_SIZE:
        denom = len(members)
    else:
        denom = total_passes
    return ProbMask(counts / denom)


def fuse(
    members, total_passes: int, cfg: FusionConfig | None = None
) -> Observation:
    """Average a cluster of (pass_index, Detection) into an Observation."""
    cfg = cfg or FusionConfig()
    members = list(members)
    if not members:
        raise ValidationError("cannot fuse an empty member list")
    labels = {det.label for _, det in members}
    if len(labels) > 1:
        raise ValidationError(f"members carry mixed labels {sorted(labels)}")
    boxes = np.stack([det.box.as_array() for _, det in members])
    mean_box = BBox(*boxes.mean(axis=0))
    classes = np.stack(
        [det.classes.probs.astype(np.float64) for _, det in members]
    )
    mean_classes = classes.mean(axis=0)
    mean_classes = mean_classes / mean_classes.sum()
    masks = np.stack(
        [det.prob_mask.values.astype(np.float64) for _, det in members]
    )
    return Observation(
        members=tuple(members),
        mean_box=mean_box,
        mean_classes=ClassDist(mean_classes),
        mean_mask=ProbMask(masks.mean(axis=0)),
        heatmap=heatmap(members, total_passes, cfg),
    )


def _ordered_candidates(samples, cfg: FusionConfig):
    for s in sorted(samples, key=lambda s: s.pass_index):
        dets = [d for d in s.detections if d.score >= cfg.score_threshold]
        dets.sort(
            key=lambda d: (-d.score, d.box.x1, d.box.y1, d.box.x2, d.box.y2)
        )
        for d in dets:
            yield s.pass_index, d


def bsas_cluster(
    samples: list[SampleSet], cfg: FusionConfig | None = None
) -> list[Observation]:
    """Sequential single-pass clustering of all sampled detections.

    Returns fused observations for every cluster that kept at least
    cfg.min_detections members, in cluster creation order.
    """
    cfg = cfg or FusionConfig()
    samples = list(samples)
    shape = None
    for s in samples:
        for d in s.detections:
            if shape is None:
                shape = d.prob_mask.values.shape
            elif d.prob_mask.values.shape != shape:
                raise ValidationError(
                    f"pass {s.pass_index}: mask shape {d.prob_mask.values.shape} "
                    f"differs from {shape}"
                )
    clusters: list[dict] = []  # each: members, label, union bits
    for pass_index, det in _ordered_candidates(samples, cfg):
        bits = det.prob_mask.values > 0.5
        chosen = None
        for cl in clusters:
            if cl["label"] != det.label:
                continue
            inter = np.count_nonzero(cl["union"] & bits)
            union = np.count_nonzero(cl["union"] | bits)
            iou = inter / union if union else 0.0
            if iou >= cfg.iou_threshold:
                chosen = cl
                break
        if chosen is None:
            clusters.append(
                {"members": [(pass_index, det)], "label": det.label, "union": bits.copy()}
            )
        else:
            chosen["members"].append((pass_index, det))
            chosen["union"] |= bits
    total = len(samples)
    return [
        fuse(cl["members"], total, cfg)
        for cl in clusters
        if len(cl["members"]) >= cfg.min_detections
    ]
