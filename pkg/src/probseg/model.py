"""Core data model: detections, masks, sample sets and ground truth.

All types are immutable after construction (frozen dataclasses holding
read-only numpy arrays), so they can be shared freely across threads.
Probability payloads keep float32 when given float32 (the width used by
the on-disk run format) and are held as float64 otherwise, which is what
fused means and metric arithmetic use.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

# Slack allowed before a probability is rejected as out of range.
PROB_SLACK = 1e-6
# Tolerance on the sum of a class distribution.
CLASS_SUM_TOL = 1e-6


class ValidationError(ValueError):
    """Raised when input data violates a model invariant."""


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def _as_prob_array(values) -> np.ndarray:
    """Float array; float32 input is preserved, anything else widens to float64."""
    v = np.asarray(values)
    return v if v.dtype == np.float32 else v.astype(np.float64)


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in continuous image coordinates, x1<=x2, y1<=y2."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 <= self.x2 and self.y1 <= self.y2):
            raise ValidationError(
                f"degenerate box ({self.x1}, {self.y1}, {self.x2}, {self.y2})"
            )

    def validate_bounds(self, width: int, height: int) -> None:
        lo = -PROB_SLACK
        if self.x1 < lo or self.y1 < lo or self.x2 > width + PROB_SLACK or self.y2 > height + PROB_SLACK:
            raise ValidationError(
                f"box ({self.x1}, {self.y1}, {self.x2}, {self.y2}) outside "
                f"{width}x{height} frame"
            )

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


@dataclass(frozen=True, eq=False)
class ClassDist:
    """Probability vector over c affordance classes plus background (index 0)."""

    probs: np.ndarray

    def __post_init__(self):
        p = _as_prob_array(self.probs)
        if p.ndim != 1 or p.size < 2:
            raise ValidationError("class distribution needs background + >=1 class")
        if np.any(p < -PROB_SLACK) or np.any(p > 1.0 + PROB_SLACK):
            raise ValidationError("class probability outside [0,1]")
        s = float(np.sum(p, dtype=np.float64))
        if abs(s - 1.0) > CLASS_SUM_TOL:
            raise ValidationError(f"class probabilities sum to {s}, expected 1")
        object.__setattr__(self, "probs", _freeze(np.clip(p, 0.0, 1.0)))

    def __len__(self) -> int:
        return int(self.probs.size)

    @property
    def argmax(self) -> int:
        return int(np.argmax(self.probs))

    @property
    def score(self) -> float:
        """Maximum probability over the non-background classes."""
        return float(np.max(self.probs[1:]))


@dataclass(frozen=True, eq=False)
class ProbMask:
    """Full-frame grid of per-pixel foreground probabilities, row-major."""

    values: np.ndarray

    def __post_init__(self):
        v = _as_prob_array(self.values)
        if v.ndim != 2:
            raise ValidationError("probability mask must be 2-D")
        bad = (v < -PROB_SLACK) | (v > 1.0 + PROB_SLACK)
        if np.any(bad):
            y, x = np.argwhere(bad)[0]
            raise ValidationError(
                f"mask probability {float(v[y, x])} at ({int(x)}, {int(y)}) outside [0,1]"
            )
        object.__setattr__(self, "values", _freeze(np.clip(v, 0.0, 1.0)))

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    @property
    def width(self) -> int:
        return int(self.values.shape[1])


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Boolean grid, row-major. Produced by thresholding a ProbMask at 0.5."""

    bits: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bits)
        if b.ndim != 2:
            raise ValidationError("binary mask must be 2-D")
        object.__setattr__(self, "bits", _freeze(b.astype(bool)))

    @property
    def height(self) -> int:
        return int(self.bits.shape[0])

    @property
    def width(self) -> int:
        return int(self.bits.shape[1])

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.bits))


def mask_iou(a: BinaryMask, b: BinaryMask) -> float:
    """Intersection over union of two binary masks; 0 when both are empty."""
    if a.bits.shape != b.bits.shape:
        raise ValidationError(
            f"mask dimensions differ: {a.bits.shape} vs {b.bits.shape}"
        )
    inter = int(np.count_nonzero(a.bits & b.bits))
    union = int(np.count_nonzero(a.bits | b.bits))
    if union == 0:
        return 0.0
    return inter / union


@dataclass(frozen=True, eq=False)
class Detection:
    """One sampled instance hypothesis: box, class distribution, soft mask."""

    box: BBox
    classes: ClassDist
    prob_mask: ProbMask

    @property
    def score(self) -> float:
        return self.classes.score

    @property
    def label(self) -> int:
        return self.classes.argmax

    def validate(self, width: int, height: int, context: str = "") -> None:
        """Check frame invariants; mask support outside the box only warns."""
        self.box.validate_bounds(width, height)
        if self.prob_mask.width != width or self.prob_mask.height != height:
            raise ValidationError(
                f"{context}mask is {self.prob_mask.width}x{self.prob_mask.height}, "
                f"scene is {width}x{height}"
            )
        margin = 2.0  # small dilation of the box tolerated
        ys, xs = np.nonzero(self.prob_mask.values)
        if ys.size:
            if (
                xs.min() < self.box.x1 - margin
                or xs.max() + 1 > self.box.x2 + margin
                or ys.min() < self.box.y1 - margin
                or ys.max() + 1 > self.box.y2 + margin
            ):
                warnings.warn(
                    f"{context}mask support extends beyond detection box", stacklevel=2
                )


@dataclass(frozen=True, eq=False)
class SampleSet:
    """All detections produced by one stochastic forward pass."""

    pass_index: int
    detections: tuple[Detection, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.pass_index < 0:
            raise ValidationError("pass_index must be >= 0")
        object.__setattr__(self, "detections", tuple(self.detections))


@dataclass(frozen=True, eq=False)
class GroundTruthInstance:
    """Annotated object: class label in [1, c] and a nonempty binary mask."""

    label: int
    mask: BinaryMask

    def __post_init__(self):
        if self.label < 1:
            raise ValidationError("ground truth label must be >= 1 (0 is background)")
        if self.mask.area == 0:
            raise ValidationError("ground truth mask is empty")


@dataclass(frozen=True, eq=False)
class Scene:
    """Image-level ground truth container."""

    image_id: str
    width: int
    height: int
    instances: tuple[GroundTruthInstance, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "instances", tuple(self.instances))
        for k, inst in enumerate(self.instances):
            if inst.mask.width != self.width or inst.mask.height != self.height:
                raise ValidationError(
                    f"instance {k} mask is {inst.mask.width}x{inst.mask.height}, "
                    f"scene is {self.width}x{self.height}"
                )
