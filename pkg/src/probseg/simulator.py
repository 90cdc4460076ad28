"""Synthetic scenes and sampled detections with controllable noise.

The simulator is the test oracle for the rest of the toolkit: every noise
knob maps to a known effect on the downstream variance decomposition and
metrics.

* existence_prob    chance an object is detected at all in a pass
* boundary_sigma    per-pass contour jitter (epistemic spread); implemented
                    as a radial perturbation delta(theta) =
                    sqrt(2) * sigma * sin(k * theta + phi) with random
                    k in {1,2,3} and phase per pass, whose per-pixel
                    displacement variance is exactly sigma^2
* soft_edge_width   linear probability ramp across the contour, identical
                    in every pass (aleatoric only)
* pixel_flip_prob   each foreground pixel independently dropped per pass
                    (epistemic only for hard masks)
* label_flip_prob   argmax moved to a random wrong class
* score_concentration  Dirichlet sharpness of sampled class distributions;
                    inf yields one-hot vectors
* clutter_rate      Poisson-distributed spurious small detections per pass

Randomness comes from the counter-based Philox generator with one
sub-stream per pass (key = [seed, 1 + pass]; the scene itself uses
[seed, 0]), so per-pass generation is order-independent and the whole
run is reproducible from the seed alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .model import (
    BBox,
    BinaryMask,
    ClassDist,
    Detection,
    GroundTruthInstance,
    ProbMask,
    SampleSet,
    Scene,
    ValidationError,
)

_CALIBRATION_STREAM = 0x5EED_CA1B


@dataclass(frozen=True)
class NoiseConfig:
    seed: int = 0
    existence_prob: float = 1.0
    boundary_sigma: float = 0.0
    soft_edge_width: float = 0.0
    pixel_flip_prob: float = 0.0
    label_flip_prob: float = 0.0
    score_concentration: float = math.inf
    clutter_rate: float = 0.0

    def __post_init__(self):
        if self.seed < 0:
            raise ValidationError("seed must be non-negative")
        for name in ("existence_prob", "pixel_flip_prob", "label_flip_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must be in [0,1], got {v}")
        if self.boundary_sigma < 0 or self.soft_edge_width < 0:
            raise ValidationError("noise widths must be >= 0")
        if not self.score_concentration > 0:
            raise ValidationError("score_concentration must be > 0")
        if self.clutter_rate < 0:
            raise ValidationError("clutter_rate must be >= 0")


@dataclass(frozen=True)
class DetectionProvenance:
    pass_index: int
    detection_index: int
    source: str  # "gt" or "clutter"
    instance_index: int | None


@dataclass(frozen=True, eq=False)
class SimScene:
    scene: Scene
    samples: tuple[SampleSet, ...]
    provenance: tuple[DetectionProvenance, ...]

    def members_of(self, instance_index: int):
        """(pass_index, Detection) pairs simulated from one gt instance."""
        out = []
        by_pass = {s.pass_index: s for s in self.samples}
        for rec in self.provenance:
            if rec.source == "gt" and rec.instance_index == instance_index:
                det = by_pass[rec.pass_index].detections[rec.detection_index]
                out.append((rec.pass_index, det))
        return out


def _stream(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed, stream]))


def _signed_distance(bits: np.ndarray) -> np.ndarray:
    """Euclidean signed distance, negative inside the mask."""
    m = np.asarray(bits, dtype=bool)
    return ndimage.distance_transform_edt(~m) - ndimage.distance_transform_edt(m)


# ---------------------------------------------------------------------------
# Scene generation


def _sample_shape(rng, width, height):
    kind = rng.choice(["rect", "disk", "ring"])
    yy, xx = np.mgrid[0:height, 0:width]
    max_half = max(3, min(width, height) // 6)
    if max_half < 3:
        return None
    if kind == "rect":
        hw = int(rng.integers(3, max_half + 1))
        hh = int(rng.integers(3, max_half + 1))
        cx = int(rng.integers(hw + 1, width - hw - 1))
        cy = int(rng.integers(hh + 1, height - hh - 1))
        mask = (np.abs(xx - cx) <= hw) & (np.abs(yy - cy) <= hh)
    else:
        r = int(rng.integers(3, max_half + 1))
        cx = int(rng.integers(r + 1, width - r - 1))
        cy = int(rng.integers(r + 1, height - r - 1))
        d2 = (xx - cx) ** 2 + (yy - cy) ** 2
        mask = d2 <= r * r
        if kind == "ring":
            mask &= d2 > (r // 2) ** 2
    if not mask.any():
        return None
    return mask


def generate_scene(
    width: int, height: int, n_objects: int, class_count: int, seed: int
) -> Scene:
    """Random rectangles, disks and rings with labels in [1, class_count]."""
    if class_count < 1:
        raise ValidationError("class_count must be >= 1")
    if n_objects < 0:
        raise ValidationError("n_objects must be >= 0")
    rng = _stream(seed, 0)
    instances = []
    for k in range(n_objects):
        mask = None
        for _ in range(100):
            if min(width, height) >= 20:
                mask = _sample_shape(rng, width, height)
            if mask is not None:
                break
        if mask is None:
            raise ValidationError(
                f"could not fit object {k} into a {width}x{height} frame "
                "after 100 attempts"
            )
        label = int(rng.integers(1, class_count + 1))
        instances.append(GroundTruthInstance(label, BinaryMask(mask)))
    return Scene(f"sim-{seed}", width, height, tuple(instances))


# ---------------------------------------------------------------------------
# Sampling


def _class_vector(rng, n_classes, label, noise: NoiseConfig) -> np.ndarray:
    """Class distribution with argmax at `label` (before any flip)."""
    if math.isinf(noise.score_concentration):
        v = np.zeros(n_classes + 1, dtype=np.float64)
        v[label] = 1.0
        return v
    alpha = np.ones(n_classes + 1, dtype=np.float64)
    alpha[label] = noise.score_concentration
    v = rng.dirichlet(alpha)
    top = int(np.argmax(v))
    if top != label:
        v[top], v[label] = v[label], v[top]
    return v


def _effective_label(rng, n_classes, label, noise: NoiseConfig) -> int:
    if noise.label_flip_prob <= 0.0:
        return label
    u = float(rng.random())
    wrong = int(rng.integers(1, n_classes)) if n_classes > 1 else label
    if u < noise.label_flip_prob and n_classes > 1:
        return wrong if wrong < label else wrong + 1
    return label


def _box_of_support(values: np.ndarray) -> BBox | None:
    ys, xs = np.nonzero(values)
    if ys.size == 0:
        return None
    return BBox(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def simulate_samples(
    scene: Scene, passes: int, noise: NoiseConfig, class_count: int | None = None
) -> SimScene:
    """Simulate `passes` stochastic forward passes over a scene.

    class_count defaults to the largest ground-truth label.
    """
    if passes < 1:
        raise ValidationError("number of passes must be >= 1")
    height, width = scene.height, scene.width
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    fields = []
    for inst in scene.instances:
        sdf = _signed_distance(inst.mask.bits)
        ys0, xs0 = np.nonzero(inst.mask.bits)
        theta = np.arctan2(yy - ys0.mean(), xx - xs0.mean())
        fields.append((sdf, theta))
    n_classes = class_count if class_count is not None else _scene_class_count(scene)
    if any(inst.label > n_classes for inst in scene.instances):
        raise ValidationError("class_count smaller than a ground-truth label")
    samples = []
    provenance = []
    for j in range(passes):
        rng = _stream(noise.seed, 1 + j)
        detections = []
        for idx, inst in enumerate(scene.instances):
            # fixed draw order per instance keeps the stream aligned
            # whatever the outcomes are
            u_present = float(rng.random())
            k = int(rng.integers(1, 4))
            phi = float(rng.uniform(0.0, 2.0 * math.pi))
            flips = (
                rng.random(size=(height, width))
                if noise.pixel_flip_prob > 0.0
                else None
            )
            label = _effective_label(rng, n_classes, inst.label, noise)
            class_vec = _class_vector(rng, n_classes, label, noise)
            if u_present >= noise.existence_prob:
                continue
            sdf, theta = fields[idx]
            if noise.boundary_sigma > 0.0:
                delta = (
                    math.sqrt(2.0)
                    * noise.boundary_sigma
                    * np.sin(k * theta + phi)
                )
                sdf = sdf - delta
            if noise.soft_edge_width > 0.0:
                prob = np.clip(0.5 - sdf / noise.soft_edge_width, 0.0, 1.0)
            else:
                prob = (sdf < 0.0).astype(np.float64)
            if flips is not None:
                prob = prob * (flips >= noise.pixel_flip_prob)
            prob = prob.astype(np.float32)
            box = _box_of_support(prob)
            if box is None:
                continue
            det = Detection(box, ClassDist(class_vec.astype(np.float32)), ProbMask(prob))
            provenance.append(
                DetectionProvenance(j, len(detections), "gt", idx)
            )
            detections.append(det)
        if noise.clutter_rate > 0.0:
            for _ in range(int(rng.poisson(noise.clutter_rate))):
                r = float(rng.uniform(1.5, 3.5))
                cx = float(rng.uniform(r + 1, width - r - 1))
                cy = float(rng.uniform(r + 1, height - r - 1))
                label = int(rng.integers(1, n_classes + 1))
                class_vec = _class_vector(rng, n_classes, label, noise)
                mask = ((xx - cx) ** 2 + (yy - cy) ** 2 <= r * r).astype(np.float32)
                box = _box_of_support(mask)
                if box is None:
                    continue
                det = Detection(
                    box, ClassDist(class_vec.astype(np.float32)), ProbMask(mask)
                )
                provenance.append(
                    DetectionProvenance(j, len(detections), "clutter", None)
                )
                detections.append(det)
        samples.append(SampleSet(pass_index=j, detections=tuple(detections)))
    return SimScene(scene=scene, samples=tuple(samples), provenance=tuple(provenance))


def _scene_class_count(scene: Scene) -> int:
    labels = [inst.label for inst in scene.instances]
    return max(labels) if labels else 1


# ---------------------------------------------------------------------------
# Analytic oracles


def expected_decomposition(noise: NoiseConfig, instance: GroundTruthInstance):
    """Closed-form per-pixel aleatoric/epistemic maps for analytic configs.

    Supported: a soft contour ramp with every pass identical, or hard
    masks with Bernoulli presence (existence and/or pixel flips).  Any
    other combination has no closed form here and raises.
    """
    if noise.boundary_sigma > 0.0:
        raise ValidationError("no closed form with contour jitter")
    soft = noise.soft_edge_width > 0.0
    bernoulli = noise.pixel_flip_prob > 0.0 or noise.existence_prob < 1.0
    if soft and bernoulli:
        raise ValidationError("no closed form mixing soft edges with flips")
    bits = instance.mask.bits
    if soft:
        sdf = _signed_distance(bits)
        v = np.clip(0.5 - sdf / noise.soft_edge_width, 0.0, 1.0)
        v = v.astype(np.float32).astype(np.float64)  # simulator stores f32
        return v * (1.0 - v), np.zeros_like(v)
    r = noise.existence_prob * (1.0 - noise.pixel_flip_prob)
    epistemic = np.where(bits, r * (1.0 - r), 0.0)
    return np.zeros(bits.shape, dtype=np.float64), epistemic


def make_calibration_records(
    n: int, seed: int, calibrated: bool = True, lo: float = 0.7, hi: float = 1.0
):
    """Synthetic (confidence, correct) pairs for calibration tests.

    When `calibrated`, correctness is Bernoulli with p = confidence, so
    the calibration error vanishes as n grows; otherwise p = 1 - confidence
    (deliberately anti-calibrated).
    """
    rng = _stream(seed, _CALIBRATION_STREAM)
    conf = rng.uniform(lo, hi, size=n)
    p = conf if calibrated else 1.0 - conf
    correct = rng.random(size=n) < p
    return conf, correct
