"""Evaluation suite for fused probabilistic observations.

Covers four families:

* PMQ — probability-based mask quality.  Each observation/ground-truth
  pair gets a spatial quality Q_s = exp(-(L_FG + L_BG)) built from the
  detection-count heatmap, and a label quality Q_l = probability mass the
  fused class distribution puts on the true class.  Pair quality (pPMQ)
  is the geometric mean sqrt(Q_s * Q_l).  Pairs are matched by optimal
  assignment; PMQ divides the summed pPMQ by TP + FP + FN pooled over the
  dataset, while the reported pPMQ divides by TP only.
* Weighted F-measure for foreground maps: errors are propagated from the
  object into the background via a distance transform, blurred, and
  down-weighted with distance so that a wrong pixel near the object costs
  less than a distant one.
* ACE — average calibration error over equal-width confidence bins, each
  nonempty bin weighted equally.
* AUSE — area between the uncertainty-ordered and error-ordered
  sparsification curves of the per-pixel Brier score.

Losses floor their log arguments at EPS = 1e-14, capping the penalty a
single pixel can contribute.  All arithmetic is float64.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment

from .fusion import Observation
from .model import BinaryMask, ProbMask, ValidationError

EPS = 1e-14
# Background weight decay: exp(alpha * d) halves every 5 pixels.
ALPHA_LOG_HALF = math.log(0.5) / 5.0
# Literal reading of the printed constant, kept selectable for comparison.
ALPHA_RAW = 0.5 / 5.0


@dataclass(frozen=True)
class EvalConfig:
    ace_bins: int = 10
    ause_steps: int = 20
    fbw_beta: float = 1.0
    fbw_alpha_raw: bool = False

    def __post_init__(self):
        if self.ace_bins < 1:
            raise ValidationError("ace_bins must be >= 1")
        if self.ause_steps < 1:
            raise ValidationError("ause_steps must be >= 1")

    @property
    def fbw_alpha(self) -> float:
        return ALPHA_RAW if self.fbw_alpha_raw else ALPHA_LOG_HALF


# ---------------------------------------------------------------------------
# PMQ family


def foreground_loss(gt: BinaryMask, h: ProbMask) -> float:
    """Mean negative log heatmap probability over ground-truth pixels."""
    if gt.bits.shape != h.values.shape:
        raise ValidationError("ground truth and heatmap dimensions differ")
    if gt.area == 0:
        raise ValidationError("foreground loss of an empty ground truth")
    vals = h.values[gt.bits].astype(np.float64)
    return float(-np.log(np.maximum(vals, EPS)).sum() / gt.area)


def background_loss(gt: BinaryMask, obs_mask: BinaryMask, h: ProbMask) -> float:
    """Penalty for detected pixels outside the ground truth.

    The penalised region is obs_mask minus gt; the loss is normalised by
    the ground-truth area so instance size does not change the scale.
    """
    if gt.bits.shape != h.values.shape or gt.bits.shape != obs_mask.bits.shape:
        raise ValidationError("mask dimensions differ")
    if gt.area == 0:
        raise ValidationError("background loss of an empty ground truth")
    spurious = obs_mask.bits & ~gt.bits
    if not spurious.any():
        return 0.0
    vals = h.values[spurious].astype(np.float64)
    return float(-np.log(np.maximum(1.0 - vals, EPS)).sum() / gt.area)


def spatial_quality(gt: BinaryMask, obs: Observation) -> float:
    """Q_s = exp(-(L_FG + L_BG)) against the observation's heatmap."""
    l_fg = foreground_loss(gt, obs.heatmap)
    l_bg = background_loss(gt, obs.support(), obs.heatmap)
    return float(np.exp(-(l_fg + l_bg)))


def label_quality(gt_label: int, obs: Observation) -> float:
    """Probability mass the fused class distribution puts on gt_label."""
    if not 1 <= gt_label < len(obs.mean_classes):
        raise ValidationError(f"label {gt_label} out of range")
    return float(obs.mean_classes.probs[gt_label])


def pair_quality_matrix(observations, instances):
    """Pairwise pPMQ plus its Q_s/Q_l/FG/BG components.

    Returns five (n_obs, n_gt) float64 arrays.
    """
    n_o, n_g = len(observations), len(instances)
    qs = np.zeros((n_o, n_g))
    ql = np.zeros((n_o, n_g))
    fg = np.zeros((n_o, n_g))
    bg = np.zeros((n_o, n_g))
    for i, obs in enumerate(observations):
        support = obs.support()
        for j, inst in enumerate(instances):
            l_fg = foreground_loss(inst.mask, obs.heatmap)
            l_bg = background_loss(inst.mask, support, obs.heatmap)
            fg[i, j] = np.exp(-l_fg)
            bg[i, j] = np.exp(-l_bg)
            qs[i, j] = np.exp(-(l_fg + l_bg))
            ql[i, j] = label_quality(inst.label, obs)
    ppmq = np.sqrt(qs * ql)
    return ppmq, qs, ql, fg, bg


@dataclass(frozen=True)
class MatchResult:
    """Optimal observation/ground-truth assignment for one scene."""

    assignments: tuple[tuple[int, int, float], ...]
    false_positives: tuple[int, ...]
    false_negatives: tuple[int, ...]


def match_scene(observations, instances) -> MatchResult:
    """Hungarian matching on the pPMQ matrix; zero-quality pairs unmatch."""
    ppmq, *_ = pair_quality_matrix(observations, instances)
    return _match_from_matrix(ppmq)


def _match_from_matrix(ppmq: np.ndarray) -> MatchResult:
    n_o, n_g = ppmq.shape
    assigned = []
    if n_o and n_g:
        rows, cols = linear_sum_assignment(ppmq, maximize=True)
        for i, j in zip(rows, cols):
            if ppmq[i, j] > 0.0:
                assigned.append((int(i), int(j), float(ppmq[i, j])))
    matched_o = {i for i, _, _ in assigned}
    matched_g = {j for _, j, _ in assigned}
    return MatchResult(
        assignments=tuple(assigned),
        false_positives=tuple(i for i in range(n_o) if i not in matched_o),
        false_negatives=tuple(j for j in range(n_g) if j not in matched_g),
    )


# ---------------------------------------------------------------------------
# Weighted F-measure


def _fbw_kernel(size: int = 7, sigma2: float = 4.0) -> np.ndarray:
    r = size // 2
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    k = np.exp(-(yy * yy + xx * xx) / (2.0 * sigma2))
    return k / k.sum()


def _ring_offsets(d2: int) -> list[tuple[int, int]]:
    """Integer offsets (dy, dx) with dy^2 + dx^2 == d2, sorted."""
    out = []
    r = math.isqrt(d2)
    for dy in range(-r, r + 1):
        rem = d2 - dy * dy
        s = math.isqrt(rem)
        if s * s != rem:
            continue
        if s == 0:
            out.append((dy, 0))
        else:
            out.append((dy, -s))
            out.append((dy, s))
    out.sort()
    return out


def nearest_foreground(bits: np.ndarray):
    """Exact Euclidean distance to the foreground plus the pixel achieving it.

    Ties are broken toward the smallest (row, col) foreground pixel so the
    result is unambiguous.  Returns (dist, row index grid, col index grid);
    foreground pixels map to themselves at distance 0.
    """
    gt = np.asarray(bits, dtype=bool)
    if not gt.any():
        raise ValidationError("no foreground pixels")
    h, w = gt.shape
    dist = ndimage.distance_transform_edt(~gt)
    near_r, near_c = np.indices(gt.shape)
    d2 = np.rint(dist * dist).astype(np.int64)
    bg = ~gt
    for val in np.unique(d2[bg]):
        rows, cols = np.nonzero(bg & (d2 == val))
        open_ = np.ones(rows.size, dtype=bool)
        for dy, dx in _ring_offsets(int(val)):
            if not open_.any():
                break
            ty = rows + dy
            tx = cols + dx
            ok = open_ & (ty >= 0) & (ty < h) & (tx >= 0) & (tx < w)
            idx = np.nonzero(ok)[0]
            if idx.size == 0:
                continue
            hit = idx[gt[ty[idx], tx[idx]]]
            near_r[rows[hit], cols[hit]] = ty[hit]
            near_c[rows[hit], cols[hit]] = tx[hit]
            open_[hit] = False
        if open_.any():
            raise AssertionError("distance transform disagrees with ring search")
    return dist, near_r, near_c


def weighted_fbw(
    gt: BinaryMask,
    pred: ProbMask,
    beta: float = 1.0,
    alpha: float = ALPHA_LOG_HALF,
) -> float:
    """Weighted F-measure of a probability map against a binary ground truth.

    Pipeline: absolute error map; background errors replaced by the error
    at the nearest foreground pixel; 7x7 Gaussian blur (sigma^2 = 4); on
    the foreground keep the smaller of raw and blurred error; weight
    background errors by 2 - exp(alpha * distance); combine the weighted
    recall and precision with the F_beta formula.
    """
    if gt.bits.shape != pred.values.shape:
        raise ValidationError("ground truth and prediction dimensions differ")
    if gt.area == 0:
        raise ValidationError("weighted F-measure needs a nonempty ground truth")
    fgm = gt.bits
    bgm = ~fgm
    e = np.abs(fgm.astype(np.float64) - pred.values.astype(np.float64))
    dist, near_r, near_c = nearest_foreground(fgm)
    et = e.copy()
    et[bgm] = e[near_r[bgm], near_c[bgm]]
    ea = ndimage.correlate(et, _fbw_kernel(), mode="reflect")
    min_e_ea = e.copy()
    take = fgm & (ea < e)
    min_e_ea[take] = ea[take]
    b = np.where(fgm, 1.0, 2.0 - np.exp(alpha * dist))
    ew = min_e_ea * b
    area = gt.area
    tpw = area - ew[fgm].sum()
    fpw = ew[bgm].sum()
    recall = tpw / area
    precision = tpw / (tpw + fpw) if (tpw + fpw) > 0 else 0.0
    denom = beta * beta * precision + recall
    if denom <= 0:
        return 0.0
    return float((1.0 + beta * beta) * precision * recall / denom)


def classwise_fbw(items, cfg: EvalConfig | None = None) -> dict[int, float]:
    """Per-class weighted F-measure over a dataset.

    For every image and class label: ground truth is the union of that
    class's instance masks, the prediction is the pixel-wise maximum of
    the matching observations' mean masks.  Image scores are averaged per
    class over the images where the class occurs.
    """
    cfg = cfg or EvalConfig()
    scores: dict[int, list[float]] = defaultdict(list)
    for observations, scene in items:
        for lab in sorted({inst.label for inst in scene.instances}):
            gt_bits = np.zeros((scene.height, scene.width), dtype=bool)
            for inst in scene.instances:
                if inst.label == lab:
                    gt_bits |= inst.mask.bits
            pred = np.zeros((scene.height, scene.width), dtype=np.float64)
            for obs in observations:
                if obs.label == lab:
                    pred = np.maximum(pred, obs.mean_mask.values)
            scores[lab].append(
                weighted_fbw(
                    BinaryMask(gt_bits),
                    ProbMask(pred),
                    beta=cfg.fbw_beta,
                    alpha=cfg.fbw_alpha,
                )
            )
    return {lab: float(np.mean(v)) for lab, v in sorted(scores.items())}


# ---------------------------------------------------------------------------
# Calibration


def calibration_bins(confidences, correct, bins: int = 10):
    """Per-bin occupancy, mean confidence and accuracy (equal-width bins)."""
    conf = np.asarray(confidences, dtype=np.float64)
    ok = np.asarray(correct, dtype=bool)
    if conf.size != ok.size:
        raise ValidationError("confidence and correctness lengths differ")
    idx = np.minimum((conf * bins).astype(np.int64), bins - 1)
    out = []
    for b in range(bins):
        sel = idx == b
        n = int(np.count_nonzero(sel))
        rec = {"lo": b / bins, "hi": (b + 1) / bins, "count": n}
        if n:
            rec["confidence"] = float(conf[sel].mean())
            rec["accuracy"] = float(ok[sel].mean())
        out.append(rec)
    return out


def ace(confidences, correct, bins: int = 10):
    """Average calibration error; None when there are no detections."""
    conf = np.asarray(confidences, dtype=np.float64)
    if conf.size == 0:
        return None
    gaps = [
        abs(rec["accuracy"] - rec["confidence"])
        for rec in calibration_bins(confidences, correct, bins)
        if rec["count"]
    ]
    return float(np.mean(gaps))


# ---------------------------------------------------------------------------
# Sparsification


@dataclass(frozen=True)
class SparsificationCurve:
    value: float
    fractions: tuple[float, ...]
    brier: tuple[float, ...]
    oracle_brier: tuple[float, ...]


def ause_brier(probs, labels, uncertainty, steps: int = 20) -> SparsificationCurve:
    """Area between uncertainty- and error-ordered Brier sparsification.

    Both curves are normalised by the full-population Brier score; when
    that score is zero the predictions are perfect and the area is 0.
    Ordering uses a stable sort, so the area depends only on the ordering
    of the uncertainty values, not their scale.
    """
    p = np.asarray(probs, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    u = np.asarray(uncertainty, dtype=np.float64).ravel()
    if p.size == 0:
        raise ValidationError("empty pixel population")
    if p.size != y.size or p.size != u.size:
        raise ValidationError("pixel array lengths differ")
    err = (p - y) ** 2
    n = p.size
    fractions = np.arange(steps) / steps

    def curve(order):
        ordered = err[order]
        # mean of the suffix after removing the first k pixels
        csum = np.concatenate(([0.0], np.cumsum(ordered)))
        removed = np.floor(fractions * n).astype(np.int64)
        return (csum[-1] - csum[removed]) / (n - removed)

    spars = curve(np.argsort(-u, kind="stable"))
    oracle = curve(np.argsort(-err, kind="stable"))
    base = spars[0]
    if base == 0.0:
        zeros = tuple(0.0 for _ in range(steps))
        return SparsificationCurve(0.0, tuple(fractions), zeros, zeros)
    spars = spars / base
    oracle = oracle / base
    value = float(np.trapezoid(spars - oracle, fractions))
    return SparsificationCurve(
        value, tuple(fractions), tuple(spars), tuple(oracle)
    )


# ---------------------------------------------------------------------------
# Dataset-level report


@dataclass(frozen=True)
class EvalReport:
    pmq: float
    ppmq: float
    q_s: float
    q_l: float
    fg: float
    bg: float
    fbw_per_class: dict[int, float]
    fbw_mean: float
    ace: float | None
    ause: float
    tp: int
    fp: int
    fn: int
    per_image: tuple[dict, ...] = field(default_factory=tuple)
    ace_bins: tuple[dict, ...] = field(default_factory=tuple)
    sparsification: SparsificationCurve | None = None

    def as_dict(self) -> dict:
        return {
            "pmq": self.pmq,
            "ppmq": self.ppmq,
            "q_s": self.q_s,
            "q_l": self.q_l,
            "fg": self.fg,
            "bg": self.bg,
            "fbw": {
                "per_class": {str(k): v for k, v in self.fbw_per_class.items()},
                "mean": self.fbw_mean,
            },
            "ace": self.ace,
            "ause": self.ause,
            "counts": {"tp": self.tp, "fp": self.fp, "fn": self.fn},
            "per_image": list(self.per_image),
            "ace_bins": list(self.ace_bins),
        }


def evaluate_dataset(items, cfg: EvalConfig | None = None) -> EvalReport:
    """Full evaluation of (observations, scene) pairs.

    The PMQ denominator pools TP + FP + FN over the whole dataset; the
    calibration and sparsification populations are pooled the same way.
    """
    from .uncertainty import variance_maps

    cfg = cfg or EvalConfig()
    items = list(items)
    total_ppmq = 0.0
    tp = fp = fn = 0
    qs_vals, ql_vals, fg_vals, bg_vals = [], [], [], []
    confs, correct = [], []
    pix_p, pix_y, pix_u = [], [], []
    per_image = []
    for observations, scene in items:
        observations = list(observations)
        ppmq, qs, ql, fgm, bgm = pair_quality_matrix(observations, scene.instances)
        match = _match_from_matrix(ppmq)
        image_ppmq = sum(v for _, _, v in match.assignments)
        total_ppmq += image_ppmq
        tp += len(match.assignments)
        fp += len(match.false_positives)
        fn += len(match.false_negatives)
        matched_of: dict[int, int] = {}
        for i, j, _ in match.assignments:
            matched_of[i] = j
            qs_vals.append(qs[i, j])
            ql_vals.append(ql[i, j])
            fg_vals.append(fgm[i, j])
            bg_vals.append(bgm[i, j])
        for i, obs in enumerate(observations):
            confs.append(obs.score)
            j = matched_of.get(i)
            correct.append(j is not None and obs.label == scene.instances[j].label)
        # pixel population: union of detected supports and ground truth
        if observations or scene.instances:
            shape = (scene.height, scene.width)
            p_map = np.zeros(shape)
            u_map = np.zeros(shape)
            sel = np.zeros(shape, dtype=bool)
            for obs in observations:
                p_map = np.maximum(p_map, obs.mean_mask.values)
                u_map = np.maximum(u_map, variance_maps(obs).total)
                sel |= obs.support().bits
            y_map = np.zeros(shape, dtype=bool)
            for inst in scene.instances:
                y_map |= inst.mask.bits
            sel |= y_map
            pix_p.append(p_map[sel])
            pix_y.append(y_map[sel])
            pix_u.append(u_map[sel])
        denom = len(match.assignments) + len(match.false_positives) + len(
            match.false_negatives
        )
        per_image.append(
            {
                "image_id": scene.image_id,
                "tp": len(match.assignments),
                "fp": len(match.false_positives),
                "fn": len(match.false_negatives),
                "pmq": image_ppmq / denom if denom else 0.0,
                "assignments": [
                    {"observation": i, "instance": j, "ppmq": v}
                    for i, j, v in match.assignments
                ],
            }
        )
    denom = tp + fp + fn
    curve = None
    if pix_p:
        curve = ause_brier(
            np.concatenate(pix_p),
            np.concatenate(pix_y),
            np.concatenate(pix_u),
            steps=cfg.ause_steps,
        )
    fbw_per_class = classwise_fbw(items, cfg)
    fbw_mean = float(np.mean(list(fbw_per_class.values()))) if fbw_per_class else 0.0
    return EvalReport(
        pmq=total_ppmq / denom if denom else 0.0,
        ppmq=total_ppmq / tp if tp else 0.0,
        q_s=float(np.mean(qs_vals)) if qs_vals else 0.0,
        q_l=float(np.mean(ql_vals)) if ql_vals else 0.0,
        fg=float(np.mean(fg_vals)) if fg_vals else 0.0,
        bg=float(np.mean(bg_vals)) if bg_vals else 0.0,
        fbw_per_class=fbw_per_class,
        fbw_mean=fbw_mean,
        ace=ace(confs, correct, cfg.ace_bins),
        ause=curve.value if curve else 0.0,
        tp=tp,
        fp=fp,
        fn=fn,
        per_image=tuple(per_image),
        ace_bins=tuple(calibration_bins(confs, correct, cfg.ace_bins))
        if confs
        else tuple(),
        sparsification=curve,
    )
