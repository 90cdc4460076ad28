"""Decomposition of predictive variance into aleatoric and epistemic parts.

For N sampled Bernoulli probabilities p_1..p_N with mean pbar:

    aleatoric = (1/N) * sum p_n (1 - p_n)      data-inherent noise
    epistemic = (1/N) * sum (p_n - pbar)^2     spread across samples

and their sum equals pbar (1 - pbar), the total Bernoulli variance of the
averaged predictor (law of total variance).  The class-vector form replaces
p_n by the class distribution: aleatoric terms diag(p) - p p^T, epistemic
terms (p - pbar)(p - pbar)^T, with the same identity on the trace.

All arithmetic is float64 regardless of the storage width of the inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fusion import Observation
from .model import ClassDist, ValidationError


@dataclass(frozen=True, eq=False)
class VarianceMaps:
    """Per-pixel variance grids for one observation; total = sum of parts."""

    aleatoric: np.ndarray
    epistemic: np.ndarray
    total: np.ndarray

    def __post_init__(self):
        for name in ("aleatoric", "epistemic", "total"):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            a.setflags(write=False)
            object.__setattr__(self, name, a)


@dataclass(frozen=True, eq=False)
class CovarianceDecomposition:
    """(c+1)x(c+1) covariance split for sampled class distributions."""

    aleatoric: np.ndarray
    epistemic: np.ndarray

    def __post_init__(self):
        for name in ("aleatoric", "epistemic"):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            a.setflags(write=False)
            object.__setattr__(self, name, a)


def pixel_variance(probs) -> tuple[float, float]:
    """Aleatoric and epistemic variance of a list of sampled probabilities."""
    p = np.asarray(probs, dtype=np.float64).ravel()
    if p.size == 0:
        raise ValidationError("pixel_variance of an empty sample list")
    if np.any(p < 0.0) or np.any(p > 1.0):
        raise ValidationError("probabilities outside [0,1]")
    pbar = p.mean()
    aleatoric = np.mean(p * (1.0 - p))
    epistemic = np.mean((p - pbar) ** 2)
    return float(aleatoric), float(epistemic)


def variance_maps(obs: Observation) -> VarianceMaps:
    """Apply the decomposition independently at every pixel of a cluster."""
    shapes = {m.prob_mask.values.shape for _, m in obs.members}
    if len(shapes) != 1:
        raise ValidationError(f"member mask shapes differ: {sorted(shapes)}")
    stack = np.stack(
        [m.prob_mask.values.astype(np.float64) for _, m in obs.members]
    )
    pbar = stack.mean(axis=0)
    aleatoric = np.mean(stack * (1.0 - stack), axis=0)
    epistemic = np.mean((stack - pbar) ** 2, axis=0)
    return VarianceMaps(
        aleatoric=aleatoric, epistemic=epistemic, total=aleatoric + epistemic
    )


def class_covariance(members) -> CovarianceDecomposition:
    """Covariance split for a list of ClassDist (or raw probability vectors)."""
    rows = []
    for m in members:
        p = m.probs if isinstance(m, ClassDist) else m
        rows.append(np.asarray(p, dtype=np.float64))
    if not rows:
        raise ValidationError("class_covariance of an empty member list")
    lengths = {r.size for r in rows}
    if len(lengths) != 1:
        raise ValidationError(f"class distribution lengths differ: {sorted(lengths)}")
    stack = np.stack(rows)  # N x (c+1)
    n = stack.shape[0]
    aleatoric = np.zeros((stack.shape[1], stack.shape[1]))
    for p in stack:
        aleatoric += np.diag(p) - np.outer(p, p)
    aleatoric /= n
    centered = stack - stack.mean(axis=0)
    epistemic = centered.T @ centered / n
    return CovarianceDecomposition(aleatoric=aleatoric, epistemic=epistemic)
