"""Implicit mask computation from attention maps and noise estimates.

Every edit concept gets two independent spatial masks, intersected:

* ``M1`` comes from cross-attention: per-token maps are averaged over all
  layers and heads, summed over the concept's tokens, upsampled to field
  resolution by nearest-neighbor block replication, and thresholded at a
  percentile. It finds the region the concept talks about, coarsely.

* ``M2`` comes from the guidance vector itself: the per-pixel magnitude of
  ``psi`` (mean of absolute values over channels) is thresholded the same
  way. It is fine-grained but noisy.

Thresholding is nearest-rank: for quantile ``lam`` over ``N`` values the
threshold is the ``ceil(lam * N)``-th smallest value and the mask keeps
everything at or above it, so with distinct values exactly
``N - ceil(lam * N) + 1`` pixels survive.

Models without attention (the analytic family) fall back to ``M1 == 1``,
leaving ``M2`` in sole control. A user-supplied binary mask overrides both.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ParameterError
from .model import AttentionStash, Field

__all__ = [
    "MaskPair",
    "aggregate_attention",
    "upsample_nearest",
    "percentile_threshold",
    "mask_from_attention",
    "mask_from_noise",
    "phi_mask",
    "masks_for_concept",
]


@dataclass(frozen=True)
class MaskPair:
    """The two implicit masks of one concept at one step, plus their product."""

    m1: np.ndarray
    m2: np.ndarray

    @property
    def intersection(self) -> np.ndarray:
        return self.m1 * self.m2

    @property
    def counts(self) -> tuple[int, int, int]:
        return (
            int(self.m1.sum()),
            int(self.m2.sum()),
            int(self.intersection.sum()),
        )


def aggregate_attention(stash: AttentionStash, tokens: Sequence[int]) -> np.ndarray:
    """Mean attention over layers and heads, summed over the given tokens.

    Returns a float64 map at the stash's native resolution.
    """
    if len(tokens) == 0:
        raise ParameterError("token subset must be non-empty")
    if len(set(tokens)) != len(tokens):
        raise ParameterError("token subset must not repeat indices")
    n = stash.n_tokens
    for tok in tokens:
        if not 0 <= tok < n:
            raise ParameterError(f"token index {tok} outside stash with {n} tokens")
    per_token = stash.maps.astype(np.float64).mean(axis=(0, 1))  # (H, W, tokens)
    return per_token[:, :, list(tokens)].sum(axis=-1)


def upsample_nearest(map2d: np.ndarray, target_hw: tuple[int, int]) -> np.ndarray:
    """Block-replicate a map to ``target_hw``; factors must be integers.

    Replication preserves nearest-rank percentiles: every value is repeated
    the same number of times, so thresholds computed before and after
    upsampling agree exactly.
    """
    m = np.asarray(map2d)
    if m.ndim != 2:
        raise ParameterError("attention map must be 2-d")
    h, w = m.shape
    th, tw = target_hw
    if th % h != 0 or tw % w != 0:
        raise ParameterError(f"target {target_hw} is not an integer multiple of {m.shape}")
    return np.repeat(np.repeat(m, th // h, axis=0), tw // w, axis=1)


def percentile_threshold(values: np.ndarray, lam: float) -> float:
    """Nearest-rank quantile: the ``ceil(lam * N)``-th smallest value."""
    if not 0.0 < lam < 1.0:
        raise ParameterError(f"quantile must lie in (0, 1), got {lam}")
    flat = np.asarray(values, dtype=np.float64).ravel()
    n = flat.size
    if n == 0:
        raise ParameterError("cannot take a percentile of an empty array")
    k = math.ceil(lam * n)
    return float(np.partition(flat, k - 1)[k - 1])


def _threshold_mask(map2d: np.ndarray, lam: float) -> np.ndarray:
    thresh = percentile_threshold(map2d, lam)
    return (np.asarray(map2d, dtype=np.float64) >= thresh).astype(np.float32)


def mask_from_attention(aggregated: np.ndarray, lam: float) -> np.ndarray:
    """Binary mask of the pixels at or above the ``lam`` percentile."""
    m = np.asarray(aggregated)
    if m.ndim != 2:
        raise ParameterError("aggregated attention map must be 2-d")
    return _threshold_mask(m, lam)


def mask_from_noise(psi: Field, lam: float) -> np.ndarray:
    """Binary mask from guidance magnitude, |psi| averaged over channels."""
    if psi.ndim != 3:
        raise ParameterError("psi must be a field (C, H, W)")
    magnitude = np.abs(psi.astype(np.float64)).mean(axis=0)
    return _threshold_mask(magnitude, lam)


def phi_mask(scale: float, m1: np.ndarray, m2: np.ndarray) -> np.ndarray:
    """Scaled intersection ``scale * m1 * m2`` as float32."""
    if scale < 0:
        raise ParameterError(f"edit scale must be >= 0, got {scale}")
    if m1.shape != m2.shape:
        raise ParameterError(f"mask shapes differ: {m1.shape} vs {m2.shape}")
    return (scale * (np.asarray(m1, dtype=np.float32) * np.asarray(m2, dtype=np.float32)))


def masks_for_concept(
    psi: Field,
    stash: Optional[AttentionStash],
    tokens: Sequence[int],
    lam: float,
) -> MaskPair:
    """Compute both implicit masks for one concept at one step.

    ``M1`` needs an attention stash and a token subset; without either it
    falls back to all-ones and the noise mask alone localizes the edit.
    """
    hw = psi.shape[1:]
    if stash is not None and len(tokens) > 0:
        agg = aggregate_attention(stash, tokens)
        m1 = mask_from_attention(upsample_nearest(agg, hw), lam)
    else:
        m1 = np.ones(hw, dtype=np.float32)
    m2 = mask_from_noise(psi, lam)
    return MaskPair(m1=m1, m2=m2)
