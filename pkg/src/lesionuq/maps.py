"""Reduce a Monte-Carlo ensemble to voxel-wise uncertainty maps.

Three maps share the "larger = more uncertain" orientation: binary
entropy of the mean probability (bits), population variance across the
T samples, and 1 - |2p - 1| (the complement of the confidence gap).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .volume import LabelVolume, McEnsemble, Volume


@dataclass(frozen=True)
class UncertaintyMaps:
    mean_prob: Volume
    entropy: Volume
    variance: Volume
    pcs_uncertainty: Volume


def binary_entropy_bits(p: np.ndarray) -> np.ndarray:
    """H(p) = -p log2 p - (1-p) log2(1-p), with 0 log 0 = 0."""
    out = np.zeros_like(p)
    inner = (p > 0.0) & (p < 1.0)
    q = p[inner]
    out[inner] = -(q * np.log2(q) + (1.0 - q) * np.log2(1.0 - q))
    return out


def compute_maps(ensemble: McEnsemble) -> UncertaintyMaps:
    """Mean probability plus the three per-voxel uncertainty maps.

    Variance is the population variance (divide by T): the T passes are
    the whole empirical predictive distribution, not a sample of it.
    """
    stack = np.stack([s.data for s in ensemble.samples])
    mean = stack.mean(axis=0)
    variance = np.mean((stack - mean) ** 2, axis=0)
    entropy = binary_entropy_bits(mean)
    pcs = 1.0 - np.abs(2.0 * mean - 1.0)
    dims = ensemble.dims
    return UncertaintyMaps(
        mean_prob=Volume(dims, mean),
        entropy=Volume(dims, entropy),
        variance=Volume(dims, variance),
        pcs_uncertainty=Volume(dims, pcs),
    )


def binarize(mean_prob: Volume, threshold: float = 0.5) -> LabelVolume:
    """Foreground where p > threshold (ties go to background)."""
    if not 0.0 < threshold < 1.0:
        raise InputError(f"threshold must be in (0,1), got {threshold}")
    mask = (mean_prob.data > threshold).astype(np.int32)
    return LabelVolume(mean_prob.dims, mask)
