"""Lesion identification and matching: 26-connectivity CCA, Adjusted IoU,
TP/FP labeling, Dice, and binary dilation of voxel sets."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import _kernels
from .errors import InputError
from .volume import Dims, LabelVolume, to_linear

# Full 3x3x3 structuring element, as (dz, dy, dx) including center.
_STRUCT27 = [(dz, dy, dx) for dz in (0, 1, 2) for dy in (0, 1, 2) for dx in (0, 1, 2)]


@dataclass(frozen=True)
class Lesion:
    """One 26-connected predicted component.

    voxels is an (S, 3) int array of (x, y, z) rows sorted by linear
    index; iou_adj and tp are filled in by matching/labeling.
    """

    id: int
    voxels: np.ndarray
    size: int
    iou_adj: float = 0.0
    tp: bool = False


@dataclass(frozen=True)
class ComponentLabeling:
    labels: LabelVolume
    count: int


def connected_components_26(mask: LabelVolume) -> ComponentLabeling:
    """Maximal 26-connected foreground components, labeled 1..K in
    ascending order of each component's first (smallest linear index)
    voxel."""
    if mask.max_label > 1:
        raise InputError(f"mask must be binary, found label {mask.max_label}")
    m3d = mask.as_3d().astype(np.uint8)
    labels3d, count = _kernels.cca26_label(m3d)
    return ComponentLabeling(LabelVolume(mask.dims, labels3d.reshape(-1)), count)


def lesions_from_labeling(labeling: ComponentLabeling) -> list[Lesion]:
    """One Lesion per component id, voxels in ascending linear order."""
    arr = labeling.labels.as_3d()
    zz, yy, xx = np.nonzero(arr)
    ids = arr[zz, yy, xx]
    out = []
    for k in range(1, labeling.count + 1):
        sel = ids == k
        voxels = np.stack([xx[sel], yy[sel], zz[sel]], axis=1).astype(np.int32)
        out.append(Lesion(id=k, voxels=voxels, size=int(voxels.shape[0])))
    return out


def adjusted_iou(lesion: Lesion, pred: ComponentLabeling, gt: ComponentLabeling) -> float:
    """|k ∩ G| / |k ∪ (G \\ A)| where G is the union of ground-truth
    components touching k and A the union of the other predicted
    components.  Sibling predictions covering the rest of a fragmented
    ground-truth lesion therefore do not count against k."""
    if pred.labels.dims != gt.labels.dims:
        raise InputError("pred and gt labelings must share dims")
    pred_ids = pred.labels.data
    gt_ids = gt.labels.data
    k_mask = pred_ids == lesion.id
    touched = np.unique(gt_ids[k_mask])
    touched = touched[touched > 0]
    if touched.size == 0:
        return 0.0
    g_mask = np.isin(gt_ids, touched)
    a_mask = (pred_ids > 0) & ~k_mask
    inter = int(np.count_nonzero(k_mask & g_mask))
    union = int(np.count_nonzero(k_mask | (g_mask & ~a_mask)))
    return inter / union


def label_tp_fp(lesions: list[Lesion], epsilon: float) -> list[Lesion]:
    """tp = (iou_adj >= epsilon); the boundary counts as TP."""
    if not 0.0 <= epsilon < 1.0:
        raise InputError(f"epsilon must be in [0,1), got {epsilon}")
    return [replace(l, tp=bool(l.iou_adj >= epsilon)) for l in lesions]


def dice(pred: LabelVolume, gt: LabelVolume) -> float:
    """2|P∩G| / (|P|+|G|); two empty masks give 1.0 by convention."""
    if pred.dims != gt.dims:
        raise InputError("masks must share dims")
    if pred.max_label > 1 or gt.max_label > 1:
        raise InputError("dice expects binary masks")
    p = pred.data > 0
    g = gt.data > 0
    denom = int(np.count_nonzero(p)) + int(np.count_nonzero(g))
    if denom == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(p & g)) / denom


def dilate_26(voxels: np.ndarray, dims: Dims, iterations: int = 1) -> np.ndarray:
    """Binary dilation of a voxel set with the 3x3x3 structuring element,
    clipped to the volume bounds.  Returns (M, 3) rows sorted by linear
    index; iterations=0 is the identity."""
    if iterations < 0:
        raise InputError(f"iterations must be >= 0, got {iterations}")
    voxels = np.asarray(voxels, dtype=np.int64).reshape(-1, 3)
    if voxels.shape[0] == 0 or iterations == 0:
        return _canonical(voxels, dims)
    lo = voxels.min(axis=0) - iterations
    hi = voxels.max(axis=0) + iterations
    shape = (hi - lo + 1)[::-1]  # local (z, y, x) box
    mask = np.zeros(shape, dtype=bool)
    mask[voxels[:, 2] - lo[2], voxels[:, 1] - lo[1], voxels[:, 0] - lo[0]] = True
    for _ in range(iterations):
        p = np.pad(mask, 1)
        acc = np.zeros_like(mask)
        for dz, dy, dx in _STRUCT27:
            acc |= p[dz : dz + shape[0], dy : dy + shape[1], dx : dx + shape[2]]
        mask = acc
    lz, ly, lx = np.nonzero(mask)
    out = np.stack([lx + lo[0], ly + lo[1], lz + lo[2]], axis=1)
    in_bounds = (
        (out[:, 0] >= 0)
        & (out[:, 0] < dims.nx)
        & (out[:, 1] >= 0)
        & (out[:, 1] < dims.ny)
        & (out[:, 2] >= 0)
        & (out[:, 2] < dims.nz)
    )
    return _canonical(out[in_bounds], dims)


def _canonical(voxels: np.ndarray, dims: Dims) -> np.ndarray:
    """Sort (x,y,z) rows by linear index and cast to int32."""
    if voxels.shape[0] == 0:
        return voxels.astype(np.int32)
    order = np.argsort(to_linear(voxels[:, 0], voxels[:, 1], voxels[:, 2], dims))
    return voxels[order].astype(np.int32)
