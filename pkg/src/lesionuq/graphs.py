"""Convert dilated lesions into featured graphs and persist graph datasets.

Node features are, in fixed column order: the n intensity channels, the
binarized lesion label, then entropy, variance and PCS uncertainty.
Nodes are the dilated lesion's voxels sorted by linear index; edges join
26-adjacent voxel pairs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import FormatError, InputError
from .lesions import Lesion, dilate_26
from .maps import UncertaintyMaps
from .volume import Dims, LabelVolume, Volume, to_linear

DATASET_FORMAT_VERSION = 1

# Lexicographically positive (dz, dy, dx) offsets: each 26-neighbor pair
# is visited exactly once, from the smaller linear index.
_OFFS_FWD = np.array(
    [
        (dz, dy, dx)
        for dz in (-1, 0, 1)
        for dy in (-1, 0, 1)
        for dx in (-1, 0, 1)
        if (dz, dy, dx) > (0, 0, 0)
    ],
    dtype=np.int64,
)


def feature_names(n_channels: int) -> list[str]:
    names = [f"intensity_{i}" for i in range(n_channels)]
    return names + ["label", "entropy", "variance", "pcs_uncertainty"]


@dataclass(frozen=True, eq=False)
class LesionGraph:
    """Featured graph of one dilated lesion.

    node_features: (N, F) float64, F = n_channels + 4.
    edges: (E, 2) int32 with i < j, sorted; no self-edges (the GCN layer
    adds self-loops itself).
    """

    node_features: np.ndarray
    edges: np.ndarray
    iou_adj: float
    tp: bool
    lesion_id: int
    scan_id: str

    @property
    def n_nodes(self) -> int:
        return self.node_features.shape[0]

    @property
    def n_features(self) -> int:
        return self.node_features.shape[1]


@dataclass(frozen=True)
class FeatureScaler:
    """Per-column z-score statistics fitted on a training graph pool."""

    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureScaler":
        return cls(np.asarray(d["mean"], float), np.asarray(d["std"], float))


def adjacency_edges(voxels: np.ndarray, dims: Dims) -> np.ndarray:
    """26-adjacency edges among a voxel set sorted by linear index."""
    n = voxels.shape[0]
    lin = to_linear(voxels[:, 0], voxels[:, 1], voxels[:, 2], dims)
    pairs = []
    for dz, dy, dx in _OFFS_FWD:
        cand = voxels + np.array([dx, dy, dz], dtype=voxels.dtype)
        ok = (
            (cand[:, 0] >= 0)
            & (cand[:, 0] < dims.nx)
            & (cand[:, 1] >= 0)
            & (cand[:, 1] < dims.ny)
            & (cand[:, 2] >= 0)
            & (cand[:, 2] < dims.nz)
        )
        src = np.nonzero(ok)[0]
        nb_lin = to_linear(cand[src, 0], cand[src, 1], cand[src, 2], dims)
        pos = np.searchsorted(lin, nb_lin)
        hit = (pos < n) & (lin[np.minimum(pos, n - 1)] == nb_lin)
        pairs.append(np.stack([src[hit], pos[hit]], axis=1))
    if not pairs:
        return np.zeros((0, 2), dtype=np.int32)
    edges = np.concatenate(pairs, axis=0).astype(np.int32)
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    return edges[order]


def build_graph(
    lesion: Lesion,
    intensity: Sequence[Volume],
    seg: LabelVolume,
    maps: UncertaintyMaps,
    dilation_iters: int = 1,
    scan_id: str = "scan",
) -> LesionGraph:
    """Graph over the dilated lesion.

    seg must be the component labeling of the prediction: the label
    column is 1 exactly on the lesion's own (pre-dilation) voxels, so a
    sibling component caught in the dilation ring still reads 0.
    """
    if lesion.size < 1:
        raise InputError("lesion has no voxels")
    dims = seg.dims
    for v in list(intensity) + [
        maps.entropy,
        maps.variance,
        maps.pcs_uncertainty,
    ]:
        if v.dims != dims:
            raise InputError("all volumes must share dims")
    nodes = dilate_26(lesion.voxels, dims, dilation_iters)
    lin = to_linear(nodes[:, 0], nodes[:, 1], nodes[:, 2], dims)
    cols = [v.data[lin] for v in intensity]
    cols.append((seg.data[lin] == lesion.id).astype(np.float64))
    cols.append(maps.entropy.data[lin])
    cols.append(maps.variance.data[lin])
    cols.append(maps.pcs_uncertainty.data[lin])
    features = np.stack(cols, axis=1)
    edges = adjacency_edges(nodes.astype(np.int64), dims)
    return LesionGraph(
        node_features=features,
        edges=edges,
        iou_adj=float(lesion.iou_adj),
        tp=bool(lesion.tp),
        lesion_id=int(lesion.id),
        scan_id=scan_id,
    )


def fit_scaler(graphs: Sequence[LesionGraph]) -> FeatureScaler:
    """Column-wise mean/std over all nodes of the training pool.

    Columns with zero variance keep std 1 so they pass through unchanged.
    """
    if not graphs:
        raise InputError("cannot fit a scaler on an empty graph set")
    pooled = np.concatenate([g.node_features for g in graphs], axis=0)
    mean = pooled.mean(axis=0)
    std = pooled.std(axis=0)
    std = np.where(std > 0.0, std, 1.0)
    return FeatureScaler(mean=mean, std=std)


def apply_scaler(g: LesionGraph, scaler: FeatureScaler) -> LesionGraph:
    scaled = (g.node_features - scaler.mean) / scaler.std
    return replace(g, node_features=scaled)


def write_graph_dataset(graphs: Sequence[LesionGraph], path, n_channels: int | None = None) -> None:
    """JSON Lines: header line, then one graph per line.

    An empty dataset writes an empty file.  Floats go through Python's
    shortest round-trip repr, so reading back is exact.
    """
    graphs = list(graphs)
    with open(path, "w", encoding="utf-8") as f:
        if not graphs:
            return
        if n_channels is None:
            n_channels = graphs[0].n_features - 4
        header = {
            "format_version": DATASET_FORMAT_VERSION,
            "n_channels": n_channels,
            "feature_names": feature_names(n_channels),
        }
        f.write(json.dumps(header, separators=(",", ":")) + "\n")
        for g in graphs:
            rec = {
                "scan_id": g.scan_id,
                "lesion_id": g.lesion_id,
                "n_nodes": g.n_nodes,
                "features": g.node_features.reshape(-1).tolist(),
                "edges": g.edges.tolist(),
                "iou_adj": g.iou_adj,
                "tp": g.tp,
            }
            f.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_graph_dataset(path) -> list[LesionGraph]:
    with open(path, "r", encoding="utf-8") as f:
        first = f.readline()
        if not first.strip():
            return []
        try:
            header = json.loads(first)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: line 1: invalid JSON header: {e}") from None
        for key in ("format_version", "n_channels", "feature_names"):
            if key not in header:
                raise FormatError(f"{path}: line 1: header missing {key!r}")
        if header["format_version"] != DATASET_FORMAT_VERSION:
            raise FormatError(
                f"{path}: unsupported dataset format version {header['format_version']}"
            )
        n_feat = int(header["n_channels"]) + 4
        graphs = []
        for lineno, line in enumerate(f, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}: line {lineno}: invalid JSON: {e}") from None
            for key in ("scan_id", "lesion_id", "n_nodes", "features", "edges", "iou_adj", "tp"):
                if key not in rec:
                    raise FormatError(f"{path}: line {lineno}: missing {key!r}")
            n = int(rec["n_nodes"])
            feats = np.asarray(rec["features"], dtype=np.float64)
            if feats.size != n * n_feat:
                raise FormatError(
                    f"{path}: line {lineno}: expected {n * n_feat} feature values, got {feats.size}"
                )
            edges = np.asarray(rec["edges"], dtype=np.int32).reshape(-1, 2)
            graphs.append(
                LesionGraph(
                    node_features=feats.reshape(n, n_feat),
                    edges=edges,
                    iou_adj=float(rec["iou_adj"]),
                    tp=bool(rec["tp"]),
                    lesion_id=int(rec["lesion_id"]),
                    scan_id=str(rec["scan_id"]),
                )
            )
    return graphs
