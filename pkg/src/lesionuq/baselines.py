"""Comparison methods: per-map mean/logsum aggregation, the 1/S size
heuristic, and MetaSeg-style linear/logistic models on 4 lesion features.

Aggregations run over the undilated lesion voxels; dilation is a
graph-construction device only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import InputError, TrainingError
from .graphs import FeatureScaler
from .lesions import Lesion
from .maps import UncertaintyMaps
from .volume import Volume, to_linear

LOGSUM_DELTA = 1e-12

METASEG_FEATURES = ["mean_entropy", "mean_variance", "mean_pcs_uncertainty", "size"]

LOGISTIC_MAX_ITERS = 100_000
LOGISTIC_GRAD_TOL = 1e-8
OLS_RIDGE = 1e-8


def _lesion_values(lesion: Lesion, vol: Volume) -> np.ndarray:
    if lesion.size < 1 or lesion.voxels.shape[0] == 0:
        raise InputError("lesion has no voxels")
    v = lesion.voxels
    return vol.data[to_linear(v[:, 0], v[:, 1], v[:, 2], vol.dims)]


def aggregate_mean(lesion: Lesion, vol: Volume) -> float:
    return float(_lesion_values(lesion, vol).mean())


def aggregate_logsum(lesion: Lesion, vol: Volume) -> float:
    """Sum of log uncertainties; larger (less negative) = more uncertain.

    The delta guard keeps log defined at u = 0.
    """
    return float(np.log(_lesion_values(lesion, vol) + LOGSUM_DELTA).sum())


def size_uncertainty(lesion: Lesion) -> float:
    return 1.0 / lesion.size


def metaseg_features(lesion: Lesion, maps: UncertaintyMaps) -> np.ndarray:
    """(mean entropy, mean variance, mean PCS uncertainty, size)."""
    return np.array(
        [
            aggregate_mean(lesion, maps.entropy),
            aggregate_mean(lesion, maps.variance),
            aggregate_mean(lesion, maps.pcs_uncertainty),
            float(lesion.size),
        ]
    )


def _with_intercept(x: np.ndarray) -> np.ndarray:
    return np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)


def linear_regression_fit(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """OLS via normal equations with a small ridge for conditioning.

    x is (M, 4) and already z-scored; returns 5 weights, intercept last.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[0] <= x.shape[1] + 1:
        raise InputError(f"need M > {x.shape[1] + 1} rows, got {x.shape[0]}")
    xa = _with_intercept(x)
    gram = xa.T @ xa + OLS_RIDGE * np.eye(xa.shape[1])
    try:
        return np.linalg.solve(gram, xa.T @ y)
    except np.linalg.LinAlgError as e:
        raise TrainingError(f"normal equations unsolvable: {e}") from None


def logistic_regression_fit(x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Full-batch gradient descent on the mean log-loss.

    labels are {0,1}; descends with step 1/L (L from the Gram spectrum)
    until the gradient norm drops below 1e-8 or the iteration cap.
    Returns 5 weights, intercept last.
    """
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(labels, dtype=np.float64)
    if x.shape[0] <= x.shape[1] + 1:
        raise InputError(f"need M > {x.shape[1] + 1} rows, got {x.shape[0]}")
    xa = _with_intercept(x)
    m = xa.shape[0]
    lmax = float(np.linalg.eigvalsh(xa.T @ xa / m).max())
    step = 1.0 / max(lmax / 4.0, 1e-12)
    w = np.zeros(xa.shape[1])
    for _ in range(LOGISTIC_MAX_ITERS):
        z = xa @ w
        p = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
        grad = xa.T @ (p - t) / m
        if np.linalg.norm(grad) < LOGISTIC_GRAD_TOL:
            break
        w -= step * grad
    return w


@dataclass(frozen=True)
class MetaSegModel:
    """Fitted MetaSeg head: z-score scaler plus 5 weights (intercept last)."""

    kind: str  # "classification" | "regression"
    scaler: FeatureScaler
    weights: np.ndarray

    def to_json(self) -> str:
        return json.dumps(
            {
                "format_version": 1,
                "kind": self.kind,
                "feature_names": METASEG_FEATURES,
                "scaler": self.scaler.to_dict(),
                "weights": self.weights.tolist(),
            },
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, text: str) -> "MetaSegModel":
        d = json.loads(text)
        return cls(
            kind=d["kind"],
            scaler=FeatureScaler.from_dict(d["scaler"]),
            weights=np.asarray(d["weights"], dtype=np.float64),
        )


def fit_metaseg(features: np.ndarray, lesions: list[Lesion], kind: str) -> MetaSegModel:
    """Fit on TP/FP labels (classification, 1 = FP) or iou_adj (regression)."""
    if kind not in ("classification", "regression"):
        raise InputError(f"unknown MetaSeg kind {kind!r}")
    features = np.asarray(features, dtype=np.float64)
    mean = features.mean(axis=0)
    std = features.std(axis=0)
    std = np.where(std > 0.0, std, 1.0)
    scaler = FeatureScaler(mean=mean, std=std)
    z = (features - mean) / std
    if kind == "classification":
        labels = np.array([0.0 if l.tp else 1.0 for l in lesions])
        if labels.min() == labels.max():
            raise TrainingError("MetaSeg classification needs both TP and FP lesions")
        w = logistic_regression_fit(z, labels)
    else:
        w = linear_regression_fit(z, np.array([l.iou_adj for l in lesions]))
    return MetaSegModel(kind=kind, scaler=scaler, weights=w)


def metaseg_predict(features: np.ndarray, model: MetaSegModel) -> float:
    """Uncertainty in [0,1]: P(FP) for classification, clamp(1 - iou) for
    regression."""
    f = (np.asarray(features, dtype=np.float64) - model.scaler.mean) / model.scaler.std
    z = float(f @ model.weights[:-1] + model.weights[-1])
    if model.kind == "classification":
        if z >= 0:
            return float(1.0 / (1.0 + np.exp(-z)))
        return float(np.exp(z) / (1.0 + np.exp(z)))
    return float(np.clip(1.0 - z, 0.0, 1.0))
