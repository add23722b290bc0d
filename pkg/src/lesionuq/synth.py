"""Seeded generator of desk-scale scenes with planted TP and FP lesions.

Each scene carries ellipsoidal true lesions (present in the ground
truth) and false blobs (absent from it).  Per-sample foreground
probabilities are sigmoid(base_logit + scale * smooth_noise): true
lesions get strong logits with low noise, false blobs near-threshold
logits with high spatially-smooth noise, which plants the uncertainty
signal the downstream models must pick up.  Subpopulations (hard true
lesions and confident false blobs, both separable through the intensity
channel) keep aggregation baselines from saturating.

Randomness comes from PCG64 streams keyed by (seed, scene_index,
purpose), so every output is a pure function of (config, scene_index).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import expit

from .errors import GenerationError, InputError
from .volume import Dims, LabelVolume, McEnsemble, Volume

# rng purpose tags
_TAG_PLACEMENT = 0
_TAG_SUBPOP = 1
_TAG_INTENSITY = 2
_TAG_SAMPLE = 3

# logit falloff per unit of the ellipsoid field outside a false blob
_FP_EDGE_SLOPE = 6.0


@dataclass(frozen=True)
class SynthConfig:
    dims: Dims = field(default_factory=lambda: Dims(64, 64, 64))
    n_true_lesions: int = 4
    n_false_lesions: int = 3
    radius_range: tuple[float, float] = (2.0, 4.5)
    t_samples: int = 20
    detect_sharpness: float = 8.0
    true_noise: float = 0.6
    fp_base: float = 1.0
    fp_noise: float = 2.5
    hard_tp_fraction: float = 0.3
    hard_tp_noise: float = 2.2
    confident_fp_fraction: float = 0.3
    confident_fp_base: float = 3.5
    confident_fp_noise: float = 0.8
    background_logit: float = -6.0
    smooth_sigma: float = 2.0
    intensity_true: float = 2.0
    intensity_false: float = 0.7
    intensity_noise: float = 0.3
    placement_margin: float = 3.0
    max_placement_tries: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.n_true_lesions < 0 or self.n_false_lesions < 0:
            raise InputError("lesion counts must be >= 0")
        lo, hi = self.radius_range
        if lo < 1.0 or hi < lo:
            raise InputError(f"bad radius range {self.radius_range}")
        if self.t_samples < 2:
            raise InputError("need T >= 2 samples")
        if self.fp_noise <= self.true_noise:
            raise InputError("fp_noise must exceed true_noise")


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=tuple(key))))


def _place_blobs(cfg: SynthConfig, rng: np.random.Generator) -> list[dict]:
    """Non-overlapping centers/semi-axes; bounding-sphere separation."""
    dims = cfg.dims
    bounds = np.array([dims.nx, dims.ny, dims.nz], dtype=np.float64)
    total = cfg.n_true_lesions + cfg.n_false_lesions
    blobs: list[dict] = []
    for i in range(total):
        kind = "true" if i < cfg.n_true_lesions else "false"
        for _ in range(cfg.max_placement_tries):
            semi = rng.uniform(cfg.radius_range[0], cfg.radius_range[1], size=3)
            lo = semi + 1.0
            hi = bounds - 1.0 - semi
            if np.any(hi <= lo):
                raise GenerationError(
                    f"radius range {cfg.radius_range} does not fit dims {dims}"
                )
            center = rng.uniform(lo, hi)
            r = semi.max()
            clear = all(
                np.linalg.norm(center - b["center"]) >= r + b["semi_axes"].max() + cfg.placement_margin
                for b in blobs
            )
            if clear:
                blobs.append({"kind": kind, "center": center, "semi_axes": semi})
                break
        else:
            raise GenerationError(
                f"could not place blob {i + 1}/{total} within "
                f"{cfg.max_placement_tries} tries"
            )
    return blobs


def _ellipsoid_field(blob: dict, dims: Dims) -> np.ndarray:
    """q = 1 - normalized squared radius; q >= 0 inside the blob."""
    zz, yy, xx = np.ogrid[0 : dims.nz, 0 : dims.ny, 0 : dims.nx]
    cx, cy, cz = blob["center"]
    ax, ay, az = blob["semi_axes"]
    return 1.0 - ((xx - cx) / ax) ** 2 - ((yy - cy) / ay) ** 2 - ((zz - cz) / az) ** 2


def _smooth_unit_noise(rng: np.random.Generator, dims: Dims, sigma: float) -> np.ndarray:
    """Spatially smooth field rescaled to unit standard deviation."""
    white = rng.standard_normal(dims.shape3d)
    sm = gaussian_filter(white, sigma, mode="nearest")
    return sm / sm.std()


def generate_scene(cfg: SynthConfig, scene_index: int):
    """Build (gt, intensity, ensemble, manifest) for one scene."""
    dims = cfg.dims
    blobs = _place_blobs(cfg, _rng(cfg.seed, scene_index, _TAG_PLACEMENT))

    subpop_rng = _rng(cfg.seed, scene_index, _TAG_SUBPOP)
    for b in blobs:
        if b["kind"] == "true":
            hard = subpop_rng.random() < cfg.hard_tp_fraction
            b["noise"] = cfg.hard_tp_noise if hard else cfg.true_noise
            b["subpop"] = "hard" if hard else "easy"
        else:
            confident = subpop_rng.random() < cfg.confident_fp_fraction
            b["base"] = cfg.confident_fp_base if confident else cfg.fp_base
            b["noise"] = cfg.confident_fp_noise if confident else cfg.fp_noise
            b["subpop"] = "confident" if confident else "noisy"

    base = np.full(dims.shape3d, cfg.background_logit)
    noise_scale = np.full(dims.shape3d, cfg.true_noise)
    gt = np.zeros(dims.shape3d, dtype=np.int32)
    blob_indicator = np.zeros(dims.shape3d)
    for b in blobs:
        q = _ellipsoid_field(b, dims)
        support = q >= 0.0
        if b["kind"] == "true":
            np.maximum(base, cfg.detect_sharpness * q, out=base)
            gt[support] = 1
            blob_indicator[support] = cfg.intensity_true
        else:
            np.maximum(base, b["base"] + _FP_EDGE_SLOPE * q, out=base)
            blob_indicator[support] = cfg.intensity_false
        noise_scale[support] = b["noise"]

    samples = []
    for t in range(cfg.t_samples):
        eta = _smooth_unit_noise(_rng(cfg.seed, scene_index, _TAG_SAMPLE, t), dims, cfg.smooth_sigma)
        samples.append(Volume(dims, expit(base + noise_scale * eta).reshape(-1)))
    ensemble = McEnsemble(samples=tuple(samples))

    intensity = gaussian_filter(blob_indicator, 1.0, mode="nearest")
    intensity = intensity + cfg.intensity_noise * _smooth_unit_noise(
        _rng(cfg.seed, scene_index, _TAG_INTENSITY), dims, cfg.smooth_sigma
    )

    manifest = {
        "scene_index": scene_index,
        "scene_id": f"scene_{scene_index:04d}",
        "seed": cfg.seed,
        "dims": [dims.nx, dims.ny, dims.nz],
        "t_samples": cfg.t_samples,
        "blobs": [
            {
                "kind": b["kind"],
                "subpop": b["subpop"],
                "center": b["center"].tolist(),
                "semi_axes": b["semi_axes"].tolist(),
                "noise": b["noise"],
                "base": b.get("base", cfg.detect_sharpness),
            }
            for b in blobs
        ],
    }
    return (
        LabelVolume(dims, gt.reshape(-1)),
        Volume(dims, intensity.reshape(-1)),
        ensemble,
        manifest,
    )
