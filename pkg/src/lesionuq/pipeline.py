"""End-to-end orchestration: synth -> maps -> extract -> graphs -> folds.

Every stage reads and writes on-disk artifacts under one output
directory, so stages can be rerun or resumed independently and reruns
with the same config and seed are byte-identical.  The fold driver
mirrors the cross-validation protocol: per fold, 1/folds of the scenes
are the test set and 20% of the remainder (the "validation" scenes)
provide the lesion graphs that train the GCNN and MetaSeg models.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import partial
from pathlib import Path

import numpy as np

from .baselines import (
    MetaSegModel,
    aggregate_logsum,
    aggregate_mean,
    fit_metaseg,
    metaseg_features,
    metaseg_predict,
    size_uncertainty,
)
from .errors import ConfigError, TrainingError
from .evaluation import EvalReport, build_report
from .gcnn import GcnnModel, TrainConfig, load_model, predict_uncertainty, save_model, train
from .graphs import build_graph, read_graph_dataset, write_graph_dataset
from .lesions import (
    ComponentLabeling,
    Lesion,
    adjusted_iou,
    connected_components_26,
    dice,
    label_tp_fp,
    lesions_from_labeling,
)
from .maps import UncertaintyMaps, binarize, compute_maps
from .synth import SynthConfig, generate_scene
from .volume import Dims, load_label_volume, load_volume, save_volume

SCHEMA_VERSION = 1

METHODS = [
    "GCNN_Classif",
    "GCNN_Reg",
    "Entropy_mean",
    "Entropy_logsum",
    "Variance_mean",
    "Variance_logsum",
    "PCS_mean",
    "PCS_logsum",
    "Size",
    "MetaSeg_Classif",
    "MetaSeg_Reg",
]

MAP_FILES = {
    "mean_prob": "mean_prob.npy",
    "entropy": "entropy.npy",
    "variance": "variance.npy",
    "pcs_uncertainty": "pcs_uncertainty.npy",
}

_FOLD_TAG = 99


@dataclass
class PipelineConfig:
    out_dir: Path
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    n_scenes: int = 60
    folds: int = 4
    dilation_iters: int = 1
    threshold: float = 0.5
    epsilon: float = 0.1
    seed: int = 0
    jobs: int = 1
    resume: bool = False

    def __post_init__(self):
        self.out_dir = Path(self.out_dir)
        if self.folds < 2:
            raise ConfigError(f"fold count must be >= 2, got {self.folds}")
        if self.n_scenes < self.folds:
            raise ConfigError("need at least one scene per fold")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must be in (0,1)")
        if not 0.0 <= self.epsilon < 1.0:
            raise ConfigError("epsilon must be in [0,1)")


def _subseed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=tuple(key)).generate_state(1, np.uint64)[0])


def _coerce_section(section: dict, cls, path_fields=(), name="") -> dict:
    valid = set(cls.__dataclass_fields__)
    unknown = set(section) - valid
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {sorted(unknown)}")
    return section


def load_config(path, **overrides) -> PipelineConfig:
    """Parse a TOML pipeline config; keyword overrides win over file keys."""
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except (OSError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    version = raw.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}")
    pipe = dict(raw.pop("pipeline", {}))
    synth = dict(raw.pop("synth", {}))
    train_sec = dict(raw.pop("train", {}))
    if raw:
        raise ConfigError(f"unknown config section(s): {sorted(raw)}")
    try:
        if "dims" in synth:
            synth["dims"] = Dims(*synth["dims"])
        if "radius_range" in synth:
            synth["radius_range"] = tuple(synth["radius_range"])
        _coerce_section(synth, SynthConfig, name="synth")
        _coerce_section(train_sec, TrainConfig, name="train")
        valid_pipe = {
            "n_scenes",
            "folds",
            "dilation_iters",
            "threshold",
            "epsilon",
            "seed",
            "jobs",
            "out_dir",
        }
        unknown = set(pipe) - valid_pipe
        if unknown:
            raise ConfigError(f"unknown key(s) in [pipeline]: {sorted(unknown)}")
        for key, value in overrides.items():
            if value is None:
                continue
            if key in ("seed", "n_scenes", "folds", "jobs"):
                pipe[key] = value
            elif key == "out_dir":
                pipe["out_dir"] = value
            elif key == "resume":
                pipe["resume"] = value
        if "out_dir" not in pipe:
            raise ConfigError("output directory missing: set [pipeline] out_dir or pass --out")
        seed = int(pipe.get("seed", 0))
        synth.setdefault("seed", seed)
        cfg = PipelineConfig(
            out_dir=Path(pipe["out_dir"]),
            synth=SynthConfig(**synth),
            train=TrainConfig(**train_sec),
            n_scenes=int(pipe.get("n_scenes", 60)),
            folds=int(pipe.get("folds", 4)),
            dilation_iters=int(pipe.get("dilation_iters", 1)),
            threshold=float(pipe.get("threshold", 0.5)),
            epsilon=float(pipe.get("epsilon", 0.1)),
            seed=seed,
            jobs=int(pipe.get("jobs", 1)),
            resume=bool(pipe.get("resume", False)),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad config value: {e}") from None
    return cfg


# ---------------------------------------------------------------------------
# per-scene artifact layout and CSV helpers
# ---------------------------------------------------------------------------


def scene_id(index: int) -> str:
    return f"scene_{index:04d}"


def scene_dir(out_dir: Path, index: int) -> Path:
    return Path(out_dir) / "scenes" / scene_id(index)


def write_lesions_csv(lesions: list[Lesion], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id", "size", "iou_adj", "tp"])
        for l in lesions:
            w.writerow([l.id, l.size, repr(l.iou_adj), int(l.tp)])


def read_lesions_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return [
            {
                "id": int(row["id"]),
                "size": int(row["size"]),
                "iou_adj": float(row["iou_adj"]),
                "tp": bool(int(row["tp"])),
            }
            for row in csv.DictReader(f)
        ]


def _load_maps(sdir: Path) -> UncertaintyMaps:
    return UncertaintyMaps(**{k: load_volume(sdir / v) for k, v in MAP_FILES.items()})


def _load_lesions(sdir: Path) -> tuple[list[Lesion], ComponentLabeling]:
    labels = load_label_volume(sdir / "pred_labels.npy")
    labeling = ComponentLabeling(labels=labels, count=labels.max_label)
    lesions = lesions_from_labeling(labeling)
    rows = {r["id"]: r for r in read_lesions_csv(sdir / "lesions.csv")}
    lesions = [
        replace(l, iou_adj=rows[l.id]["iou_adj"], tp=rows[l.id]["tp"]) for l in lesions
    ]
    return lesions, labeling


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def _synth_scene(cfg: PipelineConfig, index: int) -> None:
    sdir = scene_dir(cfg.out_dir, index)
    (sdir / "samples").mkdir(parents=True, exist_ok=True)
    gt, intensity, ensemble, manifest = generate_scene(cfg.synth, index)
    save_volume(gt, sdir / "gt.npy")
    save_volume(intensity, sdir / "intensity.npy")
    for t, s in enumerate(ensemble.samples):
        save_volume(s, sdir / "samples" / f"sample_{t:03d}.npy")
    with open(sdir / "scene.json", "w") as f:
        json.dump(manifest, f, separators=(",", ":"), sort_keys=True)


def stage_synth(cfg: PipelineConfig) -> dict:
    """Generate all scenes plus the dataset manifest."""
    _run_scene_stage(cfg, _synth_scene, "synth")
    manifest = {
        "format_version": 1,
        "seed": cfg.synth.seed,
        "n_scenes": cfg.n_scenes,
        "t_samples": cfg.synth.t_samples,
        "scenes": [
            {
                "scene_id": scene_id(i),
                "index": i,
                "dir": f"scenes/{scene_id(i)}",
                "gt": f"scenes/{scene_id(i)}/gt.npy",
                "intensity": f"scenes/{scene_id(i)}/intensity.npy",
                "samples": [
                    f"scenes/{scene_id(i)}/samples/sample_{t:03d}.npy"
                    for t in range(cfg.synth.t_samples)
                ],
            }
            for i in range(cfg.n_scenes)
        ],
    }
    with open(cfg.out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return manifest


def _maps_scene(cfg: PipelineConfig, index: int) -> None:
    sdir = scene_dir(cfg.out_dir, index)
    sample_paths = sorted((sdir / "samples").glob("sample_*.npy"))
    from .volume import McEnsemble

    ensemble = McEnsemble(tuple(load_volume(p) for p in sample_paths))
    maps = compute_maps(ensemble)
    for attr, fname in MAP_FILES.items():
        save_volume(getattr(maps, attr), sdir / fname)
    save_volume(binarize(maps.mean_prob, cfg.threshold), sdir / "seg.npy")


def stage_maps(cfg: PipelineConfig) -> None:
    _run_scene_stage(cfg, _maps_scene, "maps")


def _extract_scene(cfg: PipelineConfig, index: int) -> None:
    sdir = scene_dir(cfg.out_dir, index)
    seg = load_label_volume(sdir / "seg.npy")
    gt = load_label_volume(sdir / "gt.npy")
    pred_cl = connected_components_26(seg)
    gt_cl = connected_components_26(gt)
    lesions = lesions_from_labeling(pred_cl)
    lesions = [replace(l, iou_adj=adjusted_iou(l, pred_cl, gt_cl)) for l in lesions]
    lesions = label_tp_fp(lesions, cfg.epsilon)
    save_volume(pred_cl.labels, sdir / "pred_labels.npy")
    write_lesions_csv(lesions, sdir / "lesions.csv")
    stats = {
        "scene_id": scene_id(index),
        "dice": dice(seg, gt),
        "n_lesions": len(lesions),
        "n_tp": sum(l.tp for l in lesions),
        "n_fp": sum(not l.tp for l in lesions),
    }
    with open(sdir / "stats.json", "w") as f:
        json.dump(stats, f, separators=(",", ":"), sort_keys=True)


def stage_extract(cfg: PipelineConfig) -> None:
    _run_scene_stage(cfg, _extract_scene, "extract")


def _graphs_scene(cfg: PipelineConfig, index: int) -> None:
    sdir = scene_dir(cfg.out_dir, index)
    intensity = load_volume(sdir / "intensity.npy")
    maps = _load_maps(sdir)
    lesions, labeling = _load_lesions(sdir)
    graphs = [
        build_graph(l, [intensity], labeling.labels, maps, cfg.dilation_iters, scan_id=scene_id(index))
        for l in lesions
    ]
    write_graph_dataset(graphs, sdir / "graphs.jsonl", n_channels=1)


def stage_graphs(cfg: PipelineConfig) -> None:
    _run_scene_stage(cfg, _graphs_scene, "graphs")


def _run_scene_stage(cfg: PipelineConfig, worker, name: str) -> None:
    marker = cfg.out_dir / f".stage_{name}.done"
    if cfg.resume and marker.exists():
        return
    indices = range(cfg.n_scenes)
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as ex:
            list(ex.map(partial(worker, cfg), indices))
    else:
        for i in indices:
            worker(cfg, i)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    marker.write_text("ok\n")


# ---------------------------------------------------------------------------
# folds
# ---------------------------------------------------------------------------


def fold_split(cfg: PipelineConfig) -> list[dict]:
    """Per fold: 1/folds of the scenes test, 20% of the rest validation."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(_FOLD_TAG,)))
    perm = rng.permutation(cfg.n_scenes)
    chunks = np.array_split(perm, cfg.folds)
    out = []
    for k in range(cfg.folds):
        test = sorted(int(i) for i in chunks[k])
        rest = [int(i) for i in perm if int(i) not in set(test)]
        n_val = max(1, int(round(0.2 * len(rest))))
        out.append(
            {
                "fold": k,
                "test": test,
                "validation": sorted(rest[:n_val]),
                "train": sorted(rest[n_val:]),
            }
        )
    return out


def _score_fold(cfg: PipelineConfig, fold: dict, fdir: Path) -> EvalReport:
    """Train per-fold models on validation scenes, score test lesions."""
    val_graphs = []
    for i in fold["validation"]:
        val_graphs.extend(read_graph_dataset(scene_dir(cfg.out_dir, i) / "graphs.jsonl"))
    if not val_graphs:
        raise TrainingError(f"fold {fold['fold']}: no validation graphs")

    models: dict[str, GcnnModel] = {}
    for variant, name in (("classification", "GCNN_Classif"), ("regression", "GCNN_Reg")):
        tc = replace(
            cfg.train,
            variant=variant,
            epsilon=cfg.epsilon,
            seed=_subseed(cfg.seed, fold["fold"], 1 if variant == "classification" else 2),
        )
        model, log = train(val_graphs, tc)
        save_model(model, fdir / f"gcnn_{variant}.bin")
        with open(fdir / f"gcnn_{variant}_log.json", "w") as f:
            json.dump(log, f, separators=(",", ":"))
        models[name] = model

    val_lesions, val_feats = [], []
    for i in fold["validation"]:
        sdir = scene_dir(cfg.out_dir, i)
        lesions, _ = _load_lesions(sdir)
        maps = _load_maps(sdir)
        for l in lesions:
            val_lesions.append(l)
            val_feats.append(metaseg_features(l, maps))
    metaseg = {
        "MetaSeg_Classif": fit_metaseg(np.array(val_feats), val_lesions, "classification"),
        "MetaSeg_Reg": fit_metaseg(np.array(val_feats), val_lesions, "regression"),
    }
    for name, m in metaseg.items():
        kind = "classification" if name.endswith("Classif") else "regression"
        (fdir / f"metaseg_{kind}.json").write_text(m.to_json() + "\n")

    scores: dict[str, dict] = {m: {} for m in METHODS}
    universe = []
    dice_by_scan = {}
    for i in fold["test"]:
        sdir = scene_dir(cfg.out_dir, i)
        sid = scene_id(i)
        lesions, _ = _load_lesions(sdir)
        maps = _load_maps(sdir)
        graphs = {g.lesion_id: g for g in read_graph_dataset(sdir / "graphs.jsonl")}
        with open(sdir / "stats.json") as f:
            dice_by_scan[sid] = json.load(f)["dice"]
        for l in lesions:
            key = (sid, l.id)
            universe.append((sid, l.id, l.size, l.tp))
            g = graphs[l.id]
            feats = metaseg_features(l, maps)
            scores["GCNN_Classif"][key] = predict_uncertainty(g, models["GCNN_Classif"])
            scores["GCNN_Reg"][key] = predict_uncertainty(g, models["GCNN_Reg"])
            scores["Entropy_mean"][key] = aggregate_mean(l, maps.entropy)
            scores["Entropy_logsum"][key] = aggregate_logsum(l, maps.entropy)
            scores["Variance_mean"][key] = aggregate_mean(l, maps.variance)
            scores["Variance_logsum"][key] = aggregate_logsum(l, maps.variance)
            scores["PCS_mean"][key] = aggregate_mean(l, maps.pcs_uncertainty)
            scores["PCS_logsum"][key] = aggregate_logsum(l, maps.pcs_uncertainty)
            scores["Size"][key] = size_uncertainty(l)
            scores["MetaSeg_Classif"][key] = metaseg_predict(feats, metaseg["MetaSeg_Classif"])
            scores["MetaSeg_Reg"][key] = metaseg_predict(feats, metaseg["MetaSeg_Reg"])

    write_scores_csv(scores, universe, fdir / "scores.csv")
    report = build_report(scores, universe, dice_by_scan)
    write_report_csv(report, fdir / "report.csv")
    (fdir / "curves").mkdir(exist_ok=True)
    for method in METHODS:
        write_curve_csv(report.curves[method], fdir / "curves" / f"{method}.csv")
    return report


def write_scores_csv(scores: dict, universe: list, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["scan_id", "lesion_id", "size", "tp"] + METHODS)
        for sid, lid, size, tp in sorted(universe):
            row = [sid, lid, size, int(tp)]
            row += [repr(float(scores[m][(sid, lid)])) for m in METHODS]
            w.writerow(row)


def write_report_csv(report: EvalReport, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["method", "auc_pct", "spearman_rho"])
        for m in report.methods:
            w.writerow([m, repr(report.auc[m]), repr(report.spearman[m])])


def write_curve_csv(points, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["tau", "fp_norm", "tp_norm"])
        for p in points:
            w.writerow([repr(p.tau), repr(p.fp_norm), repr(p.tp_norm)])


def stage_folds(cfg: PipelineConfig) -> dict:
    splits = fold_split(cfg)
    fold_reports = []
    for fold in splits:
        fdir = cfg.out_dir / "folds" / f"fold_{fold['fold']}"
        fdir.mkdir(parents=True, exist_ok=True)
        with open(fdir / "split.json", "w") as f:
            json.dump(fold, f, separators=(",", ":"), sort_keys=True)
        fold_reports.append(_score_fold(cfg, fold, fdir))

    averaged = {
        m: {
            "auc_pct": float(np.mean([r.auc[m] for r in fold_reports])),
            "spearman_rho": float(np.mean([r.spearman[m] for r in fold_reports])),
        }
        for m in METHODS
    }
    with open(cfg.out_dir / "report.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["method", "auc_pct", "spearman_rho"])
        for m in METHODS:
            w.writerow([m, repr(averaged[m]["auc_pct"]), repr(averaged[m]["spearman_rho"])])
    with open(cfg.out_dir / "folds.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["fold", "method", "auc_pct", "spearman_rho"])
        for k, r in enumerate(fold_reports):
            for m in METHODS:
                w.writerow([k, m, repr(r.auc[m]), repr(r.spearman[m])])
    dice_all = {}
    for r in fold_reports:
        dice_all.update(r.dice)
    with open(cfg.out_dir / "dice.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["scan_id", "dice"])
        for sid in sorted(dice_all):
            w.writerow([sid, repr(dice_all[sid])])
    summary = {
        "methods": METHODS,
        "report": averaged,
        "folds": [
            {"fold": k, "tp_total": r.tp_total, "fp_total": r.fp_total}
            for k, r in enumerate(fold_reports)
        ],
    }
    with open(cfg.out_dir / "summary.json", "w") as f:
        json.dump(summary, f, indent=1, sort_keys=True)
    return summary


def run_pipeline(cfg: PipelineConfig) -> dict:
    """Execute every stage in order; returns the averaged summary."""
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    stage_synth(cfg)
    stage_maps(cfg)
    stage_extract(cfg)
    stage_graphs(cfg)
    return stage_folds(cfg)
