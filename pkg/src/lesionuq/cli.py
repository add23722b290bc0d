"""Command-line interface.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric/training
error.
"""

from __future__ import annotations

import csv
import functools
import glob as globmod
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from . import baselines as bl
from . import pipeline as pl
from .errors import ConfigError, EvaluationError, InputError, LesionUQError, ReportError
from .evaluation import build_report, write_curves_svg
from .gcnn import TrainConfig, load_model, predict_uncertainty, save_model, train
from .graphs import read_graph_dataset
from .lesions import adjusted_iou, connected_components_26, dice, label_tp_fp, lesions_from_labeling
from .maps import binarize, compute_maps
from .volume import McEnsemble, load_label_volume, load_volume, save_volume

log = logging.getLogger("lesionuq")


def _wrap_errors(stage):
    def decorator(fn):
        @functools.wraps(fn)
        def inner(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except LesionUQError as e:
                click.echo(f"error [{stage}]: {e}", err=True)
                sys.exit(getattr(e, "exit_code", 3))
            except OSError as e:
                click.echo(f"error [{stage}]: {e}", err=True)
                sys.exit(3)
            except np.linalg.LinAlgError as e:
                click.echo(f"error [{stage}]: numeric failure: {e}", err=True)
                sys.exit(4)

        return inner

    return decorator


@click.group()
@click.option("--config", type=click.Path(), default=None, help="TOML pipeline config.")
@click.option("--seed", type=int, default=None, help="Master seed override.")
@click.option("--out", type=click.Path(), default=None, help="Output directory.")
@click.option("--jobs", type=int, default=None, help="Parallel scene workers.")
@click.option(
    "--log-level",
    type=click.Choice(["debug", "info", "warning", "error"]),
    default="info",
    show_default=True,
)
@click.pass_context
def cli(ctx, config, seed, out, jobs, log_level):
    """Lesion-level uncertainty from Monte-Carlo segmentation ensembles."""
    logging.basicConfig(
        level=getattr(logging, log_level.upper()),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    ctx.obj = {"config": config, "seed": seed, "out": out, "jobs": jobs}


def _pipeline_cfg(obj, resume=False) -> pl.PipelineConfig:
    overrides = {
        "seed": obj["seed"],
        "out_dir": obj["out"],
        "jobs": obj["jobs"],
        "resume": resume or None,
    }
    if obj["config"] is not None:
        return pl.load_config(obj["config"], **overrides)
    if obj["out"] is None:
        raise ConfigError("output directory missing: pass --out or a config file")
    kwargs = {k: v for k, v in overrides.items() if v is not None}
    seed = int(kwargs.pop("seed", 0))
    cfg = pl.PipelineConfig(out_dir=Path(kwargs.pop("out_dir")), seed=seed, **kwargs)
    cfg.synth = replace(cfg.synth, seed=seed)
    return cfg


@cli.command()
@click.pass_obj
@_wrap_errors("synth")
def synth(obj):
    """Generate synthetic scenes and the dataset manifest."""
    cfg = _pipeline_cfg(obj)
    log.info("generating %d scenes under %s", cfg.n_scenes, cfg.out_dir)
    pl.stage_synth(cfg)
    click.echo(f"wrote {cfg.n_scenes} scenes to {cfg.out_dir}")


@cli.command()
@click.option("--samples", default=None, help="Glob of sample NPY files.")
@click.option("--manifest", type=click.Path(), default=None, help="Dataset manifest JSON.")
@click.option("--scene", default=None, help="Scene id inside the manifest.")
@click.option("--threshold", type=float, default=0.5, show_default=True)
@click.pass_obj
@_wrap_errors("maps")
def maps(obj, samples, manifest, scene, threshold):
    """Compute uncertainty maps and the binarized mask from T samples."""
    if obj["out"] is None:
        raise ConfigError("maps needs --out")
    out = Path(obj["out"])
    if samples:
        paths = sorted(globmod.glob(samples))
    elif manifest and scene:
        with open(manifest) as f:
            m = json.load(f)
        entries = {s["scene_id"]: s for s in m["scenes"]}
        if scene not in entries:
            raise InputError(f"scene {scene!r} not in manifest")
        root = Path(manifest).parent
        paths = [root / p for p in entries[scene]["samples"]]
    else:
        raise ConfigError("maps needs --samples GLOB or --manifest FILE with --scene ID")
    if not paths:
        raise InputError("no sample files matched")
    ensemble = McEnsemble(tuple(load_volume(p) for p in paths))
    um = compute_maps(ensemble)
    out.mkdir(parents=True, exist_ok=True)
    for attr, fname in pl.MAP_FILES.items():
        save_volume(getattr(um, attr), out / fname)
    save_volume(binarize(um.mean_prob, threshold), out / "seg.npy")
    click.echo(f"wrote 4 maps + seg.npy to {out}")


@cli.command()
@click.option("--pred", type=click.Path(), required=True, help="Binary predicted mask NPY.")
@click.option("--gt", type=click.Path(), required=True, help="Binary ground-truth mask NPY.")
@click.option("--epsilon", type=float, default=0.1, show_default=True)
@click.option("--labels-out", type=click.Path(), default=None, help="Also save component labels NPY.")
@click.pass_obj
@_wrap_errors("extract")
def extract(obj, pred, gt, epsilon, labels_out):
    """Label lesions by 26-connectivity CCA and match them to ground truth."""
    if obj["out"] is None:
        raise ConfigError("extract needs --out (lesion table CSV path)")
    pred_mask = load_label_volume(pred)
    gt_mask = load_label_volume(gt)
    pred_cl = connected_components_26(pred_mask)
    gt_cl = connected_components_26(gt_mask)
    lesions = lesions_from_labeling(pred_cl)
    lesions = [replace(l, iou_adj=adjusted_iou(l, pred_cl, gt_cl)) for l in lesions]
    lesions = label_tp_fp(lesions, epsilon)
    pl.write_lesions_csv(lesions, obj["out"])
    if labels_out:
        save_volume(pred_cl.labels, labels_out)
    d = dice(pred_mask, gt_mask)
    click.echo(
        f"{len(lesions)} lesions ({sum(l.tp for l in lesions)} TP), dice {d:.4f} -> {obj['out']}"
    )


def _scene_inputs(scene_dir, intensity, labels, maps_dir, lesions_csv):
    sdir = Path(scene_dir) if scene_dir else None
    if sdir is None and not (intensity and labels and maps_dir and lesions_csv):
        raise ConfigError("pass --scene-dir or all of --intensity/--labels/--maps-dir/--lesions")
    intensity_paths = list(intensity) or [sdir / "intensity.npy"]
    labels_path = labels or sdir / "pred_labels.npy"
    mdir = Path(maps_dir) if maps_dir else sdir
    lesions_path = lesions_csv or sdir / "lesions.csv"
    vols = [load_volume(p) for p in intensity_paths]
    labeling_labels = load_label_volume(labels_path)
    labeling = pl.ComponentLabeling(labels=labeling_labels, count=labeling_labels.max_label)
    um = pl.UncertaintyMaps(**{k: load_volume(mdir / v) for k, v in pl.MAP_FILES.items()})
    rows = {r["id"]: r for r in pl.read_lesions_csv(lesions_path)}
    lesions = [
        replace(l, iou_adj=rows[l.id]["iou_adj"], tp=rows[l.id]["tp"])
        for l in lesions_from_labeling(labeling)
    ]
    return vols, labeling, um, lesions


@cli.command()
@click.option("--scene-dir", type=click.Path(), default=None, help="Directory with standard per-scene files.")
@click.option("--intensity", type=click.Path(), multiple=True, help="Intensity channel NPY (repeatable).")
@click.option("--labels", type=click.Path(), default=None, help="Component labels NPY.")
@click.option("--maps-dir", type=click.Path(), default=None, help="Directory with the 4 map NPYs.")
@click.option("--lesions", "lesions_csv", type=click.Path(), default=None, help="Lesion table CSV.")
@click.option("--dilation", type=int, default=1, show_default=True)
@click.option("--scan-id", default=None, help="Scan id stored with each graph.")
@click.pass_obj
@_wrap_errors("graphs")
def graphs(obj, scene_dir, intensity, labels, maps_dir, lesions_csv, dilation, scan_id):
    """Convert each lesion into a featured graph (JSONL dataset)."""
    if obj["out"] is None:
        raise ConfigError("graphs needs --out (dataset JSONL path)")
    vols, labeling, um, lesions = _scene_inputs(scene_dir, intensity, labels, maps_dir, lesions_csv)
    sid = scan_id or (Path(scene_dir).name if scene_dir else "scan")
    from .graphs import build_graph, write_graph_dataset

    gs = [build_graph(l, vols, labeling.labels, um, dilation, scan_id=sid) for l in lesions]
    write_graph_dataset(gs, obj["out"], n_channels=len(vols))
    click.echo(f"wrote {len(gs)} graphs to {obj['out']}")


@cli.command(name="train")
@click.option("--graphs", "graph_files", type=click.Path(), multiple=True, required=True)
@click.option("--variant", type=click.Choice(["classification", "regression"]), required=True)
@click.option("--epochs", type=int, default=200, show_default=True)
@click.option("--batch-size", type=int, default=10, show_default=True)
@click.option("--lr-start", type=float, default=1e-2, show_default=True)
@click.option("--lr-end", type=float, default=1e-5, show_default=True)
@click.option("--hidden", type=int, default=64, show_default=True)
@click.option("--epsilon", type=float, default=0.1, show_default=True)
@click.option("--validation-fraction", type=float, default=0.1, show_default=True)
@click.pass_obj
@_wrap_errors("train")
def train_cmd(obj, graph_files, variant, epochs, batch_size, lr_start, lr_end, hidden, epsilon, validation_fraction):
    """Train a GCNN on graph datasets and save the model."""
    if obj["out"] is None:
        raise ConfigError("train needs --out (model file path)")
    dataset = []
    for p in graph_files:
        dataset.extend(read_graph_dataset(p))
    cfg = TrainConfig(
        variant=variant,
        lr_start=lr_start,
        lr_end=lr_end,
        epochs=epochs,
        batch_size=batch_size,
        epsilon=epsilon,
        seed=obj["seed"] if obj["seed"] is not None else 0,
        validation_fraction=validation_fraction,
        hidden=hidden,
    )
    model, train_log = train(dataset, cfg)
    save_model(model, obj["out"])
    log_path = Path(str(obj["out"]) + ".log.json")
    with open(log_path, "w") as f:
        json.dump(train_log, f, separators=(",", ":"))
    click.echo(
        f"trained {variant} on {len(dataset)} graphs "
        f"(final val loss {train_log[-1]['val_loss']:.6f}) -> {obj['out']}"
    )


@cli.command()
@click.option("--model", "model_path", type=click.Path(), required=True)
@click.option("--graphs", "graph_files", type=click.Path(), multiple=True, required=True)
@click.pass_obj
@_wrap_errors("score")
def score(obj, model_path, graph_files):
    """Score graphs with a trained GCNN (per-lesion uncertainty CSV)."""
    if obj["out"] is None:
        raise ConfigError("score needs --out (CSV path)")
    model = load_model(model_path)
    rows = []
    for p in graph_files:
        for g in read_graph_dataset(p):
            rows.append((g.scan_id, g.lesion_id, predict_uncertainty(g, model)))
    rows.sort(key=lambda r: (r[0], r[1]))
    with open(obj["out"], "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["scan_id", "lesion_id", "uncertainty"])
        for sid, lid, u in rows:
            w.writerow([sid, lid, repr(u)])
    click.echo(f"scored {len(rows)} lesions -> {obj['out']}")


@cli.command()
@click.option("--scene-dir", type=click.Path(), default=None)
@click.option("--labels", type=click.Path(), default=None)
@click.option("--maps-dir", type=click.Path(), default=None)
@click.option("--lesions", "lesions_csv", type=click.Path(), default=None)
@click.option("--scan-id", default=None)
@click.option("--metaseg-classif", type=click.Path(), default=None, help="Apply a fitted MetaSeg classifier.")
@click.option("--metaseg-reg", type=click.Path(), default=None, help="Apply a fitted MetaSeg regressor.")
@click.option("--fit-metaseg-classif", type=click.Path(), default=None, help="Fit on these lesions and save.")
@click.option("--fit-metaseg-reg", type=click.Path(), default=None, help="Fit on these lesions and save.")
@click.pass_obj
@_wrap_errors("baselines")
def baselines(obj, scene_dir, labels, maps_dir, lesions_csv, scan_id, metaseg_classif, metaseg_reg, fit_metaseg_classif, fit_metaseg_reg):
    """Per-lesion scores for the aggregation and MetaSeg baselines."""
    if obj["out"] is None:
        raise ConfigError("baselines needs --out (CSV path)")
    _, labeling, um, lesions = _scene_inputs(scene_dir, (), labels, maps_dir, lesions_csv)
    sid = scan_id or (Path(scene_dir).name if scene_dir else "scan")
    feats = np.array([bl.metaseg_features(l, um) for l in lesions])
    if fit_metaseg_classif:
        Path(fit_metaseg_classif).write_text(
            bl.fit_metaseg(feats, lesions, "classification").to_json() + "\n"
        )
    if fit_metaseg_reg:
        Path(fit_metaseg_reg).write_text(bl.fit_metaseg(feats, lesions, "regression").to_json() + "\n")
    methods = ["Entropy_mean", "Entropy_logsum", "Variance_mean", "Variance_logsum", "PCS_mean", "PCS_logsum", "Size"]
    ms_models = {}
    if metaseg_classif:
        ms_models["MetaSeg_Classif"] = bl.MetaSegModel.from_json(Path(metaseg_classif).read_text())
    if metaseg_reg:
        ms_models["MetaSeg_Reg"] = bl.MetaSegModel.from_json(Path(metaseg_reg).read_text())
    with open(obj["out"], "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["scan_id", "lesion_id", "size", "tp"] + methods + list(ms_models))
        for l, fv in zip(lesions, feats):
            row = [sid, l.id, l.size, int(l.tp)]
            row += [
                repr(bl.aggregate_mean(l, um.entropy)),
                repr(bl.aggregate_logsum(l, um.entropy)),
                repr(bl.aggregate_mean(l, um.variance)),
                repr(bl.aggregate_logsum(l, um.variance)),
                repr(bl.aggregate_mean(l, um.pcs_uncertainty)),
                repr(bl.aggregate_logsum(l, um.pcs_uncertainty)),
                repr(bl.size_uncertainty(l)),
            ]
            row += [repr(bl.metaseg_predict(fv, m)) for m in ms_models.values()]
            w.writerow(row)
    click.echo(f"wrote baseline scores for {len(lesions)} lesions -> {obj['out']}")


@cli.command(name="eval")
@click.option("--scores", "score_files", type=click.Path(), multiple=True, required=True,
              help="Per-lesion score CSVs; merged on (scan_id, lesion_id).")
@click.option("--dice", "dice_file", type=click.Path(), default=None)
@click.option("--svg", is_flag=True, help="Also write curves.svg.")
@click.pass_obj
@_wrap_errors("eval")
def eval_cmd(obj, score_files, dice_file, svg):
    """Accuracy-Confidence curves, AUC and Spearman rho per method."""
    if obj["out"] is None:
        raise ConfigError("eval needs --out (report directory)")
    out = Path(obj["out"])
    lesions = {}
    method_scores: dict[str, dict] = {}
    for path in score_files:
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            fields = reader.fieldnames or []
            if "uncertainty" in fields:
                # single-method CSV from `score`: method named after the file
                cols = {Path(path).stem: "uncertainty"}
            else:
                cols = {c: c for c in fields if c not in ("scan_id", "lesion_id", "size", "tp")}
            for row in reader:
                key = (row["scan_id"], int(row["lesion_id"]))
                if "size" in row and "tp" in row:
                    lesions[key] = (key[0], key[1], int(row["size"]), bool(int(row["tp"])))
                for method, col in cols.items():
                    method_scores.setdefault(method, {})[key] = float(row[col])
    if not lesions:
        raise EvaluationError("no score file provided size/tp columns")
    universe = list(lesions.values())
    dice_map = {}
    if dice_file:
        with open(dice_file, newline="") as f:
            dice_map = {r["scan_id"]: float(r["dice"]) for r in csv.DictReader(f)}
    report = build_report(method_scores, universe, dice_map)
    out.mkdir(parents=True, exist_ok=True)
    pl.write_report_csv(report, out / "report.csv")
    (out / "curves").mkdir(exist_ok=True)
    for m in report.methods:
        pl.write_curve_csv(report.curves[m], out / "curves" / f"{m}.csv")
    if svg:
        write_curves_svg(report.curves, out / "curves.svg", report.auc)
    for m in report.methods:
        click.echo(f"{m}: AUC {report.auc[m]:.2f}%  rho {report.spearman[m]:+.2f}")
    click.echo(f"report -> {out / 'report.csv'}")


@cli.command()
@click.option("--resume", is_flag=True, help="Skip stages whose outputs exist.")
@click.pass_obj
@_wrap_errors("run")
def run(obj, resume):
    """Full experiment: synth -> maps -> extract -> graphs -> folds -> report."""
    cfg = _pipeline_cfg(obj, resume=resume)
    log.info("running full pipeline: %d scenes, %d folds, seed %d", cfg.n_scenes, cfg.folds, cfg.seed)
    summary = pl.run_pipeline(cfg)
    click.echo(f"{'method':<18}{'AUC %':>8}  {'rho':>6}")
    for m in pl.METHODS:
        r = summary["report"][m]
        click.echo(f"{m:<18}{r['auc_pct']:>8.2f}  {r['spearman_rho']:>+6.2f}")
    click.echo(f"report -> {cfg.out_dir / 'report.csv'}")


def main():
    cli(prog_name="lesionuq")


if __name__ == "__main__":
    main()
