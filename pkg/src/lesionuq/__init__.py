"""Lesion-level uncertainty scores from Monte-Carlo segmentation ensembles."""

from .volume import Dims, LabelVolume, McEnsemble, Volume, load_label_volume, load_volume, save_volume
from .maps import UncertaintyMaps, binarize, compute_maps
from .lesions import (
    ComponentLabeling,
    Lesion,
    adjusted_iou,
    connected_components_26,
    dice,
    dilate_26,
    label_tp_fp,
    lesions_from_labeling,
)
from .graphs import (
    FeatureScaler,
    LesionGraph,
    apply_scaler,
    build_graph,
    fit_scaler,
    read_graph_dataset,
    write_graph_dataset,
)
from .gcnn import (
    AdamState,
    GcnnModel,
    GcnnParams,
    TrainConfig,
    adam_step,
    forward,
    load_model,
    loss_and_gradients,
    normalized_adjacency,
    predict_uncertainty,
    save_model,
    train,
)
from .baselines import (
    MetaSegModel,
    aggregate_logsum,
    aggregate_mean,
    fit_metaseg,
    linear_regression_fit,
    logistic_regression_fit,
    metaseg_features,
    metaseg_predict,
    size_uncertainty,
)
from .evaluation import CurvePoint, EvalReport, accuracy_confidence_curve, build_report, spearman_rho
from .synth import SynthConfig, generate_scene
from .pipeline import PipelineConfig, load_config, run_pipeline

__version__ = "0.1.0"
