"""Pipeline configuration: every tunable constant in one serializable tree.

Defaults are imported from the modules that own them, so the config file a
user dumps always matches what the code actually runs.  The tree
round-trips losslessly through JSON, and dotted-path overrides let the
command line adjust single keys without a config file.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from . import ensemble, eval as evalmod, features, mesher, neuro, phantom
from . import sampler, volio
from .errors import ConfigError

STAGES = ("phantom", "mesh", "features", "train-shape", "sample", "score",
          "evaluate")


@dataclass
class GridSection:
    """Voxel-grid conventions shared by the I/O and sampling stages."""

    sample_spacing_mm: float = sampler.SAMPLE_SPACING_MM
    clip_hu: tuple = volio.CLIP_HU
    norm_divisor: float = volio.NORM_DIVISOR
    min_component_mm3: float = volio.MIN_COMPONENT_MM3


@dataclass
class MeshSection:
    extraction_voxel_mm: float = mesher.EXTRACTION_VOXEL_MM
    smooth_factor: float = mesher.SMOOTH_FACTOR
    smooth_iterations: int = mesher.SMOOTH_ITERATIONS
    curvature_eps: float = mesher.CURVATURE_EPS


@dataclass
class FeatureSection:
    histogram_bins: int = features.HISTOGRAM_BINS
    curvature_range: tuple = features.CURVATURE_RANGE
    attenuation_range: tuple = features.ATTENUATION_RANGE


@dataclass
class LabelSection:
    gnn_positive_mm3: float = ensemble.GNN_POSITIVE_MM3
    mlp_positive_mm3: float = ensemble.MLP_POSITIVE_MM3


@dataclass
class ShapeTrainingSection:
    individual_epochs: int = ensemble.INDIVIDUAL_EPOCHS
    mlp_learning_rate: float = ensemble.MLP_LEARNING_RATE
    gnn_learning_rate: float = ensemble.GNN_LEARNING_RATE
    stage_a_epochs: int = ensemble.STAGE_A_EPOCHS
    stage_b_epochs: int = ensemble.STAGE_B_EPOCHS
    ensemble_learning_rate: float = ensemble.ENSEMBLE_LEARNING_RATE
    batch_size: int = ensemble.BATCH_SIZE
    n_folds: int = ensemble.N_FOLDS
    fold_seed: int = 0
    train_seed: int = 0


@dataclass
class ScheduleSection:
    """Warmup-decay learning-rate schedule constants for backbone training."""

    warmup_epochs: int = neuro.WARMUP_EPOCHS
    pretrain_lr_min: float = neuro.PRETRAIN_SCHEDULE.lr_min
    pretrain_lr_max: float = neuro.PRETRAIN_SCHEDULE.lr_max
    pretrain_decay: float = neuro.PRETRAIN_SCHEDULE.a
    pretrain_epochs: int = neuro.PRETRAIN_SCHEDULE.k_max
    finetune_lr_min: float = neuro.FINETUNE_SCHEDULE.lr_min
    finetune_lr_max: float = neuro.FINETUNE_SCHEDULE.lr_max
    finetune_decay: float = neuro.FINETUNE_SCHEDULE.a
    finetune_epochs: int = neuro.FINETUNE_SCHEDULE.k_max
    adam_beta1: float = neuro.ADAM_BETA1
    adam_beta2: float = neuro.ADAM_BETA2
    adam_eps: float = neuro.ADAM_EPS


@dataclass
class SamplingSection:
    tile_extent: tuple = sampler.EXTENTS["tile2d"]
    block_extent: tuple = sampler.EXTENTS["block3d"]
    tile_z_step_mm: float = sampler.Z_STEPS["tile2d"]
    block_z_step_mm: float = sampler.Z_STEPS["block3d"]
    sliding_grid_mm: float = sampler.SLIDING_GRID_MM
    mask_dilation_mm: float = sampler.MASK_DILATION_MM
    cancer_radius_mm: float = sampler.CANCER_RADIUS_MM
    kidney_radius_mm: float = sampler.KIDNEY_RADIUS_MM
    class_cap: int = sampler.CLASS_CAP
    cap_seed: int = 0


@dataclass
class ScorerSection:
    features: int = sampler.SCORER_FEATURES
    hidden: int = sampler.SCORER_HIDDEN
    epochs_initial: int = sampler.SCORER_EPOCHS_INITIAL
    epochs_refine: int = sampler.SCORER_EPOCHS_REFINE
    lr_initial: float = sampler.SCORER_LR_INITIAL
    lr_refine: float = sampler.SCORER_LR_REFINE
    batch_size: int = sampler.SCORER_BATCH
    train_seed: int = 0


@dataclass
class EvalSection:
    top_tile_votes: int = evalmod.TOP_TILE_VOTES
    small_cutoff_mm: float = evalmod.SMALL_CUTOFF_MM


@dataclass
class PhantomSection:
    """Cohort layout for synthetic-study runs (used when input_dir is empty)."""

    n_healthy: int = 100
    n_bump: int = 50
    n_endophytic: int = 50
    n_cyst: int = 0
    n_bump_large: int = 15
    seed: int = 0
    spacing_mm: float = phantom.DEFAULT_SPACING_MM
    base_hu: float = phantom.KIDNEY_HU
    tumour_hu: float = phantom.TUMOUR_HU
    cyst_hu: float = phantom.CYST_HU
    noise_hu: float = phantom.NOISE_HU
    semi_axis_ranges: tuple = ((14.0, 18.0), (10.0, 13.0), (18.0, 26.0))
    large_semi_axis_ranges: tuple = ((21.0, 24.0), (20.0, 21.5), (28.0, 33.0))
    bump_radius_range: tuple = (6.5, 10.5)
    large_bump_radius_range: tuple = (17.5, 19.5)
    endo_radius_range: tuple = (5.5, 8.0)
    cyst_radius_range: tuple = (6.5, 10.5)


@dataclass
class PipelineConfig:
    run_dir: str = "run"
    input_dir: str = ""          # empty: the phantom stage provides inputs
    stages: tuple = ("phantom", "mesh", "features", "train-shape", "evaluate")
    grids: GridSection = field(default_factory=GridSection)
    mesh: MeshSection = field(default_factory=MeshSection)
    features: FeatureSection = field(default_factory=FeatureSection)
    labels: LabelSection = field(default_factory=LabelSection)
    shape_training: ShapeTrainingSection = field(
        default_factory=ShapeTrainingSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    scorer: ScorerSection = field(default_factory=ScorerSection)
    evaluation: EvalSection = field(default_factory=EvalSection)
    phantoms: PhantomSection = field(default_factory=PhantomSection)

    def __post_init__(self):
        for stage in self.stages:
            if stage not in STAGES:
                raise ConfigError(
                    f"unknown stage {stage!r}; choose from {STAGES}")


_HELP = {
    "run_dir": "directory that receives all artifacts of a run",
    "input_dir": "directory of scan grids; empty means phantoms are generated",
    "stages": "ordered stage selection for run-all",
    "grids.sample_spacing_mm": "isotropic spacing scans are resampled to "
                               "before sampling, mm",
    "grids.clip_hu": "attenuation clipping window applied before "
                     "normalization, HU",
    "grids.norm_divisor": "divisor mapping clipped HU onto roughly [-2, 2]",
    "grids.min_component_mm3": "connected components smaller than this are "
                               "discarded as segmentation noise, mm^3",
    "mesh.extraction_voxel_mm": "isotropic grid used for isosurface "
                                "extraction, mm",
    "mesh.smooth_factor": "vertex pull strength per smoothing pass",
    "mesh.smooth_iterations": "smoothing pass count",
    "mesh.curvature_eps": "denominator floor in vertex curvature sums",
    "features.histogram_bins": "bin count of each histogram feature segment",
    "features.curvature_range": "curvature histogram support",
    "features.attenuation_range": "attenuation histogram support, HU",
    "labels.gnn_positive_mm3": "lesion volume above which the graph and "
                               "ensemble streams call a kidney positive, mm^3",
    "labels.mlp_positive_mm3": "lesion volume above which the feature-vector "
                               "stream calls a kidney positive, mm^3",
    "shape_training.individual_epochs": "epochs for each individual model",
    "shape_training.mlp_learning_rate": "Adam rate for the feature-vector "
                                        "model",
    "shape_training.gnn_learning_rate": "Adam rate for the graph model",
    "shape_training.stage_a_epochs": "fusion epochs with frozen bodies",
    "shape_training.stage_b_epochs": "fusion epochs with all weights free",
    "shape_training.ensemble_learning_rate": "Adam rate for both fusion "
                                             "stages",
    "shape_training.batch_size": "samples per gradient step",
    "shape_training.n_folds": "patient-wise cross-validation folds",
    "shape_training.fold_seed": "seed for the patient-to-fold shuffle",
    "shape_training.train_seed": "base seed for weight init and batching",
    "schedule.warmup_epochs": "epochs of linear learning-rate ramp",
    "schedule.pretrain_lr_min": "ramp start rate, pretraining",
    "schedule.pretrain_lr_max": "peak rate, pretraining",
    "schedule.pretrain_decay": "exponential decay strength, pretraining",
    "schedule.pretrain_epochs": "total epochs, pretraining",
    "schedule.finetune_lr_min": "ramp start rate, fine-tuning",
    "schedule.finetune_lr_max": "peak rate, fine-tuning",
    "schedule.finetune_decay": "exponential decay strength, fine-tuning",
    "schedule.finetune_epochs": "total epochs, fine-tuning",
    "schedule.adam_beta1": "Adam first-moment decay",
    "schedule.adam_beta2": "Adam second-moment decay",
    "schedule.adam_eps": "Adam denominator floor",
    "sampling.tile_extent": "2D sample extent in voxels, (x, y, z)",
    "sampling.block_extent": "3D sample extent in voxels, (x, y, z)",
    "sampling.tile_z_step_mm": "axial step between tile centres, mm",
    "sampling.block_z_step_mm": "axial step between block centres, mm",
    "sampling.sliding_grid_mm": "in-plane pitch of the sliding grid, mm",
    "sampling.mask_dilation_mm": "context margin kept around the kidney, mm",
    "sampling.cancer_radius_mm": "largest-inscribed-disc radius above which "
                                 "a tumour cross-section marks a sample "
                                 "cancerous, mm",
    "sampling.kidney_radius_mm": "largest-inscribed-disc radius above which "
                                 "a kidney cross-section marks a sample "
                                 "normal, mm",
    "sampling.class_cap": "retained samples per class per kidney",
    "sampling.cap_seed": "seed for the over-cap subsampling draw",
    "scorer.features": "per-sample intensity summary length",
    "scorer.hidden": "hidden width of the reference sample scorer",
    "scorer.epochs_initial": "scorer epochs at the initial rate",
    "scorer.epochs_refine": "scorer epochs at the refined rate",
    "scorer.lr_initial": "scorer initial Adam rate",
    "scorer.lr_refine": "scorer refined Adam rate",
    "scorer.batch_size": "scorer samples per gradient step",
    "scorer.train_seed": "seed for scorer init and batching",
    "evaluation.top_tile_votes": "tile probabilities summed per kidney score",
    "evaluation.small_cutoff_mm": "diameter splitting small from large "
                                  "lesions in stratified reporting, mm",
    "phantoms.n_healthy": "lesion-free phantoms in the cohort",
    "phantoms.n_bump": "contour-deforming tumour phantoms",
    "phantoms.n_endophytic": "buried tumour phantoms",
    "phantoms.n_cyst": "contour-deforming benign phantoms",
    "phantoms.n_bump_large": "bump phantoms sized past the larger label "
                             "threshold",
    "phantoms.seed": "master seed for cohort geometry and noise",
    "phantoms.spacing_mm": "phantom voxel spacing, mm",
    "phantoms.base_hu": "kidney parenchyma attenuation, HU",
    "phantoms.tumour_hu": "tumour attenuation, HU",
    "phantoms.cyst_hu": "cyst attenuation, HU",
    "phantoms.noise_hu": "Gaussian noise sigma, HU",
    "phantoms.semi_axis_ranges": "kidney semi-axis draw ranges, mm",
    "phantoms.large_semi_axis_ranges": "semi-axis ranges for kidneys that "
                                       "host the largest bumps, mm",
    "phantoms.bump_radius_range": "bump radius draw range, mm",
    "phantoms.large_bump_radius_range": "radius range for bumps past the "
                                        "larger label threshold, mm",
    "phantoms.endo_radius_range": "buried lesion radius draw range, mm",
    "phantoms.cyst_radius_range": "cyst radius draw range, mm",
}


def _to_plain(value):
    if dataclasses.is_dataclass(value):
        return {f.name: _to_plain(getattr(value, f.name))
                for f in dataclasses.fields(value)}
    if isinstance(value, tuple):
        return [_to_plain(v) for v in value]
    return value


def to_dict(config: PipelineConfig) -> dict:
    return _to_plain(config)


def _coerce(default, value, path: str):
    """Bring a parsed JSON value back to the default's type."""
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path} expects a sequence, got {value!r}")
        if not default:
            return tuple(value)
        # homogeneous sequences: the first default element sets the type
        return tuple(_coerce(default[0], v, path) for v in value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path} expects a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} expects a number, got {value!r}")
        if float(value) != int(value):
            raise ConfigError(f"{path} expects an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path} expects a string, got {value!r}")
        return value
    return value


def from_dict(data: dict) -> PipelineConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    defaults = PipelineConfig()
    kwargs = {}
    known = {f.name: f for f in dataclasses.fields(PipelineConfig)}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        default = getattr(defaults, key)
        if dataclasses.is_dataclass(default):
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key!r} must be a mapping")
            section_fields = {f.name for f in dataclasses.fields(default)}
            section_kwargs = {}
            for k, v in value.items():
                if k not in section_fields:
                    raise ConfigError(f"unknown config key {key}.{k!r}")
                section_kwargs[k] = _coerce(getattr(default, k), v,
                                            f"{key}.{k}")
            kwargs[key] = type(default)(**section_kwargs)
        else:
            kwargs[key] = _coerce(default, value, key)
    return PipelineConfig(**kwargs)


def save_config(config: PipelineConfig, path) -> None:
    Path(path).write_text(json.dumps(to_dict(config), indent=2,
                                     sort_keys=True) + "\n")


def load_config(path) -> PipelineConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config {p}: {exc}") from None
    return from_dict(data)


def apply_override(config: PipelineConfig, assignment: str) -> PipelineConfig:
    """Apply one 'dotted.path=value' override; value parsed as JSON if it can.

    Returns a new config; the input is left untouched.
    """
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of form key=value")
    path, raw = assignment.split("=", 1)
    path = path.strip()
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw.strip()
    data = to_dict(config)
    parts = path.split(".")
    node = data
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key {path!r}")
        node = node[part]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(f"unknown config key {path!r}")
    node[parts[-1]] = value
    return from_dict(data)


def describe(config: PipelineConfig | None = None):
    """(path, value, help) rows for every key, in declaration order."""
    config = config or PipelineConfig()
    rows = []
    for f in dataclasses.fields(PipelineConfig):
        value = getattr(config, f.name)
        if dataclasses.is_dataclass(value):
            for sub in dataclasses.fields(value):
                path = f"{f.name}.{sub.name}"
                rows.append((path, _to_plain(getattr(value, sub.name)),
                             _HELP.get(path, "")))
        else:
            rows.append((f.name, _to_plain(value), _HELP.get(f.name, "")))
    return rows


def config_digest(config: PipelineConfig) -> str:
    """Stable hash of the full configuration, for provenance records."""
    import hashlib
    canonical = json.dumps(to_dict(config), sort_keys=True,
                           separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()
