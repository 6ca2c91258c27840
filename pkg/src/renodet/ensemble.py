"""Shape-classifier ensemble over kidney feature vectors and surface graphs.

Two bodies look at the same kidney from different angles: a small dense
network reads the 28-entry feature vector, a spectral graph network reads
the surface graph. Each can be trained standalone with a 2-class head, or
the heads can be swapped for linear projections into a shared 25-wide
latent space where the two embeddings are summed and classified together.

Label policy, training stages, rates, epoch counts and batch size follow
the fixed protocol in this module's constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from .errors import ConfigError, DataError, NumericError
from .features import N_FEATURES
from .mesher import KidneyGraph
from .neuro import (
    AdamState,
    Tensor,
    adam_step,
    add,
    cheb_conv,
    dense,
    graph_operator,
    mean_pool,
    parameter,
    relu,
    softmax,
    softmax_xent,
    zero_grads,
)

# lesion-volume thresholds (strict >) separating positive from negative
GNN_POSITIVE_MM3 = 500.0
MLP_POSITIVE_MM3 = 20000.0

MLP_HIDDEN = (64, 32)
GNN_WIDTHS = (4, 25, 25, 25, 25, 25)
LATENT_WIDTH = 25
N_CLASSES = 2
N_SCALAR_FEATURES = 8

INDIVIDUAL_EPOCHS = 100
MLP_LEARNING_RATE = 1e-2
GNN_LEARNING_RATE = 1e-3
STAGE_A_EPOCHS = 30
STAGE_B_EPOCHS = 2
ENSEMBLE_LEARNING_RATE = 1e-3
BATCH_SIZE = 8
N_FOLDS = 5

_MODES = ("mlp", "gnn", "ensemble")


@dataclass
class LabeledShapeRecord:
    """One kidney's classifier inputs plus the lesion volume behind its label."""

    kidney_id: str
    patient_id: str
    features: np.ndarray        # length-28 feature vector
    graph: KidneyGraph
    lesion_volume: float        # mm^3 of the largest lesion inside the contour

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.shape != (N_FEATURES,):
            raise DataError(
                f"feature vector for {self.kidney_id} has shape "
                f"{self.features.shape}, expected ({N_FEATURES},)")
        if self.lesion_volume < 0:
            raise DataError("lesion_volume must be non-negative")

    def label(self, mode: str) -> int:
        return assign_labels(self, mode)


def assign_labels(record, mode: str) -> int:
    """Binary label from lesion volume; thresholds are strict and per-mode."""
    if mode not in _MODES:
        raise ConfigError(f"unknown label mode {mode!r}")
    volume = getattr(record, "lesion_volume", record)
    threshold = MLP_POSITIVE_MM3 if mode == "mlp" else GNN_POSITIVE_MM3
    return int(volume > threshold)


# ---------------------------------------------------------------------------
# Feature standardization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Standardizer:
    """Per-fold z-scoring of the 8 shape scalars; histogram bins untouched."""

    mean: np.ndarray
    std: np.ndarray

    def apply(self, features: np.ndarray) -> np.ndarray:
        out = np.array(features, dtype=np.float64)
        out[..., :N_SCALAR_FEATURES] -= self.mean
        out[..., :N_SCALAR_FEATURES] /= self.std
        return out


def fit_standardizer(feature_matrix: np.ndarray) -> Standardizer:
    scalars = np.asarray(feature_matrix, np.float64)[:, :N_SCALAR_FEATURES]
    mean = scalars.mean(axis=0)
    std = scalars.std(axis=0)
    std[std < 1e-12] = 1.0   # constant columns pass through unscaled
    return Standardizer(mean=mean, std=std)


# ---------------------------------------------------------------------------
# Parameter construction and forward passes
# ---------------------------------------------------------------------------

def init_mlp(rng: np.random.Generator, head: str = "classes") -> Dict[str, Tensor]:
    """28 -> 64 -> 32 body, then a 2-class head or a latent projection."""
    widths = (N_FEATURES,) + MLP_HIDDEN
    params: Dict[str, Tensor] = {}
    for i in range(len(widths) - 1):
        params[f"mlp.w{i}"] = parameter((widths[i], widths[i + 1]), rng)
        params[f"mlp.b{i}"] = parameter(np.zeros(widths[i + 1]))
    out = N_CLASSES if head == "classes" else LATENT_WIDTH
    params["mlp.head_w"] = parameter((MLP_HIDDEN[-1], out), rng)
    params["mlp.head_b"] = parameter(np.zeros(out))
    return params


def init_gnn(rng: np.random.Generator, head: str = "classes") -> Dict[str, Tensor]:
    """Five spectral conv layers 4 -> 25 x5, mean pool, then head."""
    params: Dict[str, Tensor] = {}
    for i in range(len(GNN_WIDTHS) - 1):
        shape = (GNN_WIDTHS[i], GNN_WIDTHS[i + 1])
        params[f"gnn.c{i}.w0"] = parameter(shape, rng)
        params[f"gnn.c{i}.w1"] = parameter(shape, rng)
    out = N_CLASSES if head == "classes" else LATENT_WIDTH
    params["gnn.head_w"] = parameter((GNN_WIDTHS[-1], out), rng)
    params["gnn.head_b"] = parameter(np.zeros(out))
    return params


def init_ensemble(mlp_weights: Dict[str, np.ndarray],
                  gnn_weights: Dict[str, np.ndarray],
                  rng: np.random.Generator) -> Dict[str, Tensor]:
    """Fuse trained bodies: latent projections replace the class heads.

    Body weights are copied from the individually trained models; the two
    projections and the shared classifier start fresh.
    """
    params: Dict[str, Tensor] = {}
    for name, values in mlp_weights.items():
        if not name.startswith("mlp.head"):
            params[name] = parameter(np.array(values))
    for name, values in gnn_weights.items():
        if not name.startswith("gnn.head"):
            params[name] = parameter(np.array(values))
    params["mlp.head_w"] = parameter((MLP_HIDDEN[-1], LATENT_WIDTH), rng)
    params["mlp.head_b"] = parameter(np.zeros(LATENT_WIDTH))
    params["gnn.head_w"] = parameter((GNN_WIDTHS[-1], LATENT_WIDTH), rng)
    params["gnn.head_b"] = parameter(np.zeros(LATENT_WIDTH))
    params["shared.w"] = parameter((LATENT_WIDTH, N_CLASSES), rng)
    params["shared.b"] = parameter(np.zeros(N_CLASSES))
    return params


def _mlp_body(params, x: Tensor) -> Tensor:
    h = relu(dense(x, params["mlp.w0"], params["mlp.b0"]))
    return relu(dense(h, params["mlp.w1"], params["mlp.b1"]))


def mlp_forward(params: Dict[str, Tensor], features) -> Tensor:
    x = features if isinstance(features, Tensor) else Tensor(np.asarray(features))
    h = _mlp_body(params, x)
    return dense(h, params["mlp.head_w"], params["mlp.head_b"])


def _gnn_body(params, operator, node_features) -> Tensor:
    h = node_features if isinstance(node_features, Tensor) \
        else Tensor(np.asarray(node_features))
    last = len(GNN_WIDTHS) - 2
    for i in range(last + 1):
        h = cheb_conv(operator, h, params[f"gnn.c{i}.w0"], params[f"gnn.c{i}.w1"])
        if i < last:
            h = relu(h)
    return mean_pool(h)


def gnn_forward(params: Dict[str, Tensor], graph, operator=None) -> Tensor:
    if operator is None:
        operator = graph_operator(graph.n_nodes, graph.edges)
    pooled = _gnn_body(params, operator, graph.node_features)
    return dense(pooled, params["gnn.head_w"], params["gnn.head_b"])


def ensemble_forward(params: Dict[str, Tensor], features, graph,
                     operator=None) -> Tensor:
    """Project both bodies into the shared latent space, sum, classify."""
    if operator is None:
        operator = graph_operator(graph.n_nodes, graph.edges)
    x = features if isinstance(features, Tensor) else Tensor(np.asarray(features))
    mlp_latent = dense(_mlp_body(params, x),
                       params["mlp.head_w"], params["mlp.head_b"])
    gnn_latent = dense(_gnn_body(params, operator, graph.node_features),
                       params["gnn.head_w"], params["gnn.head_b"])
    fused = add(mlp_latent, gnn_latent)
    return dense(fused, params["shared.w"], params["shared.b"])


def parameter_count(params: Dict[str, Tensor]) -> int:
    return int(sum(p.values.size for p in params.values()))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainingRun:
    """Per-fold weights plus everything needed to reproduce the run."""

    kind: str                                   # mlp | gnn | ensemble
    fold_weights: List[Dict[str, np.ndarray]]
    fold_standardizers: List[Standardizer]
    manifest: dict = field(default_factory=dict)


def _check_two_classes(labels: np.ndarray, fold: int) -> None:
    if len(np.unique(labels)) < 2:
        raise DataError(
            f"fold {fold} training data has a single class; "
            "cannot fit a 2-class objective")


def _snapshot(params: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
    return {name: np.array(p.values) for name, p in params.items()}


def _training_indices(n: int, folds: Sequence[Sequence[int]], fold: int):
    held_out = set(int(i) for i in folds[fold])
    return [i for i in range(n) if i not in held_out]


def _batch_gradient_step(params_t: List[Tensor], losses_backward,
                         adam: AdamState, lr: float) -> float:
    """One optimizer step from a closure that backpropagates batch losses.

    The closure runs every sample's backward pass (gradients accumulate on
    the shared parameter tensors) and returns the summed loss and count.
    """
    zero_grads(params_t)
    total, count = losses_backward()
    grads = [p.grad / count if p.grad is not None
             else np.zeros_like(p.values) for p in params_t]
    adam_step(params_t, grads, adam, lr)
    return total / count


def _run_epochs(records, labels, forward_one, params: Dict[str, Tensor],
                trainable: Sequence[str], epochs: int, lr: float,
                rng: np.random.Generator,
                batch_size: int | None = None) -> List[float]:
    """Mini-batch cross-entropy training loop; returns per-epoch mean loss."""
    if batch_size is None:
        batch_size = BATCH_SIZE
    params_t = [params[name] for name in trainable]
    adam = AdamState.for_params(params_t)
    history = []
    n = len(records)
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            batch = order[start:start + batch_size]

            def backward_batch(batch=batch):
                total = 0.0
                for pos in batch:
                    i = int(records[int(pos)])
                    loss = softmax_xent(forward_one(i), int(labels[i]))
                    loss.backward()
                    total += loss.values.item()
                return total, len(batch)

            epoch_loss += _batch_gradient_step(
                params_t, backward_batch, adam, lr) * len(batch)
        history.append(epoch_loss / n)
    return history


def _operators(dataset: Sequence[LabeledShapeRecord]):
    return [graph_operator(r.graph.n_nodes, r.graph.edges) for r in dataset]


def train_individual(kind: str, dataset: Sequence[LabeledShapeRecord],
                     folds: Sequence[Sequence[int]],
                     seed: int = 0, epochs: int | None = None,
                     learning_rate: float | None = None,
                     batch_size: int | None = None) -> TrainingRun:
    """Train one body+head per fold on that fold's training split."""
    if kind not in ("mlp", "gnn"):
        raise ConfigError(f"unknown individual model kind {kind!r}")
    if epochs is None:
        epochs = INDIVIDUAL_EPOCHS
    lr = learning_rate
    if lr is None:
        lr = MLP_LEARNING_RATE if kind == "mlp" else GNN_LEARNING_RATE
    labels = np.array([assign_labels(r, kind) for r in dataset])
    operators = _operators(dataset) if kind == "gnn" else None

    fold_weights, fold_standardizers, losses = [], [], []
    for fold in range(len(folds)):
        train_idx = _training_indices(len(dataset), folds, fold)
        _check_two_classes(labels[train_idx], fold)
        rng = np.random.default_rng([seed, fold])
        params = init_mlp(rng) if kind == "mlp" else init_gnn(rng)

        stats = fit_standardizer(
            np.stack([dataset[i].features for i in train_idx]))
        if kind == "mlp":
            feats = {i: stats.apply(dataset[i].features) for i in train_idx}

            def forward_one(i, feats=feats, params=params):
                return mlp_forward(params, feats[i])
        else:
            def forward_one(i, params=params):
                return gnn_forward(params, dataset[i].graph, operators[i])

        history = _run_epochs(train_idx, labels, forward_one, params,
                              sorted(params), epochs, lr, rng,
                              batch_size=batch_size)
        fold_weights.append(_snapshot(params))
        fold_standardizers.append(stats)
        losses.append(history)

    manifest = {
        "kind": kind, "label_mode": kind, "epochs": epochs,
        "learning_rate": lr,
        "batch_size": BATCH_SIZE if batch_size is None else batch_size,
        "seed": seed,
        "n_folds": len(folds),
        "folds": [[dataset[int(i)].kidney_id for i in f] for f in folds],
        "loss_history": losses,
    }
    return TrainingRun(kind=kind, fold_weights=fold_weights,
                       fold_standardizers=fold_standardizers,
                       manifest=manifest)


def train_ensemble(mlp_run: TrainingRun, gnn_run: TrainingRun,
                   dataset: Sequence[LabeledShapeRecord],
                   folds: Sequence[Sequence[int]],
                   seed: int = 0, stage_a_epochs: int | None = None,
                   stage_b_epochs: int | None = None,
                   learning_rate: float | None = None,
                   batch_size: int | None = None) -> TrainingRun:
    """Two-stage fusion training on top of per-fold individual weights.

    Stage A freezes both bodies (their outputs are cached, so the freeze is
    bitwise by construction) and fits the projections plus the shared
    classifier. Stage B briefly fine-tunes every parameter.
    """
    if mlp_run.kind != "mlp" or gnn_run.kind != "gnn":
        raise ConfigError("train_ensemble needs one mlp run and one gnn run")
    if len(mlp_run.fold_weights) != len(folds) or \
            len(gnn_run.fold_weights) != len(folds):
        raise DataError("individual runs must provide weights for every fold")
    if stage_a_epochs is None:
        stage_a_epochs = STAGE_A_EPOCHS
    if stage_b_epochs is None:
        stage_b_epochs = STAGE_B_EPOCHS
    if learning_rate is None:
        learning_rate = ENSEMBLE_LEARNING_RATE
    labels = np.array([assign_labels(r, "ensemble") for r in dataset])
    operators = _operators(dataset)

    fold_weights, fold_standardizers = [], []
    losses_a, losses_b = [], []
    for fold in range(len(folds)):
        train_idx = _training_indices(len(dataset), folds, fold)
        _check_two_classes(labels[train_idx], fold)
        rng = np.random.default_rng([seed, fold])
        params = init_ensemble(mlp_run.fold_weights[fold],
                               gnn_run.fold_weights[fold], rng)
        stats = mlp_run.fold_standardizers[fold]

        # stage A: cache body activations once, train heads only
        head_names = sorted(n for n in params
                            if n.endswith(("head_w", "head_b"))
                            or n.startswith("shared."))
        frozen = {n: np.array(params[n].values) for n in params
                  if n not in head_names}
        mlp_cache = {i: _mlp_body(params, Tensor(
            stats.apply(dataset[i].features))).values for i in train_idx}
        gnn_cache = {i: _gnn_body(params, operators[i],
                                  dataset[i].graph.node_features).values
                     for i in train_idx}

        def forward_cached(i, params=params, mlp_cache=mlp_cache,
                           gnn_cache=gnn_cache):
            mlp_latent = dense(Tensor(mlp_cache[i]),
                               params["mlp.head_w"], params["mlp.head_b"])
            gnn_latent = dense(Tensor(gnn_cache[i]),
                               params["gnn.head_w"], params["gnn.head_b"])
            return dense(add(mlp_latent, gnn_latent),
                         params["shared.w"], params["shared.b"])

        history_a = _run_epochs(train_idx, labels, forward_cached, params,
                                head_names, stage_a_epochs,
                                learning_rate, rng, batch_size=batch_size)
        for name, values in frozen.items():
            if params[name].values.tobytes() != values.tobytes():
                raise NumericError(f"frozen parameter {name} moved in stage A")

        # stage B: everything trains
        def forward_full(i, params=params, stats=stats):
            return ensemble_forward(params,
                                    stats.apply(dataset[i].features),
                                    dataset[i].graph, operators[i])

        history_b = _run_epochs(train_idx, labels, forward_full, params,
                                sorted(params), stage_b_epochs,
                                learning_rate, rng, batch_size=batch_size)
        fold_weights.append(_snapshot(params))
        fold_standardizers.append(stats)
        losses_a.append(history_a)
        losses_b.append(history_b)

    manifest = {
        "kind": "ensemble", "label_mode": "ensemble",
        "stage_a_epochs": stage_a_epochs, "stage_b_epochs": stage_b_epochs,
        "learning_rate": learning_rate,
        "batch_size": BATCH_SIZE if batch_size is None else batch_size,
        "seed": seed, "n_folds": len(folds),
        "folds": [[dataset[int(i)].kidney_id for i in f] for f in folds],
        "stage_a_loss": losses_a, "stage_b_loss": losses_b,
        "parameter_count": parameter_count(
            {k: Tensor(v) for k, v in fold_weights[0].items()}),
    }
    return TrainingRun(kind="ensemble", fold_weights=fold_weights,
                       fold_standardizers=fold_standardizers,
                       manifest=manifest)


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def _as_tensors(weights: Dict[str, np.ndarray]) -> Dict[str, Tensor]:
    return {name: Tensor(np.asarray(values)) for name, values in weights.items()}


def fold_probability(run: TrainingRun, fold: int,
                     record: LabeledShapeRecord) -> float:
    """Positive-class softmax probability from a single fold's model."""
    if fold < 0 or fold >= len(run.fold_weights):
        raise ConfigError(f"fold {fold} not present in run")
    params = _as_tensors(run.fold_weights[fold])
    stats = run.fold_standardizers[fold]
    if run.kind == "mlp":
        logits = mlp_forward(params, stats.apply(record.features))
    elif run.kind == "gnn":
        logits = gnn_forward(params, record.graph)
    elif run.kind == "ensemble":
        logits = ensemble_forward(params, stats.apply(record.features),
                                  record.graph)
    else:
        raise ConfigError(f"unknown run kind {run.kind!r}")
    return float(softmax(logits.values)[1])


def infer(run: TrainingRun, record: LabeledShapeRecord) -> float:
    """Sum of positive-class probabilities across all folds; range [0, n_folds]."""
    if len(run.fold_weights) != N_FOLDS:
        raise DataError(
            f"run has {len(run.fold_weights)} folds, expected {N_FOLDS}")
    return sum(fold_probability(run, f, record)
               for f in range(len(run.fold_weights)))


def out_of_fold_scores(run: TrainingRun, dataset: Sequence[LabeledShapeRecord],
                       folds: Sequence[Sequence[int]]) -> np.ndarray:
    """Score every record with the one fold model that never trained on it."""
    scores = np.full(len(dataset), np.nan)
    for fold, held_out in enumerate(folds):
        for i in held_out:
            scores[int(i)] = fold_probability(run, fold, dataset[int(i)])
    if np.isnan(scores).any():
        raise DataError("folds do not cover every record")
    return scores
