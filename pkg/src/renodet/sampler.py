"""Axial tile and block sampling with radius-based labeling.

Scans are resampled to 1mm isotropic voxels, normalized, and masked to the
neighbourhood of the kidneys. Samples are thin axial tiles (one slice) or
blocks (twenty slices), either centred on a kidney's axial centroid or laid
out on a sliding in-plane grid. Each sample is labeled from the
segmentation by the largest disc that fits inside the relevant class
within the sample footprint.

The per-sample scorer is an interface; the reference implementation scores
intensity summary statistics with a small dense network. It stands in for
heavyweight image classifiers, which are out of scope.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError
from .neuro import (
    AdamState,
    Tensor,
    adam_step,
    dense,
    parameter,
    relu,
    softmax,
    softmax_xent,
    zero_grads,
)
from .volio import (
    LABEL_KIDNEY,
    LABEL_TUMOUR,
    KidneyComponent,
    LabelGrid,
    VolumeGrid,
    clip_normalize,
    dilate,
    resample,
    split_kidneys,
)

SAMPLE_SPACING_MM = 1.0
# sample extents in voxels at 1mm, (x, y, z) order
EXTENTS = {"tile2d": (224, 224, 1), "block3d": (224, 224, 20)}
Z_STEPS = {"tile2d": 1.0, "block3d": 5.0}
SLIDING_GRID_MM = 40.0
MASK_DILATION_MM = 40.0
CANCER_RADIUS_MM = 10.0
KIDNEY_RADIUS_MM = 20.0
CLASS_CAP = 50
CLASSES = ("cancerous", "normal_kidney", "none")

SCORER_FEATURES = 11
SCORER_HIDDEN = 16
SCORER_EPOCHS_INITIAL = 5
SCORER_EPOCHS_REFINE = 5
SCORER_LR_INITIAL = 1e-3
SCORER_LR_REFINE = 5e-4
SCORER_BATCH = 16


@dataclass
class SampleSpec:
    """One sample's placement; extent is implied by its kind."""

    kind: str                   # tile2d | block3d
    scheme: str                 # centralised | sliding
    center: np.ndarray          # mm, scan coordinates
    kidney_id: str
    label: str = "none"

    def __post_init__(self):
        if self.kind not in EXTENTS:
            raise ConfigError(f"unknown sample kind {self.kind!r}")
        if self.scheme not in ("centralised", "sliding"):
            raise ConfigError(f"unknown sampling scheme {self.scheme!r}")
        if self.label not in CLASSES:
            raise DataError(f"unknown sample label {self.label!r}")
        self.center = np.asarray(self.center, dtype=np.float64)
        if self.center.shape != (3,):
            raise DataError("sample center must be a 3-vector")

    @property
    def extent(self) -> tuple:
        return EXTENTS[self.kind]


@dataclass
class SampleScore:
    """Class probability triple for one sample, ordered as CLASSES."""

    sample: SampleSpec
    probabilities: np.ndarray

    def __post_init__(self):
        self.probabilities = np.asarray(self.probabilities, dtype=np.float64)
        if self.probabilities.shape != (len(CLASSES),):
            raise DataError("expected one probability per class")
        if np.any(self.probabilities < 0) or \
                abs(self.probabilities.sum() - 1.0) > 1e-9:
            raise DataError("probabilities must be non-negative and sum to 1")

    @property
    def cancer_probability(self) -> float:
        return float(self.probabilities[0])


@dataclass
class PreparedScan:
    """Normalized 1mm volume, matching labels, and the dilated kidney region."""

    volume: VolumeGrid
    labels: LabelGrid
    region: np.ndarray          # bool, true within 40mm of the contour


def preprocess(volume: VolumeGrid, labels: LabelGrid) -> PreparedScan:
    """Resample to 1mm, clip and scale attenuation, zero far from kidneys.

    Masking happens after normalization, so masked-out voxels are exactly
    0.0 rather than a scaled background value.
    """
    if not labels.binarize().any():
        raise DataError("segmentation contains no kidney voxels")
    if labels.dims != volume.dims or \
            not np.allclose(labels.spacing, volume.spacing) or \
            not np.allclose(labels.origin, volume.origin):
        raise DataError("volume and segmentation grids do not match")
    iso = resample(volume, SAMPLE_SPACING_MM)
    iso_labels = resample(labels, SAMPLE_SPACING_MM)
    normalized = clip_normalize(iso)
    region = dilate(iso_labels.binarize(), MASK_DILATION_MM,
                    iso_labels.spacing)
    values = np.where(region, normalized.values, 0.0).astype(np.float32)
    clean = VolumeGrid(values=values, spacing=normalized.spacing,
                       origin=normalized.origin, normalized=True)
    return PreparedScan(volume=clean, labels=iso_labels, region=region)


# ---------------------------------------------------------------------------
# Footprints
# ---------------------------------------------------------------------------

def _footprint_start(grid, center: np.ndarray, extent) -> np.ndarray:
    """Index of the footprint's low corner; may stick out of the grid."""
    voxel = np.floor((np.asarray(center) - grid.origin)
                     / grid.spacing).astype(int)
    return voxel - np.asarray(extent) // 2


def _crop_padded(data: np.ndarray, start: np.ndarray, extent,
                 fill=0) -> np.ndarray:
    """Fixed-extent crop with out-of-grid voxels filled as background."""
    out = np.full(tuple(extent), fill, dtype=data.dtype)
    lo = np.maximum(start, 0)
    hi = np.minimum(start + extent, data.shape)
    if np.any(lo >= hi):
        return out
    dest_lo = lo - start
    dest_hi = dest_lo + (hi - lo)
    out[dest_lo[0]:dest_hi[0], dest_lo[1]:dest_hi[1], dest_lo[2]:dest_hi[2]] \
        = data[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    return out


def extract_patch(spec: SampleSpec, volume: VolumeGrid) -> np.ndarray:
    """The sample's voxel window, zero-padded past the scan edges."""
    start = _footprint_start(volume, spec.center, spec.extent)
    return _crop_padded(np.asarray(volume.values), start, spec.extent)


def _largest_disc_radius(mask: np.ndarray, spacing_mm: float) -> float:
    """Radius of the biggest in-plane disc inside `mask`, max over slices.

    A zero rim is added so discs are clipped at the footprint boundary.
    """
    best = 0.0
    for iz in range(mask.shape[2]):
        plane = mask[:, :, iz]
        if not plane.any():
            continue
        padded = np.pad(plane, 1)
        dist = ndimage.distance_transform_edt(padded, sampling=spacing_mm)
        best = max(best, float(dist.max()))
    return best


def label_sample(spec: SampleSpec, labels: LabelGrid) -> str:
    """Radius rules: tumour disc > 10mm wins, else contour disc > 20mm."""
    start = _footprint_start(labels, spec.center, spec.extent)
    crop = _crop_padded(labels.labels, start, spec.extent)
    if not crop.any():
        return "none"
    spacing = float(labels.spacing[0])
    if (crop == LABEL_TUMOUR).any() and \
            _largest_disc_radius(crop == LABEL_TUMOUR, spacing) \
            > CANCER_RADIUS_MM:
        return "cancerous"
    if _largest_disc_radius(crop >= LABEL_KIDNEY, spacing) > KIDNEY_RADIUS_MM:
        return "normal_kidney"
    return "none"


# ---------------------------------------------------------------------------
# Sample generation
# ---------------------------------------------------------------------------

def _z_centers(z_lo: float, extent_mm: float, step: float) -> np.ndarray:
    return z_lo + np.arange(0.0, extent_mm, step)


def centralised_samples(kidney: KidneyComponent, kind: str,
                        labels: Optional[LabelGrid] = None,
                        require_kidney: bool = False) -> List[SampleSpec]:
    """One sample per axial step through the kidney's z-extent.

    All centers share the kidney's in-plane centroid. With `require_kidney`
    (inference mode) samples whose footprint misses the contour entirely
    are dropped; that filter needs `labels`.
    """
    if kind not in EXTENTS:
        raise ConfigError(f"unknown sample kind {kind!r}")
    if require_kidney and labels is None:
        raise ConfigError("the kidney-containment filter needs labels")
    in_z = np.flatnonzero(kidney.mask.any(axis=(0, 1)))
    z_step = float(kidney.spacing[2])
    z_lo = float(kidney.origin[2]) + (in_z[0] + 0.5) * z_step
    extent_mm = (in_z[-1] - in_z[0] + 1) * z_step
    depth_mm = EXTENTS[kind][2] * SAMPLE_SPACING_MM
    if kind == "block3d" and extent_mm < depth_mm:
        centers_z = np.array([z_lo + 0.5 * (extent_mm - z_step)])
    else:
        centers_z = _z_centers(z_lo, extent_mm, Z_STEPS[kind])
    specs = []
    for cz in centers_z:
        spec = SampleSpec(kind=kind, scheme="centralised",
                          center=np.array([kidney.centroid[0],
                                           kidney.centroid[1], cz]),
                          kidney_id=kidney.side)
        if labels is not None:
            if require_kidney:
                start = _footprint_start(labels, spec.center, spec.extent)
                crop = _crop_padded(labels.labels, start, spec.extent)
                if not (crop >= LABEL_KIDNEY).any():
                    continue
            spec.label = label_sample(spec, labels)
        specs.append(spec)
    return specs


def sliding_candidates(scan: PreparedScan, kind: str,
                       kidneys: Optional[Sequence[KidneyComponent]] = None
                       ) -> List[SampleSpec]:
    """Every grid-placed sample, labeled, before the per-class cap.

    In-plane centers sit every 40mm; the z stepping matches the
    centralised scheme. Each sample is attributed to the kidney with the
    nearest centroid.
    """
    if kind not in EXTENTS:
        raise ConfigError(f"unknown sample kind {kind!r}")
    if kidneys is None:
        kidneys = split_kidneys(scan.labels)
    if not kidneys:
        raise DataError("no kidneys to attribute sliding samples to")
    labels = scan.labels
    extent_x, extent_y, extent_z = labels.dims * labels.spacing
    half = 0.5 * SLIDING_GRID_MM
    xs = labels.origin[0] + np.arange(half, extent_x, SLIDING_GRID_MM)
    ys = labels.origin[1] + np.arange(half, extent_y, SLIDING_GRID_MM)
    z_lo = float(labels.origin[2]) + 0.5 * float(labels.spacing[2])
    zs = _z_centers(z_lo, extent_z, Z_STEPS[kind])
    centroids = np.stack([k.centroid for k in kidneys])

    candidates = []
    for cz in zs:
        for cy in ys:
            for cx in xs:
                center = np.array([cx, cy, cz])
                nearest = int(np.argmin(
                    np.linalg.norm(centroids - center, axis=1)))
                spec = SampleSpec(kind=kind, scheme="sliding", center=center,
                                  kidney_id=kidneys[nearest].side)
                spec.label = label_sample(spec, labels)
                candidates.append(spec)
    return candidates


def sliding_samples(scan: PreparedScan, kind: str,
                    kidneys: Optional[Sequence[KidneyComponent]] = None,
                    seed: int = 0) -> List[SampleSpec]:
    """Sliding candidates capped at 50 per class per kidney.

    Over-cap groups keep a seeded uniform subset. Output order is sorted
    by center coordinates regardless of generation order.
    """
    grouped: Dict[tuple, List[SampleSpec]] = {}
    for spec in sliding_candidates(scan, kind, kidneys):
        grouped.setdefault((spec.kidney_id, spec.label), []).append(spec)

    rng = np.random.default_rng(seed)
    kept: List[SampleSpec] = []
    for key in sorted(grouped):
        group = grouped[key]
        if len(group) > CLASS_CAP:
            chosen = rng.choice(len(group), size=CLASS_CAP, replace=False)
            group = [group[i] for i in sorted(chosen)]
        kept.extend(group)
    kept.sort(key=lambda s: (s.center[2], s.center[1], s.center[0]))
    return kept


# ---------------------------------------------------------------------------
# Reference scorer
# ---------------------------------------------------------------------------

def sample_features(scan: PreparedScan, spec: SampleSpec) -> np.ndarray:
    """Summary statistics of normalized intensity inside the masked region.

    Mean, standard deviation, and the nine deciles; zeros when the sample
    footprint misses the dilated kidney region entirely.
    """
    start = _footprint_start(scan.volume, spec.center, spec.extent)
    patch = _crop_padded(scan.volume.values, start, spec.extent,
                         fill=np.float32(0))
    inside = _crop_padded(scan.region, start, spec.extent, fill=False)
    values = np.asarray(patch[inside], dtype=np.float64)
    if values.size == 0:
        return np.zeros(SCORER_FEATURES)
    deciles = np.percentile(values, np.arange(10, 100, 10))
    return np.concatenate([[values.mean(), values.std()], deciles])


@dataclass
class ReferenceScorer:
    """Dense 11 -> 16 -> 3 network over per-sample intensity statistics."""

    weights: Dict[str, np.ndarray]

    def probabilities(self, features: np.ndarray) -> np.ndarray:
        feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if feats.shape[1] != self.weights["w0"].shape[0]:
            raise DataError(
                f"scorer expects {self.weights['w0'].shape[0]} features, "
                f"got {feats.shape[1]}")
        hidden = np.maximum(feats @ self.weights["w0"] + self.weights["b0"],
                            0.0)
        logits = hidden @ self.weights["w1"] + self.weights["b1"]
        return np.apply_along_axis(softmax, 1, logits)


def train_scorer(feature_matrix: np.ndarray, labels: Sequence[int],
                 seed: int = 0, schedule=None,
                 batch_size: int | None = None) -> ReferenceScorer:
    """Fit the reference scorer: a short run at 1e-3, then a short refine.

    `schedule` overrides the two (epochs, learning rate) stages; `batch_size`
    overrides the per-step sample count.
    """
    if schedule is None:
        schedule = ((SCORER_EPOCHS_INITIAL, SCORER_LR_INITIAL),
                    (SCORER_EPOCHS_REFINE, SCORER_LR_REFINE))
    if batch_size is None:
        batch_size = SCORER_BATCH
    feats = np.asarray(feature_matrix, dtype=np.float64)
    y = np.asarray(labels, dtype=int)
    if feats.ndim != 2 or feats.shape[1] != SCORER_FEATURES:
        raise DataError(
            f"expected (n, {SCORER_FEATURES}) feature matrix, "
            f"got {feats.shape}")
    if len(y) != len(feats):
        raise DataError("feature and label counts differ")
    rng = np.random.default_rng(seed)
    params = {
        "w0": parameter((SCORER_FEATURES, SCORER_HIDDEN), rng),
        "b0": parameter(np.zeros(SCORER_HIDDEN)),
        "w1": parameter((SCORER_HIDDEN, len(CLASSES)), rng),
        "b1": parameter(np.zeros(len(CLASSES))),
    }
    params_t = [params[k] for k in sorted(params)]
    adam = AdamState.for_params(params_t)
    n = len(feats)
    for epochs, lr in schedule:
        for _ in range(epochs):
            order = rng.permutation(n)
            for lo in range(0, n, batch_size):
                batch = order[lo:lo + batch_size]
                zero_grads(params_t)
                x = Tensor(feats[batch])
                h = relu(dense(x, params["w0"], params["b0"]))
                loss = softmax_xent(dense(h, params["w1"], params["b1"]),
                                    y[batch])
                loss.backward()
                grads = [p.grad if p.grad is not None
                         else np.zeros_like(p.values) for p in params_t]
                adam_step(params_t, grads, adam, lr)
    return ReferenceScorer(
        weights={k: np.array(v.values) for k, v in params.items()})


def score_samples(scorer, scan: PreparedScan,
                  samples: Sequence[SampleSpec]) -> List[SampleScore]:
    """One probability triple per sample from any scorer with the interface."""
    if not samples:
        return []
    feats = np.stack([sample_features(scan, s) for s in samples])
    probs = scorer.probabilities(feats)
    return [SampleScore(sample=s, probabilities=p)
            for s, p in zip(samples, probs)]


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

_MANIFEST_HEADER = ["scan_id", "kidney_id", "kind", "scheme",
                    "cx", "cy", "cz", "label"]


def save_sample_manifest(samples: Sequence[SampleSpec], path,
                         scan_id: str = "") -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_MANIFEST_HEADER)
        for s in samples:
            writer.writerow([scan_id, s.kidney_id, s.kind, s.scheme,
                             repr(float(s.center[0])),
                             repr(float(s.center[1])),
                             repr(float(s.center[2])), s.label])


def load_sample_manifest(path) -> List[SampleSpec]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != _MANIFEST_HEADER:
        raise DataError(f"not a sample manifest: {path}")
    return [SampleSpec(kind=r[2], scheme=r[3],
                       center=[float(r[4]), float(r[5]), float(r[6])],
                       kidney_id=r[1], label=r[7]) for r in rows[1:]]


def save_scores_csv(scores: Sequence[SampleScore], path,
                    scan_id: str = "") -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_MANIFEST_HEADER + [f"p_{c}" for c in CLASSES])
        for sc in scores:
            s = sc.sample
            writer.writerow([scan_id, s.kidney_id, s.kind, s.scheme,
                             repr(float(s.center[0])),
                             repr(float(s.center[1])),
                             repr(float(s.center[2])), s.label]
                            + [repr(float(p)) for p in sc.probabilities])
