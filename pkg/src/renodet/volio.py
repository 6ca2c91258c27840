"""Volumetric data model and I/O.

Scalar (HU) and label voxel grids with physical spacing, plus the
operations every downstream stage leans on: file round-trips, isotropic
resampling, intensity clip/normalisation, metric binary dilation, and
splitting a labelled scan into individual kidney components.

Grids are stored as numpy arrays of shape ``(nx, ny, nz)`` indexed
``[ix, iy, iz]``; serialised payloads are little-endian with x varying
fastest.  Voxel ``i`` is centred at ``origin + (i + 0.5) * spacing``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DataError

# Label codes used throughout the pipeline.
LABEL_BACKGROUND = 0
LABEL_KIDNEY = 1
LABEL_TUMOUR = 2
LABEL_CYST = 3
_KNOWN_LABELS = (LABEL_BACKGROUND, LABEL_KIDNEY, LABEL_TUMOUR, LABEL_CYST)

# Clip window and divisor for attenuation normalisation.
CLIP_HU = (-200.0, 200.0)
NORM_DIVISOR = 100.0

# Connected components smaller than this are treated as segmentation noise.
MIN_COMPONENT_MM3 = 1000.0

# A single component reaching this far past the midline on both sides is
# flagged as a fused ("horseshoe") kidney and rejected.
HORSESHOE_SPAN_MM = 20.0


def _as_triple(x, dtype=float) -> np.ndarray:
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim == 0:
        return np.full(3, arr[()])
    return arr.reshape(3)


@dataclass
class VolumeGrid:
    """Scalar voxel grid: raw HU, or normalised units after clip_normalize."""

    values: np.ndarray          # (nx, ny, nz) float32/float64
    spacing: np.ndarray         # mm per voxel, (3,)
    origin: np.ndarray          # mm, (3,)
    normalized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3:
            raise DataError(f"volume must be 3D, got shape {self.values.shape}")
        self.spacing = _as_triple(self.spacing)
        self.origin = _as_triple(self.origin)
        if np.any(self.spacing <= 0):
            raise DataError(f"spacing must be positive, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def voxel_volume(self) -> float:
        """Volume of one voxel in mm^3."""
        return float(np.prod(self.spacing))

    def extent_mm(self) -> np.ndarray:
        return np.asarray(self.dims) * self.spacing


@dataclass
class LabelGrid:
    """Integer label grid: 0=background, 1=kidney, 2=tumour, 3=cyst."""

    labels: np.ndarray          # (nx, ny, nz) uint8
    spacing: np.ndarray
    origin: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 3:
            raise DataError(f"labels must be 3D, got shape {self.labels.shape}")
        self.spacing = _as_triple(self.spacing)
        self.origin = _as_triple(self.origin)
        if np.any(self.spacing <= 0):
            raise DataError(f"spacing must be positive, got {self.spacing}")
        bad = np.setdiff1d(np.unique(self.labels), _KNOWN_LABELS)
        if bad.size:
            raise DataError(f"unknown label code(s) {bad.tolist()}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    def binarize(self) -> np.ndarray:
        """Binary kidney contour: all tissue inside the contour (labels >= 1)."""
        return self.labels >= LABEL_KIDNEY

    def class_mask(self, code: int) -> np.ndarray:
        return self.labels == code


@dataclass
class KidneyComponent:
    """One connected kidney with its cropped mask and placement metadata."""

    mask: np.ndarray            # cropped boolean subgrid
    bbox: tuple[slice, slice, slice]  # location of `mask` in the parent grid
    spacing: np.ndarray         # mm, inherited from the parent grid
    origin: np.ndarray          # mm origin of the cropped subgrid
    side: str                   # "left" | "right"
    centroid: np.ndarray        # mm, in scan coordinates
    voxel_count: int

    @property
    def volume_mm3(self) -> float:
        return self.voxel_count * float(np.prod(self.spacing))


# ---------------------------------------------------------------------------
# File format: <name>.json header + <name>.raw little-endian payload
# ---------------------------------------------------------------------------

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def save_grid(grid: VolumeGrid | LabelGrid, path: str | Path) -> None:
    """Write a grid as a JSON header + raw payload pair.

    `path` may carry either extension (or none); both files share the stem.
    """
    base = Path(path)
    if base.suffix in (".json", ".raw"):
        base = base.with_suffix("")
    if isinstance(grid, LabelGrid):
        kind, dtype_name, data = "labels", "u8", grid.labels
        normalized = False
    else:
        kind, dtype_name, data = "volume", "f32", grid.values
        normalized = grid.normalized
    header = {
        "kind": kind,
        "dims": list(data.shape),
        "spacing": [float(s) for s in grid.spacing],
        "origin": [float(o) for o in grid.origin],
        "dtype": dtype_name,
        "normalized": normalized,
    }
    payload = np.ascontiguousarray(data, dtype=_DTYPES[dtype_name]).tobytes(order="F")
    base.with_suffix(".raw").write_bytes(payload)
    base.with_suffix(".json").write_text(json.dumps(header, indent=1) + "\n")


def load_grid(path: str | Path) -> VolumeGrid | LabelGrid:
    """Load a grid pair written by save_grid."""
    base = Path(path)
    if base.suffix in (".json", ".raw"):
        base = base.with_suffix("")
    header_path = base.with_suffix(".json")
    if not header_path.exists():
        raise DataError(f"missing grid header {header_path}")
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"malformed grid header {header_path}: {e}") from e
    for key in ("kind", "dims", "spacing", "origin", "dtype"):
        if key not in header:
            raise DataError(f"grid header {header_path} missing field '{key}'")
    dims = tuple(int(d) for d in header["dims"])
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise DataError(f"bad dims {dims} in {header_path}")
    dtype_name = header["dtype"]
    if dtype_name not in _DTYPES:
        raise DataError(f"unknown dtype '{dtype_name}' in {header_path}")
    raw = base.with_suffix(".raw").read_bytes()
    dtype = _DTYPES[dtype_name]
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) != expected:
        raise DataError(
            f"payload length mismatch for {base}: header implies {expected} bytes, "
            f"file has {len(raw)}"
        )
    data = np.frombuffer(raw, dtype=dtype).reshape(dims, order="F")
    if header["kind"] == "labels":
        return LabelGrid(labels=data.copy(), spacing=header["spacing"],
                         origin=header["origin"])
    return VolumeGrid(values=data.astype(np.float32), spacing=header["spacing"],
                      origin=header["origin"],
                      normalized=bool(header.get("normalized", False)))


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

def _axis_coords(new_n: int, target: float, spacing: float) -> np.ndarray:
    # Voxel centres: old index i sits at (i + 0.5) * spacing, so the new
    # centre (j + 0.5) * target lands at fractional old index
    # (j + 0.5) * target / spacing - 0.5.
    return (np.arange(new_n) + 0.5) * target / spacing - 0.5


def _interp_axis(data: np.ndarray, axis: int, coords: np.ndarray) -> np.ndarray:
    """Linear interpolation along one axis at fractional indices `coords`."""
    n = data.shape[axis]
    lo = np.clip(np.floor(coords).astype(int), 0, n - 1)
    hi = np.clip(lo + 1, 0, n - 1)
    w = np.clip(coords - lo, 0.0, 1.0)
    shape = [1, 1, 1]
    shape[axis] = len(coords)
    w = w.reshape(shape)
    return np.take(data, lo, axis=axis) * (1.0 - w) + np.take(data, hi, axis=axis) * w


def resample(grid: VolumeGrid | LabelGrid, target_spacing, mode: str | None = None):
    """Resample a grid to `target_spacing` (mm), preserving physical extent.

    Intensities use trilinear interpolation, labels nearest-neighbour.
    New dims are ``ceil(dims * spacing / target_spacing)``.  Interpolation
    is separable, one axis at a time, with edge clamping.
    """
    target = _as_triple(target_spacing)
    if np.any(target <= 0):
        raise DataError(f"target spacing must be positive, got {target}")
    is_labels = isinstance(grid, LabelGrid)
    if mode is None:
        mode = "nearest" if is_labels else "trilinear"
    if is_labels and mode != "nearest":
        raise DataError("labels must be resampled with mode='nearest'")
    if mode not in ("trilinear", "nearest"):
        raise DataError(f"unknown resampling mode '{mode}'")

    data = grid.labels if is_labels else grid.values
    old_dims = np.asarray(data.shape)
    new_dims = np.maximum(np.ceil(old_dims * grid.spacing / target).astype(int), 1)
    coords = [_axis_coords(new_dims[ax], target[ax], grid.spacing[ax]) for ax in range(3)]

    if mode == "nearest":
        idx = [np.clip(np.floor(c + 0.5).astype(int), 0, old_dims[ax] - 1)
               for ax, c in enumerate(coords)]
        out = data[np.ix_(*idx)]
    else:
        out = np.asarray(data, dtype=np.float64)
        for ax in range(3):
            out = _interp_axis(out, ax, coords[ax])

    if is_labels:
        return LabelGrid(labels=out.astype(np.uint8), spacing=target,
                         origin=grid.origin.copy())
    return VolumeGrid(values=out.astype(np.float32), spacing=target,
                      origin=grid.origin.copy(), normalized=grid.normalized)


def clip_normalize(volume: VolumeGrid) -> VolumeGrid:
    """Clip attenuation to [-200, 200] HU and divide by 100.

    Output values lie in [-2, 2] and the grid is flagged to reject a second
    application.
    """
    if volume.normalized:
        raise DataError("volume is already normalized")
    lo, hi = CLIP_HU
    out = np.clip(volume.values.astype(np.float64), lo, hi) / NORM_DIVISOR
    return VolumeGrid(values=out.astype(np.float32), spacing=volume.spacing.copy(),
                      origin=volume.origin.copy(), normalized=True)


# ---------------------------------------------------------------------------
# Morphology
# ---------------------------------------------------------------------------

def dilate(mask: np.ndarray, radius_mm: float, spacing) -> np.ndarray:
    """Metric dilation: voxels within `radius_mm` of the foreground.

    Uses the exact Euclidean distance transform with anisotropic sampling,
    so the result is a true metric ball regardless of voxel shape.
    """
    if radius_mm < 0:
        raise DataError(f"dilation radius must be >= 0, got {radius_mm}")
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return mask.copy()
    dist = ndimage.distance_transform_edt(~mask, sampling=_as_triple(spacing))
    return dist <= radius_mm


def split_kidneys(label_grid: LabelGrid) -> list[KidneyComponent]:
    """Split the kidney contour into left/right connected components.

    Components are 26-connected on labels >= 1; specks under 1000 mm^3 are
    dropped, the two largest survivors are kept, and sides come from each
    centroid's x relative to the scan midline.  Fused kidneys (one component
    spanning the midline, or two components on the same side) are rejected.
    """
    fg = label_grid.binarize()
    if not fg.any():
        raise DataError("no kidney voxels in label grid")
    structure = np.ones((3, 3, 3), dtype=bool)
    labelled, n = ndimage.label(fg, structure=structure)
    voxel_volume = label_grid.voxel_volume
    sizes = ndimage.sum_labels(fg, labelled, index=np.arange(1, n + 1))
    keep = [i + 1 for i in range(n) if sizes[i] * voxel_volume >= MIN_COMPONENT_MM3]
    if not keep:
        raise DataError("no kidney component above the noise floor")
    keep.sort(key=lambda i: sizes[i - 1], reverse=True)
    keep = keep[:2]

    midline_x = label_grid.origin[0] + label_grid.dims[0] * label_grid.spacing[0] / 2.0

    components = []
    objects = ndimage.find_objects(labelled)
    for comp_id in keep:
        bbox = objects[comp_id - 1]
        sub = labelled[bbox] == comp_id
        idx = np.argwhere(sub)
        offset = np.array([s.start for s in bbox])
        centroid_vox = idx.mean(axis=0) + offset
        centroid = label_grid.origin + (centroid_vox + 0.5) * label_grid.spacing

        # Physical x-span of the component, for horseshoe detection.
        xs = label_grid.origin[0] + (idx[:, 0] + offset[0] + 0.5) * label_grid.spacing[0]
        span_left = midline_x - xs.min()
        span_right = xs.max() - midline_x
        if span_left > HORSESHOE_SPAN_MM and span_right > HORSESHOE_SPAN_MM:
            raise DataError(
                "kidney component spans the midline by "
                f"{span_left:.1f}/{span_right:.1f} mm: horseshoe/ambiguous anatomy"
            )

        side = "left" if centroid[0] >= midline_x else "right"
        components.append(KidneyComponent(
            mask=sub,
            bbox=bbox,
            spacing=label_grid.spacing.copy(),
            origin=label_grid.origin + offset * label_grid.spacing,
            side=side,
            centroid=centroid,
            voxel_count=int(sub.sum()),
        ))

    if len(components) == 2 and components[0].side == components[1].side:
        raise DataError("both kidney components on the same side: horseshoe/ambiguous")
    return components
