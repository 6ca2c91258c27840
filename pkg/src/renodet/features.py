"""Per-kidney feature vectors for the shape classifier.

Three parts, concatenated into a fixed-order 28-element vector:
8 shape descriptors, a 10-bin surface-curvature histogram, and a 10-bin
attenuation histogram.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull, Delaunay, QhullError

from .errors import DataError, NumericError
from .volio import KidneyComponent, VolumeGrid

CURVATURE_RANGE = (-0.5, 0.5)
ATTENUATION_RANGE = (-20.0, 80.0)
HISTOGRAM_BINS = 10
N_FEATURES = 28

FEATURE_NAMES = (
    ["volume", "max_diameter", "min_diameter", "convexity",
     "lambda1", "lambda2", "lambda3", "side_flag"]
    + [f"curv_{i}" for i in range(HISTOGRAM_BINS)]
    + [f"atten_{i}" for i in range(HISTOGRAM_BINS)]
)


@dataclass
class ShapeDescriptors:
    """Scalar geometry summary of one kidney component."""

    volume: float               # mm^3
    max_diameter: float         # mm, max Feret over hull vertices
    min_diameter: float         # mm, shortest equivalent-ellipsoid axis
    convexity: float            # (0, 1]
    inertia_eigenvalues: np.ndarray  # (3,) mm^2, descending
    side_flag: int              # 1 = left

    def as_array(self) -> np.ndarray:
        return np.array([self.volume, self.max_diameter, self.min_diameter,
                         self.convexity, *self.inertia_eigenvalues,
                         float(self.side_flag)])


def _voxel_centers(component: KidneyComponent) -> np.ndarray:
    idx = np.argwhere(component.mask)
    return (idx + 0.5) * component.spacing + component.origin


def shape_descriptors(component: KidneyComponent) -> ShapeDescriptors:
    """Compute the 8 scalar shape descriptors of a kidney component.

    Volume counts voxels; diameters and convexity come from the convex hull
    of voxel centers (convexity against the hull rasterized back onto the
    voxel grid, so an exactly digitized convex solid scores 1); eigenvalues
    are those of the unit-mass inertia tensor of voxel centers about the
    centroid.
    """
    if not component.mask.any():
        raise DataError("empty kidney component")
    centers = _voxel_centers(component)
    volume = component.mask.sum() * float(np.prod(component.spacing))

    try:
        hull = ConvexHull(centers)
    except QhullError as exc:
        raise DataError(f"degenerate (coplanar) component: {exc}") from None
    hull_pts = centers[hull.vertices]
    diff = hull_pts[:, None, :] - hull_pts[None, :, :]
    max_diameter = float(np.sqrt((diff**2).sum(axis=2)).max())

    # rasterized-hull convexity: fraction of in-hull voxels that are mask
    tri = Delaunay(hull_pts)
    grid_idx = np.argwhere(np.ones_like(component.mask, bool))
    grid_centers = (grid_idx + 0.5) * component.spacing + component.origin
    in_hull = (tri.find_simplex(grid_centers) >= 0).reshape(component.mask.shape)
    in_hull |= component.mask  # hull surface tests can miss its own points
    convexity = float(component.mask.sum() / in_hull.sum())

    rel = centers - centers.mean(axis=0)
    second = rel.T @ rel / len(rel)
    inertia = np.trace(second) * np.eye(3) - second
    eig = np.linalg.eigvalsh(inertia)[::-1]
    eig = np.clip(eig, 0.0, None)

    # semi-axes of the uniform ellipsoid with these inertia eigenvalues
    l1, l2, l3 = eig
    min_axis_sq = 2.5 * (l2 + l3 - l1)
    if min_axis_sq <= 0:
        raise DataError("degenerate (coplanar) component: zero minor axis")
    min_diameter = float(2.0 * np.sqrt(min_axis_sq))

    return ShapeDescriptors(
        volume=float(volume),
        max_diameter=max_diameter,
        min_diameter=min_diameter,
        convexity=convexity,
        inertia_eigenvalues=eig,
        side_flag=1 if component.side == "left" else 0,
    )


def _histogram(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Fractional histogram on [lo, hi]: half-open bins, last bin closed.

    Out-of-range values are discarded; with nothing in range the result is
    the zero vector.
    """
    values = np.asarray(values, np.float64).ravel()
    edges = np.linspace(lo, hi, HISTOGRAM_BINS + 1)
    pos = np.digitize(values, edges)
    bin_idx = pos - 1
    bin_idx[values == edges[-1]] = HISTOGRAM_BINS - 1
    in_range = (bin_idx >= 0) & (bin_idx < HISTOGRAM_BINS)
    counts = np.bincount(bin_idx[in_range], minlength=HISTOGRAM_BINS)
    total = counts.sum()
    if total == 0:
        return np.zeros(HISTOGRAM_BINS)
    return counts / total


def curvature_histogram(vertex_curvatures) -> np.ndarray:
    """10-bin fractional histogram of vertex curvatures on [-0.5, 0.5]."""
    return _histogram(np.asarray(vertex_curvatures), *CURVATURE_RANGE)


def attenuation_histogram(volume: VolumeGrid, mask: np.ndarray) -> np.ndarray:
    """10-bin fractional histogram of raw HU inside `mask` on [-20, 80]."""
    if volume.normalized:
        raise DataError("attenuation histogram needs raw HU, got normalized values")
    mask = np.asarray(mask, bool)
    if mask.shape != volume.values.shape:
        raise DataError("mask shape does not match volume")
    if not mask.any():
        raise DataError("empty attenuation mask")
    return _histogram(volume.values[mask], *ATTENUATION_RANGE)


def assemble(shape: ShapeDescriptors, curv_hist, atten_hist) -> np.ndarray:
    """Concatenate parts into the fixed-order 28-element feature vector."""
    curv = np.asarray(curv_hist, np.float64)
    atten = np.asarray(atten_hist, np.float64)
    if curv.shape != (HISTOGRAM_BINS,) or atten.shape != (HISTOGRAM_BINS,):
        raise DataError("histogram segments must have 10 bins")
    vec = np.concatenate([shape.as_array(), curv, atten])
    if not np.all(np.isfinite(vec)):
        raise NumericError("non-finite value in feature vector")
    if len(vec) != N_FEATURES:
        raise DataError(f"feature vector has length {len(vec)}, expected {N_FEATURES}")
    return vec


def save_feature_csv(rows, path: str | Path) -> None:
    """One row per kidney: id, side, label, then the 28 features.

    `rows` yields (kidney_id, side, label, vector) tuples.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "side", "label"] + FEATURE_NAMES)
        for kidney_id, side, label, vec in rows:
            vec = np.asarray(vec, np.float64)
            if len(vec) != N_FEATURES:
                raise DataError("feature row has wrong length")
            writer.writerow([kidney_id, side, int(label)]
                            + [repr(float(x)) for x in vec])


def load_feature_csv(path: str | Path):
    """Read rows written by save_feature_csv back as (id, side, label, vector)."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[3:] != FEATURE_NAMES:
            raise DataError("unrecognized feature CSV header")
        for row in reader:
            out.append((row[0], row[1], int(row[2]),
                        np.array([float(x) for x in row[3:]])))
    return out
