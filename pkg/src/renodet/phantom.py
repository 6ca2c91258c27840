"""Synthetic kidney phantoms for desk-scale pipeline validation.

A phantom is an analytic ellipsoid rasterized onto a small voxel grid with
an optional lesion and Gaussian HU noise.  Three lesion kinds cover the
cases the detector has to tell apart: an exophytic bump (a tumour sphere
centred on the kidney surface, deforming the contour), an endophytic
sphere (a tumour buried inside the contour, visible only through its
attenuation), and a cyst (a contour-deforming benign mimic).  Ground truth
for every lesion is returned as a manifest dict alongside the grids.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError
from .volio import (LABEL_BACKGROUND, LABEL_CYST, LABEL_KIDNEY, LABEL_TUMOUR,
                    LabelGrid, VolumeGrid)

LESION_KINDS = ("exophytic_bump", "endophytic_sphere", "cyst")
SIDES = ("left", "right")

# default tissue attenuations, Hounsfield units
BACKGROUND_HU = -80.0
KIDNEY_HU = 30.0
TUMOUR_HU = 45.0
CYST_HU = 5.0
NOISE_HU = 8.0

GRID_PAD_MM = 6.0
DEFAULT_SPACING_MM = 2.0


@dataclass(frozen=True)
class PhantomSpec:
    """One synthetic kidney: geometry, tissue attenuations, and a seed."""

    semi_axes: tuple = (16.0, 11.0, 22.0)   # mm, (x, y, z)
    side: str = "left"
    base_hu: float = KIDNEY_HU
    noise_hu: float = NOISE_HU
    lesion: Optional[str] = None
    lesion_radius_mm: float = 0.0
    lesion_hu: float = TUMOUR_HU
    seed: int = 0
    spacing_mm: float = DEFAULT_SPACING_MM
    background_hu: float = BACKGROUND_HU
    grid_extent_mm: Optional[tuple] = None  # None = sized to fit

    def __post_init__(self):
        axes = np.asarray(self.semi_axes, dtype=np.float64)
        if axes.shape != (3,) or not np.all(axes > 0):
            raise ConfigError("semi_axes must be three positive lengths")
        if self.side not in SIDES:
            raise ConfigError(f"side must be one of {SIDES}, got {self.side!r}")
        if self.spacing_mm <= 0:
            raise ConfigError("spacing_mm must be positive")
        if self.noise_hu < 0:
            raise ConfigError("noise_hu cannot be negative")
        if self.lesion is not None:
            if self.lesion not in LESION_KINDS:
                raise ConfigError(
                    f"lesion must be one of {LESION_KINDS}, got {self.lesion!r}")
            if self.lesion_radius_mm <= 0:
                raise ConfigError("a lesion needs a positive radius")
            if self.lesion_radius_mm >= float(axes.min()):
                raise ConfigError(
                    f"lesion radius {self.lesion_radius_mm} mm must stay below "
                    f"the smallest semi-axis {float(axes.min())} mm")
        elif self.lesion_radius_mm:
            raise ConfigError("lesion_radius_mm set without a lesion kind")


def _lesion_reach(spec: PhantomSpec) -> float:
    """How far past the ellipsoid surface the lesion can extend, mm."""
    if spec.lesion in ("exophytic_bump", "cyst"):
        return spec.lesion_radius_mm
    return 0.0


def _grid_shape(spec: PhantomSpec):
    """Grid extent (mm) and kidney centre placed wholly on spec.side."""
    axes = np.asarray(spec.semi_axes, dtype=np.float64)
    reach = _lesion_reach(spec)
    half = axes + reach + GRID_PAD_MM
    if spec.grid_extent_mm is not None:
        extent = np.asarray(spec.grid_extent_mm, dtype=np.float64)
        if extent.shape != (3,) or not np.all(extent > 0):
            raise ConfigError("grid_extent_mm must be three positive lengths")
    else:
        # the kidney occupies one lateral half so the scan midline splits
        # background, not kidney
        extent = np.array([4.0 * half[0], 2.0 * half[1], 2.0 * half[2]])
    centre = extent / 2.0
    quarter = extent[0] / 4.0
    centre[0] = extent[0] / 2.0 + (quarter if spec.side == "left" else -quarter)
    return extent, centre


def _bump_direction(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    """Random unit vector pointing away from the scan midline."""
    d = rng.normal(size=3)
    norm = np.linalg.norm(d)
    if norm < 1e-12:
        d, norm = np.array([1.0, 0.0, 0.0]), 1.0
    d = d / norm
    outward = 1.0 if spec.side == "left" else -1.0
    d[0] = outward * abs(d[0])
    return d


def _surface_point(axes: np.ndarray, centre: np.ndarray,
                   direction: np.ndarray) -> np.ndarray:
    # scale the ray so the point satisfies the ellipsoid equation exactly
    t = 1.0 / np.sqrt(np.sum((direction / axes) ** 2))
    return centre + t * direction


def phantom_generate(spec: PhantomSpec):
    """Rasterize one phantom.

    Returns (VolumeGrid, LabelGrid, manifest).  The manifest records the
    measured (voxel-counted) kidney and lesion volumes, the analytic lesion
    diameter, and everything needed to regenerate the phantom.
    """
    axes = np.asarray(spec.semi_axes, dtype=np.float64)
    extent, centre = _grid_shape(spec)
    spacing = float(spec.spacing_mm)
    dims = np.maximum(np.ceil(extent / spacing).astype(int), 1)
    rng = np.random.default_rng(spec.seed)

    ix, iy, iz = np.indices(dims, dtype=np.float64)
    xs = (ix + 0.5) * spacing
    ys = (iy + 0.5) * spacing
    zs = (iz + 0.5) * spacing

    norm2 = (((xs - centre[0]) / axes[0]) ** 2
             + ((ys - centre[1]) / axes[1]) ** 2
             + ((zs - centre[2]) / axes[2]) ** 2)
    kidney = norm2 <= 1.0

    lesion_mask = np.zeros(tuple(dims), dtype=bool)
    lesion_centre = None
    if spec.lesion is not None:
        if spec.lesion == "endophytic_sphere":
            lesion_centre = centre.copy()
        else:
            direction = _bump_direction(spec, rng)
            lesion_centre = _surface_point(axes, centre, direction)
        r2 = ((xs - lesion_centre[0]) ** 2 + (ys - lesion_centre[1]) ** 2
              + (zs - lesion_centre[2]) ** 2)
        lesion_mask = r2 <= spec.lesion_radius_mm ** 2

        lo = lesion_centre - spec.lesion_radius_mm
        hi = lesion_centre + spec.lesion_radius_mm
        if np.any(lo < 0) or np.any(hi > dims * spacing):
            raise DataError(
                f"lesion of radius {spec.lesion_radius_mm} mm at "
                f"{np.round(lesion_centre, 1).tolist()} leaves the "
                f"{(dims * spacing).tolist()} mm volume")

    labels = np.full(tuple(dims), LABEL_BACKGROUND, dtype=np.uint8)
    labels[kidney] = LABEL_KIDNEY
    if spec.lesion is not None:
        code = LABEL_CYST if spec.lesion == "cyst" else LABEL_TUMOUR
        labels[lesion_mask] = code

    values = np.full(tuple(dims), spec.background_hu, dtype=np.float64)
    values[kidney] = spec.base_hu
    if spec.lesion is not None:
        values[lesion_mask] = spec.lesion_hu
    values = values + rng.normal(0.0, spec.noise_hu, size=tuple(dims))

    voxel_mm3 = spacing ** 3
    volume = VolumeGrid(values=values.astype(np.float32),
                        spacing=spacing, origin=(0.0, 0.0, 0.0))
    label_grid = LabelGrid(labels=labels, spacing=spacing,
                           origin=(0.0, 0.0, 0.0))
    manifest = {
        "side": spec.side,
        "semi_axes_mm": [float(a) for a in axes],
        "spacing_mm": spacing,
        "seed": int(spec.seed),
        "base_hu": float(spec.base_hu),
        "noise_hu": float(spec.noise_hu),
        "background_hu": float(spec.background_hu),
        "kidney_volume_mm3": float(np.count_nonzero(labels >= LABEL_KIDNEY)
                                   * voxel_mm3),
        "lesion": spec.lesion or "none",
        "lesion_hu": float(spec.lesion_hu) if spec.lesion else 0.0,
        "lesion_radius_mm": float(spec.lesion_radius_mm),
        "lesion_diameter_mm": float(2.0 * spec.lesion_radius_mm),
        "lesion_volume_mm3": float(np.count_nonzero(lesion_mask) * voxel_mm3),
        "lesion_centre_mm": ([float(c) for c in lesion_centre]
                             if lesion_centre is not None else None),
    }
    return volume, label_grid, manifest


# ---------------------------------------------------------------------------
# Study cohorts
# ---------------------------------------------------------------------------

@dataclass
class CohortPlan:
    """Arm sizes and parameter ranges for a phantom study cohort.

    The exophytic arm mixes two bump sizes: most bumps sit between the two
    positivity thresholds (lesion-positive for the graph stream only) and
    `n_bump_large` of them exceed the larger threshold so both label modes
    see two classes in every training fold.
    """

    n_healthy: int = 100
    n_bump: int = 50
    n_endophytic: int = 50
    n_cyst: int = 0
    n_bump_large: int = 15
    seed: int = 0
    spacing_mm: float = DEFAULT_SPACING_MM
    semi_axis_ranges: tuple = ((14.0, 18.0), (10.0, 13.0), (18.0, 26.0))
    large_semi_axis_ranges: tuple = ((21.0, 24.0), (20.0, 21.5), (28.0, 33.0))
    bump_radius_range: tuple = (6.5, 10.5)
    large_bump_radius_range: tuple = (17.5, 19.5)
    endo_radius_range: tuple = (5.5, 8.0)
    cyst_radius_range: tuple = (6.5, 10.5)
    base_hu: float = KIDNEY_HU
    tumour_hu: float = TUMOUR_HU
    cyst_hu: float = CYST_HU
    noise_hu: float = NOISE_HU

    def __post_init__(self):
        for name in ("n_healthy", "n_bump", "n_endophytic", "n_cyst",
                     "n_bump_large"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} cannot be negative")
        if self.n_bump_large > self.n_bump:
            raise ConfigError("n_bump_large cannot exceed n_bump")


@dataclass(frozen=True)
class CohortMember:
    scan_id: str
    patient_id: str
    arm: str                 # healthy | exophytic | endophytic | cyst
    spec: PhantomSpec


def _draw(rng: np.random.Generator, lo_hi) -> float:
    lo, hi = float(lo_hi[0]), float(lo_hi[1])
    return float(rng.uniform(lo, hi))


# Drawn lesion radii stay below this fraction of the smallest semi-axis so
# every member satisfies the radius < semi-axis constraint by construction.
_RADIUS_AXIS_MARGIN = 0.95


def _draw_radius(rng: np.random.Generator, lo_hi, axes) -> float:
    lo, hi = float(lo_hi[0]), float(lo_hi[1])
    cap = _RADIUS_AXIS_MARGIN * min(axes)
    if lo >= cap:
        raise ConfigError(
            f"lesion radius range {lo_hi} cannot fit a kidney with smallest "
            f"semi-axis {min(axes):g} mm")
    return float(rng.uniform(lo, min(hi, cap)))


def _draw_axes(rng: np.random.Generator, ranges) -> tuple:
    return tuple(_draw(rng, r) for r in ranges)


def cohort_specs(plan: CohortPlan):
    """Deterministic list of cohort members for a plan.

    Geometry is drawn from a single plan-level generator in a fixed member
    order; each member also carries its own seed for voxel noise, so a
    member regenerates identically in isolation.
    """
    rng = np.random.default_rng(plan.seed)
    arms = (["healthy"] * plan.n_healthy
            + ["exophytic"] * plan.n_bump
            + ["endophytic"] * plan.n_endophytic
            + ["cyst"] * plan.n_cyst)
    members = []
    bump_index = 0
    for idx, arm in enumerate(arms):
        large = arm == "exophytic" and bump_index < plan.n_bump_large
        if arm == "exophytic":
            bump_index += 1
        axes = _draw_axes(rng, plan.large_semi_axis_ranges if large
                          else plan.semi_axis_ranges)
        lesion = None
        radius = 0.0
        lesion_hu = plan.tumour_hu
        if arm == "exophytic":
            lesion = "exophytic_bump"
            radius = _draw_radius(rng, plan.large_bump_radius_range if large
                                  else plan.bump_radius_range, axes)
        elif arm == "endophytic":
            lesion = "endophytic_sphere"
            radius = _draw_radius(rng, plan.endo_radius_range, axes)
        elif arm == "cyst":
            lesion = "cyst"
            radius = _draw_radius(rng, plan.cyst_radius_range, axes)
            lesion_hu = plan.cyst_hu
        spec = PhantomSpec(
            semi_axes=axes,
            side=SIDES[idx % 2],
            base_hu=plan.base_hu,
            noise_hu=plan.noise_hu,
            lesion=lesion,
            lesion_radius_mm=radius,
            lesion_hu=lesion_hu,
            seed=plan.seed * 1_000_003 + idx,
            spacing_mm=plan.spacing_mm,
        )
        members.append(CohortMember(scan_id=f"ph{idx:03d}",
                                    patient_id=f"p{idx:03d}",
                                    arm=arm, spec=spec))
    return members
