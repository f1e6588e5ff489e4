"""Procedural labeled heart volumes and their on-disk format.

A phantom is a voxel grid of entity labels arranged in apical four-chamber
topology: both ventricles near the probe, both atria deeper, thin valve
slabs between them, and an aorta kept out of the standard imaging plane.
The generator records the ground-truth standard pose it built the heart
around, so environments can jitter away from a known optimum.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError, GenerationError
from .imaging import ImageConfig, ProbePose, quat_from_axis_angle, quat_mul, quat_to_matrix


class EntityLabel(IntEnum):
    BACKGROUND = 0
    LV = 1
    RV = 2
    LA = 3
    RA = 4
    MV = 5
    TV = 6
    AORTA = 7


LABEL_NAMES = [e.name for e in EntityLabel]

# apical four-chamber entity sets
A4C_INCLUDED = (EntityLabel.LV, EntityLabel.RV, EntityLabel.LA, EntityLabel.RA)
A4C_EXCLUDED = (EntityLabel.AORTA,)
A4C_PAIRS = (
    (EntityLabel.LV, EntityLabel.RV),
    (EntityLabel.LA, EntityLabel.RA),
    (EntityLabel.LV, EntityLabel.LA),
    (EntityLabel.RV, EntityLabel.RA),
)


@dataclass(frozen=True)
class JitterSpec:
    """Per-phantom perturbation bounds (all uniform, symmetric)."""

    rot_deg: float = 5.0      # whole-heart rotation about the apex, per axis
    shift_mm: float = 2.5     # whole-heart translation, per axis
    center_mm: float = 2.5    # per-chamber in-plane center shift
    scale: float = 0.09       # per-chamber relative semi-axis change

    def __post_init__(self):
        for name in ("rot_deg", "shift_mm", "center_mm", "scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"jitter bound {name} must be non-negative")


def _default_scales() -> dict[EntityLabel, tuple[float, float, float]]:
    # (lateral, elevational, depth) semi-axes in mm. In-plane axes are
    # mirror symmetric between left/right partners so the standard view is
    # laterally balanced; elevational thickness differs so chambers drop
    # out of the slice at different tilt angles.
    return {
        EntityLabel.LV: (14.0, 13.0, 21.0),
        EntityLabel.RV: (14.0, 11.0, 21.0),
        EntityLabel.LA: (11.5, 8.0, 12.5),
        EntityLabel.RA: (11.5, 8.0, 12.5),
    }


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    dims: tuple[int, int, int] = (80, 64, 96)
    spacing: tuple[float, float, float] = (1.75, 1.75, 1.75)
    chamber_scales: Mapping[EntityLabel, tuple[float, float, float]] = field(
        default_factory=_default_scales
    )
    jitter: JitterSpec = field(default_factory=JitterSpec)

    def __post_init__(self):
        if any(d <= 0 for d in self.dims):
            raise ValueError("dims must be positive")
        if any(s <= 0 for s in self.spacing):
            raise ValueError("spacing must be positive")
        for ent, axes in self.chamber_scales.items():
            if any(a <= 0 for a in axes):
                raise ValueError(f"semi-axes for {EntityLabel(ent).name} must be positive")


@dataclass(frozen=True)
class LabeledVolume:
    """Dense uint8 label grid with physical spacing; the simulated patient.

    Immutable after construction, safe to share across environments.
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    labels: np.ndarray  # shape dims, uint8
    standard_pose: ProbePose

    def __post_init__(self):
        arr = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if arr.shape != tuple(self.dims):
            raise ValueError(f"labels shape {arr.shape} != dims {self.dims}")
        if arr.size and int(arr.max()) >= len(EntityLabel):
            raise ValueError("labels contain values outside the entity set")
        if any(s <= 0 for s in self.spacing):
            raise ValueError("spacing must be positive")
        arr.flags.writeable = False
        object.__setattr__(self, "labels", arr)
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))


# Heart layout relative to the probe apex, in mm: +x lateral, +y out of the
# imaging plane, +z along the beam. Chamber centers stay in the y=0 plane so
# the standard slice passes through every centroid.
_CHAMBER_CENTERS = {
    EntityLabel.LV: (21.0, 0.0, 50.0),
    EntityLabel.RV: (-21.0, 0.0, 50.0),
    EntityLabel.LA: (18.0, 0.0, 92.0),
    EntityLabel.RA: (-18.0, 0.0, 92.0),
}

# Aorta: two sheets hugging the imaging plane without touching it, a thin
# anterior one (+y) and a thick posterior one. Their lateral half-width
# falls off as 1/z^2, which makes the visible aorta area grow roughly
# linearly with how far the probe is tilted or rolled off the standard
# plane: an early, monotone, sign-bearing penalty for the pose score.
_AORTA_ANTERIOR_Y = (2.5, 5.0)      # thin: falls out of the beam at big tilts
_AORTA_POSTERIOR_Y = (-9.5, -2.5)
_AORTA_Z = (8.0, 100.0)
_AORTA_WIDTH_AT_30MM = 23.0         # half-width 23 mm at z = 30, scaled by (30/z)^2

_VALVE_HALF_LATERAL = 9.0
_VALVE_HALF_ELEV = 6.0
_APEX_STANDOFF_MM = 10.0


def _apex_base(spec: PhantomSpec) -> np.ndarray:
    nx, ny, _ = spec.dims
    sx, sy, _ = spec.spacing
    return np.array([nx * sx / 2.0, ny * sy / 2.0, _APEX_STANDOFF_MM])


def _jitter_draw(rng: np.random.Generator, bound: float, size: int) -> np.ndarray:
    # cubed uniform: bounded like U(-bound, bound) but concentrated near 0,
    # so ensembles vary without every phantom becoming a prior outlier
    return bound * rng.uniform(-1.0, 1.0, size=size) ** 3


def _centroid_angle(volume: "LabeledVolume", pose: ProbePose, img: ImageConfig) -> float:
    """Mean pixel polar angle of the included entities, normalized by the
    sector half-angle (the global polar angle of the sliced view)."""
    from .imaging import pixel_polar, slice_volume

    mask = slice_volume(volume, pose, img)
    theta, _ = pixel_polar(mask.width, mask.height)
    sel = (mask.labels >= int(EntityLabel.LV)) & (mask.labels <= int(EntityLabel.RA))
    if not sel.any():
        return 0.0
    return float(theta[sel].mean()) / mask.half_angle


def generate_phantom(spec: PhantomSpec) -> LabeledVolume:
    """Build one labeled heart volume, deterministic in ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)

    # whole-heart perturbation; the standard pose follows it exactly
    rot_rad = np.radians(_jitter_draw(rng, spec.jitter.rot_deg, 3))
    shift = _jitter_draw(rng, spec.jitter.shift_mm, 3)
    quat = np.array([1.0, 0.0, 0.0, 0.0])
    for axis_idx in range(3):
        unit = np.zeros(3)
        unit[axis_idx] = 1.0
        quat = quat_mul(quat, quat_from_axis_angle(unit, rot_rad[axis_idx]))
    apex = _apex_base(spec) + shift
    pose = ProbePose(apex, quat)

    # per-chamber jitter: in-plane center shifts keep centroids on the slice
    centers: dict[EntityLabel, np.ndarray] = {}
    scales: dict[EntityLabel, np.ndarray] = {}
    for ent in A4C_INCLUDED:
        base_c = np.array(_CHAMBER_CENTERS[ent])
        d = _jitter_draw(rng, spec.jitter.center_mm, 2)
        centers[ent] = base_c + np.array([d[0], 0.0, d[1]])
        base_s = np.asarray(spec.chamber_scales[ent], dtype=np.float64)
        scales[ent] = base_s * (1.0 + _jitter_draw(rng, spec.jitter.scale, 3))

    # voxel-center coordinates in the heart-local (unrotated, apex-origin) frame
    nx, ny, nz = spec.dims
    sx, sy, sz = spec.spacing
    gx = (np.arange(nx) + 0.5) * sx
    gy = (np.arange(ny) + 0.5) * sy
    gz = (np.arange(nz) + 0.5) * sz
    wx, wy, wz = np.meshgrid(gx, gy, gz, indexing="ij")
    rot_t = quat_to_matrix(quat).T
    lx = rot_t[0, 0] * (wx - apex[0]) + rot_t[0, 1] * (wy - apex[1]) + rot_t[0, 2] * (wz - apex[2])
    ly = rot_t[1, 0] * (wx - apex[0]) + rot_t[1, 1] * (wy - apex[1]) + rot_t[1, 2] * (wz - apex[2])
    lz = rot_t[2, 0] * (wx - apex[0]) + rot_t[2, 1] * (wy - apex[1]) + rot_t[2, 2] * (wz - apex[2])

    labels = np.zeros(spec.dims, dtype=np.uint8)

    def ellipsoid(ent: EntityLabel) -> np.ndarray:
        c, a = centers[ent], scales[ent]
        return (
            ((lx - c[0]) / a[0]) ** 2
            + ((ly - c[1]) / a[1]) ** 2
            + ((lz - c[2]) / a[2]) ** 2
        ) <= 1.0

    masks = {ent: ellipsoid(ent) for ent in A4C_INCLUDED}
    if np.any(masks[EntityLabel.LV] & masks[EntityLabel.RV]):
        raise GenerationError("LV and RV overlap after jitter; shrink scales or jitter")
    for ent in A4C_INCLUDED:
        if not masks[ent].any():
            raise GenerationError(f"{ent.name} occupies no voxels")
        labels[masks[ent]] = int(ent)

    # valve slabs: 2 voxels thick along the beam, centered between each
    # ventricle and its atrium, painted only over background
    for ventricle, atrium, valve in (
        (EntityLabel.LV, EntityLabel.LA, EntityLabel.MV),
        (EntityLabel.RV, EntityLabel.RA, EntityLabel.TV),
    ):
        z_gap_lo = centers[ventricle][2] + scales[ventricle][2]
        z_gap_hi = centers[atrium][2] - scales[atrium][2]
        z_mid = 0.5 * (z_gap_lo + z_gap_hi)
        x_mid = 0.5 * (centers[ventricle][0] + centers[atrium][0])
        slab = (
            (np.abs(lx - x_mid) <= _VALVE_HALF_LATERAL)
            & (np.abs(ly) <= _VALVE_HALF_ELEV)
            & (np.abs(lz - z_mid) <= sz)
        )
        labels[slab & (labels == 0)] = int(valve)

    with np.errstate(divide="ignore"):
        half_w = np.where(
            lz > 0,
            np.minimum(_AORTA_WIDTH_AT_30MM * (30.0 / np.maximum(lz, 1e-9)) ** 2,
                       np.minimum(0.95 * lz, 68.0)),
            0.0,
        )
    abs_x = np.abs(lx)
    # deep lateral wings: the first material a small roll about the beam
    # axis brings into view, so rolled poses are penalized early too
    wings = (
        (abs_x >= 46.0) & (abs_x <= 70.0)
        & (lz >= np.maximum(abs_x, 52.0)) & (lz <= 100.0)
    )
    for yr in (_AORTA_ANTERIOR_Y, _AORTA_POSTERIOR_Y):
        band = (ly >= yr[0]) & (ly <= yr[1])
        sheet = band & (
            ((abs_x <= half_w) & (lz >= _AORTA_Z[0]) & (lz <= _AORTA_Z[1]))
            | wings
        )
        labels[sheet & (labels == 0)] = int(EntityLabel.AORTA)

    volume = LabeledVolume(spec.dims, spec.spacing, labels, pose)

    # Center the beam on the cardiac centroid, like an operator would when
    # declaring a view standard. The correction is an in-plane rotation, so
    # chamber centroids stay on the slicing plane.
    img = ImageConfig()
    for _ in range(2):
        phi = _centroid_angle(volume, pose, img)
        pose = _rotate_about_probe_y(pose, phi * img.half_angle)
    volume = LabeledVolume(spec.dims, spec.spacing, labels, pose)
    return volume


def _rotate_about_probe_y(pose: ProbePose, angle_rad: float) -> ProbePose:
    unit = np.array([0.0, 1.0, 0.0])
    return ProbePose(pose.position, quat_mul(pose.orientation, quat_from_axis_angle(unit, angle_rad)))


def make_ensemble(count: int = 12, base_seed: int = 0,
                  spec: PhantomSpec | None = None) -> list[LabeledVolume]:
    """Generate `count` phantoms with consecutive seeds."""
    template = spec if spec is not None else PhantomSpec()
    out = []
    for k in range(count):
        out.append(
            generate_phantom(
                PhantomSpec(
                    seed=base_seed + k,
                    dims=template.dims,
                    spacing=template.spacing,
                    chamber_scales=template.chamber_scales,
                    jitter=template.jitter,
                )
            )
        )
    return out


# ---------------------------------------------------------------------------
# file format: JSON header + sibling raw uint8 payload, x varying fastest
# ---------------------------------------------------------------------------

def _raw_path(header_path: Path) -> Path:
    return header_path.with_suffix(".raw")


def save_volume(volume: LabeledVolume, path) -> None:
    """Write a volume as ``path`` (JSON header) plus ``path`` with a .raw
    suffix (labels, row-major with x fastest). Round-trips bit-exactly."""
    path = Path(path)
    pose = volume.standard_pose
    header = {
        "dims": list(volume.dims),
        "spacing": list(volume.spacing),
        "label_names": LABEL_NAMES,
        "standard_pose": {
            "position": [float(v) for v in pose.position],
            "orientation": [float(v) for v in pose.orientation],
        },
    }
    path.write_text(json.dumps(header, indent=1) + "\n", encoding="utf-8")
    # Fortran order over (nx, ny, nz) makes x the fastest-varying index
    _raw_path(path).write_bytes(volume.labels.tobytes(order="F"))


def load_volume(path) -> LabeledVolume:
    path = Path(path)
    try:
        header = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable volume header: {exc}") from exc
    try:
        dims = tuple(int(d) for d in header["dims"])
        spacing = tuple(float(s) for s in header["spacing"])
        names = list(header["label_names"])
        pose_d = header["standard_pose"]
        pose = ProbePose(
            np.asarray(pose_d["position"], dtype=np.float64),
            np.asarray(pose_d["orientation"], dtype=np.float64),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed volume header: {exc}") from exc
    if len(dims) != 3:
        raise FormatError(f"{path}: dims must have 3 entries")
    if names != LABEL_NAMES:
        raise FormatError(f"{path}: unexpected label names {names}")
    raw = _raw_path(path).read_bytes()
    expected = dims[0] * dims[1] * dims[2]
    if len(raw) != expected:
        raise FormatError(
            f"{_raw_path(path)}: raw payload is {len(raw)} bytes, expected {expected}"
        )
    flat = np.frombuffer(raw, dtype=np.uint8)
    if flat.size and int(flat.max()) >= len(EntityLabel):
        raise FormatError(f"{_raw_path(path)}: unknown label byte {int(flat.max())}")
    labels = flat.reshape(dims, order="F")
    return LabeledVolume(dims, spacing, labels, pose)


def volume_digest(volume: LabeledVolume) -> str:
    """Stable content hash, handy for determinism checks."""
    import hashlib

    h = hashlib.sha256()
    h.update(np.asarray(volume.dims, dtype=np.int64).tobytes())
    h.update(np.asarray(volume.spacing, dtype=np.float64).tobytes())
    h.update(volume.labels.tobytes(order="F"))
    h.update(volume.standard_pose.position.tobytes())
    h.update(volume.standard_pose.orientation.tobytes())
    return h.hexdigest()
