"""Rigid probe-pose algebra and sector slicing of labeled volumes.

Frame conventions used throughout:

* probe x axis: lateral, spans the image columns;
* probe y axis: elevational, the normal of the imaging plane;
* probe z axis: beam / depth, spans the image rows.

A mask pixel (u, v) sits at polar angle ``atan2(u - width/2, v)`` measured
from the straight-down beam axis (positive toward larger u), at radius
``hypot(u - width/2, v)`` pixels from the sector apex at (width/2, 0).
Pixel coordinates are taken at pixel centers, i.e. (u + 0.5, v + 0.5).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError

_AXES = ("x", "y", "z")


# ---------------------------------------------------------------------------
# quaternions (w, x, y, z), scalar first
# ---------------------------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = math.sqrt(float(np.dot(q, q)))
    if n < 1e-12:
        raise ValueError("cannot normalize a zero quaternion")
    return q / n


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dtype=np.float64,
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]], dtype=np.float64)


def quat_from_axis_angle(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / math.sqrt(float(np.dot(axis, axis)))
    half = 0.5 * angle_rad
    s = math.sin(half)
    return np.array([math.cos(half), s * axis[0], s * axis[1], s * axis[2]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ],
        dtype=np.float64,
    )


# ---------------------------------------------------------------------------
# poses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProbePose:
    """Rigid probe pose: contact point (mm, volume frame) plus a unit
    quaternion rotating probe-frame vectors into the volume frame."""

    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float64).reshape(3).copy()
        quat = quat_normalize(self.orientation).copy()
        pos.flags.writeable = False
        quat.flags.writeable = False
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "orientation", quat)

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.orientation)

    @staticmethod
    def identity(position=(0.0, 0.0, 0.0)) -> "ProbePose":
        return ProbePose(np.asarray(position, dtype=np.float64),
                         np.array([1.0, 0.0, 0.0, 0.0]))


def rotate_pose(pose: ProbePose, axis: str, angle_deg: float) -> ProbePose:
    """Rotate `pose` about one of its own (probe-frame) axes.

    The contact point stays fixed; only the orientation changes, which is
    what a fine-tuning rotation about the probe tip does.
    """
    if axis not in _AXES:
        raise ValueError(f"axis must be one of {_AXES}, got {axis!r}")
    if not math.isfinite(angle_deg):
        raise ValueError("rotation angle must be finite")
    unit = np.zeros(3)
    unit[_AXES.index(axis)] = 1.0
    q_local = quat_from_axis_angle(unit, math.radians(angle_deg))
    # local-axis rotation composes on the right
    return ProbePose(pose.position, quat_mul(pose.orientation, q_local))


def pose_delta(a: ProbePose, b: ProbePose) -> tuple[float, float]:
    """(position distance, quaternion distance up to sign) between poses."""
    dp = float(np.linalg.norm(a.position - b.position))
    dq = min(
        float(np.max(np.abs(a.orientation - b.orientation))),
        float(np.max(np.abs(a.orientation + b.orientation))),
    )
    return dp, dq


# ---------------------------------------------------------------------------
# sector imaging
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ImageConfig:
    """Sector image geometry. Defaults fit a whole phantom heart at
    standard depth."""

    width: int = 256
    height: int = 256
    half_angle_deg: float = 45.0
    depth_mm: float = 140.0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dims must be positive")
        if not 0.0 < self.half_angle_deg <= 90.0:
            raise ValueError("half_angle_deg must be in (0, 90]")
        if self.depth_mm <= 0:
            raise ValueError("depth_mm must be positive")

    @property
    def half_angle(self) -> float:
        return math.radians(self.half_angle_deg)

    @property
    def depth_px(self) -> int:
        # max imaging radius in pixels; the full image height by default
        return self.height


@dataclass(frozen=True)
class MaskImage:
    """Multi-class label image over a sector; everything outside the wedge
    is Background (0)."""

    labels: np.ndarray  # (height, width) uint8
    half_angle: float   # radians
    depth_px: int

    def __post_init__(self):
        arr = np.ascontiguousarray(self.labels, dtype=np.uint8)
        arr.flags.writeable = False
        object.__setattr__(self, "labels", arr)
        if arr.ndim != 2:
            raise ValueError("mask labels must be 2-D")
        if self.depth_px > self.height:
            raise ValueError("depth_px must not exceed image height")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def apex(self) -> tuple[float, float]:
        return (self.width / 2.0, 0.0)


_polar_cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}


def pixel_polar(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel polar angle (rad) and radius (px) about the sector apex.

    Angles are measured from the straight-down depth axis, positive toward
    larger u. Cached per image size; the returned arrays are read-only.
    """
    key = (width, height)
    hit = _polar_cache.get(key)
    if hit is not None:
        return hit
    u = np.arange(width, dtype=np.float64) + 0.5 - width / 2.0
    v = np.arange(height, dtype=np.float64) + 0.5
    du, dv = np.meshgrid(u, v)
    theta = np.arctan2(du, dv)
    radius = np.hypot(du, dv)
    for a in (theta, radius, du, dv):
        a.flags.writeable = False
    _polar_cache[key] = (theta, radius)
    _offset_cache[key] = (du, dv)
    return theta, radius


_offset_cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}


def _pixel_offsets(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    key = (width, height)
    if key not in _offset_cache:
        pixel_polar(width, height)
    return _offset_cache[key]


def slice_volume(volume, pose: ProbePose, img: ImageConfig = ImageConfig()) -> MaskImage:
    """Slice a labeled volume with the probe's imaging plane.

    Each sector pixel is mapped to a volume point at
    ``position + R(orientation) @ (du, 0, dv) * depth_mm / depth_px`` and
    labeled by nearest-neighbor lookup; out-of-volume and out-of-wedge
    pixels are Background. Pure and deterministic.
    """
    theta, radius = pixel_polar(img.width, img.height)
    du, dv = _pixel_offsets(img.width, img.height)
    inside = (radius <= img.depth_px) & (np.abs(theta) <= img.half_angle)

    scale = img.depth_mm / img.depth_px
    rot = pose.rotation_matrix()
    lat = rot[:, 0]   # image column direction in volume frame
    beam = rot[:, 2]  # image row (depth) direction

    nx, ny, nz = volume.dims
    sx, sy, sz = volume.spacing
    px = pose.position[0] + scale * (du * lat[0] + dv * beam[0])
    py = pose.position[1] + scale * (du * lat[1] + dv * beam[1])
    pz = pose.position[2] + scale * (du * lat[2] + dv * beam[2])

    ix = np.floor(px / sx).astype(np.int64)
    iy = np.floor(py / sy).astype(np.int64)
    iz = np.floor(pz / sz).astype(np.int64)
    valid = (
        inside
        & (ix >= 0) & (ix < nx)
        & (iy >= 0) & (iy < ny)
        & (iz >= 0) & (iz < nz)
    )
    out = np.zeros((img.height, img.width), dtype=np.uint8)
    out[valid] = volume.labels[ix[valid], iy[valid], iz[valid]]
    return MaskImage(out, img.half_angle, img.depth_px)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

# injective label -> gray map, Background stays black
LABEL_GRAY = np.array([0, 70, 110, 150, 190, 215, 235, 255], dtype=np.uint8)
_GRAY_TO_LABEL = {int(g): i for i, g in enumerate(LABEL_GRAY)}


def render_pgm(mask: MaskImage, path) -> None:
    """Write the mask as a binary PGM (P5). Byte-deterministic; the header
    comment carries the sector metadata needed to reload the mask."""
    gray = LABEL_GRAY[mask.labels]
    header = (
        f"P5\n"
        f"# cardioview-mask half_angle_rad={mask.half_angle!r} depth_px={mask.depth_px}\n"
        f"{mask.width} {mask.height}\n255\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(gray.tobytes())


def load_pgm(path) -> MaskImage:
    """Inverse of :func:`render_pgm` (the gray map is injective)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise FormatError(f"{path}: not a binary PGM")
    lines = data.split(b"\n", 4)
    if len(lines) < 5:
        raise FormatError(f"{path}: truncated PGM header")
    comment = lines[1].decode("ascii", "replace")
    half_angle = None
    depth_px = None
    for tok in comment.split():
        if tok.startswith("half_angle_rad="):
            half_angle = float(tok.split("=", 1)[1])
        elif tok.startswith("depth_px="):
            depth_px = int(tok.split("=", 1)[1])
    if half_angle is None or depth_px is None:
        raise FormatError(f"{path}: missing sector metadata comment")
    try:
        width, height = (int(t) for t in lines[2].split())
        maxval = int(lines[3])
    except ValueError as exc:
        raise FormatError(f"{path}: bad PGM header") from exc
    if maxval != 255:
        raise FormatError(f"{path}: expected maxval 255")
    raw = lines[4]
    if len(raw) != width * height:
        raise FormatError(f"{path}: pixel payload size mismatch")
    gray = np.frombuffer(raw, dtype=np.uint8).reshape(height, width)
    labels = np.zeros_like(gray)
    for g, lab in _GRAY_TO_LABEL.items():
        labels[gray == g] = lab
    known = np.isin(gray, LABEL_GRAY)
    if not known.all():
        raise FormatError(f"{path}: unknown gray level {int(gray[~known][0])}")
    return MaskImage(labels, half_angle, depth_px)
