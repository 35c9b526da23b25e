"""Landmark geometry: normalization, boundary rasterization and pose extraction.

Coordinates follow the image convention: x grows to the right, y grows
downwards, both normalized to [0, 1] over the aligned crop. Pixel ``(r, c)``
of an ``H x W`` raster covers ``[c/W, (c+1)/W) x [r/H, (r+1)/H)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError, GeometryError

N_LANDMARKS = 68
POSE_DIM = 3
EXPR_DIM = 17

# (component, first index, last index inclusive, closed loop)
CHAINS = (
    ("jaw", 0, 16, False),
    ("nose", 27, 30, False),
    ("nose", 31, 35, False),
    ("brows", 17, 21, False),
    ("brows", 22, 26, False),
    ("eyes", 36, 41, True),
    ("eyes", 42, 47, True),
    ("lips", 48, 59, True),
    ("lips", 60, 67, True),
)

DEFAULT_PALETTE = {
    "jaw": (1.0, 0.0, 0.0),
    "brows": (0.0, 1.0, 0.0),
    "nose": (0.0, 0.0, 1.0),
    "eyes": (1.0, 1.0, 0.0),
    "lips": (1.0, 0.0, 1.0),
}

# Index permutation that maps a horizontally flipped face back onto the
# 68-point ordering (subject's left and right swap).
MIRROR_PERM = np.array(
    list(range(16, -1, -1))
    + list(range(26, 16, -1))
    + [27, 28, 29, 30]
    + [35, 34, 33, 32, 31]
    + [45, 44, 43, 42, 47, 46]
    + [39, 38, 37, 36, 41, 40]
    + [54, 53, 52, 51, 50, 49, 48, 59, 58, 57, 56, 55]
    + [64, 63, 62, 61, 60, 67, 66, 65]
)


def _mean_face() -> np.ndarray:
    """Frontal 3-D mean face, 68 x (x, y, z) in face-centred units.

    Face half-width is ~1, z points towards the camera. The image-right half
    is the exact mirror of the image-left half.
    """
    left = {}
    for k in range(9):  # jaw 0..8, chin at 8
        t = math.pi * k / 16.0
        x = 0.0 if k == 8 else -math.cos(t)
        left[k] = (x, -0.1 + 1.1 * math.sin(t), 0.6 * math.sin(t))
    for i, k in enumerate(range(17, 22)):  # left brow, outer -> inner
        x = -0.82 + 0.15 * i
        left[k] = (x, -0.58 - 0.12 * math.sin(math.pi * (i + 0.5) / 5.0), 0.55)
    for i, k in enumerate(range(27, 31)):  # bridge, tip at 30
        left[k] = (0.0, -0.4 + i * (0.525 / 3.0), 0.6 + 0.4 * i / 3.0)
    left[31] = (-0.26, 0.24, 0.7)
    left[32] = (-0.13, 0.27, 0.76)
    left[33] = (0.0, 0.28, 0.8)
    left[36] = (-0.72, -0.3, 0.6)
    left[37] = (-0.553, -0.5, 0.65)
    left[38] = (-0.387, -0.5, 0.65)
    left[39] = (-0.22, -0.3, 0.6)
    left[40] = (-0.387, -0.14, 0.65)
    left[41] = (-0.553, -0.14, 0.65)
    left[48] = (-0.42, 0.55, 0.6)
    left[49] = (-0.27, 0.46, 0.68)
    left[50] = (-0.11, 0.42, 0.72)
    left[51] = (0.0, 0.44, 0.73)
    left[57] = (0.0, 0.74, 0.72)
    left[58] = (-0.11, 0.73, 0.71)
    left[59] = (-0.27, 0.67, 0.67)
    left[60] = (-0.3, 0.55, 0.64)
    left[61] = (-0.11, 0.53, 0.7)
    left[62] = (0.0, 0.53, 0.71)
    left[66] = (0.0, 0.58, 0.71)
    left[67] = (-0.11, 0.58, 0.7)

    pts = np.full((N_LANDMARKS, 3), np.nan)
    for k, v in left.items():
        pts[k] = v
    for k in range(N_LANDMARKS):
        src = MIRROR_PERM[k]
        if np.isnan(pts[k, 0]):
            pts[k] = pts[src] * np.array([-1.0, 1.0, 1.0])
    assert not np.isnan(pts).any()
    return pts


MEAN_FACE_3D = _mean_face()

# Anthropometric ratios of the mean face used by the pose heuristic.
_EYE_HALF_SPAN = 0.72  # outer eye corner to midline
_NOSE_DEPTH = 0.4  # nose tip protrusion over eye/mouth corners
_NOSE_DROP = 0.425  # nose tip below the eye line
_EYE_MOUTH_SPAN = 0.85  # eye line to mouth-corner line

# Placement of face-centred units inside the normalized crop.
FACE_SCALE = 0.35
FACE_CENTER_Y = 0.17


@dataclass(frozen=True)
class LandmarkSet:
    """68 normalized (x, y) points in the standard ordering."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (N_LANDMARKS, 2):
            raise DataError(f"expected {N_LANDMARKS} (x, y) points, got shape {pts.shape}")
        if not np.isfinite(pts).all():
            raise DataError("landmarks contain non-finite coordinates")
        pts = pts.copy()
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __eq__(self, other):
        return isinstance(other, LandmarkSet) and np.array_equal(self.points, other.points)

    def __hash__(self):
        return hash(self.points.tobytes())


def read_landmark_file(path: str | Path) -> np.ndarray:
    """Parse a 68-line ``x y`` pixel-coordinate file; ``#`` lines are skipped."""
    rows = []
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read landmark file {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected 'x y', got {line!r}")
        try:
            rows.append((float(parts[0]), float(parts[1])))
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
    if len(rows) != N_LANDMARKS:
        raise DataError(f"{path}: expected {N_LANDMARKS} landmarks, found {len(rows)}")
    return np.array(rows, dtype=np.float64)


def write_landmark_file(path: str | Path, raw_points: np.ndarray) -> None:
    lines = ["# x y (pixels)"] + [f"{x:.4f} {y:.4f}" for x, y in raw_points]
    Path(path).write_text("\n".join(lines) + "\n")


def normalize_landmarks(raw_points, crop) -> tuple[LandmarkSet, int]:
    """Map pixel landmarks into the unit square of ``crop = (x0, y0, w, h)``.

    Points falling outside the crop are clamped to [0, 1]; the number of
    clamped points is returned alongside the landmark set.
    """
    pts = np.asarray(raw_points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape != (N_LANDMARKS, 2):
        raise DataError(f"expected {N_LANDMARKS} points, got array of shape {pts.shape}")
    if not np.isfinite(pts).all():
        raise DataError("raw landmarks contain non-finite coordinates")
    x0, y0, w, h = (float(v) for v in crop)
    if not (w > 0 and h > 0):
        raise DataError(f"crop must have positive size, got {w}x{h}")
    norm = (pts - np.array([x0, y0])) / np.array([w, h])
    outside = ((norm < 0.0) | (norm > 1.0)).any(axis=1)
    return LandmarkSet(np.clip(norm, 0.0, 1.0)), int(outside.sum())


def mirror_landmarks(lms: LandmarkSet) -> LandmarkSet:
    """Horizontal flip, re-indexed so the result is again a valid 68-point set."""
    pts = lms.points[MIRROR_PERM].copy()
    pts[:, 0] = 1.0 - pts[:, 0]
    return LandmarkSet(pts)


def _to_pixel(v: float, n: int) -> int:
    return min(int(math.floor(v * n)), n - 1)


def line_pixels(r0: int, c0: int, r1: int, c1: int) -> list[tuple[int, int]]:
    """Midpoint line between two pixels, returned as ``(row, col)`` pairs.

    The segment is first oriented from its lexicographically smaller
    ``(col, row)`` endpoint so both drawing directions give the same set;
    exact ties on the minor axis round towards that start point.
    """
    if (c0, r0) > (c1, r1):
        r0, c0, r1, c1 = r1, c1, r0, c0
    dc, dr = c1 - c0, r1 - r0
    sr = 1 if dr >= 0 else -1
    adr = abs(dr)
    out = []
    if dc >= adr:
        d = 2 * adr - dc
        r = r0
        for c in range(c0, c1 + 1):
            out.append((r, c))
            if d > 0:
                r += sr
                d -= 2 * dc
            d += 2 * adr
    else:
        d = 2 * dc - adr
        c = c0
        for k in range(adr + 1):
            out.append((r0 + sr * k, c))
            if d > 0:
                c += 1
                d -= 2 * adr
            d += 2 * dc
    return out


def landmark_pixels(lms: LandmarkSet, resolution) -> np.ndarray:
    """Integer ``(row, col)`` of every landmark at the given resolution."""
    h, w = resolution
    return np.array([(_to_pixel(y, h), _to_pixel(x, w)) for x, y in lms.points], dtype=np.int64)


def chain_segments(closed_loops: bool = True):
    """Yield ``(component, i, j)`` for every landmark pair joined by a stroke."""
    for comp, a, b, closed in CHAINS:
        for i in range(a, b):
            yield comp, i, i + 1
        if closed and closed_loops:
            yield comp, b, a


def rasterize_boundary(lms: LandmarkSet, resolution=(64, 64), palette=None) -> np.ndarray:
    """Draw the boundary image of ``lms`` as an ``H x W x 3`` float32 raster.

    Components are drawn in :data:`CHAINS` order; where strokes overlap the
    later component's color wins.
    """
    h, w = (int(v) for v in resolution)
    if h < 16 or w < 16:
        raise ContractError(f"boundary resolution must be >= 16, got {h}x{w}")
    palette = DEFAULT_PALETTE if palette is None else palette
    pix = landmark_pixels(lms, (h, w))
    img = np.zeros((h, w, 3), dtype=np.float32)
    for comp, i, j in chain_segments():
        color = np.asarray(palette[comp], dtype=np.float32)
        rows, cols = zip(*line_pixels(pix[i, 0], pix[i, 1], pix[j, 0], pix[j, 1]))
        img[list(rows), list(cols)] = color
    return img


def _rotate(pts: np.ndarray, angle: float, center) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    return (pts - center) @ rot.T + center


def pose_from_landmarks(lms: LandmarkSet) -> np.ndarray:
    """Closed-form (yaw, pitch, roll) in degrees / 90.

    Roll is the inclination of the line joining the eye centers (midpoints of
    the eye corners). The shape is de-rotated by that roll before yaw and
    pitch are read off: yaw from the left/right asymmetry of the outer eye
    corner to nose tip distances, pitch from how far the nose tip sits off
    the midline between the eye line and the mouth-corner line. Both ratios
    are inverted through an arctangent using mean-face proportions.
    """
    p = lms.points
    left_eye = 0.5 * (p[36] + p[39])
    right_eye = 0.5 * (p[42] + p[45])
    d = right_eye - left_eye
    if math.hypot(d[0], d[1]) < 1e-9:
        raise GeometryError("inter-ocular distance is zero")
    roll = math.atan2(d[1], d[0])
    q = _rotate(p, -roll, 0.5 * (left_eye + right_eye))

    eye_y = 0.25 * (q[36, 1] + q[39, 1] + q[42, 1] + q[45, 1])
    mouth_y = 0.5 * (q[48, 1] + q[54, 1])
    span = mouth_y - eye_y
    if span <= 1e-9:
        raise GeometryError("mouth corners are not below the eye line")
    dev = (q[30, 1] - 0.5 * (eye_y + mouth_y)) / span
    pitch = math.atan(-dev * _EYE_MOUTH_SPAN / _NOSE_DEPTH)

    d_left = q[30, 0] - q[36, 0]
    d_right = q[45, 0] - q[30, 0]
    width = d_left + d_right
    if width <= 1e-9:
        raise GeometryError("outer eye corners coincide")
    ratio = (d_left - d_right) / width
    depth = max(_NOSE_DROP * math.sin(pitch) + _NOSE_DEPTH * math.cos(pitch), 0.1)
    yaw = math.atan(ratio * _EYE_HALF_SPAN / depth)

    return np.degrees([yaw, pitch, roll]) / 90.0


def rotation_matrix(yaw_deg: float, pitch_deg: float, roll_deg: float) -> np.ndarray:
    """Roll(z) @ yaw(y) @ pitch(x); positive yaw turns the nose to image-right,
    positive pitch lifts it, positive roll rotates clockwise on screen."""
    y, p, r = np.radians([yaw_deg, pitch_deg, roll_deg])
    rx = np.array([[1, 0, 0], [0, math.cos(p), -math.sin(p)], [0, math.sin(p), math.cos(p)]])
    ry = np.array([[math.cos(y), 0, math.sin(y)], [0, 1, 0], [-math.sin(y), 0, math.cos(y)]])
    rz = np.array([[math.cos(r), -math.sin(r), 0], [math.sin(r), math.cos(r), 0], [0, 0, 1]])
    return rz @ ry @ rx


def project_face(points3d: np.ndarray, yaw_deg=0.0, pitch_deg=0.0, roll_deg=0.0,
                 scale: float = FACE_SCALE, center_y: float = FACE_CENTER_Y) -> np.ndarray:
    """Orthographic projection of a posed 3-D face into normalized crop coordinates.

    ``scale`` is the crop fraction per face-centred unit. Returns raw
    (unclamped) 68 x 2 coordinates.
    """
    rot = rotation_matrix(yaw_deg, 0.0, 0.0) @ rotation_matrix(0.0, pitch_deg, 0.0)
    xyz = points3d @ rot.T
    pts = np.empty((points3d.shape[0], 2))
    pts[:, 0] = 0.5 + scale * xyz[:, 0]
    pts[:, 1] = 0.5 + scale * (xyz[:, 1] - center_y)
    if roll_deg:
        pts = _rotate(pts, math.radians(roll_deg), np.array([0.5, 0.5]))
    return pts


def validate_pose(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (POSE_DIM,) or not np.isfinite(p).all() or np.abs(p).max() > 1.5:
        raise ContractError(f"invalid pose vector {p!r}")
    return p


def validate_expression(e) -> np.ndarray:
    e = np.asarray(e, dtype=np.float64)
    if e.shape != (EXPR_DIM,) or not np.isfinite(e).all() or e.min() < 0 or e.max() > 1:
        raise ContractError(f"invalid expression vector {e!r}")
    return e
