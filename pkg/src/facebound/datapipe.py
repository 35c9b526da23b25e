"""Manifests, pair sampling, image decoding and the synthetic face generator."""

from __future__ import annotations

import json
import logging
import math
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from . import geometry as geo
from .errors import ContractError, DataError

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")

# Intensity order of the 17-dim expression vector.
AU_NAMES = (
    "AU01", "AU02", "AU04", "AU05", "AU06", "AU07", "AU09", "AU10", "AU12",
    "AU14", "AU15", "AU17", "AU20", "AU23", "AU25", "AU26", "AU45",
)
AU_INDEX = {n: i for i, n in enumerate(AU_NAMES)}

# Raw 0-5 intensities for records that only carry an expression label.
_LABEL_AUS = {
    "neutral": {},
    "smile": {"AU06": 3, "AU12": 4, "AU25": 1.5},
    "happy": {"AU06": 3, "AU12": 4, "AU25": 1.5},
    "surprise": {"AU01": 4, "AU02": 4, "AU05": 3, "AU25": 3, "AU26": 3.5},
    "surprised": {"AU01": 4, "AU02": 4, "AU05": 3, "AU25": 3, "AU26": 3.5},
    "squint": {"AU06": 2.5, "AU07": 4, "AU45": 2},
    "disgust": {"AU04": 3, "AU09": 4, "AU10": 3, "AU15": 1.5, "AU17": 2},
    "disgusted": {"AU04": 3, "AU09": 4, "AU10": 3, "AU15": 1.5, "AU17": 2},
    "scream": {"AU01": 3, "AU02": 2.5, "AU04": 2, "AU05": 2.5, "AU20": 3, "AU25": 5, "AU26": 5},
    "angry": {"AU04": 4, "AU05": 2, "AU07": 3, "AU23": 3},
    "sad": {"AU01": 3, "AU04": 2, "AU15": 3, "AU17": 2},
    "fearful": {"AU01": 3, "AU02": 2, "AU04": 2, "AU05": 4, "AU20": 3, "AU25": 2},
    "contemptuous": {"AU12": 2, "AU14": 3},
}


def expression_from_label(label: str) -> np.ndarray:
    if label not in _LABEL_AUS:
        raise DataError(f"unknown expression label {label!r} and no AU vector given")
    e = np.zeros(geo.EXPR_DIM)
    for name, raw in _LABEL_AUS[label].items():
        e[AU_INDEX[name]] = raw / 5.0
    return e


# -- manifests ----------------------------------------------------------------

@dataclass(frozen=True)
class ManifestRecord:
    image_path: Path
    landmarks_path: Path
    identity: str
    yaw_deg: float
    expression_label: str
    illumination: str
    split: str
    au: tuple | None = None  # 17 intensities already in [0, 1]

    @property
    def expression(self) -> np.ndarray:
        if self.au is not None:
            return np.asarray(self.au, dtype=np.float64)
        return expression_from_label(self.expression_label)

    @property
    def condition_key(self):
        return (self.yaw_deg, self.expression_label, self.au)


def _parse_record(obj: dict, base: Path, lineno: int) -> ManifestRecord:
    where = f"manifest line {lineno}"
    try:
        rec = ManifestRecord(
            image_path=(base / obj["image_path"]).resolve(),
            landmarks_path=(base / obj["landmarks_path"]).resolve(),
            identity=str(obj["identity"]),
            yaw_deg=float(obj["yaw_deg"]),
            expression_label=str(obj.get("expression_label", "neutral")),
            illumination=str(obj.get("illumination", "default")),
            split=str(obj["split"]),
            au=None if obj.get("au") is None else tuple(float(v) for v in obj["au"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{where}: bad or missing field ({exc})") from exc
    if rec.split not in SPLITS:
        raise DataError(f"{where}: split must be one of {SPLITS}, got {rec.split!r}")
    if not -90.0 <= rec.yaw_deg <= 90.0:
        raise DataError(f"{where}: yaw_deg {rec.yaw_deg} outside [-90, 90]")
    if rec.au is not None:
        if len(rec.au) != geo.EXPR_DIM or min(rec.au) < 0 or max(rec.au) > 1:
            raise DataError(f"{where}: au must be {geo.EXPR_DIM} values in [0, 1]")
    elif rec.expression_label not in _LABEL_AUS:
        raise DataError(f"{where}: unknown expression_label {rec.expression_label!r} without au")
    for p in (rec.image_path, rec.landmarks_path):
        if not p.exists():
            raise DataError(f"{where}: file not found: {p}")
    return rec


def load_manifest(path) -> tuple[list[ManifestRecord], dict]:
    """Read and validate a JSON Lines manifest; returns records and per-split counts."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    records, seen = [], {}
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"manifest line {lineno}: malformed JSON ({exc.msg})") from exc
        if not isinstance(obj, dict):
            raise DataError(f"manifest line {lineno}: expected an object")
        rec = _parse_record(obj, path.parent, lineno)
        if rec.image_path in seen:
            raise DataError(
                f"manifest line {lineno}: duplicate image_path {obj['image_path']} (first on line {seen[rec.image_path]})"
            )
        seen[rec.image_path] = lineno
        records.append(rec)
    counts = Counter(r.split for r in records)
    return records, {s: counts.get(s, 0) for s in SPLITS}


def write_manifest(path, rows: list[dict]) -> None:
    Path(path).write_text("".join(json.dumps(r) + "\n" for r in rows))


# -- pairs ----------------------------------------------------------------------

@dataclass(frozen=True)
class PairPolicy:
    split: str | None = "train"
    match_illumination: bool = True


class PairSampler:
    """Seeded stream of ordered (source, target) pairs of the same identity.

    Pairs share identity (and illumination by default) and differ in pose
    and/or expression. Identities without any valid pair are skipped and
    counted in ``skipped``.
    """

    def __init__(self, records, rng: np.random.Generator, policy: PairPolicy = PairPolicy()):
        self.records = list(records)
        self.rng = rng
        groups = defaultdict(list)
        for i, r in enumerate(self.records):
            if policy.split is not None and getattr(r, "split", policy.split) != policy.split:
                continue
            key = (r.identity, r.illumination if policy.match_illumination else None)
            groups[key].append(i)
        by_identity = defaultdict(int)
        pairs = []
        for key, idx in groups.items():
            found = 0
            for a in idx:
                for b in idx:
                    if a != b and self.records[a].condition_key != self.records[b].condition_key:
                        pairs.append((a, b))
                        found += 1
            by_identity[key[0]] += found
        self.skipped = sum(1 for n in by_identity.values() if n == 0)
        if self.skipped:
            log.warning("%d identities have no valid pair and are skipped", self.skipped)
        self.index_pairs = np.array(pairs, dtype=np.int64).reshape(-1, 2)

    def __len__(self):
        return len(self.index_pairs)

    def __iter__(self):
        if not len(self.index_pairs):
            return
        while True:
            a, b = self.index_pairs[self.rng.integers(len(self.index_pairs))]
            yield self.records[a], self.records[b]

    def draw(self, n: int) -> list:
        it = iter(self)
        return [next(it) for _ in range(n)]


def sample_pairs(records, rng, policy: PairPolicy = PairPolicy()) -> PairSampler:
    return PairSampler(records, rng, policy)


# -- images -----------------------------------------------------------------------

def decode_and_normalize(image_path, resolution: int) -> np.ndarray:
    """Load an 8-bit RGB image, bilinear-resize to ``resolution`` and map to [-1, 1]."""
    try:
        with Image.open(image_path) as im:
            im = im.convert("RGB")
            if im.size != (resolution, resolution):
                im = im.resize((resolution, resolution), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot decode image {image_path}: {exc}") from exc
    return arr / 127.5 - 1.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Map an ``H x W x 3`` image in [-1, 1] to 8 bits."""
    return np.clip(np.round((img + 1.0) * 127.5), 0, 255).astype(np.uint8)


def save_png(path, img_uint8: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img_uint8).save(path, format="PNG")


def boundary_to_uint8(b: np.ndarray) -> np.ndarray:
    return np.clip(np.round(b * 255.0), 0, 255).astype(np.uint8)


# -- synthetic faces ------------------------------------------------------------

AU_FIELDS = ("mouth_open", "brow_raise", "eye_close")
_FIELD_AUS = {"mouth_open": ("AU25", "AU26"), "brow_raise": ("AU01", "AU02"), "eye_close": ("AU45",)}


@dataclass(frozen=True)
class SyntheticTemplateSpec:
    """Parameters of the synthetic landmark generator (ranges in degrees / [0, 1])."""

    resolution: int = 32
    yaw_range: tuple = (-45.0, 45.0)
    pitch_range: tuple = (-15.0, 15.0)
    roll_range: tuple = (-15.0, 15.0)
    field_max: float = 1.0  # upper bound of every displacement field intensity
    n_identities: int = 8
    shape_jitter: float = 0.04  # per-identity relative shape variation
    face_scale: float = 0.38  # crop fraction per face unit; larger than the fixture faces
    center_y: float = 0.05
    seed: int = 0
    base: np.ndarray = field(default=geo.MEAN_FACE_3D, repr=False, compare=False)


# Full-intensity displacement amplitudes (face-centred units).
MOUTH_DROP = 0.4  # lower lip
JAW_DROP = 0.18  # chin
BROW_LIFT = 0.25
LID_CLOSE = 0.9  # fraction of the eye opening covered by the upper lid


def _displace(points3d: np.ndarray, fields: dict) -> np.ndarray:
    """Apply the expression displacement fields in face-centred units."""
    p = points3d.copy()
    a = fields.get("mouth_open", 0.0)
    for k, wgt in {55: 0.6, 56: 0.9, 57: 1.0, 58: 0.9, 59: 0.6, 65: 0.9, 66: 1.0, 67: 0.9}.items():
        p[k, 1] += MOUTH_DROP * a * wgt
    for k in range(4, 13):
        p[k, 1] += JAW_DROP * a * math.sin(math.pi * (k - 3) / 10.0)
    b = fields.get("brow_raise", 0.0)
    p[17:27, 1] -= BROW_LIFT * b
    c = fields.get("eye_close", 0.0)
    for up, low in ((37, 41), (38, 40), (43, 47), (44, 46)):
        p[up, 1] += LID_CLOSE * c * (p[low, 1] - p[up, 1])
    return p


def _identity_shape(base: np.ndarray, rng: np.random.Generator, jitter: float) -> np.ndarray:
    """Bilaterally symmetric shape variant of the mean face."""
    p = base.copy()
    sx, sy = 1.0 + jitter * rng.uniform(-1, 1, size=2)
    p[:, 0] *= sx
    p[:, 1] *= sy
    p[36:48, 1] += jitter * rng.uniform(-1, 1)
    p[48:68, 0] *= 1.0 + jitter * rng.uniform(-1, 1)
    return p


def expression_from_fields(fields: dict) -> np.ndarray:
    e = np.zeros(geo.EXPR_DIM)
    for name, aus in _FIELD_AUS.items():
        for au in aus:
            e[AU_INDEX[au]] = fields.get(name, 0.0)
    return e


@dataclass
class SyntheticSample:
    landmarks: geo.LandmarkSet
    boundary: np.ndarray
    pose: np.ndarray
    expression: np.ndarray
    identity: str
    fields: dict
    illumination: str = "uniform"
    split: str = "train"

    @property
    def condition_key(self):
        return (tuple(self.pose), tuple(self.expression))


def synth_landmarks(shape3d, yaw, pitch, roll, fields, scale=geo.FACE_SCALE, center_y=geo.FACE_CENTER_Y):
    """Raw normalized 68 x 2 landmarks for one set of generating parameters."""
    return geo.project_face(_displace(shape3d, fields), yaw, pitch, roll, scale, center_y)


def identity_shapes(spec: SyntheticTemplateSpec) -> list[np.ndarray]:
    rng = np.random.default_rng([spec.seed, 1])
    return [_identity_shape(spec.base, rng, spec.shape_jitter) for _ in range(spec.n_identities)]


def generate_synthetic_dataset(spec: SyntheticTemplateSpec, n: int) -> list[SyntheticSample]:
    """Draw ``n`` samples with known pose and expression.

    Pose and expression are the generating parameters, never estimates.
    """
    if spec.n_identities < 1 or not 0 <= spec.field_max <= 1:
        raise ContractError("invalid synthetic template spec")
    shapes = identity_shapes(spec)
    rng = np.random.default_rng([spec.seed, 2])
    out = []
    for _ in range(n):
        ident = int(rng.integers(spec.n_identities))
        yaw = rng.uniform(*spec.yaw_range)
        pitch = rng.uniform(*spec.pitch_range)
        roll = rng.uniform(*spec.roll_range)
        fields = {f: float(rng.uniform(0.0, spec.field_max)) for f in AU_FIELDS}
        raw = synth_landmarks(shapes[ident], yaw, pitch, roll, fields, spec.face_scale, spec.center_y)
        if raw.min() < 0.0 or raw.max() > 1.0:
            raise ContractError(
                f"synthetic landmarks leave the unit square (yaw={yaw:.1f}, pitch={pitch:.1f}, roll={roll:.1f})"
            )
        lms = geo.LandmarkSet(raw)
        out.append(SyntheticSample(
            landmarks=lms,
            boundary=geo.rasterize_boundary(lms, (spec.resolution, spec.resolution)),
            pose=np.array([yaw, pitch, roll]) / 90.0,
            expression=expression_from_fields(fields),
            identity=f"id{ident:03d}",
            fields=fields,
        ))
    return out


# -- toy face renderer --------------------------------------------------------------

_ILLUMINATION_GAIN = {
    "front": lambda x, y: np.ones_like(x),
    "left": lambda x, y: 1.15 - 0.45 * x,
    "right": lambda x, y: 0.7 + 0.45 * x,
    "top": lambda x, y: 1.15 - 0.45 * y,
}


def identity_style(identity_index: int, seed: int = 0) -> dict:
    rng = np.random.default_rng([seed, 3, identity_index])
    hue = rng.uniform(0, 1, size=6)
    return {
        "skin": tuple(int(v) for v in (150 + 90 * hue[0], 110 + 80 * hue[1], 80 + 70 * hue[2])),
        "hair": tuple(int(v) for v in rng.integers(0, 200, size=3)),
        "eye": tuple(int(v) for v in rng.integers(0, 255, size=3)),
        "lip": tuple(int(v) for v in (140 + 100 * hue[3], 40 + 60 * hue[4], 60 + 60 * hue[5])),
        "bg": tuple(int(v) for v in rng.integers(60, 255, size=3)),
        "stripes": int(rng.integers(2, 7)),
    }


def render_face(lms: geo.LandmarkSet, style: dict, size: int = 128,
                illumination: str = "front", supersample: int = 4) -> np.ndarray:
    """Paint a cartoon face over the landmarks; returns ``size x size x 3`` uint8."""
    s = size * supersample
    im = Image.new("RGB", (s, s), style["bg"])
    dr = ImageDraw.Draw(im)
    p = lms.points * s

    def poly(idx):
        return [tuple(p[i]) for i in idx]

    brow_top = [tuple(p[i] + np.array([0.0, -0.12 * s])) for i in range(26, 16, -1)]
    head = poly(range(17)) + brow_top
    crown = [tuple(p[i] + np.array([0.0, -0.22 * s])) for i in range(26, 16, -1)]
    dr.polygon(poly([16, 0]) + [tuple(p[0] + [0, -0.1 * s])] + crown[::-1] + [tuple(p[16] + [0, -0.1 * s])],
               fill=style["hair"])
    dr.polygon(head, fill=style["skin"])
    # identity-specific cheek stripes
    for k in range(style["stripes"]):
        t = (k + 1) / (style["stripes"] + 1)
        a = p[2] * (1 - t) + p[14] * t
        dr.line([tuple(a), tuple(a + [0, 0.04 * s])], fill=style["hair"], width=max(1, s // 128))
    lw = max(1, s // 64)
    for chain in (range(17, 22), range(22, 27)):
        dr.line(poly(chain), fill=style["hair"], width=2 * lw)
    for eye in (range(36, 42), range(42, 48)):
        pts = poly(eye)
        dr.polygon(pts, fill=(245, 245, 245))
        c = np.mean([p[i] for i in eye], axis=0)
        r = max(1.0, 0.35 * (p[eye[4]][1] - p[eye[1]][1]))
        dr.ellipse([c[0] - r, c[1] - r, c[0] + r, c[1] + r], fill=style["eye"])
    dark = tuple(int(v * 0.6) for v in style["skin"])
    dr.line(poly(range(27, 31)), fill=dark, width=lw)
    dr.line(poly(range(31, 36)), fill=dark, width=lw)
    dr.polygon(poly(range(48, 60)), fill=style["lip"])
    dr.polygon(poly(range(60, 68)), fill=(60, 20, 30))

    small = np.asarray(im.resize((size, size), Image.BOX), dtype=np.float64)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    gain = _ILLUMINATION_GAIN[illumination](xx, yy)[..., None]
    return np.clip(np.round(small * gain), 0, 255).astype(np.uint8)


def make_toy_fixture(out_dir, n_identities=6, per_illumination=6, illuminations=("front", "left"),
                     image_size=128, n_test_identities=1, seed=0) -> Path:
    """Write a small rendered dataset (images, landmark files, manifest.jsonl).

    Each identity gets one frontal neutral record first per illumination
    (the rank-1 gallery face), then views from a 15 degree yaw grid with
    random expressions. The last ``n_test_identities`` identities form the
    test split; every fourth remaining record is held out for validation.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "landmarks").mkdir(parents=True, exist_ok=True)
    spec = SyntheticTemplateSpec(n_identities=n_identities, seed=seed)
    shapes = identity_shapes(spec)
    rng = np.random.default_rng([seed, 4])
    views = [0.0, -15.0, 15.0, -30.0, 30.0, -45.0, 45.0]
    rows = []
    for ident in range(n_identities):
        style = identity_style(ident, seed)
        test = ident >= n_identities - n_test_identities
        for illum in illuminations:
            for k in range(per_illumination):
                yaw = views[k % len(views)]
                fields = {f: 0.0 for f in AU_FIELDS} if k == 0 else {
                    f: float(np.round(rng.uniform(0, 1), 3)) for f in AU_FIELDS}
                roll = 0.0 if k == 0 else float(np.round(rng.uniform(-8, 8), 2))
                raw = synth_landmarks(shapes[ident], yaw, 0.0, roll, fields)
                lms = geo.LandmarkSet(np.clip(raw, 0, 1))
                name = f"id{ident:03d}_{illum}_{k:02d}"
                img = render_face(lms, style, image_size, illum)
                save_png(out / "images" / f"{name}.png", img)
                geo.write_landmark_file(out / "landmarks" / f"{name}.txt", lms.points * image_size)
                split = "test" if test else ("val" if k % 4 == 3 else "train")
                rows.append({
                    "image_path": f"images/{name}.png",
                    "landmarks_path": f"landmarks/{name}.txt",
                    "identity": f"id{ident:03d}",
                    "yaw_deg": yaw,
                    "expression_label": "neutral" if k == 0 else "synthetic",
                    "au": [round(v, 6) for v in expression_from_fields(fields)],
                    "illumination": illum,
                    "split": split,
                })
    write_manifest(out / "manifest.jsonl", rows)
    return out / "manifest.jsonl"


# -- array views used by the trainers ----------------------------------------------

@dataclass
class FaceArrays:
    """Per-record arrays in network layout (``N x 3 x H x W``)."""

    boundaries: np.ndarray
    pose: np.ndarray
    expression: np.ndarray
    identity: np.ndarray  # str per record
    illumination: np.ndarray
    split: np.ndarray
    images: np.ndarray | None = None
    yaw_deg: np.ndarray | None = None

    def __len__(self):
        return len(self.boundaries)

    def records(self):
        """Lightweight records usable by :func:`sample_pairs`."""
        return [_Row(self.identity[i], self.illumination[i], self.split[i],
                     (tuple(self.pose[i]), tuple(self.expression[i]))) for i in range(len(self))]

    def subset(self, idx) -> "FaceArrays":
        idx = np.asarray(idx, dtype=np.int64)
        return FaceArrays(**{k: (None if v is None else v[idx]) for k, v in self.__dict__.items()})


@dataclass(frozen=True)
class _Row:
    identity: str
    illumination: str
    split: str
    condition_key: tuple


def _chw(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float32)


def arrays_from_synthetic(samples: list[SyntheticSample]) -> FaceArrays:
    return FaceArrays(
        boundaries=np.stack([_chw(s.boundary) for s in samples]),
        pose=np.stack([s.pose for s in samples]).astype(np.float32),
        expression=np.stack([s.expression for s in samples]).astype(np.float32),
        identity=np.array([s.identity for s in samples]),
        illumination=np.array([s.illumination for s in samples]),
        split=np.array([s.split for s in samples]),
    )


def record_landmarks(rec: ManifestRecord) -> tuple[geo.LandmarkSet, int]:
    raw = geo.read_landmark_file(rec.landmarks_path)
    try:
        with Image.open(rec.image_path) as im:
            w, h = im.size
    except OSError as exc:
        raise DataError(f"cannot decode image {rec.image_path}: {exc}") from exc
    return geo.normalize_landmarks(raw, (0, 0, w, h))


def _decode_record(rec: ManifestRecord, resolution: int, with_images: bool):
    lms, _ = record_landmarks(rec)
    img = _chw(decode_and_normalize(rec.image_path, resolution)) if with_images else None
    return _chw(geo.rasterize_boundary(lms, (resolution, resolution))), geo.pose_from_landmarks(lms), img


def arrays_from_manifest(records: list[ManifestRecord], resolution: int, with_images=True,
                         workers: int = 1) -> FaceArrays:
    """Decode every record: boundary raster, landmark pose, expression and image.

    ``workers > 1`` decodes in a thread pool; results keep manifest order.
    """
    def job(rec):
        return _decode_record(rec, resolution, with_images)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(job, records))
    else:
        rows = [job(r) for r in records]
    bnd = [r[0] for r in rows]
    pose = [r[1] for r in rows]
    imgs = [r[2] for r in rows]
    expr = [rec.expression for rec in records]
    n = len(records)
    return FaceArrays(
        boundaries=np.stack(bnd) if n else np.zeros((0, 3, resolution, resolution), np.float32),
        pose=np.array(pose, dtype=np.float32).reshape(n, geo.POSE_DIM),
        expression=np.array(expr, dtype=np.float32).reshape(n, geo.EXPR_DIM),
        identity=np.array([r.identity for r in records]),
        illumination=np.array([r.illumination for r in records]),
        split=np.array([r.split for r in records]),
        images=(np.stack(imgs) if n else None) if with_images else None,
        yaw_deg=np.array([r.yaw_deg for r in records]),
    )
