import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facebound import geometry as geo
from facebound.errors import ContractError, DataError, GeometryError

from raster_oracle import raster_oracle, segment_oracle


def frontal(**kw):
    return geo.LandmarkSet(geo.project_face(geo.MEAN_FACE_3D, **kw))


def random_landmarks(seed):
    return geo.LandmarkSet(np.random.default_rng(seed).uniform(0, 1, size=(68, 2)))


# -- landmark sets and normalization -------------------------------------------------

def test_landmark_set_rejects_bad_shapes_and_values():
    with pytest.raises(DataError):
        geo.LandmarkSet(np.zeros((67, 2)))
    bad = np.full((68, 2), 0.5)
    bad[3, 1] = np.nan
    with pytest.raises(DataError):
        geo.LandmarkSet(bad)


def test_landmark_set_is_immutable_and_hashable():
    lms = frontal()
    with pytest.raises(ValueError):
        lms.points[0, 0] = 1.0
    assert lms == frontal() and hash(lms) == hash(frontal())


def test_normalize_corner_center_and_hand_arithmetic():
    raw = np.full((68, 2), 150.0)
    raw[0] = (100.0, 50.0)
    raw[1] = (200.0, 150.0)
    raw[2] = (150.0, 100.0)
    lms, n = geo.normalize_landmarks(raw, (100, 50, 100, 100))
    assert n == 0
    assert tuple(lms.points[0]) == (0.0, 0.0)
    assert tuple(lms.points[2]) == (0.5, 0.5)
    assert tuple(lms.points[1]) == (1.0, 1.0)


def test_normalize_clamps_and_counts_outside_points():
    raw = np.full((68, 2), 50.0)
    raw[5] = (-10.0, 50.0)
    raw[6] = (50.0, 130.0)
    lms, n = geo.normalize_landmarks(raw, (0, 0, 100, 100))
    assert n == 2
    assert lms.points[5, 0] == 0.0 and lms.points[6, 1] == 1.0


def test_normalize_errors():
    with pytest.raises(DataError):
        geo.normalize_landmarks(np.zeros((10, 2)), (0, 0, 1, 1))
    with pytest.raises(DataError):
        geo.normalize_landmarks(np.full((68, 2), np.inf), (0, 0, 1, 1))
    with pytest.raises(DataError):
        geo.normalize_landmarks(np.zeros((68, 2)), (0, 0, 0, 10))


def test_landmark_file_round_trip(tmp_path):
    raw = np.random.default_rng(3).uniform(0, 128, size=(68, 2)).round(4)
    path = tmp_path / "a.txt"
    geo.write_landmark_file(path, raw)
    np.testing.assert_allclose(geo.read_landmark_file(path), raw, atol=1e-4)


def test_landmark_file_errors_name_the_file(tmp_path):
    with pytest.raises(DataError, match="missing.txt"):
        geo.read_landmark_file(tmp_path / "missing.txt")
    short = tmp_path / "short.txt"
    short.write_text("# header\n1 2\n3 4\n")
    with pytest.raises(DataError, match="short.txt"):
        geo.read_landmark_file(short)


# -- rasterization -----------------------------------------------------------------

@given(st.integers(0, 40), st.integers(0, 40), st.integers(0, 40), st.integers(0, 40))
@settings(max_examples=300, deadline=None)
def test_line_pixels_match_exact_oracle(r0, c0, r1, c1):
    assert set(geo.line_pixels(r0, c0, r1, c1)) == segment_oracle(r0, c0, r1, c1)


@given(st.integers(0, 30), st.integers(0, 30), st.integers(0, 30), st.integers(0, 30))
@settings(max_examples=200, deadline=None)
def test_line_pixels_symmetric_connected_and_near_segment(r0, c0, r1, c1):
    a = geo.line_pixels(r0, c0, r1, c1)
    assert set(a) == set(geo.line_pixels(r1, c1, r0, c0))
    assert (r0, c0) in a and (r1, c1) in a
    assert len(a) == max(abs(r1 - r0), abs(c1 - c0)) + 1
    for (ra, ca), (rb, cb) in zip(a[:-1], a[1:]):  # 8-connected walk
        assert max(abs(ra - rb), abs(ca - cb)) == 1
    # every lit pixel centre lies within one pixel (Chebyshev) of the ideal segment
    p0, p1 = np.array([r0, c0], float), np.array([r1, c1], float)
    for q in a:
        ts = np.linspace(0, 1, 401)
        pts = p0 + ts[:, None] * (p1 - p0)
        assert np.abs(pts - np.array(q)).max(axis=1).min() <= 1.0


@pytest.mark.parametrize("seed", range(10))
def test_raster_equals_oracle(seed):
    lms = random_landmarks(seed)
    np.testing.assert_array_equal(geo.rasterize_boundary(lms, (64, 64)), raster_oracle(lms.points, (64, 64)))


def test_raster_properties_on_face():
    lms = frontal(yaw_deg=20, roll_deg=5)
    img = geo.rasterize_boundary(lms, (64, 64))
    assert img.shape == (64, 64, 3) and img.dtype == np.float32
    colors = {tuple(c) for c in img.reshape(-1, 3)}
    assert colors <= {(0.0, 0.0, 0.0)} | set(geo.DEFAULT_PALETTE.values())
    assert len(colors) == 6
    for r, c in geo.landmark_pixels(lms, (64, 64)):  # every endpoint lit
        assert img[r, c].any()
    assert np.array_equal(img, geo.rasterize_boundary(lms, (64, 64)))


def test_raster_all_points_coincident_gives_single_center_pixel():
    img = geo.rasterize_boundary(geo.LandmarkSet(np.full((68, 2), 0.5)), (64, 64))
    lit = np.argwhere(img.any(axis=2))
    assert lit.tolist() == [[32, 32]]


def test_raster_horizontal_jaw_matches_oracle():
    pts = geo.project_face(geo.MEAN_FACE_3D)
    pts[0:17, 1] = 0.9
    pts[0:17, 0] = np.linspace(0.05, 0.95, 17)
    lms = geo.LandmarkSet(pts)
    img = geo.rasterize_boundary(lms, (64, 64), palette={k: (1.0, 0.0, 0.0) if k == "jaw" else (0.0, 0.0, 0.0)
                                                           for k in geo.DEFAULT_PALETTE})
    jaw = {tuple(p) for p in np.argwhere(img[..., 0] > 0)}
    pix = geo.landmark_pixels(lms, (64, 64))
    expected = set()
    for i in range(16):
        expected |= segment_oracle(*pix[i], *pix[i + 1])
    assert jaw == expected


def test_raster_rejects_tiny_resolution():
    with pytest.raises(ContractError):
        geo.rasterize_boundary(frontal(), (8, 64))


def test_rectangular_raster():
    img = geo.rasterize_boundary(frontal(), (32, 48))
    assert img.shape == (32, 48, 3)
    np.testing.assert_array_equal(img, raster_oracle(frontal().points, (32, 48)))


# -- pose ----------------------------------------------------------------------------

def test_frontal_template_is_symmetric():
    p = geo.pose_from_landmarks(frontal())
    assert p[0] == pytest.approx(0.0, abs=1e-12) and p[2] == pytest.approx(0.0, abs=1e-12)
    assert p[1] == pytest.approx(0.0, abs=1e-9)


def test_mean_face_mirror_symmetry():
    m = geo.MEAN_FACE_3D
    np.testing.assert_allclose(m[geo.MIRROR_PERM] * [-1, 1, 1], m, atol=1e-15)


@pytest.mark.parametrize("theta", [-30, -10, 0, 10, 25, 30])
def test_in_plane_rotation_recovers_roll(theta):
    p = geo.pose_from_landmarks(frontal(roll_deg=theta))
    assert abs(p[2] * 90 - theta) < 2.0
    assert abs(p[2] - theta / 90) < 0.02


@pytest.mark.parametrize("yaw,pitch,roll", [(30, 0, 0), (-45, 10, 0), (15, -15, 12), (0, 20, -20)])
def test_template_pose_round_trip(yaw, pitch, roll):
    p = geo.pose_from_landmarks(frontal(yaw_deg=yaw, pitch_deg=pitch, roll_deg=roll))
    np.testing.assert_allclose(p * 90, [yaw, pitch, roll], atol=1e-6)


@given(st.integers(0, 10_000))
@settings(max_examples=100, deadline=None)
def test_pose_mirror_antisymmetry(seed):
    r = np.random.default_rng(seed)
    pts = geo.project_face(geo.MEAN_FACE_3D, r.uniform(-50, 50), r.uniform(-20, 20), r.uniform(-30, 30))
    pts = pts + r.normal(scale=0.01, size=pts.shape)
    lms = geo.LandmarkSet(pts)
    p, q = geo.pose_from_landmarks(lms), geo.pose_from_landmarks(geo.mirror_landmarks(lms))
    np.testing.assert_allclose(q, [-p[0], p[1], -p[2]], atol=1e-12)


def test_pose_degenerate_geometry():
    with pytest.raises(GeometryError):
        geo.pose_from_landmarks(geo.LandmarkSet(np.full((68, 2), 0.5)))


def test_pose_bounds():
    for yaw in (-60, 60):
        p = geo.pose_from_landmarks(frontal(yaw_deg=yaw))
        assert np.abs(p).max() <= 1.5
        geo.validate_pose(p)


def test_validate_vectors():
    with pytest.raises(ContractError):
        geo.validate_pose([0, 0])
    with pytest.raises(ContractError):
        geo.validate_pose([2, 0, 0])
    with pytest.raises(ContractError):
        geo.validate_expression(np.full(17, 1.5))
    geo.validate_expression(np.zeros(17))


def test_rotation_matrix_is_orthonormal():
    r = geo.rotation_matrix(23, -11, 7)
    np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
    assert math.isclose(np.linalg.det(r), 1.0)
