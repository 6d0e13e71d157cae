import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fantasyid.facepipe import (FaceCollection, LandmarkSet, PoseAngles, PoseError, SelectionError,
                                build_face_collection, crop_box, crop_face, estimate_pose, head_landmarks,
                                matrix_to_angles, min_pairwise, pose_distance, read_ppm,
                                rotation_matrix, sample_reference, select_views, synth_head_render,
                                write_ppm)
from fantasyid.head import IdentityParams, canonical_landmarks_3d
from fantasyid.numerics import Rng

from oracles import best_dispersion

angle = st.floats(-60, 60)


def project(pose, scale=20.0, centre=(32.0, 32.0)):
    pts = canonical_landmarks_3d() @ pose.matrix().T
    return LandmarkSet(scale * pts[:, :2] + np.asarray(centre))


def test_render_frontal_is_roughly_symmetric():
    frame, lm, _ = synth_head_render(IdentityParams(albedo_seed=0), PoseAngles(0, 0, 0), 64)
    assert frame.shape == (64, 64, 3) and frame.dtype == np.uint8
    p = lm.points
    assert abs((p[0, 0] + p[1, 0]) / 2 - 32) < 1.0
    assert abs(p[2, 0] - 32) < 1.0
    mask = (frame.astype(int).sum(-1) > 3 * 40)
    cols = np.nonzero(mask.any(0))[0]
    assert abs((cols.min() + cols.max()) / 2 - 31.5) < 2.0


def test_yaw_shifts_nose_more_than_eyes():
    _, base, _ = synth_head_render(IdentityParams(), PoseAngles(0, 0, 0), 64)
    _, turned, _ = synth_head_render(IdentityParams(), PoseAngles(30, 0, 0), 64)
    eyes_mid = turned.points[:2].mean(0)[0]
    # nose sits in front of the eyes, so it shifts further than their midpoint under yaw
    shift_nose = turned.points[2, 0] - base.points[2, 0]
    shift_eyes = eyes_mid - base.points[:2].mean(0)[0]
    assert abs(shift_nose) > abs(shift_eyes) + 1.0


@settings(max_examples=50, deadline=None)
@given(angle, st.floats(-40, 40), st.floats(-30, 30))
def test_pose_from_exact_projection(yaw, pitch, roll):
    est = estimate_pose(project(PoseAngles(yaw, pitch, roll)))
    assert abs(est.yaw - yaw) < 1e-6 and abs(est.pitch - pitch) < 1e-6 and abs(est.roll - roll) < 1e-6


def test_pose_from_render_landmarks():
    _, lm, _ = synth_head_render(IdentityParams(width_scale=1.1), PoseAngles(25, 0, 10), 64)
    est = estimate_pose(lm)
    assert abs(est.yaw - 25) < 5
    assert abs(est.roll - 10) < 1


def test_head_landmarks_match_render():
    ident, pose = IdentityParams(1.1, 1.2, 3), PoseAngles(20, -10, 5)
    _, lm, _ = synth_head_render(ident, pose, 64)
    np.testing.assert_array_equal(head_landmarks(ident, pose, 64).points, lm.points)


def test_collinear_landmarks_raise():
    pts = np.stack([np.linspace(10, 50, 5), np.linspace(20, 40, 5)], 1)
    with pytest.raises(PoseError):
        estimate_pose(LandmarkSet(pts))


def test_landmark_validation():
    with pytest.raises(PoseError):
        LandmarkSet(np.full((5, 2), 70.0)).validate(64, 64)
    with pytest.raises(PoseError):
        LandmarkSet(np.zeros((4, 2))).validate(64, 64)


@settings(max_examples=40, deadline=None)
@given(*(st.tuples(angle, angle, angle) for _ in range(3)))
def test_pose_distance_is_a_metric(a, b, c):
    a, b, c = PoseAngles(*a), PoseAngles(*b), PoseAngles(*c)
    assert pose_distance(a, a) < 1e-6
    assert abs(pose_distance(a, b) - pose_distance(b, a)) < 1e-9
    assert pose_distance(a, c) <= pose_distance(a, b) + pose_distance(b, c) + 1e-6


def test_matrix_angles_round_trip():
    r = rotation_matrix(20, -15, 7)
    p = matrix_to_angles(r)
    np.testing.assert_allclose([p.yaw, p.pitch, p.roll], [20, -15, 7], atol=1e-9)


def test_select_views_yaw_grid():
    poses = [PoseAngles(y, 0, 0) for y in (-60, -30, 0, 30, 60)]
    assert select_views(poses, 3) == [0, 2, 4]


def test_select_views_edge_cases():
    poses = [PoseAngles(y, 0, 0) for y in (0, 10, 20)]
    assert select_views(poses, 3) == [0, 1, 2]
    with pytest.raises(SelectionError):
        select_views(poses, 4)


def random_poses(rng, n):
    return [PoseAngles(*rng.uniform([-60, -40, -30], [60, 40, 30])) for _ in range(n)]


def test_select_views_half_approximation():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(3, 9))
        k = int(rng.integers(2, min(4, n) + 1))
        poses = random_poses(rng, n)
        dist = np.array([[pose_distance(a, b) for b in poses] for a in poses])
        got = min_pairwise(poses, select_views(poses, k))
        assert got >= 0.5 * best_dispersion(dist, k) - 1e-9


def test_select_views_permutation_invariant_value():
    rng = np.random.default_rng(3)
    poses = random_poses(rng, 8)
    perm = rng.permutation(8)
    a = min_pairwise(poses, select_views(poses, 4))
    b = min_pairwise([poses[i] for i in perm], select_views([poses[i] for i in perm], 4))
    assert abs(a - b) < 1e-9


def test_crop_box_centred_and_clamped():
    lm = LandmarkSet(np.array([[28, 28], [36, 28], [32, 32], [29, 36], [35, 36.0]]))
    x0, y0, side = crop_box(lm, (64, 64), 2.2)
    assert side == pytest.approx(2.2 * 8)
    assert x0 + side / 2 == pytest.approx(32) and y0 + side / 2 == pytest.approx(32)
    corner = LandmarkSet(lm.points - 26)
    x0, y0, side = crop_box(corner, (64, 64), 2.2)
    assert x0 == 0 and y0 == 0
    huge = LandmarkSet(np.array([[0, 0], [60, 0], [30, 30], [0, 60], [60, 60.0]]))
    assert crop_box(huge, (64, 64), 2.2)[2] == 64


def test_crop_face_shape():
    frame, lm, _ = synth_head_render(IdentityParams(), PoseAngles(0, 0, 0), 64)
    crop = crop_face(frame, lm, 2.2, 32)
    assert crop.shape == (32, 32, 3) and crop.dtype == np.uint8


def test_collection_spans_the_sweep():
    ident = IdentityParams(albedo_seed=1)
    frames, lms = [], []
    for y in np.linspace(-60, 60, 40):
        f, lm, _ = synth_head_render(ident, PoseAngles(float(y), 0, 0), 64)
        frames.append(f)
        lms.append(lm)
    col = build_face_collection(frames, lms, k=6, identity="x")
    assert len(col) == 6 and len(set(col.frame_indices)) == 6
    yaws = [p.yaw for p in col.poses]
    assert max(yaws) - min(yaws) >= 100


def test_collection_constant_pose_takes_first_frames():
    f, lm, _ = synth_head_render(IdentityParams(), PoseAngles(0, 0, 0), 64)
    col = build_face_collection([f] * 10, [lm] * 10, k=6)
    assert col.frame_indices == [0, 1, 2, 3, 4, 5]


def test_sample_reference_is_uniform():
    crops = [np.full((4, 4, 3), i, np.uint8) for i in range(6)]
    col = FaceCollection("x", crops, [PoseAngles(0, 0, 0)] * 6, list(range(10, 16)))
    rng = Rng(5)
    n = 6000
    counts = np.zeros(6)
    for _ in range(n):
        crop, idx = sample_reference(col, rng)
        assert crop[0, 0, 0] == idx - 10
        counts[idx - 10] += 1
    sd = np.sqrt(n * (1 / 6) * (5 / 6))
    assert np.all(np.abs(counts - n / 6) < 3 * sd)


def test_ppm_round_trip(tmp_path, nprng):
    img = nprng.integers(0, 256, (7, 11, 3), dtype=np.uint8)
    write_ppm(tmp_path / "a.ppm", img)
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n11 7\n255\n")
    np.testing.assert_array_equal(read_ppm(tmp_path / "a.ppm"), img)
