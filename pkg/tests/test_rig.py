import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepfit.rig import (
    PoseParams,
    RigError,
    apply_rigid,
    euler_to_rotation,
    evaluate_surface,
    load_rig,
    pose_jacobian,
    posed_vertices,
    rig_from_dict,
    rig_to_dict,
    rotation_to_euler,
    save_rig,
    validate_rig,
)

angles = st.lists(st.floats(-3.0, 3.0), min_size=3, max_size=3)


def test_identity_rotation():
    R, _ = euler_to_rotation([0, 0, 0])
    assert np.array_equal(R, np.eye(3))


def test_quarter_turn_about_x():
    R, _ = euler_to_rotation([np.pi / 2, 0, 0])
    assert np.allclose(R @ [0, 1, 0], [0, 0, 1], atol=1e-15)


def test_rotation_partials_match_central_differences():
    rng = np.random.default_rng(0)
    h = 1e-6
    for _ in range(100):
        th = rng.uniform(-np.pi, np.pi, 3)
        _, dR = euler_to_rotation(th)
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            fd = (euler_to_rotation(th + e)[0] - euler_to_rotation(th - e)[0]) / (2 * h)
            assert np.linalg.norm(dR[i] - fd) / np.linalg.norm(fd) < 1e-6


@given(angles)
def test_euler_round_trip(th):
    th = np.asarray(th) * np.array([1.0, 0.45, 1.0])  # keep away from gimbal lock
    R, _ = euler_to_rotation(th)
    back = rotation_to_euler(R, reference=th)
    assert np.allclose(back, th, atol=1e-9)


def test_zero_weights_give_neutral(rig):
    assert np.array_equal(evaluate_surface(rig, np.zeros(rig.n_shapes)), rig.neutral_vertices)


def test_single_non_jaw_shape_is_linear(rig):
    b = rig.shape_index("mouth_smile")
    w = np.zeros(rig.n_shapes)
    w[b] = 1.0
    assert np.array_equal(evaluate_surface(rig, w), rig.neutral_vertices + rig.blendshape_deltas[b])


def test_jaw_rotation_matches_rigid_motion_about_pivot(rig):
    jj = rig.jaw_joint
    k = int(np.argmax(rig.jaw_skin_weights))
    assert rig.jaw_skin_weights[k] == 1.0
    w = np.zeros(rig.n_shapes)
    slot = rig.jaw_slots[0]
    w[slot] = np.deg2rad(10.0) / jj.rotation_scale[0]  # 10 degrees about the first jaw axis
    axis = jj.axes[:, 0]
    a = np.deg2rad(10.0)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    Rot = np.eye(3) + np.sin(a) * K + (1 - np.cos(a)) * K @ K
    expected = Rot @ (rig.neutral_vertices[k] - jj.pivot) + jj.pivot
    assert np.allclose(evaluate_surface(rig, w)[k], expected, atol=1e-12)


def test_apply_rigid_cases(rig):
    X = rig.neutral_vertices
    assert np.array_equal(apply_rigid(X, [0, 0, 0], [0, 0, 0]), X)
    assert np.allclose(apply_rigid(X, [0, 0, 0], [1, 2, 3]), X + [1, 2, 3], atol=1e-14)
    th, t = [0.1, -0.2, 0.3], [0.5, -1.0, 2.0]
    assert np.allclose(apply_rigid(apply_rigid(X, th, [0, 0, 0]), [0, 0, 0], t), apply_rigid(X, th, t), atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(angles, st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_apply_rigid_preserves_distances(rig, th, t):
    X = rig.neutral_vertices[::97]
    Y = apply_rigid(X, th, t)
    d0 = np.linalg.norm(X[:, None] - X[None], axis=-1)
    d1 = np.linalg.norm(Y[:, None] - Y[None], axis=-1)
    off = ~np.eye(len(X), dtype=bool)
    assert np.max(np.abs(d1[off] - d0[off]) / d0[off]) < 1e-12


def test_surface_linear_in_non_jaw_weights(rig):
    rng = np.random.default_rng(1)
    non_jaw = [i for i in range(rig.n_shapes) if i not in rig.jaw_slots]
    w1, w2 = np.zeros(rig.n_shapes), np.zeros(rig.n_shapes)
    w1[non_jaw] = rng.uniform(-1, 1, len(non_jaw))
    w2[non_jaw] = rng.uniform(-1, 1, len(non_jaw))
    jaw = rng.uniform(-0.5, 0.5, len(rig.jaw_slots))
    w1[list(rig.jaw_slots)] = jaw
    w2[list(rig.jaw_slots)] = jaw
    a = 0.3
    lhs = evaluate_surface(rig, a * w1 + (1 - a) * w2)
    rhs = a * evaluate_surface(rig, w1) + (1 - a) * evaluate_surface(rig, w2)
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_translation_columns_are_unit(rig):
    p = PoseParams([0.1, 0.2, -0.1], [1, 2, 3], np.full(rig.n_shapes, 0.1))
    J = pose_jacobian(rig, p).toarray().reshape(rig.n_vertices, 3, -1)
    for j in range(3):
        assert np.array_equal(J[:, :, 3 + j], np.tile(np.eye(3)[j], (rig.n_vertices, 1)))


def test_blendshape_column_at_origin(rig):
    p = PoseParams([0.2, -0.1, 0.05], [0, 0, 0], np.zeros(rig.n_shapes))
    R, _ = euler_to_rotation(p.theta)
    J = pose_jacobian(rig, p).toarray()
    b = rig.shape_index("mouth_pucker")
    assert np.allclose(J[:, 6 + b], (rig.blendshape_deltas[b] @ R.T).ravel(), atol=1e-14)


def test_pose_jacobian_matches_central_differences(rig):
    h = 1e-5
    for seed in range(20):
        rng = np.random.default_rng(seed)
        p = PoseParams(rng.uniform(-0.4, 0.4, 3), rng.uniform(-3, 3, 3), rng.uniform(-0.5, 0.5, rig.n_shapes))
        J = pose_jacobian(rig, p).toarray()
        v = p.to_vector()
        fd = np.empty_like(J)
        for i in range(len(v)):
            e = np.zeros_like(v)
            e[i] = h
            fd[:, i] = (posed_vertices(rig, PoseParams.from_vector(v + e))
                        - posed_vertices(rig, PoseParams.from_vector(v - e))).ravel() / (2 * h)
        err = np.linalg.norm(J - fd, axis=0) / np.maximum(np.linalg.norm(fd, axis=0), 1e-12)
        assert err.max() < 1e-5, (seed, err.max())


def test_rig_invariants(rig):
    validate_rig(rig)
    assert rig.n_vertices == 3617 and rig.n_shapes == 11
    assert len(rig.landmark_vertices) == 68
    assert set(rig.shape_tags) <= {"jaw", "mouth", "other"}


def test_rig_file_round_trip(rig, tmp_path):
    save_rig(rig, tmp_path / "rig.json")
    back = load_rig(tmp_path / "rig.json")
    assert np.array_equal(back.neutral_vertices, rig.neutral_vertices)
    assert np.array_equal(back.blendshape_deltas, rig.blendshape_deltas)
    assert back.shape_names == rig.shape_names


def test_rig_loader_rejects_bad_triangles(rig):
    d = rig_to_dict(rig)
    d["triangles"][0] = [0, 1, rig.n_vertices + 5]
    with pytest.raises(RigError):
        rig_from_dict(d)


def test_weight_length_checked(rig):
    with pytest.raises(RigError):
        evaluate_surface(rig, np.zeros(rig.n_shapes + 1))
