import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepfit.detect import BlobBackend, FlowField, LandmarkSet, VariationalFlowBackend, landmarks
from deepfit.energies import (
    LandmarkWeights,
    ParamMask,
    RenderedView,
    ResidualBlock,
    deviation_prior,
    edge_energy,
    flow_mask,
    flow_match_energy,
    landmark_energy,
    stack,
    weight_regularizer,
)
from deepfit.pipeline.flowfit import FlowFitter
from deepfit.pipeline.stages import StageSpec
from deepfit.procedural import EDGE_CHAINS, fiducial_colors
from deepfit.render import Camera, look_at
from deepfit.rig import PoseParams
from deepfit.solver import SolveOptions

from conftest import render


def lmset(points, valid=None):
    points = np.asarray(points, float)
    return LandmarkSet(points, np.ones(len(points)), np.ones(len(points), bool) if valid is None else valid)


def random_landmarks(seed):
    return np.random.default_rng(seed).uniform(0, 200, (68, 2))


def test_perfect_alignment_gives_zero_landmark_residual():
    P = random_landmarks(0)
    b = landmark_energy(LandmarkWeights.uniform(), lmset(P), lmset(P))
    assert np.array_equal(b.residual, np.zeros(136))


def test_zero_weight_landmark_contributes_nothing():
    rng = np.random.default_rng(1)
    A, B = random_landmarks(1), random_landmarks(2)
    w = np.ones(68)
    w[7] = 0.0
    chain = rng.standard_normal((68, 2, 5))
    b = landmark_energy(LandmarkWeights(w), lmset(A), lmset(B), chain)
    assert np.array_equal(b.residual[14:16], [0.0, 0.0])
    assert np.array_equal(b.jacobian[14:16], np.zeros((2, 5)))
    assert b.jacobian.shape == (136, 5)


def test_invalid_landmarks_are_dropped_and_empty_is_flagged():
    P = random_landmarks(3)
    valid = np.zeros(68, bool)
    b = landmark_energy(LandmarkWeights.uniform(), lmset(P, valid), lmset(P))
    assert b.empty and len(b.residual) == 0


def test_edge_energy_offset_invariance_exact_on_grid():
    rng = np.random.default_rng(4)
    C = rng.integers(0, 256, (68, 2)).astype(float) / 4.0
    R = C + rng.integers(-8, 8, (68, 2)) / 8.0
    b0 = edge_energy(lmset(R), lmset(C))
    b1 = edge_energy(lmset(R + [3.25, -7.5]), lmset(C))
    assert np.array_equal(b0.residual, b1.residual)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(-500, 500), st.floats(-500, 500))
def test_edge_energy_offset_invariance(seed, ox, oy):
    rng = np.random.default_rng(seed)
    C = rng.uniform(0, 256, (68, 2))
    R = C + rng.normal(0, 2, (68, 2))
    b0 = edge_energy(lmset(R), lmset(C))
    b1 = edge_energy(lmset(R + [ox, oy]), lmset(C))
    assert np.allclose(b0.residual, b1.residual, rtol=0, atol=1e-12 * 1024)


def test_edge_energy_of_doubled_shape_is_captured_edges():
    C = random_landmarks(5)
    cen = C.mean(axis=0)
    R = cen + 2.0 * (C - cen)
    b = edge_energy(lmset(R), lmset(C))
    expected = []
    for idx, closed in EDGE_CHAINS:
        idx = list(idx)
        pairs = list(zip(idx[:-1], idx[1:])) + ([(idx[-1], idx[0])] if closed else [])
        expected += [C[j] - C[i] for i, j in pairs]
    assert np.allclose(b.residual, np.ravel(expected), atol=1e-11)


def test_edge_energy_single_valid_landmark_group():
    C = random_landmarks(6)
    valid = np.zeros(68, bool)
    valid[20] = True  # one point of the right brow
    b = edge_energy(lmset(C, valid), lmset(C))
    assert b.empty and len(b.residual) == 0


def test_weight_regularizer(rig):
    mask = ParamMask.build(rig, theta=True, shapes=("jaw_open", "mouth_smile"))
    assert np.array_equal(weight_regularizer(100.0, PoseParams.neutral(rig), mask).residual, [0.0, 0.0])
    w = np.zeros(rig.n_shapes)
    w[rig.shape_index("jaw_open")] = 0.5
    w[rig.shape_index("brow_raise")] = 0.9  # masked out
    b = weight_regularizer(100.0, PoseParams(np.zeros(3), np.zeros(3), w), mask)
    assert np.allclose(b.residual, [5.0, 0.0])
    assert b.jacobian.shape == (2, mask.size)
    assert np.allclose(b.jacobian[:, 3:], 10.0 * np.eye(2))


def test_deviation_prior(rig):
    mask = ParamMask.build(rig, theta=True, t=True)
    ref = PoseParams([0.1, 0.2, 0.3], [1, 2, 3], np.zeros(rig.n_shapes))
    assert np.array_equal(deviation_prior(ref, ref, 1.0, mask).residual, np.zeros(6))
    p = PoseParams([0.2, 0.2, 0.3], [1, 2.5, 3], np.zeros(rig.n_shapes))
    assert np.array_equal(deviation_prior(p, ref, 0.0, mask).residual, np.zeros(6))
    p2 = PoseParams.from_vector(ref.to_vector() + 2 * (p.to_vector() - ref.to_vector()))
    r1 = deviation_prior(p, ref, 4.0, mask).residual
    r2 = deviation_prior(p2, ref, 4.0, mask).residual
    assert np.allclose(r2, 2 * r1, atol=1e-15)


def test_flow_match_zero_cases():
    rng = np.random.default_rng(7)
    f = FlowField(rng.standard_normal((2, 16, 16)))
    m = np.ones((16, 16), bool)
    assert np.array_equal(flow_match_energy(f, f, m).residual, np.zeros(512))
    z = FlowField(np.zeros((2, 16, 16)))
    assert np.array_equal(flow_match_energy(z, z, m).residual, np.zeros(512))
    with pytest.raises(ValueError):
        flow_match_energy(f, FlowField(np.zeros((2, 8, 8))), np.ones((8, 8), bool))


def test_flow_mask_dilates_union():
    a = np.zeros((64, 64), bool)
    a[30, 30] = True
    m = flow_mask([a, np.zeros_like(a)], 64, dilation=5)
    assert m.sum() == (np.hypot(*np.mgrid[-5:6, -5:6]) <= 5).sum()


def test_stack_single_block_is_identity():
    rng = np.random.default_rng(8)
    b = ResidualBlock(rng.standard_normal(7), rng.standard_normal((7, 3)), "a")
    r, J = stack([b])
    assert np.array_equal(r, b.residual) and np.array_equal(J, b.jacobian)


def test_stack_norm_identity_and_order_independence():
    rng = np.random.default_rng(9)
    blocks = [ResidualBlock(rng.standard_normal(n), rng.standard_normal((n, 4)), f"b{k}", weight=rng.uniform(0.1, 5))
              for k, n in enumerate((5, 9, 3))]
    r, J = stack(blocks)
    assert abs(r @ r - sum(b.cost for b in blocks)) < 1e-12 * max(1.0, r @ r)
    r2, J2 = stack(blocks[::-1])
    assert np.array_equal(r, r2) and np.array_equal(J, J2)


def test_duplicated_block_doubles_cost_keeps_gauss_newton_step():
    rng = np.random.default_rng(10)
    b = ResidualBlock(rng.standard_normal(12), rng.standard_normal((12, 4)), "a")
    dup = ResidualBlock(b.residual, b.jacobian, "b")
    r1, J1 = stack([b])
    r2, J2 = stack([b, dup])
    assert np.isclose(r2 @ r2, 2 * (r1 @ r1), rtol=1e-14)
    s1 = np.linalg.lstsq(J1, -r1, rcond=None)[0]
    s2 = np.linalg.lstsq(J2, -r2, rcond=None)[0]
    assert np.allclose(s1, s2, atol=1e-12)


def test_stack_errors():
    with pytest.raises(ValueError):
        stack([])
    with pytest.raises(ValueError):
        ResidualBlock(np.zeros(3), np.zeros((2, 1)), "bad")
    with pytest.raises(ValueError):
        stack([ResidualBlock(np.zeros(2), np.zeros((2, 3)), "a"), ResidualBlock(np.zeros(2), np.zeros((2, 4)), "b")])


def test_param_mask_needs_an_active_entry(rig):
    with pytest.raises(ValueError):
        ParamMask(np.zeros(rig.n_params, bool))
    with pytest.raises(ValueError):
        ParamMask.build(rig, shapes=("no_such_shape",))


def test_landmark_weight_presets(rig):
    mh = LandmarkWeights.mouth_heavy(rig)
    assert np.all(mh.weights[48:68] == 10.0) and np.all(mh.weights[:48] == 1.0)
    nj = LandmarkWeights.subset(rig, "non_jaw").weights
    jo = LandmarkWeights.subset(rig, "jaw_only").weights
    assert np.array_equal(nj + jo, np.ones(68)) and np.all(jo[:17] == 1)
    with pytest.raises(ValueError):
        LandmarkWeights(-np.ones(68))


def small_scene_camera():
    R, t = look_at((0.0, 0.0, 50.0))
    return Camera(170.0, 170.0, 47.5, 47.5, 96, 96, R, t)


def test_landmark_block_jacobian_matches_end_to_end_differences(rig, appearance):
    cam = small_scene_camera()
    be = BlobBackend(fiducial_colors())
    p = PoseParams(np.deg2rad([2, -3, 1]), [0.3, -0.2, 0.5], np.zeros(rig.n_shapes))
    mask = ParamMask.build(rig, t=True)
    view = RenderedView(rig, cam, appearance, p, mask)
    det = landmarks(be, view.image)
    chain = det.jacobian(view.tangents)
    cap = lmset(det.landmarks.points + 0.5, det.landmarks.valid)
    W = LandmarkWeights.uniform()
    blk = landmark_energy(W, det.landmarks, cap, chain)
    assert det.landmarks.valid.sum() > 40
    # a step small enough that no pixel centre changes triangle keeps coverage jumps out of the differences
    h = 1e-5
    fd = np.zeros_like(blk.jacobian)
    for j in range(3):
        out = []
        for s in (1, -1):
            v = p.to_vector()
            v[3 + j] += s * h
            moved = RenderedView(rig, cam, appearance, PoseParams.from_vector(v), mask)
            assert np.array_equal(moved.render.triangle_id, view.render.triangle_id)
            d = landmarks(be, moved.image, bbox=det.bbox, centers=det.centers).landmarks
            out.append(landmark_energy(W, lmset(d.points, det.landmarks.valid), cap).residual)
        fd[:, j] = (out[0] - out[1]) / (2 * h)
    assert np.linalg.norm(blk.jacobian - fd) / np.linalg.norm(fd) < 1e-2


def test_gauss_newton_direction_decreases_landmark_cost(rig, appearance, camera):
    be = BlobBackend(fiducial_colors())
    target = PoseParams(np.deg2rad([1, 2, 0]), [0.4, 0.1, 0.3], np.zeros(rig.n_shapes))
    cap = landmarks(be, render(rig, camera, appearance, target)).landmarks
    p = PoseParams.neutral(rig)
    mask = ParamMask.build(rig, theta=True, t=True)
    view = RenderedView(rig, camera, appearance, p, mask)
    det = landmarks(be, view.image)
    valid = det.landmarks.valid & cap.valid
    chain = det.jacobian(view.tangents)
    for energy in (landmark_energy, edge_energy):
        if energy is landmark_energy:
            blk = energy(LandmarkWeights.uniform(), det.landmarks, cap, chain, valid=valid)
        else:
            blk = energy(det.landmarks, cap, chain, valid=valid)
        step = np.linalg.lstsq(blk.jacobian, -blk.residual, rcond=None)[0]
        v = p.to_vector()
        v[mask.indices] += 1e-2 * step
        d = landmarks(be, render(rig, camera, appearance, PoseParams.from_vector(v)), bbox=det.bbox,
                      centers=det.centers).landmarks
        d = lmset(d.points, valid)
        if energy is landmark_energy:
            new = energy(LandmarkWeights.uniform(), d, cap, valid=valid)
        else:
            new = energy(d, cap, valid=valid)
        assert new.cost < blk.cost


def test_flow_match_recovers_translation(rig, appearance, camera):
    be = VariationalFlowBackend(resolution=128, dtype="float32")
    fitter = FlowFitter(rig, appearance, [camera], be)
    p1 = PoseParams(np.deg2rad([2, 3, 0]), [0.0, 0.0, 0.0], np.zeros(rig.n_shapes))
    p2 = PoseParams(p1.theta, [0.6, -0.4, 0.0], np.zeros(rig.n_shapes))
    img1 = render(rig, camera, appearance, p1)
    img2 = render(rig, camera, appearance, p2)
    target = {("prev", 0): be.flow(img1, img2)}
    stage = StageSpec("t_only", t=True, options=SolveOptions(max_iterations=20))
    rep = fitter.solve(p1, p1, None, target, stage)
    est = PoseParams.from_vector(rep.params)
    motion = np.linalg.norm(p2.t - p1.t)
    assert np.linalg.norm(est.t - p2.t) < 0.02 * motion
    assert rep.monotone()
