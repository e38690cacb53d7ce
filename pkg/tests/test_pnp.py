import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cornerpose.geom3d import BoundingBox3D, Intrinsics, Pose, project_corners, random_rotation, rotation_error
from cornerpose.heatmap import Corners2D
from cornerpose.pnp import (
    DegenerateConfigurationError,
    InsufficientCorrespondencesError,
    estimate_pose,
    refine_pnp_lm,
    reprojection_rms,
    solve_pnp_dlt,
)

K = Intrinsics(600.0, 600.0, 320.0, 240.0, 640, 480)


def random_case(rng):
    half = rng.uniform(0.05, 0.25, 3)
    box = BoundingBox3D.from_bounds(-half, half)
    pose = Pose(random_rotation(rng), [*rng.uniform(-0.2, 0.2, 2), rng.uniform(1.5, 4.0)])
    return box, pose, project_corners(pose, K, box)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_dlt_exact_on_noiseless(seed):
    box, pose, uv = random_case(np.random.default_rng(seed))
    est = solve_pnp_dlt(box.corners, uv, K)
    assert rotation_error(est.rotation, pose.rotation) < 1e-7
    np.testing.assert_allclose(est.translation, pose.translation, rtol=1e-7, atol=1e-9)


def test_lm_reduces_cost_from_perturbed_start():
    rng = np.random.default_rng(3)
    box, pose, uv = random_case(rng)
    uv = uv + rng.normal(0, 0.5, uv.shape)
    start = Pose(pose.rotation, pose.translation + [0.02, -0.01, 0.05])
    before = reprojection_rms(start, box.corners, uv, K)
    refined, rms = refine_pnp_lm(start, box.corners, uv, K)
    assert rms <= before
    assert rms == pytest.approx(reprojection_rms(refined, box.corners, uv, K))
    assert rms < 1.0


def test_weights_downweight_outlier():
    rng = np.random.default_rng(5)
    box, pose, uv = random_case(rng)
    bad = uv.copy()
    bad[2] += [40.0, -30.0]
    w = np.ones(8)
    w[2] = 1e-6
    est, _ = estimate_pose(bad, w, box, K)
    assert rotation_error(est.rotation, pose.rotation) < 1e-3


def test_min_conf_gate():
    rng = np.random.default_rng(6)
    box, pose, uv = random_case(rng)
    conf = np.array([1, 1, 1, 1, 1, 1, 0.1, 0.1])
    est, _ = estimate_pose(uv, conf, box, K, min_conf=0.5)
    assert rotation_error(est.rotation, pose.rotation) < 1e-6
    conf[5] = 0.1
    with pytest.raises(InsufficientCorrespondencesError):
        estimate_pose(uv, conf, box, K, min_conf=0.5)


def test_accepts_corners2d():
    box, pose, uv = random_case(np.random.default_rng(7))
    est, rms = estimate_pose(Corners2D.from_points(uv, (480, 640)), np.ones(8), box, K)
    assert rms < 1e-6


def test_collinear_points_degenerate():
    box, _, _ = random_case(np.random.default_rng(8))
    uv = np.stack([np.linspace(100, 200, 8), np.linspace(50, 150, 8)], 1)
    with pytest.raises(DegenerateConfigurationError):
        solve_pnp_dlt(box.corners, uv, K)


def test_planar_3d_points_degenerate():
    rng = np.random.default_rng(2)
    X = np.column_stack([rng.normal(size=(8, 2)), np.zeros(8)])
    uv = rng.uniform(0, 400, (8, 2))
    with pytest.raises(DegenerateConfigurationError):
        solve_pnp_dlt(X, uv, K)


def test_too_few_points():
    with pytest.raises(InsufficientCorrespondencesError):
        solve_pnp_dlt(np.zeros((5, 3)), np.zeros((5, 2)), K)
