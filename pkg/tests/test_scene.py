import numpy as np
import pytest

from cornerpose.geom3d import BoundingBox3D, Pose, project_corners
from cornerpose.scene import (
    GenConfig,
    _is_symmetric,
    cuboid_corners,
    generate_scene,
    look_at_pose,
    max_pairwise_distance,
    render_cuboid,
    sample_appearance,
    sample_surface,
    scene_rng,
)


@pytest.fixture(scope="module")
def scene():
    return generate_scene(scene_rng(0, 0))


def test_gen_config_validation():
    with pytest.raises(ValueError):
        GenConfig(n_refs=(0, 3))
    with pytest.raises(ValueError):
        GenConfig(n_refs=(2, 16))
    cfg = GenConfig.from_dict({"n_refs": [2, 4], "image_size": [32, 48]})
    assert cfg.n_refs == (2, 4)
    k = cfg.intrinsics()
    assert (k.width, k.height, k.cx, k.cy) == (48, 32, 23.5, 15.5)


def test_look_at_pose_centers_target():
    target = np.array([0.1, -0.2, 0.3])
    pose = look_at_pose(np.array([1.0, 2.0, -0.5]), target, roll=0.4)
    cam = pose.apply(target)
    np.testing.assert_allclose(cam[:2], 0.0, atol=1e-12)
    assert cam[2] > 0


def test_scene_consistency(scene):
    scene.validate()
    assert len(scene.references) == 8
    assert scene.query.image.dtype == np.uint8
    assert scene.query.image.shape == (64, 64, 3)
    # box is fit to the centered cloud: centroid at the origin
    np.testing.assert_allclose(scene.cloud.mean(0), 0.0, atol=1e-12)
    np.testing.assert_allclose(np.sort(scene.box.corners.max(0) - scene.box.corners.min(0)), np.sort(scene.extents), rtol=1e-9)
    assert scene.diameter == pytest.approx(np.linalg.norm(scene.extents), rel=1e-9)


def test_gt_corners_inside_margin(scene):
    uv = scene.gt_corners2d.points
    assert uv.min() >= 4.0 - 1e-9 and uv.max() <= 63 - 4.0 + 1e-9
    assert scene.gt_corners2d.visibility.all()


def test_silhouette_matches_projected_hull(scene):
    # every silhouette pixel lies within the corner rectangle
    rows, cols = np.nonzero(scene.query.silhouette)
    x0, y0, x1, y1 = scene.query.mask.rect
    assert cols.min() >= np.floor(x0) and cols.max() <= np.ceil(x1)
    assert rows.min() >= np.floor(y0) and rows.max() <= np.ceil(y1)
    assert scene.query.silhouette.sum() > 20


def test_generation_deterministic():
    a = generate_scene(scene_rng(5, 3))
    b = generate_scene(scene_rng(5, 3))
    assert np.array_equal(a.query.image, b.query.image)
    np.testing.assert_array_equal(a.cloud, b.cloud)
    c = generate_scene(scene_rng(5, 4))
    assert not np.array_equal(a.query.image, c.query.image)


def test_symmetric_flag():
    assert _is_symmetric(np.array([0.1, 0.2, 0.1]))
    assert not _is_symmetric(np.array([0.1, 0.2, 0.3]))
    cfg = GenConfig(square_prob=1.0, n_points=64)
    assert generate_scene(scene_rng(1, 0), cfg).symmetric


def test_sample_surface_on_faces():
    ext = np.array([0.2, 0.1, 0.3])
    pts = sample_surface(ext, 200, np.random.default_rng(0))
    half = ext / 2
    on_face = np.isclose(np.abs(pts), half, atol=1e-12).any(axis=1)
    assert on_face.all()
    assert np.all(np.abs(pts) <= half + 1e-12)
    # corners are included so the fitted box is exact
    for c in cuboid_corners(ext):
        assert np.any(np.all(np.isclose(pts, c), axis=1))


def test_max_pairwise_distance_bruteforce():
    pts = np.random.default_rng(2).normal(size=(40, 3))
    brute = max(np.linalg.norm(a - b) for a in pts for b in pts)
    assert max_pairwise_distance(pts) == pytest.approx(brute)


def test_render_cuboid_face_on_is_convex_quad():
    ext = np.array([0.2, 0.2, 0.2])
    from cornerpose.geom3d import Intrinsics

    k = Intrinsics(90.0, 90.0, 31.5, 31.5, 64, 64)
    pose = Pose(np.eye(3), [0, 0, 1.0])
    img, sil = render_cuboid(ext, sample_appearance(np.random.default_rng(0)), pose, k, 0.1)
    uv = project_corners(pose, k, BoundingBox3D(cuboid_corners(ext)))
    lo, hi = uv.min(0), uv.max(0)
    rows, cols = np.nonzero(sil)
    assert cols.min() >= np.floor(lo[0]) and cols.max() <= np.ceil(hi[0])
    assert rows.min() >= np.floor(lo[1]) and rows.max() <= np.ceil(hi[1])
    assert np.all(img[~sil] == pytest.approx(0.1))


def test_look_at_roll_zero_is_upright():
    pose = look_at_pose(np.array([1.0, 0.0, 0.5]), np.zeros(3), roll=0.0)
    top, bottom = pose.apply(np.array([[0, 0, 0.1], [0, 0, -0.1]]))
    assert top[1] / top[2] < bottom[1] / bottom[2]  # image rows grow downward


def test_camera_elevation_band():
    cfg = GenConfig(elevation_range=(20.0, 40.0), n_points=64)
    s = generate_scene(scene_rng(3, 0), cfg)
    for v in [s.query, *s.references]:
        d = v.pose.center - s.box.center  # cameras aim at the object center up to small jitter
        el = np.degrees(np.arcsin(d[2] / np.linalg.norm(d)))
        assert 20.0 - 5 <= el <= 40.0 + 5
    with pytest.raises(ValueError):
        GenConfig(elevation_range=(10.0, 95.0))


def test_cloud_survives_own_reference_masks(scene):
    from cornerpose.geom3d import visible_in_views

    views = [(v.pose, scene.intrinsics, v.mask) for v in scene.references]
    assert visible_in_views(scene.cloud, views).all()


def test_masks_nonempty_inside_image(scene):
    for v in [scene.query, *scene.references]:
        x0, y0, x1, y1 = v.mask.rect
        assert 0 <= x0 < x1 <= 63 and 0 <= y0 < y1 <= 63
        assert v.silhouette.any()


def test_visible_corners_match_rendered_pixels():
    # conservative rasterization: the pixel containing an outline corner is filled
    worst = 0.0
    for i in range(30):
        s = generate_scene(scene_rng(12, i))
        uv = s.gt_corners2d.points
        rows, cols = np.nonzero(s.query.silhouette)
        from scipy.spatial import ConvexHull

        hull = ConvexHull(uv).vertices
        for c in uv[hull]:
            cheb = np.maximum(np.abs(cols - c[0]), np.abs(rows - c[1])).min()
            worst = max(worst, cheb)
    assert worst <= 0.5
