import numpy as np
import pytest

from cornerpose.geom3d import BOX_EDGES, Pose, project_corners, rodrigues
from cornerpose.overlay import BLUE, GREEN, box_edge_segments, line_pixels, read_ppm, render_overlay, write_ppm
from cornerpose.plotting import accuracy_curves, corner_error_histogram, loss_curve, metric_bars
from cornerpose.scene import generate_scene, scene_rng


@pytest.fixture(scope="module")
def scene():
    return generate_scene(scene_rng(4, 0))


def colored(img, color):
    return np.all(img == color, axis=2)


def test_line_pixels_endpoints_and_connectivity():
    px = line_pixels([1.4, 2.6], [9.2, 5.0])
    assert px[0].tolist() == [1, 3] and px[-1].tolist() == [9, 5]
    steps = np.abs(np.diff(px, axis=0))
    assert steps.max() == 1
    assert line_pixels([3, 3], [3.2, 2.9]).tolist() == [[3, 3]]


def test_endpoints_are_rounded_projections(scene):
    uv = project_corners(scene.query.pose, scene.intrinsics, scene.box)
    segs = box_edge_segments(scene.query.pose, scene.intrinsics, scene.box)
    assert len(segs) == 12
    for (i, j), (a, b) in zip(BOX_EDGES, segs):
        px = line_pixels(a, b)
        assert px[0].tolist() == np.round(uv[i]).astype(int).tolist()
        assert px[-1].tolist() == np.round(uv[j]).astype(int).tolist()


def test_pred_equal_gt_overlaps(scene):
    img = render_overlay(scene.query.image, scene.intrinsics, scene.box, scene.query.pose, scene.query.pose)
    assert img.shape == scene.query.image.shape
    green_only = render_overlay(scene.query.image, scene.intrinsics, scene.box, scene.query.pose, None)
    # blue is drawn last, so identical poses leave no green pixel
    assert colored(img, GREEN).sum() == 0
    np.testing.assert_array_equal(colored(img, BLUE), colored(green_only, GREEN))


def test_small_pose_change_stays_within_one_pixel(scene):
    gt = scene.query.pose
    pred = Pose(rodrigues([1e-4, 0, 0]) @ gt.rotation, gt.translation)
    img = render_overlay(scene.query.image, scene.intrinsics, scene.box, gt, pred)
    green = colored(render_overlay(scene.query.image, scene.intrinsics, scene.box, gt, None), GREEN)
    by, bx = np.nonzero(colored(img, BLUE))
    gy, gx = np.nonzero(green)
    cheb = np.maximum(np.abs(by[:, None] - gy[None]), np.abs(bx[:, None] - gx[None])).min(axis=1)
    # line rasterization is quantized to whole pixels
    assert cheb.max() <= 1


def test_behind_camera_is_clipped_not_fatal(scene):
    # camera sitting inside the box: some corners behind
    pose = Pose(np.eye(3), [0.0, 0.0, 0.01])
    img = render_overlay(scene.query.image, scene.intrinsics, scene.box, scene.query.pose, pose)
    assert img.shape == (64, 64, 3)


def test_ppm_roundtrip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (5, 7, 3), dtype=np.uint8)
    p = tmp_path / "a.ppm"
    write_ppm(p, img)
    assert p.read_bytes().startswith(b"P6\n7 5\n255\n")
    np.testing.assert_array_equal(read_ppm(p), img)
    first = p.read_bytes()
    write_ppm(p, read_ppm(p))
    assert p.read_bytes() == first


def test_figures_are_deterministic(tmp_path):
    rows = [(i, 1e-3, 1.0 / (i + 1), 0.1 / (i + 1), 1.2 / (i + 1)) for i in range(20)]
    a = loss_curve(rows, tmp_path / "a.png").read_bytes()
    b = loss_curve(rows, tmp_path / "b.png").read_bytes()
    assert a == b and a[:8] == b"\x89PNG\r\n\x1a\n"
    accuracy_curves({"ADD": [0.01, 0.05, np.inf]}, 0.1, tmp_path / "c.png")
    corner_error_histogram([0.5, 1.0, np.inf], tmp_path / "d.png")
    metric_bars({"clean": {"x": 0.5}, "occluded": {"x": 0.3}}, ["x"], tmp_path / "e.png")
    assert all((tmp_path / f"{n}.png").stat().st_size > 0 for n in "cde")
