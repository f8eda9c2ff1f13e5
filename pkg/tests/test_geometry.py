import numpy as np
import pytest

from camfield.geometry import (Camera, Ray, all_pixel_rays, generate_rays,
                               look_at_rotation, pixel_directions, project,
                               project_with_grad, ray_box_interval)
from conftest import axis_camera, make_camera


class TestGenerateRays:
    def test_principal_point_gives_optical_axis(self):
        # principal point placed exactly on the center of pixel (15, 15)
        cam = Camera(id="pp", agent_id="a",
                     position=np.array([1.0, -2.0, 0.5]),
                     rotation=look_at_rotation([1.0, -2.0, 0.5], [4.0, 3.0, 1.0]),
                     fx=40.0, fy=40.0, cx=15.5, cy=15.5, width=32, height=32)
        ray = generate_rays(cam, [(15, 15)])[0]
        np.testing.assert_allclose(ray.direction, cam.optical_axis, atol=1e-12)

    def test_directions_unit_norm(self):
        cam = make_camera()
        rays = generate_rays(cam, [(r, c) for r in (0, 10, 31) for c in (0, 17, 31)])
        for ray in rays:
            assert abs(np.linalg.norm(ray.direction) - 1.0) < 1e-12

    def test_corner_pixel_back_projection(self):
        # focal 100, principal point (32, 32), 64x64: pixel (0,0) center is
        # (0.5, 0.5), so the camera-frame direction is K^-1 (0.5, 0.5, 1)
        cam = axis_camera(focal=100.0, width=64, height=64)
        ray = generate_rays(cam, [(0, 0)])[0]
        expected = np.array([(0.5 - 32.0) / 100.0, (0.5 - 32.0) / 100.0, 1.0])
        expected /= np.linalg.norm(expected)
        np.testing.assert_allclose(ray.direction, expected, atol=1e-12)

    def test_rotated_camera_back_projection(self):
        cam = make_camera(position=(0.0, 0.0, 2.0), target=(3.0, 1.0, 0.0),
                          focal=50.0)
        ray = generate_rays(cam, [(3, 29)])[0]
        d_cam = np.array([(29.5 - cam.cx) / cam.fx, (3.5 - cam.cy) / cam.fy, 1.0])
        expected = cam.rotation @ d_cam
        expected /= np.linalg.norm(expected)
        np.testing.assert_allclose(ray.direction, expected, atol=1e-12)

    def test_origin_is_camera_center(self):
        cam = make_camera(position=(2.0, 3.0, 4.0))
        ray = generate_rays(cam, [(5, 5)])[0]
        np.testing.assert_array_equal(ray.origin, cam.position)

    def test_pixel_out_of_bounds_rejected(self):
        cam = make_camera()
        with pytest.raises(ValueError):
            generate_rays(cam, [(0, 32)])
        with pytest.raises(ValueError):
            generate_rays(cam, [(-1, 0)])

    def test_all_pixel_rays_row_major(self):
        cam = axis_camera(width=4, height=3)
        origins, dirs = all_pixel_rays(cam)
        assert origins.shape == (12, 3) and dirs.shape == (12, 3)
        one = pixel_directions(cam, np.array([1]), np.array([2]))
        np.testing.assert_allclose(dirs[1 * 4 + 2], one[0])


class TestRayValidation:
    def test_non_unit_direction_rejected(self):
        with pytest.raises(ValueError):
            Ray(origin=[0, 0, 0], direction=[1.0, 0.0, 1.0], near=0.1, far=2.0,
                pixel=(0, 0))

    def test_bad_interval_rejected(self):
        with pytest.raises(ValueError):
            Ray(origin=[0, 0, 0], direction=[0.0, 0.0, 1.0], near=2.0, far=1.0,
                pixel=(0, 0))


class TestCamera:
    def test_rotation_must_be_orthonormal(self):
        with pytest.raises(ValueError):
            Camera(id="x", agent_id="a", position=np.zeros(3),
                   rotation=np.eye(3) * 2.0, fx=10, fy=10,
                   cx=8, cy=8, width=16, height=16)

    def test_focal_and_principal_point_validated(self):
        with pytest.raises(ValueError):
            Camera(id="x", agent_id="a", position=np.zeros(3),
                   rotation=np.eye(3), fx=-1.0, fy=10, cx=8, cy=8,
                   width=16, height=16)
        with pytest.raises(ValueError):
            Camera(id="x", agent_id="a", position=np.zeros(3),
                   rotation=np.eye(3), fx=10, fy=10, cx=99.0, cy=8,
                   width=16, height=16)

    def test_look_at_rotation_proper(self):
        R = look_at_rotation([0, 0, 0], [1, 2, 3])
        np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(R) > 0.999


class TestProject:
    def test_optical_axis_maps_to_principal_point(self):
        cam = make_camera(position=(1.0, 1.0, 1.0), target=(2.0, 5.0, 0.0))
        x = cam.position + 3.7 * cam.optical_axis
        np.testing.assert_allclose(project(x, cam), [cam.cx, cam.cy], atol=1e-9)

    def test_perspective_division_halves_offset(self):
        cam = axis_camera(focal=80.0)
        near = project(np.array([0.4, 0.0, 2.0]), cam)
        far = project(np.array([0.4, 0.0, 4.0]), cam)
        np.testing.assert_allclose(far[0] - cam.cx, (near[0] - cam.cx) / 2.0,
                                   atol=1e-12)

    def test_hand_computed_pixel(self):
        # axis-aligned camera at (1, 2, 3), focal 50, pp (16, 16)
        cam = axis_camera(position=(1.0, 2.0, 3.0), focal=50.0,
                          width=32, height=32)
        X = np.array([2.0, 1.0, 7.0])          # p_cam = (1, -1, 4)
        uv = project(X, cam)
        np.testing.assert_allclose(uv, [50.0 * 1 / 4 + 16, 50.0 * -1 / 4 + 16],
                                   atol=1e-12)

    def test_point_behind_camera_rejected(self):
        cam = axis_camera()
        with pytest.raises(ValueError):
            project(np.array([0.0, 0.0, -1.0]), cam)

    def test_projection_jacobian_matches_fd(self):
        cam = make_camera(position=(0.5, -1.0, 2.0), target=(1.0, 4.0, 1.0))
        rng = np.random.default_rng(11)
        x = cam.position + 2.0 * cam.optical_axis + rng.normal(0, 0.3, (5, 3))
        uv, J = project_with_grad(x, cam)
        h = 1e-6
        for a in range(3):
            e = np.zeros(3)
            e[a] = h
            fd = (project(x + e, cam) - project(x - e, cam)) / (2 * h)
            np.testing.assert_allclose(J[..., a], fd, atol=1e-5)


class TestRayBoxInterval:
    def test_inside_origin(self):
        t0, t1 = ray_box_interval(np.zeros((1, 3)), np.array([[0.0, 0.0, 1.0]]),
                                  np.array([-1.0, -1.0, -1.0]), np.array([1.0, 1.0, 1.0]))
        assert t0[0] <= 0.0 and np.isclose(t1[0], 1.0)

    def test_lateral_miss(self):
        t0, t1 = ray_box_interval(np.array([[0.0, 5.0, 0.0]]),
                                  np.array([[0.0, 0.0, 1.0]]),
                                  np.array([-1.0, -1.0, -1.0]), np.array([1.0, 1.0, 1.0]))
        assert t0[0] > t1[0]
