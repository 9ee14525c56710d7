import os

import numpy as np
import pytest

from supernerf import scene
from supernerf.errors import ConfigurationError, DataIOError, ShapeError
from supernerf.scene import (CameraPose, GroundPlane, SceneSpec, Sphere, box_downsample,
                             generate_rays, generate_synthetic_scene, load_dataset,
                             look_at_pose, replicate_upsample, save_dataset, trace_rays)


def two_sphere_spec():
    return SceneSpec(
        spheres=(
            Sphere((-0.5, 0.0, 0.0), 0.5, (0.8, 0.3, 0.2)),
            Sphere((0.6, 0.0, 0.3), 0.35, (0.2, 0.5, 0.9)),
        ),
        plane=None,
    )


def dense_march_oracle(spec, origin, direction, near, far, step=2e-4):
    """Reference ray marcher: fine stepping to the first sphere crossing."""
    ts = np.arange(near, far, step)
    points = origin[None, :] + ts[:, None] * direction[None, :]
    for sph in spec.spheres:
        c = np.asarray(sph.center)
        inside = np.linalg.norm(points - c, axis=-1) < sph.radius
        if inside.any():
            t_hit = ts[np.argmax(inside)]
            p = origin + t_hit * direction
            normal = (p - c) / np.linalg.norm(p - c)
            light = np.asarray(spec.light_dir, dtype=float)
            light /= np.linalg.norm(light)
            lam = max(0.0, float(normal @ light))
            albedo = np.asarray(sph.albedo)
            return np.clip(albedo * (spec.ambient + (1 - spec.ambient) * lam), 0, 1), t_hit
    return np.zeros(3), np.inf


class TestSyntheticScene:
    def test_deterministic_for_seed(self):
        a = generate_synthetic_scene(two_sphere_spec(), 8, 0, 64, 64, 4)
        b = generate_synthetic_scene(two_sphere_spec(), 8, 0, 64, 64, 4)
        for va, vb in zip(a.views, b.views):
            assert np.array_equal(va.image, vb.image)
            assert np.array_equal(va.pose.position, vb.pose.position)

    def test_seed_changes_output(self):
        a = generate_synthetic_scene(two_sphere_spec(), 8, 0, 64, 64, 4)
        b = generate_synthetic_scene(two_sphere_spec(), 8, 1, 64, 64, 4)
        assert not np.array_equal(a.views[0].pose.position, b.views[0].pose.position)

    def test_minimum_views(self):
        with pytest.raises(ConfigurationError):
            generate_synthetic_scene(two_sphere_spec(), 1, 0)

    def test_empty_scene_rejected(self):
        with pytest.raises(ConfigurationError):
            generate_synthetic_scene(SceneSpec(spheres=()), 4, 0)

    def test_degenerate_ring_rejected(self):
        bad = SceneSpec(spheres=two_sphere_spec().spheres, ring_radius=0.0)
        with pytest.raises(ConfigurationError):
            generate_synthetic_scene(bad, 4, 0)

    def test_shading_matches_dense_marcher_oracle(self):
        # ray through the pixel nearest the projection of sphere 1's center
        spec = two_sphere_spec()
        ds = generate_synthetic_scene(spec, 8, 0, 96, 96, 4)
        view = ds.views[0]
        center = np.asarray(spec.spheres[0].center)
        cam = view.pose.orientation @ (center - view.pose.position)
        u = view.pose.width / 2 + view.pose.focal * cam[0] / -cam[2]
        v = view.pose.height / 2 - view.pose.focal * cam[1] / -cam[2]
        px, py = int(u), int(v)
        rays = generate_rays(view.pose, 96, 96)
        ray_idx = py * 96 + px
        expected, _ = dense_march_oracle(spec, rays.origins[ray_idx],
                                         rays.directions[ray_idx],
                                         view.pose.near, view.pose.far)
        assert np.max(np.abs(view.image[py, px] - expected)) < 5e-3


class TestBoxDownsample:
    def test_constant_block(self):
        img = np.ones((4, 4, 3))
        assert np.array_equal(box_downsample(img, 4), np.ones((1, 1, 3)))

    def test_one_hot_mean(self):
        img = np.zeros((4, 4, 3))
        img[1, 2, :] = 1.0
        out = box_downsample(img, 4)
        assert np.allclose(out, 1.0 / 16)

    def test_divisibility(self):
        with pytest.raises(ShapeError):
            box_downsample(np.zeros((4, 4, 3)), 3)

    def test_replicate_is_right_inverse(self):
        rng = np.random.default_rng(0)
        x = rng.random((6, 5, 3))
        assert np.allclose(box_downsample(replicate_upsample(x, 4), 4), x)


class TestRays:
    def pose(self, w=101, h=101, focal=100.0):
        return look_at_pose((0, 0, 4), (0, 0, 0), focal, w, h, 1.0, 8.0)

    def test_center_pixel_is_optical_axis(self):
        pose = self.pose()
        rays = generate_rays(pose, 101, 101)
        center = rays.directions[50 * 101 + 50]
        axis = -pose.orientation[2]  # camera -z in world coords
        assert np.allclose(center, axis, atol=1e-9)

    def test_corner_pixel_pinhole_oracle(self):
        pose = look_at_pose((0, 0, 4), (0, 0, 0), 100.0, 100, 100, 1.0, 8.0)
        rays = generate_rays(pose, 100, 100)
        d = rays.directions[0]  # pixel (0, 0), center (0.5, 0.5)
        # independent pinhole formula: tan of the off-axis angles
        expect_cam = np.array([(0.5 - 50.0) / 100.0, (50.0 - 0.5) / 100.0, -1.0])
        expect = expect_cam @ pose.orientation
        expect /= np.linalg.norm(expect)
        assert np.allclose(d, expect, atol=1e-12)

    def test_unit_norm(self):
        rays = generate_rays(self.pose(), 33, 47)
        assert np.allclose(np.linalg.norm(rays.directions, axis=-1), 1.0, atol=1e-6)

    def test_grid_refinement_brackets_original(self):
        pose = self.pose(w=16, h=16, focal=20.0)
        lo = generate_rays(pose, 16, 16)
        hi = generate_rays(pose, 64, 64)
        # the 4x4 block of HR rays covering LR pixel (7, 7)
        block = hi.directions.reshape(64, 64, 3)[28:32, 28:32].reshape(-1, 3)
        original = lo.directions.reshape(16, 16, 3)[7, 7]
        assert block.mean(axis=0) @ original > np.cos(np.radians(2.0))
        dots = block @ original
        assert dots.min() > np.cos(np.radians(4.0))

    def test_pixel_center_alignment_across_scales(self):
        pose = self.pose(w=16, h=16, focal=20.0)
        lo = generate_rays(pose, 16, 16)
        hi = generate_rays(pose, 64, 64)
        hi_uv = hi.pixel_coords.reshape(64, 64, 2)
        block_means = hi_uv.reshape(16, 4, 16, 4, 2).mean(axis=(1, 3)) / 4.0
        assert np.max(np.abs(block_means - lo.pixel_coords.reshape(16, 16, 2))) < 1e-9

    def test_bad_target_resolution(self):
        with pytest.raises(ConfigurationError):
            generate_rays(self.pose(), 0, 10)


class TestPoseValidation:
    def test_non_orthonormal_rejected(self):
        R = np.eye(3)
        R[0, 1] = 0.01
        with pytest.raises(ConfigurationError):
            CameraPose(np.zeros(3), R, 50.0, 32, 32, 1.0, 5.0)

    def test_near_far_ordering(self):
        with pytest.raises(ConfigurationError):
            CameraPose(np.zeros(3), np.eye(3), 50.0, 32, 32, 5.0, 1.0)

    def test_minimum_size(self):
        with pytest.raises(ConfigurationError):
            CameraPose(np.zeros(3), np.eye(3), 50.0, 4, 32, 1.0, 5.0)


class TestDatasetIO:
    def test_roundtrip_8bit(self, tmp_path):
        ds = generate_synthetic_scene(two_sphere_spec(), 4, 0, 32, 32, 4)
        save_dataset(ds, str(tmp_path / "d"))
        back = load_dataset(str(tmp_path / "d"))
        assert back.scale_factor == 4 and back.n_views == 4
        for a, b in zip(ds.views, back.views):
            assert a.tag == b.tag
            assert np.max(np.abs(a.image - b.image)) <= 0.5 / 255 + 1e-9
            assert np.allclose(a.pose.position, b.pose.position, atol=1e-7)
            assert np.allclose(a.pose.orientation, b.pose.orientation, atol=1e-8)
            assert abs(a.pose.focal - b.pose.focal) < 1e-6

    def test_roundtrip_16bit_gradient(self, tmp_path):
        ds = generate_synthetic_scene(two_sphere_spec(), 2, 0, 16, 16, 4)
        grad = np.linspace(0, 1, 16 * 16 * 3).reshape(16, 16, 3)
        ds.views[0].image[:] = grad
        save_dataset(ds, str(tmp_path / "d"), bit_depth=16)
        back = load_dataset(str(tmp_path / "d"))
        assert np.max(np.abs(back.views[0].image - grad)) <= 1.0 / 65535 + 1e-12

    def test_truncated_file(self, tmp_path):
        ds = generate_synthetic_scene(two_sphere_spec(), 2, 0, 16, 16, 4)
        save_dataset(ds, str(tmp_path / "d"))
        poses = tmp_path / "d" / "poses.txt"
        poses.write_text(poses.read_text()[: len(poses.read_text()) // 2])
        with pytest.raises(DataIOError):
            load_dataset(str(tmp_path / "d"))

    def test_missing_image(self, tmp_path):
        ds = generate_synthetic_scene(two_sphere_spec(), 2, 0, 16, 16, 4)
        save_dataset(ds, str(tmp_path / "d"))
        os.remove(tmp_path / "d" / "view_1.png")
        with pytest.raises(DataIOError, match="view_1"):
            load_dataset(str(tmp_path / "d"))

    def test_bad_tag(self, tmp_path):
        ds = generate_synthetic_scene(two_sphere_spec(), 2, 0, 16, 16, 4)
        save_dataset(ds, str(tmp_path / "d"))
        poses = tmp_path / "d" / "poses.txt"
        poses.write_text(poses.read_text().replace(" HR ", " XX ", 1))
        with pytest.raises(DataIOError, match="tag"):
            load_dataset(str(tmp_path / "d"))

    def test_missing_dir(self, tmp_path):
        with pytest.raises(DataIOError):
            load_dataset(str(tmp_path / "absent"))
