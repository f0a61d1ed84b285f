import numpy as np
import pytest

from bevterrain import synth
from bevterrain.geometry import PointCloud, RigidTransform
from bevterrain.grid import GridSpec
from bevterrain.pseudo_label import VOID, paint_points


@pytest.fixture(scope="module")
def scene():
    return synth.gen_scene(synth.scene_spec_for(3), 5, seed=4, frames=3)


def flat_scene(height=0.0, K=3):
    spec = GridSpec(0.5, -50.0, -50.0, 200, 200)
    heights = np.full(spec.shape, height)
    classes = np.zeros(spec.shape, dtype=np.uint8)
    pose = RigidTransform.identity("ego", "world")
    return synth.Scene(spec, heights, classes, [pose], K, seed=0)


class TestScene:
    def test_same_seed_same_scene(self, scene):
        again = synth.gen_scene(synth.scene_spec_for(3), 5, seed=4, frames=3)
        assert np.array_equal(scene.heights, again.heights)
        assert np.array_equal(scene.classes, again.classes)
        assert all(np.array_equal(a.matrix(), b.matrix()) for a, b in zip(scene.poses, again.poses))

    def test_different_seeds_differ(self, scene):
        other = synth.gen_scene(synth.scene_spec_for(3), 5, seed=5, frames=3)
        assert not np.array_equal(scene.heights, other.heights)

    def test_heights_in_range(self, scene):
        assert np.all(np.isfinite(scene.heights))
        assert scene.heights.min() >= 0.0 and scene.heights.max() <= 2.0

    @pytest.mark.parametrize("seed", range(5))
    def test_several_classes(self, seed):
        s = synth.gen_scene(synth.scene_spec_for(2), 5, seed=seed, frames=2)
        assert len(np.unique(s.classes)) >= 2
        assert s.classes.max() < 5

    def test_needs_two_classes(self):
        with pytest.raises(ValueError):
            synth.gen_scene(synth.scene_spec_for(2), 1, seed=0, frames=2)

    def test_poses_follow_the_trail(self, scene):
        for pose in scene.poses:
            x, y, _ = pose.translation
            assert scene.class_at(np.array([x]), np.array([y]))[0] == 0

    def test_height_outside_is_nan(self, scene):
        assert np.isnan(scene.height_at(np.array([-1e4]), np.array([0.0])))[0]


class TestMarch:
    def test_downward_ray_hits_flat_ground(self):
        s = flat_scene(0.0)
        t = synth.march(s, np.array([[0.3, 0.2, 1.8]]), np.array([[0.0, 0.0, -1.0]]), 60.0)
        assert abs(t[0] - 1.8) <= synth.MARCH_STEP

    def test_slanted_ray_on_flat_ground_is_exact(self):
        # linear interpolation of a linear height gap recovers the exact crossing
        s = flat_scene(0.5)
        d = np.array([[1.0, 0.0, -1.0]]) / np.sqrt(2)
        t = synth.march(s, np.array([[0.0, 0.0, 2.0]]), d, 60.0)
        assert t[0] == pytest.approx(1.5 * np.sqrt(2), abs=1e-9)

    def test_upward_ray_misses(self):
        t = synth.march(flat_scene(), np.array([[0.0, 0.0, 1.0]]), np.array([[0.0, 0.6, 0.8]]), 60.0)
        assert np.isnan(t[0])

    def test_kernel_matches_reference(self, scene):
        rng = np.random.Generator(np.random.PCG64(0))
        pose = scene.poses[1]
        dirs = synth.lidar_directions(8, 64) @ pose.rotation.T
        origin = pose.apply(np.array(synth.LIDAR_MOUNT))
        extra = rng.normal(size=(200, 3))
        extra[:, 2] = -np.abs(extra[:, 2])
        extra /= np.linalg.norm(extra, axis=1, keepdims=True)
        dirs = np.vstack([dirs, extra])
        fast = synth.march(scene, origin, dirs, 60.0)
        slow = synth.march_reference(scene, origin, dirs, 60.0)
        assert np.array_equal(np.isnan(fast), np.isnan(slow))
        assert np.array_equal(fast[~np.isnan(fast)], slow[~np.isnan(slow)])


class TestLidar:
    def test_noiseless_sweeps_identical(self, scene):
        a = synth.simulate_lidar(scene, scene.poses[0], rings=8, beams=64)
        b = synth.simulate_lidar(scene, scene.poses[0], rings=8, beams=64)
        assert np.array_equal(a.points, b.points)
        assert np.array_equal(a.intensity, b.intensity)

    def test_points_lie_on_heightfield(self, scene):
        pose = scene.poses[2]
        pc = synth.simulate_lidar(scene, pose)
        assert len(pc) > 5000
        w = pose.apply(pc.points)
        assert np.all(np.abs(scene.height_at(w[:, 0], w[:, 1]) - w[:, 2]) <= 0.1)

    def test_ranges_bounded(self, scene):
        hits = synth.cast_lidar(scene, scene.poses[0], rings=8, beams=64)
        assert np.all(hits.ranges <= 60.0)
        assert np.allclose(np.linalg.norm(hits.points - synth.LIDAR_MOUNT, axis=1), hits.ranges)

    def test_intensity_by_class(self, scene):
        hits = synth.cast_lidar(scene, scene.poses[0], rings=8, beams=64)
        pc = synth.hits_to_cloud(hits, 5, 0.0, None)
        assert np.array_equal(pc.intensity, np.array(synth.CLASS_INTENSITY)[hits.classes])
        assert np.all((pc.intensity >= 0) & (pc.intensity <= 1))

    def test_noise_is_seeded(self, scene):
        a = synth.simulate_lidar(scene, scene.poses[0], rings=8, beams=64, noise_sigma=0.05, seed=1)
        b = synth.simulate_lidar(scene, scene.poses[0], rings=8, beams=64, noise_sigma=0.05, seed=1)
        c = synth.simulate_lidar(scene, scene.poses[0], rings=8, beams=64, noise_sigma=0.05, seed=2)
        assert np.array_equal(a.points, b.points)
        assert not np.array_equal(a.points, c.points)


def small_camera():
    return synth.default_camera(64, 32)


class TestCamera:
    def test_noiseless_is_one_hot(self, scene):
        img = synth.render_semantic(scene, scene.poses[0], small_camera(), 0.0)
        classes = synth.render_classes(scene, scene.poses[0], small_camera())
        hit = classes >= 0
        assert hit.any()
        assert np.all(img.probs.max(axis=0)[hit] == 1.0)
        assert np.array_equal(img.probs.argmax(axis=0)[hit], classes[hit])

    def test_sky_is_uniform(self):
        cam = synth.default_camera(64, 32, pitch_deg=-60.0)
        s = flat_scene()
        img = synth.render_semantic(s, s.poses[0], cam, 0.0)
        assert np.all(img.probs == 1.0 / 3)

    def test_full_noise_changes_every_pixel(self, scene):
        classes = synth.render_classes(scene, scene.poses[0], small_camera())
        img = synth.render_semantic(scene, scene.poses[0], small_camera(), 1.0, seed=3)
        hit = classes >= 0
        assert not np.any(img.probs.argmax(axis=0)[hit] == classes[hit])
        assert np.all(img.probs.max(axis=0)[hit] == 1.0)

    def test_noise_rate_roughly_matches(self, scene):
        classes = synth.render_classes(scene, scene.poses[0], synth.default_camera())
        img = synth.render_semantic(scene, scene.poses[0], synth.default_camera(), 0.3, seed=5)
        hit = classes >= 0
        rate = np.mean(img.probs.argmax(axis=0)[hit] != classes[hit])
        n = hit.sum()
        assert abs(rate - 0.3) < 4 * np.sqrt(0.21 / n)

    def test_default_camera_geometry(self):
        cam = synth.default_camera()
        assert (cam.width, cam.height, cam.fx) == (640, 320, 320.0)
        # the optical axis points forward and down
        ego_from_cam = np.linalg.inv(cam.cam_from_ego.matrix())
        axis = ego_from_cam[:3, :3] @ [0, 0, 1]
        assert axis[0] > 0.9 and axis[2] < 0


class TestCorrupt:
    def test_rate_zero(self):
        pc = PointCloud(np.ones((10, 3)))
        assert len(synth.corrupt(pc, 0.0)) == 10

    def test_rate_one(self):
        assert len(synth.corrupt(PointCloud(np.ones((10, 3))), 1.0)) == 0

    def test_invalid_rate(self):
        with pytest.raises(ValueError):
            synth.corrupt(PointCloud(np.ones((1, 3))), 1.5)

    def test_binomial_survivors(self):
        n, rate = 2000, 0.3
        pc = PointCloud(np.zeros((n, 3)))
        sd = np.sqrt(n * rate * (1 - rate))
        for seed in range(20):
            kept = len(synth.corrupt(pc, rate, seed))
            assert abs(kept - n * (1 - rate)) <= 3 * sd


class TestDatasetBuilders:
    def test_painting_agrees_with_truth(self, sims):
        sim = sims.get(0)
        ds = synth.degrade(sim)
        agree = total = 0
        for hits, frame in zip(sim.hits, ds.frames):
            painted = paint_points(frame.cloud, ds.camera, frame.image)
            v = painted.valid
            agree += np.sum(painted.probs[v].argmax(axis=1) == hits.classes[v])
            total += v.sum()
        assert total > 10000
        assert agree / total >= 0.99

    def test_truth_marks_visible_returns_only(self, sims):
        sim = sims.get(0)
        t = sim.truth[0]
        known = t != VOID
        assert known.sum() > 1000
        assert np.array_equal(known, synth.visible_mask(sim.hits[0].points, sim.camera, sim.spec) & known)
        full = synth.truth_grid(sim.scene, sim.scene.poses[0], sim.spec)
        assert np.array_equal(t[known], full[known])

    def test_degrade_is_seeded(self, sims):
        sim = sims.get(0)
        a = synth.degrade(sim, 0.05, 0.3, 0.5, noise_seed=1)
        b = synth.degrade(sim, 0.05, 0.3, 0.5, noise_seed=1)
        c = synth.degrade(sim, 0.05, 0.3, 0.5, noise_seed=2)
        assert np.array_equal(a.frames[3].cloud.points, b.frames[3].cloud.points)
        assert np.array_equal(a.frames[3].image.probs, b.frames[3].image.probs)
        assert not np.array_equal(a.frames[3].image.probs, c.frames[3].image.probs)

    def test_dropout_halves_points(self, sims):
        sim = sims.get(0)
        full = len(synth.degrade(sim).frames[0].cloud)
        half = len(synth.degrade(sim, dropout=0.5).frames[0].cloud)
        assert abs(half / full - 0.5) < 0.03

    def test_make_dataset(self):
        spec = GridSpec(0.4, 0.0, -12.8, 64, 64)
        ds, scene = synth.make_dataset(seed=2, frames=2, spec=spec, camera=synth.default_camera(128, 64))
        assert len(ds) == 2 and ds.spec == spec
        assert ds.frames[0].image.width == 128
        assert ds.frames[1].truth.shape == (64, 64)
        assert scene.seed == 2
