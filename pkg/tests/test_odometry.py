import numpy as np
import pytest

from scanweave import odometry as odo
from scanweave import simulation as sim
from scanweave.odometry import Odometry, PipelineConfig
from scanweave.preprocess import RawScan, preprocess
from scanweave.se3 import Pose
from helpers import random_pose


def close(a: Pose, b: Pose, tol):
    d = a.inverse() @ b
    return np.linalg.norm(d.t) < tol and d.angle() < tol


@pytest.fixture(scope="module")
def wide_samples():
    """One fixed set of world points; every scan below observes the same samples."""
    world = sim.box_world(60, seed=5, half_extent=30.0)
    return sim.sample_surfaces(world, 40_000, seed=1, extent=30.0)


def scan_at(points, pose: Pose, max_range=25.0) -> RawScan:
    local = pose.inverse().apply(points)
    return RawScan(local[np.linalg.norm(local, axis=1) < max_range])


class TestPrediction:
    def test_static(self, rng):
        x = random_pose(rng, 5)
        assert close(odo.predict_motion(x, x), Pose(), 1e-12)

    def test_from_identity(self):
        m = odo.predict_motion(Pose.from_translation(1, 0, 0), Pose())
        np.testing.assert_allclose(m.t, [1, 0, 0])

    def test_without_history(self):
        assert close(odo.predict_motion(Pose.from_translation(3, 0, 0), None), Pose(), 0.0 + 1e-300)

    def test_rotating_sample(self):
        step = Pose.from_rotvec([0, 0, 0.1], [1.0, 0.0, 0.0])
        x0 = Pose.from_rotvec([0, 0, 0.4], [5.0, 2.0, 0.0])
        x1 = x0 @ step
        m = odo.predict_motion(x1, x0)
        np.testing.assert_allclose(m.as_matrix(), np.linalg.inv(x0.as_matrix()) @ x1.as_matrix(), atol=1e-12)
        np.testing.assert_allclose(odo.predict_pose(x1, m).as_matrix(), (x1 @ step).as_matrix(), atol=1e-12)

    def test_constant_velocity_extrapolates(self):
        x = odo.predict_pose(Pose.from_translation(2, 0, 0), Pose.from_translation(1, 0, 0))
        np.testing.assert_allclose(x.t, [3, 0, 0])

    def test_identity_motion(self, rng):
        x = random_pose(rng, 5)
        assert odo.predict_pose(x, Pose()).as_matrix().tolist() == x.as_matrix().tolist()


class TestConfig:
    def test_published_defaults(self):
        c = PipelineConfig()
        assert (c.v_map, c.v_icp, c.d_max, c.conv_eps, c.min_corrs, c.kappa, c.lm_iters) == (
            0.5, 1.5, 3.0, 1e-5, 200, 3.0, 15)
        assert c.tau == pytest.approx(1 / 3)
        assert c.gamma == pytest.approx(100 / 3)

    def test_gamma_follows_range(self):
        assert PipelineConfig(max_lidar_range=60).gamma == pytest.approx(20.0)
        assert PipelineConfig(max_lidar_range=60, gamma=5).gamma == 5

    @pytest.mark.parametrize("kw", [{"v_icp": 0.1}, {"kappa": 0}, {"d_max": -1}, {"min_corrs": -1}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            PipelineConfig(**kw)

    def test_thread_env(self, monkeypatch):
        monkeypatch.setenv(odo.THREADS_ENV, "4")
        assert odo.thread_count() == 4
        monkeypatch.setenv(odo.THREADS_ENV, "x")
        with pytest.raises(ValueError):
            odo.thread_count()


def make_keyframe(points, node, pose, cfg, v_map=0.01):
    # fine voxels and a wider range keep every sample the scan can see
    K, _ = preprocess(scan_at(points, pose, 60.0), Pose(), v_map, cfg.v_icp)
    return odo.Keyframe(node, K, odo.reg.build_index(K.points))


class TestRegisterToKeyframes:
    def test_same_cloud_gives_identity(self, wide_samples):
        cfg = PipelineConfig()
        x = Pose.from_translation(2, 1, 0)
        kf = make_keyframe(wide_samples, 0, x, cfg)
        _, I = preprocess(scan_at(wide_samples, x), Pose(), cfg.v_map, cfg.v_icp)
        found, aborted = odo.register_to_keyframes(I, x, [kf], {0: x}, cfg)
        assert aborted == 0 and close(found[0].measurement, Pose(), 1e-9)

    def test_two_keyframes_recover_relatives(self, wide_samples):
        cfg = PipelineConfig()
        poses = {0: Pose.from_rotvec([0, 0, 0.1], [0, 0, 0]), 1: Pose.from_rotvec([0, 0, 0.15], [3, 0.5, 0])}
        kfs = [make_keyframe(wide_samples, k, p, cfg) for k, p in poses.items()]
        truth = Pose.from_rotvec([0.01, 0, 0.2], [5.0, 1.0, 0.05])
        _, I = preprocess(scan_at(wide_samples, truth), Pose(), cfg.v_map, cfg.v_icp)
        x_hat = truth @ Pose.from_rotvec([0, 0, 0.02], [0.3, -0.2, 0.0])
        found, aborted = odo.register_to_keyframes(I, x_hat, kfs, poses, cfg)
        assert aborted == 0 and [m.keyframe.node for m in found] == [0, 1]
        for m in found:
            assert close(m.measurement, poses[m.keyframe.node].inverse() @ truth, 1e-3)
            assert np.linalg.eigvalsh(m.information).min() > 0

    def test_out_of_overlap_aborts(self, wide_samples):
        cfg = PipelineConfig()
        near = Pose()
        far = Pose.from_translation(500, 0, 0)
        kfs = [make_keyframe(wide_samples, 0, near, cfg),
               make_keyframe(wide_samples + [500.0, 0, 0], 1, far, cfg)]
        _, I = preprocess(scan_at(wide_samples, near), Pose(), cfg.v_map, cfg.v_icp)
        found, aborted = odo.register_to_keyframes(I, near, kfs, {0: near, 1: far}, cfg)
        assert aborted == 1 and [m.keyframe.node for m in found] == [0]

    def test_threads_give_identical_results(self, wide_samples):
        cfg = PipelineConfig()
        poses = {k: Pose.from_translation(1.5 * k, 0, 0) for k in range(4)}
        kfs = [make_keyframe(wide_samples, k, p, cfg) for k, p in poses.items()]
        _, I = preprocess(scan_at(wide_samples, Pose.from_translation(5, 0.2, 0)), Pose(), 0.5, 1.5)
        x_hat = Pose.from_translation(4.8, 0, 0)
        a, _ = odo.register_to_keyframes(I, x_hat, kfs, poses, cfg, threads=1)
        b, _ = odo.register_to_keyframes(I, x_hat, kfs[::-1], poses, cfg, threads=4)
        for m, n in zip(a, b):
            assert m.keyframe.node == n.keyframe.node
            np.testing.assert_array_equal(m.measurement.as_matrix(), n.measurement.as_matrix())


class TestProcessFrame:
    def test_bootstrap(self, wide_samples):
        o = Odometry()
        r = o.process_frame(scan_at(wide_samples, Pose()))
        assert r.node == 0 and r.keyframe_inserted and r.constraints_added == 0
        assert o.graph.nodes[0].fixed
        np.testing.assert_array_equal(r.pose.as_matrix(), np.eye(4))

    def test_static_platform(self, wide_samples):
        o = Odometry()
        scan = scan_at(wide_samples, Pose())
        o.process_frame(scan)
        r = o.process_frame(scan)
        assert np.linalg.norm(r.pose.t) < 1e-4 and r.constraints_added == 1

    def test_short_drive_and_invariants(self, wide_samples):
        cfg = PipelineConfig(max_lidar_range=25.0)
        o = Odometry(cfg)
        truth = [Pose.from_rotvec([0, 0, 0.02 * k], [1.2 * k, 0.1 * k, 0]) for k in range(12)]
        for p in truth:
            n_kf = len(o.keyframes)
            r = o.process_frame(scan_at(wide_samples, p))
            assert r.constraints_added + r.registrations_aborted == n_kf
        est = o.trajectory()
        for e, t in zip(est, truth):
            assert close(truth[0].inverse() @ t, e, 1e-2)
        for c in o.graph.constraints:
            assert c.source > c.target
        kf_nodes = [k.node for k in o.keyframes]
        for a, b in zip(kf_nodes, kf_nodes[1:]):
            assert np.linalg.norm(o.poses[a].t - o.poses[b].t) > cfg.kappa

    def test_degenerate_frame_falls_back(self, wide_samples):
        o = Odometry()
        o.process_frame(scan_at(wide_samples, Pose()))
        before = [k.node for k in o.keyframes]
        far = RawScan(np.random.default_rng(0).normal(size=(300, 3)) + [400.0, 0, 0])
        r = o.process_frame(far)
        assert r.degenerate and r.constraints_added == 0 and r.registrations_aborted == 1
        assert [k.node for k in o.keyframes] == before
        assert 1 not in o.graph.nodes
        assert len(o.trajectory()) == 2

    def test_deterministic(self, wide_samples):
        truth = [Pose.from_translation(1.0 * k, 0, 0) for k in range(6)]
        runs = []
        for threads in (1, 3):
            o = Odometry(PipelineConfig(max_lidar_range=25.0), threads=threads)
            runs.append(np.stack([p.as_matrix() for p in o.run([scan_at(wide_samples, t) for t in truth])]))
        np.testing.assert_array_equal(runs[0], runs[1])


class TestManageKeyframes:
    def setup_state(self, wide_samples, kf_pose, cur_pose, gamma=100 / 3):
        cfg = PipelineConfig(gamma=gamma)
        o = Odometry(cfg)
        o.graph.add_node(0, kf_pose, fixed=True)
        o.poses[0] = kf_pose
        o._insert_keyframe(0, make_keyframe(wide_samples, 0, kf_pose, cfg).cloud)
        o.graph.add_node(1, cur_pose)
        o.poses[1] = cur_pose
        o._next_id = 2
        K, _ = preprocess(scan_at(wide_samples, cur_pose), Pose(), 0.5, 1.5)
        return o, K

    def test_no_insertion_below_kappa(self, wide_samples):
        o, K = self.setup_state(wide_samples, Pose(), Pose.from_translation(2, 0, 0))
        inserted, evicted = o.manage_keyframes(1, K)
        assert not inserted and evicted == []

    def test_insertion_beyond_kappa(self, wide_samples):
        o, K = self.setup_state(wide_samples, Pose(), Pose.from_translation(3.5, 0, 0))
        inserted, _ = o.manage_keyframes(1, K)
        assert inserted and [k.node for k in o.keyframes] == [0, 1]

    def test_eviction_beyond_gamma(self, wide_samples):
        o, K = self.setup_state(wide_samples, Pose(), Pose.from_translation(40, 0, 0))
        o.graph.nodes[0].fixed = False
        o.graph.add_node(5, Pose.from_translation(39, 0, 0), fixed=True)
        inserted, evicted = o.manage_keyframes(1, K)
        assert evicted == [0] and inserted
        assert 0 not in [k.node for k in o.keyframes]
        # evicted node left the graph once nothing referenced it, its pose kept
        assert 0 not in o.graph.nodes and 0 in o.poses
