from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from socialnav.camera_geometry import PixelHeightNoise, ProjectionMatrix, back_project
from socialnav.errors import ConfigError
from socialnav.pose_estimation import default_skeleton, pose_prior_from_keypoints, posed_joints
from socialnav.scenario import CameraConfig, NodeConfig, parse_scenario
from socialnav.simulation import (
    WAYPOINT_TOL,
    DeliveryQueue,
    Pedestrian,
    PerceptionPipeline,
    inject_latency,
    make_pedestrians,
    node_local_report,
    run_episode,
    step_pedestrians,
    synthesize_observations,
)
from socialnav.tracking_fusion import fuse_node_reports


def ceiling_camera(position, target=(10.0, 0.0, 0.0)):
    return CameraConfig(ProjectionMatrix.look_at(position, target, 1000.0, 960.0, 720.0), 1920, 1440)


def node(id=0, position=(-2.0, 0.0, 3.2), **kw):
    return NodeConfig(id, (ceiling_camera(position),), **kw)


def walker(x=0.0, y=0.0, wps=((3.0, 0.0),), speed=1.5, wait=0.0):
    heading = float(np.arctan2(wps[0][1] - y, wps[0][0] - x)) if wps else 0.0
    return Pedestrian(x, y, heading, speed, 1.7, tuple(wps), 0, wait)


def empty_scenario(**extra):
    doc = {
        "scenario": {"name": "empty", "seed": 0, "duration": 30.0},
        "world": {"path": [[0.0, 0.0], [10.0, 0.0]], "v_ref": [0.7, 0.7]},
    }
    doc.update(extra)
    return parse_scenario(doc)


class TestPedestrians:
    def test_advance_along_line(self):
        (p,) = step_pedestrians([walker()], 0.1)
        assert (p.x, p.y) == pytest.approx((0.15, 0.0), abs=1e-12)
        assert p.heading == 0.0

    def test_stationary_after_final_waypoint(self):
        p = walker(3.0, 0.0, ((3.0, 0.0),))
        p = step_pedestrians([p], 0.1)[0]
        assert p.done
        q = step_pedestrians([p], 0.1)[0]
        assert (q.x, q.y, q.heading) == (p.x, p.y, p.heading)
        assert np.array_equal(q.velocity, np.zeros(2))

    def test_start_delay_holds_position(self):
        p = walker(wait=0.25)
        for _ in range(2):
            p = step_pedestrians([p], 0.1)[0]
        assert (p.x, p.y) == (0.0, 0.0)
        p = step_pedestrians([p], 0.1)[0]
        p = step_pedestrians([p], 0.1)[0]
        assert p.x > 0

    def test_rejects_nonpositive_dt(self):
        with pytest.raises(ValueError):
            step_pedestrians([walker()], 0.0)

    @staticmethod
    def _steps_to_finish(p, dt):
        k = 0
        while not p.done and k < 10_000:
            p = step_pedestrians([p], dt)[0]
            k += 1
        return k

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0.5, 20.0), st.floats(-np.pi, np.pi), st.floats(1.0, 2.0))
    def test_arrival_time_single_leg(self, length, angle, speed):
        dt = 0.1
        wp = (length * np.cos(angle), length * np.sin(angle))
        k = self._steps_to_finish(walker(0.0, 0.0, (wp,), speed), dt)
        assert abs(k * dt - length / speed) <= dt + 1e-9

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=1, max_size=4),
           st.floats(0.5, 2.0))
    def test_arrival_time_multi_leg(self, wps, speed):
        pts = [(0.0, 0.0)]
        for w in wps:
            if np.hypot(w[0] - pts[-1][0], w[1] - pts[-1][1]) > 0.5:
                pts.append(w)
        if len(pts) < 2:
            return
        length = sum(np.hypot(b[0] - a[0], b[1] - a[1]) for a, b in zip(pts[:-1], pts[1:]))
        dt, n = 0.1, len(pts) - 1
        k = self._steps_to_finish(walker(0.0, 0.0, tuple(pts[1:]), speed), dt)
        # a waypoint reached up to WAYPOINT_TOL early shortens both adjoining legs,
        # and each leg can end partway through a step
        assert length / speed - 2 * n * WAYPOINT_TOL / speed - 1e-9 <= k * dt
        assert k * dt <= length / speed + n * dt + 1e-9

    def test_jitter_is_seeded(self, scenario):
        cfg = scenario("hallway_2ped")
        a = make_pedestrians(cfg, np.random.default_rng([0, 0]))
        b = make_pedestrians(cfg, np.random.default_rng([0, 0]))
        c = make_pedestrians(cfg, np.random.default_rng([1, 0]))
        assert a == b and a != c


class TestSynthesis:
    def test_noiseless_round_trip(self):
        n = node(pixel_sigma=0.0, lidar_sigma=0.0)
        p = walker(8.0, 0.5, ((8.0, 3.0),), 1.0)
        obs = synthesize_observations([p], n, 0.0, np.random.default_rng(0))
        (person,) = obs.persons
        ((ci, kp),) = person.keypoints
        truth = posed_joints(p.x, p.y, p.heading, p.stature)
        for j in range(17):
            xy = back_project(kp[j], truth[j, 2], n.cameras[ci].H)
            assert xy == pytest.approx(truth[j, :2], abs=1e-9)
        # the prior built from these keypoints at the true stature sits on the truth
        prior = pose_prior_from_keypoints(kp, (p.stature, 0.0), n.cameras[ci].H,
                                          PixelHeightNoise(0.0, 0.0, 0.0), default_skeleton())
        assert np.allclose(prior.means, truth, atol=1e-9)
        for m in person.lidar:
            assert np.array_equal(m.mean, truth[m.joint_index])

    def test_behind_camera_not_detected(self):
        n = node()
        obs = synthesize_observations([walker(-6.0, 0.0, ((-9.0, 0.0),))], n, 0.0,
                                      np.random.default_rng(0))
        assert obs.persons == ()

    def test_lidar_can_be_disabled(self):
        obs = synthesize_observations([walker(8.0, 0.0, ((9.0, 0.0),))], node(), 0.0,
                                      np.random.default_rng(0), lidar_enabled=False)
        assert obs.persons[0].lidar == ()

    def test_pixel_noise_std(self):
        sigma = 2.0
        n = node(pixel_sigma=sigma)
        p = walker(8.0, 0.0, ((9.0, 0.0),))
        clean = synthesize_observations([p], node(pixel_sigma=0.0), 0.0,
                                        np.random.default_rng(0)).persons[0].keypoints[0][1]
        rng = np.random.default_rng(1)
        errs = np.concatenate([
            (synthesize_observations([p], n, 0.0, rng).persons[0].keypoints[0][1] - clean).ravel()
            for _ in range(10_000 // 17 + 1)])
        assert len(errs) >= 10_000
        assert np.std(errs) == pytest.approx(sigma, rel=0.03)

    def test_stamp_is_capture_time(self):
        obs = synthesize_observations([walker(8.0, 0.0, ((9.0, 0.0),))], node(), 3.7,
                                      np.random.default_rng(0))
        assert obs.stamp == 3.7 and obs.node_id == 0


class TestLatency:
    def test_immediate_delivery(self):
        q = inject_latency(["a", "b"], 1.0, node(), np.random.default_rng(0))
        assert q.pop_ready(1.0) == ["a", "b"]

    def test_fixed_latency_withholds(self):
        q = inject_latency(["a"], 0.0, node(latency_ms=200.0), np.random.default_rng(0))
        for t in np.arange(0.0, 0.2 - 1e-6, 0.01):
            assert q.pop_ready(t) == []
        assert q.pop_ready(0.2) == ["a"]

    def test_mean_delay(self):
        n = node(latency_ms=50.0, jitter_ms=20.0)
        rng = np.random.default_rng(2)
        q = DeliveryQueue()
        inject_latency(range(10_000), 0.0, n, rng, q)
        delays = [e.deliver_at for e in q._heap]
        assert np.mean(delays) == pytest.approx(0.060, rel=0.03)
        assert min(delays) >= 0.050 and max(delays) <= 0.070

    def test_interleaves_nodes_by_delivery_time(self):
        q = DeliveryQueue()
        inject_latency(["slow"], 0.0, node(0, latency_ms=100.0), np.random.default_rng(0), q)
        inject_latency(["fast"], 0.05, node(1, latency_ms=10.0), np.random.default_rng(0), q)
        assert q.pop_ready(1.0) == ["fast", "slow"]


class TestCooperativeFusion:
    def test_two_nodes_one_detection(self, scenario):
        cfg = scenario("hallway_2ped")
        skel = default_skeleton()
        p = walker(10.0, 0.5, ((10.0, 3.0),), 1.0)
        reports = []
        for n in cfg.nodes:
            obs = synthesize_observations([p], n, 0.0, np.random.default_rng(n.id), skel)
            reports.append(node_local_report(obs, n, cfg.perception.stature_prior,
                                             cfg.perception.sigma_zw, skel))
        assert all(len(r.persons) == 1 for r in reports)
        dets = fuse_node_reports(reports, skel)
        assert len(dets) == 1
        assert np.hypot(*(dets[0].position - p.position)) < 0.1
        assert len(fuse_node_reports(reports, skel, cooperative=True)) == 1

    def test_pipeline_one_track_per_person(self, scenario):
        cfg = scenario("hallway_2ped").with_overrides(pedestrians=())
        pipe = PerceptionPipeline(cfg)
        p = walker(5.0, 0.5, ((15.0, 0.5),), 1.0)
        for k in range(30):
            t = 0.1 * k
            pipe.capture([p], t)
            tracks = pipe.update(pipe.deliver(t), t, 0)
            p = step_pedestrians([p], 0.1)[0]
        assert len(tracks) == 1
        assert len(pipe.tracker.tracks) == 1


class TestEpisode:
    def test_empty_scenario_reaches_goal(self):
        log = run_episode(empty_scenario())
        assert log.goal_reached
        assert log.goal_time == pytest.approx(10.0 / 0.7, abs=1.0)

    def test_timestamps_increase_by_ts(self):
        log = run_episode(empty_scenario())
        t = np.array([c.t for c in log.cycles])
        assert np.allclose(np.diff(t), 0.1, atol=1e-12)

    def test_two_pedestrians_no_collision(self, scenario):
        log = run_episode(scenario("hallway_2ped"))
        assert log.goal_reached
        assert min(c.clearance for c in log.cycles) > 0

    def test_repeatable(self, scenario):
        cfg = scenario("hallway_2ped").with_overrides(duration=8.0)
        a, b = run_episode(cfg), run_episode(cfg)
        assert a.perception == b.perception
        for x, y in zip(a.cycles, b.cycles):
            assert np.array_equal(x.robot, y.robot) and np.array_equal(x.u, y.u)
            assert x.plan == y.plan

    def test_track_count_bounded(self, scenario):
        cfg = scenario("hallway_4ped").with_overrides(duration=15.0)
        log = run_episode(cfg)
        assert max(len(c.tracks) for c in log.cycles) <= len(cfg.pedestrians) + 1

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            empty_scenario(pedestrians=[{"position": [1, 1], "waypoints": [], "speed": -1.0}])
