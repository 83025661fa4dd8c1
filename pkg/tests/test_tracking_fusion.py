from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from socialnav.angles import wrap_angle
from socialnav.tracking_fusion import (
    HUMAN,
    ROBOT,
    Detection,
    FusionConfig,
    Track,
    Tracker,
    _cvtr_jacobian,
    _cvtr_mean,
    associate,
    compensate_delay,
    cvtr_predict,
    cvtr_trajectory,
    ekf_update,
)

Q = (0.8, 0.3)
CFG = FusionConfig()


def track(state, cov=None, stamp=0.0, tid=0, cls=HUMAN):
    return Track(tid, cls, np.asarray(state, dtype=float),
                 np.eye(5) * 0.01 if cov is None else np.asarray(cov, dtype=float), stamp)


def det(x, y, t=0.0, yaw=None, cls=HUMAN, node=0):
    return Detection(cls, np.array([x, y]), t, node, yaw)


def arc_oracle(state, dt):
    """Circle-centre construction, independent of the closed-form update."""
    x, y, v, th, om = state
    r = v / om
    cx, cy = x - r * np.sin(th), y + r * np.cos(th)
    th2 = th + om * dt
    return np.array([cx + r * np.sin(th2), cy - r * np.cos(th2)])


class TestCvtrPredict:
    def test_zero_dt(self):
        s = np.array([1.0, 2.0, 0.5, 0.3, 0.2])
        P = np.diag([1.0, 2.0, 3.0, 4.0, 5.0])
        s2, P2 = cvtr_predict(s, P, 0.0, Q)
        assert np.array_equal(s2, s)
        assert np.allclose(P2, P, atol=0)

    def test_straight_line(self):
        s2, _ = cvtr_predict([0, 0, 1, 0, 0], np.eye(5), 2.0, Q)
        assert np.allclose(s2, [2, 0, 1, 0, 0], atol=1e-15)

    def test_quarter_circle_chord(self):
        s2, _ = cvtr_predict([0, 0, 1, 0, np.pi / 2], np.eye(5), 1.0, Q)
        assert s2[:2] == pytest.approx([2 / np.pi, 2 / np.pi], abs=1e-12)
        assert s2[3] == pytest.approx(np.pi / 2)

    def test_rejects_negative_dt(self):
        with pytest.raises(ValueError):
            cvtr_predict(np.zeros(5), np.eye(5), -0.1, Q)

    @settings(max_examples=200)
    @given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.1, 3), st.floats(-np.pi, np.pi),
           st.floats(0.05, 2).flatmap(lambda w: st.sampled_from([w, -w])), st.floats(0.01, 3))
    def test_matches_arc_oracle(self, x, y, v, th, om, dt):
        s2, _ = cvtr_predict([x, y, v, th, om], np.eye(5), dt, Q)
        assert np.allclose(s2[:2], arc_oracle(np.array([x, y, v, th, om]), dt), atol=1e-9)
        assert abs(wrap_angle(s2[3] - th - om * dt)) < 1e-12

    @pytest.mark.parametrize("om", [1e-6, -1e-6])
    @pytest.mark.parametrize("dt", [0.1, 1.0])
    def test_continuity_at_zero_turn_rate(self, om, dt):
        s = np.array([0.3, -0.2, 1.4, 0.7, om])
        # |omega| = 1e-6 takes the straight-line branch; compare with the arc formula there
        assert np.linalg.norm(_cvtr_mean(s, dt)[:2] - arc_oracle(s, dt)) < 1e-8
        above = s.copy()
        above[4] = om * (1 + 1e-7)
        assert np.linalg.norm(_cvtr_mean(above, dt)[:2] - _cvtr_mean(s, dt)[:2]) < 1e-8

    @pytest.mark.parametrize("om", [0.0, 1e-8, 0.4, -1.3])
    def test_jacobian_matches_finite_differences(self, om):
        s = np.array([0.5, 1.0, 1.2, 0.4, om])
        F = _cvtr_jacobian(s, 0.7)
        Ffd = np.zeros((5, 5))
        for k in range(5):
            # the turn-rate step must stay inside the branch it starts in
            h = 1e-9 if (k == 4 and abs(om) < 1e-6) else 1e-6
            e = np.zeros(5)
            e[k] = h
            d = _cvtr_mean(s + e, 0.7) - _cvtr_mean(s - e, 0.7)
            d[3] = wrap_angle(d[3])
            Ffd[:, k] = d / (2 * h)
        assert np.allclose(F, Ffd, atol=1e-6)

    def test_trajectory_rows(self):
        s = np.array([0.0, 0.0, 1.0, 0.0, 0.5])
        traj = cvtr_trajectory(s, 4, 0.1)
        for k in range(4):
            p = _cvtr_mean(s, 0.1 * (k + 1))
            assert np.allclose(traj[k], [p[0], p[1], p[3]])


class TestCompensateDelay:
    def test_identity_at_last_update(self):
        tr = track([1, 2, 0.5, 0.3, 0.1], stamp=4.0)
        out = compensate_delay(tr, 4.0, Q)
        assert np.array_equal(out.state, tr.state) and np.array_equal(out.cov, tr.cov)
        assert out.state is not tr.state

    def test_straight_walker(self):
        tr = track([0, 0, 1.5, 0.0, 0.0], stamp=1.0)
        out = compensate_delay(tr, 1.2, Q)
        assert out.position == pytest.approx([0.3, 0.0], abs=1e-12)
        assert tr.position == pytest.approx([0.0, 0.0])
        assert out.last_update == 1.2

    def test_turning_matches_arc(self):
        s = np.array([1.0, -1.0, 1.1, 2.0, 0.8])
        out = compensate_delay(track(s, stamp=0.0), 0.35, Q)
        assert np.allclose(out.position, arc_oracle(s, 0.35), atol=1e-12)

    def test_rejects_past(self):
        with pytest.raises(ValueError):
            compensate_delay(track(np.zeros(5), stamp=1.0), 0.5, Q)


def greedy_oracle(dets, tracks, gate):
    """Repeatedly take the smallest remaining (distance, track id) pair by exhaustive scan."""
    free_d, free_t, out = set(range(len(dets))), set(range(len(tracks))), []
    while True:
        best = None
        for di, ti in itertools.product(sorted(free_d), sorted(free_t)):
            if dets[di].cls != tracks[ti].cls:
                continue
            d = np.linalg.norm(dets[di].position - tracks[ti].position)
            if d <= gate and (best is None or (d, tracks[ti].id) < best[0]):
                best = ((d, tracks[ti].id), di, ti)
        if best is None:
            return sorted(out)
        out.append((best[1], best[2]))
        free_d.discard(best[1])
        free_t.discard(best[2])


class TestAssociate:
    def test_within_gate(self):
        m, ud, ut = associate([det(0.3, 0)], [track([0, 0, 0, 0, 0])], CFG)
        assert m == [(0, 0)] and not ud and not ut

    def test_class_gate(self):
        m, ud, ut = associate([det(0, 0, cls=ROBOT)], [track([0, 0, 0, 0, 0])], CFG)
        assert m == [] and ud == [0] and ut == [0]

    def test_tie_breaks_on_lower_track_id(self):
        tracks = [track([1, 0, 0, 0, 0], tid=7), track([-1, 0, 0, 0, 0], tid=3)]
        m, _, _ = associate([det(0, 0)], tracks, CFG)
        assert m == [(0, 1)]

    def test_brute_force_oracle(self, rng):
        for _ in range(300):
            dets = [det(*rng.uniform(-0.6, 0.6, 2)) for _ in range(3)]
            tracks = [track([*rng.uniform(-0.6, 0.6, 2), 0, 0, 0], tid=int(k)) for k in rng.permutation(2)]
            m, ud, ut = associate(dets, tracks, CFG)
            assert sorted(m) == greedy_oracle(dets, tracks, CFG.gate_distance)
            assert len({d for d, _ in m}) == len(m) == len({t for _, t in m})
            assert sorted(ud + [d for d, _ in m]) == [0, 1, 2]


class TestEkfUpdate:
    def test_measurement_at_prediction(self):
        tr = track([1.0, 2.0, 0.5, 0.2, 0.0], cov=np.eye(5) * 0.1)
        out = ekf_update(tr, det(1.0, 2.0, yaw=0.2), FusionConfig(sigma_xy=1e-3, sigma_theta=1e-3))
        assert np.allclose(out.state, tr.state, atol=1e-9)
        assert np.all(np.diag(out.cov) <= np.diag(tr.cov) + 1e-15)
        assert out.cov[0, 0] < tr.cov[0, 0]

    def test_zero_gain_limit(self):
        tr = track([1.0, 2.0, 0.5, 0.2, 0.0], cov=np.eye(5) * 0.1)
        out = ekf_update(tr, det(5.0, -3.0, yaw=2.0), FusionConfig(sigma_xy=1e9, sigma_theta=1e9))
        assert np.allclose(out.state, tr.state, atol=1e-6)

    @pytest.mark.parametrize("p, r", [(0.5, 0.1), (0.01, 1.0), (2.0, 2.0)])
    def test_scalar_closed_form(self, p, r):
        cov = np.diag([p, 1.0, 1.0, 1.0, 1.0])
        tr = track([0, 0, 0, 0, 0], cov=cov)
        out = ekf_update(tr, det(1.0, 0.0), FusionConfig(sigma_xy=np.sqrt(r)))
        gain = p / (p + r)
        assert out.state[0] == pytest.approx(gain)
        assert out.cov[0, 0] == pytest.approx(p * r / (p + r))

    def test_wrapped_yaw_innovation(self):
        tr = track([0, 0, 0, np.pi - 0.05, 0], cov=np.eye(5))
        out = ekf_update(tr, det(0, 0, yaw=-np.pi + 0.05), CFG)
        # the short way round crosses +-pi, not back through zero
        assert abs(wrap_angle(out.state[3] - np.pi)) < 0.05
        assert -np.pi < out.state[3] <= np.pi

    def test_covariance_stays_psd(self, rng):
        tr = track([0, 0, 1.0, 0.0, 0.1], cov=np.eye(5))
        for _ in range(1000):
            if rng.random() < 0.5:
                s, P = cvtr_predict(tr.state, tr.cov, rng.uniform(0, 0.5), Q)
                tr = Track(tr.id, tr.cls, s, P, tr.last_update)
            else:
                yaw = rng.uniform(-np.pi, np.pi) if rng.random() < 0.5 else None
                tr = ekf_update(tr, det(*(tr.position + rng.normal(scale=0.3, size=2)), yaw=yaw), CFG)
            assert np.array_equal(tr.cov, tr.cov.T)
            assert np.linalg.eigvalsh(tr.cov).min() >= -1e-12 * max(1.0, np.abs(tr.cov).max())


class TestTracker:
    def test_confirmation_needs_two_matches(self):
        t = Tracker(CFG)
        assert t.fuse_step([det(0, 0, 0.0)], 0.0) == []
        out = t.fuse_step([det(0.01, 0, 0.1)], 0.1)
        assert len(out) == 1 and out[0].cls == HUMAN

    def test_tentative_track_dies_on_first_miss(self):
        t = Tracker(CFG)
        t.fuse_step([det(0, 0, 0.0)], 0.0)
        t.fuse_step([det(5, 5, 0.1)], 0.1)
        assert [tr.position[0] for tr in t.tracks] == [5.0]

    def test_dropped_after_miss_limit(self):
        t = Tracker(CFG)
        t.fuse_step([det(0, 0, 0.0)], 0.0)
        t.fuse_step([det(0, 0, 0.05)], 0.05)
        for k in range(CFG.miss_limit):
            assert any(tr.confirmed for tr in t.tracks)
            t.fuse_step([det(20, 20, 0.1 + 0.01 * k)], 0.1 + 0.01 * k)
        assert all(abs(tr.position[0]) > 10 for tr in t.tracks)

    def test_empty_calls_do_not_count_misses_but_age_out(self):
        t = Tracker(CFG)
        t.fuse_step([det(0, 0, 0.0)], 0.0)
        t.fuse_step([det(0, 0, 0.1)], 0.1)
        for k in range(20):
            out = t.fuse_step([], 0.1 + 0.01 * (k + 1))
        assert len(out) == 1
        assert t.fuse_step([], 0.1 + CFG.max_age + 0.01) == []

    def test_stationary_person_within_noise(self, rng):
        t = Tracker(CFG)
        truth = np.array([2.0, -1.0])
        for k in range(50):
            z = truth + rng.normal(scale=0.05, size=2)
            out = t.fuse_step([det(*z, 0.1 * k)], 0.1 * k)
        assert len(out) == 1
        assert np.linalg.norm(out[0].position - truth) < 3 * 0.05

    def test_out_of_order_stamps(self):
        t = Tracker(CFG)
        t.fuse_step([det(0, 0, 0.2)], 0.2)
        t.fuse_step([det(0.1, 0, 0.1), det(0.3, 0, 0.3)], 0.3)
        assert len(t.tracks) == 1 and t.tracks[0].last_update == pytest.approx(0.3)

    def test_report_trajectory_horizon(self):
        t = Tracker(CFG)
        for k in range(10):
            out = t.fuse_step([det(0.1 * k, 0.0, 0.1 * k, yaw=0.0)], 0.1 * k, horizon=20, horizon_dt=0.1)
        assert out[0].trajectory.shape == (20, 3)
        assert out[0].trajectory[-1, 0] > out[0].position[0]

    def test_delay_compensation_beats_stale_detections(self, rng):
        """Walker at 1.2 m/s, detections 200 ms old at 10 Hz."""
        t = Tracker(CFG)
        v, delay = 1.2, 0.2
        comp, stale = [], []
        for k in range(100):
            now = 0.1 * k + delay
            stamp = 0.1 * k
            z = np.array([v * stamp, 0.0]) + rng.normal(scale=0.03, size=2)
            out = t.fuse_step([det(*z, stamp, yaw=rng.normal(scale=0.05))], now)
            if k < 20 or not out:
                continue
            truth = np.array([v * now, 0.0])
            comp.append(np.linalg.norm(out[0].position - truth))
            stale.append(np.linalg.norm(z - truth))
        assert np.mean(stale) == pytest.approx(0.24, abs=0.02)
        assert np.mean(comp) < np.mean(stale)


@pytest.mark.parametrize("field, value", [("gate_distance", 0.0), ("sigma_xy", -1.0), ("max_age", 0.0)])
def test_config_validation(field, value):
    with pytest.raises(ValueError):
        FusionConfig(**{field: value})


def test_config_rejects_zero_counts():
    with pytest.raises(ValueError):
        FusionConfig(miss_limit=0)
