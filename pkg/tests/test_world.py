import math

import numpy as np
import pytest

from subterra.geometry import Pose2, Twist2
from subterra.world import (
    Artifact,
    OdometrySim,
    RangeNoiseModel,
    RobotState,
    WorldConfig,
    capture_frame,
    generate_world,
    step_robot,
)


@pytest.fixture(scope="module")
def corridor():
    return generate_world(WorldConfig(template="straight", corridor_length=50.0), 7)


class TestGeneration:
    def test_single_corridor(self, corridor):
        assert len(corridor.nodes) == 2
        assert len(corridor.edges) == 1
        assert np.nanmax(np.abs(corridor.heightfield.values)) <= 0.01

    def test_t_junction_topology(self):
        w = generate_world(WorldConfig(template="t_junction", corridor_length=20.0), 3)
        assert len(w.edges) == 3
        from collections import Counter

        deg = Counter()
        for i, j, _w, _r in w.edges:
            deg[i] += 1
            deg[j] += 1
        assert max(deg.values()) == 3

    def test_determinism(self):
        cfg = WorldConfig(template="y_junction", roughness=0.05,
                          artifacts=[{"class": "backpack", "edge": 0, "offset": 0.5}])
        a = generate_world(cfg, 42)
        b = generate_world(cfg, 42)
        assert np.array_equal(a.heightfield.values, b.heightfield.values)
        assert a.edges == b.edges
        assert np.array_equal(a.artifacts[0].position, b.artifacts[0].position)

    def test_rejects_narrow_corridor(self):
        cfg = WorldConfig(corridor_width=0.8, footprint_width=0.5)
        with pytest.raises(ValueError):
            generate_world(cfg, 1)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            generate_world(WorldConfig(template="custom", nodes=[[0, 0]], edges=[]), 1)


class TestRaycast:
    def test_side_walls_at_two_meters(self, corridor):
        pano = corridor.raycast_panorama(Pose2(10.0, 0.0, 0.0))
        mid = pano.height // 2
        el = pano.elevations()[mid]
        for az in (math.pi / 2, -math.pi / 2):
            j = pano.azimuth_to_column(az)
            assert pano.ranges[mid, j] == pytest.approx(2.0 / math.cos(el), abs=0.05)

    def test_open_axis_reads_max_range(self, corridor):
        pano = corridor.raycast_panorama(Pose2(5.0, 0.0, 0.0))
        mid = pano.height // 2
        j = pano.azimuth_to_column(0.001)
        assert pano.ranges[mid, j] == corridor.config.max_range

    def test_dead_end_range(self, corridor):
        # wall at x = 52 (corridor rect extends half a width past the node)
        pano = corridor.raycast_panorama(Pose2(42.0, 0.0, 0.0))
        mid = pano.height // 2
        el = pano.elevations()[mid]
        j = pano.azimuth_to_column(0.001)
        assert pano.ranges[mid, j] == pytest.approx(10.0 / math.cos(el), abs=0.05)

    def test_ranges_bounded(self, corridor):
        pano = corridor.raycast_panorama(Pose2(25.0, 1.0, 0.7),
                                         noise=RangeNoiseModel(0.05), frame_index=3)
        assert np.all(pano.ranges > 0)
        assert np.all(pano.ranges <= corridor.config.max_range)

    def test_noise_deterministic(self, corridor):
        a = corridor.raycast_panorama(Pose2(25.0, 0.0, 0.0), RangeNoiseModel(0.05), 9)
        b = corridor.raycast_panorama(Pose2(25.0, 0.0, 0.0), RangeNoiseModel(0.05), 9)
        assert np.array_equal(a.ranges, b.ranges)

    def test_pose_in_wall_raises(self, corridor):
        with pytest.raises(ValueError):
            corridor.raycast_panorama(Pose2(10.0, 30.0, 0.0))

    def test_floor_hit_matches_analytic(self, corridor):
        # downward ray onto flat floor: r = sensor_height / sin(|el|)
        pano = corridor.raycast_panorama(Pose2(25.0, 0.0, 0.0))
        el = pano.elevations()
        row = pano.height - 1  # steepest downward row
        j = pano.azimuth_to_column(math.pi / 2)  # toward wall, but floor closer
        expected = corridor.config.sensor_height / math.sin(-el[row])
        wall = 2.0 / math.cos(el[row])
        assert pano.ranges[row, j] == pytest.approx(min(expected, wall), rel=0.02)


class TestStepRobot:
    def test_forward(self, corridor):
        st = RobotState.create(Pose2(10.0, 0.0, 0.0), 5)
        st = step_robot(corridor, st, Twist2(1.0, 0.0, 0.0), 0.1)
        assert st.pose.x == pytest.approx(10.1)
        assert st.pose.y == pytest.approx(0.0)

    def test_wall_clamp(self, corridor):
        st = RobotState.create(Pose2(10.0, 1.7, math.pi / 2), 5)
        st2 = step_robot(corridor, st, Twist2(1.0, 0.0, 0.0), 0.5)
        # no penetration: must stay inside free space with footprint margin
        assert corridor.inside_free(
            np.array([[st2.pose.x, st2.pose.y]]), corridor.config.footprint_width / 2)[0]
        assert st2.pose.y <= 2.0 - corridor.config.footprint_width / 2 + 1e-6

    def test_slide_along_wall(self, corridor):
        st = RobotState.create(Pose2(10.0, 1.7, math.pi / 4), 5)
        st2 = step_robot(corridor, st, Twist2(1.0, 0.0, 0.0), 0.5)
        assert st2.pose.x > 10.05  # tangential component survives

    def test_dt_validation(self, corridor):
        st = RobotState.create(Pose2(10.0, 0.0, 0.0), 5)
        with pytest.raises(ValueError):
            step_robot(corridor, st, Twist2(), 0.0)

    def test_fall_statistics(self):
        # binomial oracle: p(fall in 1 s at 0.2/s, dt=0.1) = 1-(1-0.02)^10
        cfg = WorldConfig(slip_threshold=0.4, slip_rate=0.2)
        w = generate_world(cfg, 11)
        # force gradient above threshold everywhere
        w.gradmag.values[:] = 0.6
        falls = 0
        for k in range(1000):
            st = RobotState.create(Pose2(10.0, 0.0, 0.0), k)
            for _ in range(10):
                st = step_robot(w, st, Twist2(0.0, 0.0, 0.0), 0.1)
            falls += st.fallen
        p = 1 - (1 - 0.02) ** 10
        sigma = math.sqrt(1000 * p * (1 - p))
        assert abs(falls - 1000 * p) < 3 * sigma


class TestLink:
    def test_coincident(self, corridor):
        assert corridor.link_quality(Pose2(10, 0, 0), Pose2(10, 0, 0)) == 1.0

    def test_beyond_range(self):
        w = generate_world(WorldConfig(corridor_length=300.0, rf_max_range=100.0), 2)
        assert w.link_quality(Pose2(1, 0, 0), Pose2(299, 0, 0)) == 0.0

    def test_half_range_curve(self, corridor):
        cfg = corridor.config
        q = corridor.link_quality(Pose2(1, 0, 0), Pose2(1 + cfg.rf_max_range / 2, 0, 0))
        assert q == pytest.approx(0.5 ** cfg.rf_exponent)

    def test_monotone_in_distance(self, corridor):
        qs = [corridor.link_quality(Pose2(1, 0, 0), Pose2(1 + d, 0, 0))
              for d in (0.0, 10.0, 20.0, 40.0)]
        assert all(a >= b for a, b in zip(qs, qs[1:]))

    def test_rssi_path_loss(self, corridor):
        phone = Artifact("cellphone", np.array([10.0, 0.0, 0.3]), "PH:00:01")
        r1 = corridor.bluetooth_rssi(Pose2(11.0, 0.0, 0.0), phone)
        r10 = corridor.bluetooth_rssi(Pose2(20.0, 0.0, 0.0), phone)
        assert r1 - r10 == pytest.approx(corridor.config.bt_path_loss_exp * 10.0, abs=0.01)


class TestSensorStream:
    def test_odometry_drift_window(self):
        cfg = WorldConfig(odom_sigma_xy=0.02, odom_sigma_theta=0.002)
        w = generate_world(cfg, 3)
        odo = OdometrySim(Pose2(5, 0, 0), cfg, 3)
        true = Pose2(5, 0, 0)
        errs = []
        dt = 0.02
        poses_true, poses_odom = [true], [odo.pose]
        for i in range(2500):
            new_true = true.compose(Pose2(0.5 * dt, 0, 0))
            odo.update(true, new_true, dt)
            true = new_true
            poses_true.append(true)
            poses_odom.append(odo.pose)
        # 2 s window = 100 steps: relative pose error vs true relative pose
        for i in range(0, 2400, 100):
            rel_t = poses_true[i + 100].relative_to(poses_true[i])
            rel_o = poses_odom[i + 100].relative_to(poses_odom[i])
            errs.append(math.hypot(rel_t.x - rel_o.x, rel_t.y - rel_o.y))
        # per-axis sigma over 2 s is odom_sigma_xy*sqrt(2); 2-D error mean ~ sigma*sqrt(pi/2)
        expected = 0.02 * math.sqrt(2.0) * math.sqrt(math.pi / 2)
        assert np.mean(errs) == pytest.approx(expected, rel=0.5)

    def test_capture_frame_derotation_inputs(self, corridor):
        f = capture_frame(corridor, Pose2(10, 0, 0), Pose2(10.05, 0, 0.1),
                          timestamp=1.0, frame_index=10, odom_pose=Pose2(10, 0, 0))
        assert f.imu_yaw_delta == pytest.approx(0.1)
        assert f.panorama.width == corridor.config.panorama_width

    def test_snapshot_export(self, corridor, tmp_path):
        corridor.export_snapshot(tmp_path)
        assert (tmp_path / "world.yaml").exists()
        assert (tmp_path / "heightfield.png").exists()
