import math

import numpy as np
import pytest

from subterra.artifacts import (
    ArtifactParams,
    ArtifactReport,
    BluetoothLog,
    Detection,
    ReportPublisher,
    cluster_detections,
    scoring_lines,
    sense_artifacts,
)
from subterra.distdb import DbStore
from subterra.geometry import Pose2
from subterra.world import WorldConfig, generate_world


def corridor_with(artifacts, length=40.0, **kw):
    cfg = WorldConfig(template="straight", corridor_length=length,
                      artifacts=artifacts, **kw)
    return generate_world(cfg, 11)


def rng(seed=0):
    return np.random.default_rng([seed, 0xA27])


KF0 = Pose2()


class TestSense:
    def test_exact_detection_zero_noise(self):
        w = corridor_with([{"class": "backpack", "position": [25.0, 0.5]}])
        pose = Pose2(20.0, 0.0, 0.0)
        dets = sense_artifacts(w, pose, 0, KF0, 1.0, ArtifactParams(), rng())
        assert len(dets) == 1
        truth = w.artifacts[0].position
        assert np.allclose(dets[0].offset, truth, atol=1e-12)
        assert dets[0].cls == "backpack"

    def test_out_of_range_not_detected(self):
        w = corridor_with([{"class": "backpack", "position": [25.0, 0.5]}])
        dets = sense_artifacts(w, Pose2(5.0, 0, 0), 0, KF0, 1.0,
                               ArtifactParams(), rng())
        assert dets == []

    def test_behind_robot_not_detected(self):
        w = corridor_with([{"class": "backpack", "position": [25.0, 0.5]}])
        dets = sense_artifacts(w, Pose2(30.0, 0, 0), 0, KF0, 1.0,
                               ArtifactParams(), rng())
        assert dets == []

    def test_behind_wall_not_detected(self):
        # artifact sits outside the corridor; the sight line crosses the wall
        w = corridor_with([{"class": "drill", "position": [25.0, 3.5]}])
        pose = Pose2(22.0, 0.0, math.atan2(3.5, 3.0))
        dets = sense_artifacts(w, pose, 0, KF0, 1.0, ArtifactParams(), rng())
        assert dets == []

    def test_detection_rate_binomial(self):
        w = corridor_with([{"class": "backpack", "position": [25.0, 0.5]}])
        params = ArtifactParams(p_det=0.8)
        r = rng(3)
        hits = sum(bool(sense_artifacts(w, Pose2(20, 0, 0), 0, KF0, t * 0.2,
                                        params, r))
                   for t in range(1000))
        sigma = math.sqrt(1000 * 0.8 * 0.2)
        assert abs(hits - 800) < 3 * sigma

    def test_misclassification(self):
        w = corridor_with([{"class": "backpack", "position": [25.0, 0.5]}])
        params = ArtifactParams(p_mis=1.0)
        dets = sense_artifacts(w, Pose2(20, 0, 0), 0, KF0, 1.0, params, rng())
        assert dets[0].cls != "backpack"

    def test_false_positive_rate(self):
        w = corridor_with([])
        params = ArtifactParams(lambda_fp=2.0)
        r = rng(5)
        counts = [len(sense_artifacts(w, Pose2(20, 0, 0), 0, KF0, 0.0, params, r))
                  for _ in range(500)]
        assert np.mean(counts) == pytest.approx(2.0, abs=0.25)

    def test_cellphone_not_seen(self):
        w = corridor_with([{"class": "cellphone", "position": [25.0, 0.5],
                            "mac": "PH:00:01"}])
        dets = sense_artifacts(w, Pose2(20, 0, 0), 0, KF0, 1.0,
                               ArtifactParams(), rng())
        assert dets == []


def det(cls, xyz, t, kf=0):
    return Detection(cls, np.asarray(xyz, dtype=float), kf, t, 0.8)


class TestCluster:
    KFS = {0: Pose2()}

    def test_nine_plus_stray(self):
        dets = [det("backpack", [5.0 + 0.05 * i, 5.0, 0.3], float(i))
                for i in range(9)]
        dets.append(det("backpack", [11.0, 5.0, 0.3], 9.0))
        reports = cluster_detections(dets, self.KFS, 10.0, ArtifactParams())
        reports.sort(key=lambda r: -r.confidence)
        assert len(reports) == 2
        assert reports[0].confidence == pytest.approx(0.9)
        assert not reports[0].outlier
        assert reports[1].confidence == pytest.approx(0.1)
        assert reports[1].outlier

    def test_singleton_is_outlier(self):
        reports = cluster_detections([det("drill", [3, 0, 0], 0.0)],
                                     self.KFS, 1.0, ArtifactParams())
        assert len(reports) == 1
        assert reports[0].outlier
        assert reports[0].confidence == 1.0

    def test_far_apart_same_class_two_reports(self):
        dets = [det("drill", [3, 0, 0], 0.0), det("drill", [18, 0, 0], 0.1)]
        reports = cluster_detections(dets, self.KFS, 1.0, ArtifactParams())
        assert len(reports) == 2

    def test_window_excludes_old(self):
        dets = [det("drill", [3, 0, 0], 0.0), det("drill", [3, 0, 0], 100.0)]
        reports = cluster_detections(dets, self.KFS, 100.0, ArtifactParams())
        assert len(reports) == 1
        assert reports[0].supporting_count == 1

    def test_permutation_invariant_when_separated(self):
        dets = ([det("drill", [3 + 0.1 * i, 0, 0], float(i)) for i in range(5)]
                + [det("drill", [20 + 0.1 * i, 0, 0], float(i) + 0.5)
                   for i in range(5)])
        base = cluster_detections(dets, self.KFS, 10.0, ArtifactParams())
        flipped = cluster_detections(dets[::-1], self.KFS, 10.0, ArtifactParams())
        key = lambda rs: sorted((r.cls, tuple(np.round(r.offset, 6))) for r in rs)
        assert key(base) == key(flipped)

    def test_position_is_member_mean(self):
        dets = [det("backpack", [5.0, 0, 0], 0.0),
                det("backpack", [6.0, 0, 0], 0.1)]
        reports = cluster_detections(dets, self.KFS, 1.0, ArtifactParams())
        assert reports[0].world_position(self.KFS)[0] == pytest.approx(5.5)

    def test_keyframe_shift_moves_report(self):
        # the point of keyframe-relative storage: optimizing the graph
        # afterwards moves the resolved world position
        dets = [det("backpack", [5.0, 0, 0], 0.0)]
        reports = cluster_detections(dets, self.KFS, 1.0, ArtifactParams())
        before = reports[0].world_position({0: Pose2()})
        after = reports[0].world_position({0: Pose2(1.0, 0.0, 0.0)})
        assert after[0] - before[0] == pytest.approx(1.0)


class TestBluetooth:
    def phone_world(self, macs=("PH:00:01",), xs=(35.0,)):
        arts = [{"class": "cellphone", "position": [x, 0.0], "mac": m}
                for m, x in zip(macs, xs)]
        return corridor_with(arts)

    def test_approach_strictly_increasing(self):
        w = self.phone_world()
        log = BluetoothLog()
        r = rng()
        rssis = []
        for x in np.arange(12.0, 30.0, 2.0):
            for mac, rssi, pose, t in log.sense(w, Pose2(x, 0, 0), 0.0, r):
                rssis.append(rssi)
        assert len(rssis) > 3
        assert all(b > a for a, b in zip(rssis, rssis[1:]))

    def test_retreat_no_pushes(self):
        w = self.phone_world()
        log = BluetoothLog()
        r = rng()
        log.sense(w, Pose2(30.0, 0, 0), 0.0, r)
        for x in np.arange(28.0, 14.0, -2.0):
            assert log.sense(w, Pose2(x, 0, 0), 0.0, r) == []

    def test_two_phones_independent(self):
        w = self.phone_world(("PH:00:01", "PH:00:02"), (30.0, 38.0))
        log = BluetoothLog()
        r = rng()
        log.sense(w, Pose2(28.0, 0, 0), 0.0, r)
        assert set(log.best) == {"PH:00:01", "PH:00:02"}
        # moving past phone 1 toward phone 2 only improves phone 2
        pushes = log.sense(w, Pose2(34.0, 0, 0), 1.0, r)
        assert [p[0] for p in pushes] == ["PH:00:02"]

    def test_path_loss_slope(self):
        w = self.phone_world(xs=(30.0,))
        r1 = w.bluetooth_rssi(Pose2(29.0, 0, 0), w.artifacts[0])
        r10 = w.bluetooth_rssi(Pose2(20.0, 0, 0), w.artifacts[0])
        n = w.config.bt_path_loss_exp
        assert r1 - r10 == pytest.approx(10.0 * n, abs=1e-9)


class TestPublish:
    def _report(self, conf):
        return ArtifactReport("backpack", 0, np.array([5.0, 0.0, 0.3]),
                              conf, 3, False, 1.0)

    def test_dedup(self):
        pub = ReportPublisher(DbStore(1))
        assert pub.publish([self._report(0.6)], 1.0) == 1
        assert pub.publish([self._report(0.6)], 2.0) == 0

    def test_confidence_rise_supersedes(self):
        store = DbStore(1)
        pub = ReportPublisher(store)
        pub.publish([self._report(0.6)], 1.0)
        assert pub.publish([self._report(0.9)], 2.0) == 1
        msgs = store.read(1, "artifacts")
        assert len(msgs) == 2
        latest = ArtifactReport.from_payload(msgs[-1].payload)
        assert latest.confidence == pytest.approx(0.9)

    def test_roundtrip_through_store(self):
        store = DbStore(1)
        pub = ReportPublisher(store)
        r = self._report(0.8)
        pub.publish([r], 1.0)
        got = ArtifactReport.from_payload(store.read(1, "artifacts")[0].payload)
        assert got.cls == r.cls
        assert np.allclose(got.offset, r.offset)

    def test_scoring_lines(self):
        lines = scoring_lines([self._report(0.9)], {0: Pose2(1.0, 2.0, 0.0)})
        cls, x, y, z = lines[0].split()
        assert cls == "backpack"
        assert float(x) == pytest.approx(6.0)
        assert float(y) == pytest.approx(2.0)
