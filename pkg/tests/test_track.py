import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aerotrack.detect import Detection, RotatedBox
from aerotrack.track import (CONFIRMED, TENTATIVE, TERMINATED, KalmanState, NoiseModel, Tracker, TrackerConfig,
                             hungarian, kf_predict, kf_update, read_tracks_csv, track_rows, transition_matrix,
                             white_acceleration_q, write_tracks_csv)
from oracles import brute_assignment, dense_predict, dense_update


def _psd(rng, n=4):
    a = rng.normal(size=(n, n))
    return a @ a.T + 1e-3 * np.eye(n)


def _det(x, y, hint=None):
    return Detection(RotatedBox(x, y, 10, 10), 0.9, class_hint=hint)


# -- Kalman -----------------------------------------------------------------

def test_predict_examples():
    m = NoiseModel.constant_velocity()
    s = kf_predict(KalmanState([0, 0, 1, 1], np.eye(4)), m)
    assert s.position == (1.0, 1.0) and s.velocity == (1.0, 1.0)
    still = NoiseModel(transition_matrix(0.0), np.zeros((4, 4)), m.H, m.R, 0.0)
    P = _psd(np.random.default_rng(0))
    s0 = KalmanState([3, 4, 5, 6], P)
    s1 = kf_predict(s0, still)
    assert np.array_equal(s1.x, s0.x) and np.allclose(s1.P, P, atol=1e-12)


def test_transition_and_process_noise_structure():
    F = transition_matrix(0.5)
    assert np.array_equal(F, [[1, 0, 0.5, 0], [0, 1, 0, 0.5], [0, 0, 1, 0], [0, 0, 0, 1]])
    Q = white_acceleration_q(1.0, 0.05)
    assert np.allclose(Q, Q.T) and np.linalg.eigvalsh(Q).min() >= -1e-12
    assert Q[0, 0] == pytest.approx(0.05 / 4) and Q[0, 2] == pytest.approx(0.05 / 2)


def test_predict_and_update_match_dense_oracle():
    rng = np.random.default_rng(1)
    for _ in range(200):
        dt = float(rng.uniform(0.2, 2.0))
        F = np.array([[1, 0, dt, 0], [0, 1, 0, dt], [0, 0, 1, 0], [0, 0, 0, 1.0]])
        Q = np.diag(rng.uniform(0, 1, 4))
        H = np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]])
        R = _psd(rng, 2)
        m = NoiseModel(F, Q, H, R, dt)
        x, P = rng.normal(size=4) * 10, _psd(rng)
        pr = kf_predict(KalmanState(x, P), m)
        xo, Po = dense_predict(x, P, F, Q)
        assert np.allclose(pr.x, xo, atol=1e-9) and np.allclose(pr.P, Po, atol=1e-9)
        z = rng.normal(size=2) * 10
        up = kf_update(KalmanState(x, P), z, m)
        xo, Po = dense_update(x, P, z, H, R)
        assert np.allclose(up.x, xo, atol=1e-9) and np.allclose(up.P, Po, atol=1e-9)
        assert np.trace(up.P[:2, :2]) <= np.trace(P[:2, :2]) + 1e-12


def test_update_examples_and_errors():
    m = NoiseModel.constant_velocity()
    s = KalmanState([5, 6, 1, 2], np.eye(4) * 3)
    same = kf_update(s, (5, 6), m)
    assert np.allclose(same.x, s.x)
    tiny = NoiseModel(m.F, m.Q, m.H, np.eye(2) * 1e-12, 1.0)
    post = kf_update(s, (9, -4), tiny)
    assert np.allclose(post.x[:2], (9, -4), atol=1e-6)
    zero = NoiseModel(m.F, m.Q, m.H, np.zeros((2, 2)), 1.0)
    with pytest.raises(np.linalg.LinAlgError):
        kf_update(KalmanState([0, 0, 0, 0], np.zeros((4, 4))), (1, 1), zero)
    with pytest.raises(ValueError):
        kf_update(s, (np.nan, 0), m)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 40))
def test_covariance_stays_symmetric_psd(seed, n):
    rng = np.random.default_rng(seed)
    m = NoiseModel.constant_velocity(q=float(rng.uniform(0.01, 1)), r_sigma=float(rng.uniform(0.5, 3)))
    s = KalmanState(rng.normal(size=4), _psd(rng))
    for _ in range(n):
        s = kf_predict(s, m)
        if rng.uniform() < 0.7:
            s = kf_update(s, rng.normal(size=2) * 5, m)
        assert np.abs(s.P - s.P.T).max() <= 1e-9
        assert np.linalg.eigvalsh(s.P).min() >= -1e-9


# -- assignment -------------------------------------------------------------

def test_hungarian_examples():
    assert hungarian([[5]]) == [(0, 0)]
    assert hungarian([[1, 2], [2, 1]]) == [(0, 0), (1, 1)]
    assert hungarian([[0, 1], [1, 0]]) == [(0, 0), (1, 1)]
    assert hungarian(np.zeros((0, 3))) == []
    assert hungarian([[math.inf, 1], [math.inf, math.inf]]) == [(0, 1)]
    with pytest.raises(ValueError):
        hungarian([[math.nan]])


def test_hungarian_equals_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(500):
        n, m = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        C = rng.integers(0, 5, size=(n, m)).astype(float)
        C[rng.uniform(size=C.shape) < 0.15] = math.inf
        assert hungarian(C) == brute_assignment(C), C


# -- tracker ----------------------------------------------------------------

def test_coasting_without_detections():
    tr = Tracker(TrackerConfig())
    for f, x in enumerate((0.0, 2.0, 4.0, 6.0)):
        tr.step([_det(x, 0)], f)
    t = tr.tracks[0]
    before, vx = t.position, t.state.velocity[0]
    tr.step([], 4)
    assert t.misses == 1 and t.position[0] == pytest.approx(before[0] + vx)
    assert not t.history[-1].matched


def test_single_step_posterior_between_prediction_and_measurement():
    tr = Tracker(TrackerConfig(confirm_hits=1))
    tr.step([_det(10, 10)], 0)
    t = tr.tracks[0]
    assert t.status == CONFIRMED
    pred = kf_predict(t.state, tr.model).position
    tr.step([_det(14, 10)], 1)
    x = t.position[0]
    assert pred[0] < x < 14


def test_lifecycle_confirm_and_terminate():
    tr = Tracker(TrackerConfig(max_misses=2, confirm_hits=3))
    tr.step([_det(0, 0)], 0)
    t = tr.tracks[0]
    assert t.status == TENTATIVE and t.hits == 1
    tr.step([_det(1, 0)], 1)
    assert t.status == TENTATIVE
    tr.step([_det(2, 0)], 2)
    assert t.status == CONFIRMED and t.ever_confirmed
    tr.step([], 3)
    tr.step([], 4)
    assert t.misses == 2 and t.status == CONFIRMED
    tr.step([], 5)
    assert t.status == TERMINATED and tr.tracks == []
    tr.step([_det(2, 0)], 6)
    assert tr.tracks[0].id == 2  # ids never reused
    assert [x.id for x in tr.confirmed_tracks()] == [1]


def test_gate_blocks_far_detections():
    tr = Tracker(TrackerConfig(gate=5.0))
    tr.step([_det(0, 0)], 0)
    tr.step([_det(50, 0)], 1)
    assert len(tr.tracks) == 2


def test_cv_convergence_noise_free():
    tr = Tracker(TrackerConfig())
    v = (3.0, -1.5)
    for f in range(21):
        tr.step([_det(20 + v[0] * f, 200 + v[1] * f)], f)
    t = tr.tracks[0]
    truth = (20 + v[0] * 20, 200 + v[1] * 20)
    assert math.hypot(t.position[0] - truth[0], t.position[1] - truth[1]) <= 0.5
    assert abs(t.state.velocity[0] - v[0]) <= 0.05 * abs(v[0])
    assert abs(t.state.velocity[1] - v[1]) <= 0.05 * abs(v[1])


@settings(max_examples=40, deadline=None)
@given(st.floats(-6, 6), st.floats(-6, 6), st.integers(1, 10), st.integers(15, 30))
def test_identity_survives_occlusion(vx, vy, k, start):
    tr = Tracker(TrackerConfig())
    ids = set()
    for f in range(start + k + 10):
        dets = [] if start <= f < start + k else [_det(100 + vx * f, 100 + vy * f)]
        live = tr.step(dets, f)
        ids.update(t.id for t in live)
    assert ids == {1}
    frames = [p.frame_index for p in tr.tracks[0].history]
    assert frames == sorted(set(frames))


def test_class_vote_and_csv(tmp_path):
    tr = Tracker(TrackerConfig())
    for f, hint in enumerate(["taxi", "private_car", "taxi", "private_car", "bus"]):
        tr.step([_det(f, 0, hint)], f)
    tr.step([], 5)
    t = tr.tracks[0]
    assert t.vehicle_class == "taxi"  # tie between taxi and private_car goes to the first seen
    rows = track_rows([t])
    assert [r[1] for r in rows] == [0, 1, 2, 3, 4]
    assert len(track_rows([t], include_coasted=True)) == 6
    write_tracks_csv(tmp_path / "t.csv", [t])
    text = (tmp_path / "t.csv").read_text().splitlines()
    assert text[0] == "track_id,frame_index,cx,cy,vx,vy,class,status"
    back = read_tracks_csv(tmp_path / "t.csv")
    assert back[1]["class"] == "taxi" and len(back[1]["points"]) == 5
    assert back[1]["points"][0][5] == TENTATIVE and back[1]["points"][2][5] == CONFIRMED
