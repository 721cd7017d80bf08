import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aerotrack.geometry import (DegenerateConfigurationError, Homography, estimate_homography, estimate_speed,
                                project, project_many, read_calibration)


def _random_h(rng):
    while True:
        m = np.eye(3) + rng.normal(scale=[[0.3, 0.3, 20], [0.3, 0.3, 20], [1e-4, 1e-4, 0]])
        m[0, 0] += 0.5
        m[1, 1] += 0.5
        if abs(np.linalg.det(m)) > 0.1:
            return Homography(m)


def _safe_points(rng, h, n):
    """Pixel points whose projective denominator stays well away from zero."""
    out = []
    while len(out) < n:
        p = rng.uniform(0, 400, 2)
        if abs(h.h[2, :2] @ p + h.h[2, 2]) > 0.2:
            out.append(p)
    return np.array(out)


def _cross(a, b):
    return a[0] * b[1] - a[1] * b[0]


def test_scaling_recovered():
    pairs = [((0, 0), (0, 0)), ((100, 0), (10, 0)), ((0, 100), (0, 10)), ((100, 100), (10, 10))]
    H = estimate_homography(pairs)
    assert np.allclose(H.h, np.diag([0.1, 0.1, 1]), atol=1e-9)
    assert H.rms <= 1e-9


def test_exact_projective_sets():
    rng = np.random.default_rng(3)
    for _ in range(100):
        h = _random_h(rng)
        px = _safe_points(rng, h, int(rng.integers(4, 12)))
        if len(px) == 4 and any(
                abs(_cross(px[j] - px[i], px[k] - px[i])) < 1.0
                for i, j, k in [(0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)]):
            continue
        world = project_many(h, px)
        est = estimate_homography(list(zip(map(tuple, px), map(tuple, world))))
        assert est.rms <= 1e-6
        assert np.allclose(project_many(est, px), world, rtol=1e-7, atol=1e-7)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31), st.floats(0, 400), st.floats(0, 400))
def test_round_trip(seed, x, y):
    h = _random_h(np.random.default_rng(seed))
    if abs(h.h[2, 0] * x + h.h[2, 1] * y + h.h[2, 2]) < 0.2:
        return
    w = project(h, (x, y))
    back = project(h.inverse(), w)
    assert abs(back[0] - x) <= 1e-9 and abs(back[1] - y) <= 1e-9


def test_degenerate_inputs():
    with pytest.raises(DegenerateConfigurationError):
        estimate_homography([((0, 0), (0, 0))] * 3)
    with pytest.raises(DegenerateConfigurationError) as err:
        estimate_homography([((0, 0), (0, 0)), ((1, 1), (1, 0)), ((2, 2), (2, 0)), ((0, 5), (0, 1))])
    msg = str(err.value)
    assert "(0, 0)" in msg and "(1, 1)" in msg and "(2, 2)" in msg and "(0, 5)" not in msg
    with pytest.raises(DegenerateConfigurationError):
        Homography(np.zeros((3, 3)))


def test_calibration_file(tmp_path):
    p = tmp_path / "cal.txt"
    p.write_text("# px py wx wy\n0 0 0 0\n100 0 5 0  # corner\n\n0 100 0 5\n100 100 5 5\n")
    H = read_calibration(p)
    assert project(H, (50, 20)) == pytest.approx((2.5, 1.0), abs=1e-9)
    p.write_text("0 0 0\n")
    with pytest.raises(ValueError, match=":1:"):
        read_calibration(p)


def test_speed_reference_case():
    H = Homography.scaling(0.1)
    pos = [(f, (10.0 * f, 50.0)) for f in range(30)]
    out = estimate_speed(pos, H, fps=25, window=12)
    assert out[0][0] == 12 and len(out) == 18
    assert all(abs(v - 90.0) <= 0.1 for _, v in out)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.2, 15), st.floats(0, 2 * math.pi), st.integers(1, 20))
def test_constant_velocity_speed_within_2pct(seed, speed_px, heading, window):
    rng = np.random.default_rng(seed)
    h = _random_h(rng)
    w0 = np.array(project(h, (200.0, 200.0)))
    vel = np.array([math.cos(heading), math.sin(heading)]) * speed_px * 0.05  # metres per frame
    world = [w0 + vel * f for f in range(40)]
    try:
        px = [project(h.inverse(), w) for w in world]
    except ValueError:
        return
    truth = np.hypot(*vel) * 25 * 3.6
    for _, v in estimate_speed(list(enumerate(px)), h, fps=25, window=window):
        assert abs(v - truth) <= 0.02 * truth + 1e-9


@pytest.mark.parametrize("window", [1, 2, 3, 4, 5])
def test_circular_motion(window):
    H = Homography.scaling(0.1)
    r, omega = 100.0, 0.05  # px, rad/frame
    pos = [(f, (200 + r * math.cos(omega * f), 200 + r * math.sin(omega * f))) for f in range(100)]
    truth = r * omega * 0.1 * 25 * 3.6
    for _, v in estimate_speed(pos, H, fps=25, window=window):
        assert abs(v - truth) <= 0.02 * truth


def test_subsampling_invariance():
    H = Homography.scaling(0.1)
    pos = [(f, (4.0 * f, 2.0 * f)) for f in range(60)]
    full = dict(estimate_speed(pos, H, fps=25, window=12))
    half = dict(estimate_speed(pos[::2], H, fps=25, window=12))
    for f, v in half.items():
        assert v == pytest.approx(full[f], rel=1e-9)


def test_speed_edge_cases():
    H = Homography.scaling(0.1)
    with pytest.raises(ValueError):
        estimate_speed([(0, (0, 0))], H, 25)
    with pytest.raises(ValueError):
        estimate_speed([(0, (0, 0)), (1, (1, 0))], H, 0)
    short = estimate_speed([(0, (0, 0)), (1, (10, 0)), (2, (20, 0))], H, 25, window=12)
    assert short == [(2, pytest.approx(90.0))]
    still = estimate_speed([(f, (5.0, 5.0)) for f in range(20)], H, 25, window=5)
    assert all(v == 0.0 for _, v in still)
