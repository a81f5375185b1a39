import numpy as np
import pandas as pd
import pytest

from tools.forward_model import NoiseSpec, render_frame
from tools.ultrasound import (
    POINT_COLUMNS,
    BubbleProcess,
    FrameSequence,
    VesselPhantom,
    WindowSettings,
    aggregate,
    bmode,
    bmode_cross_profile,
    constant_norm_runs,
    default_phantom,
    estimate_tv_bound,
    reconstruct_window,
    run_ultrasound,
    score_reconstruction,
    select_intervals,
    simulate_acquisition,
)
from utils.errors import ConfigError, DomainError

TAU = 0.002


@pytest.fixture
def phantom():
    return default_phantom()


@pytest.fixture
def psf(phantom):
    return phantom.psf_operator(0.04, 2, TAU)


def _window(psf, start_mm, velocity_mm_s):
    """Five noiseless frames of one unit bubble moving in a straight line"""
    t = psf.grid.frames * psf.grid.tau
    positions = np.asarray(start_mm)[None, :] + t[:, None] * np.asarray(velocity_mm_s)[None, :]
    return np.stack([render_frame(psf, p[None, :] / psf.field_mm, [1.0]) for p in positions])


def test_default_phantom_layout(phantom):
    names = [v.name for v in phantom.vessels]
    assert names == ["main_lower", "main_upper", "branch_lower", "branch_upper"]
    lower, upper = phantom.main_pair
    assert (lower.direction, upper.direction) == (1, -1)
    distance, _ = lower.distance(upper.points[60:61])
    assert distance[0] == pytest.approx(0.03, abs=2e-3)


def test_phantom_round_trip(phantom):
    again = VesselPhantom.from_dict(phantom.to_dict())
    assert [v.name for v in again.vessels] == [v.name for v in phantom.vessels]
    assert np.allclose(again.vessels[0].points, phantom.vessels[0].points)


def test_vessel_outside_field_is_rejected():
    with pytest.raises(ConfigError):
        VesselPhantom.from_dict({"vessels": [{"name": "out", "points": [[0.5, 0.5], [1.5, 0.5]]}]})


def test_psf_geometry(psf):
    assert psf.frame_shape == (25, 25)
    assert psf.field_mm == pytest.approx([1.0, 1.0])


def test_zero_activation_gives_pure_noise(phantom, psf):
    process = BubbleProcess(activation_probability=0.0, seed=1)
    seq, tracks = simulate_acquisition(phantom, process, psf, NoiseSpec(0.0, 2), duration=0.05)
    assert tracks == []
    assert len(seq.frames) == 25
    assert np.all(seq.frames == 0)


def test_bubbles_move_at_vessel_speed(phantom, psf):
    process = BubbleProcess(activation_probability=0.2, mean_lifetime=40, seed=3)
    _, tracks = simulate_acquisition(phantom, process, psf, NoiseSpec(0.0, 0), duration=0.04)
    assert tracks
    for track in tracks:
        if len(track.positions) < 2:
            continue
        steps = np.linalg.norm(np.diff(track.positions, axis=0), axis=1)
        assert steps == pytest.approx(np.full(steps.size, 2.0 * TAU), abs=2e-4)
        assert np.linalg.norm(track.velocities, axis=1) == pytest.approx(np.full(len(track.velocities), 2.0))


def test_frame_norm_grows_when_bubble_appears(phantom, psf):
    process = BubbleProcess(activation_probability=0.3, mean_lifetime=100, seed=5)
    seq, tracks = simulate_acquisition(phantom, process, psf, NoiseSpec(0.0, 0), duration=0.02)
    first = min(t.start_frame for t in tracks)
    if first > 0:
        assert seq.norms[first] > seq.norms[first - 1]
    assert seq.norms[first] > 0


def test_bubble_process_validation():
    with pytest.raises(ConfigError):
        BubbleProcess(activation_probability=1.5)
    with pytest.raises(ConfigError):
        BubbleProcess.from_dict({"rate": 0.1})


def test_constant_sequence_is_one_interval():
    seq = FrameSequence(np.ones((20, 4, 4)), TAU)
    intervals = select_intervals(seq, window=5)
    assert [(i.start, i.stop) for i in intervals] == [(0, 20)]
    assert intervals[0].windows == ((0, 5), (5, 10), (10, 15), (15, 20))


def test_norm_jump_splits_intervals():
    frames = np.ones((20, 4, 4))
    frames[12:] *= 2.0
    assert constant_norm_runs(np.sqrt((frames ** 2).sum(axis=(1, 2))), 0.02) == [(0, 12), (12, 20)]
    intervals = select_intervals(FrameSequence(frames, TAU), window=5)
    assert [(i.start, i.stop) for i in intervals] == [(0, 12), (12, 20)]
    # windows are centred inside each interval
    assert intervals[0].windows == ((1, 6), (6, 11))
    assert intervals[1].windows == ((13, 18),)


def test_noise_below_tolerance_breaks_intervals():
    rng = np.random.default_rng(0)
    seq = FrameSequence(rng.standard_normal((40, 8, 8)), TAU)
    intervals = select_intervals(seq, window=5, rel_tol=1e-6)
    assert intervals == []


def test_select_intervals_needs_odd_window():
    with pytest.raises(DomainError):
        select_intervals(FrameSequence(np.ones((10, 2, 2)), TAU), window=4)


def test_static_bubble_window_round_trip(psf):
    start = np.array([12.5, 10.5]) * psf.pitch_mm
    frames = _window(psf, start, (0.0, 0.0))
    settings = WindowSettings()
    recon = reconstruct_window(frames, psf, settings.solver_config(estimate_tv_bound(frames[2], psf), psf))
    points = aggregate([(0, recon)], psf)
    assert len(points) == 1
    assert points.loc[0, "x_mm"] == pytest.approx(start[0], abs=1e-3)
    assert points.loc[0, "y_mm"] == pytest.approx(start[1], abs=1e-3)
    assert points.loc[0, "vx_mm_s"] == pytest.approx(0.0, abs=1e-3)
    assert points.loc[0, "vy_mm_s"] == pytest.approx(0.0, abs=1e-3)


def test_moving_bubble_window_speed(psf):
    frames = _window(psf, (0.5, 0.5), (2.0, 0.0))
    settings = WindowSettings()
    recon = reconstruct_window(frames, psf, settings.solver_config(estimate_tv_bound(frames[2], psf), psf))
    points = aggregate([(0, recon)], psf)
    assert len(points) == 1
    speed = np.hypot(points.loc[0, "vx_mm_s"], points.loc[0, "vy_mm_s"])
    assert speed == pytest.approx(2.0, rel=0.05)


def test_window_length_is_checked(psf):
    with pytest.raises(DomainError):
        reconstruct_window(np.zeros((3, 25, 25)), psf, WindowSettings().solver_config(1.0, psf))


def test_aggregate_empty():
    points = aggregate([], None)
    assert points.empty
    assert list(points.columns) == POINT_COLUMNS


def test_bmode_scales_with_time_alive(psf):
    image = render_frame(psf, np.array([[0.5, 0.5]]), [1.0])
    frames = np.zeros((10, 25, 25))
    frames[:4] = image
    assert np.allclose(bmode(FrameSequence(frames, TAU)), image * 0.4)


def test_score_reconstruction_on_centreline(phantom):
    lower = phantom.vessels[0]
    s = np.array([0.2, 0.4, 0.6])
    xy = lower.point_at(s)
    velocity = np.array([2.0 * lower.tangent_at(si) for si in s])
    points = pd.DataFrame({"x_mm": xy[:, 0], "y_mm": xy[:, 1], "vx_mm_s": velocity[:, 0],
                           "vy_mm_s": velocity[:, 1], "window_id": [0, 1, 2]})
    score = score_reconstruction(points, phantom)
    assert score["fraction_near_centerline"] == pytest.approx(1.0)
    assert score["fraction_correct_flow"] == pytest.approx(1.0)


def test_bmode_unresolved_vessels_have_no_valley(phantom, psf):
    lower, upper = phantom.main_pair
    points = np.concatenate([lower.points, upper.points])
    image = render_frame(psf, points / psf.field_mm, np.ones(len(points)))
    profile = bmode_cross_profile(image, phantom, 0.5)
    assert profile["valley_depth"] <= 0.1


def test_zero_activation_pipeline_gives_empty_cloud(phantom, psf):
    result = run_ultrasound(phantom, BubbleProcess(activation_probability=0.0), psf, NoiseSpec(0.01, 1),
                            duration=0.05)
    assert result.points.empty
    assert result.windows == []


@pytest.mark.slow
def test_full_protocol_acceptance(phantom, psf):
    result = run_ultrasound(phantom, BubbleProcess(seed=0), psf, NoiseSpec(0.01, 1), duration=2.0, threads=4)
    profile = bmode_cross_profile(result.bmode, phantom, 0.5)
    score = score_reconstruction(result.points, phantom)
    assert profile["valley_depth"] <= 0.1
    assert score["n_points"] > 0
    assert score["fraction_near_centerline"] >= 0.8
    assert score["fraction_correct_flow"] >= 0.8


def test_bmode_is_linear():
    rng = np.random.default_rng(6)
    first = FrameSequence(rng.normal(size=(7, 25, 25)), TAU)
    second = FrameSequence(rng.normal(size=(7, 25, 25)), TAU)
    assert np.allclose(bmode(first + second), bmode(first) + bmode(second))
    assert np.allclose(bmode(FrameSequence(3.0 * first.frames, TAU)), 3.0 * bmode(first))


def test_curved_segment_bubble_is_recovered(psf):
    # beta = a * tau * K / (2 |v|) = 0.01, acceleration normal to the motion
    speed = 2.0
    accel = 2 * speed * 0.01 / (TAU * psf.grid.K)
    t = psf.grid.frames * psf.grid.tau
    start = np.array([0.5, 0.5])
    path = start[None, :] + np.outer(t, (speed, 0.0)) + 0.5 * np.outer(t ** 2, (0.0, accel))
    frames = np.stack([render_frame(psf, p[None, :] / psf.field_mm, [1.0]) for p in path])
    recon = reconstruct_window(frames, psf, WindowSettings().solver_config(estimate_tv_bound(frames[2], psf), psf))
    points = aggregate([(0, recon)], psf)
    assert len(points) == 1
    assert np.hypot(points.loc[0, "x_mm"] - 0.5, points.loc[0, "y_mm"] - 0.5) <= 0.01
    assert np.hypot(points.loc[0, "vx_mm_s"], points.loc[0, "vy_mm_s"]) == pytest.approx(speed, rel=0.1)


@pytest.mark.slow
def test_isolated_bubble_windows_match_truth(psf):
    rng = np.random.default_rng(12)
    settings = WindowSettings()
    hits, trials = 0, 40
    for _ in range(trials):
        start = rng.uniform(0.3, 0.7, size=2)
        angle = rng.uniform(0, 2 * np.pi)
        velocity = 2.0 * np.array([np.cos(angle), np.sin(angle)])
        frames = _window(psf, start, velocity)
        recon = reconstruct_window(frames, psf, settings.solver_config(estimate_tv_bound(frames[2], psf), psf))
        points = aggregate([(0, recon)], psf)
        if len(points) != 1:
            continue
        position_error = np.hypot(points.loc[0, "x_mm"] - start[0], points.loc[0, "y_mm"] - start[1])
        velocity_error = np.hypot(points.loc[0, "vx_mm_s"] - velocity[0], points.loc[0, "vy_mm_s"] - velocity[1])
        hits += position_error <= 0.01 and velocity_error <= 0.1
    assert hits / trials >= 0.95
