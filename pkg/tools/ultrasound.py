"""
Ultrasound Module
Vessel phantom with stochastic microbubbles, PSF frame synthesis, constant-norm
interval selection, per-window dynamic reconstruction and aggregation into a
super-resolved velocity map next to the B-mode image
"""

import dataclasses
from dataclasses import dataclass, field
from multiprocessing import Pool
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from tools.forward_model import FrameStack, NoiseSpec, PSFOperator, add_noise, render_frame
from tools.phase_space import TimeGrid
from tools.solver import Reconstruction, SolverConfig, noise_floor, solve_dynamic
from utils.errors import ConfigError, DomainError
from utils.logger import setup_logger

logger = setup_logger('Ultrasound')

POINT_COLUMNS = ["x_mm", "y_mm", "vx_mm_s", "vy_mm_s", "window_id"]


# ---------------------------------------------------------------------------
# Phantom
# ---------------------------------------------------------------------------

@dataclass
class Vessel:
    """Polyline centreline (mm), traversed in point order when direction = +1"""
    name: str
    points: np.ndarray
    speed_mm_s: float = 2.0
    direction: int = 1

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim != 2 or self.points.shape[1] != 2 or len(self.points) < 2:
            raise ConfigError(f"vessel {self.name!r} needs at least two (x, y) points")
        if self.direction not in (-1, 1):
            raise ConfigError(f"vessel {self.name!r} direction must be +1 or -1")
        segments = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        self._arc = np.concatenate([[0.0], np.cumsum(segments)])

    @property
    def length(self) -> float:
        return float(self._arc[-1])

    def point_at(self, s) -> np.ndarray:
        """Point at arc length s (clamped to the ends)"""
        s = np.clip(np.asarray(s, dtype=float), 0.0, self.length)
        return np.stack([np.interp(s, self._arc, self.points[:, 0]),
                         np.interp(s, self._arc, self.points[:, 1])], axis=-1)

    def tangent_at(self, s: float) -> np.ndarray:
        """Unit tangent in the flow direction"""
        i = int(np.clip(np.searchsorted(self._arc, s, side="right") - 1, 0, len(self.points) - 2))
        t = self.points[i + 1] - self.points[i]
        return self.direction * t / np.linalg.norm(t)

    def distance(self, p: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Distance from points (n, 2) to the centreline and the arc length of the closest point"""
        p = np.atleast_2d(p)
        a, b = self.points[:-1], self.points[1:]
        ab = b - a
        t = np.clip(np.einsum('nsk,sk->ns', p[:, None, :] - a[None], ab) / np.sum(ab ** 2, axis=1)[None], 0, 1)
        closest = a[None] + t[..., None] * ab[None]
        d = np.linalg.norm(p[:, None, :] - closest, axis=-1)
        j = d.argmin(axis=1)
        rows = np.arange(len(p))
        arc = self._arc[j] + t[rows, j] * np.linalg.norm(ab[j], axis=1)
        return d[rows, j], arc

    def to_dict(self) -> Dict:
        return {"name": self.name, "points": self.points.tolist(),
                "speed_mm_s": float(self.speed_mm_s), "direction": int(self.direction)}

    @classmethod
    def from_dict(cls, data: Dict) -> "Vessel":
        return cls(data["name"], np.asarray(data["points"]), float(data.get("speed_mm_s", 2.0)),
                   int(data.get("direction", 1)))


@dataclass
class VesselPhantom:
    """Vessels inside a rectangular field of view; the first two are the main pair"""
    vessels: List[Vessel]
    field_mm: Tuple[float, float] = (1.0, 1.0)
    pitch_mm: float = 0.04

    def __post_init__(self):
        for v in self.vessels:
            if np.any(v.points < 0) or np.any(v.points[:, 0] > self.field_mm[0]) or \
                    np.any(v.points[:, 1] > self.field_mm[1]):
                raise ConfigError(f"vessel {v.name!r} leaves the field of view")

    @property
    def main_pair(self) -> Tuple[Vessel, Vessel]:
        return self.vessels[0], self.vessels[1]

    def psf_operator(self, sigma: float, K: int, tau: float) -> PSFOperator:
        width = int(round(self.field_mm[0] / self.pitch_mm))
        height = int(round(self.field_mm[1] / self.pitch_mm))
        return PSFOperator(sigma, width, height, self.pitch_mm, TimeGrid(K, tau, 2))

    def nearest(self, p: np.ndarray):
        """(distance, vessel index, arc length) of the closest centreline for each point"""
        dists, arcs = zip(*(v.distance(p) for v in self.vessels))
        dists, arcs = np.stack(dists), np.stack(arcs)
        idx = dists.argmin(axis=0)
        cols = np.arange(dists.shape[1])
        return dists[idx, cols], idx, arcs[idx, cols]

    def to_dict(self) -> Dict:
        return {"field_mm": list(self.field_mm), "pitch_mm": float(self.pitch_mm),
                "vessels": [v.to_dict() for v in self.vessels]}

    @classmethod
    def from_dict(cls, data: Dict) -> "VesselPhantom":
        return cls([Vessel.from_dict(v) for v in data["vessels"]],
                   tuple(data.get("field_mm", (1.0, 1.0))), float(data.get("pitch_mm", 0.04)))


def _curve(x: np.ndarray, offset: float = 0.0) -> np.ndarray:
    """y = 0.45 + 0.15 sin(pi x), shifted by offset along its normal"""
    y = 0.45 + 0.15 * np.sin(np.pi * x)
    slope = 0.15 * np.pi * np.cos(np.pi * x)
    normal = np.stack([-slope, np.ones_like(x)], axis=1) / np.sqrt(1 + slope ** 2)[:, None]
    return np.stack([x, y], axis=1) + offset * normal


def default_phantom(separation_mm: float = 0.03, speed_mm_s: float = 2.0) -> VesselPhantom:
    """
    1 x 1 mm field: two curved vessels separation_mm apart with opposite
    flows, each feeding one branch
    """
    x = np.linspace(0.08, 0.92, 120)
    lower = _curve(x)
    upper = _curve(x, separation_mm)
    lower_branch = np.array([_curve(np.array([0.40]))[0], [0.55, 0.25], [0.70, 0.10]])
    upper_branch = np.array([[0.80, 0.92], [0.70, 0.82], _curve(np.array([0.60]), separation_mm)[0]])
    vessels = [
        Vessel("main_lower", lower, speed_mm_s, 1),
        Vessel("main_upper", upper, speed_mm_s, -1),
        Vessel("branch_lower", lower_branch, speed_mm_s, 1),
        Vessel("branch_upper", upper_branch, speed_mm_s, 1),
    ]
    return VesselPhantom(vessels, (1.0, 1.0), 0.04)


# ---------------------------------------------------------------------------
# Acquisition
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BubbleProcess:
    """Bernoulli spawning per frame and vessel, lifetime 1 + Poisson(mean - 1) frames"""
    activation_probability: float = 0.01
    mean_lifetime: float = 40.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.activation_probability <= 1:
            raise ConfigError(f"activation_probability must lie in [0, 1], got {self.activation_probability}")
        if self.mean_lifetime < 1:
            raise ConfigError(f"mean_lifetime must be >= 1 frame, got {self.mean_lifetime}")

    @classmethod
    def from_dict(cls, data: Dict) -> "BubbleProcess":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown bubble process keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class BubbleTrack:
    """Ground truth of one bubble: frames alive, positions (mm) and velocities (mm/s)"""
    vessel: int
    start_frame: int
    positions: np.ndarray
    velocities: np.ndarray

    @property
    def frames(self) -> np.ndarray:
        return np.arange(self.start_frame, self.start_frame + len(self.positions))


@dataclass
class FrameSequence:
    frames: np.ndarray
    tau: float

    @property
    def duration(self) -> float:
        return len(self.frames) * self.tau

    @property
    def norms(self) -> np.ndarray:
        return np.sqrt(np.sum(self.frames ** 2, axis=(1, 2)))

    def __add__(self, other: "FrameSequence") -> "FrameSequence":
        return FrameSequence(self.frames + other.frames, self.tau)


def simulate_acquisition(phantom: VesselPhantom, process: BubbleProcess, psf: PSFOperator,
                         noise: NoiseSpec, duration: float = 2.0):
    """
    Spawn, move and image bubbles frame by frame

    Bubbles move along their vessel at its speed and vanish when their
    lifetime ends or they run off the end of the centreline.

    Returns:
        (FrameSequence, list of BubbleTrack)
    """
    if not np.allclose(psf.field_mm, phantom.field_mm) or not np.isclose(psf.pitch_mm, phantom.pitch_mm):
        raise DomainError("phantom and PSF use different geometries")
    tau = psf.grid.tau
    n_frames = int(round(duration / tau))
    rng = np.random.default_rng(process.seed)
    field_mm = psf.field_mm

    active: List[Dict] = []
    finished: List[Dict] = []
    frames = np.zeros((n_frames,) + psf.frame_shape)
    for f in range(n_frames):
        for i, vessel in enumerate(phantom.vessels):
            if rng.random() < process.activation_probability:
                lifetime = 1 + int(rng.poisson(process.mean_lifetime - 1))
                active.append({"vessel": i, "start": f, "arc": rng.uniform(0.0, vessel.length),
                               "lifetime": lifetime, "positions": [], "velocities": []})
        still_active, positions = [], []
        for bubble in active:
            vessel = phantom.vessels[bubble["vessel"]]
            s = bubble["arc"] + vessel.direction * vessel.speed_mm_s * (f - bubble["start"]) * tau
            if f - bubble["start"] < bubble["lifetime"] and 0.0 <= s <= vessel.length:
                p = vessel.point_at(s)
                bubble["positions"].append(p)
                bubble["velocities"].append(vessel.speed_mm_s * vessel.tangent_at(s))
                positions.append(p)
                still_active.append(bubble)
            else:
                finished.append(bubble)
        active = still_active
        if positions:
            frames[f] = render_frame(psf, np.array(positions) / field_mm[None, :], np.ones(len(positions)))

    tracks = [BubbleTrack(b["vessel"], b["start"], np.array(b["positions"]).reshape(-1, 2),
                          np.array(b["velocities"]).reshape(-1, 2))
              for b in finished + active if b["positions"]]
    tracks.sort(key=lambda t: (t.start_frame, t.vessel))
    frames = add_noise(frames, noise)
    logger.info(f"🫧 simulated {n_frames} frames with {len(tracks)} bubbles")
    return FrameSequence(frames, tau), tracks


# ---------------------------------------------------------------------------
# Protocol
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FrameInterval:
    """Frames [start, stop) with constant l2 norm, and the windows cut from it"""
    start: int
    stop: int
    windows: Tuple[Tuple[int, int], ...] = ()

    @property
    def length(self) -> int:
        return self.stop - self.start


def constant_norm_runs(norms: np.ndarray, rel_tol: float) -> List[Tuple[int, int]]:
    """Maximal runs [start, stop) where consecutive relative norm change stays <= rel_tol"""
    norms = np.asarray(norms, dtype=float)
    if norms.size == 0:
        return []
    prev, curr = norms[:-1], norms[1:]
    with np.errstate(divide="ignore", invalid="ignore"):
        change = np.where(prev > 0, np.abs(curr - prev) / prev, np.where(curr > 0, np.inf, 0.0))
    breaks = np.flatnonzero(change > rel_tol) + 1
    edges = np.concatenate([[0], breaks, [norms.size]])
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


def select_intervals(seq: FrameSequence, window: int = 5, rel_tol: float = 0.02) -> List[FrameInterval]:
    """
    Constant-norm intervals of at least `window` frames, each split into
    centred non-overlapping windows of exactly `window` frames
    """
    if window < 3 or window % 2 == 0:
        raise DomainError(f"window must be an odd length >= 3, got {window}")
    intervals = []
    for start, stop in constant_norm_runs(seq.norms, rel_tol):
        length = stop - start
        if length < window:
            continue
        count = length // window
        offset = start + (length - count * window) // 2
        windows = tuple((offset + i * window, offset + (i + 1) * window) for i in range(count))
        intervals.append(FrameInterval(start, stop, windows))
    return intervals


def estimate_tv_bound(frame: np.ndarray, psf: PSFOperator, headroom: float = 1.2) -> float:
    """Total mass estimate: frame energy over one unit bubble's energy, plus headroom"""
    return headroom * float(np.sum(frame ** 2)) / psf.unit_energy()


@dataclass(frozen=True)
class WindowSettings:
    """Solver settings shared by all windows"""
    candidate_grid: Tuple[int, int] = (26, 5)
    velocity_bound_mm_s: float = 4.0
    max_outer_iterations: int = 20
    refine_steps: int = 100
    noise_alpha: float = 0.0

    @classmethod
    def from_dict(cls, data: Dict) -> "WindowSettings":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown window keys: {sorted(unknown)}")
        values = dict(data)
        if "candidate_grid" in values:
            values["candidate_grid"] = tuple(values["candidate_grid"])
        return cls(**values)

    def solver_config(self, tv_bound: float, psf: PSFOperator) -> SolverConfig:
        tolerance = None
        if self.noise_alpha > 0:
            entries = psf.grid.n_frames * psf.width * psf.height
            tolerance = 1.05 * noise_floor(self.noise_alpha, entries, complex_data=False)
        return SolverConfig(
            tv_bound=tv_bound,
            max_spikes=max(4, int(np.ceil(tv_bound)) + 3),
            max_outer_iterations=self.max_outer_iterations,
            candidate_grid=self.candidate_grid,
            refine_steps=self.refine_steps,
            residual_tolerance=tolerance,
            velocity_bound=self.velocity_bound_mm_s / float(psf.field_mm.max()),
        )


def reconstruct_window(frames: np.ndarray, psf: PSFOperator, solver_cfg: SolverConfig) -> Reconstruction:
    """Dynamic PSF reconstruction of one window of exactly 2K+1 frames"""
    frames = np.asarray(frames, dtype=float)
    if frames.shape[0] != psf.grid.n_frames:
        raise DomainError(f"window has {frames.shape[0]} frames, expected {psf.grid.n_frames}")
    return solve_dynamic(FrameStack(frames, psf.header()), psf, solver_cfg)


def _window_job(args) -> Reconstruction:
    frames, psf, solver_cfg = args
    return reconstruct_window(frames, psf, solver_cfg)


def aggregate(recons: Sequence[Tuple[int, Reconstruction]], psf: PSFOperator,
              min_weight: float = 0.5) -> pd.DataFrame:
    """Scatter of recovered centre-frame positions (mm) and velocities (mm/s)"""
    rows = []
    for window_id, recon in recons:
        for p in recon.particles:
            if abs(p.weight) < min_weight:
                continue
            x = np.asarray(p.position) * psf.field_mm
            v = np.asarray(p.velocity) * psf.field_mm
            rows.append((float(x[0]), float(x[1]), float(v[0]), float(v[1]), int(window_id)))
    return pd.DataFrame(rows, columns=POINT_COLUMNS)


def bmode(seq: FrameSequence) -> np.ndarray:
    """Pixelwise mean over all frames"""
    return seq.frames.mean(axis=0)


@dataclass
class UltrasoundResult:
    points: pd.DataFrame
    bmode: np.ndarray
    sequence: FrameSequence
    tracks: List[BubbleTrack]
    intervals: List[FrameInterval]
    windows: List[Tuple[int, int]] = field(default_factory=list)
    skipped_windows: int = 0


def run_protocol(seq: FrameSequence, psf: PSFOperator, settings: WindowSettings,
                 rel_tol: float = 0.02, min_weight: float = 0.5, threads: int = 1):
    """
    Interval selection, per-window reconstruction and aggregation

    Windows whose centre frame holds less than half a unit bubble's energy are skipped.

    Returns:
        (points, intervals, processed windows, skipped count)
    """
    intervals = select_intervals(seq, psf.grid.n_frames, rel_tol)
    unit = psf.unit_energy()
    jobs, windows, skipped = [], [], 0
    for interval in intervals:
        for start, stop in interval.windows:
            chunk = seq.frames[start:stop]
            centre = chunk[psf.grid.K]
            if float(np.sum(centre ** 2)) < 0.5 * unit:
                skipped += 1
                continue
            jobs.append((chunk, psf, settings.solver_config(estimate_tv_bound(centre, psf), psf)))
            windows.append((start, stop))
    logger.info(f"🪟 {len(intervals)} intervals, {len(jobs)} windows to reconstruct, {skipped} skipped")

    if threads > 1 and len(jobs) > 1:
        with Pool(processes=threads) as pool:
            recons = pool.map(_window_job, jobs)
    else:
        recons = [_window_job(job) for job in jobs]
    points = aggregate(list(enumerate(recons)), psf, min_weight)
    return points, intervals, windows, skipped


def run_ultrasound(phantom: VesselPhantom, process: BubbleProcess, psf: PSFOperator, noise: NoiseSpec,
                   settings: Optional[WindowSettings] = None, duration: float = 2.0,
                   rel_tol: float = 0.02, min_weight: float = 0.5, threads: int = 1) -> UltrasoundResult:
    """Synthesize, select, reconstruct, aggregate and average"""
    settings = settings or WindowSettings(noise_alpha=noise.alpha)
    seq, tracks = simulate_acquisition(phantom, process, psf, noise, duration)
    points, intervals, windows, skipped = run_protocol(seq, psf, settings, rel_tol, min_weight, threads)
    return UltrasoundResult(points, bmode(seq), seq, tracks, intervals, windows, skipped)


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------

def score_reconstruction(points: pd.DataFrame, phantom: VesselPhantom,
                         distance_mm: float = 0.02) -> Dict[str, float]:
    """Share of points near a true centreline and share moving with its flow"""
    if points.empty:
        return {"n_points": 0, "fraction_near_centerline": float("nan"), "fraction_correct_flow": float("nan")}
    xy = points[["x_mm", "y_mm"]].to_numpy()
    velocity = points[["vx_mm_s", "vy_mm_s"]].to_numpy()
    dist, vessel_idx, arcs = phantom.nearest(xy)
    tangents = np.array([phantom.vessels[i].tangent_at(s) for i, s in zip(vessel_idx, arcs)])
    correct = np.sum(tangents * velocity, axis=1) > 0
    return {
        "n_points": int(len(points)),
        "fraction_near_centerline": float(np.mean(dist <= distance_mm)),
        "fraction_correct_flow": float(np.mean(correct)),
    }


def bmode_cross_profile(image: np.ndarray, phantom: VesselPhantom, x_mm: float) -> Dict[str, float]:
    """
    Vertical B-mode profile through the two main vessels at x_mm

    valley_depth is (smaller centreline value - minimum between them) / smaller
    centreline value; 0 means no valley.
    """
    column = int(np.clip(np.floor(x_mm / phantom.pitch_mm), 0, image.shape[1] - 1))
    centres_y = (np.arange(image.shape[0]) + 0.5) * phantom.pitch_mm
    profile = image[:, column]
    ys = sorted(float(np.interp(x_mm, v.points[:, 0], v.points[:, 1])) for v in phantom.main_pair)
    between = np.linspace(ys[0], ys[1], 64)
    inside = np.interp(between, centres_y, profile)
    peaks = [float(np.interp(y, centres_y, profile)) for y in ys]
    reference = min(peaks)
    valley = float(inside.min())
    depth = (reference - valley) / reference if reference > 0 else 0.0
    return {"x_mm": float(x_mm), "y_lower_mm": ys[0], "y_upper_mm": ys[1],
            "peak_lower": peaks[0], "peak_upper": peaks[1], "valley": valley,
            "valley_depth": float(max(depth, 0.0))}
