"""
Experiments Module
Monte Carlo harness: random configurations, dynamic vs per-frame static
reconstruction, success rates binned by the dynamic separation, and noise /
curvature sweeps
"""

import dataclasses
import time
from dataclasses import dataclass, field
from multiprocessing import Pool
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from tools.forward_model import (
    CurvedTrajectorySpec,
    FourierOperator,
    NoiseSpec,
    add_noise,
    apply_fourier,
    apply_fourier_curved,
)
from tools.phase_space import Configuration, Particle, PhaseSpaceDomain, TimeGrid, dynamic_separation, in_domain
from tools.solver import SolverConfig, match_reconstruction, match_static, noise_floor, solve_dynamic, solve_static
from utils.errors import ConfigError, DomainError, DynamicSpikeError
from utils.logger import setup_logger

logger = setup_logger('Experiments')

DEFAULT_BINS = (20, 0.0, 5.0)
TABLE_COLUMNS = ["bin_lo", "bin_hi", "n", "rate_dynamic", "rate_static", "rate_static3"]

# Redraws allowed when a curved trajectory would leave [0, 1]
MAX_CURVED_DRAWS = 1000


@dataclass(frozen=True)
class TrialSpec:
    """Parameters of one Monte Carlo study"""
    f_c: int = 20
    K: int = 2
    tau: float = 0.5
    n_min: int = 4
    n_max: int = 10
    w_min: float = 0.9
    w_max: float = 1.1
    srf_x: float = 1000.0
    srf_v: float = 1000.0
    delta_w: float = 0.01
    alpha: float = 0.0
    beta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.f_c < 1 or self.K < 1 or not self.tau > 0:
            raise ConfigError("f_c, K must be >= 1 and tau > 0")
        if not 1 <= self.n_min <= self.n_max:
            raise ConfigError(f"need 1 <= n_min <= n_max, got [{self.n_min}, {self.n_max}]")
        if not 0 < self.w_min <= self.w_max:
            raise ConfigError(f"need 0 < w_min <= w_max, got [{self.w_min}, {self.w_max}]")
        if min(self.srf_x, self.srf_v, self.delta_w) <= 0:
            raise ConfigError("srf_x, srf_v and delta_w must be > 0")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.K, self.tau, 1)

    @property
    def delta_x(self) -> float:
        return 1.0 / (self.f_c * self.srf_x)

    @property
    def delta_v(self) -> float:
        return 1.0 / (self.f_c * self.K * self.tau * self.srf_v)

    @property
    def thresholds(self) -> Tuple[float, float, float]:
        return self.delta_x, self.delta_v, self.delta_w

    def replace(self, **changes) -> "TrialSpec":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> Dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "TrialSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown trial keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class ExperimentRecord:
    trial_id: int
    configuration: Configuration
    delta_dyn: float
    dynamic: bool
    static_any: bool
    static_3: bool
    static_successes: int = 0
    timings: Dict[str, float] = field(default_factory=dict)
    error: Optional[str] = None

    def to_dict(self) -> Dict:
        return {
            "trial_id": self.trial_id,
            "configuration": self.configuration.to_dict(),
            "delta_dyn": self.delta_dyn,
            "dynamic": self.dynamic,
            "static_any": self.static_any,
            "static_3": self.static_3,
            "static_successes": self.static_successes,
            "timings": self.timings,
            "error": self.error,
        }


def trial_seed(seed: int, trial_id: int) -> int:
    return int(seed) ^ int(trial_id)


def random_configuration(spec: TrialSpec, rng: np.random.Generator) -> Configuration:
    """N uniform in [n_min, n_max], particles uniform on Omega by rejection, uniform weights"""
    grid = spec.grid
    (x0, x1), (v0, v1) = PhaseSpaceDomain(grid).bounding_box()
    n = int(rng.integers(spec.n_min, spec.n_max + 1))
    particles = []
    while len(particles) < n:
        x = rng.uniform(x0, x1)
        v = rng.uniform(v0, v1)
        if in_domain(x, v, grid):
            particles.append((x, v))
    weights = rng.uniform(spec.w_min, spec.w_max, size=n)
    return Configuration(tuple(Particle((x,), (v,), float(w)) for (x, v), w in zip(particles, weights)), grid)


def _draw_configuration(spec: TrialSpec, rng: np.random.Generator, curvature: Optional[CurvedTrajectorySpec]):
    cfg = random_configuration(spec, rng)
    if curvature is None:
        return cfg
    for _ in range(MAX_CURVED_DRAWS):
        if curvature.stays_inside(cfg):
            return cfg
        cfg = random_configuration(spec, rng)
    raise DomainError(f"no configuration with curvature beta={spec.beta} stayed inside [0, 1]")


def _solver_config(spec: TrialSpec, cfg: Configuration, op: FourierOperator, base: Optional[Dict],
                   frames: int) -> SolverConfig:
    solver = SolverConfig.from_dict(dict(base or {}), tv_bound=cfg.tv_norm).with_tv_bound(cfg.tv_norm)
    if spec.alpha > 0 and solver.residual_tolerance is None:
        solver = solver.replace(residual_tolerance=noise_floor(spec.alpha, frames * (2 * op.f_c + 1)))
    return solver


def run_trial(spec: TrialSpec, rng: np.random.Generator, trial_id: int = 0,
              inject: Optional[Configuration] = None, solver: Optional[Dict] = None) -> ExperimentRecord:
    """
    Synthesize one measurement and score the three procedures

    dynamic: multi-frame solve matched in (x, v, w); static_any / static_3:
    per-frame solves matched in (x, w), successful on at least 1 / 3 frames.
    """
    grid = spec.grid
    op = FourierOperator(spec.f_c, grid)
    curvature = CurvedTrajectorySpec(beta=spec.beta) if spec.beta != 0 else None
    cfg = inject if inject is not None else _draw_configuration(spec, rng, curvature)
    noise_seed = int(rng.integers(0, 2 ** 31 - 1))

    try:
        delta_dyn = dynamic_separation(cfg)
    except DomainError:
        delta_dyn = float("nan")

    timings: Dict[str, float] = {}
    dynamic_ok, successes, error = False, 0, None
    try:
        y = apply_fourier(op, cfg) if curvature is None else apply_fourier_curved(op, cfg, curvature)
        y = add_noise(y, NoiseSpec(spec.alpha, noise_seed))

        start = time.perf_counter()
        recon = solve_dynamic(y, op, _solver_config(spec, cfg, op, solver, grid.n_frames))
        dynamic_ok = match_reconstruction(cfg, recon, spec.thresholds).success
        timings["dynamic"] = time.perf_counter() - start

        start = time.perf_counter()
        static_cfg = _solver_config(spec, cfg, op, solver, 1)
        truth = cfg.trajectories()[:, :, 0]
        for row, k in enumerate(grid.frames):
            found = solve_static(y.frame(k), op, static_cfg)
            if match_static(truth[row], cfg.weights, found, spec.delta_x, spec.delta_w).success:
                successes += 1
        timings["static"] = time.perf_counter() - start
    except (DynamicSpikeError, np.linalg.LinAlgError) as e:
        error = f"{type(e).__name__}: {e}"
        logger.warning(f"⚠️ trial {trial_id} failed: {error}")

    return ExperimentRecord(
        trial_id=trial_id,
        configuration=cfg,
        delta_dyn=delta_dyn,
        dynamic=bool(dynamic_ok),
        static_any=successes >= 1,
        static_3=successes >= 3,
        static_successes=successes,
        timings=timings,
        error=error,
    )


def _trial_job(args) -> ExperimentRecord:
    spec, trial_id, solver = args
    rng = np.random.default_rng(trial_seed(spec.seed, trial_id))
    return run_trial(spec, rng, trial_id, solver=solver)


def campaign_table(records: Sequence[ExperimentRecord], f_c: int,
                   bins: Tuple[int, float, float] = DEFAULT_BINS) -> pd.DataFrame:
    """
    Success rates per bin of delta_dyn * f_c

    Values beyond the last edge are counted in the last bin so counts sum to
    the number of records; empty bins report NaN rates.
    """
    n_bins, lo, hi = int(bins[0]), float(bins[1]), float(bins[2])
    edges = np.linspace(lo, hi, n_bins + 1)
    scaled = np.array([r.delta_dyn * f_c for r in records], dtype=float)
    scaled = np.where(np.isnan(scaled), lo, scaled)
    index = np.clip(np.searchsorted(edges, scaled, side="right") - 1, 0, n_bins - 1)

    verdicts = pd.DataFrame({
        "bin": index,
        "dynamic": [r.dynamic for r in records],
        "static": [r.static_any for r in records],
        "static3": [r.static_3 for r in records],
    })
    grouped = verdicts.groupby("bin").agg(
        n=("dynamic", "size"),
        rate_dynamic=("dynamic", "mean"),
        rate_static=("static", "mean"),
        rate_static3=("static3", "mean"),
    ).reindex(range(n_bins))

    table = pd.DataFrame({
        "bin_lo": edges[:-1],
        "bin_hi": edges[1:],
        "n": grouped["n"].fillna(0).astype(int).to_numpy(),
        "rate_dynamic": grouped["rate_dynamic"].astype(float).to_numpy(),
        "rate_static": grouped["rate_static"].astype(float).to_numpy(),
        "rate_static3": grouped["rate_static3"].astype(float).to_numpy(),
    })
    return table[TABLE_COLUMNS]


def run_campaign(spec: TrialSpec, n_trials: int, bins: Tuple[int, float, float] = DEFAULT_BINS,
                 threads: int = 1, solver: Optional[Dict] = None):
    """
    Run n_trials independent trials (trial i seeded with seed XOR i)

    Returns:
        (records, table)
    """
    if int(n_trials) != n_trials or n_trials < 1:
        raise DomainError(f"n_trials must be >= 1, got {n_trials}")
    jobs = [(spec, trial_id, solver) for trial_id in range(int(n_trials))]
    logger.info(f"🎲 campaign: {n_trials} trials, alpha={spec.alpha}, beta={spec.beta}, threads={threads}")
    if threads > 1:
        with Pool(processes=threads) as pool:
            records = pool.map(_trial_job, jobs)
    else:
        records = [_trial_job(job) for job in jobs]
    table = campaign_table(records, spec.f_c, bins)
    logger.info(f"✅ campaign done: dynamic={np.mean([r.dynamic for r in records]):.3f} "
                f"static={np.mean([r.static_any for r in records]):.3f} "
                f"static3={np.mean([r.static_3 for r in records]):.3f}")
    return records, table


def sweep_noise(spec: TrialSpec, alphas: Sequence[float], n_trials: int, threads: int = 1,
                bins: Tuple[int, float, float] = DEFAULT_BINS, solver: Optional[Dict] = None) -> Dict[float, pd.DataFrame]:
    """One campaign table per noise level"""
    return {float(a): run_campaign(spec.replace(alpha=float(a)), n_trials, bins, threads, solver)[1]
            for a in alphas}


def sweep_curvature(spec: TrialSpec, betas: Sequence[float], n_trials: int, threads: int = 1,
                    bins: Tuple[int, float, float] = DEFAULT_BINS, solver: Optional[Dict] = None) -> Dict[float, pd.DataFrame]:
    """One campaign table per curvature level"""
    return {float(b): run_campaign(spec.replace(beta=float(b)), n_trials, bins, threads, solver)[1]
            for b in betas}


def overall_rates(records: Sequence[ExperimentRecord]) -> Dict[str, float]:
    return {
        "rate_dynamic": float(np.mean([r.dynamic for r in records])),
        "rate_static": float(np.mean([r.static_any for r in records])),
        "rate_static3": float(np.mean([r.static_3 for r in records])),
    }
