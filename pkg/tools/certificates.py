"""
Certificates Module
Dual certificates for d = 1: kernel-interpolated static certificates, static
average certificates, perturbed certificates that push ghost values below 1,
grid verification and the discrete stability-condition checker
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from tools.phase_space import (
    Configuration,
    PhaseSpaceDomain,
    TimeGrid,
    detect_ghosts,
)
from utils.errors import DomainError, NumericalError, SeparationError
from utils.logger import setup_logger

logger = setup_logger('Certificates')

TWO_PI = 2.0 * np.pi

# Minimum wrap-around node separation, in units of 1/f_c
SEPARATION_CONSTANT = 1.87
SEPARATION_TOLERANCE = 1e-12
MAX_CONDITION_NUMBER = 1e10

# Constants of the stability bound
STABILITY_C1 = 0.3353
STABILITY_C2 = 0.1649

INTERPOLATION_TOLERANCE = 1e-8
BOUNDEDNESS_TOLERANCE = 1e-6


def fejer_kernel_coefficients(f_c: int) -> np.ndarray:
    """
    Fourier coefficients g_l, l = -f_c..f_c, of the squared Fejer kernel

    The Fejer factor has order M = floor(f_c/2) + 1, so the product stays
    within the band and K(0) = 1.
    """
    M = f_c // 2 + 1
    j = np.arange(-(M - 1), M)
    triangle = (M - np.abs(j)) / M ** 2
    g = np.convolve(triangle, triangle)
    padded = np.zeros(2 * f_c + 1)
    offset = f_c - (g.size - 1) // 2
    padded[offset:offset + g.size] = g
    return padded


def _wrap(d: np.ndarray) -> np.ndarray:
    d = np.mod(d, 1.0)
    return np.minimum(d, 1.0 - d)


def _as_complex_if_needed(values) -> np.ndarray:
    values = np.asarray(values)
    return values.astype(complex) if np.iscomplexobj(values) else values.astype(float)


def _serialize_scalar(z):
    z = complex(z)
    return float(z.real) if z.imag == 0 else [float(z.real), float(z.imag)]


@dataclass(frozen=True)
class SignVector:
    """Unit-modulus target values eta_i"""
    entries: tuple

    def __post_init__(self):
        entries = tuple(complex(e) if np.iscomplexobj(e) else float(e) for e in self.entries)
        for e in entries:
            if abs(abs(e) - 1.0) > 1e-12:
                raise DomainError(f"sign entries must have unit modulus, got {e}")
        object.__setattr__(self, "entries", entries)

    @classmethod
    def ones(cls, n: int) -> "SignVector":
        return cls(tuple([1.0] * n))

    def as_array(self) -> np.ndarray:
        return _as_complex_if_needed(self.entries)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class StaticCertificate:
    """q~(t) = sum_l c_l exp(2 pi i l t), interpolating gamma with zero slope at the nodes"""
    coefficients: np.ndarray
    nodes: np.ndarray
    values: np.ndarray
    f_c: int
    frame: int = 0
    condition_number: float = float("nan")

    @property
    def frequencies(self) -> np.ndarray:
        return np.arange(-self.f_c, self.f_c + 1)

    def evaluate(self, t, derivative: int = 0) -> np.ndarray:
        """Exact value (or derivative) at positions t"""
        t = np.asarray(t, dtype=float)
        l = self.frequencies
        factor = (2j * np.pi * l) ** derivative * self.coefficients
        return np.exp(2j * np.pi * t[..., None] * l) @ factor

    def to_dict(self) -> Dict:
        return {
            "k": int(self.frame),
            "c": [[float(z.real), float(z.imag)] for z in self.coefficients],
            "gamma": [_serialize_scalar(g) for g in self.values],
            "nodes": [float(t) for t in self.nodes],
        }


def build_static_certificate(nodes: Sequence[float], values: Sequence, f_c: int,
                             frame: int = 0) -> StaticCertificate:
    """
    Interpolate values gamma_i with zero derivative at nodes t_i

    q~(t) = sum_j alpha_j K(t - t_j) + beta_j K'(t - t_j) with K the squared
    Fejer kernel; the 2N x 2N system is solved with derivative unknowns scaled
    by sqrt(|K''(0)|).

    Raises:
        DomainError: f_c < 2N
        SeparationError: nodes closer than 1.87/f_c or an ill-conditioned system
    """
    t = np.mod(np.asarray(nodes, dtype=float).ravel(), 1.0)
    gamma = _as_complex_if_needed(values).ravel()
    n = t.size
    if n < 1 or gamma.size != n:
        raise DomainError("need one value per node and at least one node")
    if f_c < 2 * n:
        raise DomainError(f"f_c={f_c} is below 2N={2 * n}")
    if f_c < 128:
        logger.warning(f"⚠️ f_c={f_c} < 128: interpolation without the boundedness guarantee")

    min_sep = float("inf")
    if n > 1:
        gaps = _wrap(t[:, None] - t[None, :])
        gaps[np.arange(n), np.arange(n)] = np.inf
        min_sep = float(gaps.min())
        if min_sep < SEPARATION_CONSTANT / f_c - SEPARATION_TOLERANCE:
            raise SeparationError(
                f"node separation {min_sep:.6g} is below {SEPARATION_CONSTANT}/f_c = {SEPARATION_CONSTANT / f_c:.6g}",
                min_separation=min_sep)

    g = fejer_kernel_coefficients(f_c)
    l = np.arange(-f_c, f_c + 1)
    scale = np.sqrt(np.sum((TWO_PI * l) ** 2 * g))

    diff = t[:, None] - t[None, :]
    basis = np.exp(2j * np.pi * diff[..., None] * l)

    def kernel(order: int) -> np.ndarray:
        return (basis @ ((2j * np.pi * l) ** order * g)).real

    K0, K1, K2 = kernel(0), kernel(1), kernel(2)
    system = np.block([[K0, K1 / scale], [K1 / scale, K2 / scale ** 2]])
    condition = float(np.linalg.cond(system))
    if not np.isfinite(condition) or condition > MAX_CONDITION_NUMBER:
        raise SeparationError(f"interpolation system is ill-conditioned (cond={condition:.3g})",
                              min_separation=min_sep, condition_number=condition)
    rhs = np.concatenate([gamma, np.zeros(n)])
    solution = np.linalg.solve(system, rhs)
    alpha, beta = solution[:n], solution[n:] / scale

    phase = np.exp(-2j * np.pi * np.outer(l, t))
    coefficients = g * (phase * (alpha[None, :] + 2j * np.pi * l[:, None] * beta[None, :])).sum(axis=1)
    return StaticCertificate(coefficients, t, gamma, int(f_c), int(frame), condition)


@dataclass
class DynamicalCertificate:
    """q(x, v) = mean over k in the frame set of q~_k(x + k tau v)"""
    frames: Dict[int, StaticCertificate]
    grid: TimeGrid
    f_c: int

    @property
    def frame_set(self) -> List[int]:
        return sorted(self.frames)

    def evaluate(self, x, v) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        total = 0
        for k, cert in self.frames.items():
            total = total + cert.evaluate(x + k * self.grid.tau * v)
        return total / len(self.frames)

    def evaluate_grid(self, xs, vs) -> np.ndarray:
        """
        Exact values on the product grid xs x vs, shape (len(xs), len(vs))

        Each frame term factorises: sum_l c_l e^{2 pi i l x} e^{2 pi i l k tau v}.
        """
        xs = np.asarray(xs, dtype=float)
        vs = np.asarray(vs, dtype=float)
        l = np.arange(-self.f_c, self.f_c + 1)
        Ex = np.exp(2j * np.pi * np.outer(xs, l))
        total = np.zeros((xs.size, vs.size), dtype=complex)
        for k, cert in self.frames.items():
            Ev = np.exp(2j * np.pi * np.outer(l, k * self.grid.tau * vs))
            total += (Ex * cert.coefficients[None, :]) @ Ev
        return total / len(self.frames)

    def to_dict(self) -> Dict:
        return {"K_set": self.frame_set, "frames": [self.frames[k].to_dict() for k in self.frame_set]}


def _check_frame_set(cfg: Configuration, frames) -> List[int]:
    if cfg.grid.d != 1:
        raise DomainError("certificates are implemented for d = 1 only")
    frames = sorted({cfg.grid.check_frame(k) for k in (cfg.grid.frames if frames is None else frames)})
    if len(frames) < 3:
        raise DomainError(f"a dynamical certificate needs at least 3 frames, got {len(frames)}")
    return frames


def _build_frames(cfg: Configuration, gammas: Dict[int, np.ndarray], f_c: int) -> DynamicalCertificate:
    certs = {}
    for k, gamma in gammas.items():
        nodes = cfg.positions[:, 0] + k * cfg.grid.tau * cfg.velocities[:, 0]
        certs[k] = build_static_certificate(nodes, gamma, f_c, frame=k)
    return DynamicalCertificate(certs, cfg.grid, int(f_c))


def build_static_average(cfg: Configuration, eta: SignVector, frames=None, f_c: int = 128) -> DynamicalCertificate:
    """Average of per-frame certificates, each interpolating eta at the frame positions"""
    frames = _check_frame_set(cfg, frames)
    if len(eta) != len(cfg):
        raise DomainError(f"{len(eta)} signs for {len(cfg)} particles")
    values = eta.as_array()
    return _build_frames(cfg, {k: values for k in frames}, f_c)


def perturbed_values(epsilon: float, order: Sequence[int]) -> Dict[int, np.ndarray]:
    """
    Per-frame gamma for three particles listed by increasing position

    Outer particles take 1 - eps at frames -1 and 1 and 1 + 2 eps at frame 0;
    the middle particle keeps 1. Every particle's mean stays 1.
    """
    base = {-1: np.array([1 - epsilon, 1.0, 1 - epsilon]),
            0: np.array([1 + 2 * epsilon, 1.0, 1 + 2 * epsilon]),
            1: np.array([1 - epsilon, 1.0, 1 - epsilon])}
    gammas = {}
    for k, row in base.items():
        values = np.empty(3)
        values[list(order)] = row
        gammas[k] = values
    return gammas


def build_perturbed_certificate(cfg: Configuration, eta: SignVector, epsilon: float,
                                f_c: int = 128) -> DynamicalCertificate:
    """Static average with the ghost-breaking gamma assignment (three static equispaced particles, K = 1)"""
    if cfg.grid.K != 1:
        raise DomainError("the perturbed construction needs K = 1")
    if f_c < 128:
        raise DomainError(f"the perturbed construction needs f_c >= 128, got {f_c}")
    if not 0 <= epsilon < 1:
        raise DomainError(f"epsilon must lie in [0, 1), got {epsilon}")
    if len(cfg) != 3 or np.any(cfg.velocities != 0):
        raise DomainError("the perturbed construction needs three static particles")
    order = np.argsort(cfg.positions[:, 0])
    x = cfg.positions[order, 0]
    spacing = x[1] - x[0]
    if abs((x[2] - x[1]) - spacing) > 1e-9:
        raise DomainError("particles must be equispaced")
    if not SEPARATION_CONSTANT / f_c - SEPARATION_TOLERANCE <= spacing < 1:
        raise DomainError(f"spacing {spacing:.6g} outside [{SEPARATION_CONSTANT}/f_c, 1)")
    eta_values = eta.as_array()
    gammas = perturbed_values(epsilon, order)
    gammas = {k: g * eta_values for k, g in gammas.items()}
    return _build_frames(cfg, gammas, f_c)


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------

@dataclass
class VerificationReport:
    interpolation_ok: bool
    bounded_ok: bool
    strict_ok: bool
    interpolation_error: float
    max_abs: float
    margin: float
    grid_resolution: int
    n_samples: int
    n_violations: int
    violations: List[Dict] = field(default_factory=list)
    ghost_values: List[Dict] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.interpolation_ok and self.bounded_ok and self.strict_ok

    def to_dict(self) -> Dict:
        return {
            "passed": self.passed,
            "interpolation_ok": self.interpolation_ok,
            "bounded_ok": self.bounded_ok,
            "strict_ok": self.strict_ok,
            "interpolation_error": self.interpolation_error,
            "max_abs": self.max_abs,
            "margin": self.margin,
            "grid_resolution": self.grid_resolution,
            "n_samples": self.n_samples,
            "n_violations": self.n_violations,
            "violations": self.violations,
            "ghost_values": self.ghost_values,
        }


def phase_metric(x, v, x0, v0, grid: TimeGrid) -> np.ndarray:
    """|x - x0| + K tau |v - v0|"""
    return np.abs(np.asarray(x) - x0) + grid.delta * np.abs(np.asarray(v) - v0)


def verify_certificate(cert: DynamicalCertificate, cfg: Configuration, eta: SignVector,
                       grid_resolution: Optional[int] = None, margin: float = 1e-3,
                       max_listed: int = 100) -> VerificationReport:
    """
    Check interpolation, boundedness and strict boundedness away from the particles

    Samples are the uniform grid restricted to Omega plus the particles and the
    detected ghosts; violations within r_excl of a ghost are labelled "ghost".
    """
    grid = cfg.grid
    minimum = 4 * cert.f_c * grid.n_frames
    n = int(grid_resolution) if grid_resolution is not None else minimum
    if n < minimum:
        raise DomainError(f"grid_resolution {n} is below 4*f_c*(2K+1) = {minimum}")
    r_excl = 0.3 / cert.f_c

    x_true, v_true = cfg.positions[:, 0], cfg.velocities[:, 0]
    at_particles = cert.evaluate(x_true, v_true)
    interpolation_error = float(np.max(np.abs(at_particles - eta.as_array())))

    ghosts = detect_ghosts(cfg, cert.frame_set) if len(cfg) >= len(cert.frame_set) else []
    gx = np.array([g.position[0] for g in ghosts])
    gv = np.array([g.velocity[0] for g in ghosts])

    (x0, x1), (v0, v1) = PhaseSpaceDomain(grid).bounding_box()
    xs, vs = np.linspace(x0, x1, n), np.linspace(v0, v1, n)
    values = np.abs(cert.evaluate_grid(xs, vs))
    X, V = np.meshgrid(xs, vs, indexing="ij")
    a, b = X - grid.delta * V, X + grid.delta * V
    inside = (a >= -1e-12) & (a <= 1 + 1e-12) & (b >= -1e-12) & (b <= 1 + 1e-12)

    sx = np.concatenate([X[inside], x_true, gx])
    sv = np.concatenate([V[inside], v_true, gv])
    sq = np.concatenate([values[inside], np.abs(at_particles), np.abs(cert.evaluate(gx, gv)) if ghosts else []])

    max_abs = float(sq.max())
    near_particle = np.zeros(sx.size, dtype=bool)
    for xi, vi in zip(x_true, v_true):
        near_particle |= phase_metric(sx, sv, xi, vi, grid) < r_excl
    bad = (~near_particle) & (sq > 1 - margin)

    near_ghost = np.zeros(sx.size, dtype=bool)
    for xg, vg in zip(gx, gv):
        near_ghost |= phase_metric(sx, sv, xg, vg, grid) < r_excl

    idx = np.flatnonzero(bad)
    idx = idx[np.argsort(-sq[idx], kind="stable")]
    violations = [{"x": float(sx[i]), "v": float(sv[i]), "value": float(sq[i]),
                   "label": "ghost" if near_ghost[i] else "other"} for i in idx[:max_listed]]
    ghost_values = [dict(g.to_dict(), value=float(abs(cert.evaluate(g.position[0], g.velocity[0]))))
                    for g in ghosts]

    report = VerificationReport(
        interpolation_ok=interpolation_error <= INTERPOLATION_TOLERANCE,
        bounded_ok=max_abs <= 1 + BOUNDEDNESS_TOLERANCE,
        strict_ok=idx.size == 0,
        interpolation_error=interpolation_error,
        max_abs=max_abs,
        margin=float(margin),
        grid_resolution=n,
        n_samples=int(sx.size),
        n_violations=int(idx.size),
        violations=violations,
        ghost_values=ghost_values,
    )
    logger.debug(f"verification: interp={report.interpolation_ok} bounded={report.bounded_ok} "
                 f"strict={report.strict_ok} violations={report.n_violations}")
    return report


def tune_perturbation(cfg: Configuration, f_c: int = 128, target_margin: float = 1e-2,
                      grid_resolution: Optional[int] = None, tolerance: float = 1e-3,
                      upper: float = 0.2) -> float:
    """
    Smallest epsilon in (0, upper] whose perturbed certificate passes
    verification with the requested margin, by bisection
    """
    eta = SignVector.ones(len(cfg))

    def passes(epsilon: float) -> bool:
        cert = build_perturbed_certificate(cfg, eta, epsilon, f_c)
        return verify_certificate(cert, cfg, eta, grid_resolution, target_margin).passed

    if not passes(upper):
        raise NumericalError(f"no epsilon in (0, {upper}] reaches margin {target_margin}")
    lo, hi = 0.0, upper
    while hi - lo > tolerance:
        mid = 0.5 * (lo + hi)
        if passes(mid):
            hi = mid
        else:
            lo = mid
    logger.info(f"🎯 perturbation tuned: epsilon={hi:.4g} for margin {target_margin}")
    return hi


# ---------------------------------------------------------------------------
# Stability conditions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StabilityInputs:
    delta_x: float
    delta_v: float
    f_c: int
    cfg: Configuration

    def __post_init__(self):
        if not self.delta_x > 0 or not self.delta_v > 0:
            raise DomainError("grid widths must be > 0")

    @property
    def grid(self) -> TimeGrid:
        return self.cfg.grid

    @property
    def srf_x(self) -> float:
        return 1.0 / (self.delta_x * self.f_c)


@dataclass
class StabilityReport:
    relation_ok: bool
    separation_ok: bool
    ghost_condition_ok: bool
    margin_bound: float
    min_condition_value: float = float("nan")
    n_samples: int = 0

    def to_dict(self) -> Dict:
        return {
            "relation_ok": self.relation_ok,
            "separation_ok": self.separation_ok,
            "ghost_condition_ok": self.ghost_condition_ok,
            "margin_bound": self.margin_bound,
            "min_condition_value": self.min_condition_value,
            "n_samples": self.n_samples,
        }


def check_stability_conditions(inp: StabilityInputs, grid_resolution: Optional[int] = None) -> StabilityReport:
    """Evaluate the grid-width relation, per-frame separation and the dynamical stability condition"""
    grid = inp.grid
    if grid.d != 1:
        raise DomainError("the stability checker is implemented for d = 1 only")
    cfg, f_c = inp.cfg, inp.f_c
    K, tau = grid.K, grid.tau

    relation_ok = inp.delta_x ** 2 <= K * (K + 1) / 3.0 * tau ** 2 * inp.delta_v ** 2 * (1 + 1e-12)

    traj = cfg.trajectories()[:, :, 0]
    separation_ok = True
    if len(cfg) > 1:
        gaps = _wrap(traj[:, :, None] - traj[:, None, :])
        idx = np.arange(len(cfg))
        gaps[:, idx, idx] = np.inf
        separation_ok = bool(gaps.min() >= SEPARATION_CONSTANT / f_c - SEPARATION_TOLERANCE)

    n = int(grid_resolution) if grid_resolution is not None else 4 * f_c * grid.n_frames
    (x0, x1), (v0, v1) = PhaseSpaceDomain(grid).bounding_box()
    X, V = np.meshgrid(np.linspace(x0, x1, n), np.linspace(v0, v1, n), indexing="ij")
    a, b = X - grid.delta * V, X + grid.delta * V
    inside = (a >= -1e-12) & (a <= 1 + 1e-12) & (b >= -1e-12) & (b <= 1 + 1e-12)
    sx, sv = X[inside], V[inside]
    if len(cfg) >= grid.n_frames:
        ghosts = detect_ghosts(cfg, grid.frames)
        sx = np.concatenate([sx, [g.position[0] for g in ghosts]])
        sv = np.concatenate([sv, [g.velocity[0] for g in ghosts]])

    x_true, v_true = cfg.positions[:, 0], cfg.velocities[:, 0]
    radius = STABILITY_C2 / f_c
    outside = np.ones(sx.size, dtype=bool)
    for xi, vi in zip(x_true, v_true):
        outside &= phase_metric(sx, sv, xi, vi, grid) >= radius
    sx, sv = sx[outside], sv[outside]

    cap = radius ** 2
    total = np.zeros(sx.size)
    for k in grid.frames:
        d2 = (x_true[None, :] - sx[:, None] + k * tau * (v_true[None, :] - sv[:, None])) ** 2
        total += np.minimum(d2.min(axis=1), cap)
    condition = total / grid.n_frames
    min_value = float(condition.min()) if condition.size else float("inf")

    return StabilityReport(
        relation_ok=bool(relation_ok),
        separation_ok=separation_ok,
        ghost_condition_ok=bool(min_value >= inp.delta_x ** 2),
        margin_bound=1.0 - STABILITY_C1 * f_c ** 2 * inp.delta_x ** 2,
        min_condition_value=min_value,
        n_samples=int(sx.size),
    )
