"""
Forward Model Module
Lifted low-pass Fourier operator, Gaussian PSF frame operator, correlation
functionals used by the solver, noise injection and curved trajectories
"""

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple, Union

import numpy as np

from tools.phase_space import Configuration, TimeGrid
from utils.errors import DomainError, NumericalError
from utils.logger import setup_logger

logger = setup_logger('ForwardModel')

TWO_PI = 2.0 * np.pi


# ---------------------------------------------------------------------------
# Fourier measurements (d = 1)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FourierOperator:
    """Lifted low-pass operator: frequencies -f_c..f_c observed at every frame"""
    f_c: int
    grid: TimeGrid

    def __post_init__(self):
        if isinstance(self.f_c, bool) or int(self.f_c) != self.f_c or self.f_c < 1:
            raise DomainError(f"f_c must be a positive integer, got {self.f_c}")
        if self.grid.d != 1:
            raise DomainError("the Fourier operator is defined for d = 1")

    @property
    def frequencies(self) -> np.ndarray:
        return np.arange(-self.f_c, self.f_c + 1)

    @property
    def shape(self) -> Tuple[int, int]:
        """(frames, frequencies)"""
        return self.grid.n_frames, 2 * self.f_c + 1

    def butterfly_set(self) -> np.ndarray:
        """
        Observed (space-frequency, velocity-frequency) pairs (l, k*tau*l)

        One row per tensor entry, frame-major, shape ((2K+1)(2f_c+1), 2).
        """
        l = self.frequencies.astype(float)
        kt = self.grid.frames * self.grid.tau
        return np.stack([np.tile(l, kt.size), np.outer(kt, l).ravel()], axis=1)

    def phases(self, x, v) -> np.ndarray:
        """2*pi*l*(x + k*tau*v) for many points, shape (n, 2K+1, 2f_c+1)"""
        x = np.atleast_1d(np.asarray(x, dtype=float)).ravel()
        v = np.atleast_1d(np.asarray(v, dtype=float)).ravel()
        pairs = self.butterfly_set()
        theta = TWO_PI * (np.outer(x, pairs[:, 0]) + np.outer(v, pairs[:, 1]))
        return theta.reshape((x.size,) + self.shape)

    def atoms(self, x, v) -> np.ndarray:
        """Measurements of unit particles at (x, v), shape (n, 2K+1, 2f_c+1)"""
        return np.exp(-1j * self.phases(x, v))


@dataclass
class MeasurementTensor:
    """Complex Fourier data, values[k + K, l + f_c]"""
    values: np.ndarray
    f_c: int
    K: int
    tau: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        expected = (2 * self.K + 1, 2 * self.f_c + 1)
        if self.values.shape != expected:
            raise DomainError(f"measurement shape {self.values.shape} does not match header {expected}")

    @classmethod
    def zeros(cls, op: FourierOperator) -> "MeasurementTensor":
        return cls(np.zeros(op.shape, dtype=complex), op.f_c, op.grid.K, op.grid.tau)

    def _check(self, other: "MeasurementTensor"):
        if (self.f_c, self.K, self.tau) != (other.f_c, other.K, other.tau):
            raise DomainError("measurement headers differ")

    def __add__(self, other: "MeasurementTensor") -> "MeasurementTensor":
        self._check(other)
        return MeasurementTensor(self.values + other.values, self.f_c, self.K, self.tau)

    def __sub__(self, other: "MeasurementTensor") -> "MeasurementTensor":
        self._check(other)
        return MeasurementTensor(self.values - other.values, self.f_c, self.K, self.tau)

    def __mul__(self, scalar) -> "MeasurementTensor":
        return MeasurementTensor(self.values * scalar, self.f_c, self.K, self.tau)

    __rmul__ = __mul__

    def inner(self, other: "MeasurementTensor") -> complex:
        """sum conj(self) * other"""
        self._check(other)
        return complex(np.vdot(self.values, other.values))

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def frame(self, k: int) -> np.ndarray:
        """Frequency vector of frame k"""
        if int(k) != k or abs(k) > self.K:
            raise DomainError(f"frame index {k} outside -{self.K}..{self.K}")
        return self.values[int(k) + self.K].copy()

    def is_conjugate_symmetric(self, tol: float = 1e-12) -> bool:
        scale = max(1.0, float(np.abs(self.values).max(initial=0.0)))
        return bool(np.abs(self.values[:, ::-1] - np.conj(self.values)).max(initial=0.0) <= tol * scale)

    def header(self) -> Dict:
        return {"f_c": int(self.f_c), "K": int(self.K), "tau": float(self.tau)}

    def matches(self, op: FourierOperator) -> bool:
        return (self.f_c, self.K) == (op.f_c, op.grid.K) and np.isclose(self.tau, op.grid.tau)

    def to_dict(self) -> Dict:
        flat = self.values.ravel()  # row-major: k outer, l inner
        return dict(self.header(), values=[[float(z.real), float(z.imag)] for z in flat])

    @classmethod
    def from_dict(cls, data: Dict) -> "MeasurementTensor":
        f_c, K = int(data["f_c"]), int(data["K"])
        pairs = np.asarray(data["values"], dtype=float).reshape(-1, 2)
        values = (pairs[:, 0] + 1j * pairs[:, 1]).reshape(2 * K + 1, 2 * f_c + 1)
        return cls(values, f_c, K, float(data["tau"]))


def _check_same_grid(op_grid: TimeGrid, cfg: Configuration):
    if cfg.grid.d != op_grid.d:
        raise DomainError(f"configuration has d={cfg.grid.d}, operator expects d={op_grid.d}")
    if cfg.grid.K != op_grid.K or not np.isclose(cfg.grid.tau, op_grid.tau):
        raise DomainError("configuration and operator use different time grids")


def apply_fourier(op: FourierOperator, cfg: Configuration) -> MeasurementTensor:
    """Entry (k, l) = sum_i w_i exp(-2 pi i l (x_i + k tau v_i))"""
    _check_same_grid(op.grid, cfg)
    atoms = op.atoms(cfg.positions[:, 0], cfg.velocities[:, 0])
    values = np.tensordot(cfg.weights.astype(complex), atoms, axes=(0, 0))
    return MeasurementTensor(values, op.f_c, op.grid.K, op.grid.tau)


def correlate(op: FourierOperator, residual: MeasurementTensor, x: float, v: float):
    """
    Pairing of a residual with the atom at (x, v)

    Returns:
        (value, gradient) where value = sum conj(residual) * exp(-i theta) and
        gradient = [d/dx, d/dv] of that value
    """
    kt = op.grid.frames * op.grid.tau
    positions = (float(x) + kt * float(v))[None, :]
    values, slopes = fourier_pairings(op, residual.values, positions, derivative=True)
    d_x = complex(slopes.sum())
    d_v = complex((slopes[0] * kt).sum())
    return complex(values.sum()), np.array([d_x, d_v])


def correlate_grid(op: FourierOperator, residual: MeasurementTensor, xs, vs,
                   chunk: int = 4096) -> np.ndarray:
    """correlate() values for many (x, v) points at once"""
    xs = np.asarray(xs, dtype=float).ravel()
    vs = np.asarray(vs, dtype=float).ravel()
    kt = op.grid.frames * op.grid.tau
    out = np.empty(xs.size, dtype=complex)
    for start in range(0, xs.size, chunk):
        stop = start + chunk
        positions = xs[start:stop, None] + kt[None, :] * vs[start:stop, None]
        out[start:stop] = fourier_pairings(op, residual.values, positions).sum(axis=1)
    return out


def fourier_frame_atoms(op: FourierOperator, positions: np.ndarray) -> np.ndarray:
    """exp(-2 pi i l p) for per-frame positions p of shape (n, frames), shape (n, frames, 2f_c+1)"""
    positions = np.asarray(positions, dtype=float)
    return np.exp(-1j * TWO_PI * positions[..., None] * op.frequencies)


def fourier_pairings(op: FourierOperator, residual_values: np.ndarray, positions: np.ndarray,
                     derivative: bool = False):
    """
    Per-frame pairings sum_l conj(r_kl) exp(-2 pi i l p_k)

    residual_values has one row per column of positions (n, frames), so a
    single-frame residual pairs with positions of shape (n, 1).

    Returns:
        values (n, frames), plus their d/dp of the same shape when derivative is set
    """
    weighted = np.conj(residual_values)[None, :, :] * fourier_frame_atoms(op, positions)
    values = weighted.sum(axis=-1)
    if not derivative:
        return values
    return values, (weighted * (-1j * TWO_PI * op.frequencies)).sum(axis=-1)


# ---------------------------------------------------------------------------
# Gaussian PSF frames (d = 2)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PSFOperator:
    """
    Gaussian point spread function sampled on a pixel grid

    Positions are field-normalised: (0,0)-(1,1) maps to the image field
    [0, width*pitch] x [0, height*pitch] mm, pixel centres sit at (j + 1/2)*pitch.
    """
    sigma: float
    width: int
    height: int
    pitch_mm: float
    grid: TimeGrid

    def __post_init__(self):
        if not self.sigma > 0 or not self.pitch_mm > 0:
            raise DomainError("sigma and pitch_mm must be > 0")
        if int(self.width) != self.width or int(self.height) != self.height or min(self.width, self.height) < 1:
            raise DomainError("width and height must be positive pixel counts")
        if self.grid.d != 2:
            raise DomainError("the PSF operator is defined for d = 2")

    @property
    def field_mm(self) -> np.ndarray:
        return np.array([self.width * self.pitch_mm, self.height * self.pitch_mm])

    @property
    def frame_shape(self) -> Tuple[int, int]:
        return int(self.height), int(self.width)

    @property
    def centers_x(self) -> np.ndarray:
        return (np.arange(self.width) + 0.5) * self.pitch_mm

    @property
    def centers_y(self) -> np.ndarray:
        return (np.arange(self.height) + 0.5) * self.pitch_mm

    def profiles(self, positions: np.ndarray):
        """
        Separable Gaussian factors for normalised positions (n, 2)

        Returns:
            gx (n, W), gy (n, H) and the offsets (centre - position) in mm
        """
        positions = np.atleast_2d(positions)
        mm = positions * self.field_mm[None, :]
        dx = self.centers_x[None, :] - mm[:, 0:1]
        dy = self.centers_y[None, :] - mm[:, 1:2]
        s2 = 2.0 * self.sigma ** 2
        return np.exp(-dx ** 2 / s2), np.exp(-dy ** 2 / s2), dx, dy

    def unit_energy(self) -> float:
        """Squared l2 norm of one unit particle imaged at the field centre"""
        gx, gy, _, _ = self.profiles(np.array([[0.5, 0.5]]))
        return float((gx ** 2).sum() * (gy ** 2).sum())

    def header(self) -> Dict:
        return {"width": int(self.width), "height": int(self.height), "pitch_mm": float(self.pitch_mm),
                "sigma": float(self.sigma), "K": int(self.grid.K), "tau": float(self.grid.tau)}

    @classmethod
    def from_header(cls, header: Dict) -> "PSFOperator":
        return cls(float(header["sigma"]), int(header["width"]), int(header["height"]),
                   float(header["pitch_mm"]), TimeGrid(int(header["K"]), float(header["tau"]), 2))


@dataclass
class FrameStack:
    """Real PSF frames, frames[k + K] has shape (height, width)"""
    frames: np.ndarray
    header: Dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=float)
        if self.frames.ndim != 3:
            raise DomainError(f"frame stack must be 3-D, got shape {self.frames.shape}")

    def __add__(self, other: "FrameStack") -> "FrameStack":
        return FrameStack(self.frames + other.frames, dict(self.header))

    def __sub__(self, other: "FrameStack") -> "FrameStack":
        return FrameStack(self.frames - other.frames, dict(self.header))

    def inner(self, other: "FrameStack") -> float:
        return float(np.vdot(self.frames, other.frames).real)

    def norm(self) -> float:
        return float(np.linalg.norm(self.frames))

    def frame(self, k: int) -> np.ndarray:
        K = (self.frames.shape[0] - 1) // 2
        if int(k) != k or abs(k) > K:
            raise DomainError(f"frame index {k} outside -{K}..{K}")
        return self.frames[int(k) + K].copy()


def render_frame(op: PSFOperator, positions: np.ndarray, weights) -> np.ndarray:
    """One image of weighted particles at normalised positions (n, 2)"""
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    weights = np.atleast_1d(np.asarray(weights, dtype=float))
    if positions.size == 0:
        return np.zeros(op.frame_shape)
    if np.any(positions < 0) or np.any(positions > 1):
        bad = positions[np.any((positions < 0) | (positions > 1), axis=1)][0]
        raise DomainError(f"particle at {bad * op.field_mm} mm is outside the field of view")
    gx, gy, _, _ = op.profiles(positions)
    return gy.T @ (weights[:, None] * gx)


def render_positions(op: PSFOperator, positions: np.ndarray, weights) -> FrameStack:
    """Frames for per-frame positions of shape (n_frames, n, 2)"""
    positions = np.asarray(positions, dtype=float)
    frames = np.stack([render_frame(op, p, weights) for p in positions])
    return FrameStack(frames, op.header())


def apply_psf(op: PSFOperator, cfg: Configuration) -> FrameStack:
    """Frame k pixel c = sum_i w_i exp(-|c - (x_i + k tau v_i)|^2 / (2 sigma^2))"""
    _check_same_grid(op.grid, cfg)
    weights = np.real(cfg.weights).astype(float)
    return render_positions(op, cfg.trajectories(), weights)


def correlate_psf(op: PSFOperator, residual: FrameStack, x, v):
    """
    Pairing of residual frames with the unit particle at (x, v)

    Returns:
        (value, gradient) with gradient = [d/dx_1, d/dx_2, d/dv_1, d/dv_2]
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    kt = op.grid.frames * op.grid.tau
    positions = (x[None, :] + kt[:, None] * v[None, :])[None, :, :]
    values, slopes = psf_pairings(op, residual.frames, positions, derivative=True)
    d_p = slopes[0]
    gradient = np.concatenate([d_p.sum(axis=0), (kt[:, None] * d_p).sum(axis=0)])
    return float(values.sum()), gradient


def psf_frame_atoms(op: PSFOperator, positions: np.ndarray) -> np.ndarray:
    """Unit images for per-frame positions (n, frames, 2), shape (n, frames, height, width)"""
    positions = np.asarray(positions, dtype=float)
    n, n_frames = positions.shape[:2]
    gx, gy, _, _ = op.profiles(positions.reshape(-1, 2))
    images = gy[:, :, None] * gx[:, None, :]
    return images.reshape((n, n_frames) + op.frame_shape)


def psf_pairings(op: PSFOperator, residual_frames: np.ndarray, positions: np.ndarray,
                 derivative: bool = False):
    """
    Per-frame pairings <unit image at p_k, r_k> for positions (n, frames, 2)

    Returns:
        values (n, frames), plus d/dp of shape (n, frames, 2) when derivative is set
    """
    positions = np.asarray(positions, dtype=float)
    n, n_frames = positions.shape[:2]
    gx, gy, dx, dy = op.profiles(positions.reshape(-1, 2))
    shape = (n, n_frames, -1)
    gx, gy = gx.reshape(shape), gy.reshape(shape)
    rows = np.einsum('khw,nkw->nkh', residual_frames, gx)
    values = np.einsum('nkh,nkh->nk', gy, rows)
    if not derivative:
        return values
    # d/dp of exp(-|c - p|^2 / 2s^2) is exp(...) * (c - p) / s^2, scaled by the field size
    s2 = op.sigma ** 2
    hx = gx * dx.reshape(shape) / s2 * op.field_mm[0]
    hy = gy * dy.reshape(shape) / s2 * op.field_mm[1]
    d_x = np.einsum('nkh,nkh->nk', gy, np.einsum('khw,nkw->nkh', residual_frames, hx))
    d_y = np.einsum('nkh,nkh->nk', hy, rows)
    return values, np.stack([d_x, d_y], axis=-1)


# ---------------------------------------------------------------------------
# Noise and curvature
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSpec:
    alpha: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise DomainError(f"noise alpha must be >= 0, got {self.alpha}")


Measurement = Union[MeasurementTensor, FrameStack, np.ndarray]


def add_noise(data: Measurement, spec: NoiseSpec) -> Measurement:
    """
    Add alpha*(N1 + i N2) to complex data, alpha*N1 to real data

    A fresh generator is seeded from spec.seed on every call.
    """
    rng = np.random.default_rng(spec.seed)
    if isinstance(data, MeasurementTensor):
        return MeasurementTensor(_perturb(data.values, spec.alpha, rng), data.f_c, data.K, data.tau)
    if isinstance(data, FrameStack):
        return FrameStack(_perturb(data.frames, spec.alpha, rng), dict(data.header))
    return _perturb(np.asarray(data), spec.alpha, rng)


def _perturb(values: np.ndarray, alpha: float, rng: np.random.Generator) -> np.ndarray:
    if alpha == 0:
        return values.copy()
    if np.iscomplexobj(values):
        noise = rng.standard_normal(values.shape) + 1j * rng.standard_normal(values.shape)
    else:
        noise = rng.standard_normal(values.shape)
    return values + alpha * noise


@dataclass(frozen=True)
class CurvedTrajectorySpec:
    """
    Constant per-particle acceleration, given directly or as the
    normalised curvature beta = a*tau*K / (2v)
    """
    accelerations: Optional[Tuple[float, ...]] = None
    beta: float = 0.0

    def accelerations_for(self, cfg: Configuration) -> np.ndarray:
        if self.accelerations is not None:
            a = np.asarray(self.accelerations, dtype=float).ravel()
            if a.size != len(cfg):
                raise DomainError(f"{a.size} accelerations for {len(cfg)} particles")
            return a
        v = cfg.velocities[:, 0]
        return 2.0 * v * self.beta / (cfg.grid.tau * cfg.grid.K)

    def positions(self, cfg: Configuration) -> np.ndarray:
        """Curved positions at every frame, shape (2K+1, N)"""
        t = cfg.grid.frames * cfg.grid.tau
        a = self.accelerations_for(cfg)
        return cfg.positions[None, :, 0] + t[:, None] * cfg.velocities[None, :, 0] + \
            0.5 * a[None, :] * t[:, None] ** 2

    def stays_inside(self, cfg: Configuration) -> bool:
        p = self.positions(cfg)
        return bool(np.all((p >= 0) & (p <= 1)))


def apply_fourier_curved(op: FourierOperator, cfg: Configuration,
                         curvature: CurvedTrajectorySpec) -> MeasurementTensor:
    """Fourier data of particles following x + v t + (a/2) t^2"""
    _check_same_grid(op.grid, cfg)
    positions = curvature.positions(cfg)
    if np.any(positions < 0) or np.any(positions > 1):
        raise DomainError("a curved trajectory leaves [0, 1] within the observation window")
    phases = TWO_PI * positions[:, :, None] * op.frequencies[None, None, :]
    values = np.einsum('n,knl->kl', cfg.weights.astype(complex), np.exp(-1j * phases))
    return MeasurementTensor(values, op.f_c, op.grid.K, op.grid.tau)


def check_finite(data: Measurement):
    values = data.values if isinstance(data, MeasurementTensor) else \
        data.frames if isinstance(data, FrameStack) else np.asarray(data)
    if not np.all(np.isfinite(values)):
        raise NumericalError("measurements contain non-finite values")
