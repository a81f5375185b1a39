"""
Solver Module
Conditional-gradient recovery of positive spike measures over the TV ball
(spike insertion, weight step, joint continuous descent, pruning) for the
dynamic and static Fourier and PSF models, plus reconstruction matching
"""

import dataclasses
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import minimize, nnls
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from tools.forward_model import (
    FourierOperator,
    FrameStack,
    MeasurementTensor,
    PSFOperator,
    check_finite,
    fourier_frame_atoms,
    fourier_pairings,
    psf_frame_atoms,
    psf_pairings,
)
from tools.phase_space import Configuration, Particle, PhaseSpaceDomain, TimeGrid
from utils.errors import ConfigError, DomainError, NumericalError
from utils.logger import setup_logger

logger = setup_logger('Solver')

# Armijo sufficient-increase constant for spike refinement and gradient descent
ARMIJO_CONSTANT = 1e-4

# Grid maxima closer than this are tied and resolved lexicographically
TIE_TOLERANCE = 1e-12

FEASIBILITY_SLACK = 1e-9

# Quadratic penalty on sum w > M inside L-BFGS-B, relative to |y|^2 / M^2
MASS_PENALTY = 1e4


@dataclass(frozen=True)
class SolverConfig:
    tv_bound: float
    max_spikes: int = 20
    max_outer_iterations: int = 50
    candidate_grid: Tuple[int, int] = (64, 33)
    refine_steps: int = 200
    refine_tolerance: float = 1e-10
    residual_tolerance: Optional[float] = None
    prune_threshold: Optional[float] = None
    descent: str = "lbfgsb"
    velocity_bound: Optional[float] = None
    stall_tolerance: float = 1e-4

    def __post_init__(self):
        object.__setattr__(self, "candidate_grid", tuple(int(n) for n in self.candidate_grid))
        if not np.isfinite(self.tv_bound) or self.tv_bound <= 0:
            raise ConfigError(f"tv_bound must be > 0, got {self.tv_bound}")
        counts = {"max_spikes": self.max_spikes, "max_outer_iterations": self.max_outer_iterations,
                  "refine_steps": self.refine_steps}
        for name, value in counts.items():
            if int(value) != value or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value}")
        if len(self.candidate_grid) != 2 or min(self.candidate_grid) < 1:
            raise ConfigError(f"candidate_grid must be two positive counts, got {self.candidate_grid}")
        if self.descent not in ("lbfgsb", "gradient"):
            raise ConfigError(f"descent must be 'lbfgsb' or 'gradient', got {self.descent!r}")
        if self.velocity_bound is not None and not self.velocity_bound > 0:
            raise ConfigError(f"velocity_bound must be > 0, got {self.velocity_bound}")
        if not 0 <= self.stall_tolerance < 1:
            raise ConfigError(f"stall_tolerance must lie in [0, 1), got {self.stall_tolerance}")

    @property
    def prune_level(self) -> float:
        return self.prune_threshold if self.prune_threshold is not None else 1e-3 * self.tv_bound

    def tolerance_for(self, y_norm: float) -> float:
        return self.residual_tolerance if self.residual_tolerance is not None else 1e-6 * y_norm

    def with_tv_bound(self, tv_bound: float) -> "SolverConfig":
        return dataclasses.replace(self, tv_bound=float(tv_bound))

    def replace(self, **changes) -> "SolverConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, data: Dict, tv_bound: Optional[float] = None) -> "SolverConfig":
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - fields
        if unknown:
            raise ConfigError(f"unknown solver keys: {sorted(unknown)}")
        values = dict(data)
        if tv_bound is not None and "tv_bound" not in values:
            values["tv_bound"] = tv_bound
        if "tv_bound" not in values:
            raise ConfigError("solver config needs 'tv_bound'")
        return cls(**values)

    def to_dict(self) -> Dict:
        data = dataclasses.asdict(self)
        data["candidate_grid"] = list(self.candidate_grid)
        return data


def noise_floor(alpha: float, n_entries: int, complex_data: bool = True) -> float:
    """Expected l2 norm of the noise: alpha * sqrt(2 * entries) for complex data"""
    return float(alpha * np.sqrt((2 if complex_data else 1) * n_entries))


@dataclass
class Reconstruction:
    """A recovered positive measure with solver diagnostics"""
    particles: List[Particle]
    residual_norm: float
    iterations: int
    converged: bool
    grid: TimeGrid
    history: List[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.particles)

    @property
    def tv_norm(self) -> float:
        return float(sum(abs(p.weight) for p in self.particles))

    def as_configuration(self) -> Configuration:
        return Configuration(tuple(self.particles), self.grid)

    def to_dict(self) -> Dict:
        return {
            "tau": float(self.grid.tau),
            "K": int(self.grid.K),
            "d": int(self.grid.d),
            "particles": [p.to_dict() for p in self.particles],
            "residual_norm": float(self.residual_norm),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "history": [float(h) for h in self.history],
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "Reconstruction":
        grid = TimeGrid(int(data["K"]), float(data["tau"]), int(data.get("d", 1)))
        return cls([Particle.from_dict(p) for p in data["particles"]], float(data["residual_norm"]),
                   int(data["iterations"]), bool(data["converged"]), grid, list(data.get("history", [])))


# ---------------------------------------------------------------------------
# Spike models
# ---------------------------------------------------------------------------

def _real_stack(values: np.ndarray) -> np.ndarray:
    if np.iscomplexobj(values):
        return np.concatenate([values.real.ravel(), values.imag.ravel()])
    return np.asarray(values, dtype=float).ravel()


def _real_columns(blocks: np.ndarray) -> np.ndarray:
    """Real-stack each row of (n, entries) and return them as columns"""
    if np.iscomplexobj(blocks):
        blocks = np.concatenate([blocks.real, blocks.imag], axis=1)
    return np.ascontiguousarray(blocks.T, dtype=float)


class SpikeModel:
    """
    A parametrised unit spike observed at one or several frames

    Dynamic spikes use the endpoint chart theta = (a, b) with a the position
    at frame -K and b the position at frame K, so Omega is the unit box and
    projection is a clip. Static spikes use theta = position.
    """

    def __init__(self, d: int, grid: Optional[TimeGrid], velocity_bound: Optional[float] = None):
        self.d = d
        self.grid = grid
        self.dynamic = grid is not None
        self.velocity_bound = velocity_bound
        if self.dynamic:
            self.fractions = (grid.frames + grid.K) / (2.0 * grid.K)
        else:
            self.fractions = np.zeros(1)

    @property
    def n_params(self) -> int:
        return 2 * self.d if self.dynamic else self.d

    @property
    def n_frames(self) -> int:
        return self.fractions.size

    def positions(self, thetas: np.ndarray) -> np.ndarray:
        """Positions at every frame, shape (n, frames, d)"""
        thetas = np.atleast_2d(thetas)
        if not self.dynamic:
            return thetas[:, None, :]
        a, b = thetas[:, :self.d], thetas[:, self.d:]
        s = self.fractions[None, :, None]
        return a[:, None, :] + s * (b - a)[:, None, :]

    # model-specific kernels --------------------------------------------
    def frame_atoms(self, p: np.ndarray) -> np.ndarray:
        """Unit-spike measurements for positions p (n, frames, d), shape (n, frames, ...)"""
        raise NotImplementedError

    def pairings(self, p: np.ndarray, residual, derivative: bool = False):
        """Real per-frame pairings (n, frames) and optionally their d/dp (n, frames, d)"""
        raise NotImplementedError

    def unstack(self, residual: np.ndarray):
        """Real-stacked residual back to the operator's own layout"""
        raise NotImplementedError

    def axis_grids(self, n_x: int, n_v: int):
        raise NotImplementedError

    @property
    def measurement_size(self) -> int:
        raise NotImplementedError

    # generic -------------------------------------------------------------
    def atoms(self, thetas: np.ndarray) -> np.ndarray:
        """Real-stacked atoms as columns, shape (m, n)"""
        if len(thetas) == 0:
            return np.zeros((self.measurement_size, 0))
        blocks = self.frame_atoms(self.positions(thetas))
        return _real_columns(blocks.reshape(len(blocks), -1))

    def atom(self, theta: np.ndarray) -> np.ndarray:
        return self.atoms(np.atleast_2d(theta))[:, 0]

    def scores(self, thetas: np.ndarray, residual: np.ndarray, chunk: int = 4096) -> np.ndarray:
        """<atom(theta), residual> for many thetas"""
        native = self.unstack(residual)
        out = np.empty(len(thetas))
        for start in range(0, len(thetas), chunk):
            p = self.positions(thetas[start:start + chunk])
            out[start:start + chunk] = self.pairings(p, native).sum(axis=1)
        return out

    def score_and_gradient(self, thetas: np.ndarray, residual: np.ndarray):
        """
        <atom(theta), residual> and its gradient in theta, for every row of thetas

        Returns:
            scores (n,), gradients (n, n_params)
        """
        values, slopes = self.pairings(self.positions(thetas), self.unstack(residual), derivative=True)
        if not self.dynamic:
            return values.sum(axis=1), slopes[:, 0, :]
        s = self.fractions[None, :, None]
        gradients = np.concatenate([((1.0 - s) * slopes).sum(axis=1), (s * slopes).sum(axis=1)], axis=1)
        return values.sum(axis=1), gradients

    def candidates(self, n_x: int, n_v: int) -> np.ndarray:
        """Candidate thetas over Omega, ordered lexicographically by (x, v)"""
        xs, vs = self.axis_grids(n_x, n_v)
        if not self.dynamic:
            mesh = np.meshgrid(*([xs] * self.d), indexing="ij")
            return np.stack([m.ravel() for m in mesh], axis=1)
        mesh = np.meshgrid(*([xs] * self.d + [vs] * self.d), indexing="ij")
        points = np.stack([m.ravel() for m in mesh], axis=1)
        x, v = points[:, :self.d], points[:, self.d:]
        a, b = x - self.grid.delta * v, x + self.grid.delta * v
        keep = np.all((a >= -1e-12) & (a <= 1 + 1e-12) & (b >= -1e-12) & (b <= 1 + 1e-12), axis=1)
        return np.clip(np.concatenate([a[keep], b[keep]], axis=1), 0.0, 1.0)

    def velocity_axis(self, n_v: int) -> np.ndarray:
        (_, _), (v0, v1) = PhaseSpaceDomain(self.grid).bounding_box()
        if self.velocity_bound is not None:
            v1 = min(v1, self.velocity_bound)
            v0 = -v1
        return np.linspace(v0, v1, n_v) if n_v > 1 else np.zeros(1)

    def measurement_vector(self, data) -> np.ndarray:
        raise NotImplementedError

    def to_particle(self, theta: np.ndarray, weight: float) -> Particle:
        theta = np.asarray(theta, dtype=float)
        if not self.dynamic:
            return Particle(tuple(theta), tuple(np.zeros(self.d)), float(weight))
        x, v = PhaseSpaceDomain(self.grid).from_endpoints(theta[:self.d], theta[self.d:])
        return Particle(tuple(x), tuple(v), float(weight))


class FourierSpikeModel(SpikeModel):
    """Unit spike under the low-pass Fourier operator (d = 1)"""

    def __init__(self, op: FourierOperator, dynamic: bool = True, velocity_bound: Optional[float] = None):
        super().__init__(1, op.grid if dynamic else None, velocity_bound)
        self.op = op

    @property
    def measurement_size(self) -> int:
        return 2 * self.n_frames * self.op.frequencies.size

    def frame_atoms(self, p: np.ndarray) -> np.ndarray:
        return fourier_frame_atoms(self.op, p[:, :, 0])

    def pairings(self, p: np.ndarray, residual, derivative: bool = False):
        # the real-stacked inner product is Re(sum conj(r) * atom)
        result = fourier_pairings(self.op, residual, p[:, :, 0], derivative)
        if not derivative:
            return result.real
        values, slopes = result
        return values.real, slopes.real[:, :, None]

    def unstack(self, residual: np.ndarray) -> np.ndarray:
        half = residual.size // 2
        return (residual[:half] + 1j * residual[half:]).reshape(self.n_frames, -1)

    def axis_grids(self, n_x: int, n_v: int):
        xs = np.linspace(0.0, 1.0, n_x)
        return xs, (self.velocity_axis(n_v) if self.dynamic else None)

    def measurement_vector(self, data) -> np.ndarray:
        if isinstance(data, MeasurementTensor):
            if not data.matches(self.op):
                raise DomainError(f"measurement header {data.header()} does not match the operator "
                                  f"(f_c={self.op.f_c}, K={self.op.grid.K}, tau={self.op.grid.tau})")
            values = data.values
        else:
            values = np.asarray(data, dtype=complex)
        expected = self.n_frames * self.op.frequencies.size
        if values.size != expected:
            raise DomainError(f"expected {expected} Fourier coefficients, got {values.size}")
        return _real_stack(values.reshape(self.n_frames, -1))


class PSFSpikeModel(SpikeModel):
    """Unit spike imaged through the Gaussian PSF (d = 2)"""

    def __init__(self, op: PSFOperator, dynamic: bool = True, velocity_bound: Optional[float] = None):
        super().__init__(2, op.grid if dynamic else None, velocity_bound)
        self.op = op

    @property
    def measurement_size(self) -> int:
        return self.n_frames * int(np.prod(self.op.frame_shape))

    def frame_atoms(self, p: np.ndarray) -> np.ndarray:
        return psf_frame_atoms(self.op, p)

    def pairings(self, p: np.ndarray, residual, derivative: bool = False):
        return psf_pairings(self.op, residual, p, derivative)

    def unstack(self, residual: np.ndarray) -> np.ndarray:
        return residual.reshape((self.n_frames,) + self.op.frame_shape)

    def axis_grids(self, n_x: int, n_v: int):
        xs = np.linspace(0.0, 1.0, n_x)
        return xs, (self.velocity_axis(n_v) if self.dynamic else None)

    def measurement_vector(self, data) -> np.ndarray:
        frames = data.frames if isinstance(data, FrameStack) else np.asarray(data, dtype=float)
        expected = (self.n_frames,) + self.op.frame_shape
        if frames.size != int(np.prod(expected)):
            raise DomainError(f"expected frames of shape {expected}, got {frames.shape}")
        return frames.reshape(-1).astype(float)


# ---------------------------------------------------------------------------
# Conditional gradient engine
# ---------------------------------------------------------------------------

def project_weights(w: np.ndarray, bound: float) -> np.ndarray:
    """Euclidean projection onto {w >= 0, sum w <= bound}"""
    w = np.maximum(np.asarray(w, dtype=float), 0.0)
    if w.sum() <= bound:
        return w
    u = np.sort(w)[::-1]
    cumulative = np.cumsum(u) - bound
    ranks = np.arange(1, u.size + 1)
    rho = np.nonzero(u - cumulative / ranks > 0)[0][-1]
    shift = cumulative[rho] / (rho + 1.0)
    return np.maximum(w - shift, 0.0)


class ConditionalGradientSolver:
    """
    Alternating spike insertion and continuous refinement over positive measures
    with total mass at most M
    """

    def __init__(self, model: SpikeModel, config: SolverConfig):
        self.model = model
        self.config = config
        self.M = float(config.tv_bound)
        self._candidates = None

    # objective -----------------------------------------------------------
    def _objective(self, thetas: np.ndarray, weights: np.ndarray, y: np.ndarray) -> float:
        r = self.model.atoms(thetas) @ weights - y
        return 0.5 * float(r @ r)

    # spike selection -------------------------------------------------------
    def candidates(self) -> np.ndarray:
        if self._candidates is None:
            self._candidates = self.model.candidates(*self.config.candidate_grid)
        return self._candidates

    def select_spike(self, residual: np.ndarray) -> Tuple[np.ndarray, float]:
        """Best candidate of the positive oracle, refined by projected gradient ascent"""
        cands = self.candidates()
        # weights are nonnegative, so the oracle is Re<atom, residual> rather than its modulus
        scores = self.model.scores(cands, residual)
        best = scores.max()
        # candidates are ordered (x, v) lexicographically, take the first tied maximum
        first = int(np.flatnonzero(scores >= best - TIE_TOLERANCE)[0])
        return self._refine(cands[first].copy(), residual)

    def _refine(self, theta: np.ndarray, residual: np.ndarray) -> Tuple[np.ndarray, float]:
        scores, gradients = self.model.score_and_gradient(theta[None, :], residual)
        score, g = float(scores[0]), gradients[0]
        step = None
        for _ in range(self.config.refine_steps):
            g_norm = float(np.linalg.norm(g))
            if g_norm == 0:
                break
            if step is None:
                step = 1e-2 / g_norm
            accepted = False
            for _ in range(60):
                trial = np.clip(theta + step * g, 0.0, 1.0)
                trial_scores, trial_gradients = self.model.score_and_gradient(trial[None, :], residual)
                trial_score = float(trial_scores[0])
                if trial_score >= score + ARMIJO_CONSTANT * float(g @ (trial - theta)):
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                break
            moved = float(np.linalg.norm(trial - theta))
            theta, score, g = trial, trial_score, trial_gradients[0]
            step *= 2.0
            if moved < self.config.refine_tolerance:
                break
        return theta, score

    # weight step -----------------------------------------------------------
    def weight_step(self, A: np.ndarray, y: np.ndarray, previous: np.ndarray) -> np.ndarray:
        """
        Nonnegative least squares over the current support with sum w <= M

        The previous weights (zero-padded) stay a candidate, so the residual never increases.
        """
        options = [project_weights(previous, self.M)]
        try:
            w, _ = nnls(A, y)
        except RuntimeError as e:
            logger.debug(f"nnls did not converge: {e}")
            w = None
        if w is not None:
            if w.sum() <= self.M:
                options.append(w)
            else:
                options.append(w * (self.M / w.sum()))
                options.append(self._capped_least_squares(A, y, w * (self.M / w.sum())))
        values = [0.5 * float(np.sum((A @ o - y) ** 2)) for o in options]
        return options[int(np.argmin(values))]

    def _capped_least_squares(self, A: np.ndarray, y: np.ndarray, start: np.ndarray) -> np.ndarray:
        AtA, Aty = A.T @ A, A.T @ y
        result = minimize(
            lambda w: 0.5 * w @ AtA @ w - Aty @ w,
            start,
            jac=lambda w: AtA @ w - Aty,
            method="SLSQP",
            bounds=[(0.0, self.M)] * start.size,
            constraints=[{"type": "ineq", "fun": lambda w: self.M - w.sum(),
                          "jac": lambda w: -np.ones_like(w)}],
            options={"maxiter": 500, "ftol": 1e-15},
        )
        return project_weights(result.x, self.M)

    # joint descent ---------------------------------------------------------
    def _pack(self, thetas, weights):
        return np.concatenate([thetas.ravel(), weights])

    def _unpack(self, z, n):
        p = self.model.n_params
        return z[:n * p].reshape(n, p), z[n * p:]

    def _joint_objective(self, z: np.ndarray, n: int, y: np.ndarray):
        thetas, weights = self._unpack(z, n)
        A = self.model.atoms(thetas)
        r = A @ weights - y
        _, slopes = self.model.score_and_gradient(thetas, r)
        grad = np.concatenate([(weights[:, None] * slopes).ravel(), A.T @ r])
        return 0.5 * float(r @ r), grad

    def _penalised_objective(self, z: np.ndarray, n: int, y: np.ndarray, rho: float):
        f, grad = self._joint_objective(z, n, y)
        excess = float(z[n * self.model.n_params:].sum()) - self.M
        if excess > 0:
            f += 0.5 * rho * excess ** 2
            grad[n * self.model.n_params:] += rho * excess
        return f, grad

    def joint_descent(self, thetas: np.ndarray, weights: np.ndarray, y: np.ndarray):
        """Move all spikes and weights together; the step is kept only if it lowers the objective"""
        n = len(thetas)
        z0 = self._pack(thetas, weights)
        f0 = self._objective(thetas, weights, y)
        if self.config.descent == "lbfgsb":
            rho = MASS_PENALTY * max(float(y @ y), 1e-300) / self.M ** 2
            bounds = [(0.0, 1.0)] * (n * self.model.n_params) + [(0.0, self.M)] * n
            result = minimize(self._penalised_objective, z0, args=(n, y, rho), jac=True, method="L-BFGS-B",
                              bounds=bounds,
                              options={"maxiter": self.config.refine_steps, "ftol": 1e-20, "gtol": 1e-14})
            accepted = self._accept(result.x, n, y, f0)
            if accepted is not None:
                return accepted
            if result.x[n * self.model.n_params:].sum() <= self.M + FEASIBILITY_SLACK:
                return thetas, weights
        # the penalty left the weights outside the TV ball; projected gradient keeps them inside
        accepted = self._accept(self._projected_gradient(z0, n, y), n, y, f0)
        return accepted if accepted is not None else (thetas, weights)

    def _accept(self, z: np.ndarray, n: int, y: np.ndarray, f0: float):
        new_thetas, new_weights = self._unpack(z, n)
        new_thetas = np.clip(new_thetas, 0.0, 1.0)
        new_weights = project_weights(new_weights, self.M)
        if self._objective(new_thetas, new_weights, y) < f0:
            return new_thetas, new_weights
        return None

    def _projected_gradient(self, z: np.ndarray, n: int, y: np.ndarray) -> np.ndarray:
        split = n * self.model.n_params

        def project(u):
            u = u.copy()
            u[:split] = np.clip(u[:split], 0.0, 1.0)
            u[split:] = project_weights(u[split:], self.M)
            return u

        f, g = self._joint_objective(z, n, y)
        step = 1e-2 / max(float(np.linalg.norm(g)), 1e-300)
        for _ in range(self.config.refine_steps):
            accepted = False
            for _ in range(60):
                trial = project(z - step * g)
                f_trial, g_trial = self._joint_objective(trial, n, y)
                if f_trial <= f - ARMIJO_CONSTANT * float(g @ (z - trial)):
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                break
            moved = float(np.linalg.norm(trial - z))
            z, f, g = trial, f_trial, g_trial
            step *= 2.0
            if moved < self.config.refine_tolerance:
                break
        return z

    # pruning ---------------------------------------------------------------
    def prune(self, thetas, weights, y):
        keep = weights >= self.config.prune_level
        if keep.all():
            return thetas, weights
        thetas = thetas[keep]
        if len(thetas) == 0:
            return thetas, weights[keep]
        return thetas, self.weight_step(self.model.atoms(thetas), y, weights[keep])

    def _check_feasible(self, thetas: np.ndarray, weights: np.ndarray, iteration: int):
        if np.any(weights < 0) or weights.sum() > self.M + FEASIBILITY_SLACK:
            raise NumericalError(f"iteration {iteration}: weights leave the TV ball "
                                 f"(sum={weights.sum():.12g}, M={self.M})")
        if thetas.size and (thetas.min() < -1e-12 or thetas.max() > 1 + 1e-12):
            raise NumericalError(f"iteration {iteration}: a spike left Omega")

    # main loop -------------------------------------------------------------
    def run(self, y: np.ndarray):
        """
        Args:
            y: real-stacked measurements

        Returns:
            (thetas, weights, residual_norm, iterations, converged, history)
        """
        y_norm = float(np.linalg.norm(y))
        tolerance = self.config.tolerance_for(y_norm)
        thetas = np.zeros((0, self.model.n_params))
        weights = np.zeros(0)
        residual_norm = y_norm
        history: List[float] = []
        iteration = 0

        if y_norm == 0:
            return thetas, weights, 0.0, 0, True, history

        while iteration < self.config.max_outer_iterations and residual_norm > tolerance:
            if len(thetas) >= self.config.max_spikes:
                break
            residual = y - self.model.atoms(thetas) @ weights
            theta, score = self.select_spike(residual)
            if score <= 0:
                logger.debug("no atom correlates positively with the residual")
                break
            gap = self.duality_gap(thetas, weights, residual, score)
            if len(thetas) and gap <= self.config.stall_tolerance * residual_norm ** 2:
                logger.debug(f"duality gap {gap:.3e} is below the stall level")
                break
            iteration += 1

            thetas = np.vstack([thetas, theta[None, :]])
            weights = self.weight_step(self.model.atoms(thetas), y, np.append(weights, 0.0))
            thetas, weights = self.joint_descent(thetas, weights, y)
            current = self._residual_norm(thetas, weights, y)

            pruned_thetas, pruned_weights = self.prune(thetas, weights, y)
            if len(pruned_thetas) < len(thetas):
                pruned_norm = self._residual_norm(pruned_thetas, pruned_weights, y)
                if pruned_norm <= residual_norm:
                    thetas, weights, current = pruned_thetas, pruned_weights, pruned_norm

            self._check_feasible(thetas, weights, iteration)
            progress = residual_norm - current
            residual_norm = current
            history.append(residual_norm)
            logger.log_solver_iteration(iteration, residual_norm, len(thetas))
            if progress <= self.config.stall_tolerance * (residual_norm + progress):
                logger.debug(f"residual improved by only {progress:.3e}")
                break

        thetas, weights = self.prune(thetas, weights, y)
        self._check_feasible(thetas, weights, iteration)
        residual_norm = self._residual_norm(thetas, weights, y)
        converged = residual_norm <= tolerance
        return thetas, weights, residual_norm, iteration, converged, history

    def duality_gap(self, thetas: np.ndarray, weights: np.ndarray, residual: np.ndarray, best_score: float) -> float:
        """
        Frank-Wolfe gap M * max(best, 0) - sum_j w_j <atom_j, residual>

        Bounds how much the objective can still drop over the TV ball; it is 0
        when the mass sits at M and no atom beats the current support.
        """
        support = self.model.scores(thetas, residual) if len(thetas) else np.zeros(0)
        return self.M * max(best_score, 0.0) - float(weights @ support)

    def _residual_norm(self, thetas, weights, y) -> float:
        if len(thetas) == 0:
            return float(np.linalg.norm(y))
        return float(np.linalg.norm(self.model.atoms(thetas) @ weights - y))


# ---------------------------------------------------------------------------
# Public entry points
# ---------------------------------------------------------------------------

Operator = Union[FourierOperator, PSFOperator]


def _model_for(op: Operator, dynamic: bool, cfg: SolverConfig) -> SpikeModel:
    if isinstance(op, FourierOperator):
        return FourierSpikeModel(op, dynamic, cfg.velocity_bound)
    if isinstance(op, PSFOperator):
        return PSFSpikeModel(op, dynamic, cfg.velocity_bound)
    raise DomainError(f"unsupported operator type {type(op).__name__}")


def solve_dynamic(y, op: Operator, cfg: SolverConfig) -> Reconstruction:
    """Recover positions, velocities and weights from multi-frame measurements"""
    check_finite(y)
    model = _model_for(op, True, cfg)
    vector = model.measurement_vector(y)
    solver = ConditionalGradientSolver(model, cfg)
    thetas, weights, residual_norm, iterations, converged, history = solver.run(vector)
    particles = [model.to_particle(t, w) for t, w in zip(thetas, weights)]
    logger.debug(f"dynamic solve: {len(particles)} spikes, residual {residual_norm:.3e}, "
                 f"{iterations} iterations, converged={converged}")
    return Reconstruction(particles, residual_norm, iterations, converged, op.grid, history)


def solve_static(y_k, op: Operator, cfg: SolverConfig) -> List[Tuple[Union[float, np.ndarray], float]]:
    """Recover (position, weight) pairs from a single frame"""
    check_finite(y_k)
    model = _model_for(op, False, cfg)
    vector = model.measurement_vector(y_k)
    thetas, weights, _, _, _, _ = ConditionalGradientSolver(model, cfg).run(vector)
    if model.d == 1:
        return [(float(t[0]), float(w)) for t, w in zip(thetas, weights)]
    return [(np.array(t), float(w)) for t, w in zip(thetas, weights)]


# ---------------------------------------------------------------------------
# Matching
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MatchVerdict:
    success: bool
    n_truth: int
    n_recon: int
    n_matched: int
    pairs: Tuple[Tuple[int, int], ...] = ()

    def __bool__(self) -> bool:
        return self.success


def _perfect_matching(admissible: np.ndarray) -> MatchVerdict:
    n_truth, n_recon = admissible.shape
    if n_truth == 0 or n_recon == 0:
        return MatchVerdict(n_truth == n_recon, n_truth, n_recon, 0)
    rows, cols = np.nonzero(admissible)
    graph = csr_matrix((np.ones(rows.size), (rows, cols)), shape=admissible.shape)
    match = maximum_bipartite_matching(graph, perm_type="column")
    pairs = tuple((int(i), int(j)) for i, j in enumerate(match) if j >= 0)
    success = len(pairs) == n_truth and n_recon == n_truth
    return MatchVerdict(success, n_truth, n_recon, len(pairs), pairs)


def match_reconstruction(truth: Configuration, recon: Reconstruction,
                         thresholds: Sequence[float]) -> MatchVerdict:
    """Perfect matching of truth to recon within (dx, dv, dw) and no extra spikes"""
    dx, dv, dw = thresholds
    if min(dx, dv, dw) <= 0:
        raise DomainError("matching thresholds must be positive")
    if len(recon) == 0:
        return MatchVerdict(False, len(truth), 0, 0)
    rx = np.array([p.position for p in recon.particles])
    rv = np.array([p.velocity for p in recon.particles])
    rw = np.array([p.weight for p in recon.particles])
    ok_x = np.abs(truth.positions[:, None, :] - rx[None, :, :]).max(axis=-1) <= dx
    ok_v = np.abs(truth.velocities[:, None, :] - rv[None, :, :]).max(axis=-1) <= dv
    ok_w = np.abs(truth.weights[:, None] - rw[None, :]) <= dw
    return _perfect_matching(ok_x & ok_v & ok_w)


def match_static(positions: np.ndarray, weights: np.ndarray, recon: Sequence[Tuple],
                 dx: float, dw: float) -> MatchVerdict:
    """Position/weight-only matching of a single-frame reconstruction"""
    positions = np.asarray(positions, dtype=float)
    positions = positions.reshape(len(positions), -1)
    weights = np.asarray(weights)
    if len(recon) == 0:
        return MatchVerdict(False, len(positions), 0, 0)
    rx = np.array([np.atleast_1d(p) for p, _ in recon], dtype=float)
    rw = np.array([w for _, w in recon])
    ok_x = np.abs(positions[:, None, :] - rx[None, :, :]).max(axis=-1) <= dx
    ok_w = np.abs(weights[:, None] - rw[None, :]) <= dw
    return _perfect_matching(ok_x & ok_w)
