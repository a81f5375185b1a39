"""
Phase-Space Geometry Module
Lifted particles (position, velocity, weight), the admissible domain Omega,
the lines L_{i,k}, ghost-particle detection and separation metrics
"""

import itertools
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np

from utils.errors import DomainError
from utils.logger import setup_logger

logger = setup_logger('PhaseSpace')

# Absolute tolerance used when intersecting lines L_{i,k}
GEOMETRY_TOLERANCE = 1e-9

# Slack accepted when validating configurations built from floating point maps
MEMBERSHIP_SLACK = 1e-12

Weight = Union[float, complex]


@dataclass(frozen=True)
class TimeGrid:
    """Sampling schedule t_k = k*tau, k = -K..K, in dimension d"""
    K: int
    tau: float
    d: int = 1

    def __post_init__(self):
        if isinstance(self.K, bool) or int(self.K) != self.K or self.K < 1:
            raise DomainError(f"K must be an integer >= 1, got {self.K}")
        if not self.tau > 0:
            raise DomainError(f"tau must be > 0, got {self.tau}")
        if int(self.d) != self.d or self.d < 1:
            raise DomainError(f"d must be a positive integer, got {self.d}")

    @property
    def frames(self) -> np.ndarray:
        return np.arange(-self.K, self.K + 1)

    @property
    def n_frames(self) -> int:
        return 2 * self.K + 1

    @property
    def delta(self) -> float:
        """Half-length of the observation window"""
        return self.K * self.tau

    def check_frame(self, k: int) -> int:
        if int(k) != k or abs(k) > self.K:
            raise DomainError(f"frame index {k} outside -{self.K}..{self.K}")
        return int(k)

    def frame_index(self, k: int) -> int:
        """Row of frame k in arrays ordered -K..K"""
        return self.check_frame(k) + self.K

    def to_dict(self) -> Dict:
        return {"K": int(self.K), "tau": float(self.tau), "d": int(self.d)}


@dataclass(frozen=True)
class Particle:
    """A weighted point source in phase space"""
    position: Tuple[float, ...]
    velocity: Tuple[float, ...]
    weight: Weight = 1.0

    def __post_init__(self):
        position = tuple(float(c) for c in np.atleast_1d(self.position))
        velocity = tuple(float(c) for c in np.atleast_1d(self.velocity))
        if len(position) != len(velocity):
            raise DomainError("position and velocity must have the same dimension")
        object.__setattr__(self, "position", position)
        object.__setattr__(self, "velocity", velocity)

    @property
    def x(self) -> np.ndarray:
        return np.array(self.position)

    @property
    def v(self) -> np.ndarray:
        return np.array(self.velocity)

    @property
    def d(self) -> int:
        return len(self.position)

    def to_dict(self) -> Dict:
        weight = self.weight
        if isinstance(weight, complex) or np.iscomplexobj(weight):
            w = [float(np.real(weight)), float(np.imag(weight))]
        else:
            w = float(weight)
        return {"x": list(self.position), "v": list(self.velocity), "w": w}

    @classmethod
    def from_dict(cls, data: Dict) -> "Particle":
        w = data.get("w", 1.0)
        if isinstance(w, (list, tuple)):
            w = complex(w[0], w[1])
        return cls(tuple(data["x"]), tuple(data["v"]), w)


def position_at(p: Particle, k: int, grid: TimeGrid) -> np.ndarray:
    """Position x + k*tau*v of a particle at frame k"""
    grid.check_frame(k)
    return p.x + k * grid.tau * p.v


def in_domain(x, v, grid: TimeGrid, tol: float = 0.0) -> bool:
    """True iff x + k*tau*v lies in [0,1]^d for every frame (closed box)"""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    # Affine in k, so the extreme frames decide membership
    for k in (-grid.K, 0, grid.K):
        p = x + k * grid.tau * v
        if np.any(p < -tol) or np.any(p > 1.0 + tol):
            return False
    return True


@dataclass(frozen=True)
class PhaseSpaceDomain:
    """The admissible set Omega of a time grid"""
    grid: TimeGrid

    def contains(self, x, v, tol: float = 0.0) -> bool:
        return in_domain(x, v, self.grid, tol)

    def bounding_box(self) -> Tuple[Tuple[float, float], Tuple[float, float]]:
        """(x range, v range) of the smallest box holding Omega, per coordinate"""
        vmax = 1.0 / (2.0 * self.grid.delta)
        return (0.0, 1.0), (-vmax, vmax)

    def to_endpoints(self, x, v) -> Tuple[np.ndarray, np.ndarray]:
        """Positions at frames -K and K; Omega is the unit box in these coordinates"""
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        return x - self.grid.delta * v, x + self.grid.delta * v

    def from_endpoints(self, a, b) -> Tuple[np.ndarray, np.ndarray]:
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        return 0.5 * (a + b), (b - a) / (2.0 * self.grid.delta)

    def grid_points(self, n_x: int, n_v: int) -> Tuple[np.ndarray, np.ndarray]:
        """
        Uniform (x, v) lattice over the bounding box, restricted to Omega (d = 1)
        Points are ordered lexicographically by x, then v
        """
        (x0, x1), (v0, v1) = self.bounding_box()
        xs, vs = np.meshgrid(np.linspace(x0, x1, n_x), np.linspace(v0, v1, n_v), indexing="ij")
        xs, vs = xs.ravel(), vs.ravel()
        a, b = self.to_endpoints(xs, vs)
        keep = (a >= -MEMBERSHIP_SLACK) & (a <= 1 + MEMBERSHIP_SLACK) & \
               (b >= -MEMBERSHIP_SLACK) & (b <= 1 + MEMBERSHIP_SLACK)
        return xs[keep], vs[keep]


@dataclass(frozen=True)
class Configuration:
    """An ordered set of particles living in Omega of a time grid"""
    particles: Tuple[Particle, ...]
    grid: TimeGrid

    def __post_init__(self):
        particles = tuple(self.particles)
        object.__setattr__(self, "particles", particles)
        if len(particles) < 1:
            raise DomainError("a configuration needs at least one particle")
        seen = set()
        for i, p in enumerate(particles):
            if p.d != self.grid.d:
                raise DomainError(f"particle {i} has dimension {p.d}, grid has d={self.grid.d}")
            if p.weight == 0:
                raise DomainError(f"particle {i} has zero weight")
            if not in_domain(p.x, p.v, self.grid, MEMBERSHIP_SLACK):
                raise DomainError(f"particle {i} {p.position},{p.velocity} leaves [0,1]^d")
            key = (p.position, p.velocity)
            if key in seen:
                raise DomainError(f"particle {i} duplicates another (position, velocity) pair")
            seen.add(key)

    def __len__(self) -> int:
        return len(self.particles)

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.position for p in self.particles])

    @property
    def velocities(self) -> np.ndarray:
        return np.array([p.velocity for p in self.particles])

    @property
    def weights(self) -> np.ndarray:
        return np.array([p.weight for p in self.particles])

    @property
    def tv_norm(self) -> float:
        return float(np.sum(np.abs(self.weights)))

    def trajectories(self) -> np.ndarray:
        """Positions at every frame, shape (2K+1, N, d)"""
        t = self.grid.frames[:, None, None] * self.grid.tau
        return self.positions[None, :, :] + t * self.velocities[None, :, :]

    def frame_separations(self) -> np.ndarray:
        """Minimum pairwise l_inf distance s_k at each frame k = -K..K"""
        if len(self) < 2:
            raise DomainError("separation needs at least two particles")
        traj = self.trajectories()
        diff = np.abs(traj[:, :, None, :] - traj[:, None, :, :]).max(axis=-1)
        n = len(self)
        diff[:, np.arange(n), np.arange(n)] = np.inf
        return diff.min(axis=(1, 2))

    def union(self, other: "Configuration") -> "Configuration":
        if other.grid != self.grid:
            raise DomainError("cannot merge configurations on different grids")
        return Configuration(self.particles + other.particles, self.grid)

    def with_weights(self, weights: Sequence[Weight]) -> "Configuration":
        return Configuration(
            tuple(Particle(p.position, p.velocity, w) for p, w in zip(self.particles, weights)),
            self.grid,
        )

    def to_dict(self) -> Dict:
        return {
            "tau": float(self.grid.tau),
            "K": int(self.grid.K),
            "d": int(self.grid.d),
            "particles": [p.to_dict() for p in self.particles],
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "Configuration":
        grid = TimeGrid(int(data["K"]), float(data["tau"]), int(data.get("d", 1)))
        return cls(tuple(Particle.from_dict(p) for p in data["particles"]), grid)

    @classmethod
    def from_arrays(cls, positions, velocities, weights, grid: TimeGrid) -> "Configuration":
        positions = np.asarray(positions, dtype=float).reshape(-1, grid.d)
        velocities = np.asarray(velocities, dtype=float).reshape(-1, grid.d)
        weights = np.atleast_1d(weights)
        return cls(
            tuple(Particle(tuple(x), tuple(v), w) for x, v, w in zip(positions, velocities, weights)),
            grid,
        )


@dataclass(frozen=True)
class Line:
    """L_{i,k}: phase-space points sharing particle i's position at frame k"""
    particle_index: int
    frame_index: int
    anchor_x: Tuple[float, ...]
    anchor_v: Tuple[float, ...]
    grid: TimeGrid

    def residual(self, x, v) -> np.ndarray:
        """(x - x_i) + k*tau*(v - v_i)"""
        return (np.asarray(x) - np.asarray(self.anchor_x)) + \
            self.frame_index * self.grid.tau * (np.asarray(v) - np.asarray(self.anchor_v))

    def contains(self, x, v, tol: float = GEOMETRY_TOLERANCE) -> bool:
        return bool(np.all(np.abs(self.residual(x, v)) <= tol))


@dataclass(frozen=True)
class GhostParticle:
    """A point lying on one line per frame with pairwise distinct particle indices"""
    position: Tuple[float, ...]
    velocity: Tuple[float, ...]
    witness: Tuple[Tuple[int, int], ...] = field(default_factory=tuple)

    def to_dict(self) -> Dict:
        return {"x": list(self.position), "v": list(self.velocity),
                "witness": [list(pair) for pair in self.witness]}


def lines(cfg: Configuration, frames: Iterable[int] = None) -> List[Line]:
    """All lines L_{i,k} of a configuration for the given frames"""
    frames = cfg.grid.frames if frames is None else frames
    return [
        Line(i, cfg.grid.check_frame(k), p.position, p.velocity, cfg.grid)
        for k in frames for i, p in enumerate(cfg.particles)
    ]


def dynamic_separation(cfg: Configuration) -> float:
    """Third-largest over frames of the minimum pairwise distance"""
    if len(cfg) < 2:
        raise DomainError("dynamic separation is undefined for fewer than two particles")
    s = np.sort(cfg.frame_separations())[::-1]
    return float(s[2])


def detect_ghosts(cfg: Configuration, frames: Iterable[int]) -> List[GhostParticle]:
    """
    Enumerate ghost particles for a frame set of size m >= 3 (d = 1 only)

    For every ordered pair of distinct particles on the first two frames the
    candidate point is the intersection of their lines; it is kept when every
    other frame has a line through it from a particle not used so far.
    """
    frames = sorted({cfg.grid.check_frame(k) for k in frames})
    m = len(frames)
    if m < 3:
        raise DomainError(f"ghost detection needs at least 3 frames, got {m}")
    if cfg.grid.d != 1:
        raise DomainError("ghost detection is implemented for d = 1 only")
    n = len(cfg)
    if n < m:
        return []

    tau = cfg.grid.tau
    traj = cfg.trajectories()[:, :, 0]
    rows = [k + cfg.grid.K for k in frames]
    x_true = cfg.positions[:, 0]
    v_true = cfg.velocities[:, 0]
    k1, k2 = frames[0], frames[1]

    ghosts: List[GhostParticle] = []
    for i1, i2 in itertools.permutations(range(n), 2):
        p1, p2 = traj[rows[0], i1], traj[rows[1], i2]
        w = (p2 - p1) / ((k2 - k1) * tau)
        g = p1 - k1 * tau * w
        witness = _complete_witness(g, w, traj, rows[2:], frames[2:], tau, used=[i1, i2])
        if witness is None:
            continue
        witness = [(i1, k1), (i2, k2)] + witness
        if np.any((np.abs(x_true - g) <= GEOMETRY_TOLERANCE) & (np.abs(v_true - w) <= GEOMETRY_TOLERANCE)):
            continue
        if not in_domain(g, w, cfg.grid, GEOMETRY_TOLERANCE):
            continue
        if any(abs(h.position[0] - g) <= GEOMETRY_TOLERANCE and abs(h.velocity[0] - w) <= GEOMETRY_TOLERANCE
               for h in ghosts):
            continue
        ghosts.append(GhostParticle((float(g),), (float(w),), tuple(witness)))

    if ghosts:
        logger.debug(f"found {len(ghosts)} ghost particle(s) over frames {frames}")
    return ghosts


def _complete_witness(g: float, w: float, traj: np.ndarray, rows: List[int], frames: List[int],
                      tau: float, used: List[int]):
    """Assign a fresh particle index to each remaining frame, or None"""
    if not rows:
        return []
    k = frames[0]
    position = g + k * tau * w
    hits = np.flatnonzero(np.abs(traj[rows[0]] - position) <= GEOMETRY_TOLERANCE)
    for j in hits:
        if j in used:
            continue
        rest = _complete_witness(g, w, traj, rows[1:], frames[1:], tau, used + [int(j)])
        if rest is not None:
            return [(int(j), k)] + rest
    return None


def make_undetectable_config(grid: TimeGrid, weights: Sequence[float],
                             scale: float = 0.1) -> Tuple[Configuration, Configuration]:
    """
    Three particles and three ghosts whose position multisets coincide at every frame

    Particles (-a, 0), (a, 0), (0, 3a/tau); ghosts (0, -a/tau), (-a, 2a/tau),
    (a, 2a/tau), shifted so the picture is centred at x = 0.5. Ghost j carries
    weights[j]; the two measures have the same image under the forward map when
    the weights are equal.
    """
    weights = [float(w) for w in weights]
    if grid.K != 1 or len(weights) != 3:
        raise DomainError("the undetectable fixture needs K = 1 and three weights")
    if any(w <= 0 for w in weights):
        raise DomainError("fixture weights must be positive")
    a = float(scale)
    if not 0 < 3 * a < 0.5:
        raise DomainError(f"scale {a} does not fit inside Omega (need 0 < 3a < 0.5)")
    tau = grid.tau
    c = 0.5
    particles = [(c - a, 0.0), (c + a, 0.0), (c, 3 * a / tau)]
    ghosts = [(c, -a / tau), (c - a, 2 * a / tau), (c + a, 2 * a / tau)]
    if len(set(weights)) > 1:
        logger.warning("unequal fixture weights: the two configurations are not measurement-equivalent")
    make = lambda pts: Configuration(
        tuple(Particle((x,), (v,), w) for (x, v), w in zip(pts, weights)), grid)
    return make(particles), make(ghosts)


def interpolate_undetectable(particles: Configuration, ghosts: Configuration,
                             beta: float) -> Configuration:
    """
    omega_beta = sum (w_i - beta) delta_particle_i + beta * sum delta_ghost_j

    Moving mass beta along the kernel direction keeps both the measurements and
    the TV norm; atoms whose weight reaches zero are dropped.
    """
    w_min = float(np.min(np.real(particles.weights)))
    if not 0 <= beta <= w_min + MEMBERSHIP_SLACK:
        raise DomainError(f"beta must lie in [0, {w_min}], got {beta}")
    atoms = [Particle(p.position, p.velocity, p.weight - beta) for p in particles.particles]
    atoms += [Particle(g.position, g.velocity, beta) for g in ghosts.particles]
    atoms = [p for p in atoms if abs(p.weight) > MEMBERSHIP_SLACK]
    return Configuration(tuple(atoms), particles.grid)
