"""Benchmark dynamical systems, their dependency graphs and a fixed-step integrator."""
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import pandas as pd

from icode_rca import configure_logger
from icode_rca.errors import ArtifactError, DivergenceError, ValidationError

logger = configure_logger(__name__)

DIVERGENCE_LIMIT = 1e12


class SystemKind(str, Enum):
    LOTKA_VOLTERRA = "LotkaVolterra"
    LORENZ96 = "Lorenz96"
    REACTION_DIFFUSION = "ReactionDiffusion"
    LINEAR = "Linear"


class Integrator(str, Enum):
    EULER = "Euler"
    RK4 = "RK4"


@dataclass(frozen=True, eq=False)
class SystemSpec:
    """
    A benchmark system with p variables.
    - forcing: Lorenz96 F
    - growth, capacity, interaction: Lotka-Volterra r (p), K (p) and beta (p x p)
    - matrix: A (p x p) of the linear system dx/dt = A x
    Reaction-diffusion uses unit diffusion coefficients and needs no parameters.
    """

    kind: SystemKind
    p: int
    forcing: float = 10.0
    growth: np.ndarray = field(default=None, repr=False)
    capacity: np.ndarray = field(default=None, repr=False)
    interaction: np.ndarray = field(default=None, repr=False)
    matrix: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "kind", SystemKind(self.kind))
        if self.p < 1:
            raise ValidationError(f"p must be positive, got {self.p}", field="system.p")
        if self.kind is SystemKind.LORENZ96 and self.p < 4:
            raise ValidationError(
                f"Lorenz96 needs p >= 4 so that neighbours i-2, i-1, i+1 are distinct, got p={self.p}",
                field="system.p")
        if self.kind is SystemKind.REACTION_DIFFUSION and self.p < 3:
            raise ValidationError(
                f"ReactionDiffusion needs p >= 3 for a ring of distinct neighbours, got p={self.p}",
                field="system.p")
        if self.kind is SystemKind.LOTKA_VOLTERRA:
            for name, shape in (("growth", (self.p,)), ("capacity", (self.p,)), ("interaction", (self.p, self.p))):
                value = getattr(self, name)
                if value is None:
                    raise ValidationError("required for LotkaVolterra", field=f"system.{name}")
                value = np.array(value, dtype=np.float64)
                if value.shape != shape:
                    raise ValidationError(f"expected shape {shape}, got {value.shape}", field=f"system.{name}")
                value.setflags(write=False)
                object.__setattr__(self, name, value)
            if np.any(self.capacity <= 0):
                raise ValidationError("carrying capacities must be strictly positive", field="system.capacity")
        if self.kind is SystemKind.LINEAR:
            if self.matrix is None:
                raise ValidationError("required for Linear", field="system.matrix")
            matrix = np.array(self.matrix, dtype=np.float64)
            if matrix.shape != (self.p, self.p) or not np.all(np.isfinite(matrix)):
                raise ValidationError(f"expected a finite {self.p} x {self.p} matrix", field="system.matrix")
            matrix.setflags(write=False)
            object.__setattr__(self, "matrix", matrix)

    @classmethod
    def lorenz96(cls, p=20, forcing=10.0):
        return cls(SystemKind.LORENZ96, p, forcing=forcing)

    @classmethod
    def reaction_diffusion(cls, p=20):
        return cls(SystemKind.REACTION_DIFFUSION, p)

    @classmethod
    def lotka_volterra(cls, p=20, seed=0, edge_probability=0.2, interaction_scale=0.1):
        """Random sparse community: beta_ii = 1, off-diagonal entries uniform in [-scale, scale]."""
        rng = np.random.default_rng(seed)
        growth = rng.uniform(0.5, 1.5, size=p)
        capacity = rng.uniform(5.0, 15.0, size=p)
        mask = rng.random((p, p)) < edge_probability
        interaction = np.where(mask, rng.uniform(-interaction_scale, interaction_scale, size=(p, p)), 0.0)
        np.fill_diagonal(interaction, 1.0)
        return cls(SystemKind.LOTKA_VOLTERRA, p, growth=growth, capacity=capacity, interaction=interaction)

    @classmethod
    def linear(cls, p=5, seed=0, edge_probability=0.3, radius=0.9):
        """
        Random sparse rotation A = U - U^T scaled to spectral radius `radius`. Trajectories
        keep their norm, so they neither decay nor blow up.
        """
        if p < 2:
            raise ValidationError(f"Linear needs p >= 2 for an off-diagonal edge, got p={p}", field="system.p")
        rng = np.random.default_rng(seed)
        upper = np.triu(rng.random((p, p)) < edge_probability, k=1)
        if not upper.any():
            upper[0, 1] = True
        weights = np.where(upper, rng.uniform(0.5, 1.0, size=(p, p)) * rng.choice([-1.0, 1.0], size=(p, p)), 0.0)
        matrix = weights - weights.T
        matrix *= radius / np.max(np.abs(np.linalg.eigvals(matrix)))
        return cls(SystemKind.LINEAR, p, matrix=matrix)

    def initial_state(self, rng):
        if self.kind is SystemKind.LORENZ96:
            return self.forcing + rng.uniform(-0.5, 0.5, size=self.p)
        if self.kind is SystemKind.REACTION_DIFFUSION:
            return rng.uniform(0.1, 0.9, size=self.p)
        if self.kind is SystemKind.LINEAR:
            return rng.uniform(-1.0, 1.0, size=self.p)
        return rng.uniform(0.5 * self.capacity, self.capacity)

    def to_dict(self):
        data = {"kind": self.kind.value, "p": self.p}
        if self.kind is SystemKind.LORENZ96:
            data["forcing"] = self.forcing
        if self.kind is SystemKind.LOTKA_VOLTERRA:
            data["growth"] = self.growth.tolist()
            data["capacity"] = self.capacity.tolist()
            data["interaction"] = self.interaction.tolist()
        if self.kind is SystemKind.LINEAR:
            data["matrix"] = self.matrix.tolist()
        return data

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@dataclass(frozen=True, eq=False)
class DependencyGraph:
    """
    adjacency[i, j] is True iff variable j enters the governing equation of variable i.
    degenerate marks a graph that could not be inferred from its source data.
    """

    adjacency: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        adjacency = np.array(self.adjacency, dtype=bool)
        if adjacency.ndim != 2 or adjacency.shape[0] != adjacency.shape[1]:
            raise ValidationError(f"adjacency must be square, got shape {adjacency.shape}")
        adjacency.setflags(write=False)
        object.__setattr__(self, "adjacency", adjacency)

    @property
    def p(self):
        return self.adjacency.shape[0]

    def undirected(self):
        return self.adjacency | self.adjacency.T

    def closed_neighborhood(self, k):
        """k itself plus every variable with an edge into or out of k."""
        members = self.undirected()[k].copy()
        members[k] = True
        return np.flatnonzero(members)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """T samples of p variables on monotonically increasing times."""

    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        times = np.array(self.times, dtype=np.float64)
        states = np.array(self.states, dtype=np.float64)
        if states.ndim != 2:
            raise ValidationError(f"states must be a T x p matrix, got shape {states.shape}")
        if times.shape != (states.shape[0],):
            raise ValidationError(f"{times.shape[0]} times for {states.shape[0]} state rows")
        if times.size > 1 and np.any(np.diff(times) <= 0):
            raise ValidationError("times must be strictly increasing")
        times.setflags(write=False)
        states.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "states", states)

    def __len__(self):
        return self.states.shape[0]

    @property
    def p(self):
        return self.states.shape[1]

    def with_states(self, states):
        return Trajectory(self.times, states)

    def window(self, start, stop):
        return Trajectory(self.times[start:stop], self.states[start:stop])

    def stride(self, step):
        return Trajectory(self.times[::step], self.states[::step])

    def pairs(self):
        """Consecutive (x_t, x_t+1) rows as two aligned matrices."""
        return self.states[:-1], self.states[1:]


def _rhs(spec, x):
    if spec.kind is SystemKind.LORENZ96:
        return (np.roll(x, -1) - np.roll(x, 2)) * np.roll(x, 1) - x + spec.forcing
    if spec.kind is SystemKind.REACTION_DIFFUSION:
        return np.roll(x, 1) - 2.0 * x + np.roll(x, -1) + x * (1.0 - x)
    if spec.kind is SystemKind.LINEAR:
        return spec.matrix @ x
    return spec.growth * x * (1.0 - (spec.interaction @ x) / spec.capacity)


def _jacobian(spec, x):
    p = spec.p
    rows = np.arange(p)
    if spec.kind is SystemKind.LORENZ96:
        jac = np.zeros((p, p))
        jac[rows, (rows + 1) % p] = np.roll(x, 1)
        jac[rows, (rows - 2) % p] = -np.roll(x, 1)
        jac[rows, (rows - 1) % p] = np.roll(x, -1) - np.roll(x, 2)
        jac[rows, rows] = -1.0
        return jac
    if spec.kind is SystemKind.REACTION_DIFFUSION:
        jac = np.zeros((p, p))
        jac[rows, (rows + 1) % p] = 1.0
        jac[rows, (rows - 1) % p] = 1.0
        jac[rows, rows] = -1.0 - 2.0 * x
        return jac
    if spec.kind is SystemKind.LINEAR:
        return np.array(spec.matrix)
    jac = -(spec.growth * x / spec.capacity)[:, None] * spec.interaction
    jac[rows, rows] += spec.growth * (1.0 - (spec.interaction @ x) / spec.capacity)
    return jac


def _checked_state(spec, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (spec.p,):
        raise ValidationError(f"state has shape {x.shape}, expected ({spec.p},)")
    if not np.all(np.isfinite(x)):
        raise ValidationError("state contains non-finite values")
    return x


def derivative(spec, x):
    """dx/dt of the system's governing equation, indices wrapping around the ring."""
    return _rhs(spec, _checked_state(spec, x))


def jacobian(spec, x):
    """d(dx/dt)/dx: entry (i, j) is how strongly variable j drives the derivative of variable i."""
    return _jacobian(spec, _checked_state(spec, x))


def integrate(spec, x0, dt, steps, method=Integrator.RK4, state_offset=None):
    """
    Fixed-step integration returning steps + 1 rows, row 0 being x0.

    state_offset(n) may return a p-vector Z for step n (row n -> n + 1), or None for
    normal dynamics. A perturbed step integrates dx/dt = f(x) + J(x) Z: every equation
    reads x + Z through its coupling coefficients taken at the true state, and the rows
    record the true state. With a single perturbed variable this equals f(x + Z) for
    Lorenz96 and linear systems.
    """
    method = Integrator(method)
    if dt <= 0:
        raise ValidationError(f"dt must be positive, got {dt}")
    if steps < 0:
        raise ValidationError(f"steps must be non-negative, got {steps}")
    x = np.array(x0, dtype=np.float64)
    if x.shape != (spec.p,) or not np.all(np.isfinite(x)):
        raise ValidationError(f"x0 must be a finite vector of length {spec.p}")

    states = np.empty((steps + 1, spec.p))
    states[0] = x
    for n in range(steps):
        offset = state_offset(n) if state_offset is not None else None

        def f(state):
            if offset is None:
                return _rhs(spec, state)
            return _rhs(spec, state) + _jacobian(spec, state) @ offset

        if method is Integrator.EULER:
            x = x + dt * f(x)
        else:
            k1 = f(x)
            k2 = f(x + 0.5 * dt * k1)
            k3 = f(x + 0.5 * dt * k2)
            k4 = f(x + dt * k3)
            x = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > DIVERGENCE_LIMIT:
            logger.warning(f"{spec.kind.value} integration diverged at step {n + 1}")
            raise DivergenceError(f"{spec.kind.value} integration diverged", step=n + 1)
        states[n + 1] = x
    return Trajectory(np.arange(steps + 1) * dt, states)


def ground_truth_graph(spec):
    p = spec.p
    rows = np.arange(p)
    adjacency = np.zeros((p, p), dtype=bool)
    if spec.kind is SystemKind.LORENZ96:
        for shift in (-2, -1, 0, 1):
            adjacency[rows, (rows + shift) % p] = True
    elif spec.kind is SystemKind.REACTION_DIFFUSION:
        for shift in (-1, 0, 1):
            adjacency[rows, (rows + shift) % p] = True
    elif spec.kind is SystemKind.LINEAR:
        adjacency = spec.matrix != 0
    else:
        adjacency = spec.interaction != 0
        np.fill_diagonal(adjacency, True)
    return DependencyGraph(adjacency)


def add_sensor_noise(traj, sigma, seed):
    """Independent N(0, sigma^2) perturbation of every entry, reproducible from seed."""
    if sigma < 0:
        raise ValidationError(f"sensor noise sigma must be non-negative, got {sigma}", field="protocol.noise_sigma")
    if sigma == 0:
        return traj.with_states(traj.states)
    rng = np.random.default_rng(seed)
    return traj.with_states(traj.states + rng.normal(0.0, sigma, size=traj.states.shape))


def write_trajectory_csv(traj, path):
    columns = {"t": traj.times}
    for i in range(traj.p):
        columns[f"x{i + 1}"] = traj.states[:, i]
    # %.17g keeps every float64 bit through the text round-trip
    pd.DataFrame(columns).to_csv(path, index=False, float_format="%.17g")


def read_trajectory_csv(path):
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except (OSError, pd.errors.ParserError) as e:
        raise ArtifactError(f"Error reading trajectory {path}: {e}")
    if frame.columns[0] != "t":
        raise ArtifactError(f"{path}: first column must be 't', got '{frame.columns[0]}'")
    return Trajectory(frame["t"].to_numpy(), frame.iloc[:, 1:].to_numpy())
