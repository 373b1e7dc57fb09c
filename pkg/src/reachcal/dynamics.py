"""Benchmark systems and seeded trajectory generation.

All ODE systems are integrated with classical fixed-step RK4 using
``substeps`` internal steps per recorded interval.  The Gray-Scott PDE uses
explicit Euler sub-stepping with the diffusion stability bound.  Vector
fields are written to broadcast over a leading batch axis, so a whole
dataset integrates as one array program while remaining bit-identical to
per-trajectory integration.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, SimulationFailure
from .validation import check_box

DIVERGENCE_GUARD = 1e6


def _check_finite_field(value, t):
    if not np.all(np.isfinite(value)):
        raise SimulationFailure(f"vector field returned non-finite values at t={t!r}")


def rk4_step(field, state, t, dt):
    """One classical 4th-order Runge-Kutta step of size ``dt``.

    ``field(state, t)`` must return the time derivative with the same shape
    as ``state``; it may be batched over leading axes.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    state = np.asarray(state, dtype=np.float64)
    k1 = np.asarray(field(state, t))
    _check_finite_field(k1, t)
    k2 = np.asarray(field(state + 0.5 * dt * k1, t + 0.5 * dt))
    _check_finite_field(k2, t + 0.5 * dt)
    k3 = np.asarray(field(state + 0.5 * dt * k2, t + 0.5 * dt))
    _check_finite_field(k3, t + 0.5 * dt)
    k4 = np.asarray(field(state + dt * k3, t + dt))
    _check_finite_field(k4, t + dt)
    return state + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _integrate_recorded(field, state0, n_steps, dt, substeps):
    """Record ``n_steps`` states at t_k = k*dt, including the initial state."""
    state = np.asarray(state0, dtype=np.float64)
    out = np.empty((n_steps,) + state.shape, dtype=np.float64)
    out[0] = state
    h = dt / substeps
    for k in range(1, n_steps):
        t = (k - 1) * dt
        for j in range(substeps):
            state = rk4_step(field, state, t + j * h, h)
        if np.max(np.abs(state)) > DIVERGENCE_GUARD:
            raise SimulationFailure(
                f"state magnitude exceeded {DIVERGENCE_GUARD:g} at t={k * dt!r}"
            )
        out[k] = state
    return out


@dataclass(frozen=True)
class Trajectory:
    """Recorded states of one run: (K, n) array sampled every ``dt``."""

    states: np.ndarray
    dt: float
    seed_id: int = 0

    def __post_init__(self):
        if self.states.ndim != 2 or self.states.shape[0] < 1:
            raise ValueError("states must be a (K, n) array with K >= 1")
        if not np.all(np.isfinite(self.states)):
            raise SimulationFailure("trajectory contains non-finite states")


@dataclass(frozen=True)
class DuffingParams:
    """Forced Duffing oscillator  x'' + c x' - a x + b x^3 = A cos(w t)."""

    a: float = 1.0
    b: float = 5.0
    c: float = 0.02
    amplitude: float = 8.0
    omega: float = 0.5
    x0_box: np.ndarray = field(
        default_factory=lambda: np.array([[-1.0, 1.0], [-1.0, 1.0]])
    )

    def __post_init__(self):
        if self.c < 0:
            raise ConfigurationError("damping c must be >= 0")
        if self.omega <= 0:
            raise ConfigurationError("forcing frequency omega must be > 0")
        object.__setattr__(self, "x0_box", check_box(self.x0_box, "x0_box"))

    def vector_field(self):
        a, b, c, amp, om = self.a, self.b, self.c, self.amplitude, self.omega

        def f(state, t):
            x = state[..., 0]
            v = state[..., 1]
            dv = amp * math.cos(om * t) - c * v + a * x - b * x**3
            return np.stack([v, dv], axis=-1)

        return f

    def energy(self, state):
        """Conserved energy of the unforced, undamped oscillator."""
        x = state[..., 0]
        v = state[..., 1]
        return 0.5 * v**2 - 0.5 * self.a * x**2 + 0.25 * self.b * x**4


# Initial box and input ranges follow the planar-quadrotor benchmark setup;
# the box itself is a package default (see README).
_QUAD_X0 = [
    [-1.7, 1.7],
    [0.3, 2.0],
    [-math.pi / 12.0, math.pi / 12.0],
    [-0.8, 0.8],
    [-1.0, 1.0],
    [-math.pi / 2.0, math.pi / 2.0],
]


@dataclass(frozen=True)
class QuadrotorParams:
    """Planar quadrotor with state (x, h, theta, x', h', theta')."""

    g: float = 9.81
    k_rotor: float = 0.89 / 1.4
    d0: float = 70.0
    d1: float = 17.0
    n0: float = 55.0
    x0_box: np.ndarray = field(default_factory=lambda: np.array(_QUAD_X0))
    u1_range: tuple = (-1.5 + 9.81 / (0.89 / 1.4), 1.5 + 9.81 / (0.89 / 1.4))
    u2_range: tuple = (-math.pi / 4.0, math.pi / 4.0)

    def __post_init__(self):
        if self.g <= 0:
            raise ConfigurationError("g must be > 0")
        if not (self.u1_range[0] < self.u1_range[1] and self.u2_range[0] < self.u2_range[1]):
            raise ConfigurationError("input ranges must be nonempty")
        object.__setattr__(self, "x0_box", check_box(self.x0_box, "x0_box"))

    def vector_field(self, u1, u2):
        g, kr, d0, d1, n0 = self.g, self.k_rotor, self.d0, self.d1, self.n0
        u1 = np.asarray(u1, dtype=np.float64)
        u2 = np.asarray(u2, dtype=np.float64)

        def f(state, t):
            theta = state[..., 2]
            ddx = u1 * kr * np.sin(theta)
            ddh = -g + u1 * kr * np.cos(theta)
            ddtheta = -d0 * theta - d1 * state[..., 5] + n0 * u2
            return np.stack(
                [state[..., 3], state[..., 4], state[..., 5], ddx, ddh, ddtheta],
                axis=-1,
            )

        return f


@dataclass(frozen=True)
class GrayScottParams:
    """Two-species reaction-diffusion on a square periodic grid."""

    du: float = 0.2
    dv: float = 0.1
    feed: float = 0.055
    kill: float = 0.062
    grid: int = 16
    dx: float = 1.0
    substeps: int = 50

    def __post_init__(self):
        if self.du <= 0 or self.dv <= 0:
            raise ConfigurationError("diffusion coefficients must be > 0")
        if self.grid < 4:
            raise ConfigurationError("grid must be >= 4")
        if self.substeps < 1:
            raise ConfigurationError("substeps must be >= 1")

    @property
    def sub_dt(self):
        """Explicit-Euler sub-step: 0.8 x the diffusion stability bound."""
        return 0.8 * self.dx**2 / (4.0 * max(self.du, self.dv))

    @property
    def recorded_dt(self):
        return self.substeps * self.sub_dt

    @property
    def state_dim(self):
        return 2 * self.grid * self.grid


def simulate_duffing(params, xi, n_steps, dt, substeps=10, seed_id=0):
    """Integrate the Duffing oscillator from ``xi``; records t_k = k*dt."""
    xi = np.asarray(xi, dtype=np.float64)
    states = _integrate_recorded(params.vector_field(), xi, n_steps, dt, substeps)
    return Trajectory(states=states, dt=dt, seed_id=seed_id)


def simulate_quadrotor(params, xi, u1, u2, t1, dt=None, substeps=None):
    """State of the quadrotor at the terminal time ``t1`` under constant inputs.

    ``dt``/``substeps`` control the internal step; default step is 0.01.
    """
    if substeps is None:
        substeps = max(1, int(round(t1 / (dt if dt is not None else 0.01))))
    field_fn = params.vector_field(u1, u2)
    state = np.asarray(xi, dtype=np.float64)
    h = t1 / substeps
    for j in range(substeps):
        state = rk4_step(field_fn, state, j * h, h)
        if np.max(np.abs(state)) > DIVERGENCE_GUARD:
            raise SimulationFailure(f"state magnitude exceeded guard at t={(j + 1) * h!r}")
    return state


def _laplacian(z, dx):
    return (
        np.roll(z, 1, axis=-2)
        + np.roll(z, -1, axis=-2)
        + np.roll(z, 1, axis=-1)
        + np.roll(z, -1, axis=-1)
        - 4.0 * z
    ) / dx**2


def _gray_scott_substep(u, v, params, dt):
    uvv = u * v * v
    du = params.du * _laplacian(u, params.dx) - uvv + params.feed * (1.0 - u)
    dv = params.dv * _laplacian(v, params.dx) + uvv - (params.feed + params.kill) * v
    return u + dt * du, v + dt * dv


def simulate_gray_scott(params, u0, v0, n_steps, seed_id=0, sub_dt=None):
    """Record ``n_steps`` flattened (u then v) fields, the initial one first."""
    u = np.asarray(u0, dtype=np.float64)
    v = np.asarray(v0, dtype=np.float64)
    if u.shape[-2:] != (params.grid, params.grid) or v.shape != u.shape:
        raise ValueError(f"fields must have trailing shape ({params.grid}, {params.grid})")
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise SimulationFailure("initial fields contain non-finite values")
    dt = params.sub_dt if sub_dt is None else sub_dt
    batch_shape = u.shape[:-2]
    flat = lambda a, b: np.concatenate(
        [a.reshape(batch_shape + (-1,)), b.reshape(batch_shape + (-1,))], axis=-1
    )
    out = np.empty((n_steps,) + batch_shape + (params.state_dim,), dtype=np.float64)
    out[0] = flat(u, v)
    for k in range(1, n_steps):
        for j in range(params.substeps):
            u, v = _gray_scott_substep(u, v, params, dt)
            if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
                raise SimulationFailure(
                    f"non-finite field at recorded step {k}, sub-step {j}"
                )
        out[k] = flat(u, v)
    if batch_shape:
        return out
    return Trajectory(states=out, dt=params.recorded_dt, seed_id=seed_id)


def sample_gray_scott_initial(params, rng):
    """Seed-patch initial condition: uniform patch centre, side in {3,4,5}.

    The patch is deep (u=0.25, v=0.5): shallower seeds decay back to the
    homogeneous state within two recorded steps at the 16x16 desk scale,
    which would collapse every trajectory onto one point.
    """
    g = params.grid
    u = np.ones((g, g))
    v = np.zeros((g, g))
    side = rng.integers(3, 6)
    ci = rng.integers(0, g)
    cj = rng.integers(0, g)
    rows = (ci + np.arange(side)) % g
    cols = (cj + np.arange(side)) % g
    u[np.ix_(rows, cols)] = 0.25
    v[np.ix_(rows, cols)] = 0.5
    u += rng.uniform(-0.02, 0.02, size=(g, g))
    v += rng.uniform(-0.02, 0.02, size=(g, g))
    return u, v


def trajectory_rng(seed, index):
    """Independent generator for trajectory ``index`` of a dataset run."""
    return np.random.default_rng(np.random.SeedSequence((int(seed), int(index))))


def generate_dataset(system, n_traj, n_steps, dt=None, seed=0, substeps=10, t1=5.0):
    """Sample seeded trajectories; returns a datastore.Dataset.

    ``system`` is a params instance of one of the three benchmark systems.
    Initial conditions are uniform over the system's initial box (plus
    uniform inputs for the quadrotor); each trajectory owns an independent
    generator derived from (seed, index).  The quadrotor records the
    terminal state only (one step at t1).
    """
    from .datastore import Dataset

    if n_traj < 1:
        raise ConfigurationError("n_traj must be >= 1")

    if isinstance(system, DuffingParams):
        box = system.x0_box
        xi = np.stack(
            [trajectory_rng(seed, i).uniform(box[:, 0], box[:, 1]) for i in range(n_traj)]
        )
        field_fn = system.vector_field()
        try:
            states = _integrate_recorded(field_fn, xi, n_steps, dt, substeps)
        except SimulationFailure as exc:
            raise SimulationFailure(f"dataset generation failed: {exc}") from exc
        states = np.swapaxes(states, 0, 1)
        return Dataset(
            states=states.astype(np.float32), dt=float(dt), system_tag="duffing", seed=seed
        )

    if isinstance(system, QuadrotorParams):
        box = system.x0_box
        draws = []
        for i in range(n_traj):
            rng = trajectory_rng(seed, i)
            xi = rng.uniform(box[:, 0], box[:, 1])
            u1 = rng.uniform(*system.u1_range)
            u2 = rng.uniform(*system.u2_range)
            draws.append((xi, u1, u2))
        xi = np.stack([d[0] for d in draws])
        u1 = np.array([d[1] for d in draws])
        u2 = np.array([d[2] for d in draws])
        field_fn = system.vector_field(u1, u2)
        sub = max(1, int(round(t1 / 0.01)))
        h = t1 / sub
        state = xi
        for j in range(sub):
            state = rk4_step(field_fn, state, j * h, h)
            if np.max(np.abs(state)) > DIVERGENCE_GUARD:
                raise SimulationFailure(f"dataset generation diverged at sub-step {j}")
        return Dataset(
            states=state[:, None, :].astype(np.float32),
            dt=float(t1),
            system_tag="quadrotor",
            seed=seed,
        )

    if isinstance(system, GrayScottParams):
        g = system.grid
        u0 = np.empty((n_traj, g, g))
        v0 = np.empty((n_traj, g, g))
        for i in range(n_traj):
            u0[i], v0[i] = sample_gray_scott_initial(system, trajectory_rng(seed, i))
        states = simulate_gray_scott(system, u0, v0, n_steps)
        states = np.swapaxes(states, 0, 1)
        return Dataset(
            states=states.astype(np.float32),
            dt=float(system.recorded_dt),
            system_tag="gray_scott",
            seed=seed,
        )

    raise ConfigurationError(f"unknown system parameters: {type(system).__name__}")
