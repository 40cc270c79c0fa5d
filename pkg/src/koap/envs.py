"""Ground-truth worlds: a linear time-invariant oracle and a 2D obstacle-avoidance task."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Trajectory
from .numerics import ConfigError

RUNNING, SUCCESS, COLLISION, TIMEOUT = "running", "success", "collision", "timeout"


class ProtocolError(RuntimeError):
    """Stepping an episode that has already finished."""


class OracleError(np.linalg.LinAlgError):
    """The least-squares regressor is rank deficient."""


# ------------------------------------------------------------------------- LTI

@dataclass(frozen=True)
class LtiSystem:
    A: np.ndarray
    B: np.ndarray
    noise_std: float = 0.0

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        B = np.asarray(self.B, dtype=np.float64).reshape(A.shape[0], -1)
        if A.shape[0] != A.shape[1]:
            raise ConfigError("A must be square")
        if np.max(np.abs(np.linalg.eigvals(A))) > 1.05:
            raise ConfigError("spectral radius of A exceeds 1.05")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def action_dim(self) -> int:
        return self.B.shape[1]


def lti_step(sys: LtiSystem, x, a, rng: np.random.Generator | None = None) -> np.ndarray:
    x_next = sys.A @ np.asarray(x, dtype=np.float64) + sys.B @ np.asarray(a, dtype=np.float64)
    if sys.noise_std > 0:
        rng = rng if rng is not None else np.random.default_rng()
        x_next = x_next + sys.noise_std * rng.standard_normal(sys.state_dim)
    return x_next


def lti_generate(sys: LtiSystem, n_traj: int, T: int, seed: int, action_std: float = 1.0,
                 x0_std: float = 1.0) -> list[Trajectory]:
    """Trajectories driven by i.i.d. Gaussian actions (full-rank excitation)."""
    if n_traj < 1 or T < 1:
        raise ConfigError("need n_traj >= 1 and T >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_traj):
        x = x0_std * rng.standard_normal(sys.state_dim)
        acts = action_std * rng.standard_normal((T, sys.action_dim))
        states = [x]
        for a in acts:
            x = lti_step(sys, x, a, rng)
            states.append(x)
        out.append(Trajectory(np.array(states), acts, {"env": "lti", "seed": seed, "index": i}))
    return out


def dmdc_fit(trajectories) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares ``(A, B)`` minimizing ``sum ||x_{t+1} - A x_t - B a_t||^2``."""
    X = np.concatenate([t.states[:-1] for t in trajectories])
    U = np.concatenate([t.actions for t in trajectories])
    Y = np.concatenate([t.states[1:] for t in trajectories])
    omega = np.hstack([X, U])
    if np.linalg.matrix_rank(omega) < omega.shape[1]:
        raise OracleError("regressor [x; a] is rank deficient")
    theta = np.linalg.solve(omega.T @ omega, omega.T @ Y)
    n = X.shape[1]
    return theta[:n].T, theta[n:].T


class LtiEnv:
    """Episode wrapper around an :class:`LtiSystem` for closed-loop tracking."""

    def __init__(self, sys: LtiSystem, x0, cap: int = 100, seed: int = 0):
        self.sys = sys
        self.state = np.asarray(x0, dtype=np.float64)
        self.cap = cap
        self.steps = 0
        self.status = RUNNING
        self._rng = np.random.default_rng(seed)

    def observe(self) -> np.ndarray:
        return self.state.copy()

    def step(self, action) -> tuple[np.ndarray, str]:
        if self.status != RUNNING:
            raise ProtocolError("episode already finished")
        self.state = lti_step(self.sys, self.state, action, self._rng)
        self.steps += 1
        if self.steps >= self.cap:
            self.status = TIMEOUT
        return self.observe(), self.status


# --------------------------------------------------------------------- Avoiding

@dataclass(frozen=True)
class AvoidConfig:
    """Geometry of the obstacle-avoidance task (unit workspace)."""

    obstacles: tuple[tuple[float, float], ...] = ((0.5, 0.38), (0.5, 0.62))
    radius: float = 0.12
    goal_x: float = 0.9
    max_speed: float = 0.05
    cap: int = 100
    start_x: float = 0.0
    start_y: tuple[float, float] = (0.35, 0.65)
    obs_noise: float = 0.0

    def collides(self, pos) -> bool:
        c = np.asarray(self.obstacles)
        return bool(np.any(np.sum((c - np.asarray(pos)) ** 2, axis=1) < self.radius ** 2))

    def sample_start(self, rng: np.random.Generator) -> np.ndarray:
        return np.array([self.start_x, rng.uniform(*self.start_y)])

    def make(self, seed: int) -> "AvoidEnv":
        rng = np.random.default_rng([seed, 7919])
        return AvoidEnv(self, self.sample_start(rng), seed=seed)


class AvoidEnv:
    """End-effector moving under clipped velocity commands among fixed obstacles."""

    def __init__(self, cfg: AvoidConfig, start, seed: int = 0):
        self.cfg = cfg
        self.pos = np.asarray(start, dtype=np.float64).copy()
        self.steps = 0
        self.status = RUNNING
        self._rng = np.random.default_rng([seed, 104729])

    def clip_action(self, action) -> np.ndarray:
        a = np.asarray(action, dtype=np.float64)
        speed = np.linalg.norm(a)
        if speed > self.cfg.max_speed:
            a = a * (self.cfg.max_speed / speed)
        return a

    def observe(self) -> np.ndarray:
        if self.cfg.obs_noise > 0:
            return self.pos + self.cfg.obs_noise * self._rng.standard_normal(2)
        return self.pos.copy()

    def step(self, action) -> tuple[np.ndarray, str]:
        if self.status != RUNNING:
            raise ProtocolError(f"episode already finished ({self.status})")
        self.pos = np.clip(self.pos + self.clip_action(action), 0.0, 1.0)
        self.steps += 1
        if self.cfg.collides(self.pos):
            self.status = COLLISION
        elif self.pos[0] >= self.cfg.goal_x:
            self.status = SUCCESS
        elif self.steps >= self.cfg.cap:
            self.status = TIMEOUT
        return self.observe(), self.status


def avoid_step(env: AvoidEnv, action) -> tuple[np.ndarray, str]:
    return env.step(action)


# ----------------------------------------------------------------------- expert

_WAYPOINTS = {
    "above": ((0.3, 0.80), (0.7, 0.80), (1.0, 0.62)),
    "below": ((0.3, 0.20), (0.7, 0.20), (1.0, 0.38)),
}


@dataclass(frozen=True)
class ExpertPolicy:
    mode: str = "above"
    waypoints: tuple[tuple[float, float], ...] | None = None
    gain: float = 1.0
    noise_std: float = 0.02
    switch_radius: float = 0.06

    def __post_init__(self):
        if self.mode not in _WAYPOINTS:
            raise ConfigError(f"unknown expert mode {self.mode!r}")
        if self.waypoints is None:
            object.__setattr__(self, "waypoints", _WAYPOINTS[self.mode])

    def perturbed(self, rng: np.random.Generator) -> np.ndarray:
        w = np.asarray(self.waypoints, dtype=np.float64)
        return w + self.noise_std * rng.standard_normal(w.shape)


def expert_rollout(cfg: AvoidConfig, seed: int, *, noise_std: float = 0.02, mode: str | None = None,
                   max_retries: int = 20) -> Trajectory:
    """Scripted demonstration; the mode alternates with seed parity unless given."""
    mode = mode or ("above" if seed % 2 == 0 else "below")
    expert = ExpertPolicy(mode=mode, noise_std=noise_std)
    rng = np.random.default_rng(seed)
    for attempt in range(max_retries):
        env = AvoidEnv(cfg, cfg.sample_start(rng), seed=seed)
        wps = expert.perturbed(rng)
        states, actions, wi = [env.pos.copy()], [], 0
        while env.status == RUNNING:
            while wi < len(wps) - 1 and np.linalg.norm(wps[wi] - env.pos) < expert.switch_radius:
                wi += 1
            a = env.clip_action(expert.gain * (wps[wi] - env.pos))
            env.step(a)
            states.append(env.pos.copy())
            actions.append(a)
        if env.status == SUCCESS:
            return Trajectory(np.array(states), np.array(actions),
                              {"env": "avoid", "seed": seed, "mode": mode, "retries": attempt})
    raise RuntimeError(f"expert failed {max_retries} times for seed {seed}")


def plan_mode(states: np.ndarray, start: np.ndarray) -> str:
    """Homotopy class of a path relative to the obstacle pair: above or below."""
    dy = np.asarray(states)[:, 1] - np.asarray(start)[1]
    return "above" if dy.mean() > 0 else "below"


def trajectory_mode(states: np.ndarray, cfg: AvoidConfig = AvoidConfig()) -> str | None:
    """Mode of a full path from the side on which it crosses the obstacle column."""
    s = np.asarray(states)
    cx = np.mean([o[0] for o in cfg.obstacles])
    cy = np.mean([o[1] for o in cfg.obstacles])
    near = s[np.abs(s[:, 0] - cx) < cfg.radius]
    if len(near) == 0:
        return None
    return "above" if near[:, 1].mean() > cy else "below"


@dataclass
class EnvSpec:
    """Serializable description of which task to instantiate."""

    name: str = "avoid"
    params: dict = field(default_factory=dict)

    def avoid_config(self) -> AvoidConfig:
        p = dict(self.params)
        for key in ("obstacles", "start_y"):
            if key in p:
                p[key] = tuple(tuple(v) if isinstance(v, list) else v for v in p[key])
        return AvoidConfig(**p)
