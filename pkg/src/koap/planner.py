"""Denoising-diffusion planner over future states.

The same machinery also backs the Diffusion Policy baseline: a
:class:`PlannerModel` diffuses a flat vector ``[conditioning states, target
rows]`` where the target rows are either future states or actions.
Conditioning is by inpainting: the known entries are overwritten after every
denoising step and are excluded from the training loss.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import Normalizer, Trajectory, all_actions, all_states, make_windows
from .numerics import (DTYPE, ConfigError, MlpSpec, ParamBuilder, ParamVector, WindowError, fit, init_mlp,
                       load_checkpoint, mlp_forward, save_checkpoint, sinusoidal_embedding)


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64).reshape(-1)
        if len(b) < 1 or np.any(b <= 0) or np.any(b >= 1) or np.any(np.diff(b) < 0):
            raise ConfigError("betas must be non-decreasing in (0, 1)")
        object.__setattr__(self, "betas", b)

    @classmethod
    def linear(cls, steps: int, beta_start: float, beta_end: float) -> "NoiseSchedule":
        return cls(np.linspace(beta_start, beta_end, steps))

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bar(self) -> np.ndarray:
        """Cumulative products with index 0 meaning "no noise" (value 1)."""
        return np.concatenate([[1.0], np.cumprod(self.alphas)])

    @property
    def posterior_variance(self) -> np.ndarray:
        ab = self.alpha_bar
        return np.concatenate([[0.0], self.betas * (1 - ab[:-1]) / (1 - ab[1:])])


def q_sample(schedule: NoiseSchedule, x0, step: int, noise):
    """``sqrt(ab) x0 + sqrt(1 - ab) noise`` at diffusion ``step`` (0 returns ``x0``)."""
    if not 0 <= step <= schedule.T:
        raise ConfigError(f"diffusion step {step} outside [0, {schedule.T}]")
    ab = schedule.alpha_bar[step]
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if x0.shape != noise.shape:
        raise ConfigError("x0 and noise shapes differ")
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


@dataclass(frozen=True)
class PlannerConfig:
    n_history: int = 2
    horizon: int = 12
    diffusion_steps: int = 50
    beta_start: float = 2e-3
    beta_end: float = 0.4
    hidden: int = 256
    depth: int = 2
    emb_dim: int = 16
    clip_x0: float | None = 5.0
    epochs: int = 30
    steps_per_epoch: int = 100
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0
    pad_end: bool = False

    @classmethod
    def from_dict(cls, d: dict | None) -> "PlannerConfig":
        d = dict(d or {})
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class PlannerModel:
    """Conditional diffusion model over ``k`` target rows given ``n+1`` state rows."""

    kind: str                      # "states" (planner) or "actions" (diffusion policy)
    state_dim: int
    target_dim: int
    denoiser: MlpSpec
    params: ParamVector
    schedule: NoiseSchedule
    state_norm: Normalizer
    target_norm: Normalizer
    cfg: PlannerConfig = field(default_factory=PlannerConfig)
    epoch_losses: list = field(default_factory=list, repr=False)

    @property
    def horizon(self) -> int:
        return self.cfg.horizon

    @property
    def n_history(self) -> int:
        return self.cfg.n_history

    @property
    def cond_len(self) -> int:
        return (self.cfg.n_history + 1) * self.state_dim

    @property
    def target_len(self) -> int:
        return self.cfg.horizon * self.target_dim

    def header(self) -> dict:
        return {"kind": self.kind, "state_dim": self.state_dim, "target_dim": self.target_dim,
                "denoiser": asdict(self.denoiser), "betas": self.schedule.betas.tolist(),
                "state_norm": self.state_norm.to_json(), "target_norm": self.target_norm.to_json(),
                "cfg": asdict(self.cfg)}

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self.params, self.header())

    @classmethod
    def load(cls, path: str | Path) -> "PlannerModel":
        params, h = load_checkpoint(path)
        d = h["denoiser"]
        act = d["activation"] if isinstance(d["activation"], str) else tuple(d["activation"])
        return cls(h["kind"], h["state_dim"], h["target_dim"], MlpSpec(tuple(d["widths"]), act), params,
                   NoiseSchedule(np.asarray(h["betas"])), Normalizer.from_json(h["state_norm"]),
                   Normalizer.from_json(h["target_norm"]), PlannerConfig.from_dict(h["cfg"]))


def init_planner(kind: str, state_dim: int, target_dim: int, cfg: PlannerConfig, state_norm: Normalizer,
                 target_norm: Normalizer) -> PlannerModel:
    if kind not in ("states", "actions"):
        raise ConfigError(f"unknown planner kind {kind!r}")
    full = (cfg.n_history + 1) * state_dim + cfg.horizon * target_dim
    spec = MlpSpec((full + cfg.emb_dim,) + (cfg.hidden,) * cfg.depth + (full,), "relu")
    b = ParamBuilder()
    init_mlp(b, "eps", spec, np.random.default_rng([cfg.seed, 11]))
    sched = NoiseSchedule.linear(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)
    return PlannerModel(kind, state_dim, target_dim, spec, b.build(), sched, state_norm, target_norm, cfg)


def predict_noise(model: PlannerModel, p: ParamVector, x: torch.Tensor, steps: torch.Tensor) -> torch.Tensor:
    emb = sinusoidal_embedding(steps, model.cfg.emb_dim)
    return mlp_forward(model.denoiser, p, torch.cat([x, emb], dim=-1), "eps")


def noise_loss(model: PlannerModel, p: ParamVector, x0: torch.Tensor, steps: torch.Tensor,
               noise: torch.Tensor) -> torch.Tensor:
    """Mean squared noise-prediction error over the unconditioned entries."""
    ab = torch.as_tensor(model.schedule.alpha_bar, dtype=DTYPE)[steps][:, None]
    xt = ab.sqrt() * x0 + (1 - ab).sqrt() * noise
    C = model.cond_len
    xt = torch.cat([x0[:, :C], xt[:, C:]], dim=-1)
    eps = predict_noise(model, p, xt, steps)
    return ((eps[:, C:] - noise[:, C:]) ** 2).mean()


def _flat_examples(model: PlannerModel, trajectories: Sequence[Trajectory]) -> torch.Tensor:
    cfg = model.cfg
    labeled = model.kind == "actions"
    wb = make_windows(trajectories, cfg.n_history, cfg.horizon, labeled=labeled, pad_end=cfg.pad_end)
    cond = model.state_norm.normalize(wb.states[:, :cfg.n_history + 1]).reshape(len(wb), -1)
    if labeled:
        tgt = model.target_norm.normalize(wb.actions)
    else:
        tgt = model.state_norm.normalize(wb.states[:, cfg.n_history + 1:])
    return torch.as_tensor(np.concatenate([cond, tgt.reshape(len(wb), -1)], axis=1))


def _train(model: PlannerModel, trajectories: Sequence[Trajectory]) -> PlannerModel:
    cfg = model.cfg
    data = _flat_examples(model, trajectories)
    T = model.schedule.T

    def sample(rng):
        idx = rng.integers(0, len(data), cfg.batch_size)
        steps = torch.as_tensor(rng.integers(1, T + 1, cfg.batch_size))
        noise = torch.as_tensor(rng.standard_normal((cfg.batch_size, data.shape[1])))
        return data[idx], steps, noise

    res = fit(lambda p, b: noise_loss(model, p, *b), model.params, sample, np.random.default_rng([cfg.seed, 12]),
              epochs=cfg.epochs, steps_per_epoch=cfg.steps_per_epoch, lr=cfg.lr, weight_decay=cfg.weight_decay,
              label=f"diffusion[{model.kind}]")
    return replace(model, params=res.params, epoch_losses=res.epoch_losses)


def train_planner(D_x: Sequence[Trajectory], cfg: PlannerConfig = PlannerConfig(),
                  state_norm: Normalizer | None = None) -> PlannerModel:
    """Fit the future-state diffusion model on action-free trajectories."""
    if not D_x:
        raise WindowError("D_x must be non-empty")
    D_x = [t.strip() for t in D_x]
    norm = state_norm or Normalizer.fit(all_states(D_x))
    sd = D_x[0].states.shape[1]
    return _train(init_planner("states", sd, sd, cfg, norm, norm), D_x)


def train_action_diffusion(D_a: Sequence[Trajectory], cfg: PlannerConfig = PlannerConfig()) -> PlannerModel:
    """Same model with actions as the diffused rows (the Diffusion Policy baseline)."""
    if not D_a:
        raise WindowError("D_a must be non-empty")
    sd, ad = D_a[0].states.shape[1], D_a[0].actions.shape[1]
    model = init_planner("actions", sd, ad, cfg, Normalizer.fit(all_states(D_a)), Normalizer.fit(all_actions(D_a)))
    return _train(model, D_a)


# ------------------------------------------------------------------------ sampling

def sample_rows(model: PlannerModel, history, current, noises: np.ndarray, *, full: bool = False) -> np.ndarray:
    """Ancestral sampling for a batch.

    ``history`` is ``(B, n, d)``, ``current`` ``(B, d)`` and ``noises``
    ``(B, T+1, D)`` standard normals: row 0 seeds ``x_T``, row ``t`` is the
    fresh noise added when stepping from ``t`` to ``t-1``.  Returns the
    denormalized target rows ``(B, k, target_dim)``, or with ``full`` the
    whole ``(B, n+1+k, d)`` matrix including the re-imposed conditioning rows
    (state planners only).
    """
    history = np.asarray(history, dtype=np.float64)
    current = np.asarray(current, dtype=np.float64)
    B = len(current)
    n, k = model.cfg.n_history, model.cfg.horizon
    if history.shape != (B, n, model.state_dim) or current.shape != (B, model.state_dim):
        raise ConfigError(f"conditioning shapes {history.shape}, {current.shape} do not match model")
    if full and model.kind != "states":
        raise ConfigError("full output is only defined for state planners")
    sched = model.schedule
    T = sched.T
    ab, betas, post = sched.alpha_bar, sched.betas, sched.posterior_variance
    cond = torch.as_tensor(model.state_norm.normalize(np.concatenate([history, current[:, None]], 1)).reshape(B, -1))
    z = torch.as_tensor(np.asarray(noises, dtype=np.float64))
    C = model.cond_len
    x = z[:, 0].clone()
    x[:, :C] = cond
    with torch.no_grad():
        for t in range(T, 0, -1):
            eps = predict_noise(model, model.params, x, torch.full((B,), t))
            x0 = (x - np.sqrt(1 - ab[t]) * eps) / np.sqrt(ab[t])
            if model.cfg.clip_x0 is not None:
                x0 = x0.clamp(-model.cfg.clip_x0, model.cfg.clip_x0)
            c1 = np.sqrt(ab[t - 1]) * betas[t - 1] / (1 - ab[t])
            c2 = np.sqrt(1 - betas[t - 1]) * (1 - ab[t - 1]) / (1 - ab[t])
            x = c1 * x0 + c2 * x
            if t > 1:
                x = x + np.sqrt(post[t]) * z[:, t]
            x[:, :C] = cond
    if full:
        return model.state_norm.denormalize(x.numpy().reshape(B, n + 1 + k, model.state_dim))
    tgt = x[:, C:].numpy().reshape(B, k, model.target_dim)
    return model.target_norm.denormalize(tgt)


def draw_noise(model: PlannerModel, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal((model.schedule.T + 1, model.cond_len + model.target_len))


@dataclass(frozen=True)
class Plan:
    """Current state followed by ``k`` planned future states."""

    states: np.ndarray

    @property
    def current(self) -> np.ndarray:
        return self.states[0]

    @property
    def future(self) -> np.ndarray:
        return self.states[1:]


def sample_plan(model: PlannerModel, x_t, h_t, seed) -> Plan:
    """One plan conditioned on current state ``x_t`` and ``n`` history states ``h_t``."""
    if model.kind != "states":
        raise ConfigError("sample_plan needs a state planner")
    x_t = np.asarray(x_t, dtype=np.float64)
    h_t = np.asarray(h_t, dtype=np.float64)
    noise = draw_noise(model, np.random.default_rng(seed))
    fut = sample_rows(model, h_t[None], x_t[None], noise[None])[0]
    return Plan(np.concatenate([x_t[None], fut]))


def sample_plans(model: PlannerModel, history, current, rngs: Sequence[np.random.Generator]) -> np.ndarray:
    """Batched plans ``(B, k+1, d)`` whose first row is ``current`` exactly."""
    current = np.asarray(current, dtype=np.float64)
    noise = np.stack([draw_noise(model, r) for r in rngs])
    fut = sample_rows(model, history, current, noise)
    return np.concatenate([current[:, None], fut], axis=1)


def sample_actions(model: PlannerModel, x_t, h_t, seed) -> np.ndarray:
    """``(k, action_dim)`` action sequence from an action-diffusion model."""
    if model.kind != "actions":
        raise ConfigError("sample_actions needs an action-diffusion model")
    noise = draw_noise(model, np.random.default_rng(seed))
    return sample_rows(model, np.asarray(h_t, dtype=np.float64)[None], np.asarray(x_t, dtype=np.float64)[None],
                       noise[None])[0]
