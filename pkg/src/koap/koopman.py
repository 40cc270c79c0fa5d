"""Koopman-lifted latent-action inverse dynamics controller.

States are lifted by an encoder ``g``, advanced linearly by a square matrix
``K`` and pushed by a latent action produced from the surrounding state
window by a recurrent encoder ``f``::

    g(x_{t+1}) = K g(x_t) + f(window_t)

An affine decoder maps latent actions to real actions, so only that decoder
depends on action labels.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import Normalizer, StateWindow, Trajectory, WindowBatch, all_actions, all_states, make_windows
from .numerics import (DTYPE, ConfigError, MlpSpec, NumericalError, ParamBuilder, ParamVector,
                       SeqEncoderSpec, WindowError, fit, init_mlp, init_seq, load_checkpoint,
                       mlp_forward, save_checkpoint, seq_forward)

log = logging.getLogger(__name__)


class LabeledDataError(ValueError):
    """Action loss requested on windows without action labels."""


@dataclass(frozen=True)
class TrainConfig:
    """Hyper-parameters shared by KOAP and the learned baselines."""

    latent_dim: int | None = None          # default 4 x state dim
    n_history: int = 2
    horizon: int = 12
    lambda_kpm: float = 1.0
    lambda_action: float = 10.0
    hidden: int = 64
    seq_hidden: int = 32
    cell: str = "gru"
    residual_init: float = 0.0             # output-layer scale of the g/g_psi MLP branches
    epochs: int = 15
    steps_per_epoch: int = 100
    batch_size: int = 64
    labeled_batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0
    pad_end: bool = False
    # baselines
    fsq_levels: tuple[int, ...] = (5, 5, 5)
    vae_beta: float = 1e-3
    finetune_epochs: int = 5

    def __post_init__(self):
        if self.lambda_kpm < 0 or self.lambda_action < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.n_history < 0 or self.horizon < 1:
            raise ConfigError("need n_history >= 0 and horizon >= 1")
        object.__setattr__(self, "fsq_levels", tuple(self.fsq_levels))

    def m(self, state_dim: int) -> int:
        return self.latent_dim or 4 * state_dim

    @classmethod
    def from_dict(cls, d: dict | None) -> "TrainConfig":
        d = dict(d or {})
        known = cls.__dataclass_fields__
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class KoapModel:
    state_dim: int
    action_dim: int
    latent_dim: int
    enc: MlpSpec
    dec: MlpSpec
    seq: SeqEncoderSpec
    params: ParamVector
    state_norm: Normalizer
    action_norm: Normalizer
    cfg: TrainConfig = field(default_factory=TrainConfig)
    epoch_losses: list = field(default_factory=list, repr=False)

    method = "koap"

    def infer_actions(self, history, plan) -> np.ndarray:
        return infer_actions(self, history, plan)

    def advance(self, p: ParamVector, z: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
        """Latent transition ``K z + u``."""
        return z @ p["K"].T + u

    def decode_latent(self, p: ParamVector, u: torch.Tensor) -> torch.Tensor:
        """Affine action decoder in normalized action units."""
        return u @ p["act.W"].T + p["act.b"]

    def header(self) -> dict:
        return {
            "method": self.method, "state_dim": self.state_dim, "action_dim": self.action_dim,
            "latent_dim": self.latent_dim, "enc": asdict(self.enc), "dec": asdict(self.dec),
            "seq": asdict(self.seq), "state_norm": self.state_norm.to_json(),
            "action_norm": self.action_norm.to_json(), "cfg": asdict(self.cfg),
        }

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self.params, self.header())

    @classmethod
    def load(cls, path: str | Path) -> "KoapModel":
        params, h = load_checkpoint(path)
        return cls(h["state_dim"], h["action_dim"], h["latent_dim"], _mlp_from(h["enc"]), _mlp_from(h["dec"]),
                   SeqEncoderSpec(**h["seq"]), params, Normalizer.from_json(h["state_norm"]),
                   Normalizer.from_json(h["action_norm"]), TrainConfig.from_dict(h["cfg"]))


def _mlp_from(d: dict) -> MlpSpec:
    act = d["activation"]
    return MlpSpec(tuple(d["widths"]), act if isinstance(act, str) else tuple(act))


def init_koap(state_dim: int, action_dim: int, cfg: TrainConfig = TrainConfig(), *,
              state_norm: Normalizer | None = None, action_norm: Normalizer | None = None) -> KoapModel:
    """Fresh model: encoder/decoder start as identity skips plus a small MLP, ``K = I``."""
    m = cfg.m(state_dim)
    rng = np.random.default_rng([cfg.seed, 1])
    enc = MlpSpec((state_dim, cfg.hidden, m), "tanh")
    dec = MlpSpec((m, cfg.hidden, state_dim), "tanh")
    seq = SeqEncoderSpec(state_dim, cfg.seq_hidden, m, cfg.cell)
    b = ParamBuilder()
    # residual branches start at zero so the lift begins as the linear skip
    init_mlp(b, "enc", enc, rng, last_scale=cfg.residual_init)
    b.add("enc.skip", np.eye(m, state_dim))
    init_mlp(b, "dec", dec, rng, last_scale=cfg.residual_init)
    b.add("dec.skip", np.eye(state_dim, m))
    b.add("K", np.eye(m))
    init_seq(b, "f", seq, rng)
    lim = np.sqrt(6.0 / (m + action_dim))
    b.add("act.W", rng.uniform(-lim, lim, (action_dim, m)))
    b.add("act.b", np.zeros(action_dim))
    return KoapModel(state_dim, action_dim, m, enc, dec, seq, b.build(),
                     state_norm or Normalizer.identity(state_dim), action_norm or Normalizer.identity(action_dim), cfg)


# ---------------------------------------------------------- differentiable core
# Everything below takes normalized tensors and an explicit ParamVector.

def lift(model, p: ParamVector, xn: torch.Tensor) -> torch.Tensor:
    return mlp_forward(model.enc, p, xn, "enc") + xn @ p["enc.skip"].T


def unlift(model, p: ParamVector, z: torch.Tensor) -> torch.Tensor:
    return mlp_forward(model.dec, p, z, "dec") + z @ p["dec.skip"].T


def latent_actions(model, p: ParamVector, windows: torch.Tensor) -> torch.Tensor:
    """``(B, n+1+k, d)`` normalized windows -> ``(B, k, m)`` latent actions."""
    k = model.cfg.horizon
    if windows.shape[-2] < k + 1:
        raise WindowError(f"window of {windows.shape[-2]} states is too short for horizon {k}")
    return seq_forward(model.seq, p, windows, "f")[..., -k:, :]


def recon_term(model, p: ParamVector, xn: torch.Tensor) -> torch.Tensor:
    xn = xn.reshape(-1, xn.shape[-1])
    if len(xn) == 0:
        raise WindowError("empty batch")
    return ((unlift(model, p, lift(model, p, xn)) - xn) ** 2).sum(-1).mean()


def kpm_term(model, p: ParamVector, wn: torch.Tensor) -> torch.Tensor:
    if len(wn) == 0:
        raise WindowError("empty batch")
    k = model.cfg.horizon
    z = lift(model, p, wn[:, -(k + 1):])
    u = latent_actions(model, p, wn)
    pred = model.advance(p, z[:, :-1], u)
    return ((pred - z[:, 1:]) ** 2).sum(-1).mean()


def action_term(model, p: ParamVector, wn: torch.Tensor, an: torch.Tensor | None) -> torch.Tensor:
    if an is None:
        raise LabeledDataError("windows carry no action labels")
    if len(wn) == 0:
        raise WindowError("empty batch")
    return ((model.decode_latent(p, latent_actions(model, p, wn)) - an) ** 2).sum(-1).mean()


@dataclass
class MixedBatch:
    """Normalized unlabeled windows plus optional labeled windows and their actions."""

    unlabeled: torch.Tensor
    labeled: torch.Tensor | None = None
    actions: torch.Tensor | None = None

    def all_windows(self) -> torch.Tensor:
        if self.labeled is None or len(self.labeled) == 0:
            return self.unlabeled
        if len(self.unlabeled) == 0:
            return self.labeled
        return torch.cat([self.unlabeled, self.labeled])

    @property
    def has_labels(self) -> bool:
        return self.labeled is not None and len(self.labeled) > 0


def total_term(model, p: ParamVector, batch: MixedBatch, cfg: TrainConfig) -> torch.Tensor:
    w = batch.all_windows()
    loss = recon_term(model, p, w) + cfg.lambda_kpm * kpm_term(model, p, w)
    if batch.has_labels and cfg.lambda_action > 0:
        loss = loss + cfg.lambda_action * action_term(model, p, batch.labeled, batch.actions)
    return loss


# --------------------------------------------------------------- public operations

def _t(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def encode(model: KoapModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.state_dim:
        raise ConfigError(f"state dim {x.shape[-1]} != {model.state_dim}")
    with torch.no_grad():
        return lift(model, model.params, _t(model.state_norm.normalize(x))).numpy()


def decode_state(model: KoapModel, z) -> np.ndarray:
    with torch.no_grad():
        return model.state_norm.denormalize(unlift(model, model.params, _t(z)).numpy())


def koopman_step(model: KoapModel, z, u) -> np.ndarray:
    """``K z + u``."""
    K = model.params.segment_array("K")
    return np.asarray(z, dtype=np.float64) @ K.T + np.asarray(u, dtype=np.float64)


def predict_latent_actions(model: KoapModel, window: StateWindow | np.ndarray) -> np.ndarray:
    """Latent actions ``u_t ... u_{t+k-1}`` for the window's future transitions."""
    arr = window.as_array() if isinstance(window, StateWindow) else np.asarray(window, dtype=np.float64)
    if arr.shape[-2] != model.cfg.n_history + 1 + model.cfg.horizon:
        raise WindowError(f"window length {arr.shape[-2]} != n+1+k = "
                          f"{model.cfg.n_history + 1 + model.cfg.horizon}")
    with torch.no_grad():
        return latent_actions(model, model.params, _t(model.state_norm.normalize(arr))).numpy()


def decode_action(model: KoapModel, u) -> np.ndarray:
    """Real action for latent action ``u`` (affine)."""
    with torch.no_grad():
        an = model.decode_latent(model.params, _t(u)).numpy()
    return model.action_norm.denormalize(an)


def _norm_windows(model, windows) -> torch.Tensor:
    if isinstance(windows, WindowBatch):
        windows = windows.states
    if isinstance(windows, StateWindow):
        windows = windows.as_array()[None]
    if isinstance(windows, (list, tuple)) and windows and isinstance(windows[0], StateWindow):
        windows = np.stack([w.as_array() for w in windows])
    arr = np.asarray(windows, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    return _t(model.state_norm.normalize(arr))


def loss_recon(model: KoapModel, states) -> float:
    states = np.asarray(states, dtype=np.float64)
    if states.size == 0:
        raise WindowError("empty batch")
    with torch.no_grad():
        return float(recon_term(model, model.params, _t(model.state_norm.normalize(states))))


def loss_kpm(model: KoapModel, windows) -> float:
    with torch.no_grad():
        return float(kpm_term(model, model.params, _norm_windows(model, windows)))


def loss_action(model: KoapModel, windows: WindowBatch) -> float:
    if windows.actions is None:
        raise LabeledDataError("windows carry no action labels")
    with torch.no_grad():
        an = _t(model.action_norm.normalize(windows.actions))
        return float(action_term(model, model.params, _norm_windows(model, windows), an))


def mixed_batch(model, unlabeled: WindowBatch | None, labeled: WindowBatch | None) -> MixedBatch:
    u = _norm_windows(model, unlabeled) if unlabeled is not None and len(unlabeled) else None
    lab = act = None
    if labeled is not None and len(labeled):
        if labeled.actions is None:
            raise LabeledDataError("labeled windows carry no actions")
        lab = _norm_windows(model, labeled)
        act = _t(model.action_norm.normalize(labeled.actions))
    if u is None and lab is None:
        raise WindowError("empty batch")
    if u is None:
        u = lab[:0]
    return MixedBatch(u, lab, act)


def total_loss(model: KoapModel, unlabeled: WindowBatch | None, labeled: WindowBatch | None = None,
               cfg: TrainConfig | None = None) -> float:
    """``L_recon + l1 L_kpm + l2 L_a`` with the action term dropped if there are no labels."""
    cfg = cfg or model.cfg
    with torch.no_grad():
        return float(total_term(model, model.params, mixed_batch(model, unlabeled, labeled), cfg))


# ------------------------------------------------------------------------ training

@dataclass
class TrainingData:
    """Windows and normalizers prepared once per training run."""

    unlabeled: torch.Tensor
    labeled: torch.Tensor | None
    actions: torch.Tensor | None
    state_norm: Normalizer
    action_norm: Normalizer


def prepare_data(D_x: Sequence[Trajectory], D_a: Sequence[Trajectory], cfg: TrainConfig,
                 state_norm: Normalizer | None = None, action_norm: Normalizer | None = None) -> TrainingData:
    if not D_x and not D_a:
        raise WindowError("no trajectories")
    n, k = cfg.n_history, cfg.horizon
    # the unlabeled path sees states only, never action storage
    stripped = [t.strip() for t in D_x]
    state_norm = state_norm or Normalizer.fit(all_states(stripped or [t.strip() for t in D_a]))
    L = A = None
    if D_a:
        wb = make_windows(D_a, n, k, labeled=True, pad_end=cfg.pad_end)
        action_norm = action_norm or Normalizer.fit(all_actions(D_a))
        L = _t(state_norm.normalize(wb.states))
        A = _t(action_norm.normalize(wb.actions))
    if stripped:
        Ut = _t(state_norm.normalize(make_windows(stripped, n, k, pad_end=cfg.pad_end).states))
    else:
        Ut = L[:0]
    action_norm = action_norm or Normalizer.identity(D_x[0].actions.shape[1] if D_x and D_x[0].labeled else 1)
    return TrainingData(Ut, L, A, state_norm, action_norm)


def batch_sampler(data: TrainingData, batch_size: int, labeled_batch_size: int):
    def sample(rng: np.random.Generator) -> MixedBatch:
        u = data.unlabeled
        ub = u[rng.integers(0, len(u), batch_size)] if len(u) else u
        if data.labeled is not None and labeled_batch_size > 0:
            idx = rng.integers(0, len(data.labeled), labeled_batch_size)
            return MixedBatch(ub, data.labeled[idx], data.actions[idx])
        return MixedBatch(ub)
    return sample


def train_koap(D_x: Sequence[Trajectory], D_a: Sequence[Trajectory], cfg: TrainConfig = TrainConfig(), *,
               action_dim: int | None = None) -> KoapModel:
    """Jointly fit encoder, decoder, ``K``, latent-action encoder and (with labels) the action decoder."""
    if not D_x:
        raise WindowError("D_x must be non-empty")
    data = prepare_data(D_x, D_a, cfg)
    sd = D_x[0].states.shape[1]
    if action_dim is None:
        action_dim = D_a[0].actions.shape[1] if D_a else 1
    model = init_koap(sd, action_dim, cfg, state_norm=data.state_norm, action_norm=data.action_norm)
    # without labels the action decoder is untouched (not even by weight decay)
    mask = None if D_a else ~model.params.mask(["act."])
    return fit_koap_model(model, data, cfg, cfg.epochs, mask=mask, seed_tag=2)


def fit_koap_model(model: KoapModel, data: TrainingData, cfg: TrainConfig, epochs: int, mask, seed_tag: int,
                   objective=None) -> KoapModel:
    objective = objective or (lambda p, b: total_term(model, p, b, cfg))
    rng = np.random.default_rng([cfg.seed, seed_tag])
    res = fit(objective, model.params, batch_sampler(data, cfg.batch_size, cfg.labeled_batch_size), rng,
              epochs=epochs, steps_per_epoch=cfg.steps_per_epoch, lr=cfg.lr, weight_decay=cfg.weight_decay,
              mask=mask, label=model.method)
    for e, loss in enumerate(res.epoch_losses):
        log.debug("%s epoch %d loss %.6f", model.method, e, loss)
    return replace(model, params=res.params, epoch_losses=res.epoch_losses)


def infer_actions(model: KoapModel, history, plan) -> np.ndarray:
    """``k`` real actions that should realize ``plan`` (current + k future states).

    Accepts single ``(n, d)``/``(k+1, d)`` inputs or batches with a leading axis.
    """
    history = np.asarray(history, dtype=np.float64)
    plan = np.asarray(plan, dtype=np.float64)
    n, k = model.cfg.n_history, model.cfg.horizon
    if history.shape[-2:] != (n, model.state_dim) or plan.shape[-2:] != (k + 1, model.state_dim):
        raise ConfigError(f"expected history ({n}, {model.state_dim}) and plan ({k + 1}, {model.state_dim}), "
                          f"got {history.shape} and {plan.shape}")
    window = np.concatenate([history, plan], axis=-2)
    with torch.no_grad():
        u = latent_actions(model, model.params, _t(model.state_norm.normalize(window)))
        an = model.decode_latent(model.params, u).numpy()
    return model.action_norm.denormalize(an)


def one_step_prediction(model: KoapModel, windows: np.ndarray) -> np.ndarray:
    """Predicted ``x_{t+1}`` for the first future transition of each window (decoded from latent)."""
    with torch.no_grad():
        wn = _norm_windows(model, windows)
        n = model.cfg.n_history
        z = lift(model, model.params, wn[:, n])
        u = latent_actions(model, model.params, wn)[:, 0]
        return model.state_norm.denormalize(unlift(model, model.params, model.advance(model.params, z, u)).numpy())


__all__ = [
    "TrainConfig", "KoapModel", "init_koap", "encode", "decode_state", "koopman_step",
    "predict_latent_actions", "decode_action", "loss_recon", "loss_kpm", "loss_action", "total_loss",
    "train_koap", "infer_actions", "one_step_prediction", "LabeledDataError", "NumericalError",
]
