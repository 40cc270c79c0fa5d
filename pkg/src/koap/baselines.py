"""Comparison controllers and KOAP variants.

Every controller exposes ``infer_actions(history, plan) -> (k, action_dim)``
(batched over leading axes) so the harness can swap them freely.  The
Diffusion Policy baseline is the action-diffusion :class:`PlannerModel`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import Normalizer, Trajectory, all_actions, all_states, make_windows
from .koopman import (KoapModel, MixedBatch, TrainConfig, TrainingData, fit_koap_model, init_koap, prepare_data,
                      total_term, train_koap)
from .numerics import (DTYPE, ConfigError, MlpSpec, ParamBuilder, ParamVector, SeqEncoderSpec, WindowError, fit,
                       init_mlp, init_seq, load_checkpoint, mlp_forward, save_checkpoint, seq_forward)
from .planner import PlannerConfig, PlannerModel, train_action_diffusion


def _t(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _mlp(d: dict) -> MlpSpec:
    act = d["activation"]
    return MlpSpec(tuple(d["widths"]), act if isinstance(act, str) else tuple(act))


def _check_window(history, plan, n: int, k: int, sd: int) -> np.ndarray:
    history = np.asarray(history, dtype=np.float64)
    plan = np.asarray(plan, dtype=np.float64)
    if history.shape[-2:] != (n, sd) or plan.shape[-2:] != (k + 1, sd):
        raise ConfigError(f"expected history ({n}, {sd}) and plan ({k + 1}, {sd}), got {history.shape}, {plan.shape}")
    return np.concatenate([history, plan], axis=-2)


# ------------------------------------------------------------------------- FSQ

@dataclass(frozen=True)
class FsqSpec:
    """Per-dimension level counts; each dimension is rounded onto a uniform grid in [-1, 1]."""

    levels: tuple[int, ...] = (5, 5, 5)

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(int(v) for v in self.levels))
        if not self.levels or min(self.levels) < 2:
            raise ConfigError("FSQ needs at least one dimension with >= 2 levels")

    @property
    def dim(self) -> int:
        return len(self.levels)

    @property
    def codebook_size(self) -> int:
        return int(np.prod(self.levels))

    def grid(self, i: int) -> np.ndarray:
        L = self.levels[i]
        return -1.0 + 2.0 * np.arange(L) / (L - 1)


def _fsq_round(v, levels):
    half = (levels - 1) / 2.0
    return (v.clip(-1.0, 1.0) + 1.0) * half


def fsq_quantize(spec: FsqSpec, v) -> np.ndarray:
    """Clip each coordinate to [-1, 1] and round it to the nearest of its grid values."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != spec.dim:
        raise ConfigError(f"FSQ expects dim {spec.dim}, got {v.shape[-1]}")
    L = np.asarray(spec.levels, dtype=np.float64)
    idx = np.round(_fsq_round(v, L))
    return -1.0 + 2.0 * idx / (L - 1)


def fsq_ste(spec: FsqSpec, v: torch.Tensor) -> torch.Tensor:
    """Quantize with a straight-through (identity) gradient."""
    L = torch.as_tensor(spec.levels, dtype=DTYPE)
    q = -1.0 + 2.0 * torch.round(_fsq_round(v.detach(), L)) / (L - 1)
    return v + (q - v).detach()


def fsq_code(spec: FsqSpec, q) -> np.ndarray:
    """Integer code index of quantized vectors."""
    L = np.asarray(spec.levels)
    idx = np.round((np.asarray(q) + 1.0) * (L - 1) / 2.0).astype(int)
    return np.ravel_multi_index(tuple(np.moveaxis(idx, -1, 0)), tuple(L))


# ------------------------------------------------------------ supervised (DD)

@dataclass
class WindowRegressor:
    """MLP from a flattened state window to ``k`` actions (Decision Diffuser controller)."""

    spec: MlpSpec
    params: ParamVector
    state_norm: Normalizer
    action_norm: Normalizer
    cfg: TrainConfig
    state_dim: int
    action_dim: int
    method: str = "dd"

    def forward(self, p: ParamVector, wn: torch.Tensor) -> torch.Tensor:
        out = mlp_forward(self.spec, p, wn.reshape(*wn.shape[:-2], -1), "dd")
        return out.reshape(*wn.shape[:-2], self.cfg.horizon, self.action_dim)

    def infer_actions(self, history, plan) -> np.ndarray:
        w = _check_window(history, plan, self.cfg.n_history, self.cfg.horizon, self.state_dim)
        with torch.no_grad():
            an = self.forward(self.params, _t(self.state_norm.normalize(w))).numpy()
        return self.action_norm.denormalize(an)

    def header(self) -> dict:
        return {"method": self.method, "spec": asdict(self.spec), "state_norm": self.state_norm.to_json(),
                "action_norm": self.action_norm.to_json(), "cfg": asdict(self.cfg),
                "state_dim": self.state_dim, "action_dim": self.action_dim}

    def save(self, path) -> None:
        save_checkpoint(path, self.params, self.header())

    @classmethod
    def load(cls, path) -> "WindowRegressor":
        p, h = load_checkpoint(path)
        return cls(_mlp(h["spec"]), p, Normalizer.from_json(h["state_norm"]), Normalizer.from_json(h["action_norm"]),
                   TrainConfig.from_dict(h["cfg"]), h["state_dim"], h["action_dim"], h["method"])


def regression_loss(model: WindowRegressor, p: ParamVector, wn: torch.Tensor, an: torch.Tensor) -> torch.Tensor:
    return ((model.forward(p, wn) - an) ** 2).sum(-1).mean()


def train_dd_controller(D_a: Sequence[Trajectory], cfg: TrainConfig = TrainConfig(), *,
                        method: str = "dd") -> WindowRegressor:
    """Plain supervised inverse dynamics on the labeled trajectories only."""
    if not D_a:
        raise WindowError("D_a must be non-empty")
    n, k = cfg.n_history, cfg.horizon
    wb = make_windows(D_a, n, k, labeled=True, pad_end=cfg.pad_end)
    sn, an = Normalizer.fit(all_states(D_a)), Normalizer.fit(all_actions(D_a))
    sd, ad = wb.states.shape[-1], wb.actions.shape[-1]
    spec = MlpSpec(((n + 1 + k) * sd, cfg.hidden, cfg.hidden, k * ad), "relu")
    b = ParamBuilder()
    init_mlp(b, "dd", spec, np.random.default_rng([cfg.seed, 21]))
    model = WindowRegressor(spec, b.build(), sn, an, cfg, sd, ad, method)
    W, A = _t(sn.normalize(wb.states)), _t(an.normalize(wb.actions))
    bs = cfg.batch_size

    def sample(rng):
        idx = rng.integers(0, len(W), bs)
        return W[idx], A[idx]

    res = fit(lambda p, b: regression_loss(model, p, *b), model.params, sample, np.random.default_rng([cfg.seed, 22]),
              epochs=cfg.epochs, steps_per_epoch=cfg.steps_per_epoch, lr=cfg.lr, weight_decay=cfg.weight_decay,
              label=method)
    return replace(model, params=res.params)


# ------------------------------------------------------------------------ VAE

@dataclass
class VaeControllerModel:
    enc: MlpSpec
    dec: MlpSpec
    head: MlpSpec
    params: ParamVector
    state_norm: Normalizer
    action_norm: Normalizer
    cfg: TrainConfig
    state_dim: int
    action_dim: int
    latent_dim: int
    method: str = "vae"

    def posterior(self, p: ParamVector, wn: torch.Tensor):
        h = mlp_forward(self.enc, p, wn.reshape(*wn.shape[:-2], -1), "venc")
        return h[..., :self.latent_dim], h[..., self.latent_dim:]

    def actions_from_latent(self, p: ParamVector, z: torch.Tensor) -> torch.Tensor:
        out = mlp_forward(self.head, p, z, "vhead")
        return out.reshape(*z.shape[:-1], self.cfg.horizon, self.action_dim)

    def infer_actions(self, history, plan) -> np.ndarray:
        w = _check_window(history, plan, self.cfg.n_history, self.cfg.horizon, self.state_dim)
        with torch.no_grad():
            mu, _ = self.posterior(self.params, _t(self.state_norm.normalize(w)))
            an = self.actions_from_latent(self.params, mu).numpy()
        return self.action_norm.denormalize(an)

    def header(self) -> dict:
        return {"method": self.method, "enc": asdict(self.enc), "dec": asdict(self.dec), "head": asdict(self.head),
                "state_norm": self.state_norm.to_json(), "action_norm": self.action_norm.to_json(),
                "cfg": asdict(self.cfg), "state_dim": self.state_dim, "action_dim": self.action_dim,
                "latent_dim": self.latent_dim}

    def save(self, path) -> None:
        save_checkpoint(path, self.params, self.header())

    @classmethod
    def load(cls, path) -> "VaeControllerModel":
        p, h = load_checkpoint(path)
        return cls(_mlp(h["enc"]), _mlp(h["dec"]), _mlp(h["head"]), p, Normalizer.from_json(h["state_norm"]),
                   Normalizer.from_json(h["action_norm"]), TrainConfig.from_dict(h["cfg"]), h["state_dim"],
                   h["action_dim"], h["latent_dim"])


def kl_standard_normal(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)) summed over latent dims."""
    return 0.5 * (mu ** 2 + logvar.exp() - 1.0 - logvar).sum(-1)


def vae_loss(model: VaeControllerModel, p: ParamVector, wn: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    mu, logvar = model.posterior(p, wn)
    z = mu + (0.5 * logvar).exp() * eps
    recon = mlp_forward(model.dec, p, z, "vdec")
    err = ((recon - wn.reshape(len(wn), -1)) ** 2).sum(-1)
    return (err + model.cfg.vae_beta * kl_standard_normal(mu, logvar)).mean()


def vae_action_loss(model: VaeControllerModel, p: ParamVector, wn, an, eps) -> torch.Tensor:
    mu, logvar = model.posterior(p, wn)
    z = mu + (0.5 * logvar).exp() * eps
    return ((model.actions_from_latent(p, z) - an) ** 2).sum(-1).mean()


def init_vae(sd: int, ad: int, cfg: TrainConfig, sn: Normalizer, an: Normalizer) -> VaeControllerModel:
    n, k, m = cfg.n_history, cfg.horizon, cfg.m(sd)
    W = (n + 1 + k) * sd
    enc = MlpSpec((W, cfg.hidden, 2 * m), "tanh")
    dec = MlpSpec((m, cfg.hidden, W), "tanh")
    head = MlpSpec((m, cfg.hidden, k * ad), "tanh")
    rng = np.random.default_rng([cfg.seed, 31])
    b = ParamBuilder()
    init_mlp(b, "venc", enc, rng)
    init_mlp(b, "vdec", dec, rng)
    init_mlp(b, "vhead", head, rng)
    return VaeControllerModel(enc, dec, head, b.build(), sn, an, cfg, sd, ad, m)


def train_vae_controller(D_x: Sequence[Trajectory], D_a: Sequence[Trajectory],
                         cfg: TrainConfig = TrainConfig()) -> VaeControllerModel:
    """Stage 1: VAE over action-free windows.  Stage 2: action head on sampled latents, VAE frozen."""
    if not D_x:
        raise WindowError("D_x must be non-empty")
    n, k = cfg.n_history, cfg.horizon
    stripped = [t.strip() for t in D_x]
    sn = Normalizer.fit(all_states(stripped))
    an = Normalizer.fit(all_actions(D_a)) if D_a else Normalizer.identity(1)
    sd = stripped[0].states.shape[1]
    ad = D_a[0].actions.shape[1] if D_a else 1
    model = init_vae(sd, ad, cfg, sn, an)
    m = model.latent_dim
    U = _t(sn.normalize(make_windows(stripped, n, k, pad_end=cfg.pad_end).states))

    def sample_u(rng):
        return U[rng.integers(0, len(U), cfg.batch_size)], _t(rng.standard_normal((cfg.batch_size, m)))

    vae_mask = model.params.mask(("venc", "vdec"))
    res = fit(lambda p, b: vae_loss(model, p, *b), model.params, sample_u, np.random.default_rng([cfg.seed, 32]),
              epochs=cfg.epochs, steps_per_epoch=cfg.steps_per_epoch, lr=cfg.lr, weight_decay=cfg.weight_decay,
              mask=vae_mask, label="vae")
    model = replace(model, params=res.params)
    if not D_a:
        return model
    wb = make_windows(D_a, n, k, labeled=True, pad_end=cfg.pad_end)
    L, A = _t(sn.normalize(wb.states)), _t(an.normalize(wb.actions))

    def sample_a(rng):
        idx = rng.integers(0, len(L), cfg.labeled_batch_size)
        return L[idx], A[idx], _t(rng.standard_normal((cfg.labeled_batch_size, m)))

    res = fit(lambda p, b: vae_action_loss(model, p, *b), model.params, sample_a,
              np.random.default_rng([cfg.seed, 33]), epochs=cfg.epochs, steps_per_epoch=cfg.steps_per_epoch,
              lr=cfg.lr, weight_decay=cfg.weight_decay, mask=model.params.mask(("vhead",)), label="vae-head")
    return replace(model, params=res.params)


# ----------------------------------------------------------------------- LAPO

@dataclass
class LapoModel:
    enc: MlpSpec
    inv: SeqEncoderSpec
    fwd: MlpSpec
    head: MlpSpec
    fsq: FsqSpec
    params: ParamVector
    state_norm: Normalizer
    action_norm: Normalizer
    cfg: TrainConfig
    state_dim: int
    action_dim: int
    method: str = "lapo"

    def features(self, p: ParamVector, xn: torch.Tensor) -> torch.Tensor:
        return mlp_forward(self.enc, p, xn, "lenc")

    def latent_actions(self, p: ParamVector, wn: torch.Tensor, feats: torch.Tensor | None = None) -> torch.Tensor:
        """Quantized latent actions for the ``k`` future transitions."""
        feats = self.features(p, wn) if feats is None else feats
        pre = torch.tanh(seq_forward(self.inv, p, feats, "linv"))[..., -self.cfg.horizon:, :]
        return fsq_ste(self.fsq, pre)

    def infer_actions(self, history, plan) -> np.ndarray:
        w = _check_window(history, plan, self.cfg.n_history, self.cfg.horizon, self.state_dim)
        with torch.no_grad():
            q = self.latent_actions(self.params, _t(self.state_norm.normalize(w)))
            an = mlp_forward(self.head, self.params, q, "lhead").numpy()
        return self.action_norm.denormalize(an)

    def header(self) -> dict:
        return {"method": self.method, "enc": asdict(self.enc), "inv": asdict(self.inv), "fwd": asdict(self.fwd),
                "head": asdict(self.head), "levels": list(self.fsq.levels), "state_norm": self.state_norm.to_json(),
                "action_norm": self.action_norm.to_json(), "cfg": asdict(self.cfg), "state_dim": self.state_dim,
                "action_dim": self.action_dim}

    def save(self, path) -> None:
        save_checkpoint(path, self.params, self.header())

    @classmethod
    def load(cls, path) -> "LapoModel":
        p, h = load_checkpoint(path)
        return cls(_mlp(h["enc"]), SeqEncoderSpec(**h["inv"]), _mlp(h["fwd"]), _mlp(h["head"]), FsqSpec(h["levels"]),
                   p, Normalizer.from_json(h["state_norm"]), Normalizer.from_json(h["action_norm"]),
                   TrainConfig.from_dict(h["cfg"]), h["state_dim"], h["action_dim"])


def lapo_dynamics_loss(model: LapoModel, p: ParamVector, wn: torch.Tensor) -> torch.Tensor:
    """Next-state prediction through the quantized latent-action bottleneck."""
    n, k = model.cfg.n_history, model.cfg.horizon
    feats = model.features(p, wn)
    q = model.latent_actions(p, wn, feats)
    pred = mlp_forward(model.fwd, p, torch.cat([feats[:, n:n + k], q], dim=-1), "lfwd")
    return ((pred - wn[:, n + 1:]) ** 2).sum(-1).mean()


def lapo_action_loss(model: LapoModel, p: ParamVector, wn: torch.Tensor, an: torch.Tensor) -> torch.Tensor:
    q = model.latent_actions(p, wn)
    return ((mlp_forward(model.head, p, q, "lhead") - an) ** 2).sum(-1).mean()


def init_lapo(sd: int, ad: int, cfg: TrainConfig, sn: Normalizer, an: Normalizer) -> LapoModel:
    m = cfg.m(sd)
    fsq = FsqSpec(cfg.fsq_levels)
    enc = MlpSpec((sd, cfg.hidden, m), "tanh")
    inv = SeqEncoderSpec(m, cfg.seq_hidden, fsq.dim, cfg.cell)
    fwd = MlpSpec((m + fsq.dim, cfg.hidden, sd), "tanh")
    head = MlpSpec((fsq.dim, cfg.hidden, ad), "tanh")
    rng = np.random.default_rng([cfg.seed, 41])
    b = ParamBuilder()
    init_mlp(b, "lenc", enc, rng)
    init_seq(b, "linv", inv, rng)
    init_mlp(b, "lfwd", fwd, rng)
    init_mlp(b, "lhead", head, rng)
    return LapoModel(enc, inv, fwd, head, fsq, b.build(), sn, an, cfg, sd, ad)


def train_lapo(D_x: Sequence[Trajectory], D_a: Sequence[Trajectory], cfg: TrainConfig = TrainConfig()) -> LapoModel:
    """Stage 1: forward/inverse dynamics on D_x through FSQ.  Stage 2: action head on D_a."""
    if not D_x:
        raise WindowError("D_x must be non-empty")
    n, k = cfg.n_history, cfg.horizon
    stripped = [t.strip() for t in D_x]
    sn = Normalizer.fit(all_states(stripped))
    an = Normalizer.fit(all_actions(D_a)) if D_a else Normalizer.identity(1)
    sd = stripped[0].states.shape[1]
    ad = D_a[0].actions.shape[1] if D_a else 1
    model = init_lapo(sd, ad, cfg, sn, an)
    U = _t(sn.normalize(make_windows(stripped, n, k, pad_end=cfg.pad_end).states))
    dyn_mask = model.params.mask(("lenc", "linv", "lfwd"))
    res = fit(lambda p, b: lapo_dynamics_loss(model, p, b), model.params,
              lambda rng: U[rng.integers(0, len(U), cfg.batch_size)], np.random.default_rng([cfg.seed, 42]),
              epochs=cfg.epochs, steps_per_epoch=cfg.steps_per_epoch, lr=cfg.lr, weight_decay=cfg.weight_decay,
              mask=dyn_mask, label="lapo")
    model = replace(model, params=res.params)
    if not D_a:
        return model
    wb = make_windows(D_a, n, k, labeled=True, pad_end=cfg.pad_end)
    L, A = _t(sn.normalize(wb.states)), _t(an.normalize(wb.actions))

    def sample_a(rng):
        idx = rng.integers(0, len(L), cfg.labeled_batch_size)
        return L[idx], A[idx]

    res = fit(lambda p, b: lapo_action_loss(model, p, *b), model.params, sample_a,
              np.random.default_rng([cfg.seed, 43]), epochs=cfg.epochs, steps_per_epoch=cfg.steps_per_epoch,
              lr=cfg.lr, weight_decay=cfg.weight_decay, mask=model.params.mask(("lhead",)), label="lapo-head")
    return replace(model, params=res.params)


def lapo_codes(model: LapoModel, windows: np.ndarray) -> np.ndarray:
    with torch.no_grad():
        q = model.latent_actions(model.params, _t(model.state_norm.normalize(windows))).numpy()
    return q


# ------------------------------------------------------------ KOAP variants

@dataclass
class NonlinearKoapModel(KoapModel):
    """KOAP with an MLP latent transition ``T(z, u)`` and an MLP action decoder."""

    trans: MlpSpec | None = None
    act_dec: MlpSpec | None = None

    method = "nonlinear"

    def advance(self, p: ParamVector, z: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
        return mlp_forward(self.trans, p, torch.cat([z, u], dim=-1), "T")

    def decode_latent(self, p: ParamVector, u: torch.Tensor) -> torch.Tensor:
        return mlp_forward(self.act_dec, p, u, "nact")

    def header(self) -> dict:
        h = super().header()
        h.update(trans=asdict(self.trans), act_dec=asdict(self.act_dec))
        return h

    @classmethod
    def load(cls, path) -> "NonlinearKoapModel":
        base = KoapModel.load(path)
        _, h = load_checkpoint(path)
        fields = {f: getattr(base, f) for f in base.__dataclass_fields__}
        return cls(**fields, trans=_mlp(h["trans"]), act_dec=_mlp(h["act_dec"]))


def init_nonlinear(sd: int, ad: int, cfg: TrainConfig, state_norm: Normalizer,
                   action_norm: Normalizer) -> NonlinearKoapModel:
    base = init_koap(sd, ad, cfg, state_norm=state_norm, action_norm=action_norm)
    m = base.latent_dim
    trans = MlpSpec((2 * m, cfg.hidden, m), "tanh")
    act_dec = MlpSpec((m, cfg.hidden, ad), "tanh")
    rng = np.random.default_rng([cfg.seed, 51])
    b = ParamBuilder()
    for name in base.params.layout:
        if not name.startswith(("K", "act.")):
            b.add(name, base.params.segment_array(name))
    init_mlp(b, "T", trans, rng)
    init_mlp(b, "nact", act_dec, rng)
    fields = {f: getattr(base, f) for f in base.__dataclass_fields__}
    fields["params"] = b.build()
    return NonlinearKoapModel(**fields, trans=trans, act_dec=act_dec)


def train_nonlinear_variant(D_x: Sequence[Trajectory], D_a: Sequence[Trajectory],
                            cfg: TrainConfig = TrainConfig()) -> NonlinearKoapModel:
    if not D_x:
        raise WindowError("D_x must be non-empty")
    data = prepare_data(D_x, D_a, cfg)
    sd = D_x[0].states.shape[1]
    ad = D_a[0].actions.shape[1] if D_a else 1
    model = init_nonlinear(sd, ad, cfg, data.state_norm, data.action_norm)
    return fit_koap_model(model, data, cfg, cfg.epochs, mask=None, seed_tag=2)


def pretrain_finetune(D_x: Sequence[Trajectory], D_a: Sequence[Trajectory], cfg: TrainConfig = TrainConfig(),
                      *, stage1: KoapModel | None = None) -> KoapModel:
    """Stage 1: KOAP without labels.  Stage 2: decoder + finetune on D_a alone."""
    ad = D_a[0].actions.shape[1] if D_a else 1
    model = stage1 if stage1 is not None else train_koap(D_x, [], cfg, action_dim=ad)
    if not D_a:
        return model
    data = prepare_data([], D_a, cfg, state_norm=model.state_norm)
    model = replace(model, action_norm=data.action_norm)
    # D_a only: the labeled windows double as the unlabeled stream
    data = TrainingData(data.labeled, data.labeled, data.actions, data.state_norm, data.action_norm)
    out = fit_koap_model(model, data, cfg, cfg.finetune_epochs, mask=None, seed_tag=3)
    out = replace(out, epoch_losses=model.epoch_losses + out.epoch_losses)
    return PretrainedKoapModel(**{f: getattr(out, f) for f in out.__dataclass_fields__})


@dataclass
class PretrainedKoapModel(KoapModel):
    method = "pretrain"


def relabel_and_train(D_x: Sequence[Trajectory], D_a: Sequence[Trajectory],
                      cfg: TrainConfig = TrainConfig()) -> tuple[list[Trajectory], WindowRegressor]:
    """Label D_x with an inverse model fit on D_a alone, then fit the supervised controller on the union."""
    if not D_a:
        raise WindowError("D_a must be non-empty")
    predictor = train_dd_controller(D_a, cfg, method="relabel")
    n, k = cfg.n_history, cfg.horizon
    relabeled = []
    for tr in D_x:
        wb = make_windows([tr.strip()], n, k, pad_end=True)
        acts = predictor.infer_actions(wb.states[:, :n], wb.states[:, n:])[:, 0]
        relabeled.append(Trajectory(tr.states, acts, {**tr.meta, "relabeled": True}))
    controller = train_dd_controller(list(D_a) + relabeled, replace(cfg, seed=cfg.seed + 1000), method="relabel")
    return relabeled, controller


# ---------------------------------------------------------------- registry

PLAN_THEN_CONTROL = ("koap", "dd", "vae", "lapo", "nonlinear", "pretrain", "relabel")
METHODS = PLAN_THEN_CONTROL + ("dp",)


def train_controller(method: str, D_x: Sequence[Trajectory], D_a: Sequence[Trajectory],
                     cfg: TrainConfig = TrainConfig()):
    """Train any plan-then-control controller by registry id."""
    if method == "koap":
        ad = D_a[0].actions.shape[1] if D_a else 1
        return train_koap(D_x, D_a, cfg, action_dim=ad)
    if method == "dd":
        return train_dd_controller(D_a, cfg)
    if method == "vae":
        return train_vae_controller(D_x, D_a, cfg)
    if method == "lapo":
        return train_lapo(D_x, D_a, cfg)
    if method == "nonlinear":
        return train_nonlinear_variant(D_x, D_a, cfg)
    if method == "pretrain":
        return pretrain_finetune(D_x, D_a, cfg)
    if method == "relabel":
        return relabel_and_train(D_x, D_a, cfg)[1]
    raise ConfigError(f"unknown controller method {method!r}")


def train_diffusion_policy(D_a: Sequence[Trajectory], cfg: PlannerConfig = PlannerConfig()) -> PlannerModel:
    return train_action_diffusion(D_a, cfg)


_LOADERS = {"koap": KoapModel, "dd": WindowRegressor, "relabel": WindowRegressor, "vae": VaeControllerModel,
            "lapo": LapoModel, "nonlinear": NonlinearKoapModel, "pretrain": PretrainedKoapModel}


def load_controller(path: str | Path):
    _, h = load_checkpoint(path)
    method = h.get("method")
    if method == "dp" or "kind" in h:
        return PlannerModel.load(path)
    if method not in _LOADERS:
        raise ConfigError(f"checkpoint {path} has unknown method {method!r}")
    return _LOADERS[method].load(path)
