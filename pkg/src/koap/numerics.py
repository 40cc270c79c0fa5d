"""Differentiable-computation substrate shared by every model in the package.

Parameters live in one flat float64 vector (:class:`ParamVector`) whose named
segments are addressed by the model components.  Forward passes are written
against torch tensors so reverse-mode gradients come from ``torch.autograd``;
:func:`grad_check` is an independent central-difference oracle for them.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

DTYPE = torch.float64


class ConfigError(ValueError):
    """Shapes or settings that cannot work together."""


class WindowError(ValueError):
    """A state window is too short or malformed."""


class NumericalError(FloatingPointError):
    """A loss, gradient or parameter became non-finite."""


@dataclass(frozen=True)
class Segment:
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(math.prod(self.shape))


class ParamVector:
    """Flat parameter array with named, disjoint, covering segments."""

    __slots__ = ("values", "layout")

    def __init__(self, values: torch.Tensor | np.ndarray, layout: dict[str, Segment]):
        if not isinstance(values, torch.Tensor):
            values = torch.as_tensor(np.asarray(values, dtype=np.float64))
        if values.ndim != 1:
            raise ConfigError("parameter values must be a flat vector")
        spans = sorted((s.offset, s.offset + s.size) for s in layout.values())
        pos = 0
        for lo, hi in spans:
            if lo != pos:
                raise ConfigError("segments must be disjoint and cover the vector")
            pos = hi
        if pos != values.numel():
            raise ConfigError(f"layout covers {pos} entries, vector has {values.numel()}")
        self.values = values
        self.layout = dict(layout)

    def __len__(self) -> int:
        return self.values.numel()

    def __contains__(self, name: str) -> bool:
        return name in self.layout

    def __getitem__(self, name: str) -> torch.Tensor:
        seg = self.layout[name]
        return self.values[seg.offset:seg.offset + seg.size].view(seg.shape)

    def with_values(self, values: torch.Tensor) -> "ParamVector":
        return ParamVector(values, self.layout)

    def clone(self) -> "ParamVector":
        return ParamVector(self.values.detach().clone(), self.layout)

    def numpy(self) -> np.ndarray:
        return self.values.detach().cpu().numpy().copy()

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.layout if n.startswith(prefix)]

    def mask(self, prefixes: Iterable[str]) -> torch.Tensor:
        """Boolean mask selecting every segment whose name starts with one of ``prefixes``."""
        prefixes = tuple(prefixes)
        m = torch.zeros(len(self), dtype=torch.bool)
        for name, seg in self.layout.items():
            if name.startswith(prefixes):
                m[seg.offset:seg.offset + seg.size] = True
        return m

    def segment_array(self, name: str) -> np.ndarray:
        return self[name].detach().cpu().numpy().copy()

    def set(self, name: str, array) -> "ParamVector":
        """Return a copy with segment ``name`` replaced."""
        out = self.clone()
        seg = out.layout[name]
        arr = torch.as_tensor(np.asarray(array, dtype=np.float64)).reshape(-1)
        if arr.numel() != seg.size:
            raise ConfigError(f"segment {name} expects {seg.size} values, got {arr.numel()}")
        out.values[seg.offset:seg.offset + seg.size] = arr
        return out

    @staticmethod
    def concat(*parts: "ParamVector") -> "ParamVector":
        layout, chunks, off = {}, [], 0
        for p in parts:
            for name, seg in p.layout.items():
                if name in layout:
                    raise ConfigError(f"duplicate segment {name}")
                layout[name] = Segment(seg.offset + off, seg.shape)
            chunks.append(p.values.detach())
            off += len(p)
        return ParamVector(torch.cat(chunks), layout)


class ParamBuilder:
    """Accumulates named initial arrays, then packs them into a :class:`ParamVector`."""

    def __init__(self) -> None:
        self._items: list[tuple[str, np.ndarray]] = []

    def add(self, name: str, array) -> None:
        if any(n == name for n, _ in self._items):
            raise ConfigError(f"duplicate segment {name}")
        self._items.append((name, np.asarray(array, dtype=np.float64)))

    def build(self) -> ParamVector:
        layout, off = {}, 0
        for name, arr in self._items:
            layout[name] = Segment(off, tuple(arr.shape))
            off += arr.size
        flat = np.concatenate([a.reshape(-1) for _, a in self._items]) if self._items else np.zeros(0)
        return ParamVector(torch.as_tensor(flat), layout)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_out, fan_in))


# --------------------------------------------------------------------------- MLP

_ACTIVATIONS = {"tanh": torch.tanh, "relu": torch.relu}


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths including input and output; affine output layer."""

    widths: tuple[int, ...]
    activation: str | tuple[str, ...] = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise ConfigError(f"invalid MLP widths {self.widths}")
        acts = self.activations
        if len(acts) != len(self.widths) - 2 or any(a not in _ACTIVATIONS for a in acts):
            raise ConfigError(f"invalid activations {self.activation!r}")

    @property
    def activations(self) -> tuple[str, ...]:
        if isinstance(self.activation, str):
            return (self.activation,) * (len(self.widths) - 2)
        return tuple(self.activation)

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1


def init_mlp(builder: ParamBuilder, prefix: str, spec: MlpSpec, rng: np.random.Generator,
             last_scale: float = 1.0) -> None:
    """Glorot weights and zero biases; ``last_scale`` shrinks the output layer (0 gives a zero map)."""
    for i in range(spec.n_layers):
        fi, fo = spec.widths[i], spec.widths[i + 1]
        W = glorot(rng, fi, fo)
        builder.add(f"{prefix}.W{i}", W * last_scale if i == spec.n_layers - 1 else W)
        builder.add(f"{prefix}.b{i}", np.zeros(fo))


def mlp_forward(spec: MlpSpec, params: ParamVector, x, prefix: str = "") -> torch.Tensor:
    """Apply the MLP to ``x`` of shape ``(..., widths[0])``."""
    x = torch.as_tensor(x, dtype=DTYPE)
    if x.shape[-1] != spec.widths[0]:
        raise ConfigError(f"MLP expects input width {spec.widths[0]}, got {x.shape[-1]}")
    acts = spec.activations
    for i in range(spec.n_layers):
        x = x @ params[f"{prefix}.W{i}"].T + params[f"{prefix}.b{i}"]
        if i < spec.n_layers - 1:
            x = _ACTIVATIONS[acts[i]](x)
    return x


# --------------------------------------------------------------- recurrent encoder

@dataclass(frozen=True)
class SeqEncoderSpec:
    """Gated recurrent encoder emitting one vector per consecutive state pair.

    Each step consumes the pair ``(s_i, s_{i+1})`` so the output for a
    transition always sees both of its endpoints.
    """

    input_dim: int
    hidden_dim: int
    output_dim: int
    cell: str = "gru"

    def __post_init__(self):
        if min(self.input_dim, self.hidden_dim, self.output_dim) < 1:
            raise ConfigError("sequence encoder dims must be positive")
        if self.cell not in ("gru", "lstm"):
            raise ConfigError(f"unknown cell {self.cell!r}")

    @property
    def n_gates(self) -> int:
        return 3 if self.cell == "gru" else 4


def init_seq(builder: ParamBuilder, prefix: str, spec: SeqEncoderSpec, rng: np.random.Generator) -> None:
    H, G = spec.hidden_dim, spec.n_gates
    builder.add(f"{prefix}.Wi", glorot(rng, 2 * spec.input_dim, G * H))
    builder.add(f"{prefix}.Wh", glorot(rng, H, G * H))
    builder.add(f"{prefix}.bi", np.zeros(G * H))
    builder.add(f"{prefix}.Wo", glorot(rng, H, spec.output_dim))
    builder.add(f"{prefix}.bo", np.zeros(spec.output_dim))


def seq_forward(spec: SeqEncoderSpec, params: ParamVector, states, prefix: str = "") -> torch.Tensor:
    """Run the recurrent encoder over ``states`` of shape ``(..., L, input_dim)``.

    Returns ``(..., L - 1, output_dim)``.
    """
    s = torch.as_tensor(states, dtype=DTYPE)
    if s.ndim < 2 or s.shape[-2] < 2:
        raise WindowError("sequence encoder needs at least two states")
    if s.shape[-1] != spec.input_dim:
        raise ConfigError(f"sequence encoder expects state dim {spec.input_dim}, got {s.shape[-1]}")
    lead = s.shape[:-2]
    s = s.reshape(-1, s.shape[-2], s.shape[-1])
    pairs = torch.cat([s[:, :-1], s[:, 1:]], dim=-1)
    h0 = torch.zeros(1, s.shape[0], spec.hidden_dim, dtype=DTYPE)
    # hidden-side bias is folded into bi
    weights = [params[f"{prefix}.Wi"], params[f"{prefix}.Wh"], params[f"{prefix}.bi"],
               torch.zeros(spec.n_gates * spec.hidden_dim, dtype=DTYPE)]
    if spec.cell == "gru":
        hs, _ = torch.gru(pairs, h0, weights, True, 1, 0.0, False, False, True)
    else:
        hs, _, _ = torch.lstm(pairs, (h0, h0.clone()), weights, True, 1, 0.0, False, False, True)
    y = hs @ params[f"{prefix}.Wo"].T + params[f"{prefix}.bo"]
    return y.reshape(*lead, y.shape[-2], y.shape[-1])


# ------------------------------------------------------------------- gradients

LossFn = Callable[[ParamVector], torch.Tensor]


def _offending_segment(params: ParamVector, grads: torch.Tensor | None = None) -> str:
    for name in params.layout:
        if not torch.isfinite(params[name]).all():
            return name
    if grads is not None:
        for name, seg in params.layout.items():
            if not torch.isfinite(grads[seg.offset:seg.offset + seg.size]).all():
                return name
    return "<loss>"


def value_and_grad(loss: LossFn, params: ParamVector) -> tuple[float, torch.Tensor]:
    leaf = params.values.detach().clone().requires_grad_(True)
    value = loss(params.with_values(leaf))
    if not torch.isfinite(value):
        raise NumericalError(f"non-finite loss (segment {_offending_segment(params)})")
    if value.requires_grad:
        (g,) = torch.autograd.grad(value, leaf, allow_unused=True)
        if g is None:
            g = torch.zeros_like(leaf)
    else:
        g = torch.zeros_like(leaf)
    if not torch.isfinite(g).all():
        raise NumericalError(f"non-finite gradient (segment {_offending_segment(params, g)})")
    return float(value.detach()), g.detach()


def grad(loss: LossFn, params: ParamVector) -> torch.Tensor:
    """Reverse-mode gradient of a scalar loss with respect to the whole vector."""
    return value_and_grad(loss, params)[1]


def grad_check(loss: LossFn, params: ParamVector, eps: float = 1e-5) -> float:
    """Max over coordinates of ``|analytic - central difference| / max(1, |analytic|)``."""
    if eps <= 0:
        raise ConfigError("eps must be positive")
    analytic = grad(loss, params)
    base = params.values.detach().clone()
    worst = 0.0
    with torch.no_grad():
        for i in range(base.numel()):
            plus, minus = base.clone(), base.clone()
            plus[i] += eps
            minus[i] -= eps
            fd = (float(loss(params.with_values(plus))) - float(loss(params.with_values(minus)))) / (2 * eps)
            a = float(analytic[i])
            worst = max(worst, abs(a - fd) / max(1.0, abs(a)))
    return worst


# ------------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    """Adam moments plus decoupled weight decay (AdamW)."""

    step: int
    m: torch.Tensor
    v: torch.Tensor
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4


def init_optimizer(params: ParamVector, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8, weight_decay: float = 1e-4) -> OptimizerState:
    z = torch.zeros(len(params), dtype=DTYPE)
    return OptimizerState(0, z, z.clone(), lr, beta1, beta2, eps, weight_decay)


def opt_step(state: OptimizerState, params: ParamVector, grads: torch.Tensor,
             mask: torch.Tensor | None = None) -> tuple[OptimizerState, ParamVector]:
    """One AdamW update.  Entries outside ``mask`` (if given) are left untouched."""
    if grads.shape != state.m.shape or len(params) != state.m.numel():
        raise ConfigError("gradient, moments and parameters must have equal length")
    if not torch.isfinite(grads).all():
        raise NumericalError(f"non-finite gradient (segment {_offending_segment(params, grads)})")
    t = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grads
    v = state.beta2 * state.v + (1 - state.beta2) * grads * grads
    mhat = m / (1 - state.beta1 ** t)
    vhat = v / (1 - state.beta2 ** t)
    p = params.values.detach()
    new = p - state.lr * mhat / (vhat.sqrt() + state.eps) - state.lr * state.weight_decay * p
    if mask is not None:
        new = torch.where(mask, new, p)
        m = torch.where(mask, m, state.m)
        v = torch.where(mask, v, state.v)
    new_state = OptimizerState(t, m, v, state.lr, state.beta1, state.beta2, state.eps, state.weight_decay)
    return new_state, params.with_values(new)


@dataclass
class FitResult:
    params: ParamVector
    epoch_losses: list[float] = field(default_factory=list)


def fit(objective: Callable[[ParamVector, object], torch.Tensor], params: ParamVector,
        sample_batch: Callable[[np.random.Generator], object], rng: np.random.Generator, *,
        epochs: int, steps_per_epoch: int, lr: float = 1e-3, weight_decay: float = 1e-4,
        mask: torch.Tensor | None = None, label: str = "model") -> FitResult:
    """Minibatch AdamW loop; raises :class:`NumericalError` on divergence."""
    opt = init_optimizer(params, lr=lr, weight_decay=weight_decay)
    losses = []
    for epoch in range(epochs):
        total = 0.0
        for step in range(steps_per_epoch):
            batch = sample_batch(rng)
            try:
                value, g = value_and_grad(lambda p: objective(p, batch), params)
                opt, params = opt_step(opt, params, g, mask)
            except NumericalError as exc:
                raise NumericalError(f"{label}: diverged at epoch {epoch} step {step}: {exc}") from exc
            total += value
        losses.append(total / max(steps_per_epoch, 1))
    return FitResult(params, losses)


# ------------------------------------------------------------------ checkpoints

def _jsonable(obj):
    if hasattr(obj, "__dataclass_fields__"):
        return _jsonable(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def checkpoint_files(path: str | Path) -> tuple[Path, Path]:
    """``(<stem>.bin, <stem>.json)``; dots inside the stem are kept, a trailing .bin/.json is dropped."""
    path = Path(path)
    stem = path.name[:-len(path.suffix)] if path.suffix in (".bin", ".json") else path.name
    return path.parent / f"{stem}.bin", path.parent / f"{stem}.json"


def save_checkpoint(path: str | Path, params: ParamVector, header: dict) -> None:
    """Write ``<path>.bin`` (little-endian float64) and ``<path>.json`` (segments + header)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "segments": [{"name": n, "offset": s.offset, "shape": list(s.shape)} for n, s in params.layout.items()],
        "length": len(params),
        "header": _jsonable(header),
    }
    bin_path, json_path = checkpoint_files(path)
    params.numpy().astype("<f8").tofile(bin_path)
    json_path.write_text(json.dumps(meta, indent=1, sort_keys=True))


def load_checkpoint(path: str | Path) -> tuple[ParamVector, dict]:
    bin_path, json_path = checkpoint_files(path)
    if not json_path.exists() or not bin_path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    meta = json.loads(json_path.read_text())
    values = np.fromfile(bin_path, dtype="<f8")
    if values.size != meta["length"]:
        raise ConfigError(f"checkpoint {path} is truncated")
    layout = {s["name"]: Segment(s["offset"], tuple(s["shape"])) for s in meta["segments"]}
    return ParamVector(torch.as_tensor(values.astype(np.float64)), layout), meta["header"]


def sinusoidal_embedding(steps: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=DTYPE) / max(half - 1, 1))
    ang = steps.to(DTYPE)[..., None] * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


__all__: Sequence[str] = [
    "ConfigError", "WindowError", "NumericalError", "Segment", "ParamVector", "ParamBuilder",
    "MlpSpec", "init_mlp", "mlp_forward", "SeqEncoderSpec", "init_seq", "seq_forward",
    "grad", "value_and_grad", "grad_check", "OptimizerState", "init_optimizer", "opt_step",
    "fit", "FitResult", "checkpoint_files", "save_checkpoint", "load_checkpoint", "sinusoidal_embedding",
]
