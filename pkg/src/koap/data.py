"""Trajectories, state windows and normalization."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numerics import ConfigError, WindowError


@dataclass
class Trajectory:
    """States ``(T+1, state_dim)`` and optional actions ``(T, action_dim)``."""

    states: np.ndarray
    actions: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.ndim != 2 or len(self.states) < 1:
            raise ConfigError(f"states must be (T+1, d), got {self.states.shape}")
        if self.actions is not None:
            self.actions = np.asarray(self.actions, dtype=np.float64)
            if self.actions.ndim != 2 or len(self.actions) != len(self.states) - 1:
                raise ConfigError("need exactly one action per transition")

    @property
    def n_steps(self) -> int:
        return len(self.states) - 1

    @property
    def labeled(self) -> bool:
        return self.actions is not None

    def strip(self) -> "Trajectory":
        return Trajectory(self.states, None, dict(self.meta))

    def to_json(self) -> dict:
        return {
            "states": self.states.tolist(),
            "actions": None if self.actions is None else self.actions.tolist(),
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Trajectory":
        return cls(np.asarray(obj["states"]), None if obj.get("actions") is None else np.asarray(obj["actions"]),
                   dict(obj.get("meta") or {}))


def write_jsonl(path: str | Path, trajectories: Iterable[Trajectory]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for tr in trajectories:
            fh.write(json.dumps(tr.to_json(), sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> list[Trajectory]:
    with Path(path).open() as fh:
        return [Trajectory.from_json(json.loads(line)) for line in fh if line.strip()]


@dataclass(frozen=True)
class StateWindow:
    """``(x_{t-n}, ..., x_t, ..., x_{t+k})`` split into history, current and future."""

    history: np.ndarray
    current: np.ndarray
    future: np.ndarray

    def __post_init__(self):
        h, c, f = (np.asarray(a, dtype=np.float64) for a in (self.history, self.current, self.future))
        if c.ndim != 1 or h.ndim != 2 or f.ndim != 2 or h.shape[1] != c.size or f.shape[1] != c.size:
            raise WindowError("history/current/future shapes disagree")
        if len(f) < 1:
            raise WindowError("window needs at least one future state")
        object.__setattr__(self, "history", h)
        object.__setattr__(self, "current", c)
        object.__setattr__(self, "future", f)

    @property
    def n(self) -> int:
        return len(self.history)

    @property
    def k(self) -> int:
        return len(self.future)

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.history, self.current[None], self.future], axis=0)

    @classmethod
    def from_array(cls, arr: np.ndarray, n: int) -> "StateWindow":
        arr = np.asarray(arr, dtype=np.float64)
        if len(arr) < n + 2:
            raise WindowError(f"window of {len(arr)} states cannot hold {n} history + current + future")
        return cls(arr[:n], arr[n], arr[n + 1:])


@dataclass
class WindowBatch:
    """Stacked windows ``(B, n+1+k, d)``; ``actions`` is ``(B, k, a)`` or ``None``."""

    states: np.ndarray
    actions: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.states)

    def take(self, idx) -> "WindowBatch":
        return WindowBatch(self.states[idx], None if self.actions is None else self.actions[idx])

    @staticmethod
    def concat(batches: Sequence["WindowBatch"]) -> "WindowBatch":
        batches = [b for b in batches if len(b)]
        if not batches:
            raise WindowError("no windows")
        acts = None
        if all(b.actions is not None for b in batches):
            acts = np.concatenate([b.actions for b in batches])
        return WindowBatch(np.concatenate([b.states for b in batches]), acts)


def make_windows(trajectories: Sequence[Trajectory], n: int, k: int, *, labeled: bool = False,
                 pad_end: bool = False) -> WindowBatch:
    """Slice every trajectory into windows of ``n`` history, current and ``k`` future states.

    History before ``t=0`` replicates the first state.  Windows running past
    the last state are dropped unless ``pad_end``, which instead replicates
    the final state with zero actions (for tasks that end in an absorbing goal).
    """
    if n < 0 or k < 1:
        raise WindowError("need n >= 0 and k >= 1")
    wins, acts = [], []
    for tr in trajectories:
        if labeled and tr.actions is None:
            raise WindowError("labeled windows requested from an unlabeled trajectory")
        T = tr.n_steps
        s = tr.states
        if pad_end:
            s = np.concatenate([s, np.repeat(s[-1:], k - 1, axis=0)])
        s = np.concatenate([np.repeat(s[:1], n, axis=0), s])
        last = T - 1 if pad_end else T - k
        if last < 0:
            continue
        idx = np.arange(last + 1)[:, None] + np.arange(n + 1 + k)[None, :]
        wins.append(s[idx])
        if labeled:
            a = tr.actions
            if pad_end:
                a = np.concatenate([a, np.zeros((k - 1, a.shape[1]))])
            acts.append(a[np.arange(last + 1)[:, None] + np.arange(k)[None, :]])
    if not wins:
        raise WindowError(f"no trajectory is long enough for windows of k={k}")
    return WindowBatch(np.concatenate(wins), np.concatenate(acts) if labeled else None)


@dataclass(frozen=True)
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls, dim: int) -> "Normalizer":
        return cls(np.zeros(dim), np.ones(dim))

    @classmethod
    def fit(cls, data: np.ndarray, min_std: float = 1e-6) -> "Normalizer":
        data = np.asarray(data, dtype=np.float64).reshape(-1, np.shape(data)[-1])
        return cls(data.mean(0), np.maximum(data.std(0), min_std))

    def normalize(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, x):
        return np.asarray(x, dtype=np.float64) * self.std + self.mean

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "Normalizer":
        return cls(np.asarray(obj["mean"], dtype=np.float64), np.asarray(obj["std"], dtype=np.float64))


def all_states(trajectories: Sequence[Trajectory]) -> np.ndarray:
    return np.concatenate([t.states for t in trajectories])


def all_actions(trajectories: Sequence[Trajectory]) -> np.ndarray:
    return np.concatenate([t.actions for t in trajectories if t.actions is not None])
