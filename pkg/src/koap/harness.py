"""Dataset levels, receding-horizon evaluation and the experiment matrix."""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .baselines import METHODS, PLAN_THEN_CONTROL, load_controller, train_controller, train_diffusion_policy
from .data import Trajectory, read_jsonl, write_jsonl
from .envs import RUNNING, SUCCESS, AvoidConfig, EnvSpec, expert_rollout
from .koopman import TrainConfig
from .numerics import ConfigError, checkpoint_files
from .planner import PlannerConfig, PlannerModel, sample_plans, sample_rows, draw_noise, train_planner

log = logging.getLogger(__name__)

DEFAULT_LEVELS = (0.02, 0.05, 0.10, 0.25, 0.50)


class OrchestrationError(RuntimeError):
    """A required artifact is missing or a matrix cell cannot run."""


# ---------------------------------------------------------------------- datasets

@dataclass
class DatasetBundle:
    D_x: list[Trajectory]
    D_a: list[Trajectory]
    level: float
    seed: int
    provenance: dict = field(default_factory=dict)
    obs_fraction: float = 1.0
    labeled_idx: tuple = ()    # positions of D_a inside D_x


def build_levels(pool: Sequence[Trajectory], fractions: Sequence[float] = DEFAULT_LEVELS, seed: int = 0,
                 provenance: dict | None = None) -> list[DatasetBundle]:
    """Nested labeled subsets of ``ceil(f * N)`` trajectories; D_x is every pool trajectory, stripped."""
    fractions = list(fractions)
    if any(not 0 < f <= 1 for f in fractions) or any(b <= a for a, b in zip(fractions, fractions[1:])):
        raise ConfigError("fractions must be increasing in (0, 1]")
    N = len(pool)
    order = np.random.default_rng([seed, 5]).permutation(N)
    D_x = [t.strip() for t in pool]
    out = []
    for f in fractions:
        m = math.ceil(round(f * N, 9))
        if m < 1:
            raise ConfigError(f"fraction {f} yields no labeled trajectories")
        idx = tuple(int(i) for i in sorted(order[:m]))
        out.append(DatasetBundle(D_x, [pool[i] for i in idx], f, seed, dict(provenance or {}), labeled_idx=idx))
    return out


def subsample_observations(bundle: DatasetBundle, fraction: float, seed: int) -> DatasetBundle:
    """Keep ``ceil(fraction * N)`` action-free trajectories, always including the labeled ones."""
    if not 0 < fraction <= 1:
        raise ConfigError("observation fraction must be in (0, 1]")
    if fraction == 1:
        return bundle
    N = len(bundle.D_x)
    keep_n = max(math.ceil(round(fraction * N, 9)), len(bundle.labeled_idx))
    labeled = set(bundle.labeled_idx)
    rest = [int(i) for i in np.random.default_rng([seed, 6]).permutation(N) if int(i) not in labeled]
    chosen = sorted(list(labeled) + rest[:keep_n - len(labeled)])
    pos = {j: k for k, j in enumerate(chosen)}
    return replace(bundle, D_x=[bundle.D_x[i] for i in chosen], obs_fraction=fraction,
                   labeled_idx=tuple(pos[i] for i in bundle.labeled_idx))


def generate_pool(env: EnvSpec, n_traj: int, seed: int, expert_noise: float = 0.02) -> list[Trajectory]:
    if env.name == "avoid":
        cfg = env.avoid_config()
        return [expert_rollout(cfg, seed * 100003 + i, noise_std=expert_noise) for i in range(n_traj)]
    if env.name == "lti":
        from .envs import LtiSystem, lti_generate
        p = env.params
        sys = LtiSystem(np.asarray(p.get("A", [[0.9, 0.2], [-0.1, 0.8]])), np.asarray(p.get("B", [[0.0], [1.0]])),
                        p.get("noise_std", 0.0))
        return lti_generate(sys, n_traj, p.get("T", 30), seed)
    raise ConfigError(f"unknown env {env.name!r}")


# ---------------------------------------------------------------------- policies

@dataclass(frozen=True)
class RolloutConfig:
    horizon: int = 12
    replan: int = 4
    history: int = 2
    episodes: int = 20

    def __post_init__(self):
        if not 1 <= self.replan <= self.horizon:
            raise ConfigError("replan interval must be in [1, horizon]")


class PlanThenControl:
    """Diffusion planner followed by an inverse-dynamics controller."""

    def __init__(self, planner, controller, planner_fn: Callable | None = None):
        self.planner = planner
        self.controller = controller
        self._plan = planner_fn or (lambda H, X, rngs: sample_plans(planner, H, X, rngs))

    def act(self, histories, currents, rngs):
        plans = self._plan(histories, currents, rngs)
        return self.controller.infer_actions(histories, plans), plans


class DiffusionPolicy:
    """Actions sampled directly from an action-diffusion model."""

    def __init__(self, model: PlannerModel):
        if model.kind != "actions":
            raise ConfigError("diffusion policy needs an action model")
        self.model = model

    def act(self, histories, currents, rngs):
        noise = np.stack([draw_noise(self.model, r) for r in rngs])
        return sample_rows(self.model, histories, currents, noise), None


@dataclass
class RolloutRecord:
    env: str
    method: str
    seed: int
    episode: int
    states: list
    actions: list
    status: str
    steps: int
    replans: list = field(default_factory=list)        # step index of each planner call
    executed: list = field(default_factory=list)       # actions executed from each plan
    plan_lengths: list = field(default_factory=list)   # actions returned by each plan
    history_len: int = 0

    def to_json(self) -> dict:
        return asdict(self)


def _history(obs: list[np.ndarray], n: int) -> np.ndarray:
    t = len(obs) - 1
    return np.stack([obs[max(t - j, 0)] for j in range(n, 0, -1)]) if n else np.zeros((0, obs[0].size))


def rollout_batch(policy, envs: Sequence, cfg: RolloutConfig, seed: int, *, method: str = "", env_id: str = "",
                  episode_ids: Sequence[int] | None = None) -> list[RolloutRecord]:
    """Receding-horizon control for several independent episodes at once.

    Each round plans from the current observation and ``cfg.history``
    previous observations (the initial one replicated at the start),
    then executes ``cfg.replan`` actions or fewer if the episode ends.
    """
    episode_ids = list(episode_ids if episode_ids is not None else range(len(envs)))
    rngs = [np.random.default_rng([seed, e, 99]) for e in episode_ids]
    obs = [[env.observe()] for env in envs]
    recs = [RolloutRecord(env_id, method, seed, e, [np.asarray(env_state(env)).tolist()], [], RUNNING, 0,
                          history_len=cfg.history) for env, e in zip(envs, episode_ids)]
    while True:
        active = [i for i, env in enumerate(envs) if env.status == RUNNING]
        if not active:
            break
        H = np.stack([_history(obs[i], cfg.history) for i in active])
        X = np.stack([obs[i][-1] for i in active])
        actions, _ = policy.act(H, X, [rngs[i] for i in active])
        actions = np.asarray(actions)
        if actions.shape[1] < cfg.replan:
            raise ConfigError(f"policy returned {actions.shape[1]} actions, need at least {cfg.replan}")
        for j, i in enumerate(active):
            env, rec = envs[i], recs[i]
            rec.replans.append(env.steps)
            rec.plan_lengths.append(int(actions.shape[1]))
            done = 0
            for a in actions[j, :cfg.replan]:
                o, status = env.step(a)
                obs[i].append(o)
                rec.states.append(np.asarray(env_state(env)).tolist())
                rec.actions.append(np.asarray(a).tolist())
                done += 1
                if status != RUNNING:
                    break
            rec.executed.append(done)
    for env, rec in zip(envs, recs):
        rec.status, rec.steps = env.status, env.steps
    return recs


def env_state(env) -> np.ndarray:
    return env.pos if hasattr(env, "pos") else env.state


def rollout(policy, env, cfg: RolloutConfig, seed: int, **kw) -> RolloutRecord:
    return rollout_batch(policy, [env], cfg, seed, **kw)[0]


# -------------------------------------------------------------------- evaluation

@dataclass
class ExperimentConfig:
    env: EnvSpec = field(default_factory=EnvSpec)
    dataset: dict = field(default_factory=lambda: {"n_traj": 500, "seed": 0, "expert_noise": 0.02})
    planner: PlannerConfig = field(default_factory=lambda: PlannerConfig(pad_end=True, epochs=100))
    controller: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=30))
    method_overrides: dict = field(default_factory=dict)
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    matrix: dict = field(default_factory=lambda: {"methods": ["koap", "dd"], "levels": list(DEFAULT_LEVELS),
                                                  "obs_fractions": [1.0], "seeds": [0, 1, 2, 3, 4, 5]})

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = copy.deepcopy(d)
        env = d.get("env", {})
        ctrl = dict(d.get("controller", {}))
        overrides = ctrl.pop("per_method", {})
        base = cls()
        cfg = cls(
            env=EnvSpec(env.get("name", "avoid"), env.get("params", {})),
            dataset={**base.dataset, **d.get("dataset", {})},
            planner=PlannerConfig.from_dict({**asdict(base.planner), **d.get("planner", {})}),
            controller=TrainConfig.from_dict({**asdict(base.controller), **ctrl}),
            method_overrides=overrides,
            rollout=RolloutConfig(**d.get("rollout", {})),
            matrix={**base.matrix, **d.get("matrix", {})},
        )
        seed = os.environ.get("KOAP_SEED")
        if seed is not None:
            cfg.dataset["seed"] = int(seed)
            cfg.matrix["seeds"] = [int(seed)]
        r, c, p = cfg.rollout, cfg.controller, cfg.planner
        if not (r.horizon == c.horizon == p.horizon and r.history == c.n_history == p.n_history):
            raise ConfigError("rollout, controller and planner must agree on horizon and history")
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def controller_cfg(self, method: str, seed: int) -> TrainConfig:
        over = self.method_overrides.get(method, {})
        return TrainConfig.from_dict({**asdict(self.controller), **over, "seed": seed})

    def planner_cfg(self, seed: int) -> PlannerConfig:
        return replace(self.planner, seed=seed)

    def make_env(self, seed: int, episode: int):
        if self.env.name != "avoid":
            raise ConfigError("closed-loop evaluation is defined for the avoid task")
        return self.env.avoid_config().make(seed * 100000 + episode)


@dataclass
class EvalResult:
    method: str
    per_seed: dict
    records: list

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.per_seed.values())))

    @property
    def std(self) -> float:
        v = list(self.per_seed.values())
        return float(np.std(v, ddof=1)) if len(v) > 1 else 0.0


class ArtifactStore:
    """Checkpoint cache under ``root``; ``None`` keeps everything in memory.

    With ``train=False`` a missing checkpoint is an error instead of a
    reason to train one.
    """

    def __init__(self, root: str | Path | None = None, train: bool = True):
        self.root = Path(root) if root is not None else None
        self.train = train
        self._mem: dict[str, object] = {}

    def path(self, key: str) -> Path | None:
        return None if self.root is None else self.root / "ckpt" / key

    def has(self, key: str) -> bool:
        p = self.path(key)
        return key in self._mem or (p is not None and checkpoint_files(p)[1].exists())

    def get(self, key: str, build: Callable[[], object], loader: Callable[[Path], object]):
        if key in self._mem:
            return self._mem[key]
        p = self.path(key)
        if p is not None and checkpoint_files(p)[1].exists():
            obj = loader(p)
        elif not self.train:
            raise OrchestrationError(f"missing checkpoint {key!r} under {self.root}")
        else:
            obj = build()
            if p is not None:
                obj.save(p)
        self._mem[key] = obj
        return obj


def _fkey(x: float) -> str:
    return f"{x:g}"


def planner_key(bundle: DatasetBundle, seed: int) -> str:
    return f"planner_o{_fkey(bundle.obs_fraction)}_s{seed}"


def controller_key(method: str, bundle: DatasetBundle, seed: int) -> str:
    if method == "dp":
        return f"dp_l{_fkey(bundle.level)}_s{seed}"
    return f"{method}_l{_fkey(bundle.level)}_o{_fkey(bundle.obs_fraction)}_s{seed}"


def get_planner(bundle: DatasetBundle, cfg: ExperimentConfig, seed: int, store: ArtifactStore) -> PlannerModel:
    return store.get(planner_key(bundle, seed), lambda: train_planner(bundle.D_x, cfg.planner_cfg(seed)),
                     PlannerModel.load)


def get_controller(method: str, bundle: DatasetBundle, cfg: ExperimentConfig, seed: int, store: ArtifactStore):
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}")
    if method == "dp":
        return store.get(controller_key(method, bundle, seed),
                         lambda: train_diffusion_policy(bundle.D_a, cfg.planner_cfg(seed)), PlannerModel.load)
    return store.get(controller_key(method, bundle, seed),
                     lambda: train_controller(method, bundle.D_x, bundle.D_a, cfg.controller_cfg(method, seed)),
                     load_controller)


def train_policy(method: str, bundle: DatasetBundle, cfg: ExperimentConfig, seed: int,
                 store: ArtifactStore | None = None):
    """Policy for ``method``: a diffusion policy, or the shared planner plus that method's controller."""
    store = store or ArtifactStore()
    controller = get_controller(method, bundle, cfg, seed, store)
    if method == "dp":
        return DiffusionPolicy(controller)
    return PlanThenControl(get_planner(bundle, cfg, seed, store), controller)


def evaluate_policy(policy, cfg: ExperimentConfig, seed: int, method: str, episodes: int | None = None):
    episodes = episodes or cfg.rollout.episodes
    envs = [cfg.make_env(seed, e) for e in range(episodes)]
    return rollout_batch(policy, envs, cfg.rollout, seed, method=method, env_id=cfg.env.name)


def evaluate(method: str, bundle: DatasetBundle, cfg: ExperimentConfig, seeds: Sequence[int] | None = None,
             store: ArtifactStore | None = None, episodes: int | None = None) -> EvalResult:
    """Per-seed success fraction (trains whatever is missing from ``store``)."""
    seeds = list(seeds if seeds is not None else cfg.matrix["seeds"])
    store = store or ArtifactStore()
    per_seed, records = {}, []
    for s in seeds:
        recs = evaluate_policy(train_policy(method, bundle, cfg, s, store), cfg, s, method, episodes)
        per_seed[s] = float(np.mean([r.status == SUCCESS for r in recs]))
        records.extend(recs)
    return EvalResult(method, per_seed, records)


# ------------------------------------------------------------------------ matrix

CSV_FIELDS = ("method", "level", "obs_fraction", "seed", "success")


def load_pool(cfg: ExperimentConfig, out_dir: Path | None) -> list[Trajectory]:
    ds = cfg.dataset
    if ds.get("pool"):
        return read_jsonl(ds["pool"])
    path = out_dir / "pool.jsonl" if out_dir is not None else None
    if path is not None and path.exists():
        return read_jsonl(path)
    pool = generate_pool(cfg.env, ds["n_traj"], ds["seed"], ds.get("expert_noise", 0.02))
    if path is not None:
        write_jsonl(path, pool)
    return pool


def make_bundle(pool: Sequence[Trajectory], cfg: ExperimentConfig, level: float, obs_fraction: float = 1.0
                ) -> DatasetBundle:
    """The labeled subset at ``level`` (nested as in :func:`build_levels`) and observation fraction."""
    levels = sorted({float(v) for v in cfg.matrix["levels"]} | {float(level)})
    bundle = {b.level: b for b in build_levels(pool, levels, cfg.dataset["seed"], {"env": cfg.env.name})}[float(level)]
    return subsample_observations(bundle, float(obs_fraction), cfg.dataset["seed"])


def cell_id(method: str, level: float, obs: float, seed: int) -> str:
    return f"{method}_l{_fkey(level)}_o{_fkey(obs)}_s{seed}"


def run_matrix(config: ExperimentConfig | dict | str | Path, out_dir: str | Path) -> list[dict]:
    """Train and evaluate ``methods x levels x obs_fractions x seeds``.

    Each finished cell is written to ``cells/<id>.json`` (plus rollout
    records) and skipped on rerun; a failing cell is recorded and the
    matrix continues.  Writes ``metrics.csv`` and ``summary.json``.
    """
    if isinstance(config, (str, Path)):
        config = ExperimentConfig.load(config)
    elif not isinstance(config, ExperimentConfig):
        config = ExperimentConfig.from_dict(config)
    out = Path(out_dir)
    (out / "cells").mkdir(parents=True, exist_ok=True)
    (out / "records").mkdir(parents=True, exist_ok=True)
    mx = config.matrix
    pool = load_pool(config, out)
    store = ArtifactStore(out)
    levels = sorted(float(v) for v in mx["levels"])
    bundles = {b.level: b for b in build_levels(pool, levels, config.dataset["seed"], {"env": config.env.name})}
    rows = []
    for obs in mx.get("obs_fractions", [1.0]):
        for seed in mx["seeds"]:
            for level in levels:
                for method in mx["methods"]:
                    cid = cell_id(method, level, float(obs), int(seed))
                    path = out / "cells" / f"{cid}.json"
                    if path.exists():
                        rows.append(json.loads(path.read_text()))
                        continue
                    row = {"method": method, "level": level, "obs_fraction": float(obs), "seed": int(seed)}
                    try:
                        bundle = subsample_observations(bundles[level], float(obs), config.dataset["seed"])
                        policy = train_policy(method, bundle, config, int(seed), store)
                        recs = evaluate_policy(policy, config, int(seed), method)
                        write_jsonl_records(out / "records" / f"{cid}.jsonl", recs)
                        row["success"] = float(np.mean([r.status == SUCCESS for r in recs]))
                    except Exception as exc:  # recorded per cell, matrix continues
                        log.exception("cell %s failed", cid)
                        row["error"] = f"{type(exc).__name__}: {exc}"
                    path.write_text(json.dumps(row, sort_keys=True))
                    rows.append(row)
    write_metrics(out, rows)
    return rows


def write_jsonl_records(path: Path, records: Sequence[RolloutRecord]) -> None:
    with path.open("w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


def read_records(path: str | Path) -> list[RolloutRecord]:
    with Path(path).open() as fh:
        return [RolloutRecord(**json.loads(line)) for line in fh if line.strip()]


def metrics_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in sorted((r for r in rows if "success" in r),
                    key=lambda r: (r["method"], r["level"], r["obs_fraction"], r["seed"])):
        w.writerow([r["method"], _fkey(r["level"]), _fkey(r["obs_fraction"]), r["seed"], f"{r['success']:.6f}"])
    return buf.getvalue()


def summarize(rows: Sequence[dict]) -> list[dict]:
    groups: dict[tuple, list[float]] = {}
    failures: dict[tuple, int] = {}
    for r in rows:
        key = (r["method"], r["level"], r["obs_fraction"])
        if "success" in r:
            groups.setdefault(key, []).append(r["success"])
        else:
            failures[key] = failures.get(key, 0) + 1
    out = []
    for key in sorted(set(groups) | set(failures)):
        v = groups.get(key, [])
        out.append({"method": key[0], "level": key[1], "obs_fraction": key[2], "n_seeds": len(v),
                    "mean": float(np.mean(v)) if v else None,
                    "std": float(np.std(v, ddof=1)) if len(v) > 1 else 0.0,
                    "failures": failures.get(key, 0)})
    return out


def write_metrics(out: Path, rows: Sequence[dict]) -> None:
    (out / "metrics.csv").write_text(metrics_csv(rows))
    (out / "summary.json").write_text(json.dumps(summarize(rows), indent=1, sort_keys=True))


def success_table(rows: Sequence[dict]) -> dict[tuple, list[float]]:
    """``(method, level, obs_fraction) -> per-seed success`` ordered by seed."""
    table: dict[tuple, list[tuple[int, float]]] = {}
    for r in rows:
        if "success" in r:
            table.setdefault((r["method"], float(r["level"]), float(r["obs_fraction"])), []).append(
                (r["seed"], r["success"]))
    return {k: [s for _, s in sorted(v)] for k, v in table.items()}


__all__ = [
    "DatasetBundle", "build_levels", "subsample_observations", "generate_pool", "RolloutConfig",
    "PlanThenControl", "DiffusionPolicy", "RolloutRecord", "rollout", "rollout_batch", "ExperimentConfig",
    "EvalResult", "ArtifactStore", "get_planner", "get_controller", "planner_key", "controller_key",
    "write_jsonl_records", "train_policy", "evaluate_policy", "evaluate", "run_matrix", "metrics_csv", "summarize",
    "read_records", "success_table", "make_bundle", "load_pool", "cell_id", "PLAN_THEN_CONTROL",
    "OrchestrationError", "AvoidConfig",
]
