"""Command-line entry point: ``koap <subcommand> ...``.

Every subcommand reads an optional JSON experiment config (sections
``env``, ``dataset``, ``planner``, ``controller``, ``rollout``, ``matrix``)
and writes artifacts under ``--workdir``.  ``KOAP_SEED`` overrides the
dataset and matrix seeds.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .baselines import METHODS
from .data import read_jsonl, write_jsonl
from .envs import EnvSpec
from .harness import (ArtifactStore, ExperimentConfig, OrchestrationError, evaluate, generate_pool, get_controller,
                      get_planner, load_pool, make_bundle, metrics_csv, planner_key, run_matrix, summarize,
                      write_jsonl_records)
from .numerics import ConfigError, NumericalError
from .planner import PlannerModel, sample_actions, sample_plan

log = logging.getLogger("koap")


def _config(args) -> ExperimentConfig:
    return ExperimentConfig.load(args.config) if args.config else ExperimentConfig.from_dict({})


def _pool(args, cfg: ExperimentConfig):
    if args.bundle:
        return read_jsonl(args.bundle)
    return load_pool(cfg, Path(args.workdir))


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    env = EnvSpec(args.env, cfg.env.params if cfg.env.name == args.env else {})
    seed = args.seed if args.seed is not None else cfg.dataset["seed"]
    pool = generate_pool(env, args.n_traj, seed, cfg.dataset.get("expert_noise", 0.02))
    write_jsonl(args.out, pool)
    print(f"wrote {len(pool)} trajectories to {args.out}")
    return 0


def cmd_train_planner(args) -> int:
    cfg = _config(args)
    bundle = make_bundle(_pool(args, cfg), cfg, cfg.matrix["levels"][0], args.obs_fraction)
    store = ArtifactStore(args.workdir)
    for seed in _seeds(args, cfg):
        get_planner(bundle, cfg, seed, store)
        print(f"planner seed {seed} -> {store.path(planner_key(bundle, seed))}")
    return 0


def cmd_train_controller(args) -> int:
    cfg = _config(args)
    bundle = make_bundle(_pool(args, cfg), cfg, args.level, args.obs_fraction)
    store = ArtifactStore(args.workdir)
    for seed in _seeds(args, cfg):
        get_controller(args.method, bundle, cfg, seed, store)
        print(f"{args.method} seed {seed}: |D_a|={len(bundle.D_a)} |D_x|={len(bundle.D_x)}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    bundle = make_bundle(_pool(args, cfg), cfg, args.level, args.obs_fraction)
    store = ArtifactStore(args.workdir, train=not args.no_train)
    res = evaluate(args.method, bundle, cfg, _seeds(args, cfg), store, args.episodes)
    rows = [{"method": args.method, "level": float(args.level), "obs_fraction": float(args.obs_fraction),
             "seed": s, "success": v} for s, v in res.per_seed.items()]
    out = Path(args.out) if args.out else Path(args.workdir) / f"eval_{args.method}_l{args.level:g}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(metrics_csv(rows))
    write_jsonl_records(out.with_name(out.stem + "_records.jsonl"), res.records)
    print(f"{args.method}: success {100 * res.mean:.1f} +/- {100 * res.std:.1f} over seeds {list(res.per_seed)}")
    return 0


def cmd_sample_plan(args) -> int:
    model = PlannerModel.load(args.checkpoint)
    if args.horizon is not None and args.horizon != model.horizon:
        raise ConfigError(f"checkpoint plans {model.horizon} steps, not {args.horizon}")
    cond = json.loads(Path(args.conditioning).read_text() if args.conditioning.endswith(".json")
                      else args.conditioning)
    if model.kind == "states":
        out = {"plan": sample_plan(model, cond["current"], cond["history"], args.seed).states.tolist()}
    else:
        out = {"actions": sample_actions(model, cond["current"], cond["history"], args.seed).tolist()}
    print(json.dumps(out))
    return 0


def cmd_run_matrix(args) -> int:
    rows = run_matrix(args.config, args.workdir)
    for r in summarize(rows):
        mean = "n/a" if r["mean"] is None else f"{100 * r['mean']:.1f}"
        print(f"{r['method']:>10} level={r['level']:<5g} obs={r['obs_fraction']:<4g} success={mean} "
              f"(n={r['n_seeds']}, failures={r['failures']})")
    return 1 if any("error" in r for r in rows) else 0


def _seeds(args, cfg: ExperimentConfig) -> list[int]:
    return list(args.seeds) if args.seeds else list(cfg.matrix["seeds"])


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="koap", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, bundle=True):
        p.add_argument("--config", help="experiment JSON config")
        p.add_argument("--workdir", default="runs", help="artifact directory (default: runs)")
        if bundle:
            p.add_argument("--bundle", help="pool of labeled trajectories (JSON lines); generated if omitted")
            p.add_argument("--obs-fraction", type=float, default=1.0)
            p.add_argument("--seeds", type=int, nargs="+")

    p = sub.add_parser("gen-data", help="generate expert trajectories")
    p.add_argument("--env", choices=("avoid", "lti"), default="avoid")
    p.add_argument("--n-traj", type=int, default=500)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    common(p, bundle=False)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-planner", help="train the state diffusion planner on D_x")
    common(p)
    p.set_defaults(func=cmd_train_planner)

    p = sub.add_parser("train-controller", help="train an inverse-dynamics controller")
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--level", type=float, required=True, help="fraction of labeled trajectories")
    common(p)
    p.set_defaults(func=cmd_train_controller)

    p = sub.add_parser("evaluate", help="closed-loop success rate over seeds")
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--level", type=float, default=0.02)
    p.add_argument("--episodes", type=int)
    p.add_argument("--out", help="CSV path (default: <workdir>/eval_<method>_l<level>.csv)")
    p.add_argument("--no-train", action="store_true", help="fail instead of training missing checkpoints")
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sample-plan", help="draw one plan from a trained diffusion checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--conditioning", required=True,
                   help='JSON (or a .json file) like {"history": [[x, y], [x, y]], "current": [x, y]}')
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--horizon", type=int, help="expected plan length; checked against the checkpoint")
    p.set_defaults(func=cmd_sample_plan)

    p = sub.add_parser("run-matrix", help="methods x levels x observation fractions x seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--workdir", default="runs")
    p.set_defaults(func=cmd_run_matrix)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except KeyError as exc:
        print(f"error: missing field {exc}", file=sys.stderr)
        return 2
    except (ConfigError, OrchestrationError, NumericalError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
