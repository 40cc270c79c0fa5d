"""Plan-then-control on the obstacle task with 2% action labels.

Generates expert demonstrations, trains the state planner on all of them
without actions, trains KOAP and the supervised DD controller on the
labeled few, and compares closed-loop success.

    python demos/avoid_walkthrough.py [--planner-epochs 100] [--episodes 20] [--out runs/demo]
"""

import argparse
from collections import Counter
from pathlib import Path

import numpy as np

from koap.envs import plan_mode
from koap.harness import ArtifactStore, ExperimentConfig, evaluate_policy, load_pool, make_bundle, train_policy
from koap.planner import sample_plan


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--planner-epochs", type=int, default=100)
    ap.add_argument("--controller-epochs", type=int, default=30)
    ap.add_argument("--episodes", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/demo")
    args = ap.parse_args()

    cfg = ExperimentConfig.from_dict({"planner": {"epochs": args.planner_epochs},
                                      "controller": {"epochs": args.controller_epochs}})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pool = load_pool(cfg, out)
    bundle = make_bundle(pool, cfg, 0.02)
    print(f"{len(bundle.D_x)} action-free trajectories, {len(bundle.D_a)} labeled "
          f"({Counter(t.meta['mode'] for t in bundle.D_a)})")

    store = ArtifactStore(out)
    for method in ("koap", "dd"):
        policy = train_policy(method, bundle, cfg, args.seed, store)
        recs = evaluate_policy(policy, cfg, args.seed, method, args.episodes)
        print(f"{method:>5}: success {np.mean([r.status == 'success' for r in recs]):.0%}  "
              f"{dict(Counter(r.status for r in recs))}")

    start = np.array([0.0, 0.5])
    modes = Counter(plan_mode(sample_plan(policy.planner, start, np.stack([start, start]), s).future, start)
                    for s in range(100))
    print(f"100 plans from {start.tolist()}: {dict(modes)}")
    print(f"checkpoints under {out / 'ckpt'}")


if __name__ == "__main__":
    main()
