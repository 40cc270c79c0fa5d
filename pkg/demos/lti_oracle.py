"""Fit the exact DMDc oracle and KOAP on the same noiseless linear system.

    python demos/lti_oracle.py [--epochs 30] [--labeled 10]
"""

import argparse
import time

import numpy as np

from koap.baselines import train_dd_controller
from koap.data import make_windows
from koap.envs import LtiSystem, dmdc_fit, lti_generate
from koap.koopman import TrainConfig, infer_actions, one_step_prediction, train_koap


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--labeled", type=int, default=10)
    args = ap.parse_args()

    A = np.array([[0.9, 0.2], [-0.1, 0.8]])
    B = np.array([[0.0], [1.0]])
    sys = LtiSystem(A, B)
    train, held = lti_generate(sys, 200, 30, seed=0), lti_generate(sys, 50, 30, seed=1)

    Ah, Bh = dmdc_fit(train)
    print(f"DMDc recovery error: A {np.abs(Ah - A).max():.1e}, B {np.abs(Bh - B).max():.1e}")

    cfg = TrainConfig(latent_dim=4, epochs=args.epochs)
    t0 = time.time()
    model = train_koap(train, train[:args.labeled], cfg)
    print(f"KOAP trained on 200 action-free + {args.labeled} labeled trajectories in {time.time() - t0:.0f}s")
    full = train_dd_controller(train, cfg)

    w = make_windows(held, 2, 12, labeled=True)
    x_t, a_t, x_next = w.states[:, 2], w.actions[:, 0], w.states[:, 3]
    mse = lambda p, q: float(((p - q) ** 2).sum(-1).mean())
    print(f"held-out one-step MSE  DMDc {mse(x_t @ Ah.T + a_t @ Bh.T, x_next):.2e}"
          f"  KOAP {mse(one_step_prediction(model, w.states), x_next):.2e}")
    print(f"held-out action MSE    KOAP {mse(infer_actions(model, w.states[:, :2], w.states[:, 2:]), w.actions):.2e}"
          f"  supervised (all labels) {mse(full.infer_actions(w.states[:, :2], w.states[:, 2:]), w.actions):.2e}")
    print("K eigenvalues:", np.round(np.linalg.eigvals(model.params.segment_array("K")), 3),
          " true A:", np.round(np.linalg.eigvals(A), 3))


if __name__ == "__main__":
    main()
