import json
import math

import numpy as np
import pytest

import koap.harness as hz
from koap.cli import main
from koap.data import Trajectory
from koap.envs import COLLISION, SUCCESS, TIMEOUT, AvoidConfig, AvoidEnv, LtiEnv, LtiSystem, expert_rollout
from koap.harness import (ArtifactStore, ExperimentConfig, OrchestrationError, PlanThenControl, RolloutConfig,
                          build_levels, evaluate, get_controller, make_bundle, read_records, rollout, rollout_batch,
                          run_matrix, subsample_observations)
from koap.numerics import ConfigError


def fake_pool(n):
    return [Trajectory(np.full((3, 2), i, dtype=float), np.zeros((2, 2)), {"i": i}) for i in range(n)]


# ----------------------------------------------------------------- levels

def test_level_sizes_on_pool_of_500():
    bundles = build_levels(fake_pool(500), seed=0)
    assert [len(b.D_a) for b in bundles] == [10, 25, 50, 125, 250]


@pytest.mark.parametrize("seed", [0, 1, 7])
def test_levels_nested_with_shared_dx(seed):
    bundles = build_levels(fake_pool(120), seed=seed)
    for lo, hi in zip(bundles, bundles[1:]):
        assert set(lo.labeled_idx) < set(hi.labeled_idx)
        assert lo.D_x is hi.D_x
    assert len(bundles[0].D_x) == 120 and all(t.actions is None for t in bundles[0].D_x)
    for b in bundles:
        assert [t.meta["i"] for t in b.D_a] == list(b.labeled_idx)


def test_levels_deterministic_and_seed_dependent():
    pool = fake_pool(200)
    a = [b.labeled_idx for b in build_levels(pool, seed=3)]
    assert a == [b.labeled_idx for b in build_levels(pool, seed=3)]
    assert a != [b.labeled_idx for b in build_levels(pool, seed=4)]


def test_level_errors():
    with pytest.raises(ConfigError):
        build_levels(fake_pool(0), [0.5])
    with pytest.raises(ConfigError):
        build_levels(fake_pool(10), [0.5, 0.2])
    with pytest.raises(ConfigError):
        build_levels(fake_pool(10), [0.0, 0.2])


def test_observation_subsample_keeps_labeled():
    b = build_levels(fake_pool(100), [0.05], seed=2)[0]
    sub = subsample_observations(b, 0.1, seed=2)
    assert len(sub.D_x) == 10 and sub.obs_fraction == 0.1
    kept = {int(t.states[0, 0]) for t in sub.D_x}
    assert {t.meta["i"] for t in b.D_a} <= kept
    assert [int(sub.D_x[j].states[0, 0]) for j in sub.labeled_idx] == list(b.labeled_idx)
    assert subsample_observations(b, 1.0, 2) is b
    tiny = subsample_observations(b, 0.01, 2)
    assert len(tiny.D_x) == len(b.D_a)


# ---------------------------------------------------------------- rollouts

class ConstantPolicy:
    def __init__(self, action, k=12):
        self.action, self.k, self.calls = np.asarray(action, float), k, 0

    def act(self, H, X, rngs):
        self.calls += 1
        return np.broadcast_to(self.action, (len(X), self.k, self.action.size)).copy(), None


class RandomPolicy:
    def act(self, H, X, rngs):
        return np.stack([r.uniform(-0.05, 0.05, size=(12, 2)) for r in rngs]), None


class ReplayPolicy:
    def __init__(self, actions, replan=4):
        self.actions, self.t, self.replan = actions, 0, replan

    def act(self, H, X, rngs):
        chunk = np.zeros((12, self.actions.shape[1]))
        seg = self.actions[self.t:self.t + 12]
        chunk[:len(seg)] = seg
        self.t += self.replan
        return chunk[None], None


def test_protocol_four_actions_per_plan():
    env = AvoidEnv(AvoidConfig(), [0.0, 0.1])
    pol = ConstantPolicy([0.03, 0.0])
    rec = rollout(pol, env, RolloutConfig(), seed=0)
    assert rec.status == SUCCESS and rec.history_len == 2
    assert set(rec.plan_lengths) == {12}
    assert all(n == 4 for n in rec.executed[:-1]) and 1 <= rec.executed[-1] <= 4
    assert len(rec.replans) == math.ceil(rec.steps / 4) == pol.calls
    assert rec.replans == [4 * i for i in range(len(rec.replans))]
    assert len(rec.actions) == rec.steps and len(rec.states) == rec.steps + 1


def test_history_bootstrap_replicates_initial_state():
    seen = []

    class Spy(ConstantPolicy):
        def act(self, H, X, rngs):
            seen.append((H.copy(), X.copy()))
            return super().act(H, X, rngs)

    rollout(Spy([0.05, 0.0]), AvoidEnv(AvoidConfig(), [0.0, 0.1]), RolloutConfig(), seed=0)
    H0, X0 = seen[0]
    assert np.array_equal(H0[0], np.stack([X0[0], X0[0]]))
    H1, X1 = seen[1]
    np.testing.assert_allclose(H1[0], [[0.1, 0.1], [0.15, 0.1]])
    np.testing.assert_allclose(X1[0], [0.2, 0.1])


def test_zero_policy_times_out():
    rec = rollout(ConstantPolicy([0.0, 0.0]), AvoidConfig().make(1), RolloutConfig(), seed=0)
    assert rec.status == TIMEOUT and rec.steps == 100


def test_short_plans_are_rejected():
    with pytest.raises(ConfigError):
        rollout(ConstantPolicy([0.0, 0.0], k=3), AvoidConfig().make(1), RolloutConfig(), seed=0)
    with pytest.raises(ConfigError):
        RolloutConfig(replan=13)


def test_random_policy_rarely_succeeds():
    cfg = AvoidConfig()
    envs = [cfg.make(e) for e in range(1000)]
    recs = rollout_batch(RandomPolicy(), envs, RolloutConfig(), seed=0)
    rate = np.mean([r.status == SUCCESS for r in recs])
    assert rate < 0.10
    assert {r.status for r in recs} <= {SUCCESS, COLLISION, TIMEOUT}


def test_expert_open_loop_replay_succeeds():
    cfg = AvoidConfig()
    for seed in range(30):
        t = expert_rollout(cfg, seed, noise_std=0.0)
        rec = rollout(ReplayPolicy(t.actions), AvoidEnv(cfg, t.states[0]), RolloutConfig(), seed=0)
        assert rec.status == SUCCESS and rec.steps == t.n_steps


def test_oracle_controller_tracks_lti_plan():
    sys = LtiSystem([[0.9, 0.2], [-0.1, 0.8]], [[1.0, 0.0], [0.3, 1.0]])
    gain = np.array([[0.2, 0.1], [-0.05, 0.3]])
    plans = []

    def planner(H, X, rngs):
        out = np.zeros((len(X), 13, 2))
        out[:, 0] = X
        for j in range(12):
            x = out[:, j]
            out[:, j + 1] = x @ sys.A.T - (x @ gain.T) @ sys.B.T
        plans.append(out[0].copy())
        return out

    class Oracle:
        def infer_actions(self, H, P):
            return (P[:, 1:] - P[:, :-1] @ sys.A.T) @ np.linalg.inv(sys.B).T

    rec = rollout(PlanThenControl(None, Oracle(), planner), LtiEnv(sys, [1.0, -0.5], cap=30), RolloutConfig(), 0)
    states = np.array(rec.states)
    worst = 0.0
    for start, done, plan in zip(rec.replans, rec.executed, plans):
        worst = max(worst, np.abs(states[start:start + done + 1] - plan[:done + 1]).max())
    assert worst < 1e-6


# ------------------------------------------------------------- orchestration

def tiny_config(**matrix):
    return {
        "dataset": {"n_traj": 12, "seed": 0},
        "planner": {"epochs": 1, "steps_per_epoch": 3, "hidden": 16, "diffusion_steps": 5, "batch_size": 16},
        "controller": {"epochs": 1, "steps_per_epoch": 3, "hidden": 8, "seq_hidden": 4, "batch_size": 8},
        "rollout": {"episodes": 2},
        "matrix": {"methods": ["koap", "dd"], "levels": [0.1, 0.5], "seeds": [0, 1, 2], **matrix},
    }


def test_config_sections_and_validation(monkeypatch):
    cfg = ExperimentConfig.from_dict(tiny_config())
    assert cfg.planner.pad_end and not cfg.controller.pad_end and cfg.planner.epochs == 1
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"rollout": {"horizon": 8}})
    monkeypatch.setenv("KOAP_SEED", "5")
    cfg = ExperimentConfig.from_dict(tiny_config())
    assert cfg.dataset["seed"] == 5 and cfg.matrix["seeds"] == [5]


def test_matrix_rows_resume_and_failures(tmp_path, monkeypatch):
    rows = run_matrix(tiny_config(), tmp_path)
    assert len(rows) == 12
    csv_lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert csv_lines[0] == "method,level,obs_fraction,seed,success" and len(csv_lines) == 13
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert {(s["method"], s["level"]) for s in summary} == {(m, l) for m in ("koap", "dd") for l in (0.1, 0.5)}
    recs = read_records(tmp_path / "records" / "koap_l0.1_o1_s0.jsonl")
    assert len(recs) == 2 and all(r.method == "koap" for r in recs)

    (tmp_path / "cells" / "dd_l0.5_o1_s2.json").unlink()
    calls = []
    real = hz.evaluate_policy
    monkeypatch.setattr(hz, "evaluate_policy", lambda *a, **k: calls.append(a[3]) or real(*a, **k))
    again = run_matrix(tiny_config(), tmp_path)
    assert calls == ["dd"]
    assert (tmp_path / "metrics.csv").read_text().splitlines() == csv_lines
    assert len(again) == 12

    def broken(method, *a, **k):
        if method == "dd":
            raise RuntimeError("boom")
        return real_train(method, *a, **k)

    real_train = hz.train_policy
    monkeypatch.setattr(hz, "train_policy", broken)
    out = tmp_path / "second"
    rows = run_matrix(tiny_config(), out)
    failed = [r for r in rows if "error" in r]
    assert len(failed) == 6 and all(r["method"] == "dd" and "boom" in r["error"] for r in failed)
    assert len((out / "metrics.csv").read_text().splitlines()) == 1 + 12 - 6
    assert all(s["failures"] == 3 for s in json.loads((out / "summary.json").read_text()) if s["method"] == "dd")


def test_missing_checkpoint_without_training(tmp_path):
    cfg = ExperimentConfig.from_dict(tiny_config())
    bundle = make_bundle(fake_avoid_pool(), cfg, 0.1)
    with pytest.raises(OrchestrationError):
        get_controller("dd", bundle, cfg, 0, ArtifactStore(tmp_path, train=False))
    with pytest.raises(OrchestrationError):
        evaluate("koap", bundle, cfg, [0], ArtifactStore(tmp_path, train=False))


def fake_avoid_pool():
    return [expert_rollout(AvoidConfig(), s) for s in range(12)]


def test_unknown_method_is_config_error(tmp_path):
    cfg = ExperimentConfig.from_dict(tiny_config())
    with pytest.raises(ConfigError):
        get_controller("gail", make_bundle(fake_avoid_pool(), cfg, 0.1), cfg, 0, ArtifactStore())


# --------------------------------------------------------------------- CLI

def write_cfg(tmp_path, **matrix):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(tiny_config(**matrix)))
    return str(path)


def test_cli_pipeline_and_no_train(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    pool = str(tmp_path / "pool.jsonl")
    assert main(["gen-data", "--n-traj", "12", "--seed", "0", "--out", pool]) == 0
    wd = str(tmp_path / "w")
    assert main(["evaluate", "--config", cfg, "--workdir", wd, "--bundle", pool, "--method", "dd", "--level", "0.1",
                 "--seeds", "0", "--no-train"]) == 2
    assert "missing checkpoint" in capsys.readouterr().err
    assert main(["train-planner", "--config", cfg, "--workdir", wd, "--bundle", pool, "--seeds", "0"]) == 0
    assert main(["train-controller", "--config", cfg, "--workdir", wd, "--bundle", pool, "--method", "dd",
                 "--level", "0.1", "--seeds", "0"]) == 0
    out = tmp_path / "eval.csv"
    assert main(["evaluate", "--config", cfg, "--workdir", wd, "--bundle", pool, "--method", "dd", "--level", "0.1",
                 "--seeds", "0", "--no-train", "--out", str(out)]) == 0
    assert out.read_text().splitlines()[1].startswith("dd,0.1,1,0,")
    assert len(read_records(tmp_path / "eval_records.jsonl")) == 2
    capsys.readouterr()
    cond = json.dumps({"history": [[0.0, 0.5], [0.0, 0.5]], "current": [0.0, 0.5]})
    ckpt = str(tmp_path / "w" / "ckpt" / "planner_o1_s0")
    assert main(["sample-plan", "--checkpoint", ckpt, "--conditioning", cond, "--seed", "3", "--horizon", "12"]) == 0
    plan = json.loads(capsys.readouterr().out)["plan"]
    assert len(plan) == 13 and plan[0] == [0.0, 0.5]
    assert main(["sample-plan", "--checkpoint", ckpt, "--conditioning", cond, "--horizon", "5"]) == 2


def test_cli_bad_config_exits_cleanly(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["run-matrix", "--config", str(bad), "--workdir", str(tmp_path / "w")]) == 2
    assert "error" in capsys.readouterr().err


def test_cli_run_matrix_is_byte_identical(tmp_path):
    cfg = write_cfg(tmp_path, methods=["koap"], levels=[0.1], seeds=[0, 1])
    assert main(["run-matrix", "--config", cfg, "--workdir", str(tmp_path / "a")]) == 0
    assert main(["run-matrix", "--config", cfg, "--workdir", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes() and a.count(b"\n") == 3
