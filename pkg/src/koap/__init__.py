"""Plan-then-control imitation learning with Koopman latent actions.

A diffusion planner proposes future states from action-free
demonstrations; an inverse-dynamics controller whose latent actions obey
linear lifted dynamics turns those plans into actions, with an affine
decoder as the only part that needs action labels.
"""

from .data import Normalizer, StateWindow, Trajectory, WindowBatch, make_windows, read_jsonl, write_jsonl
from .envs import AvoidConfig, AvoidEnv, EnvSpec, LtiSystem, dmdc_fit, expert_rollout, lti_generate
from .koopman import KoapModel, TrainConfig, infer_actions, train_koap
from .numerics import ConfigError, NumericalError, WindowError
from .planner import PlannerConfig, PlannerModel, sample_plan, train_planner

__version__ = "0.1.0"
