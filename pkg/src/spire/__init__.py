"""Planner-gated hierarchical policy learning at desk scale.

A symbolic planner splits long-horizon tasks into scripted segments and
learned handoff sections.  Handoff policies are trained by behavioral
cloning from a scripted expert, finetuned with KL-regularised sparse-reward
actor-critic, and fed by a multi-worker scheduler.
"""

from . import core, envs, finetune, harness, imitation, planner, policies, scheduler
from .core import SectionSpec, TaskSpec, Transition, discounted_return, is_goal, section_reward
from .envs import GridChain, PointChain, ScriptedExpert, SyntheticChain, make_env
from .errors import SpireError
from .finetune import FinetuneConfig, gail_discriminator_oracle, kl_divergence, run_finetuning, warmstart
from .harness import ExperimentConfig, evaluate_policy, run_ablation_suite
from .imitation import BCConfig, DemoDataset, collect_demos, train_bc
from .planner import oracle_rollout, plan, run_spire, verify_planner_validity
from .scheduler import Permissive, Scheduler, Sequential, measure_throughput, predict_throughput

__version__ = "0.1.0"
