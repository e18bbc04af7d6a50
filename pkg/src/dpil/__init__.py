"""Diffusion-purified imitation learning on toy continuous-control tasks."""

from .config import ConfigError, RunConfig, emit_config, parse_config, validate_config
from .demos import DemoSet, collect_demos, filter_denoise, load_demos, mix_demosets, save_demos, wrap_noisy
from .diffusion import (Denoiser, DenoiserTrainConfig, PurifyConfig, forward_diffuse, make_schedule, purify,
                        purify_dataset, reverse_denoise, train_denoiser)
from .envs import PointReach, evaluate_policy, make_env, optimal_policy, point_reach_env, rollout
from .evaluation import divergence_decay_curve, mmd, t_star_sweep, tv_bound, welch_t_test, zeta
from .harness import EvalReport, StageError, emit_report, run_pipeline
from .imitation import BCConfig, GailConfig, GaussianPolicy, bc_train, gail_train

__version__ = "0.1.0"
