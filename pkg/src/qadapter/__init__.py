"""Residual Q-learning for adapting a frozen soft-optimal policy to new
preferences, on exactly solvable token-level MDPs."""

from .errors import (
    CapacityError,
    ConfigError,
    ConvergenceError,
    DivergenceError,
    DomainError,
    ParseError,
    QAdapterError,
)
from .eval_harness import EvalReport, alpha_sweep, evaluate_policy, mean_kl_to_base, optimal_return, sample_win_rate
from .mdp import Mdp, RewardTable, StateIndex, Vocab, enumerate_states
from .preference_data import (
    Mode,
    PreferenceDataset,
    PreferencePair,
    bt_probability,
    epsilon_mixture,
    generate_dataset,
    load_dataset,
    save_dataset,
)
from .residual_q import ResidualQ, compose_policy, residual_backup, residual_q_iteration, reward_from_residual_q
from .soft_rl import Policy, QFunction, policy_from_q, policy_return, soft_backup, soft_q_iteration
from .trainer import ParamQ, TrainConfig, TrainReport, qadapter_loss, train_dpo, train_qadapter, train_rlhf_pipeline, train_sft

__version__ = "0.1.0"
