"""Reference synthetic tasks used by the demos and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .eval_harness import greedy_policy
from .mdp import Mdp, RewardTable, StateIndex, enumerate_states
from .soft_rl import Policy, policy_from_q, soft_q_iteration


@dataclass(frozen=True, eq=False)
class Task:
    mdp: Mdp
    index: StateIndex
    r1: RewardTable
    r2: RewardTable
    alpha_1: float
    pi1: Policy
    reward_seed: int


def make_task(mdp: Mdp, reward_seed: int, alpha_1: float, low=-1.0, high=1.0) -> Task:
    index = enumerate_states(mdp)
    rng = np.random.default_rng(reward_seed)
    r1 = RewardTable.uniform(index, rng, low, high)
    r2 = RewardTable.uniform(index, rng, low, high)
    pi1 = policy_from_q(soft_q_iteration(mdp, r1, alpha_1))
    return Task(mdp, index, r1, r2, alpha_1, pi1, reward_seed)


def greedy_paths_differ(task: Task) -> bool:
    g1 = greedy_policy(task.mdp, task.r1)
    g2 = greedy_policy(task.mdp, task.r2)
    return any(g1.greedy_path(task.index, k) != g2.greedy_path(task.index, k) for k in range(len(task.mdp.prompts)))


def standard_task(vocab_size=4, horizon=4, gamma=0.99, alpha_1=0.3) -> Task:
    """One empty prompt, rewards U[-1, 1] from the first seed whose r1 and r2 greedy paths differ."""
    mdp = Mdp.make(vocab_size, horizon, gamma, [()])
    seed = 0
    while True:
        task = make_task(mdp, seed, alpha_1)
        if greedy_paths_differ(task):
            return task
        seed += 1
