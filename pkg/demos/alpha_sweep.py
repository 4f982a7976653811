"""Sweep the base-policy weight alpha_0 on the standard task.

The default schedule is the short reference one. Passing a larger
``--lr`` lets the adapter fit its residual, which changes how the two
returns move with alpha_0.
"""

import argparse

import numpy as np
from scipy.stats import spearmanr

from qadapter.eval_harness import optimal_return
from qadapter.preference_data import epsilon_mixture, generate_dataset
from qadapter.residual_q import compose_policy
from qadapter.soft_rl import policy_return
from qadapter.tasks import standard_task
from qadapter.trainer import TrainConfig, train_qadapter

GRID = [0.005, 0.05, 0.1, 0.5, 1.0]


def sweep(task, lr, epochs, seeds):
    m = task.mdp
    out = np.zeros((len(GRID), 2))
    for seed in seeds:
        ds = generate_dataset(m, task.r2, epsilon_mixture(task.pi1), 5000, "stochastic", seed)
        for i, a0 in enumerate(GRID):
            cfg = TrainConfig(seed=seed, alpha_0=a0, learning_rate=lr, epochs=epochs)
            q, _ = train_qadapter(ds, m, task.pi1, cfg)
            pi = compose_policy(task.pi1, q.as_residual_q())
            out[i] += policy_return(m, pi, task.r1), policy_return(m, pi, task.r2)
    return out / len(seeds)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--lr", type=float, nargs="+", default=[3e-4, 3e-2])
    parser.add_argument("--epochs", type=int, default=3)
    parser.add_argument("--seeds", type=int, default=3)
    args = parser.parse_args()

    task = standard_task()
    m = task.mdp
    print(f"base: r1 {policy_return(m, task.pi1, task.r1):.4f} r2 {policy_return(m, task.pi1, task.r2):.4f}; "
          f"oracle r2 {optimal_return(m, task.r2):.4f}")
    for lr in args.lr:
        res = sweep(task, lr, args.epochs, range(args.seeds))
        print(f"\nlearning_rate={lr:g}")
        print(f"{'alpha_0':>8} {'return_r1':>10} {'return_r2':>10}")
        for a0, (x, y) in zip(GRID, res):
            print(f"{a0:>8g} {x:>10.4f} {y:>10.4f}")
        print(f"spearman r1 {spearmanr(GRID, res[:, 0]).statistic:+.2f}  "
              f"r2 {spearmanr(GRID, res[:, 1]).statistic:+.2f}")


if __name__ == "__main__":
    main()
