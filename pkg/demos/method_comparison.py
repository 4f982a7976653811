"""Train the adapter and the SFT, DPO and reward-model baselines on the
standard task, then print one evaluation row per method."""

import argparse

from qadapter.eval_harness import evaluate_policy, format_table, optimal_return
from qadapter.preference_data import epsilon_mixture, generate_dataset
from qadapter.residual_q import compose_policy
from qadapter.tasks import standard_task
from qadapter.trainer import TrainConfig, train_dpo, train_qadapter, train_rlhf_pipeline, train_sft


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--pairs", type=int, default=5000)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--n-matches", type=int, default=10_000)
    args = parser.parse_args()

    task = standard_task()
    m = task.mdp
    ds = generate_dataset(m, task.r2, epsilon_mixture(task.pi1), args.pairs, "stochastic", args.seed)
    cfg = TrainConfig(seed=args.seed)

    q, _ = train_qadapter(ds, m, task.pi1, cfg)
    policies = {
        "base": task.pi1,
        "qadapter": compose_policy(task.pi1, q.as_residual_q()),
        "sft": train_sft(ds, m, cfg, init=task.pi1),
        "dpo": train_dpo(ds, m, task.pi1, cfg.beta_dpo, cfg),
        "rlhf": train_rlhf_pipeline(ds, m, task.pi1, cfg.rlhf_alpha, cfg),
    }
    reports = [evaluate_policy(pi, m, task.r1, task.r2, task.pi1, args.n_matches, args.seed, method=name)
               for name, pi in policies.items()]
    print(format_table(reports))
    print(f"oracle return_r2: {optimal_return(m, task.r2):.4f}")


if __name__ == "__main__":
    main()
