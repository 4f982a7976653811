"""Acceptance criteria A1-A8.

Each test prints one ``A<n> PASS|FAIL`` line with the measured quantities
before asserting, so ``pytest -s`` (the configured default) shows the full
scorecard. Run this file directly for the scorecard without pytest.
"""

import hashlib
import io
import itertools
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from conftest import central_diff, max_rel_err, tv
from qadapter.cli import main as cli_main
from qadapter.errors import ParseError
from qadapter.eval_harness import optimal_return
from qadapter.mdp import Mdp, RewardTable, enumerate_states
from qadapter.preference_data import (
    encode_batch,
    epsilon_mixture,
    exhaustive_dataset,
    generate_dataset,
    load_dataset,
    reward_model_loss,
    save_dataset,
)
from qadapter.residual_q import ResidualQ, compose_policy, residual_q_iteration, reward_from_residual_q
from qadapter.soft_rl import Policy, policy_from_q, policy_return, soft_q_iteration
from qadapter.tasks import make_task, standard_task
from qadapter.trainer import TrainConfig, dpo_loss, log_softmax, qadapter_loss, sft_loss, train_dpo, train_qadapter, train_sft

SWEEP_GRID = [0.005, 0.05, 0.1, 0.5, 1.0]
SEEDS = (0, 1, 2)


def verdict(name, ok, detail):
    print(f"{name} {'PASS' if ok else 'FAIL'}  {detail}")
    return ok


# --- A1 / A2 ---------------------------------------------------------------


def random_instances(n=50, seed=2024):
    """Draw ``n`` instances from the criterion's parameter grid."""
    rng = np.random.default_rng(seed)
    grid = list(itertools.product([2, 3, 4], [2, 3], [0.0, 0.9, 1.0], [0.1, 0.3], [0.1, 0.5], [0.5, 1.0, 2.0]))
    picks = rng.choice(len(grid), size=n, replace=False)
    for k in picks:
        vocab, horizon, gamma, alpha_1, alpha_tilde, lam = grid[k]
        mdp = Mdp.make(vocab, horizon, gamma)
        index = enumerate_states(mdp)
        r1 = RewardTable.uniform(index, rng)
        r2 = RewardTable.uniform(index, rng)
        yield mdp, index, r1, r2, alpha_1, alpha_tilde, lam


def solve_instance(mdp, index, r1, r2, alpha_1, alpha_tilde, lam):
    Q1 = soft_q_iteration(mdp, r1, alpha_1)
    pi1 = policy_from_q(Q1)
    Qhat = residual_q_iteration(mdp, r2, pi1, alpha_tilde, lam * alpha_1)
    Qt = soft_q_iteration(mdp, lam * r1 + r2, alpha_tilde)
    return Q1, pi1, Qhat, Qt


def test_a1_composition_matches_combined_reward_oracle():
    t0 = time.perf_counter()
    worst = 0.0
    for mdp, index, r1, r2, a1, at, lam in random_instances():
        _, pi1, Qhat, Qt = solve_instance(mdp, index, r1, r2, a1, at, lam)
        worst = max(worst, tv(compose_policy(pi1, Qhat).table, policy_from_q(Qt, at).table, index.nonterminal))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-8 and elapsed < 10
    verdict("A1", ok, f"max per-state TV {worst:.2e} (<= 1e-8) over 50 instances in {elapsed:.2f}s (< 10s)")
    assert ok


def test_a2_reward_round_trip():
    worst_r, worst_q = 0.0, 0.0
    for mdp, index, r1, r2, a1, at, lam in random_instances():
        Q1, pi1, Qhat, Qt = solve_instance(mdp, index, r1, r2, a1, at, lam)
        worst_r = max(worst_r, np.abs(reward_from_residual_q(Qhat, mdp, pi1).values - r2.values).max())
        worst_q = max(worst_q, np.abs(Qhat.table - (Qt.table - lam * Q1.table)).max())
    ok = worst_r <= 1e-8 and worst_q <= 1e-8
    verdict("A2", ok, f"max |T(Qhat) - r2| {worst_r:.2e}, max |Qhat - (Qtilde - lambda Q1)| {worst_q:.2e} (<= 1e-8)")
    assert ok


# --- A3 --------------------------------------------------------------------


def test_a3_reductions():
    rng = np.random.default_rng(3)
    err_soft, err_id, err_pi = 0.0, 0.0, 0.0
    for vocab, horizon in [(2, 2), (3, 3), (4, 2)]:
        for gamma in (0.9, 1.0):
            mdp = Mdp.make(vocab, horizon, gamma)
            index = enumerate_states(mdp)
            r2 = RewardTable.uniform(index, rng)
            pi1 = Policy(rng.dirichlet(np.ones(vocab), size=index.num_states))
            at = 0.3
            Qhat = residual_q_iteration(mdp, r2, pi1, at, 0.0)
            err_soft = max(err_soft, np.abs(Qhat.table - soft_q_iteration(mdp, r2, at).table).max())
            same = compose_policy(pi1, ResidualQ(np.zeros(index.shape), at, at))
            err_pi = max(err_pi, tv(same.table, pi1.table))
        mdp0 = Mdp.make(vocab, horizon, 0.0)
        index0 = enumerate_states(mdp0)
        q = rng.normal(size=index0.shape)
        q[index0.terminal] = 0.0
        pi1 = Policy(rng.dirichlet(np.ones(vocab), size=index0.num_states))
        err_id = max(err_id, np.abs(reward_from_residual_q(ResidualQ(q, 0.2, 0.5), mdp0, pi1).values - q).max())
    ok = err_soft <= 1e-9 and err_id == 0.0 and err_pi <= 1e-12
    verdict("A3", ok, f"alpha_0=0 vs soft Q {err_soft:.2e} (<= 1e-9); gamma=0 T vs identity {err_id:.2e}; "
                      f"Qhat=0, alpha_0=alpha_tilde TV to pi1 {err_pi:.2e} (<= 1e-12)")
    assert ok


# --- A4 --------------------------------------------------------------------


def test_a4_gradient_checks():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    mdp = Mdp.make(3, 3, 0.9, eos=2)
    index = enumerate_states(mdp)
    pi1 = policy_from_q(soft_q_iteration(mdp, RewardTable.uniform(index, rng), 0.3))
    ref = log_softmax(rng.normal(size=index.shape))
    cfg = TrainConfig(alpha_tilde=0.3, alpha_0=0.5, beta=0.5, gamma=0.9)
    losses = {
        "qadapter": lambda x, b: qadapter_loss(x, b, mdp, pi1, cfg),
        "reward_model": lambda x, b: reward_model_loss(x, b, mdp),
        "sft": lambda x, b: sft_loss(x, b, mdp),
        "dpo": lambda x, b: dpo_loss(x, b, mdp, ref, 0.5),
    }
    worst = {k: 0.0 for k in losses}
    for trial in range(10):
        ds = generate_dataset(mdp, RewardTable.uniform(index, rng), Policy.uniform(index.shape), 4, "stochastic", trial)
        enc = encode_batch(ds.pairs, mdp)
        for name, fn in losses.items():
            x = rng.normal(size=index.shape)
            _, g = fn(x, enc)
            num = central_diff(lambda y: fn(y, enc)[0], x, h=1e-5)
            worst[name] = max(worst[name], max_rel_err(g, num))
    elapsed = time.perf_counter() - t0
    ok = all(v <= 1e-4 for v in worst.values()) and elapsed < 30
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict("A4", ok, f"max rel. error {detail} (<= 1e-4) on 10 batches each in {elapsed:.1f}s (< 30s)")
    assert ok


# --- A5 / A6 ---------------------------------------------------------------


@pytest.fixture(scope="module")
def task():
    return standard_task()


def per_seed_dataset(task, seed):
    return generate_dataset(task.mdp, task.r2, epsilon_mixture(task.pi1), 5000, "stochastic", seed)


def test_a5_learning_without_forgetting(task):
    t0 = time.perf_counter()
    m = task.mdp
    ret = lambda pi, r: policy_return(m, pi, r)
    base_r2 = ret(task.pi1, task.r2)
    oracle_r2 = optimal_return(m, task.r2)
    qa, sft, dpo = [], [], []
    for seed in SEEDS:
        ds = per_seed_dataset(task, seed)
        cfg = TrainConfig(seed=seed)
        q, _ = train_qadapter(ds, m, task.pi1, cfg)
        pi = compose_policy(task.pi1, q.as_residual_q())
        qa.append((ret(pi, task.r1), ret(pi, task.r2)))
        sft.append(ret(train_sft(ds, m, cfg, init=task.pi1), task.r1))
        dpo.append(ret(train_dpo(ds, m, task.pi1, cfg.beta_dpo, cfg), task.r1))
    qa_r1, qa_r2 = np.mean(qa, axis=0)
    target = base_r2 + 0.1 * (oracle_r2 - base_r2)
    elapsed = time.perf_counter() - t0
    ok_i = qa_r2 >= target
    ok_ii = qa_r1 >= np.mean(sft) and qa_r1 >= np.mean(dpo)
    ok = ok_i and ok_ii and elapsed < 300
    verdict("A5", ok, f"(i) qadapter return_r2 {qa_r2:.4f} >= {target:.4f} (pi1 {base_r2:.4f}, oracle {oracle_r2:.4f}); "
                      f"(ii) qadapter return_r1 {qa_r1:.4f} vs sft {np.mean(sft):.4f}, dpo {np.mean(dpo):.4f}; "
                      f"{elapsed:.1f}s (< 300s)")
    assert ok


def test_a6_alpha_trade_off_trend(task):
    m = task.mdp
    rows = {a: [] for a in SWEEP_GRID}
    for seed in SEEDS:
        ds = per_seed_dataset(task, seed)
        for a0 in SWEEP_GRID:
            q, _ = train_qadapter(ds, m, task.pi1, TrainConfig(seed=seed, alpha_0=a0))
            pi = compose_policy(task.pi1, q.as_residual_q())
            rows[a0].append((policy_return(m, pi, task.r1), policy_return(m, pi, task.r2)))
    r1 = [np.mean(rows[a], axis=0)[0] for a in SWEEP_GRID]
    r2 = [np.mean(rows[a], axis=0)[1] for a in SWEEP_GRID]
    rho1 = spearmanr(SWEEP_GRID, r1).statistic
    rho2 = spearmanr(SWEEP_GRID, r2).statistic
    extremes = int(np.argmax(r1)) == len(SWEEP_GRID) - 1 and int(np.argmin(r2)) == len(SWEEP_GRID) - 1
    ok = rho1 >= 0.8 and rho2 <= -0.8 and extremes
    table = "; ".join(f"a0={a:g}: r1 {x:.4f} r2 {y:.4f}" for a, x, y in zip(SWEEP_GRID, r1, r2))
    verdict("A6", ok, f"spearman(alpha_0, r1) {rho1:+.2f} (>= +0.8), spearman(alpha_0, r2) {rho2:+.2f} (<= -0.8), "
                      f"largest alpha_0 is r1-max and r2-min: {extremes} [{table}]")
    assert ok


# --- A7 --------------------------------------------------------------------


def test_a7_trained_matches_exact():
    worst = 0.0
    for gamma in (0.99, 1.0):
        mdp = Mdp.make(2, 2, gamma)
        for seed in SEEDS:
            t = make_task(mdp, seed, alpha_1=0.3)
            at, lam = 0.1, 1.0
            oracle = policy_from_q(soft_q_iteration(mdp, lam * t.r1 + t.r2, at), at)
            ds = exhaustive_dataset(mdp, t.r2, copies=100)
            cfg = TrainConfig(alpha_tilde=at, alpha_0=lam * t.alpha_1, beta=1e-4, gamma=gamma, learning_rate=0.05,
                              epochs=1000, batch_size=len(ds), normalize_by_length=False)
            q, _ = train_qadapter(ds, mdp, t.pi1, cfg)
            pi = compose_policy(t.pi1, q.as_residual_q())
            worst = max(worst, tv(pi.table, oracle.table, t.index.nonterminal))
    ok = worst <= 0.05
    verdict("A7", ok, f"max per-state TV trained vs exact {worst:.4f} (<= 0.05) on |V|=2, T=2, 6 instances")
    assert ok


# --- A8 --------------------------------------------------------------------

A8_CONFIG = """\
[mdp]
vocab_size = 2
horizon = 2
gamma = 0.99

[data]
n_pairs = 300

[train]
learning_rate = 0.05
epochs = 3
batch_size = 100

[eval]
n_matches = 500
"""


def test_a8_determinism_and_formats(tmp_path, monkeypatch):
    monkeypatch.delenv("QADAPTER_ARTIFACTS", raising=False)
    cfg = tmp_path / "a8.ini"
    cfg.write_text(A8_CONFIG)
    art = tmp_path / "artifacts"

    def snapshot():
        return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(art.iterdir())}

    codes = [cli_main(["run", str(cfg)], out=io.StringIO())]
    first = snapshot()
    codes.append(cli_main(["run", str(cfg)], out=io.StringIO()))
    identical = snapshot() == first and codes == [0, 0]

    mdp = Mdp.make(2, 2, 0.99)
    ds = load_dataset(art / "prefs.tsv", mdp)
    save_dataset(ds, mdp, tmp_path / "copy.tsv")
    back = load_dataset(tmp_path / "copy.tsv", mdp)
    round_trip = back.pairs == ds.pairs and back.meta == ds.meta
    round_trip &= (tmp_path / "copy.tsv").read_bytes() == (art / "prefs.tsv").read_bytes()

    lines = (tmp_path / "copy.tsv").read_text().split("\n")
    lines[6] = lines[6].replace("rejected=", "rejected=x")
    (tmp_path / "bad.tsv").write_text("\n".join(lines))
    try:
        load_dataset(tmp_path / "bad.tsv", mdp)
        reported = None
    except ParseError as exc:
        reported = exc.line
    ok = identical and round_trip and reported == 7
    verdict("A8", ok, f"{len(first)} artifacts byte-identical on re-run: {identical}; dataset round trip: {round_trip}; "
                      f"corrupted line 7 reported as line {reported}")
    assert ok


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-s"]))
