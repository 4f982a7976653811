"""Exact evaluation of adapted policies: retention of the base reward,
gain on the downstream reward, divergence from the base policy, and
hidden-reward win rates.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from .mdp import Mdp, RewardTable, StateIndex, enumerate_states
from .residual_q import compose_policy
from .soft_rl import Policy, backward_induction, policy_return, state_visitation
from .trainer import TrainConfig, train_qadapter

JUDGE = "hidden_reward"
TREND_THRESHOLD = 0.8


@dataclass
class EvalReport:
    method: str
    return_r1: float
    return_r2: float
    entropy_return: float
    mean_kl_to_base: float
    win_rate_vs_base_r1: float
    win_rate_vs_base_r2: float
    n_matches: int
    seed: int
    judge: str = JUDGE
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def rollouts(index: StateIndex, pi: Policy, starts: np.ndarray, rng: np.random.Generator):
    """Sample one episode from each start state, all in lockstep.

    Returns ``(states, actions, mask)`` of shape ``(n, horizon)``; ``mask``
    is 1 on steps actually taken.
    """
    n, horizon = len(starts), index.mdp.horizon
    states = np.zeros((n, horizon), dtype=np.int64)
    actions = np.zeros((n, horizon), dtype=np.int64)
    mask = np.zeros((n, horizon))
    s = np.asarray(starts, dtype=np.int64).copy()
    cdf = np.cumsum(pi.table, axis=1)
    for t in range(horizon):
        live = ~index.terminal[s]
        u = rng.random(n) * cdf[s, -1]
        a = (cdf[s] <= u[:, None]).sum(axis=1)
        a = np.minimum(a, index.vocab_size - 1)
        states[:, t] = s
        actions[:, t] = a
        mask[:, t] = live
        s = np.where(live, index.children[s, a], s)
    return states, actions, mask


def sample_prompts(index: StateIndex, n: int, rng: np.random.Generator) -> np.ndarray:
    cum = np.cumsum(index.prompt_probs)
    k = np.searchsorted(cum, rng.random(n) * cum[-1], side="right")
    return np.minimum(k, len(cum) - 1)


def sample_win_rate(pi_a: Policy, pi_b: Policy, mdp: Mdp, r: RewardTable, n_matches: int, seed: int) -> float:
    """Fraction of prompt-matched response pairs where ``pi_a`` scores higher under ``r``; ties count half."""
    if n_matches < 1:
        raise ValueError(f"n_matches must be >= 1, got {n_matches}")
    index = enumerate_states(mdp)
    rng = np.random.default_rng(seed)
    prompts = sample_prompts(index, n_matches, rng)
    rv = r.values
    scores = []
    for pi in (pi_a, pi_b):
        s, a, m = rollouts(index, pi, prompts, rng)
        scores.append(np.sum(rv[s, a] * m, axis=1))
    wins = (scores[0] > scores[1]) + 0.5 * (scores[0] == scores[1])
    return float(np.mean(wins))


def mean_kl_to_base(mdp: Mdp, pi: Policy, pi1: Policy) -> float:
    """Visitation-weighted ``E_s KL(pi(.|s) || pi1(.|s))`` over non-terminal states reached by ``pi``."""
    index = enumerate_states(mdp)
    d = state_visitation(mdp, pi) * index.nonterminal
    p, q = pi.table, pi1.table
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    kl = terms.sum(axis=1)
    live = d > 0
    return float(max(0.0, np.dot(d[live], kl[live]) / d.sum()))


def optimal_return(mdp: Mdp, r: RewardTable) -> float:
    """Best achievable plain (entropy-free) return, by hard-max backward induction."""
    index = enumerate_states(mdp)
    Q = backward_induction(index, np.asarray(r.values), lambda rows, ids: rows.max(axis=1))
    n = len(mdp.prompts)
    return float(np.dot(index.prompt_probs, Q[:n].max(axis=1)))


def greedy_policy(mdp: Mdp, r: RewardTable) -> Policy:
    """Deterministic policy attaining ``optimal_return`` (lowest token id on ties)."""
    index = enumerate_states(mdp)
    Q = backward_induction(index, np.asarray(r.values), lambda rows, ids: rows.max(axis=1))
    table = np.zeros(index.shape)
    table[np.arange(index.num_states), Q.argmax(axis=1)] = 1.0
    table[index.terminal] = 1.0 / index.vocab_size
    return Policy(table)


def evaluate_policy(
    pi: Policy,
    mdp: Mdp,
    r1: RewardTable,
    r2: RewardTable,
    pi1: Policy,
    n_matches: int = 10_000,
    seed: int = 0,
    method: str = "policy",
    config: dict | None = None,
) -> EvalReport:
    zero = RewardTable.zeros(enumerate_states(mdp))
    return EvalReport(
        method=method,
        return_r1=policy_return(mdp, pi, r1),
        return_r2=policy_return(mdp, pi, r2),
        entropy_return=policy_return(mdp, pi, zero, entropy_weight=1.0),
        mean_kl_to_base=mean_kl_to_base(mdp, pi, pi1),
        win_rate_vs_base_r1=sample_win_rate(pi, pi1, mdp, r1, n_matches, seed),
        win_rate_vs_base_r2=sample_win_rate(pi, pi1, mdp, r2, n_matches, seed),
        n_matches=n_matches,
        seed=seed,
        config=dict(config or {}),
    )


def alpha_sweep(dataset, mdp: Mdp, pi1: Policy, r1: RewardTable, r2: RewardTable, alphas, cfg: TrainConfig,
                n_matches: int = 10_000, seed: int = 0):
    """Train and evaluate one adapter per ``alpha_0``; dataset and training seed are shared."""
    alphas = list(alphas)
    if not alphas or any(a < 0 for a in alphas):
        raise ValueError(f"alphas must be a non-empty list of non-negative values, got {alphas}")
    rows = []
    for a0 in alphas:
        run_cfg = cfg.replace(alpha_0=float(a0))
        q, _ = train_qadapter(dataset, mdp, pi1, run_cfg)
        pi = compose_policy(pi1, q.as_residual_q())
        rows.append((float(a0), evaluate_policy(pi, mdp, r1, r2, pi1, n_matches, seed,
                                                 method=f"qadapter[alpha_0={a0}]", config=run_cfg.to_dict())))
    return rows


def trend_summary(rows) -> dict:
    """Spearman rank correlation of ``alpha_0`` against each return."""
    a = [a0 for a0, _ in rows]
    out = {}
    for key in ("return_r1", "return_r2"):
        vals = [getattr(rep, key) for _, rep in rows]
        rho = spearmanr(a, vals).statistic if len(rows) > 1 else float("nan")
        out[f"spearman_{key}"] = float(rho)
    return out


def format_table(reports, key_name: str = "method") -> str:
    """Aligned plain-text table of reports (or ``(alpha_0, report)`` rows)."""
    cols = ["return_r1", "return_r2", "entropy_return", "mean_kl_to_base", "win_rate_vs_base_r1", "win_rate_vs_base_r2"]
    rows = []
    for item in reports:
        if isinstance(item, tuple):
            label, rep = f"{item[0]:g}", item[1]
        else:
            label, rep = item.method, item
        rows.append([label] + [f"{getattr(rep, c):.4f}" for c in cols])
    header = [key_name] + cols
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) if i == 0 else h.rjust(w) for i, (h, w) in enumerate(zip(header, widths)))]
    for r in rows:
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))))
    return "\n".join(lines) + "\n"
