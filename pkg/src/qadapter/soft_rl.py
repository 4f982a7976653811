"""Maximum-entropy RL on the enumerated token tree.

Everything here is exact: the state tree is finite and loop-free, so the
soft-optimal Q-function is obtained by one backward sweep over depths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, DomainError
from .mdp import Mdp, RewardTable, StateIndex, enumerate_states

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITERS = 10_000
ROW_SUM_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class QFunction:
    table: np.ndarray
    alpha: float

    def __post_init__(self):
        t = np.array(self.table, dtype=np.float64)
        if t.ndim != 2 or not np.all(np.isfinite(t)):
            raise DomainError("Q table must be a finite 2-D array")
        if not self.alpha > 0:
            raise DomainError(f"alpha must be positive, got {self.alpha}")
        t.setflags(write=False)
        object.__setattr__(self, "table", t)


@dataclass(frozen=True, eq=False)
class Policy:
    """Row-stochastic ``(num_states, vocab_size)`` action distribution."""

    table: np.ndarray

    def __post_init__(self):
        t = np.array(self.table, dtype=np.float64)
        if t.ndim != 2:
            raise DomainError(f"policy table must be 2-D, got shape {t.shape}")
        if np.any(t < 0) or not np.all(np.isfinite(t)):
            raise DomainError("policy has negative or non-finite probabilities")
        err = np.abs(t.sum(axis=1) - 1.0)
        if t.shape[0] and err.max() > ROW_SUM_TOL:
            raise DomainError(f"policy row {int(err.argmax())} sums to {t[err.argmax()].sum()!r}")
        t.setflags(write=False)
        object.__setattr__(self, "table", t)

    @classmethod
    def uniform(cls, shape) -> "Policy":
        return cls(np.full(shape, 1.0 / shape[1]))

    def greedy_path(self, index: StateIndex, prompt_id: int = 0):
        """Argmax tokens from a prompt until a terminal state."""
        s, out = prompt_id, []
        while not index.terminal[s]:
            a = int(np.argmax(self.table[s]))
            out.append(a)
            s = int(index.children[s, a])
        return tuple(out)


def log_sum_exp(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise DomainError("log_sum_exp of an empty list")
    return float(lse(v, axis=-1))


def lse(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-shifted log-sum-exp along ``axis``."""
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def soft_value(Q: QFunction, s: int, alpha: float) -> float:
    return float(alpha * lse(Q.table[s] / alpha))


def soft_values(table: np.ndarray, index: StateIndex, alpha: float) -> np.ndarray:
    """``alpha * logsumexp(table / alpha)`` per state, 0 on terminal states."""
    v = alpha * lse(table / alpha, axis=1)
    return np.where(index.terminal, 0.0, v)


def _backup_table(index: StateIndex, r: np.ndarray, next_value: np.ndarray) -> np.ndarray:
    """``r + gamma * next_value[child]`` with terminal rows zeroed."""
    out = np.zeros(index.shape)
    nt = index.nonterminal
    out[nt] = r[nt] + index.mdp.gamma * next_value[index.children[nt]]
    return out


def soft_backup(Q: np.ndarray, index: StateIndex, r: np.ndarray, alpha: float) -> np.ndarray:
    """One synchronous soft Bellman sweep over every reachable pair."""
    return _backup_table(index, r, soft_values(Q, index, alpha))


def backward_induction(index: StateIndex, r: np.ndarray, value_fn) -> np.ndarray:
    """Exact fixed point of ``Q = r + gamma * value_fn(Q)[child]`` on the tree.

    ``value_fn(rows, ids)`` maps the Q rows of states ``ids`` to their state
    values; it is only called on non-terminal states.
    """
    gamma = index.mdp.gamma
    Q = np.zeros(index.shape)
    V = np.zeros(index.num_states)
    for lvl in reversed(index.levels):
        ids = np.arange(lvl.start, lvl.stop)
        ids = ids[~index.terminal[ids]]
        if ids.size == 0:
            continue
        Q[ids] = r[ids] + gamma * V[index.children[ids]]
        V[ids] = value_fn(Q[ids], ids)
    return Q


def _iterate(backup, shape, tol, max_iters, what):
    Q = np.zeros(shape)
    for _ in range(max_iters):
        new = backup(Q)
        residual = float(np.max(np.abs(new - Q))) if new.size else 0.0
        Q = new
        if residual <= tol:
            return Q
    raise ConvergenceError(f"{what} did not converge in {max_iters} iterations (residual {residual:.3e})", residual)


def _certify(Q, backup, tol, what):
    residual = float(np.max(np.abs(backup(Q) - Q))) if Q.size else 0.0
    if residual > tol:
        raise ConvergenceError(f"{what} fixed point has Bellman residual {residual:.3e} > {tol:.1e}", residual)
    return residual


def soft_q_iteration(
    mdp: Mdp,
    r: RewardTable,
    alpha: float,
    tol: float = DEFAULT_TOL,
    max_iters: int = DEFAULT_MAX_ITERS,
    mode: str = "exact",
) -> QFunction:
    """Soft-optimal Q-function for reward ``r`` at entropy weight ``alpha``.

    ``mode="exact"`` solves by backward induction and certifies the result
    with one extra backup; ``mode="iterative"`` repeats the backup from
    ``Q = 0`` until successive iterates differ by at most ``tol``.
    """
    if not alpha > 0:
        raise DomainError(f"alpha must be positive, got {alpha}")
    index = enumerate_states(mdp)
    rv = np.asarray(r.values)
    backup = lambda Q: soft_backup(Q, index, rv, alpha)  # noqa: E731
    if mode == "exact":
        Q = backward_induction(index, rv, lambda rows, ids: alpha * lse(rows / alpha, axis=1))
        _certify(Q, backup, tol, "soft Q-iteration")
    elif mode == "iterative":
        Q = _iterate(backup, index.shape, tol, max_iters, "soft Q-iteration")
    else:
        raise DomainError(f"unknown mode {mode!r}")
    return QFunction(Q, alpha)


def bellman_residual(mdp: Mdp, Q: QFunction, r: RewardTable) -> float:
    index = enumerate_states(mdp)
    new = soft_backup(Q.table, index, np.asarray(r.values), Q.alpha)
    return float(np.max(np.abs(new - Q.table)))


def policy_from_q(Q: QFunction, alpha: float | None = None) -> Policy:
    alpha = Q.alpha if alpha is None else alpha
    return Policy(softmax(Q.table / alpha, axis=1))


def policy_return(mdp: Mdp, pi: Policy, r: RewardTable, entropy_weight: float = 0.0) -> float:
    """Exact expected discounted return, optionally entropy-augmented."""
    index = enumerate_states(mdp)
    p = pi.table
    # zero-probability actions get weight 0 in value_fn; keep their log finite
    step_gain = np.asarray(r.values) - entropy_weight * np.log(np.where(p > 0, p, 1.0))

    def value_fn(rows, ids):
        return np.sum(p[ids] * rows, axis=1)

    Q = backward_induction(index, step_gain, value_fn)
    V = np.sum(p * Q, axis=1)
    n = len(mdp.prompts)
    return float(np.dot(index.prompt_probs, V[:n]))


def kl_regularized_reward(r: RewardTable, pi_ref: Policy, alpha: float, index: StateIndex | None = None) -> RewardTable:
    """``r + alpha * log pi_ref`` on every reachable pair.

    Without ``index`` all rows are treated as reachable.
    """
    rv = np.asarray(r.values)
    if alpha == 0:
        return RewardTable(rv.copy())
    live = np.ones(rv.shape[0], dtype=bool) if index is None else index.nonterminal
    ref = pi_ref.table
    bad = np.argwhere((ref <= 0) & live[:, None])
    if bad.size:
        s, a = map(int, bad[0])
        raise DomainError(f"reference policy has zero probability at state {s}, action {a}")
    out = np.zeros_like(rv)
    out[live] = rv[live] + alpha * np.log(ref[live])
    return RewardTable(out)


def state_visitation(mdp: Mdp, pi: Policy) -> np.ndarray:
    """Probability of reaching each state under ``pi`` from the prompt distribution."""
    index = enumerate_states(mdp)
    d = np.zeros(index.num_states)
    n = len(mdp.prompts)
    d[:n] = index.prompt_probs
    for lvl in index.levels:
        ids = np.arange(lvl.start, lvl.stop)
        ids = ids[~index.terminal[ids]]
        if ids.size:
            d[index.children[ids]] = d[ids, None] * pi.table[ids]
    return d
