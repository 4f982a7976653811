"""Residual Q-functions: composing a frozen base policy with a learned
correction to obtain the soft-optimal policy of ``lambda * r1 + r2``.

With ``alpha_0 = lambda * alpha_1`` the residual ``Qhat = Qtilde - lambda * Q1``
satisfies its own soft Bellman equation in which ``alpha_0 * log pi1`` plays
the role of an extra reward on the successor's actions. Only ``pi1`` and
``alpha_0`` are needed; ``r1`` and ``alpha_1`` never appear.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .mdp import Mdp, RewardTable, StateIndex, enumerate_states
from .soft_rl import (
    DEFAULT_MAX_ITERS,
    DEFAULT_TOL,
    Policy,
    _certify,
    _iterate,
    backward_induction,
    lse,
    softmax,
)

LOG_FLOOR = -80.0


@dataclass(frozen=True, eq=False)
class ResidualQ:
    table: np.ndarray
    alpha_tilde: float
    alpha_0: float

    def __post_init__(self):
        t = np.array(self.table, dtype=np.float64)
        if t.ndim != 2 or not np.all(np.isfinite(t)):
            raise DomainError("residual Q table must be a finite 2-D array")
        if not self.alpha_tilde > 0:
            raise DomainError(f"alpha_tilde must be positive, got {self.alpha_tilde}")
        if not self.alpha_0 >= 0:
            raise DomainError(f"alpha_0 must be non-negative, got {self.alpha_0}")
        t.setflags(write=False)
        object.__setattr__(self, "table", t)
        object.__setattr__(self, "alpha_tilde", float(self.alpha_tilde))
        object.__setattr__(self, "alpha_0", float(self.alpha_0))


class LogPolicy:
    """``log pi1`` with zero-probability handling.

    With ``clamp=False`` a zero probability on a live row raises
    ``DomainError``; with ``clamp=True`` it is replaced by ``LOG_FLOOR`` and
    counted in ``clamped``.
    """

    def __init__(self, pi1: Policy, alpha_0: float, live=None, clamp: bool = False):
        p = pi1.table
        zero = p <= 0
        if live is not None:
            zero &= live[:, None]
        self.clamped = 0
        if alpha_0 > 0 and zero.any():
            if not clamp:
                s, a = map(int, np.argwhere(zero)[0])
                raise DomainError(f"pi1 has zero probability at state {s}, action {a} while alpha_0 > 0")
            self.clamped = int(zero.sum())
        with np.errstate(divide="ignore"):
            logp = np.log(p)
        self.values = np.maximum(logp, LOG_FLOOR)


def _augmented_logits(table: np.ndarray, logp: np.ndarray, alpha_0: float) -> np.ndarray:
    if alpha_0 == 0:
        return table
    return table + alpha_0 * logp


def residual_values(table, index: StateIndex, logp, alpha_tilde, alpha_0):
    """``alpha_tilde * logsumexp((Q + alpha_0 log pi1) / alpha_tilde)``, 0 on terminal states."""
    v = alpha_tilde * lse(_augmented_logits(table, logp, alpha_0) / alpha_tilde, axis=1)
    return np.where(index.terminal, 0.0, v)


def _backup(table, index, r2, logp, alpha_tilde, alpha_0):
    V = residual_values(table, index, logp, alpha_tilde, alpha_0)
    out = np.zeros(index.shape)
    nt = index.nonterminal
    out[nt] = r2[nt] + index.mdp.gamma * V[index.children[nt]]
    return out


def residual_backup(Q: ResidualQ, mdp: Mdp, r2: RewardTable, pi1: Policy, clamp: bool = False) -> ResidualQ:
    index = enumerate_states(mdp)
    logp = LogPolicy(pi1, Q.alpha_0, index.nonterminal, clamp).values
    out = _backup(Q.table, index, np.asarray(r2.values), logp, Q.alpha_tilde, Q.alpha_0)
    return ResidualQ(out, Q.alpha_tilde, Q.alpha_0)


def residual_q_iteration(
    mdp: Mdp,
    r2: RewardTable,
    pi1: Policy,
    alpha_tilde: float,
    alpha_0: float,
    tol: float = DEFAULT_TOL,
    max_iters: int = DEFAULT_MAX_ITERS,
    mode: str = "exact",
    clamp: bool = False,
) -> ResidualQ:
    """Fixed point of the residual Bellman update for downstream reward ``r2``."""
    if not alpha_tilde > 0 or alpha_0 < 0:
        raise DomainError(f"need alpha_tilde > 0 and alpha_0 >= 0, got {alpha_tilde}, {alpha_0}")
    index = enumerate_states(mdp)
    logp = LogPolicy(pi1, alpha_0, index.nonterminal, clamp).values
    r2v = np.asarray(r2.values)

    def backup(Q):
        return _backup(Q, index, r2v, logp, alpha_tilde, alpha_0)

    if mode == "exact":

        def value_fn(rows, ids):
            return alpha_tilde * lse(_augmented_logits(rows, logp[ids], alpha_0) / alpha_tilde, axis=1)

        Q = backward_induction(index, r2v, value_fn)
        _certify(Q, backup, tol, "residual Q-iteration")
    elif mode == "iterative":
        Q = _iterate(backup, index.shape, tol, max_iters, "residual Q-iteration")
    else:
        raise DomainError(f"unknown mode {mode!r}")
    return ResidualQ(Q, alpha_tilde, alpha_0)


def compose_policy(pi1: Policy, Qhat: ResidualQ, clamp: bool = False) -> Policy:
    """Row-wise ``softmax((alpha_0 log pi1 + Qhat) / alpha_tilde)``."""
    logp = LogPolicy(pi1, Qhat.alpha_0, clamp=clamp).values
    logits = _augmented_logits(Qhat.table, logp, Qhat.alpha_0) / Qhat.alpha_tilde
    return Policy(softmax(logits, axis=1))


def reward_from_residual_q(Q: ResidualQ, mdp: Mdp, pi1: Policy, clamp: bool = False) -> RewardTable:
    """Downstream reward for which ``Q`` is the residual fixed point.

    Inverse of ``residual_q_iteration``: ``Q(s, a) - gamma * V(s')`` with the
    successor term 0 when ``s'`` is terminal. Terminal rows are zero.
    """
    index = enumerate_states(mdp)
    logp = LogPolicy(pi1, Q.alpha_0, index.nonterminal, clamp).values
    V = residual_values(Q.table, index, logp, Q.alpha_tilde, Q.alpha_0)
    out = np.zeros(index.shape)
    nt = index.nonterminal
    out[nt] = Q.table[nt] - index.mdp.gamma * V[index.children[nt]]
    return RewardTable(out)
