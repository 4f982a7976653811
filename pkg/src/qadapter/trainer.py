"""Learning a residual Q-function from preference pairs, plus baselines.

All objectives are written against tabular ``(num_states, vocab_size)``
parameters with hand-derived gradients, and share one minibatch loop with
seeded per-epoch shuffling.
"""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.special import expit, log_expit

from .errors import ConfigError, DivergenceError, DomainError
from .mdp import Mdp, RewardTable, enumerate_states
from .preference_data import EncodedBatch, PreferenceDataset, encode_batch, reward_model_loss
from .residual_q import LogPolicy, ResidualQ, _augmented_logits, residual_values
from .soft_rl import Policy, kl_regularized_reward, policy_from_q, soft_q_iteration, softmax

DIVERGENCE_THRESHOLD = 1e3


@dataclass
class TrainConfig:
    """Training hyper-parameters; defaults follow the reference LLM setup.

    ``beta_dpo`` and ``rlhf_alpha`` are used only by the DPO and
    reward-model baselines.
    """

    alpha_tilde: float = 0.1
    alpha_0: float = 1.0
    beta: float = 0.1
    gamma: float = 0.99
    learning_rate: float = 3e-4
    batch_size: int = 512
    epochs: int = 3
    seed: int = 0
    normalize_by_length: bool = True
    psi_mode: str = "mean"
    optimizer: str = "adaptive_moments"
    weight_decay: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    beta_dpo: float = 0.1
    rlhf_alpha: float = 0.1

    def __post_init__(self):
        if not self.alpha_tilde > 0:
            raise ConfigError(f"alpha_tilde must be positive, got {self.alpha_tilde}")
        if self.alpha_0 < 0 or self.beta < 0:
            raise ConfigError("alpha_0 and beta must be non-negative")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not self.learning_rate > 0 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("learning_rate, batch_size and epochs must be positive")
        if self.psi_mode not in ("mean", "sum"):
            raise ConfigError(f"psi_mode must be 'mean' or 'sum', got {self.psi_mode!r}")
        if self.optimizer not in ("adaptive_moments", "sgd"):
            raise ConfigError(f"optimizer must be 'adaptive_moments' or 'sgd', got {self.optimizer!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> "TrainConfig":
        """Build from string values such as a config-file section; unknown keys are errors."""
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = set(values) - set(types)
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        kwargs = {}
        for key, raw in values.items():
            kind = types[key]
            try:
                if kind == "bool":
                    low = str(raw).strip().lower()
                    if low not in ("true", "false", "1", "0", "yes", "no"):
                        raise ValueError(raw)
                    kwargs[key] = low in ("true", "1", "yes")
                elif kind == "int":
                    kwargs[key] = int(raw)
                elif kind == "float":
                    kwargs[key] = float(raw)
                else:
                    kwargs[key] = str(raw).strip()
            except ValueError:
                raise ConfigError(f"bad value for train.{key}: {raw!r}") from None
        return cls(**kwargs)


@dataclass(eq=False)
class ParamQ:
    theta: np.ndarray
    alpha_tilde: float
    alpha_0: float

    def as_residual_q(self) -> ResidualQ:
        return ResidualQ(self.theta, self.alpha_tilde, self.alpha_0)


@dataclass
class TrainReport:
    method: str
    loss_trace: list[float]
    grad_norm_trace: list[float]
    epoch_losses: list[float]
    final_loss: float
    config: dict
    warnings: list[str] = field(default_factory=list)
    wall_clock: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        d = dataclasses.asdict(self)
        if not include_timing:
            d.pop("wall_clock")
        return d


class Adam:
    """Adaptive moment estimation with decoupled weight decay."""

    def __init__(self, shape, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr, self.beta1, self.beta2, self.eps, self.wd = lr, beta1, beta2, eps, weight_decay
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, params, grad):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        return params - self.lr * (mhat / (np.sqrt(vhat) + self.eps) + self.wd * params)


class SGD:
    def __init__(self, shape, lr, **_):
        self.lr = lr

    def step(self, params, grad):
        return params - self.lr * grad


def _make_optimizer(cfg: TrainConfig, shape):
    if cfg.optimizer == "sgd":
        return SGD(shape, cfg.learning_rate)
    return Adam(shape, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay)


def take(enc: EncodedBatch, idx) -> EncodedBatch:
    return EncodedBatch(**{f.name: getattr(enc, f.name)[idx] for f in dataclasses.fields(enc)})


def _fit(method, params, loss_fn, enc: EncodedBatch, cfg: TrainConfig, warnings=()):
    n = len(enc)
    bs = min(cfg.batch_size, n)
    warnings = list(warnings)
    if bs < cfg.batch_size:
        warnings.append(f"batch_size clamped from {cfg.batch_size} to dataset size {n}")
    opt = _make_optimizer(cfg, params.shape)
    rng = np.random.default_rng(cfg.seed)
    loss_trace, grad_norms, epoch_losses = [], [], []
    start = time.perf_counter()
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, bs):
            loss, grad = loss_fn(params, take(enc, order[lo : lo + bs]))
            loss_trace.append(loss)
            if not math.isfinite(loss) or loss > DIVERGENCE_THRESHOLD:
                raise DivergenceError(f"{method}: loss {loss} at step {len(loss_trace)}", loss_trace)
            grad_norms.append(float(np.linalg.norm(grad)))
            params = opt.step(params, grad)
            losses.append(loss)
        epoch_losses.append(float(np.mean(losses)))
    final_loss, _ = loss_fn(params, enc)
    report = TrainReport(
        method=method,
        loss_trace=loss_trace,
        grad_norm_trace=grad_norms,
        epoch_losses=epoch_losses,
        final_loss=float(final_loss),
        config=cfg.to_dict(),
        warnings=warnings,
        wall_clock=time.perf_counter() - start,
    )
    return params, report


def _encode(dataset, mdp) -> EncodedBatch:
    if isinstance(dataset, EncodedBatch):
        return dataset
    pairs = dataset.pairs if isinstance(dataset, PreferenceDataset) else list(dataset)
    if not pairs:
        raise DomainError("empty dataset")
    return encode_batch(pairs, mdp)


def _check_fingerprint(dataset, mdp: Mdp):
    meta = getattr(dataset, "meta", {}) or {}
    fp = meta.get("mdp")
    if fp is not None and fp != mdp.fingerprint():
        raise ConfigError(f"dataset was generated for mdp {fp}, not {mdp.fingerprint()}")


def _check_gamma(mdp: Mdp, cfg: TrainConfig):
    if mdp.gamma != cfg.gamma:
        raise ConfigError(f"train gamma {cfg.gamma} differs from mdp gamma {mdp.gamma}")


# --- Q-Adapter -------------------------------------------------------------


def _t_operator(theta, index, enc_side, logp, cfg):
    """Per-step recovered reward along one side of a batch, zero on padding."""
    states, actions, nxt, mask = enc_side
    V = residual_values(theta, index, logp, cfg.alpha_tilde, cfg.alpha_0)
    tq = (theta[states, actions] - index.mdp.gamma * V[nxt]) * mask
    return tq


def t_operator_on_trajectory(Q: ParamQ, mdp: Mdp, pi1: Policy, prompt, response) -> list[float]:
    """``(T Q)(s_t, a_t)`` for each step of ``response``, stopping at EOS."""
    index = enumerate_states(mdp)
    logp = LogPolicy(pi1, Q.alpha_0, index.nonterminal).values
    s, a, nx = index.path(prompt, response)
    V = residual_values(Q.theta, index, logp, Q.alpha_tilde, Q.alpha_0)
    return list(Q.theta[s, a] - mdp.gamma * V[nx])


def qadapter_loss(Q: ParamQ | np.ndarray, batch, mdp: Mdp, pi1: Policy, cfg: TrainConfig, logp=None):
    """Bradley-Terry loss on recovered rewards plus the squared-reward penalty.

    The preference margin uses the recovered rewards ``T Q``; with
    ``normalize_by_length`` it is divided by the horizon. ``psi_mode="mean"``
    averages squared recovered rewards over all real steps of the batch,
    ``"sum"`` sums them per pair and averages over pairs.

    Returns ``(loss, grad)`` with ``grad`` shaped like ``theta``.
    """
    _check_gamma(mdp, cfg)
    theta = np.asarray(getattr(Q, "theta", Q), dtype=np.float64)
    index = enumerate_states(mdp)
    enc = _encode(batch, mdp)
    if logp is None:
        logp = LogPolicy(pi1, cfg.alpha_0, index.nonterminal).values
    gamma = mdp.gamma
    w, l = enc.side("w"), enc.side("l")
    tq_w = _t_operator(theta, index, w, logp, cfg)
    tq_l = _t_operator(theta, index, l, logp, cfg)
    norm = mdp.horizon if cfg.normalize_by_length else 1.0
    delta = (tq_w.sum(axis=1) - tq_l.sum(axis=1)) / norm
    bad = ~np.isfinite(delta)
    if bad.any():
        raise DivergenceError(f"non-finite preference margin at pair {int(np.argmax(bad))}")
    n = len(delta)
    bt = -float(np.mean(log_expit(delta)))
    # dL/d(TQ) per step
    g_delta = -(1.0 - expit(delta)) / n / norm
    g_w = g_delta[:, None] * w[3]
    g_l = -g_delta[:, None] * l[3]
    if cfg.psi_mode == "mean":
        count = w[3].sum() + l[3].sum()
        psi = float(((tq_w**2).sum() + (tq_l**2).sum()) / count)
        g_w = g_w + cfg.beta * 2.0 * tq_w / count
        g_l = g_l + cfg.beta * 2.0 * tq_l / count
    else:
        psi = float(((tq_w**2).sum() + (tq_l**2).sum()) / n)
        g_w = g_w + cfg.beta * 2.0 * tq_w / n
        g_l = g_l + cfg.beta * 2.0 * tq_l / n
    loss = bt + cfg.beta * psi
    # TQ(s,a) = theta(s,a) - gamma * V(s'); dV(s')/dtheta(s',.) = softmax of augmented logits
    P = softmax(_augmented_logits(theta, logp, cfg.alpha_0) / cfg.alpha_tilde, axis=1)
    P[index.terminal] = 0.0
    grad = np.zeros_like(theta)
    for (states, actions, nxt, _), g in ((w, g_w), (l, g_l)):
        np.add.at(grad, (states, actions), g)
        np.add.at(grad, nxt, -gamma * g[..., None] * P[nxt])
    return loss, grad


def train_qadapter(dataset, mdp: Mdp, pi1: Policy, cfg: TrainConfig, init: np.ndarray | None = None):
    """Minibatch optimisation of the Q-Adapter objective.

    Returns ``(ParamQ, TrainReport)``. The customised policy is
    ``compose_policy(pi1, param_q.as_residual_q())``.
    """
    _check_fingerprint(dataset, mdp)
    _check_gamma(mdp, cfg)
    index = enumerate_states(mdp)
    enc = _encode(dataset, mdp)
    lp = LogPolicy(pi1, cfg.alpha_0, index.nonterminal)
    theta0 = np.zeros(index.shape) if init is None else np.array(init, dtype=np.float64)

    def loss_fn(theta, batch):
        return qadapter_loss(theta, batch, mdp, pi1, cfg, logp=lp.values)

    theta, report = _fit("qadapter", theta0, loss_fn, enc, cfg)
    return ParamQ(theta, cfg.alpha_tilde, cfg.alpha_0), report


# --- baselines -------------------------------------------------------------


def log_softmax(logits):
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _logprob_grad(grad, pi, states, actions, coef):
    """Accumulate ``coef * d log pi(a|s) / d logits`` into ``grad``."""
    np.add.at(grad, (states, actions), coef)
    np.add.at(grad, states, -coef[..., None] * pi[states])


def sft_loss(logits: np.ndarray, batch, mdp: Mdp):
    """Mean negative log-likelihood of the chosen responses under ``softmax(logits)``."""
    enc = _encode(batch, mdp)
    logpi = log_softmax(np.asarray(logits, dtype=np.float64))
    pi = np.exp(logpi)
    s, a, _, m = enc.side("w")
    n = s.shape[0]
    loss = -float(np.sum(logpi[s, a] * m) / n)
    grad = np.zeros_like(logpi)
    _logprob_grad(grad, pi, s, a, -m / n)
    return loss, grad


def dpo_loss(logits: np.ndarray, batch, mdp: Mdp, ref_logp: np.ndarray, beta_dpo: float):
    """Direct preference loss of ``softmax(logits)`` against reference log-probabilities."""
    enc = _encode(batch, mdp)
    logpi = log_softmax(np.asarray(logits, dtype=np.float64))
    pi = np.exp(logpi)
    ratio = logpi - ref_logp
    sw, aw, _, mw = enc.side("w")
    sl, al, _, ml = enc.side("l")
    h = np.sum(ratio[sw, aw] * mw, axis=1) - np.sum(ratio[sl, al] * ml, axis=1)
    n = len(h)
    loss = -float(np.mean(log_expit(beta_dpo * h)))
    g_h = -beta_dpo * (1.0 - expit(beta_dpo * h)) / n
    grad = np.zeros_like(logpi)
    _logprob_grad(grad, pi, sw, aw, g_h[:, None] * mw)
    _logprob_grad(grad, pi, sl, al, -g_h[:, None] * ml)
    return loss, grad


def _policy_logits(pi: Policy) -> np.ndarray:
    return LogPolicy(pi, 1.0, clamp=True).values


def train_sft(dataset, mdp: Mdp, cfg: TrainConfig, init: Policy | None = None, return_report: bool = False):
    """Supervised fine-tuning on chosen responses; starts from uniform unless ``init`` is given."""
    _check_fingerprint(dataset, mdp)
    index = enumerate_states(mdp)
    enc = _encode(dataset, mdp)
    logits0 = np.zeros(index.shape) if init is None else _policy_logits(init)
    logits, report = _fit("sft", logits0, lambda p, b: sft_loss(p, b, mdp), enc, cfg)
    pi = Policy(softmax(logits, axis=1))
    return (pi, report) if return_report else pi


def train_dpo(dataset, mdp: Mdp, pi1: Policy, beta_dpo: float, cfg: TrainConfig, return_report: bool = False):
    """DPO with ``pi1`` as both the reference and the initial policy."""
    _check_fingerprint(dataset, mdp)
    enc = _encode(dataset, mdp)
    ref = _policy_logits(pi1)
    logits, report = _fit("dpo", ref.copy(), lambda p, b: dpo_loss(p, b, mdp, ref, beta_dpo), enc, cfg)
    pi = Policy(softmax(logits, axis=1))
    return (pi, report) if return_report else pi


def train_reward_model(dataset, mdp: Mdp, cfg: TrainConfig):
    """Fit a tabular Bradley-Terry reward model from zero; returns ``(RewardTable, TrainReport)``."""
    _check_fingerprint(dataset, mdp)
    index = enumerate_states(mdp)
    enc = _encode(dataset, mdp)
    r, report = _fit("reward_model", np.zeros(index.shape), lambda p, b: reward_model_loss(p, b, mdp), enc, cfg)
    r[index.terminal] = 0.0
    return RewardTable(r), report


def train_rlhf_pipeline(dataset, mdp: Mdp, pi_ref: Policy, alpha: float, cfg: TrainConfig, return_report: bool = False):
    """Reward model followed by the exact soft-optimal policy of the KL-regularised reward."""
    r_phi, report = train_reward_model(dataset, mdp, cfg)
    index = enumerate_states(mdp)
    r_kl = kl_regularized_reward(r_phi, pi_ref, alpha, index)
    pi = policy_from_q(soft_q_iteration(mdp, r_kl, alpha))
    report.method = "rlhf"
    return (pi, report) if return_report else pi
