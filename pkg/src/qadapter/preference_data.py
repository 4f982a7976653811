"""Bradley-Terry preference data: synthesis from a hidden reward, the
reward-model likelihood, and the line-oriented dataset file format.

File format (LF line endings)::

    #qadapter-prefs v1 vocab=<n> horizon=<T> [key=value ...]
    prompt=<ids>\tchosen=<ids>\trejected=<ids>\tlabel_prob=<real or ->

Token ids are space separated. Extra header ``key=value`` tokens carry the
dataset metadata (seed, behavior policy, mdp fingerprint).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np
from scipy.special import expit, log_expit

from .errors import DomainError, ParseError
from .mdp import Mdp, RewardTable, StateIndex, TokenSeq, enumerate_states, leaves
from .soft_rl import Policy

HEADER_TAG = "#qadapter-prefs"
DEFAULT_EPSILON = 0.3


@dataclass(frozen=True)
class PreferencePair:
    prompt: TokenSeq
    chosen: TokenSeq
    rejected: TokenSeq
    label_prob: float | None = None

    def __post_init__(self):
        for name in ("prompt", "chosen", "rejected"):
            object.__setattr__(self, name, tuple(int(t) for t in getattr(self, name)))
        if self.label_prob is not None and not 0.0 <= self.label_prob <= 1.0:
            raise DomainError(f"label_prob {self.label_prob} outside [0, 1]")

    def swapped(self) -> "PreferencePair":
        p = None if self.label_prob is None else 1.0 - self.label_prob
        return PreferencePair(self.prompt, self.rejected, self.chosen, p)


@dataclass
class PreferenceDataset:
    pairs: list[PreferencePair]
    meta: dict[str, str] = field(default_factory=dict)

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def __getitem__(self, i):
        return self.pairs[i]


class Mode(str, Enum):
    STOCHASTIC = "stochastic"
    DETERMINISTIC = "deterministic"


def epsilon_mixture(pi: Policy, epsilon: float = DEFAULT_EPSILON) -> Policy:
    """``(1 - epsilon) * pi + epsilon * uniform``."""
    if not 0.0 <= epsilon <= 1.0:
        raise DomainError(f"epsilon must lie in [0, 1], got {epsilon}")
    v = pi.table.shape[1]
    return Policy((1.0 - epsilon) * pi.table + epsilon / v)


def _sample_from(index: StateIndex, pi: Policy, s: int, rng: np.random.Generator) -> TokenSeq:
    out = []
    table = pi.table
    while not index.terminal[s]:
        row = table[s]
        a = int(np.searchsorted(np.cumsum(row), rng.random() * row.sum(), side="right"))
        a = min(a, len(row) - 1)
        out.append(a)
        s = int(index.children[s, a])
    return tuple(out)


def sample_response(pi: Policy, mdp: Mdp, prompt: Sequence[int], rng_seed) -> TokenSeq:
    """Autoregressive sample until EOS or the horizon; deterministic given the seed.

    ``rng_seed`` may be an int or a ``numpy.random.Generator`` (advanced in place).
    """
    index = enumerate_states(mdp)
    rng = np.random.default_rng(rng_seed)
    return _sample_from(index, pi, index.index_of(prompt), rng)


def trajectory_reward_sum(mdp: Mdp, r: RewardTable, prompt: Sequence[int], response: Sequence[int]) -> float:
    """Undiscounted sum of ``r`` along a response, ignoring tokens after EOS."""
    index = enumerate_states(mdp)
    states, actions, _ = index.path(prompt, response)
    return float(np.sum(r.values[states, actions]))


def bt_probability(sum_w: float, sum_l: float) -> float:
    return float(expit(sum_w - sum_l))


def generate_dataset(
    mdp: Mdp,
    r2: RewardTable,
    behavior: Policy,
    n_pairs: int,
    mode: str | Mode = Mode.STOCHASTIC,
    rng_seed: int = 0,
    behavior_desc: str = "custom",
) -> PreferenceDataset:
    """Label pairs of behavior-policy responses with the Bradley-Terry model of ``r2``.

    Per pair one RNG stream draws, in order: the prompt, the first response,
    the second response, and (stochastic mode only) the label.
    """
    if n_pairs < 1:
        raise DomainError(f"n_pairs must be >= 1, got {n_pairs}")
    mode = Mode(mode)
    index = enumerate_states(mdp)
    rng = np.random.default_rng(rng_seed)
    probs = index.prompt_probs
    cum = np.cumsum(probs)
    pairs = []
    for _ in range(n_pairs):
        k = min(int(np.searchsorted(cum, rng.random() * cum[-1], side="right")), len(probs) - 1)
        prompt = mdp.prompts[k][0]
        y1 = _sample_from(index, behavior, k, rng)
        y2 = _sample_from(index, behavior, k, rng)
        p = bt_probability(
            trajectory_reward_sum(mdp, r2, prompt, y1), trajectory_reward_sum(mdp, r2, prompt, y2)
        )
        if mode is Mode.STOCHASTIC:
            first_wins = rng.random() < p
        else:
            first_wins = p >= 0.5
        if first_wins:
            pairs.append(PreferencePair(prompt, y1, y2, p))
        else:
            pairs.append(PreferencePair(prompt, y2, y1, 1.0 - p))
    meta = {
        "seed": str(rng_seed),
        "mode": mode.value,
        "behavior": behavior_desc,
        "mdp": mdp.fingerprint(),
    }
    return PreferenceDataset(pairs, meta)


def exhaustive_dataset(mdp: Mdp, r2: RewardTable, copies: int = 100) -> PreferenceDataset:
    """Every unordered pair of distinct complete responses, per prompt.

    Each pair appears ``copies`` times, with the first response chosen in
    ``round(copies * p)`` of them, so empirical label frequencies match the
    Bradley-Terry probabilities ``p`` of ``r2`` without any sampling.
    """
    index = enumerate_states(mdp)
    pairs = []
    for k, (prompt, _) in enumerate(mdp.prompts):
        ys = leaves(index, k)
        scores = [trajectory_reward_sum(mdp, r2, prompt, y) for y in ys]
        for i in range(len(ys)):
            for j in range(i + 1, len(ys)):
                p = bt_probability(scores[i], scores[j])
                wins = int(round(copies * p))
                pairs += [PreferencePair(prompt, ys[i], ys[j], p)] * wins
                pairs += [PreferencePair(prompt, ys[j], ys[i], 1.0 - p)] * (copies - wins)
    meta = {"mode": "exhaustive", "copies": str(copies), "behavior": "none", "mdp": mdp.fingerprint()}
    return PreferenceDataset(pairs, meta)


@dataclass
class EncodedBatch:
    """Padded ``(B, T)`` state/action/next-state arrays for both sides of each pair.

    ``mask`` is 1 on real steps and 0 on padding; padded steps point at state 0
    so gathers stay in bounds.
    """

    w_states: np.ndarray
    w_actions: np.ndarray
    w_next: np.ndarray
    w_mask: np.ndarray
    l_states: np.ndarray
    l_actions: np.ndarray
    l_next: np.ndarray
    l_mask: np.ndarray

    def __len__(self):
        return self.w_states.shape[0]

    def side(self, which: str):
        return tuple(getattr(self, f"{which}_{k}") for k in ("states", "actions", "next", "mask"))


def encode_batch(batch: Sequence[PreferencePair], mdp: Mdp) -> EncodedBatch:
    index = enumerate_states(mdp)
    horizon = mdp.horizon
    n = len(batch)
    arrays = {}
    for side in ("w", "l"):
        S = np.zeros((n, horizon), dtype=np.int64)
        A = np.zeros((n, horizon), dtype=np.int64)
        N = np.zeros((n, horizon), dtype=np.int64)
        M = np.zeros((n, horizon))
        for i, pair in enumerate(batch):
            response = pair.chosen if side == "w" else pair.rejected
            if len(response) > horizon:
                raise DomainError(f"pair {i}: response longer than horizon {horizon}")
            s, a, nx = index.path(pair.prompt, response)
            L = len(s)
            S[i, :L], A[i, :L], N[i, :L], M[i, :L] = s, a, nx, 1.0
        arrays.update({f"{side}_states": S, f"{side}_actions": A, f"{side}_next": N, f"{side}_mask": M})
    return EncodedBatch(**arrays)


def reward_model_loss(r_params: RewardTable | np.ndarray, batch, mdp: Mdp):
    """Mean Bradley-Terry negative log-likelihood and its gradient.

    Returns ``(loss, grad)`` with ``grad`` shaped like the reward table.
    """
    if len(batch) == 0:
        raise DomainError("empty batch")
    enc = batch if isinstance(batch, EncodedBatch) else encode_batch(batch, mdp)
    r = np.asarray(getattr(r_params, "values", r_params), dtype=np.float64)
    sum_w = np.sum(r[enc.w_states, enc.w_actions] * enc.w_mask, axis=1)
    sum_l = np.sum(r[enc.l_states, enc.l_actions] * enc.l_mask, axis=1)
    delta = sum_w - sum_l
    n = len(delta)
    loss = float(-np.mean(log_expit(delta)))
    coef = (1.0 - expit(delta)) / n
    grad = np.zeros_like(r)
    np.add.at(grad, (enc.w_states, enc.w_actions), -coef[:, None] * enc.w_mask)
    np.add.at(grad, (enc.l_states, enc.l_actions), coef[:, None] * enc.l_mask)
    return loss, grad


def _ids(seq) -> str:
    return " ".join(str(t) for t in seq)


def format_dataset(dataset: PreferenceDataset, mdp: Mdp) -> str:
    head = [HEADER_TAG, "v1", f"vocab={mdp.vocab.size}", f"horizon={mdp.horizon}"]
    for k, v in dataset.meta.items():
        if any(c.isspace() for c in f"{k}{v}") or "=" in k:
            raise DomainError(f"metadata {k!r}={v!r} must not contain whitespace")
        head.append(f"{k}={v}")
    lines = [" ".join(head)]
    for p in dataset.pairs:
        lp = "-" if p.label_prob is None else repr(float(p.label_prob))
        lines.append(
            f"prompt={_ids(p.prompt)}\tchosen={_ids(p.chosen)}\trejected={_ids(p.rejected)}\tlabel_prob={lp}"
        )
    return "\n".join(lines) + "\n"


def save_dataset(dataset: PreferenceDataset, mdp: Mdp, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_dataset(dataset, mdp))


def _parse_ids(text: str, vocab: int, lineno: int) -> TokenSeq:
    try:
        toks = tuple(int(t) for t in text.split(" ") if t != "")
    except ValueError:
        raise ParseError(f"bad token id list {text!r}", lineno) from None
    for t in toks:
        if not 0 <= t < vocab:
            raise ParseError(f"token id {t} outside vocabulary of size {vocab}", lineno)
    return toks


def parse_dataset(text: str):
    """Parse dataset text; returns ``(dataset, vocab_size, horizon)``."""
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("empty dataset")
    head = lines[0].split(" ")
    if len(head) < 4 or head[0] != HEADER_TAG or head[1] != "v1":
        raise ParseError(f"missing or unsupported header {lines[0]!r}", 1)
    fields = {}
    for tok in head[2:]:
        key, sep, value = tok.partition("=")
        if not sep:
            raise ParseError(f"bad header token {tok!r}", 1)
        fields[key] = value
    try:
        vocab = int(fields.pop("vocab"))
        horizon = int(fields.pop("horizon"))
    except (KeyError, ValueError):
        raise ParseError("header needs integer vocab= and horizon=", 1) from None
    pairs = []
    names = ("prompt", "chosen", "rejected", "label_prob")
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != 4:
            raise ParseError(f"expected 4 tab-separated fields, got {len(parts)}", lineno)
        values = []
        for name, part in zip(names, parts):
            key, sep, value = part.partition("=")
            if key != name or not sep:
                raise ParseError(f"expected field {name}=, got {part!r}", lineno)
            values.append(value)
        prompt, chosen, rejected = (_parse_ids(v, vocab, lineno) for v in values[:3])
        if len(chosen) > horizon or len(rejected) > horizon:
            raise ParseError(f"response longer than horizon {horizon}", lineno)
        if values[3] == "-":
            label_prob = None
        else:
            try:
                label_prob = float(values[3])
            except ValueError:
                raise ParseError(f"bad label_prob {values[3]!r}", lineno) from None
            if not (math.isfinite(label_prob) and 0.0 <= label_prob <= 1.0):
                raise ParseError(f"label_prob {values[3]} outside [0, 1]", lineno)
        pairs.append(PreferencePair(prompt, chosen, rejected, label_prob))
    if not pairs:
        raise ParseError("empty dataset")
    return PreferenceDataset(pairs, fields), vocab, horizon


def load_dataset(path, mdp: Mdp | None = None) -> PreferenceDataset:
    """Read a dataset file; with ``mdp`` given, vocab and horizon must match it."""
    with open(os.fspath(path), encoding="utf-8", newline="") as fh:
        text = fh.read()
    if "\r" in text:
        raise ParseError("CR line endings are not allowed")
    dataset, vocab, horizon = parse_dataset(text)
    if mdp is not None and (vocab, horizon) != (mdp.vocab.size, mdp.horizon):
        raise ParseError(
            f"dataset is for vocab={vocab} horizon={horizon}, mdp has vocab={mdp.vocab.size} horizon={mdp.horizon}", 1
        )
    return dataset
