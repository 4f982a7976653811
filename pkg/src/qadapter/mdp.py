"""Token-level MDP: states are token prefixes, actions are tokens, and a
transition appends the chosen token to the state.

The reachable state tree is enumerated once per ``Mdp`` value into a
``StateIndex`` so that every other module can run exact dynamic programming
over dense ``(num_states, vocab_size)`` tables.
"""

from __future__ import annotations

import functools
import hashlib
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import CapacityError, ConfigError, DomainError

DEFAULT_STATE_CAP = 2_000_000
PROB_TOL = 1e-12

TokenSeq = tuple[int, ...]


@dataclass(frozen=True)
class Vocab:
    size: int
    eos: int | None = None

    def __post_init__(self):
        if int(self.size) != self.size or self.size < 2:
            raise DomainError(f"vocabulary size must be an integer >= 2, got {self.size}")
        if self.eos is not None and not 0 <= self.eos < self.size:
            raise DomainError(f"eos id {self.eos} outside [0, {self.size})")

    def check(self, token: int) -> int:
        if not 0 <= token < self.size:
            raise DomainError(f"token id {token} outside vocabulary [0, {self.size})")
        return int(token)


@dataclass(frozen=True)
class Mdp:
    """Finite-horizon token MDP with a categorical prompt distribution.

    ``prompts`` holds ``(tokens, probability)`` pairs. No prompt may be a
    prefix of another, otherwise one token sequence would denote states with
    different remaining horizons.
    """

    vocab: Vocab
    horizon: int
    gamma: float
    prompts: tuple[tuple[TokenSeq, float], ...]

    def __post_init__(self):
        if int(self.horizon) != self.horizon or self.horizon < 1:
            raise DomainError(f"horizon must be a positive integer, got {self.horizon}")
        if not 0.0 <= self.gamma <= 1.0:
            raise DomainError(f"gamma must lie in [0, 1], got {self.gamma}")
        prompts = tuple(
            (tuple(self.vocab.check(int(t)) for t in toks), float(p)) for toks, p in self.prompts
        )
        if not prompts:
            raise DomainError("at least one prompt is required")
        probs = [p for _, p in prompts]
        if any(p < 0 or not math.isfinite(p) for p in probs):
            raise DomainError(f"prompt probabilities must be finite and non-negative: {probs}")
        if abs(math.fsum(probs) - 1.0) > PROB_TOL:
            raise DomainError(f"prompt probabilities sum to {math.fsum(probs)!r}, not 1")
        seqs = [toks for toks, _ in prompts]
        for i, a in enumerate(seqs):
            for j, b in enumerate(seqs):
                if i != j and b[: len(a)] == a:
                    raise DomainError(f"prompt {list(a)} is a prefix of prompt {list(b)}")
        object.__setattr__(self, "prompts", prompts)
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "horizon", int(self.horizon))

    @classmethod
    def make(cls, vocab_size, horizon, gamma=1.0, prompts=((),), probs=None, eos=None):
        """Build an Mdp from plain sequences; ``probs`` defaults to uniform."""
        prompts = [tuple(p) for p in prompts]
        if probs is None:
            probs = [1.0 / len(prompts)] * len(prompts)
        if len(probs) != len(prompts):
            raise DomainError(f"{len(prompts)} prompts but {len(probs)} probabilities")
        return cls(Vocab(vocab_size, eos), horizon, gamma, tuple(zip(prompts, probs)))

    @property
    def vocab_size(self) -> int:
        return self.vocab.size

    def step(self, s: Sequence[int], a: int) -> TokenSeq:
        return step(s, a, self.vocab)

    def to_config(self) -> dict[str, str]:
        cfg = {"vocab_size": str(self.vocab.size)}
        if self.vocab.eos is not None:
            cfg["eos"] = str(self.vocab.eos)
        cfg["horizon"] = str(self.horizon)
        cfg["gamma"] = repr(self.gamma)
        cfg["prompts"] = ";".join(" ".join(map(str, toks)) for toks, _ in self.prompts)
        cfg["prompt_probs"] = ",".join(repr(p) for _, p in self.prompts)
        return cfg

    @classmethod
    def from_config(cls, cfg: Mapping[str, str]) -> "Mdp":
        known = {"vocab_size", "eos", "horizon", "gamma", "prompts", "prompt_probs"}
        unknown = set(cfg) - known
        if unknown:
            raise ConfigError(f"unknown mdp keys: {sorted(unknown)}")
        try:
            vocab_size = int(cfg["vocab_size"])
            horizon = int(cfg["horizon"])
            gamma = float(cfg.get("gamma", "1.0"))
            eos = cfg.get("eos", "").strip()
            eos = int(eos) if eos not in ("", "none", "None") else None
            prompts = [
                tuple(int(t) for t in chunk.split()) for chunk in cfg.get("prompts", "").split(";")
            ]
            raw_probs = cfg.get("prompt_probs", "").strip()
            probs = [float(p) for p in raw_probs.split(",")] if raw_probs else None
        except KeyError as exc:
            raise ConfigError(f"missing mdp key {exc.args[0]!r}") from None
        except ValueError as exc:
            raise ConfigError(f"malformed mdp section: {exc}") from None
        try:
            return cls.make(vocab_size, horizon, gamma, prompts, probs, eos)
        except DomainError as exc:
            raise ConfigError(str(exc)) from None

    def fingerprint(self) -> str:
        text = "\n".join(f"{k}={v}" for k, v in sorted(self.to_config().items()))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def step(s: Sequence[int], a: int, vocab: Vocab | int) -> TokenSeq:
    """Append token ``a`` to ``s``; the input is left unchanged."""
    if not isinstance(vocab, Vocab):
        vocab = Vocab(int(vocab))
    return tuple(s) + (vocab.check(a),)


def is_terminal(mdp: Mdp, s: Sequence[int], prompt_len: int) -> bool:
    generated = tuple(s)[prompt_len:]
    if len(generated) >= mdp.horizon:
        return True
    return mdp.vocab.eos is not None and mdp.vocab.eos in generated


def count_states(mdp: Mdp) -> int:
    """Number of reachable states, computed without enumerating them."""
    v, horizon = mdp.vocab.size, mdp.horizon
    if mdp.vocab.eos is None:
        per_prompt = sum(v**t for t in range(horizon + 1))
    else:
        per_prompt = 1 + sum(v * (v - 1) ** (t - 1) for t in range(1, horizon + 1))
    return len(mdp.prompts) * per_prompt


@dataclass(frozen=True, eq=False)
class StateIndex:
    """Dense breadth-first numbering of the reachable state tree.

    Prompts occupy indices ``0..P-1`` in the order of ``mdp.prompts``; each
    subsequent depth follows with siblings ordered by token id. All arrays
    are read-only.

    Attributes:
        children: ``(S, V)`` successor indices, ``-1`` on terminal rows.
        depth: number of generated tokens in each state.
        levels: one ``slice`` per depth, in increasing depth.
    """

    mdp: Mdp
    inverse: tuple[TokenSeq, ...]
    forward: Mapping[TokenSeq, int] = field(repr=False)
    depth: np.ndarray = field(repr=False)
    prompt_id: np.ndarray = field(repr=False)
    terminal: np.ndarray = field(repr=False)
    children: np.ndarray = field(repr=False)
    parent: np.ndarray = field(repr=False)
    parent_action: np.ndarray = field(repr=False)
    levels: tuple[slice, ...] = field(repr=False)

    @property
    def num_states(self) -> int:
        return len(self.inverse)

    @property
    def vocab_size(self) -> int:
        return self.mdp.vocab.size

    @property
    def shape(self) -> tuple[int, int]:
        return (self.num_states, self.mdp.vocab.size)

    @property
    def nonterminal(self) -> np.ndarray:
        return ~self.terminal

    @property
    def prompt_probs(self) -> np.ndarray:
        return np.array([p for _, p in self.mdp.prompts])

    def __len__(self):
        return len(self.inverse)

    def index_of(self, s: Sequence[int]) -> int:
        try:
            return self.forward[tuple(s)]
        except KeyError:
            raise DomainError(f"state {list(s)} is not reachable") from None

    def prompt_len(self, i: int) -> int:
        return len(self.mdp.prompts[self.prompt_id[i]][0])

    def generated(self, i: int) -> TokenSeq:
        return self.inverse[i][self.prompt_len(i):]

    def path(self, prompt: Sequence[int], response: Sequence[int]):
        """State indices and actions visited by ``response``, truncated after EOS.

        Returns ``(states, actions, next_states)`` as integer arrays of equal
        length. Raises ``DomainError`` if any step leaves the tree.
        """
        s = self.index_of(prompt)
        if self.depth[s] != 0:
            raise DomainError(f"{list(prompt)} is not a prompt")
        states, actions, nxt = [], [], []
        for a in response:
            a = self.mdp.vocab.check(int(a))
            if self.terminal[s]:
                raise DomainError(f"response {list(response)} continues past a terminal state")
            states.append(s)
            actions.append(a)
            s = int(self.children[s, a])
            nxt.append(s)
            if self.mdp.vocab.eos is not None and a == self.mdp.vocab.eos:
                break
        return np.array(states, dtype=np.int64), np.array(actions, dtype=np.int64), np.array(nxt, dtype=np.int64)


def _readonly(a):
    a.setflags(write=False)
    return a


@functools.lru_cache(maxsize=16)
def enumerate_states(mdp: Mdp, cap: int = DEFAULT_STATE_CAP) -> StateIndex:
    total = count_states(mdp)
    if total > cap:
        per_prompt = total // len(mdp.prompts)
        raise CapacityError(
            f"{len(mdp.prompts)} prompts x {per_prompt} states per prompt "
            f"(|V|={mdp.vocab.size}, T={mdp.horizon}) = {total} states exceeds cap {cap}"
        )
    v = mdp.vocab.size
    eos = mdp.vocab.eos
    inverse: list[TokenSeq] = []
    depth, prompt_id, terminal, parent, parent_action = [], [], [], [], []
    for k, (toks, _) in enumerate(mdp.prompts):
        inverse.append(toks)
        depth.append(0)
        prompt_id.append(k)
        terminal.append(False)
        parent.append(-1)
        parent_action.append(-1)
    levels = [slice(0, len(inverse))]
    children = np.full((total, v), -1, dtype=np.int64)
    frontier = list(range(len(inverse)))
    for t in range(1, mdp.horizon + 1):
        start = len(inverse)
        nxt = []
        for i in frontier:
            if terminal[i]:
                continue
            base = inverse[i]
            for a in range(v):
                j = len(inverse)
                children[i, a] = j
                inverse.append(base + (a,))
                depth.append(t)
                prompt_id.append(prompt_id[i])
                terminal.append(t == mdp.horizon or a == eos)
                parent.append(i)
                parent_action.append(a)
                nxt.append(j)
        levels.append(slice(start, len(inverse)))
        frontier = nxt
    assert len(inverse) == total
    forward = {s: i for i, s in enumerate(inverse)}
    return StateIndex(
        mdp=mdp,
        inverse=tuple(inverse),
        forward=forward,
        depth=_readonly(np.array(depth, dtype=np.int64)),
        prompt_id=_readonly(np.array(prompt_id, dtype=np.int64)),
        terminal=_readonly(np.array(terminal, dtype=bool)),
        children=_readonly(children),
        parent=_readonly(np.array(parent, dtype=np.int64)),
        parent_action=_readonly(np.array(parent_action, dtype=np.int64)),
        levels=tuple(levels),
    )


def leaves(index: StateIndex, prompt_id: int) -> list[TokenSeq]:
    """Generated-token sequences of every terminal state under one prompt."""
    out = []
    for i in np.flatnonzero(index.terminal & (index.prompt_id == prompt_id)):
        out.append(index.generated(int(i)))
    return out


@dataclass(frozen=True, eq=False)
class RewardTable:
    """Dense reward ``r(s, a)``; rows of terminal states are ignored."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise DomainError(f"reward table must be 2-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise DomainError("reward table has non-finite entries")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape

    def __add__(self, other: "RewardTable") -> "RewardTable":
        return RewardTable(self.values + other.values)

    def __rmul__(self, c: float) -> "RewardTable":
        return RewardTable(c * self.values)

    @classmethod
    def zeros(cls, index: StateIndex) -> "RewardTable":
        return cls(np.zeros(index.shape))

    @classmethod
    def constant(cls, index: StateIndex, c: float) -> "RewardTable":
        values = np.zeros(index.shape)
        values[index.nonterminal] = c
        return cls(values)

    @classmethod
    def uniform(cls, index: StateIndex, rng, low=-1.0, high=1.0) -> "RewardTable":
        """Rewards drawn i.i.d. from U[low, high) on non-terminal rows."""
        rng = np.random.default_rng(rng)
        values = rng.uniform(low, high, size=index.shape)
        values[index.terminal] = 0.0
        return cls(values)
