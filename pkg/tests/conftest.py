import itertools
import math

import numpy as np
import pytest

from qadapter.mdp import Mdp, RewardTable, enumerate_states


def tv(p, q, rows=None):
    d = 0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum(axis=1)
    return float(d[rows].max() if rows is not None else d.max())


def central_diff(f, x, h=1e-5, entries=None):
    """Central finite-difference gradient of scalar ``f`` at ``x`` (only at ``entries`` if given)."""
    g = np.zeros_like(x)
    idx = entries if entries is not None else list(np.ndindex(x.shape))
    for i in idx:
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def max_rel_err(a, b, floor=1e-6):
    return float(np.max(np.abs(a - b) / np.maximum(floor, np.abs(a) + np.abs(b))))


def brute_soft_q(vocab_size, horizon, gamma, prompt, reward, alpha, eos=None):
    """Soft-optimal Q by explicit recursion over token tuples; ``reward(seq, a)`` is a callable."""
    cache = {}

    def done(seq):
        gen = seq[len(prompt):]
        return len(gen) >= horizon or (eos is not None and eos in gen)

    def V(seq):
        if done(seq):
            return 0.0
        qs = [Q(seq, a) for a in range(vocab_size)]
        m = max(qs)
        return m + alpha * math.log(sum(math.exp((q - m) / alpha) for q in qs))

    def Q(seq, a):
        key = (seq, a)
        if key not in cache:
            nxt = seq + (a,)
            cache[key] = reward(seq, a) + gamma * V(nxt)
        return cache[key]

    return Q, V


def all_sequences(vocab_size, max_len):
    for n in range(max_len + 1):
        yield from itertools.product(range(vocab_size), repeat=n)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_instance(rng, vocab_size=3, horizon=2, gamma=0.9, prompts=((),), eos=None):
    mdp = Mdp.make(vocab_size, horizon, gamma, prompts, eos=eos)
    index = enumerate_states(mdp)
    return mdp, index, RewardTable.uniform(index, rng)
