import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from qadapter.errors import ParseError
from qadapter.mdp import Mdp, RewardTable, enumerate_states
from qadapter.residual_q import ResidualQ
from qadapter.serialization import (
    digest,
    format_matrix,
    format_mdp,
    load_policy,
    load_residual_q,
    load_reward,
    parse_matrix,
    parse_mdp,
    save_policy,
    save_residual_q,
    save_reward,
)
from qadapter.soft_rl import Policy


def test_policy_and_reward_round_trip(tmp_path):
    index = enumerate_states(Mdp.make(3, 2))
    rng = np.random.default_rng(0)
    pi = Policy(rng.dirichlet(np.ones(3), size=index.num_states))
    save_policy(tmp_path / "p.txt", pi, {"mdp": "abc"})
    back, meta = load_policy(tmp_path / "p.txt")
    assert np.array_equal(back.table, pi.table) and meta == {"mdp": "abc"}
    r = RewardTable.uniform(index, rng)
    save_reward(tmp_path / "r.txt", r)
    assert np.array_equal(load_reward(tmp_path / "r.txt")[0].values, r.values)
    save_reward(tmp_path / "r2.txt", load_reward(tmp_path / "r.txt")[0])
    assert (tmp_path / "r.txt").read_bytes() == (tmp_path / "r2.txt").read_bytes()


def test_residual_q_header(tmp_path):
    q = ResidualQ(np.arange(6.0).reshape(3, 2), 0.1, 0.3)
    save_residual_q(tmp_path / "q.txt", q, {"src": "x"})
    head = (tmp_path / "q.txt").read_text().split("\n")[0]
    assert head.startswith("#qadapter-matrix v1 kind=residual_q rows=3 cols=2")
    for token in ("alpha_tilde=0.1", "alpha_0=0.3", "vocab_size=2", "num_states=3", "src=x"):
        assert token in head.split(" ")
    back, meta = load_residual_q(tmp_path / "q.txt")
    assert back.alpha_0 == 0.3 and np.array_equal(back.table, q.table) and meta == {"src": "x"}


def test_matrix_parse_errors():
    good = format_matrix("policy", np.full((2, 2), 0.5))
    with pytest.raises(ParseError, match="line 1"):
        parse_matrix(good, "reward")
    with pytest.raises(ParseError, match="line 3"):
        parse_matrix("#qadapter-matrix v1 kind=policy rows=2 cols=2\n0.5 0.5\n0.5 oops\n")
    with pytest.raises(ParseError, match="line 2"):
        parse_matrix(good.replace("0.5 0.5\n", "0.5\n", 1))
    with pytest.raises(ParseError):
        parse_matrix("")
    with pytest.raises(ParseError, match="line 1"):
        parse_matrix("#qadapter-matrix v2 kind=policy rows=1 cols=1\n1\n")
    with pytest.raises(ValueError):
        format_matrix("policy", np.eye(2), {"k": "has space"})


def test_mdp_text_round_trip():
    mdp = Mdp.make(4, 3, 0.95, prompts=[(1, 2), (3,)], probs=[0.4, 0.6], eos=0)
    back, meta = parse_mdp(format_mdp(mdp, {"src": "s"}))
    assert back == mdp and meta == {"src": "s"}


def test_digest_separates_chunks():
    assert digest("ab", "c") != digest("a", "bc")
    assert digest(b"x") == digest("x") and len(digest("x")) == 16


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 4)),
              elements=st.floats(allow_nan=False, allow_infinity=False, width=64)))
def test_matrix_round_trip_is_lossless(table):
    back, _ = parse_matrix(format_matrix("reward", table), "reward")
    assert np.array_equal(back, table)
