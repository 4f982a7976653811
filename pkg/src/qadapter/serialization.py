"""Text formats for dense tables and the MDP.

Matrices::

    #qadapter-matrix v1 kind=<kind> rows=<n> cols=<V> [key=value ...]
    <row 0: space-separated %.17g reals>
    ...

Rows follow the ``StateIndex`` ordering. ``%.17g`` round-trips float64
exactly, so save/load is lossless and re-saving is byte-identical.
"""

from __future__ import annotations

import hashlib
import io
import os

import numpy as np

from .errors import ParseError
from .mdp import Mdp, RewardTable
from .residual_q import ResidualQ
from .soft_rl import Policy

MATRIX_TAG = "#qadapter-matrix"
MDP_TAG = "#qadapter-mdp"


def digest(*chunks: bytes | str) -> str:
    h = hashlib.sha256()
    for c in chunks:
        h.update(c.encode() if isinstance(c, str) else c)
        h.update(b"\x00")
    return h.hexdigest()[:16]


def _check_meta(meta):
    for k, v in meta.items():
        if any(ch.isspace() for ch in f"{k}{v}") or "=" in k:
            raise ValueError(f"header entry {k!r}={v!r} must not contain whitespace")


def format_matrix(kind: str, table: np.ndarray, meta: dict | None = None) -> str:
    table = np.asarray(table, dtype=np.float64)
    meta = dict(meta or {})
    _check_meta(meta)
    head = [MATRIX_TAG, "v1", f"kind={kind}", f"rows={table.shape[0]}", f"cols={table.shape[1]}"]
    head += [f"{k}={v}" for k, v in meta.items()]
    buf = io.StringIO()
    buf.write(" ".join(head) + "\n")
    np.savetxt(buf, table, fmt="%.17g", delimiter=" ", newline="\n")
    return buf.getvalue()


def parse_header(line: str, tag: str, lineno: int = 1) -> dict[str, str]:
    parts = line.rstrip("\n").split(" ")
    if len(parts) < 2 or parts[0] != tag or parts[1] != "v1":
        raise ParseError(f"expected '{tag} v1' header, got {line[:60]!r}", lineno)
    out = {}
    for tok in parts[2:]:
        k, sep, v = tok.partition("=")
        if not sep:
            raise ParseError(f"bad header token {tok!r}", lineno)
        out[k] = v
    return out


def parse_matrix(text: str, kind: str | None = None):
    """Returns ``(table, meta)``; ``meta`` excludes kind/rows/cols."""
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("empty matrix file")
    meta = parse_header(lines[0], MATRIX_TAG)
    try:
        found = meta.pop("kind")
        rows, cols = int(meta.pop("rows")), int(meta.pop("cols"))
    except (KeyError, ValueError):
        raise ParseError("header needs kind=, rows= and cols=", 1) from None
    if kind is not None and found != kind:
        raise ParseError(f"expected a {kind} matrix, found {found}", 1)
    if len(lines) - 1 != rows:
        raise ParseError(f"header declares {rows} rows, file has {len(lines) - 1}", len(lines))
    table = np.empty((rows, cols))
    for i, line in enumerate(lines[1:]):
        try:
            vals = [float(x) for x in line.split(" ")]
        except ValueError:
            raise ParseError(f"non-numeric entry in {line[:60]!r}", i + 2) from None
        if len(vals) != cols:
            raise ParseError(f"expected {cols} columns, got {len(vals)}", i + 2)
        table[i] = vals
    return table, meta


def write_text(path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def read_text(path) -> str:
    with open(os.fspath(path), encoding="utf-8", newline="") as fh:
        return fh.read()


def save_matrix(path, kind, table, meta=None) -> None:
    write_text(path, format_matrix(kind, table, meta))


def load_matrix(path, kind=None):
    return parse_matrix(read_text(path), kind)


def save_policy(path, pi: Policy, meta=None):
    save_matrix(path, "policy", pi.table, meta)


def load_policy(path):
    table, meta = load_matrix(path, "policy")
    return Policy(table), meta


def save_reward(path, r: RewardTable, meta=None):
    save_matrix(path, "reward", r.values, meta)


def load_reward(path):
    table, meta = load_matrix(path, "reward")
    return RewardTable(table), meta


def save_residual_q(path, q: ResidualQ, meta=None):
    head = {
        "alpha_tilde": repr(q.alpha_tilde),
        "alpha_0": repr(q.alpha_0),
        "vocab_size": str(q.table.shape[1]),
        "num_states": str(q.table.shape[0]),
    }
    head.update(meta or {})
    save_matrix(path, "residual_q", q.table, head)


def load_residual_q(path):
    table, meta = load_matrix(path, "residual_q")
    try:
        q = ResidualQ(table, float(meta.pop("alpha_tilde")), float(meta.pop("alpha_0")))
    except KeyError as exc:
        raise ParseError(f"residual_q header lacks {exc.args[0]}", 1) from None
    meta.pop("vocab_size", None)
    meta.pop("num_states", None)
    return q, meta


def format_mdp(mdp: Mdp, meta=None) -> str:
    meta = dict(meta or {})
    _check_meta(meta)
    head = " ".join([MDP_TAG, "v1"] + [f"{k}={v}" for k, v in meta.items()])
    body = "".join(f"{k}={v}\n" for k, v in mdp.to_config().items())
    return head + "\n" + body


def parse_mdp(text: str):
    lines = text.split("\n")
    meta = parse_header(lines[0], MDP_TAG)
    cfg = {}
    for n, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        k, sep, v = line.partition("=")
        if not sep:
            raise ParseError(f"expected key=value, got {line!r}", n)
        cfg[k] = v
    return Mdp.from_config(cfg), meta
