"""Command-line pipeline driven by a single config file.

Usage::

    qadapter make-env  CONFIG
    qadapter pretrain  CONFIG
    qadapter gen-prefs CONFIG
    qadapter train     CONFIG {qadapter,sft,dpo,rlhf}
    qadapter eval      CONFIG [--all | --method NAME]
    qadapter sweep     CONFIG
    qadapter run       CONFIG            # every step above, in order

Exit codes: 0 success, 2 config error (including stale artifacts),
3 capacity error, 4 missing artifact, 5 training divergence.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import serialization as ser
from .errors import CapacityError, ConfigError, DivergenceError, DomainError, ParseError
from .eval_harness import alpha_sweep, evaluate_policy, format_table, trend_summary
from .mdp import Mdp, RewardTable, enumerate_states
from .preference_data import Mode, epsilon_mixture, format_dataset, generate_dataset, load_dataset
from .residual_q import compose_policy
from .soft_rl import bellman_residual, policy_from_q, soft_q_iteration
from .trainer import TrainConfig, train_dpo, train_qadapter, train_rlhf_pipeline, train_sft

ARTIFACTS_ENV = "QADAPTER_ARTIFACTS"
METHODS = ("qadapter", "sft", "dpo", "rlhf")
SWEEP_GRID = "0.005,0.05,0.1,0.5,1"

EXIT_CONFIG, EXIT_CAPACITY, EXIT_MISSING, EXIT_DIVERGED = 2, 3, 4, 5

SECTIONS = {
    "paths": {"artifacts": "artifacts"},
    "mdp": None,  # validated by Mdp.from_config
    "rewards": {"r1_seed": "1", "r2_seed": "2", "low": "-1.0", "high": "1.0", "r1": "", "r2": ""},
    "pretrain": {"alpha_1": "0.3", "tol": "1e-10"},
    "data": {"n_pairs": "1000", "mode": "stochastic", "epsilon": "0.3", "seed": "0"},
    "train": None,  # validated by TrainConfig.from_mapping
    "eval": {"n_matches": "10000", "seed": "0"},
    "sweep": {"alphas": SWEEP_GRID},
}


class MissingArtifact(Exception):
    pass


@dataclass
class RunConfig:
    path: Path
    sections: dict[str, dict[str, str]]
    artifacts: Path

    def get(self, section, key):
        return self.sections[section][key]

    def section_text(self, section) -> str:
        return "\n".join(f"{k}={v}" for k, v in sorted(self.sections[section].items()))

    @property
    def mdp(self) -> Mdp:
        return Mdp.from_config(self.sections["mdp"])

    def train_config(self, mdp: Mdp) -> TrainConfig:
        values = dict(self.sections["train"])
        values.setdefault("gamma", repr(mdp.gamma))
        return TrainConfig.from_mapping(values)


def load_config(path) -> RunConfig:
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    unknown = set(parser.sections()) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    if "mdp" not in parser:
        raise ConfigError("config needs an [mdp] section")
    sections = {}
    for name, defaults in SECTIONS.items():
        given = dict(parser[name]) if name in parser else {}
        if defaults is None:
            sections[name] = given
            continue
        bad = set(given) - set(defaults)
        if bad:
            raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
        sections[name] = {**defaults, **given}
    root = os.environ.get(ARTIFACTS_ENV) or sections["paths"]["artifacts"]
    artifacts = Path(root)
    if not artifacts.is_absolute():
        artifacts = path.parent / artifacts
    cfg = RunConfig(path, sections, artifacts)
    # surface malformed sections before any work is done
    mdp = cfg.mdp
    cfg.train_config(mdp)
    return cfg


class Pipeline:
    """Artifact bookkeeping: every file header records ``src``, a digest of
    its upstream artifacts and config, which consumers recompute and compare."""

    def __init__(self, cfg: RunConfig, out=sys.stdout):
        self.cfg = cfg
        self.out = out
        self.dir = cfg.artifacts
        self.mdp = cfg.mdp

    def p(self, name) -> Path:
        return self.dir / name

    def say(self, msg):
        print(msg, file=self.out)

    def _bytes(self, name) -> bytes:
        try:
            return self.p(name).read_bytes()
        except FileNotFoundError:
            raise MissingArtifact(f"missing artifact {self.p(name)}; run the upstream command first") from None

    def _verify(self, name, meta, expected):
        if meta.get("src") != expected:
            raise ConfigError(f"artifact {name} is stale (inputs changed); re-run the command that writes it")
        if meta.get("mdp", self.mdp.fingerprint()) != self.mdp.fingerprint():
            raise ConfigError(f"artifact {name} was built for a different mdp")

    # expected digests -----------------------------------------------------

    def src_env(self):
        return ser.digest(self.cfg.section_text("mdp"), self.cfg.section_text("rewards"))

    def src_pi1(self):
        return ser.digest(self._bytes("r1.txt"), self.cfg.section_text("pretrain"))

    def src_prefs(self):
        return ser.digest(self._bytes("r2.txt"), self._bytes("pi1.txt"), self.cfg.section_text("data"))

    def src_method(self, method):
        return ser.digest(self._bytes("prefs.tsv"), self._bytes("pi1.txt"), self.cfg.section_text("train"), method)

    # checked loaders ------------------------------------------------------

    def load_rewards(self):
        out = []
        for name in ("r1.txt", "r2.txt"):
            self._bytes(name)
            r, meta = ser.load_reward(self.p(name))
            self._verify(name, meta, self.src_env())
            out.append(r)
        return out

    def load_pi1(self):
        self._bytes("pi1.txt")
        pi1, meta = ser.load_policy(self.p("pi1.txt"))
        self._verify("pi1.txt", meta, self.src_pi1())
        return pi1

    def load_prefs(self):
        self._bytes("prefs.tsv")
        ds = load_dataset(self.p("prefs.tsv"), self.mdp)
        self._verify("prefs.tsv", ds.meta, self.src_prefs())
        return ds

    def load_method_policy(self, method):
        name = f"{method}_policy.txt"
        self._bytes(name)
        pi, meta = ser.load_policy(self.p(name))
        self._verify(name, meta, self.src_method(method))
        return pi

    def meta(self, src):
        return {"mdp": self.mdp.fingerprint(), "src": src}

    def write_json(self, name, obj):
        ser.write_text(self.p(name), json.dumps(obj, indent=2, sort_keys=True) + "\n")

    # commands -------------------------------------------------------------

    def make_env(self):
        index = enumerate_states(self.mdp)
        self.dir.mkdir(parents=True, exist_ok=True)
        sec = self.cfg.sections["rewards"]
        try:
            low, high = float(sec["low"]), float(sec["high"])
        except ValueError:
            raise ConfigError("[rewards] low/high must be reals") from None
        if not low < high:
            raise ConfigError(f"[rewards] needs low < high, got {low}, {high}")
        tables = []
        for key in ("r1", "r2"):
            if sec[key].strip():
                tables.append(_inline_reward(sec[key], index, key))
            else:
                try:
                    seed = int(sec[f"{key}_seed"])
                except ValueError:
                    raise ConfigError(f"[rewards] {key}_seed must be an integer") from None
                tables.append(RewardTable.uniform(index, seed, low, high))
        src = self.src_env()
        ser.write_text(self.p("mdp.txt"), ser.format_mdp(self.mdp, self.meta(src)))
        ser.save_reward(self.p("r1.txt"), tables[0], self.meta(src))
        ser.save_reward(self.p("r2.txt"), tables[1], self.meta(src))
        self.say(f"states: {index.num_states}")

    def pretrain(self):
        r1, _ = self.load_rewards()
        sec = self.cfg.sections["pretrain"]
        try:
            alpha_1, tol = float(sec["alpha_1"]), float(sec["tol"])
        except ValueError:
            raise ConfigError("[pretrain] alpha_1 and tol must be reals") from None
        if not alpha_1 > 0:
            raise ConfigError(f"[pretrain] alpha_1 must be positive, got {alpha_1}")
        q1 = soft_q_iteration(self.mdp, r1, alpha_1, tol=tol)
        residual = bellman_residual(self.mdp, q1, r1)
        meta = self.meta(self.src_pi1())
        meta.update({"alpha_1": repr(alpha_1), "residual": f"{residual:.3e}"})
        ser.save_policy(self.p("pi1.txt"), policy_from_q(q1), meta)
        self.say(f"certificate: bellman_residual={residual:.3e} alpha_1={alpha_1!r}")

    def gen_prefs(self):
        _, r2 = self.load_rewards()
        pi1 = self.load_pi1()
        sec = self.cfg.sections["data"]
        try:
            n_pairs, eps, seed = int(sec["n_pairs"]), float(sec["epsilon"]), int(sec["seed"])
            mode = Mode(sec["mode"])
        except ValueError as exc:
            raise ConfigError(f"bad [data] section: {exc}") from None
        try:
            behavior = epsilon_mixture(pi1, eps)
            ds = generate_dataset(self.mdp, r2, behavior, n_pairs, mode, seed, behavior_desc=f"eps_mixture:{eps!r}")
        except DomainError as exc:
            raise ConfigError(str(exc)) from None
        ds.meta["src"] = self.src_prefs()
        ser.write_text(self.p("prefs.tsv"), format_dataset(ds, self.mdp))
        self.say(f"pairs: {len(ds)}")

    def train(self, method):
        pi1 = self.load_pi1()
        ds = self.load_prefs()
        tcfg = self.cfg.train_config(self.mdp)
        meta = self.meta(self.src_method(method))
        if method == "qadapter":
            q, report = train_qadapter(ds, self.mdp, pi1, tcfg)
            rq = q.as_residual_q()
            ser.save_residual_q(self.p("qadapter_q.txt"), rq, meta)
            pi = compose_policy(pi1, rq)
        elif method == "sft":
            pi, report = train_sft(ds, self.mdp, tcfg, init=pi1, return_report=True)
        elif method == "dpo":
            pi, report = train_dpo(ds, self.mdp, pi1, tcfg.beta_dpo, tcfg, return_report=True)
        elif method == "rlhf":
            pi, report = train_rlhf_pipeline(ds, self.mdp, pi1, tcfg.rlhf_alpha, tcfg, return_report=True)
        else:
            raise ConfigError(f"unknown method {method!r}")
        ser.save_policy(self.p(f"{method}_policy.txt"), pi, meta)
        self.write_json(f"{method}_report.json", report.to_dict())
        self.say(f"{method}: final_loss={report.final_loss:.6f} steps={len(report.loss_trace)} "
                 f"wall_clock={report.wall_clock:.2f}s")

    def _eval_settings(self):
        sec = self.cfg.sections["eval"]
        try:
            return int(sec["n_matches"]), int(sec["seed"])
        except ValueError:
            raise ConfigError("[eval] n_matches and seed must be integers") from None

    def evaluate(self, methods):
        r1, r2 = self.load_rewards()
        pi1 = self.load_pi1()
        n_matches, seed = self._eval_settings()
        echo = {name: dict(sec) for name, sec in self.cfg.sections.items() if name != "paths"}
        reports = []
        for method in methods:
            pi = pi1 if method == "base" else self.load_method_policy(method)
            rep = evaluate_policy(pi, self.mdp, r1, r2, pi1, n_matches, seed, method=method, config=echo)
            self.write_json(f"eval_{method}.json", rep.to_dict())
            reports.append(rep)
        return reports

    def eval_cmd(self, all_methods, method):
        if all_methods:
            methods = ["base"] + [m for m in METHODS if self.p(f"{m}_policy.txt").exists()]
        else:
            methods = [method]
        reports = self.evaluate(methods)
        table = format_table(reports)
        if all_methods:
            self.write_json("eval_all.json", [r.to_dict() for r in reports])
            ser.write_text(self.p("eval_table.txt"), table)
        self.say(table.rstrip())

    def sweep(self):
        r1, r2 = self.load_rewards()
        pi1 = self.load_pi1()
        ds = self.load_prefs()
        try:
            alphas = [float(a) for a in self.cfg.get("sweep", "alphas").split(",")]
        except ValueError:
            raise ConfigError("[sweep] alphas must be comma-separated reals") from None
        n_matches, seed = self._eval_settings()
        try:
            rows = alpha_sweep(ds, self.mdp, pi1, r1, r2, alphas, self.cfg.train_config(self.mdp), n_matches, seed)
        except ValueError as exc:
            if isinstance(exc, (ConfigError, DomainError)):
                raise
            raise ConfigError(str(exc)) from None
        trend = trend_summary(rows)
        self.write_json("sweep.json", {"rows": [{"alpha_0": a, **rep.to_dict()} for a, rep in rows], "trend": trend})
        table = format_table(rows, key_name="alpha_0")
        table += "".join(f"{k}={v:+.4f}\n" for k, v in trend.items())
        ser.write_text(self.p("sweep_table.txt"), table)
        self.say(table.rstrip())

    def run_all(self):
        self.make_env()
        self.pretrain()
        self.gen_prefs()
        for m in METHODS:
            self.train(m)
        self.eval_cmd(True, None)
        self.sweep()


def _inline_reward(text, index, key) -> RewardTable:
    try:
        vals = np.array([float(v) for v in text.replace("\n", ",").split(",") if v.strip()])
    except ValueError:
        raise ConfigError(f"[rewards] {key} must be comma-separated reals") from None
    if vals.size != index.num_states * index.vocab_size:
        raise ConfigError(f"[rewards] {key} needs {index.num_states * index.vocab_size} values, got {vals.size}")
    table = vals.reshape(index.shape)
    table[index.terminal] = 0.0
    return RewardTable(table)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qadapter", description="Residual-Q adaptation lab on token MDPs")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("make-env", "pretrain", "gen-prefs", "sweep", "run"):
        sub.add_parser(name).add_argument("config")
    tr = sub.add_parser("train")
    tr.add_argument("config")
    tr.add_argument("method", choices=METHODS)
    ev = sub.add_parser("eval")
    ev.add_argument("config")
    group = ev.add_mutually_exclusive_group()
    group.add_argument("--all", action="store_true", help="evaluate the base policy and every trained method")
    group.add_argument("--method", default="base", choices=("base",) + METHODS)
    return parser


def main(argv=None, out=None) -> int:
    args = build_parser().parse_args(argv)
    out = out or sys.stdout
    try:
        pipe = Pipeline(load_config(args.config), out=out)
        if args.command == "make-env":
            pipe.make_env()
        elif args.command == "pretrain":
            pipe.pretrain()
        elif args.command == "gen-prefs":
            pipe.gen_prefs()
        elif args.command == "train":
            pipe.train(args.method)
        elif args.command == "eval":
            pipe.eval_cmd(args.all, args.method)
        elif args.command == "sweep":
            pipe.sweep()
        elif args.command == "run":
            pipe.run_all()
    except CapacityError as exc:
        print(f"capacity error: {exc}", file=sys.stderr)
        return EXIT_CAPACITY
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, ParseError, DomainError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
