"""Run configuration: a flat INI-style document with four sections.

Example::

    [problem]
    kind = quadratic
    clients = 10
    hetero = 1.0
    sigma = 1.0

    [algo]
    variant = scaffold_m
    beta = auto
    cohort = 4

    [run]
    rounds = 200
    seed = 0

    [output]
    csv_path = run.csv

Every key has a default (see ``FIELDS``); ``auto`` hyperparameters are filled
from the theorem schedules. Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from typing import Any, Callable

from .engine import Variant
from .errors import ConfigError

AUTO = "auto"


def _int(v: str) -> int:
    f = float(v)
    if not f.is_integer():
        raise ValueError("expected an integer")
    return int(f)


def _float(v: str) -> float:
    f = float(v)
    if not math.isfinite(f):
        raise ValueError("expected a finite number")
    return f


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected true or false")


def _str(v: str) -> str:
    return v.strip()


def _auto(conv: Callable[[str], Any]) -> Callable[[str], Any]:
    def parse(v: str):
        return AUTO if v.strip().lower() == AUTO else conv(v)
    return parse


def _cohort(v: str):
    return "all" if v.strip().lower() == "all" else _int(v)


def _optional_path(v: str):
    v = v.strip()
    return v or None


# section -> key -> (parser, default)
FIELDS: dict[str, dict[str, tuple[Callable[[str], Any], Any]]] = {
    "problem": {
        "kind": (_str, "quadratic"),
        "dim": (_int, 20),
        "clients": (_int, 10),
        "hetero": (_float, 1.0),
        "sigma": (_float, 0.0),
        "l_target": (_float, 1.0),
        "mu_min": (_float, 0.1),
        "shared_basis": (_bool, False),
        "skew_alpha": (_float, 0.5),
        "reg": (_float, 1e-3),
        "rows_per_client": (_int, 50),
        "seed": (_auto(_int), AUTO),
    },
    "algo": {
        "variant": (_str, "fedavg_m"),
        "beta": (_auto(_float), AUTO),
        "eta": (_auto(_float), AUTO),
        "gamma": (_auto(_float), AUTO),
        "local_steps": (_int, 16),
        "cohort": (_cohort, "all"),
        "init_batches": (_auto(_int), AUTO),
        "reparameterized": (_bool, False),
        "safety": (_float, 0.1),
        "momentum_cap": (_float, 0.9),
        "delta": (_auto(_float), AUTO),
        "alt_schedule": (_bool, False),
    },
    "run": {
        "rounds": (_int, 200),
        "seed": (_int, 0),
        "replicas": (_int, 1),
        "x0": (_str, "zeros"),
    },
    "output": {
        "csv_path": (_str, "run.csv"),
        "summary_path": (_str, "summary.json"),
        "checkpoint_path": (_optional_path, None),
        "checkpoint_every": (_int, 0),
        "record_timing": (_bool, False),
    },
}

SWEEP_AXES = {
    "beta": ("algo", "beta"),
    "eta": ("algo", "eta"),
    "rounds": ("run", "rounds"),
    "cohort": ("algo", "cohort"),
    "sigma": ("problem", "sigma"),
    "hetero": ("problem", "hetero"),
}


@dataclass
class RunConfig:
    problem: dict = field(default_factory=dict)
    algo: dict = field(default_factory=dict)
    run: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)

    def get(self, dotted: str):
        section, key = dotted.split(".")
        return getattr(self, section)[key]

    def to_dict(self) -> dict:
        return {s: dict(getattr(self, s)) for s in FIELDS}

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        return validate(cls(**{s: dict(doc.get(s, {})) for s in FIELDS}))

    def to_text(self) -> str:
        lines = []
        for section in FIELDS:
            lines.append(f"[{section}]")
            for key, value in getattr(self, section).items():
                if value is None:
                    value = ""
                elif isinstance(value, bool):
                    value = str(value).lower()
                elif isinstance(value, float):
                    value = repr(value)
                lines.append(f"{key} = {value}")
            lines.append("")
        return "\n".join(lines)

    def with_value(self, dotted: str, raw: str) -> "RunConfig":
        """Copy with one key overridden from its textual form."""
        section, key = dotted.split(".")
        if section not in FIELDS or key not in FIELDS[section]:
            raise ConfigError(dotted, "unknown key")
        doc = self.to_dict()
        parser = FIELDS[section][key][0]
        try:
            doc[section][key] = parser(raw)
        except ValueError as exc:
            raise ConfigError(dotted, str(exc)) from None
        return RunConfig.from_dict(doc)


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("<document>", f"malformed config: {exc}") from None
    doc = {}
    for section in cp.sections():
        if section not in FIELDS:
            raise ConfigError(section, "unknown section")
        doc[section] = {}
        for key, raw in cp.items(section):
            if key not in FIELDS[section]:
                raise ConfigError(f"{section}.{key}", "unknown key")
            try:
                doc[section][key] = FIELDS[section][key][0](raw)
            except ValueError as exc:
                raise ConfigError(f"{section}.{key}", f"bad value {raw!r}: {exc}") from None
    return RunConfig.from_dict(doc)


def validate(cfg: RunConfig) -> RunConfig:
    """Fill defaults in place and check cross-field constraints."""
    for section, fields in FIELDS.items():
        values = getattr(cfg, section)
        for key in values:
            if key not in fields:
                raise ConfigError(f"{section}.{key}", "unknown key")
        for key, (_, default) in fields.items():
            values.setdefault(key, default)

    p, a, r = cfg.problem, cfg.algo, cfg.run

    def need(cond: bool, key: str, msg: str):
        if not cond:
            raise ConfigError(key, msg)

    need(p["kind"] in ("quadratic", "logistic"), "problem.kind", "must be quadratic or logistic")
    need(p["dim"] >= 1, "problem.dim", "must be >= 1")
    need(p["clients"] >= 1, "problem.clients", "must be >= 1")
    need(p["hetero"] >= 0, "problem.hetero", "must be >= 0")
    need(p["sigma"] >= 0, "problem.sigma", "must be >= 0")
    need(p["l_target"] > 0, "problem.l_target", "must be > 0")
    need(0 <= p["mu_min"] <= p["l_target"], "problem.mu_min", "must lie in [0, l_target]")
    need(p["skew_alpha"] > 0, "problem.skew_alpha", "must be > 0")
    need(p["reg"] >= 0, "problem.reg", "must be >= 0")
    need(p["rows_per_client"] >= 1, "problem.rows_per_client", "must be >= 1")
    need(p["seed"] == AUTO or p["seed"] >= 0, "problem.seed", "must be >= 0")

    try:
        variant = Variant(a["variant"])
    except ValueError:
        raise ConfigError("algo.variant", f"unknown variant {a['variant']!r}") from None
    if a["beta"] != AUTO:
        if variant.pins_beta and a["beta"] != 1.0:
            raise ConfigError("algo.beta", f"{variant.value} pins beta=1")
        need(0 <= a["beta"] <= 1, "algo.beta", "must lie in [0, 1]")
    for key in ("eta", "gamma", "delta"):
        need(a[key] == AUTO or a[key] > 0, f"algo.{key}", "must be > 0")
    need(a["local_steps"] >= 1, "algo.local_steps", "must be >= 1")
    if a["cohort"] != "all":
        need(1 <= a["cohort"] <= p["clients"], "algo.cohort",
             f"must lie in [1, problem.clients={p['clients']}]")
    need(a["init_batches"] == AUTO or a["init_batches"] >= 0, "algo.init_batches", "must be >= 0")
    need(0 < a["safety"] <= 1, "algo.safety", "must lie in (0, 1]")
    need(0 < a["momentum_cap"] <= 1, "algo.momentum_cap", "must lie in (0, 1]")
    if a["reparameterized"]:
        need(variant in (Variant.FEDAVG_M, Variant.SCAFFOLD_M), "algo.reparameterized",
             "only fedavg_m and scaffold_m have a reparameterized form")
    if p["kind"] == "logistic" and needs_schedule(cfg):
        need(a["delta"] != AUTO, "algo.delta",
             "auto hyperparameters on logistic problems need a user-supplied delta = f(x0) - f*")

    need(r["rounds"] >= 1, "run.rounds", "must be >= 1")
    need(r["seed"] >= 0, "run.seed", "must be >= 0")
    need(r["replicas"] >= 1, "run.replicas", "must be >= 1")
    need(r["x0"] in ("zeros", "equal_energy"), "run.x0", "must be zeros or equal_energy")
    o = cfg.output
    need(o["checkpoint_every"] >= 0, "output.checkpoint_every", "must be >= 0")
    if o["checkpoint_path"] is not None:
        need(r["replicas"] == 1, "output.checkpoint_path", "checkpoints need run.replicas = 1")
    if r["x0"] == "equal_energy":
        need(p["kind"] == "quadratic", "run.x0", "equal_energy start needs a quadratic problem")
    return cfg


def needs_schedule(cfg: RunConfig) -> bool:
    a = cfg.algo
    return any(a[k] == AUTO for k in ("beta", "eta", "gamma", "init_batches"))
