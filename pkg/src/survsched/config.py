"""TOML run configuration: scenario, agents, solver, training and sweep tables.

A config file looks like::

    [scenario]
    id = "223"
    tau = 8
    discount = 0.9

    [[agents]]
    p = 0.001
    C = 2

    [vi]
    epsilon = 1e-6

    [sweep]
    schedulers = ["rr", "pq", "ol", "vi"]
    tau = [3, 4, 5, 6, 7, 8, 9, 10, 11, 12]
    horizon = 1000000

Every table except ``[scenario]`` and ``[[agents]]`` is optional.
``parse_config(to_dict(cfg)) == cfg`` holds for every resolved config.
"""
from __future__ import annotations

import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from .dqn import TrainConfig, preset
from .model import AgentConfig, ScenarioConfig
from .solver import VIParams

BUILTIN_SCHEDULERS = ("rr", "pq", "ol", "vi")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SweepConfig:
    schedulers: tuple = ()
    tau: tuple = ()
    horizon: int = 1_000_000
    seeds: tuple = (0,)
    tie_break: str = "random"
    workers: int = 1
    # scheduler id -> network file, for learned schedulers
    networks: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "schedulers", tuple(str(s) for s in self.schedulers))
        object.__setattr__(self, "tau", tuple(int(t) for t in self.tau))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "networks", {str(k): str(v) for k, v in dict(self.networks).items()})
        if self.horizon < 1:
            raise ConfigError("sweep.horizon must be >= 1")
        if any(t < 1 for t in self.tau):
            raise ConfigError("sweep.tau values must be positive")
        if any(s < 0 for s in self.seeds):
            raise ConfigError("sweep.seeds must be unsigned")
        if self.tie_break not in ("random", "lowest"):
            raise ConfigError("sweep.tie_break must be 'random' or 'lowest'")
        if self.workers < 1:
            raise ConfigError("sweep.workers must be >= 1")
        for s in self.schedulers:
            if s not in BUILTIN_SCHEDULERS and s not in self.networks:
                raise ConfigError(f"scheduler {s!r} is neither built in nor listed under [sweep.networks]")

    def __hash__(self):
        return hash((self.schedulers, self.tau, self.horizon, self.seeds, self.tie_break, self.workers,
                     tuple(sorted(self.networks.items()))))


@dataclass(frozen=True)
class RunConfig:
    scenario: ScenarioConfig
    scenario_id: str = ""
    vi: VIParams = VIParams()
    dqn: TrainConfig | None = None
    sweep: SweepConfig = SweepConfig()


def _only(table: dict, allowed, where: str) -> None:
    extra = set(table) - set(allowed)
    if extra:
        raise ConfigError(f"unknown keys in [{where}]: {', '.join(sorted(extra))}")


def parse_train_config(table: dict) -> TrainConfig:
    table = dict(table)
    names = {f.name for f in fields(TrainConfig)}
    _only(table, names | {"preset"}, "dqn")
    name = table.pop("preset", None)
    try:
        return preset(name, **table) if name else TrainConfig(**table)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[dqn]: {exc}") from exc


def parse_config(doc: dict) -> RunConfig:
    """Validate a decoded TOML document into a RunConfig; raises ConfigError."""
    _only(doc, ("scenario", "agents", "vi", "dqn", "sweep"), "top level")
    if "scenario" not in doc or "agents" not in doc:
        raise ConfigError("config needs a [scenario] table and at least one [[agents]] entry")
    sc = dict(doc["scenario"])
    _only(sc, ("id", "tau", "discount", "seed", "expiry"), "scenario")
    try:
        agents = []
        for a in doc["agents"]:
            _only(a, ("p", "C", "gamma"), "agents")
            agents.append(AgentConfig(float(a["p"]), int(a["C"]), int(a.get("gamma", 1))))
        if "tau" not in sc:
            raise ConfigError("[scenario] needs tau")
        scenario = ScenarioConfig(tuple(agents), sc["tau"], float(sc.get("discount", 0.9)),
                                  int(sc.get("seed", 0)), str(sc.get("expiry", "persistent")))
        vi_tab = dict(doc.get("vi", {}))
        _only(vi_tab, ("epsilon", "max_iterations"), "vi")
        vi = VIParams(**vi_tab)
        dqn = parse_train_config(doc["dqn"]) if "dqn" in doc else None
        sw = dict(doc.get("sweep", {}))
        _only(sw, {f.name for f in fields(SweepConfig)}, "sweep")
        sweep = SweepConfig(**sw)
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(scenario, str(sc.get("id", "")), vi, dqn, sweep)


def to_dict(cfg: RunConfig) -> dict:
    """Fully resolved TOML-ready form; defaults are written out explicitly."""
    s = cfg.scenario
    doc = {
        "scenario": {"id": cfg.scenario_id, "tau": s.tau, "discount": s.discount, "seed": s.seed,
                     "expiry": s.expiry},
        "agents": [{"p": a.p, "C": a.C, "gamma": a.gamma} for a in s.agents],
        "vi": asdict(cfg.vi),
    }
    if cfg.dqn is not None:
        doc["dqn"] = {k: (list(v) if isinstance(v, tuple) else v)
                      for k, v in asdict(cfg.dqn).items() if v is not None}
    sw = cfg.sweep
    doc["sweep"] = {"schedulers": list(sw.schedulers), "tau": list(sw.tau), "horizon": sw.horizon,
                    "seeds": list(sw.seeds), "tie_break": sw.tie_break, "workers": sw.workers,
                    "networks": dict(sw.networks)}
    return doc


def dumps(cfg: RunConfig) -> str:
    return tomli_w.dumps(to_dict(cfg))


def loads(text: str) -> RunConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"not valid TOML: {exc}") from exc
    return parse_config(doc)


def load_config(path) -> RunConfig:
    """Read a TOML config, or the config echoed inside a run manifest (``.json``)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    if path.suffix == ".json":
        try:
            return parse_config(json.loads(text)["config"])
        except (json.JSONDecodeError, KeyError) as exc:
            raise ConfigError(f"{path} is not a run manifest: {exc}") from exc
    return loads(text)


def load_train_config(path) -> TrainConfig:
    try:
        doc = tomllib.loads(Path(path).read_text())
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read training config {path}: {exc}") from exc
    return parse_train_config(doc.get("dqn", doc))
