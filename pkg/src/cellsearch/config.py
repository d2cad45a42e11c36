"""Run configuration: a versioned JSON document with one section per command.

Every section is optional in the file; missing keys take the defaults of the
corresponding dataclass.  Unknown keys are rejected so typos surface early.
Randomness flows from the single top-level ``seed``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from .data import DatasetSpec
from .evaluation import EvalConfig
from .exceptions import ConfigError
from .search import NetworkConfig, OptimizerConfig, StagePlan, StageSpec

CONFIG_VERSION = 1
PLAN_PRESETS = ("desk", "full")


@dataclass(frozen=True)
class RefineConfig:
    m_skip: int = 2
    cell_types: Tuple[str, ...] = ("normal",)

    def __post_init__(self):
        object.__setattr__(self, "cell_types", tuple(self.cell_types))
        if self.m_skip < 0:
            raise ConfigError(f"m_skip must be >= 0, got {self.m_skip}")
        bad = set(self.cell_types) - {"normal", "reduce"}
        if bad or not self.cell_types:
            raise ConfigError(f"refine.cell_types must be a non-empty subset of normal/reduce, got {self.cell_types}")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "skip_sweep"
    seeds: Tuple[int, ...] = (0, 1, 2)
    m_values: Tuple[int, ...] = (0, 1, 2, 3, 4)
    random_repeats: int = 3

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(self.seeds))
        object.__setattr__(self, "m_values", tuple(self.m_values))
        if self.name not in ("random_space", "skip_sweep", "depth_gap"):
            raise ConfigError(f"unknown experiment {self.name!r}")
        if self.random_repeats < 1 or not self.seeds:
            raise ConfigError("need at least one seed and one random repeat")


@dataclass(frozen=True)
class SearchSection:
    plan: Any = "desk"
    dropout: Optional[Tuple[float, ...]] = None
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)

    def resolve_plan(self) -> StagePlan:
        if isinstance(self.plan, StagePlan):
            return self.plan
        if self.plan == "desk":
            return StagePlan.desk(self.dropout) if self.dropout else StagePlan.desk()
        if self.plan == "full":
            return StagePlan.full_scale(self.dropout) if self.dropout else StagePlan.full_scale()
        if isinstance(self.plan, dict):
            plan = _build(StagePlan, self.plan, "search.plan")
            if self.dropout:
                return StagePlan(tuple(dataclasses.replace(s, init_skip_dropout=float(p))
                                       for s, p in zip(plan.stages, self.dropout)))
            return plan
        raise ConfigError(f"search.plan must be one of {PLAN_PRESETS} or a stage list, got {self.plan!r}")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    search: SearchSection = field(default_factory=SearchSection)
    refine: RefineConfig = field(default_factory=RefineConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    @classmethod
    def from_dict(cls, d: Dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        d = dict(d)
        version = d.pop("schema_version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config schema_version {version!r}")
        _reject_unknown(d, cls, "")
        kw: Dict[str, Any] = {}
        if "seed" in d:
            kw["seed"] = _int(d["seed"], "seed")
        if "dataset" in d:
            kw["dataset"] = _build(DatasetSpec, d["dataset"], "dataset")
        if "search" in d:
            s = d["search"]
            _reject_unknown(s, SearchSection, "search.")
            skw = {}
            if "plan" in s:
                skw["plan"] = s["plan"]
            if s.get("dropout") is not None:
                skw["dropout"] = tuple(float(v) for v in s["dropout"])
            if "optimizer" in s:
                skw["optimizer"] = _build(OptimizerConfig, s["optimizer"], "search.optimizer")
            if "network" in s:
                skw["network"] = _build(NetworkConfig, s["network"], "search.network")
            kw["search"] = SearchSection(**skw)
            kw["search"].resolve_plan()
        for name, typ in (("refine", RefineConfig), ("eval", EvalConfig), ("experiment", ExperimentConfig)):
            if name in d:
                kw[name] = _build(typ, d[name], name)
        return cls(**kw)

    def to_dict(self) -> Dict:
        plan = self.search.resolve_plan()
        return {
            "schema_version": CONFIG_VERSION,
            "seed": self.seed,
            "dataset": dataclasses.asdict(self.dataset),
            "search": {
                "plan": plan.to_dict(),
                "optimizer": _listify(dataclasses.asdict(self.search.optimizer)),
                "network": dataclasses.asdict(self.search.network),
            },
            "refine": _listify(dataclasses.asdict(self.refine)),
            "eval": dataclasses.asdict(self.eval),
            "experiment": _listify(dataclasses.asdict(self.experiment)),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def _listify(d):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _reject_unknown(d, typ, prefix):
    if not isinstance(d, dict):
        raise ConfigError(f"section {prefix.rstrip('.') or 'root'} must be an object")
    known = {f.name for f in dataclasses.fields(typ)}
    for k in d:
        if k not in known:
            raise ConfigError(f"unknown config key {prefix}{k}")


def _int(v, where):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{where} must be an integer, got {v!r}")
    return v


def _build(typ, d, where):
    _reject_unknown(d, typ, where + ".")
    if typ is StagePlan:
        stages = d.get("stages")
        if not isinstance(stages, list):
            raise ConfigError(f"{where}.stages must be a list")
        for k, s in enumerate(stages):
            _reject_unknown(s, StageSpec, f"{where}.stages[{k}].")
    try:
        return typ(**d)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_config(path) -> RunConfig:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return RunConfig.from_dict(d)


def with_overrides(cfg: RunConfig, *, seed: Optional[int] = None, plan: Optional[str] = None,
                   m_skip: Optional[int] = None, dataset: Optional[DatasetSpec] = None) -> RunConfig:
    """Apply command-line overrides on top of a loaded config."""
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    if plan is not None:
        if plan not in PLAN_PRESETS:
            raise ConfigError(f"--plan must be one of {PLAN_PRESETS}")
        cfg = dataclasses.replace(cfg, search=dataclasses.replace(cfg.search, plan=plan))
    if m_skip is not None:
        cfg = dataclasses.replace(cfg, refine=dataclasses.replace(cfg.refine, m_skip=m_skip))
    if dataset is not None:
        cfg = dataclasses.replace(cfg, dataset=dataset)
    return cfg
