"""Run configuration: one section per module, loaded from TOML or JSON, unknown keys rejected."""

from __future__ import annotations

import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .backbone import BackboneConfig
from .errors import ConfigError, ValidationError
from .grpo import GrpoConfig, PipelineConfig
from .guidance import GuidanceConfig
from .indicators import IndicatorConfig
from .policy import ToyPolicyConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass(frozen=True)
class MarketConfig:
    symbols: int = 3
    days: int = 400
    # symbol i of n drifts at drift + drift_spread * (i - (n - 1) / 2)
    drift: float = 0.0
    drift_spread: float = 0.005
    volatility: float = 0.005
    ar: float = 0.2
    start_price: float = 100.0
    start_date: str = "2020-01-01"
    window: int = 10
    horizon: int = 10
    stride: int = 1
    val_frac: float = 0.15
    test_frac: float = 0.15

    def __post_init__(self):
        if self.symbols < 1 or self.days < 1:
            raise ConfigError("market.symbols and market.days must be >= 1")
        if self.window < 1 or self.horizon < 1 or self.stride < 1:
            raise ConfigError("market.window, market.horizon and market.stride must be >= 1")
        if not self.volatility >= 0 or not -1 < self.ar < 1:
            raise ConfigError("market.volatility must be >= 0 and market.ar in (-1, 1)")
        if not (0 <= self.val_frac < 1 and 0 <= self.test_frac < 1 and self.val_frac + self.test_frac < 1):
            raise ConfigError("market.val_frac + market.test_frac must be < 1")


@dataclass(frozen=True)
class AnnotationConfig:
    template: str = "default"
    budget: int = 4000


@dataclass(frozen=True)
class ReasonerConfig:
    """Pipeline schedule; the per-update hyperparameters live in [grpo]."""

    stage1_steps: int = 40
    stage3_steps: int = 120
    rollouts_per_task: int = 8
    rejection_percentile: float = 0.10
    rejection_min_bucket: int = 10
    sft_epochs: int = 200
    sft_lr: float = 0.05
    sft_init: str = "base"
    task_stride: int = 2
    max_rejection_tasks: int | None = None

    def __post_init__(self):
        if self.task_stride < 1:
            raise ConfigError("reasoner.task_stride must be >= 1")


@dataclass(frozen=True)
class PortfolioConfig:
    kappa: float = 5.0
    cost_bps: float = 0.0

    def __post_init__(self):
        if not self.kappa >= 0 or not self.cost_bps >= 0:
            raise ConfigError("portfolio.kappa and portfolio.cost_bps must be >= 0")


SECTIONS = {
    "market": MarketConfig,
    "indicators": IndicatorConfig,
    "annotation": AnnotationConfig,
    "policy": ToyPolicyConfig,
    "grpo": GrpoConfig,
    "reasoner": ReasonerConfig,
    "backbone": BackboneConfig,
    "guidance": GuidanceConfig,
    "portfolio": PortfolioConfig,
}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "run"
    market: MarketConfig = field(default_factory=MarketConfig)
    indicators: IndicatorConfig = field(default_factory=IndicatorConfig)
    annotation: AnnotationConfig = field(default_factory=AnnotationConfig)
    policy: ToyPolicyConfig = field(default_factory=ToyPolicyConfig)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    reasoner: ReasonerConfig = field(default_factory=ReasonerConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    portfolio: PortfolioConfig = field(default_factory=PortfolioConfig)

    def __post_init__(self):
        m, b, p = self.market, self.backbone, self.policy
        if (b.window, b.horizon) != (m.window, m.horizon) or (p.window, p.horizon) != (m.window, m.horizon):
            raise ConfigError("backbone and policy window/horizon must match market.window/horizon")

    def pipeline(self) -> PipelineConfig:
        r = self.reasoner
        return PipelineConfig(self.grpo, r.stage1_steps, r.stage3_steps, r.rollouts_per_task,
                              r.rejection_percentile, r.rejection_min_bucket, r.sft_epochs, r.sft_lr,
                              r.sft_init, r.max_rejection_tasks)

    def to_dict(self) -> dict:
        return asdict(self)

    def with_seed(self, seed: int | None) -> RunConfig:
        return self if seed is None else replace(self, seed=seed)


def _section(name: str, cls, values, shared: dict):
    if not isinstance(values, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    try:
        return cls(**{**{k: v for k, v in shared.items() if k in known and k not in values}, **values})
    except ValidationError as exc:
        raise ConfigError(f"[{name}] {exc}") from exc
    except TypeError as exc:
        raise ConfigError(f"[{name}] {exc}") from exc


def from_dict(data: dict) -> RunConfig:
    unknown = sorted(set(data) - set(SECTIONS) - {"seed", "out"})
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed must be an integer")
    market = _section("market", MarketConfig, data.get("market", {}), {})
    # window/horizon are set once under [market] and inherited by the sections that need them
    shared = {"window": market.window, "horizon": market.horizon, "seed": seed}
    sections = {name: _section(name, cls, data.get(name, {}), shared) for name, cls in SECTIONS.items()
                if name != "market"}
    try:
        return RunConfig(seed=seed, out=str(data.get("out", "run")), market=market, **sections)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    text = path.read_text()
    try:
        data = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return from_dict(data)
