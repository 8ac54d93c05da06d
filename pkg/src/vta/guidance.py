"""Attribute conditioning of the backbone forecast and classifier-free style guidance."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch
from torch import nn

from .backbone import DTYPE, Backbone, forecast_uncond, load_state, pairs_to_arrays, save_module
from .errors import DivergenceError, ParameterError, ValidationError
from .grpo import Task
from .market import WindowPair
from .policy import SequencePolicy, parse_output

ATTRIBUTES = ("max", "min", "mean")


@dataclass(frozen=True)
class AttributeClass:
    max: float = 0.0
    min: float = 0.0
    mean: float = 0.0
    null_flag: bool = False

    def __post_init__(self):
        if self.null_flag:
            return
        vals = (self.max, self.min, self.mean)
        if not all(math.isfinite(v) for v in vals):
            raise ValidationError("attribute values must be finite")
        # a mean computed in floating point can land an ulp outside [min, max]
        slack = 1e-12 * max(1.0, abs(self.max), abs(self.min))
        if not self.min - slack <= self.mean <= self.max + slack:
            raise ValidationError(f"need min <= mean <= max, got {self.min}, {self.mean}, {self.max}")

    def vector(self) -> np.ndarray:
        return np.array([self.max, self.min, self.mean])

    def to_dict(self) -> dict | None:
        return None if self.null_flag else {"max": self.max, "min": self.min, "mean": self.mean}


NULL = AttributeClass(null_flag=True)


def extract_attributes(forecast) -> AttributeClass:
    """max / min / mean of a forecast; a missing forecast (failed parse) maps to the null class."""
    if forecast is None:
        return NULL
    f = np.asarray(forecast, dtype=float)
    if f.size == 0 or not np.all(np.isfinite(f)):
        raise ValidationError("forecast must be a non-empty finite sequence")
    return AttributeClass(float(f.max()), float(f.min()), float(f.mean()))


def drop_condition(c: AttributeClass, p_uncond: float, seed: int, index: int = 0) -> AttributeClass:
    """The null class with probability p_uncond, else c; one independent stream per (seed, index)."""
    if not 0 <= p_uncond <= 1:
        raise ParameterError("p_uncond must lie in [0, 1]")
    u = np.random.default_rng([seed, index]).random()
    return NULL if u < p_uncond else c


@dataclass(frozen=True)
class GuidanceConfig:
    p_uncond: float = 0.3
    s: float = 0.1
    epochs: int = 150
    learning_rate: float = 5e-3
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.p_uncond <= 1:
            raise ParameterError("p_uncond must lie in [0, 1]")
        if not math.isfinite(self.s):
            raise ParameterError("guidance scale must be finite")
        if self.epochs < 0 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ParameterError("need epochs >= 0, batch_size >= 1 and learning_rate > 0")


class ConditionalHead(nn.Module):
    """Each attribute, broadcast to the horizon and concatenated with the unconditional forecast,
    goes through its own linear layer; a projection aggregates the three into a correction that is
    added to the unconditional forecast. The projection starts at zero, so an untrained head
    reproduces the unconditional forecast."""

    def __init__(self, horizon: int = 10):
        super().__init__()
        self.horizon = horizon
        self.labels = nn.ModuleList(nn.Linear(2 * horizon, horizon, dtype=DTYPE) for _ in ATTRIBUTES)
        self.aggregate = nn.Linear(len(ATTRIBUTES) * horizon, horizon, dtype=DTYPE)
        nn.init.zeros_(self.aggregate.weight)
        nn.init.zeros_(self.aggregate.bias)
        self.null = nn.Parameter(torch.zeros(len(ATTRIBUTES), dtype=DTYPE))

    def forward(self, y_phi: torch.Tensor, attrs: torch.Tensor, is_null: torch.Tensor) -> torch.Tensor:
        """y_phi (B, T'), attrs (B, 3), is_null (B,) bool."""
        values = torch.where(is_null[:, None], self.null.expand_as(attrs), attrs)
        parts = [layer(torch.cat([y_phi, values[:, j:j + 1].expand(-1, self.horizon)], dim=1))
                 for j, layer in enumerate(self.labels)]
        return y_phi + self.aggregate(torch.cat(parts, dim=1))


def build_head(horizon: int = 10, seed: int = 0) -> ConditionalHead:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ConditionalHead(horizon)


def _encode(conds: Sequence[AttributeClass]) -> tuple[torch.Tensor, torch.Tensor]:
    attrs = torch.as_tensor(np.array([np.zeros(3) if c.null_flag else c.vector() for c in conds]).reshape(-1, 3),
                            dtype=DTYPE)
    return attrs, torch.as_tensor([c.null_flag for c in conds], dtype=torch.bool)


def conditional_forward(head: ConditionalHead, y_phi, c: AttributeClass | Sequence[AttributeClass]) -> np.ndarray:
    single = isinstance(c, AttributeClass)
    y = torch.as_tensor(np.atleast_2d(np.asarray(y_phi, dtype=float)), dtype=DTYPE)
    conds = [c] if single else list(c)
    if y.shape != (len(conds), head.horizon):
        raise ValidationError(f"expected {len(conds)} forecasts of length {head.horizon}, got {tuple(y.shape)}")
    if not torch.isfinite(y).all():
        raise ValidationError("unconditional forecast contains non-finite values")
    with torch.no_grad():
        out = head(y, *_encode(conds)).numpy()
    if not np.all(np.isfinite(out)):
        raise DivergenceError("conditional head produced non-finite output")
    return out[0] if single else out


def oracle_attributes(pairs: Sequence[WindowPair]) -> list[AttributeClass]:
    """Attributes of the ground-truth targets, the best case for conditioning."""
    return [extract_attributes(p.normalized_target()) for p in pairs]


class ReasonerView(NamedTuple):
    attributes: AttributeClass
    trace: str | None
    forecast: np.ndarray | None


def reasoner_attributes(policy: SequencePolicy, params, tasks: Sequence[Task]) -> list[ReasonerView]:
    """Greedy reasoning output per task, reduced to its attribute class."""
    out = []
    for task in tasks:
        text = policy.greedy(params, task.prompt).text
        trace, forecast, ok = parse_output(text, len(task.target))
        out.append(ReasonerView(extract_attributes(forecast if ok else None), trace, forecast if ok else None))
    return out


class JointPoint(NamedTuple):
    epoch: int
    train_mse: float
    val_mse: float


def train_joint(head: ConditionalHead, backbone: Backbone, train: Sequence[WindowPair],
                train_attrs: Sequence[AttributeClass], cfg: GuidanceConfig | None = None, seed: int | None = None,
                val: Sequence[WindowPair] = (), val_attrs: Sequence[AttributeClass] = ()) -> list[JointPoint]:
    """MSE of the conditional forecast against the target, with conditions dropped at p_uncond.

    The backbone is frozen; only the head trains (in place). Validation MSE is measured on the
    conditional forecast with the undropped validation attributes.
    """
    cfg = cfg or GuidanceConfig()
    seed = cfg.seed if seed is None else seed
    if len(train) != len(train_attrs) or len(val) != len(val_attrs):
        raise ValidationError("need exactly one attribute class per window")
    if cfg.epochs == 0:
        return []
    if not train:
        raise ValidationError("no training windows")
    xt, yt = pairs_to_arrays(train)
    phi_t = torch.as_tensor(forecast_uncond(backbone, xt))
    y_t = torch.as_tensor(yt, dtype=DTYPE)
    if val:
        xv, yv = pairs_to_arrays(val)
        phi_v = forecast_uncond(backbone, xv)
    opt = torch.optim.Adam(head.parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng([seed, 1])
    n = len(train)
    curve = []
    for epoch in range(cfg.epochs):
        conds = [drop_condition(c, cfg.p_uncond, seed, epoch * n + i) for i, c in enumerate(train_attrs)]
        attrs, is_null = _encode(conds)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = torch.as_tensor(order[start:start + cfg.batch_size])
            opt.zero_grad()
            loss = torch.mean((head(phi_t[idx], attrs[idx], is_null[idx]) - y_t[idx]) ** 2)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite joint-training loss at epoch {epoch}", epoch)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        val_mse = float(np.mean((conditional_forward(head, phi_v, val_attrs) - yv) ** 2)) if val else float("nan")
        curve.append(JointPoint(epoch, total / n, val_mse))
    return curve


def write_curve(curve: Sequence[JointPoint], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "train_mse", "val_mse"))
        for p in curve:
            w.writerow((p.epoch, repr(p.train_mse), repr(p.val_mse)))


def combine(y_uncond, y_cond, s: float) -> np.ndarray:
    """y_uncond + s * (y_cond - y_uncond), evaluated as (1 - s) * y_uncond + s * y_cond so that
    s = 0 and s = 1 return the inputs bit for bit."""
    a, b = np.asarray(y_uncond, dtype=float), np.asarray(y_cond, dtype=float)
    return (1.0 - s) * a + s * b


@dataclass
class GuidedForecast:
    y_uncond: np.ndarray
    y_cond: np.ndarray
    y_final: np.ndarray
    s: float
    attributes: AttributeClass
    trace: str | None = None
    symbol: str = ""
    anchor: str = ""

    def to_dict(self) -> dict:
        return {"symbol": self.symbol, "anchor": self.anchor, "y_uncond": self.y_uncond.tolist(),
                "y_cond": self.y_cond.tolist(), "y_final": self.y_final.tolist(), "s": self.s,
                "attributes": self.attributes.to_dict(), "trace": self.trace}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> GuidedForecast:
        attrs = NULL if d["attributes"] is None else AttributeClass(**d["attributes"])
        return cls(np.array(d["y_uncond"]), np.array(d["y_cond"]), np.array(d["y_final"]), d["s"], attrs,
                   d.get("trace"), d.get("symbol", ""), d.get("anchor", ""))


def guided_forecast(backbone: Backbone, head: ConditionalHead, features, c: AttributeClass, s: float,
                    trace: str | None = None, symbol: str = "", anchor: str = "") -> GuidedForecast:
    y_phi = forecast_uncond(backbone, np.asarray(features, dtype=float)[None])[0]
    y_psi = conditional_forward(head, y_phi, c)
    return GuidedForecast(y_phi, y_psi, combine(y_phi, y_psi, s), float(s), c, trace, symbol, anchor)


def save_head(head: ConditionalHead, path) -> None:
    save_module(head, {"kind": "conditional-head", "horizon": head.horizon}, path)


def load_head(path) -> ConditionalHead:
    meta, state = load_state(path)
    if meta.get("kind") != "conditional-head":
        raise ValidationError(f"{path} is not a conditional-head checkpoint")
    head = ConditionalHead(meta["horizon"])
    head.load_state_dict(state)
    return head
