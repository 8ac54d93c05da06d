"""Textual annotation of price windows and forecasting-prompt assembly."""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ParameterError, ValidationError
from .indicators import INDICATOR_NAMES, IndicatorConfig, IndicatorPanel, WindowStats, compute_panel, window_stats
from .market import PriceWindow

STAT_NAMES = ("mean", "min", "max", "first", "last")
INSTRUCTION_HEADER = "### Instruction"
UNAVAILABLE = "unavailable"
DEFAULT_PROMPT_BUDGET = 4000

_BUILTIN_TEMPLATES = ("default", "terse")


@dataclass(frozen=True)
class AnnotationReport:
    stats: WindowStats
    panel_tail: dict[str, float | None]
    text: str


@dataclass(frozen=True)
class Prompt:
    raw_series_text: str
    annotation_text: str
    instruction: str
    text: str
    horizon: int

    def series_values(self) -> np.ndarray:
        return np.array([float(v) for v in self.raw_series_text.split(",")])

    @classmethod
    def from_text(cls, text: str, horizon: int) -> Prompt:
        """Recover the structured prompt from its rendered text (used by out-of-process policies)."""
        series = _section(text, "### Series")
        annotations = _section(text, "### Annotations")
        instruction = _section(text, INSTRUCTION_HEADER)
        return cls(series, annotations, instruction, text, horizon)


def _section(text: str, header: str) -> str:
    start = text.find(header)
    if start < 0:
        raise ValidationError(f"prompt has no {header!r} section")
    body = text[start + len(header):]
    nxt = body.find("\n### ")
    return (body if nxt < 0 else body[:nxt]).strip()


def _fmt(v: float | None) -> str:
    return UNAVAILABLE if v is None else f"{v:.4f}"


def annotate(window: PriceWindow, history=None, config: IndicatorConfig | None = None,
             panel: IndicatorPanel | None = None) -> AnnotationReport:
    """Statistics of the window plus each indicator's latest value, rendered in fixed order.

    Indicators use the full ``history`` up to the anchor (long lookbacks such as MACD(12, 26)
    cannot fit inside a short window). A precomputed ``panel`` over a longer series may be
    passed instead; indicators are causal so its value at the anchor is the same.
    """
    if window.length == 0:
        raise ValidationError("cannot annotate an empty window")
    history = history if history is not None else (window.history if window.history is not None else window.bars)
    if len(history) == 0 or history.dates[-1] != window.anchor:
        raise ValidationError("history must end at the window anchor")
    stats = window_stats(window.bars.adj_close)
    if panel is None:
        tail = compute_panel(history, config).latest()
    else:
        i = int(np.searchsorted(panel.dates, window.anchor))
        if i >= len(panel.dates) or panel.dates[i] != window.anchor:
            raise ValidationError("panel does not cover the window anchor")
        tail = {k: None if np.isnan(panel.series[k][i]) else float(panel.series[k][i]) for k in INDICATOR_NAMES}
    text = (
        "Statistics: " + ", ".join(f"{k}={_fmt(v)}" for k, v in zip(STAT_NAMES, stats)) + "\n"
        + "Indicators: " + ", ".join(f"{k}={_fmt(tail[k])}" for k in INDICATOR_NAMES)
    )
    return AnnotationReport(stats, tail, text)


_FIELD = re.compile(r"([A-Za-z]+)=(-?\d+\.\d+|" + UNAVAILABLE + ")")


def parse_annotation(text: str) -> dict[str, float | None]:
    """Inverse of the rendering in annotate(); values come back rounded to 4 decimals."""
    return {k: None if v == UNAVAILABLE else float(v) for k, v in _FIELD.findall(text)}


def load_template(template: str) -> str:
    if template in _BUILTIN_TEMPLATES:
        return resources.files("vta").joinpath("templates", f"{template}.txt").read_text()
    path = Path(template)
    if path.suffix == ".txt" and path.is_file():
        return path.read_text()
    raise ParameterError(f"unknown prompt template {template!r}")


def render_series(values) -> str:
    return ", ".join(f"{v:.4f}" for v in values)


def build_prompt(window: PriceWindow, report: AnnotationReport, template: str = "default",
                 horizon: int = 10, budget: int = DEFAULT_PROMPT_BUDGET) -> Prompt:
    body = load_template(template)
    series_text = render_series(window.normalized_prices())
    text = body.format(series=series_text, annotations=report.text, horizon=horizon)
    if text.count(INSTRUCTION_HEADER) != 1:
        raise ValidationError(f"template {template!r} must contain exactly one instruction block")
    if len(text) > budget:
        raise ValidationError(f"prompt is {len(text)} characters, over the budget of {budget}")
    instruction = _section(text, INSTRUCTION_HEADER)
    return Prompt(series_text, report.text, instruction, text, horizon)
