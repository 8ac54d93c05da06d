import re

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from vta.annotation import annotate, build_prompt, parse_annotation, render_series
from vta.errors import ParameterError, ValidationError
from vta.indicators import INDICATOR_NAMES, compute_panel
from vta.market import Regime, make_windows, synth_market


def flat_pair():
    s = synth_market(0, 40, Regime(drift=0.0, volatility=0.0, start_price=1.0))
    return make_windows(s, 10, 10)[-1]


def test_constant_window():
    p = flat_pair()
    rep = annotate(p.window)
    assert "mean=1.0000" in rep.text
    vals = parse_annotation(rep.text)
    assert vals["BollingerUpper"] == vals["BollingerLower"] == 1.0
    assert vals["RSI"] == 100.0  # zero average loss


def test_unavailable_when_lookback_unmet():
    s = synth_market(1, 20)
    p = make_windows(s, 10, 10)[0]
    vals = parse_annotation(annotate(p.window).text)
    assert vals["MACD"] is None and vals["BollingerUpper"] is None
    assert vals["SMA"] is not None


def test_annotation_deterministic():
    p = make_windows(synth_market(2, 80), 10, 10)[30]
    assert annotate(p.window).text == annotate(p.window).text


@given(seed=st.integers(0, 5000), k=st.integers(0, 40))
def test_every_number_reproduced_by_indicators(seed, k):
    s = synth_market(seed, 80)
    w = make_windows(s, 10, 10)[k].window
    vals = parse_annotation(annotate(w).text)
    stats = oracles.window_stats(list(w.bars.adj_close))
    for name, v in zip(("mean", "min", "max", "first", "last"), stats):
        assert vals[name] == round(v, 4)
    panel = compute_panel(w.history)
    i = len(w.history) - 1
    for name in INDICATOR_NAMES:
        v = panel.series[name][i]
        assert vals[name] == (None if np.isnan(v) else float(f"{v:.4f}"))
    assert len(re.findall(r"=", annotate(w).text)) == 5 + len(INDICATOR_NAMES)


def test_history_must_end_at_anchor():
    p = make_windows(synth_market(3, 40), 10, 10)[0]
    with pytest.raises(ValidationError):
        annotate(p.window, history=synth_market(3, 40))


def test_prompt_contents():
    pairs = make_windows(synth_market(4, 60), 10, 10)
    a, b = pairs[5], pairs[6]
    pa = build_prompt(a.window, annotate(a.window))
    assert len(pa.series_values()) == 10
    assert pa.raw_series_text in pa.text and pa.annotation_text in pa.text
    assert pa.text.count("### Instruction") == 1 and "FORECAST:" in pa.instruction
    assert pa.text != build_prompt(b.window, annotate(b.window)).text
    assert pa.text == build_prompt(a.window, annotate(a.window)).text
    assert build_prompt(a.window, annotate(a.window), "terse").text != pa.text


def test_prompt_errors(tmp_path):
    p = make_windows(synth_market(5, 40), 10, 10)[0]
    rep = annotate(p.window)
    with pytest.raises(ParameterError):
        build_prompt(p.window, rep, "nope")
    with pytest.raises(ValidationError):
        build_prompt(p.window, rep, budget=50)
    twice = tmp_path / "twice.txt"
    twice.write_text("### Instruction\na\n### Instruction\nb {series} {annotations} {horizon}")
    with pytest.raises(ValidationError):
        build_prompt(p.window, rep, str(twice))


def test_custom_template(tmp_path):
    t = tmp_path / "mine.txt"
    t.write_text("### Series\n{series}\n### Annotations\n{annotations}\n### Instruction\nGive {horizon} values.")
    p = make_windows(synth_market(6, 40), 10, 10)[0]
    pr = build_prompt(p.window, annotate(p.window), str(t), horizon=7)
    assert pr.instruction == "Give 7 values."


def test_render_series_round_trip():
    v = np.random.default_rng(0).random(10)
    back = np.array([float(x) for x in render_series(v).split(",")])
    assert np.all(np.abs(back - v) <= 5e-5)
