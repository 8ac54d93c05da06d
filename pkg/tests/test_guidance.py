import json

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from conftest import module_fd_check, tiny_backbone
from vta.errors import ParameterError, ValidationError
from vta.guidance import (NULL, AttributeClass, GuidanceConfig, GuidedForecast, build_head, combine,
                          conditional_forward, drop_condition, extract_attributes, guided_forecast, load_head,
                          oracle_attributes, reasoner_attributes, save_head, train_joint)
from vta.market import Regime, make_windows, split_pairs, synth_market
from vta.policy import CategoricalPolicy

finite = st.floats(-1e3, 1e3)


def test_extract_attributes():
    a = extract_attributes([1, 3, 2])
    assert (a.max, a.min, a.mean, a.null_flag) == (3.0, 1.0, 2.0, False)
    c = extract_attributes([0.7] * 10)
    assert c.max == c.min == 0.7 and c.mean == pytest.approx(0.7, abs=1e-15)
    assert extract_attributes(None) is NULL and NULL.null_flag
    with pytest.raises(ValidationError):
        extract_attributes([1.0, float("nan")])
    with pytest.raises(ValidationError):
        AttributeClass(1.0, 0.0, 2.0)


@given(st.lists(finite, min_size=1, max_size=20))
def test_extracted_attributes_ordered(values):
    a = extract_attributes(values)
    assert a.min <= a.max and a.min - 1e-9 <= a.mean <= a.max + 1e-9


def test_drop_condition():
    c = AttributeClass(1.0, 0.0, 0.5)
    assert all(drop_condition(c, 0.0, 1, i) is c for i in range(200))
    assert all(drop_condition(c, 1.0, 1, i) is NULL for i in range(200))
    draws = [drop_condition(c, 0.3, 7, i).null_flag for i in range(10_000)]
    assert 0.27 <= np.mean(draws) <= 0.33
    assert draws == [drop_condition(c, 0.3, 7, i).null_flag for i in range(10_000)]
    with pytest.raises(ParameterError):
        drop_condition(c, 1.5, 0)


def test_config_validation():
    with pytest.raises(ParameterError):
        GuidanceConfig(p_uncond=-0.1)
    with pytest.raises(ParameterError):
        GuidanceConfig(s=float("inf"))


def test_untrained_head_is_identity_and_null_is_learned():
    head = build_head(10, 0)
    y = np.random.default_rng(0).random(10)
    assert np.array_equal(conditional_forward(head, y, AttributeClass(1, 0, 0.5)), y)
    with torch.no_grad():
        head.aggregate.weight.normal_(generator=torch.Generator().manual_seed(1))
    a = conditional_forward(head, y, NULL)
    with torch.no_grad():
        head.null.add_(1.0)
    assert not np.array_equal(conditional_forward(head, y, NULL), a)
    c = AttributeClass(1, 0, 0.5)
    before = conditional_forward(head, y, c)
    with torch.no_grad():
        head.null.add_(1.0)
    assert np.array_equal(conditional_forward(head, y, c), before)


def test_conditional_forward_shapes_and_errors():
    head = build_head(5, 0)
    out = conditional_forward(head, np.zeros((3, 5)), [NULL, AttributeClass(1, 0, 0.5), NULL])
    assert out.shape == (3, 5)
    assert np.array_equal(out, conditional_forward(head, np.zeros((3, 5)), [NULL, AttributeClass(1, 0, 0.5), NULL]))
    with pytest.raises(ValidationError):
        conditional_forward(head, np.zeros(4), NULL)
    with pytest.raises(ValidationError):
        conditional_forward(head, np.full(5, np.inf), NULL)


def test_head_gradient_matches_finite_differences():
    head = build_head(4, 2)
    g = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for p in head.parameters():
            p.normal_(generator=g)
    y_phi = torch.rand(6, 4, dtype=torch.float64, generator=g)
    attrs = torch.rand(6, 3, dtype=torch.float64, generator=g)
    is_null = torch.tensor([True, False, False, True, False, False])
    target = torch.rand(6, 4, dtype=torch.float64, generator=g)
    assert module_fd_check(head, lambda: torch.mean((head(y_phi, attrs, is_null) - target) ** 2)) < 1e-4


def test_combine_examples():
    a, b = np.full(10, 10.0), np.full(10, 20.0)
    assert np.allclose(combine(a, b, 0.1), 11.0, rtol=0, atol=1e-12)
    r = np.random.default_rng(0)
    u, c = r.normal(size=10), r.normal(size=10)
    assert np.array_equal(combine(u, c, 0.0), u) and np.array_equal(combine(u, c, 1.0), c)


@given(st.lists(finite, min_size=3, max_size=3), st.lists(finite, min_size=3, max_size=3), st.floats(-3, 3))
def test_combine_affine_in_s(u, c, s):
    u, c = np.array(u), np.array(c)
    y0, y1 = combine(u, c, 0.0), combine(u, c, 1.0)
    scale = 1 + np.abs(u).max() + np.abs(c).max()
    assert np.allclose(combine(u, c, s) - y0, s * (y1 - y0), rtol=0, atol=1e-12 * scale)
    assert np.allclose(combine(u, c, s), u + s * (c - u), rtol=0, atol=1e-12 * scale)


def small_split(days=200):
    pairs = {f"S{i}": make_windows(synth_market(20 + i, days, Regime(drift=0.004 * (i - 1), volatility=0.006)),
                                   4, 3, 1, f"S{i}") for i in range(3)}
    return split_pairs(pairs)[0]


def test_train_joint_zero_epochs_and_p_uncond_one():
    split = small_split()
    bb = tiny_backbone()
    attrs = oracle_attributes(split.train)
    head = build_head(3, 0)
    before = [p.detach().clone() for p in head.parameters()]
    assert train_joint(head, bb, split.train, attrs, GuidanceConfig(epochs=0)) == []
    assert all(torch.equal(a, b) for a, b in zip(before, head.parameters()))
    cfg = GuidanceConfig(p_uncond=1.0, epochs=3)
    h1, h2 = build_head(3, 0), build_head(3, 0)
    train_joint(h1, bb, split.train, attrs, cfg)
    train_joint(h2, bb, split.train, [AttributeClass(9, -9, 0) for _ in attrs], cfg)
    assert all(torch.equal(a, b) for a, b in zip(h1.parameters(), h2.parameters()))


def test_train_joint_oracle_conditioning_helps():
    split = small_split(300)
    bb = tiny_backbone()
    head = build_head(3, 0)
    curve = train_joint(head, bb, split.train, oracle_attributes(split.train), GuidanceConfig(epochs=40),
                        val=split.validation, val_attrs=oracle_attributes(split.validation))
    from vta.backbone import evaluate_mse, pairs_to_arrays
    xv, yv = pairs_to_arrays(split.validation)
    assert curve[-1].val_mse <= evaluate_mse(bb, xv, yv)
    with pytest.raises(ValidationError):
        train_joint(head, bb, split.train, [], GuidanceConfig(epochs=1))


def test_guided_forecast_and_json(tmp_path):
    split = small_split()
    bb, head = tiny_backbone(), build_head(3, 0)
    with torch.no_grad():
        head.aggregate.weight.fill_(0.1)
    x = split.validation[0].window.features()
    c = AttributeClass(1.0, 0.0, 0.4)
    g0 = guided_forecast(bb, head, x, c, 0.0)
    g1 = guided_forecast(bb, head, x, c, 1.0, trace="rising", symbol="S0", anchor="2021-01-01")
    assert np.array_equal(g0.y_final, g0.y_uncond) and np.array_equal(g1.y_final, g1.y_cond)
    back = GuidedForecast.from_dict(json.loads(g1.to_json()))
    assert np.array_equal(back.y_final, g1.y_final) and back.attributes == c and back.trace == "rising"
    assert set(json.loads(g1.to_json())) == {"symbol", "anchor", "y_uncond", "y_cond", "y_final", "s",
                                             "attributes", "trace"}
    save_head(head, tmp_path / "h")
    assert np.array_equal(guided_forecast(bb, load_head(tmp_path / "h"), x, c, 0.1).y_final,
                          guided_forecast(bb, head, x, c, 0.1).y_final)


def test_reasoner_attributes_null_on_bad_format(tiny_task):
    pol = CategoricalPolicy(["junk"], 1)
    [view] = reasoner_attributes(pol, pol.init(), [tiny_task])
    assert view.attributes is NULL and view.forecast is None
