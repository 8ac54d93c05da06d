import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vta.errors import IngestionError, ParameterError, SchemaError
from vta.market import (COLUMNS, InsufficientDataWarning, Regime, ingest_csv, make_windows, split_pairs,
                        synth_market, write_csv)

HEADER = "date,open,high,low,close,adj_close,volume\n"


def test_ingest_sorts_rows(tmp_path):
    f = tmp_path / "ABC.csv"
    f.write_text(HEADER + "2021-01-06,10,11,9,10.5,10.5,100\n"
                 "2021-01-04,10,11,9,10,10,100\n"
                 "2021-01-05,10,12,9,11,11,100\n")
    res = ingest_csv(f)
    s = res.series["ABC"]
    assert len(s) == 3 and not res.rejected
    assert [str(d) for d in s.dates] == ["2021-01-04", "2021-01-05", "2021-01-06"]
    assert s.close.tolist() == [10.0, 11.0, 10.5]


def test_ingest_rejects_bad_row_with_index(tmp_path):
    f = tmp_path / "X.csv"
    f.write_text(HEADER + "2021-01-04,10,11,9,10,10,100\n2021-01-05,10,8,9,10,10,100\n")
    res = ingest_csv(f)
    assert len(res.series["X"]) == 1
    assert [d.row for d in res.rejected] == [2]
    assert "high" in res.rejected[0].message


def test_ingest_duplicate_date(tmp_path):
    f = tmp_path / "X.csv"
    f.write_text(HEADER + "2021-01-04,10,11,9,10,10,100\n2021-01-04,10,11,9,10,10,100\n")
    with pytest.raises(IngestionError, match="2021-01-04"):
        ingest_csv(f)


def test_ingest_missing_column(tmp_path):
    f = tmp_path / "X.csv"
    f.write_text("date,open,high,low,close,volume\n2021-01-04,10,11,9,10,100\n")
    with pytest.raises(SchemaError, match="adj_close"):
        ingest_csv(f)


def test_ingest_schema_mapping_and_symbol_column(tmp_path):
    f = tmp_path / "multi.csv"
    f.write_text("Date,O,H,L,C,Adj,V,ticker\n"
                 "2021-01-04,10,11,9,10,10,1,AAA\n2021-01-04,20,21,19,20,20,1,BBB\n")
    schema = dict(zip(COLUMNS, ["Date", "O", "H", "L", "C", "Adj", "V"]), symbol="ticker")
    res = ingest_csv(f, schema)
    assert sorted(res.series) == ["AAA", "BBB"]


def test_csv_round_trip_bit_identical(tmp_path):
    s = synth_market(3, 50)
    write_csv(s, tmp_path / "s.csv")
    back = ingest_csv(tmp_path / "s.csv").series["s"]
    for c in ("dates",) + COLUMNS[1:]:
        assert np.array_equal(getattr(back, c), getattr(s, c))


@pytest.mark.parametrize("n,count", [(20, 1), (21, 2), (19, 0)])
def test_make_windows_counts(n, count):
    s = synth_market(0, n)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        pairs = make_windows(s, 10, 10, 1)
    assert len(pairs) == count
    assert any(issubclass(w.category, InsufficientDataWarning) for w in caught) == (count == 0)


@pytest.mark.filterwarnings("ignore::vta.market.InsufficientDataWarning")
@given(n=st.integers(20, 80), T=st.integers(1, 12), H=st.integers(1, 12), stride=st.integers(1, 5))
def test_make_windows_alignment(n, T, H, stride):
    s = synth_market(1, n)
    pairs = make_windows(s, T, H, stride)
    assert len(pairs) == ((n - T - H) // stride + 1 if n >= T + H else 0)
    for p in pairs:
        assert p.window.length == T and len(p.target) == H
        assert p.window.anchor < p.target.dates[0]
        i = s.index_of(p.window.anchor)
        assert s.dates[i + 1] == p.target.dates[0]
        assert np.array_equal(p.target.values, s.adj_close[i + 1:i + 1 + H])


def test_synth_deterministic():
    a, b = synth_market(7, 100), synth_market(7, 100)
    for c in COLUMNS[1:]:
        assert np.array_equal(getattr(a, c), getattr(b, c))
    assert not np.array_equal(a.close, synth_market(8, 100).close)


def test_synth_flat():
    s = synth_market(0, 30, Regime(drift=0.0, volatility=0.0))
    assert np.all(s.close == s.close[0])


def test_synth_invariants_1000_days():
    s = synth_market(11, 1000, Regime(volatility=0.03))
    assert all(not b.violations() for b in s.bars())
    assert np.all(np.diff(s.dates.astype(int)) > 0)


def test_synth_negative_volatility():
    with pytest.raises(ParameterError):
        synth_market(0, 10, Regime(volatility=-0.1))


def test_split_no_temporal_leakage():
    pairs = {f"S{i}": make_windows(synth_market(i, 200), 10, 10, 1, f"S{i}") for i in range(3)}
    split, cuts = split_pairs(pairs, 0.2, 0.2)
    split.check_disjoint()
    assert split.train and split.validation and split.test
    assert max(p.last_date for p in split.train) < min(p.first_date for p in split.validation)
    assert max(p.last_date for p in split.validation) < min(p.first_date for p in split.test)
    assert str(min(p.first_date for p in split.test)) >= cuts["test_start"]


def test_normalization_round_trip():
    p = make_windows(synth_market(2, 40), 10, 10)[0]
    z = p.window.normalized_prices()
    assert z.min() == 0.0 and z.max() == 1.0
    assert np.allclose(p.window.normalizer.inverse(p.normalized_target()), p.target.values, rtol=1e-14)
