"""OHLCV ingestion, windowing, dataset splits and seeded synthetic markets."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import IngestionError, ParameterError, SchemaError

COLUMNS = ("date", "open", "high", "low", "close", "adj_close", "volume")
PRICE_COLUMNS = ("open", "high", "low", "close", "adj_close")
_FIELDS = ("dates",) + COLUMNS[1:]


class InsufficientDataWarning(UserWarning):
    pass


@dataclass(frozen=True)
class OhlcvBar:
    date: np.datetime64
    open: float
    high: float
    low: float
    close: float
    adj_close: float
    volume: float

    def violations(self) -> list[str]:
        out = []
        prices = [self.open, self.high, self.low, self.close, self.adj_close]
        if not all(math.isfinite(p) and p > 0 for p in prices):
            out.append("prices must be finite and strictly positive")
        if not (math.isfinite(self.volume) and self.volume >= 0):
            out.append("volume must be finite and non-negative")
        if self.low > self.high:
            out.append("low > high")
        if not self.low <= self.open <= self.high:
            out.append("open outside [low, high]")
        if not self.low <= self.close <= self.high:
            out.append("close outside [low, high]")
        return out


@dataclass(frozen=True)
class BarSeries:
    """Columnar view over a date-sorted sequence of bars for one symbol."""

    dates: np.ndarray  # datetime64[D]
    open: np.ndarray
    high: np.ndarray
    low: np.ndarray
    close: np.ndarray
    adj_close: np.ndarray
    volume: np.ndarray

    def __len__(self) -> int:
        return len(self.dates)

    def __getitem__(self, key: slice) -> BarSeries:
        if not isinstance(key, slice):
            raise TypeError("BarSeries supports slicing only; use bar(i) for a single bar")
        return BarSeries(*(getattr(self, c)[key] for c in _FIELDS))

    def bar(self, i: int) -> OhlcvBar:
        return OhlcvBar(self.dates[i], *(float(getattr(self, c)[i]) for c in COLUMNS[1:]))

    def bars(self) -> list[OhlcvBar]:
        return [self.bar(i) for i in range(len(self))]

    @classmethod
    def from_bars(cls, bars: Sequence[OhlcvBar]) -> BarSeries:
        dates = np.array([b.date for b in bars], dtype="datetime64[D]")
        cols = [np.array([getattr(b, c) for b in bars], dtype=float) for c in COLUMNS[1:]]
        return cls(dates, *cols)

    def index_of(self, date) -> int:
        d = np.datetime64(date, "D")
        i = int(np.searchsorted(self.dates, d))
        if i >= len(self) or self.dates[i] != d:
            raise KeyError(f"no bar dated {d}")
        return i


@dataclass(frozen=True)
class Normalizer:
    """Per-window min-max transform on adjusted close: z = (p - lo) / span."""

    lo: float
    span: float

    @classmethod
    def fit(cls, prices: np.ndarray) -> Normalizer:
        lo, hi = float(np.min(prices)), float(np.max(prices))
        span = hi - lo
        if span <= 1e-12 * max(1.0, abs(hi)):
            span = 1.0
        return cls(lo, span)

    def transform(self, x):
        return (np.asarray(x, dtype=float) - self.lo) / self.span

    def inverse(self, z):
        return np.asarray(z, dtype=float) * self.span + self.lo


@dataclass(frozen=True)
class PriceWindow:
    symbol: str
    bars: BarSeries
    history: BarSeries | None = None  # all bars up to and including the anchor

    def __post_init__(self):
        if len(self.bars) and np.any(np.diff(self.bars.dates.astype("int64")) <= 0):
            raise ValueError("window bars must be strictly increasing by date")

    @property
    def anchor(self) -> np.datetime64:
        return self.bars.dates[-1]

    @property
    def length(self) -> int:
        return len(self.bars)

    @property
    def normalizer(self) -> Normalizer:
        return Normalizer.fit(self.bars.adj_close)

    def normalized_prices(self) -> np.ndarray:
        return self.normalizer.transform(self.bars.adj_close)

    def features(self) -> np.ndarray:
        """(T, 6) model inputs: o, h, l, c, p on the window's price scale plus scaled volume."""
        norm = self.normalizer
        b = self.bars
        prices = [norm.transform(getattr(b, c)) for c in ("open", "high", "low", "close", "adj_close")]
        vmax = float(np.max(b.volume))
        vol = b.volume / vmax if vmax > 0 else np.zeros(len(b))
        return np.column_stack(prices + [vol])


@dataclass(frozen=True)
class TargetSeries:
    values: np.ndarray
    dates: np.ndarray | None = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)) or np.any(self.values <= 0):
            raise ValueError("target values must be finite and positive")

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class WindowPair:
    window: PriceWindow
    target: TargetSeries

    @property
    def symbol(self) -> str:
        return self.window.symbol

    @property
    def anchor(self) -> np.datetime64:
        return self.window.anchor

    def normalized_target(self) -> np.ndarray:
        return self.window.normalizer.transform(self.target.values)

    @property
    def first_date(self) -> np.datetime64:
        return self.window.bars.dates[0]

    @property
    def last_date(self) -> np.datetime64:
        return self.target.dates[-1] if self.target.dates is not None else self.anchor


@dataclass
class DatasetSplit:
    train: list[WindowPair] = field(default_factory=list)
    validation: list[WindowPair] = field(default_factory=list)
    test: list[WindowPair] = field(default_factory=list)

    def check_disjoint(self) -> None:
        parts = [p for p in (self.train, self.validation, self.test) if p]
        for earlier, later in zip(parts, parts[1:]):
            if max(p.last_date for p in earlier) >= min(p.first_date for p in later):
                raise ValueError("dataset split leaks across time")


@dataclass
class Regime:
    drift: float = 0.0003
    volatility: float = 0.015
    ar: float = 0.0  # AR(1) coefficient on daily log returns
    start_price: float = 100.0
    start_date: str = "2020-01-01"


@dataclass
class RowDiagnostic:
    row: int  # 1-based data row index (header excluded)
    message: str


@dataclass
class IngestResult:
    series: dict[str, BarSeries]
    rejected: list[RowDiagnostic]


def ingest_csv(path, schema: Mapping[str, str] | None = None, symbol: str | None = None) -> IngestResult:
    """Read one OHLCV csv file.

    ``schema`` maps canonical column names to the file's header names. If the file has a
    ``symbol`` column, rows are grouped by it; otherwise the symbol defaults to the file stem.
    """
    path = Path(path)
    mapping = {c: c for c in COLUMNS}
    mapping["symbol"] = "symbol"
    if schema:
        mapping.update(schema)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        missing = [c for c in COLUMNS if mapping[c] not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
        idx = {c: header.index(mapping[c]) for c in COLUMNS}
        sym_idx = header.index(mapping["symbol"]) if mapping["symbol"] in header else None
        default_symbol = symbol or path.stem

        rows: dict[str, list[tuple[int, OhlcvBar]]] = {}
        rejected = []
        for i, row in enumerate(reader, start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                date = np.datetime64(row[idx["date"]].strip(), "D")
            except ValueError:
                raise IngestionError(f"{path}: row {i}: unparseable date {row[idx['date']]!r}") from None
            try:
                vals = [float(row[idx[c]]) for c in COLUMNS[1:]]
            except ValueError as exc:
                rejected.append(RowDiagnostic(i, f"unparseable number: {exc}"))
                continue
            bar = OhlcvBar(date, *vals)
            problems = bar.violations()
            if problems:
                rejected.append(RowDiagnostic(i, "; ".join(problems)))
                continue
            sym = row[sym_idx].strip() if sym_idx is not None else default_symbol
            rows.setdefault(sym, []).append((i, bar))

    series = {}
    for sym, items in rows.items():
        items.sort(key=lambda t: t[1].date)
        for (_, a), (_, b) in zip(items, items[1:]):
            if a.date == b.date:
                raise IngestionError(f"{path}: duplicate date {a.date} for symbol {sym}")
        series[sym] = BarSeries.from_bars([b for _, b in items])
    return IngestResult(series, rejected)


def write_csv(series: BarSeries, path) -> None:
    """Write bars with round-trip float formatting; ingest_csv reads them back bit-identically."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for i in range(len(series)):
            w.writerow([str(series.dates[i])] + [repr(float(getattr(series, c)[i])) for c in COLUMNS[1:]])


def make_windows(series: BarSeries, window: int, horizon: int, stride: int = 1,
                 symbol: str = "") -> list[WindowPair]:
    if window < 1 or horizon < 1 or stride < 1:
        raise ParameterError("window, horizon and stride must be >= 1")
    n = len(series)
    if n < window + horizon:
        warnings.warn(f"{symbol or 'series'}: {n} bars < window + horizon = {window + horizon}; "
                      "no windows emitted", InsufficientDataWarning, stacklevel=2)
        return []
    count = (n - window - horizon) // stride + 1
    pairs = []
    for k in range(count):
        s = k * stride
        a = s + window  # index of the first target bar
        pairs.append(WindowPair(
            PriceWindow(symbol, series[s:a], series[:a]),
            TargetSeries(series.adj_close[a:a + horizon].copy(), series.dates[a:a + horizon].copy()),
        ))
    return pairs


def split_pairs(pairs_by_symbol: Mapping[str, Sequence[WindowPair]], val_frac: float = 0.15,
                test_frac: float = 0.15, calendar: np.ndarray | None = None) -> tuple[DatasetSplit, dict]:
    """Chronological split with shared cut dates across symbols.

    A pair lands in a part only if its input window and target both lie inside that part's date
    range; straddling pairs are dropped so no date is shared between parts.
    """
    if not 0 <= val_frac < 1 or not 0 <= test_frac < 1 or val_frac + test_frac >= 1:
        raise ParameterError("split fractions must be in [0, 1) and sum below 1")
    all_pairs = [p for ps in pairs_by_symbol.values() for p in ps]
    split = DatasetSplit()
    if not all_pairs:
        return split, {}
    if calendar is None:
        dates = set()
        for p in all_pairs:
            dates.update(p.window.bars.dates.tolist())
            dates.update(p.target.dates.tolist())
        calendar = np.array(sorted(dates), dtype="datetime64[D]")
    n = len(calendar)
    c1 = calendar[min(n - 1, int(round(n * (1 - val_frac - test_frac))))]
    c2 = calendar[min(n - 1, int(round(n * (1 - test_frac))))]
    for sym in sorted(pairs_by_symbol):
        for p in pairs_by_symbol[sym]:
            if p.last_date < c1:
                split.train.append(p)
            elif p.first_date >= c1 and p.last_date < c2:
                split.validation.append(p)
            elif p.first_date >= c2:
                split.test.append(p)
    for part in (split.train, split.validation, split.test):
        part.sort(key=lambda p: (p.anchor, p.symbol))
    return split, {"validation_start": str(c1), "test_start": str(c2)}


def synth_market(seed: int, days: int, regime: Regime | None = None) -> BarSeries:
    """Geometric random walk on adjusted close with a consistent OHLC envelope."""
    regime = regime or Regime()
    if days < 1:
        raise ParameterError("days must be >= 1")
    if regime.volatility < 0:
        raise ParameterError("volatility must be non-negative")
    if regime.start_price <= 0:
        raise ParameterError("start_price must be positive")
    rng = np.random.default_rng(seed)
    vol = regime.volatility
    shocks = rng.standard_normal(days)
    log_ret = np.empty(days)
    prev = 0.0
    for t in range(days):
        prev = regime.drift + regime.ar * (prev - regime.drift) + vol * shocks[t]
        log_ret[t] = prev
    log_ret[0] = 0.0
    close = regime.start_price * np.exp(np.cumsum(log_ret))
    gap = vol * 0.3 * rng.standard_normal(days)
    prev_close = np.concatenate([[close[0]], close[:-1]])
    open_ = prev_close * np.exp(gap)
    wick_up = np.abs(rng.standard_normal(days)) * vol * 0.5
    wick_dn = np.abs(rng.standard_normal(days)) * vol * 0.5
    high = np.maximum(open_, close) * np.exp(wick_up)
    low = np.minimum(open_, close) * np.exp(-wick_dn)
    volume = np.floor(rng.lognormal(13.0, 0.4, days))
    start = np.datetime64(regime.start_date, "D")
    dates = np.busday_offset(start, np.arange(days), roll="forward")
    # exp(0) == 1 leaves the envelope exact when vol == 0
    return BarSeries(dates.astype("datetime64[D]"), open_, high, low, close, close.copy(), volume)


@dataclass
class DatasetManifest:
    symbols: list[str]
    date_ranges: dict[str, list[str]]
    splits: dict[str, str]
    files: dict[str, str] = field(default_factory=dict)
    seed: int | None = None

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> DatasetManifest:
        return cls(**json.loads(Path(path).read_text()))

    @classmethod
    def describe(cls, series: Mapping[str, BarSeries], splits: dict, files: dict | None = None,
                 seed: int | None = None) -> DatasetManifest:
        syms = sorted(series)
        ranges = {s: [str(series[s].dates[0]), str(series[s].dates[-1])] for s in syms if len(series[s])}
        return cls(syms, ranges, dict(splits), dict(files or {}), seed)


def window_at(series: BarSeries, anchor_index: int, window: int, symbol: str = "") -> PriceWindow:
    """Input window ending at ``anchor_index`` (inclusive); no target required."""
    if anchor_index < window - 1 or anchor_index >= len(series):
        raise IndexError(f"anchor index {anchor_index} leaves fewer than {window} bars")
    return PriceWindow(symbol, series[anchor_index - window + 1:anchor_index + 1],
                       series[:anchor_index + 1])
