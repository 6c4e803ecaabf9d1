"""CSV price ingestion, returns computation and cleaning.

The ingestion boundary is a plain CSV of daily prices (``date`` column plus
one column per ticker, ISO dates).  Universe selection happens upstream via
an explicit constituent list; parsing is strict so data problems surface as
typed errors with row/column coordinates instead of silent NaNs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from datetime import date, datetime

import numpy as np

from .errors import (
    AllAssetsDropped,
    DataError,
    MissingColumn,
    NonMonotonicDates,
    NonPositivePrice,
    UnparseableCell,
)


@dataclass(frozen=True)
class CsvSchema:
    date_column: str = "date"
    tickers: tuple | None = None  # None: every non-date column


@dataclass
class PriceTable:
    dates: list[date]
    tickers: list[str]
    values: np.ndarray  # (T, N), NaN marks a missing price

    @property
    def n_days(self) -> int:
        return self.values.shape[0]


@dataclass
class ReturnsTable:
    dates: list[date]
    tickers: list[str]
    values: np.ndarray  # (T, N) simple daily returns

    @property
    def n_days(self) -> int:
        return self.values.shape[0]

    @property
    def n_assets(self) -> int:
        return self.values.shape[1]


@dataclass
class CleaningReport:
    dropped: list[tuple[str, float]] = field(default_factory=list)
    forward_filled: dict = field(default_factory=dict)
    zero_filled: dict = field(default_factory=dict)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["ticker", "action", "detail"])
            for ticker, frac in self.dropped:
                writer.writerow([ticker, "dropped", repr(frac)])
            for ticker, n in sorted(self.forward_filled.items()):
                writer.writerow([ticker, "forward_filled", n])
            for ticker, n in sorted(self.zero_filled.items()):
                writer.writerow([ticker, "zero_filled", n])


def load_constituents(path) -> list[str]:
    """One ticker per line; blank lines and '#' comments ignored."""
    out = []
    with open(path) as fh:
        for line in fh:
            token = line.strip()
            if token and not token.startswith("#"):
                out.append(token)
    if not out:
        raise DataError(f"no tickers found in {path}")
    return out


def load_prices_csv(path, schema: CsvSchema = CsvSchema()) -> PriceTable:
    """Parse a price CSV strictly.

    Empty cells are admitted as missing data; any other unparseable value
    raises :class:`UnparseableCell` with 1-based row/column coordinates of
    the data rows.  Dates must be ISO-8601 and strictly increasing.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    if schema.date_column not in header:
        raise MissingColumn(f"missing date column {schema.date_column!r}")
    date_ix = header.index(schema.date_column)
    if schema.tickers is None:
        tickers = [h for i, h in enumerate(header) if i != date_ix]
    else:
        tickers = list(schema.tickers)
        for t in tickers:
            if t not in header:
                raise MissingColumn(f"missing ticker column {t!r}")
    col_ix = [header.index(t) for t in tickers]

    dates: list[date] = []
    values = np.full((len(rows) - 1, len(tickers)), np.nan)
    for r, row in enumerate(rows[1:], start=1):
        if len(row) != len(header):
            raise UnparseableCell(
                f"row {r} has {len(row)} cells, expected {len(header)}",
                row=r,
                col=len(header),
            )
        raw_date = row[date_ix].strip()
        try:
            dates.append(datetime.strptime(raw_date, "%Y-%m-%d").date())
        except ValueError:
            raise UnparseableCell(
                f"bad date {raw_date!r} at row {r}", row=r, col=date_ix + 1
            ) from None
        for j, c in enumerate(col_ix):
            cell = row[c].strip()
            if cell == "" or cell.lower() in ("nan", "na"):
                continue
            try:
                values[r - 1, j] = float(cell)
            except ValueError:
                raise UnparseableCell(
                    f"unparseable value {cell!r} at row {r}, column {c + 1}",
                    row=r,
                    col=c + 1,
                ) from None
    for a, b in zip(dates, dates[1:]):
        if b <= a:
            raise NonMonotonicDates(f"dates not strictly increasing at {b}")
    return PriceTable(dates=dates, tickers=tickers, values=values)


def to_returns(prices: PriceTable) -> ReturnsTable:
    """Simple daily returns p_t / p_{t-1} - 1; the first row is dropped.
    A return is missing when either price is; non-positive prices reject."""
    v = prices.values
    if v.shape[0] < 2:
        raise DataError("need at least two price rows to compute returns")
    finite = v[np.isfinite(v)]
    if finite.size and np.any(finite <= 0.0):
        raise NonPositivePrice("price table contains a non-positive price")
    rets = v[1:] / v[:-1] - 1.0
    return ReturnsTable(dates=prices.dates[1:], tickers=list(prices.tickers), values=rets)


def clean(
    table: ReturnsTable, max_missing_frac: float = 0.05, ffill_limit: int = 5
) -> tuple[ReturnsTable, CleaningReport]:
    """Drop assets with too much missing data, then fill what remains.

    Gaps are forward-filled up to ``ffill_limit`` consecutive days; anything
    beyond that (and leading gaps) is zero-filled.  Idempotent: a clean
    table passes through unchanged.
    """
    report = CleaningReport()
    t_len, n = table.values.shape
    keep = []
    for j, ticker in enumerate(table.tickers):
        frac = float(np.mean(~np.isfinite(table.values[:, j])))
        if frac > max_missing_frac:
            report.dropped.append((ticker, frac))
        else:
            keep.append(j)
    if not keep:
        raise AllAssetsDropped("cleaning removed every asset")
    values = table.values[:, keep].copy()
    tickers = [table.tickers[j] for j in keep]
    for j, ticker in enumerate(tickers):
        col = values[:, j]
        missing = ~np.isfinite(col)
        if not missing.any():
            continue
        ff = zf = 0
        run = 0
        for t in range(t_len):
            if not missing[t]:
                run = 0
                continue
            run += 1
            if t > 0 and run <= ffill_limit and np.isfinite(col[t - 1]):
                col[t] = col[t - 1]
                ff += 1
            else:
                col[t] = 0.0
                zf += 1
        if ff:
            report.forward_filled[ticker] = ff
        if zf:
            report.zero_filled[ticker] = zf
    return ReturnsTable(dates=list(table.dates), tickers=tickers, values=values), report


def export_returns_csv(table: ReturnsTable, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date"] + table.tickers)
        for i, d in enumerate(table.dates):
            writer.writerow([d.isoformat()] + [repr(v) for v in table.values[i]])


def load_returns_csv(path, schema: CsvSchema = CsvSchema()) -> ReturnsTable:
    """Returns CSV with the same layout as the price CSV."""
    prices = load_prices_csv(path, schema)
    return ReturnsTable(dates=prices.dates, tickers=prices.tickers, values=prices.values)
