"""Sharpe-ratio regime labeling, rolling windows, hierarchical ordering,
block resampling and leakage-safe train/val/test splits."""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DomainError, EmptySplit, ZeroVolatility
from .geometry import SPDMatrix, SymMatrix, corr_distance

ANNUALIZATION = np.sqrt(252.0)
SR_STRESSED_MAX = -0.5
SR_RALLY_MIN = 2.0
DEFAULT_WINDOW_LEN = 252
DEFAULT_STRIDE = 5
DEFAULT_EMBARGO_DAYS = 21
DEFAULT_BLOCK_LEN = 12


class Regime(enum.Enum):
    STRESSED = 0
    NORMAL = 1
    RALLY = 2

    @property
    def index(self) -> int:
        return self.value

    @classmethod
    def from_index(cls, i: int) -> "Regime":
        return cls(i)

    @classmethod
    def parse(cls, name: str) -> "Regime":
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise DomainError(f"unknown regime name: {name!r}") from None


REGIMES = (Regime.STRESSED, Regime.NORMAL, Regime.RALLY)


def _regime_for_sr(sr: float) -> Regime:
    if sr < SR_STRESSED_MAX:
        return Regime.STRESSED
    if sr > SR_RALLY_MIN:
        return Regime.RALLY
    return Regime.NORMAL


@dataclass(frozen=True)
class RegimeLabel:
    """A regime class together with the Sharpe ratio that produced it."""

    regime: Regime
    sr_value: float

    def __post_init__(self):
        if np.isfinite(self.sr_value) and _regime_for_sr(self.sr_value) is not self.regime:
            raise DomainError(
                f"label {self.regime.name} inconsistent with SR {self.sr_value}"
            )


class SampleSource(enum.Enum):
    EMPIRICAL = "empirical"
    SYNTHETIC = "synthetic"
    BLOCK_RESAMPLED = "block_resampled"


@dataclass
class WindowedSample:
    """One labeled observation: a window's correlation matrix plus metadata."""

    start_index: int
    end_index: int
    corr: SPDMatrix
    label: RegimeLabel
    source: SampleSource = SampleSource.EMPIRICAL

    def __post_init__(self):
        if self.end_index < self.start_index:
            raise DataError("window end precedes start")

    @property
    def length(self) -> int:
        return self.end_index - self.start_index + 1


@dataclass
class SplitPlan:
    """Window-index sets for train/val/test with purge + embargo applied."""

    train: list[int]
    val: list[int]
    test: list[int]
    embargo_days: int
    test_range: tuple[int, int]
    purged: list[int] = field(default_factory=list)


def sharpe_ratio(returns_window: np.ndarray) -> float:
    """Annualized Sharpe ratio of the equal-weight basket of a (T, N) window."""
    r = np.asarray(returns_window, dtype=np.float64)
    if r.ndim == 1:
        r = r[:, None]
    if r.shape[0] < 2:
        raise DataError("sharpe_ratio needs at least 2 observations")
    basket = r.mean(axis=1)
    sd = basket.std(ddof=1)
    if sd < 1e-12:
        raise ZeroVolatility("basket volatility is numerically zero")
    return float(basket.mean() / sd * ANNUALIZATION)


def label_from_sr(sr: float) -> RegimeLabel:
    """Stressed below -0.5, rally above 2.0, normal on the closed band."""
    if not np.isfinite(sr):
        raise DomainError("Sharpe ratio must be finite")
    return RegimeLabel(regime=_regime_for_sr(sr), sr_value=float(sr))


def rolling_windows(
    returns: np.ndarray,
    window_len: int = DEFAULT_WINDOW_LEN,
    stride: int = DEFAULT_STRIDE,
    source: SampleSource = SampleSource.EMPIRICAL,
) -> list[WindowedSample]:
    """Correlation windows at offsets 0, stride, 2*stride, ..."""
    from .synth import corr_from_returns

    r = np.asarray(returns, dtype=np.float64)
    if r.ndim != 2:
        raise DataError("returns must be a (T, N) matrix")
    if r.shape[0] < window_len:
        raise DataError(
            f"series of length {r.shape[0]} is shorter than the window ({window_len})"
        )
    if stride < 1:
        raise DataError("stride must be >= 1")
    out = []
    for start in range(0, r.shape[0] - window_len + 1, stride):
        chunk = r[start : start + window_len]
        corr = corr_from_returns(chunk)
        label = label_from_sr(sharpe_ratio(chunk))
        out.append(
            WindowedSample(
                start_index=start,
                end_index=start + window_len - 1,
                corr=corr,
                label=label,
                source=source,
            )
        )
    return out


def hierarchical_order(c) -> np.ndarray:
    """Dendrogram leaf order from single-linkage clustering on the
    correlation distance, exposing block structure contiguously.

    Ties break toward the lowest cluster indices, so the identity
    correlation yields the identity permutation.
    """
    d = np.asarray(corr_distance(c))
    n = d.shape[0]
    # active clusters: list of leaf lists; dist[a][b] = single-linkage distance
    leaves = [[i] for i in range(n)]
    dist = d.copy()
    np.fill_diagonal(dist, np.inf)
    active = list(range(n))
    dmat = np.full((n, n), np.inf)
    dmat[:n, :n] = dist
    while len(active) > 1:
        best = (np.inf, -1, -1)
        for ai in range(len(active)):
            for bi in range(ai + 1, len(active)):
                a, b = active[ai], active[bi]
                val = dmat[a, b]
                if val < best[0]:
                    best = (val, ai, bi)
        _, ai, bi = best
        a, b = active[ai], active[bi]
        # single linkage: min distance to every other cluster
        for c_ in active:
            if c_ != a and c_ != b:
                m = min(dmat[a, c_], dmat[b, c_])
                dmat[a, c_] = dmat[c_, a] = m
        leaves[a] = leaves[a] + leaves[b]
        active.pop(bi)
    return np.asarray(leaves[active[0]], dtype=np.int64)


def block_resample(
    windows: list[WindowedSample], block_len: int = DEFAULT_BLOCK_LEN, seed: int = 0
) -> list[WindowedSample]:
    """Chronology-preserving block bootstrap over the window sequence.

    The sequence is cut into contiguous blocks of ``block_len`` (a trailing
    partial block is dropped); blocks are drawn with replacement and
    concatenated until the output matches the input length.
    """
    if block_len < 1:
        raise DataError("block_len must be >= 1")
    n = len(windows)
    n_blocks = n // block_len
    if n_blocks == 0:
        raise DataError("block_len exceeds the number of windows")
    blocks = [windows[i * block_len : (i + 1) * block_len] for i in range(n_blocks)]
    rng = np.random.default_rng(seed)
    out: list[WindowedSample] = []
    while len(out) < n:
        out.extend(blocks[int(rng.integers(n_blocks))])
    return out[:n]


def purged_split(
    windows: list[WindowedSample],
    test_range: tuple[int, int],
    embargo_days: int = DEFAULT_EMBARGO_DAYS,
    val_fraction: float = 0.15,
) -> SplitPlan:
    """Chronological split with purging and embargo.

    Test windows are those fully inside ``test_range`` (day indices,
    inclusive).  Any other window intersecting the exclusion zone
    ``[test_lo - window_len - embargo, test_hi + embargo]`` is purged, which
    covers both lookback overlap with any test window and the post-test
    embargo.  Validation is carved chronologically last from what remains.
    """
    if not windows:
        raise DataError("no windows to split")
    lo, hi = int(test_range[0]), int(test_range[1])
    if hi < lo:
        raise DataError("empty test range")
    test_idx = [
        i for i, w in enumerate(windows) if w.start_index >= lo and w.end_index <= hi
    ]
    test_set = set(test_idx)
    window_len = max(w.length for w in windows)
    zone_lo = lo - window_len - embargo_days
    zone_hi = hi + embargo_days
    rest, purged = [], []
    for i, w in enumerate(windows):
        if i in test_set:
            continue
        if w.end_index >= zone_lo and w.start_index <= zone_hi:
            purged.append(i)
        else:
            rest.append(i)
    if not rest:
        raise EmptySplit("purging and embargo removed every non-test window")
    rest.sort(key=lambda i: windows[i].start_index)
    n_val = int(round(val_fraction * len(rest)))
    val_idx = rest[len(rest) - n_val :] if n_val > 0 else []
    train_idx = rest[: len(rest) - n_val]
    if not train_idx:
        raise EmptySplit("no training windows remain after the validation carve")
    return SplitPlan(
        train=train_idx,
        val=val_idx,
        test=test_idx,
        embargo_days=embargo_days,
        test_range=(lo, hi),
        purged=purged,
    )


def split_for_fractions(
    windows: list[WindowedSample],
    test_fraction: float = 0.15,
    val_fraction: float = 0.15,
    embargo_days: int = DEFAULT_EMBARGO_DAYS,
) -> SplitPlan:
    """Default 70/15/15 chronological split: the last ``test_fraction`` of the
    day span becomes the test range, then purge/embargo/val as usual."""
    if not windows:
        raise DataError("no windows to split")
    span_hi = max(w.end_index for w in windows)
    n_test = max(1, int(round(test_fraction * len(windows))))
    ordered = sorted(range(len(windows)), key=lambda i: windows[i].start_index)
    first_test_window = windows[ordered[len(ordered) - n_test]]
    return purged_split(
        windows,
        test_range=(first_test_window.start_index, span_hi),
        embargo_days=embargo_days,
        val_fraction=val_fraction,
    )


def export_labels_csv(
    windows: list[WindowedSample], plan: SplitPlan | None, path
) -> None:
    """CSV of (window_start, window_end, sr, label, split)."""
    membership = {}
    if plan is not None:
        for name, idxs in (("train", plan.train), ("val", plan.val), ("test", plan.test)):
            for i in idxs:
                membership[i] = name
        for i in plan.purged:
            membership[i] = "purged"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["window_start", "window_end", "sr", "label", "split"])
        for i, w in enumerate(windows):
            writer.writerow(
                [
                    w.start_index,
                    w.end_index,
                    repr(w.label.sr_value),
                    w.label.regime.name.lower(),
                    membership.get(i, ""),
                ]
            )
