"""Daily-rebalanced mean-variance portfolio optimization and
regime-dependent strategies.

Weights for day t are computed strictly from information through day t-1;
the optimizer is long-only, fully invested, solved by projected gradient
with an exact simplex projection.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, EstimationError, OptFailure, ShapeError
from .geometry import SPDMatrix, sym
from .ingest import ReturnsTable
from .regimes import Regime

DEFAULT_RISK_AVERSION = 5.0
# Risk-off in stress, risk-on in rallies; exposed in config.
DEFAULT_REGIME_RISK_AVERSION = {
    Regime.STRESSED: 20.0,
    Regime.NORMAL: 5.0,
    Regime.RALLY: 1.0,
}
DEFAULT_LOOKBACK = 252
MIN_FILTERED_DAYS = 20


@dataclass(frozen=True)
class PortfolioWeights:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        if abs(w.sum() - 1.0) > 1e-10:
            raise DataError("portfolio weights must sum to 1")
        if np.any(w < -1e-12):
            raise DataError("portfolio weights must be nonnegative")


@dataclass(frozen=True)
class EqualWeight:
    name: str = "equal_weight"


@dataclass(frozen=True)
class MeanVariance:
    risk_aversion: float = DEFAULT_RISK_AVERSION
    name: str = "mean_variance"


@dataclass(frozen=True)
class RegimeDependent:
    risk_aversion_map: dict = field(
        default_factory=lambda: dict(DEFAULT_REGIME_RISK_AVERSION)
    )
    name: str = "regime_dependent"


Strategy = EqualWeight | MeanVariance | RegimeDependent


@dataclass
class BacktestResult:
    dates: list
    weights: np.ndarray  # (T, N) weights applied on each backtest day
    returns: np.ndarray  # (T,) realized portfolio returns
    equity: np.ndarray  # (T + 1,), equity[0] = 1
    regimes_used: list  # per-day Regime or None
    strategy_name: str

    @property
    def cumulative_return(self) -> float:
        return float(self.equity[-1] - 1.0)


def project_to_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto {w : w >= 0, sum w = 1}."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ks = np.arange(1, len(v) + 1)
    cond = u - css / ks > 0
    rho = int(np.max(np.flatnonzero(cond))) + 1
    theta = css[rho - 1] / rho
    return np.maximum(v - theta, 0.0)


def mv_optimize(
    mu: np.ndarray,
    sigma,
    risk_aversion: float = DEFAULT_RISK_AVERSION,
    max_iter: int = 20000,
    tol: float = 1e-8,
) -> PortfolioWeights:
    """Maximize mu'w - (risk_aversion / 2) w'Sigma w on the simplex.

    Projected gradient ascent with a fixed 1/L step; converged when the
    unit-step natural (KKT) residual ||w - P(w + grad)|| falls below tol.
    """
    from .geometry import _eigvalsh

    mu = np.asarray(mu, dtype=np.float64)
    s = sym(np.asarray(sigma, dtype=np.float64))
    n = mu.shape[0]
    if s.shape != (n, n):
        raise ShapeError("mu and sigma dimensions disagree")
    if risk_aversion <= 0:
        raise DataError("risk_aversion must be > 0")
    lip = risk_aversion * float(_eigvalsh(s)[0])  # eigenvalues sorted descending
    step = 1.0 / max(lip, 1e-12)
    w = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        grad = mu - risk_aversion * (s @ w)
        w_next = project_to_simplex(w + step * grad)
        if np.linalg.norm(w - project_to_simplex(w + grad)) < tol:
            w = w_next
            break
        w = w_next
    else:
        resid = float(np.linalg.norm(w - project_to_simplex(w + mu - risk_aversion * (s @ w))))
        raise OptFailure(
            f"projected gradient did not reach tol={tol} (residual={resid:.3e})",
            residual=resid,
        )
    return PortfolioWeights(weights=w / w.sum())


def estimate_inputs(
    history: np.ndarray,
    lookback: int,
    regime_filter: Regime | None = None,
    day_regimes: list | None = None,
):
    """Mean and sample covariance over the trailing ``lookback`` rows of
    ``history``; optionally restricted to days whose predicted regime
    matches ``regime_filter``."""
    h = np.asarray(history, dtype=np.float64)
    if h.ndim != 2:
        raise DataError("history must be a (T, N) matrix")
    if lookback > h.shape[0]:
        raise EstimationError("lookback exceeds available history")
    window = h[-lookback:]
    if regime_filter is not None:
        if day_regimes is None:
            raise EstimationError("regime filtering requires per-day regimes")
        tags = list(day_regimes)[-lookback:]
        mask = np.array([r is regime_filter for r in tags])
        window = window[mask]
        if window.shape[0] < MIN_FILTERED_DAYS:
            raise EstimationError(
                f"only {window.shape[0]} days carry regime "
                f"{regime_filter.name}; need {MIN_FILTERED_DAYS}"
            )
    mu = window.mean(axis=0)
    centered = window - mu
    cov = centered.T @ centered / max(window.shape[0] - 1, 1)
    sigma = SPDMatrix(sym(cov))  # jitter repair handles near-singular moments
    return mu, sigma


def run_backtest(
    returns: ReturnsTable | np.ndarray,
    strategy: Strategy,
    predictions_per_day: list | None = None,
    lookback: int = DEFAULT_LOOKBACK,
    dates: list | None = None,
) -> BacktestResult:
    """Daily rebalancing, zero transaction costs, no lookahead: weights for
    day t only see rows < t.  Regime-dependent strategies pick risk
    aversion and regime-filtered moments from day t-1's prediction."""
    if isinstance(returns, ReturnsTable):
        values = returns.values
        dates = list(returns.dates)
    else:
        values = np.asarray(returns, dtype=np.float64)
        dates = list(dates) if dates is not None else list(range(values.shape[0]))
    t_len, n = values.shape
    start = 0 if isinstance(strategy, EqualWeight) else lookback
    if t_len - start < 1:
        raise DataError("not enough history for a single backtest day")
    if isinstance(strategy, RegimeDependent):
        if predictions_per_day is None or len(predictions_per_day) != t_len:
            raise DataError(
                "regime-dependent backtests need one prediction slot per day"
            )

    weights = np.zeros((t_len - start, n))
    rets = np.zeros(weights.shape[0])
    regimes_used: list = []
    equity = [1.0]
    for k, t in enumerate(range(start, t_len)):
        if isinstance(strategy, EqualWeight):
            w = np.full(n, 1.0 / n)
            regimes_used.append(None)
        elif isinstance(strategy, MeanVariance):
            mu, sigma = estimate_inputs(values[:t], lookback)
            w = mv_optimize(mu, sigma.values, strategy.risk_aversion).weights
            regimes_used.append(None)
        else:
            regime = predictions_per_day[t - 1] if t > 0 else None
            if regime is None:
                regime = Regime.NORMAL
            gamma = strategy.risk_aversion_map.get(
                regime, DEFAULT_REGIME_RISK_AVERSION[regime]
            )
            try:
                mu, sigma = estimate_inputs(
                    values[:t], lookback, regime_filter=regime,
                    day_regimes=predictions_per_day[:t],
                )
            except EstimationError:
                # thin regime history: fall back to unfiltered moments
                mu, sigma = estimate_inputs(values[:t], lookback)
            w = mv_optimize(mu, sigma.values, gamma).weights
            regimes_used.append(regime)
        weights[k] = w
        rets[k] = float(w @ values[t])
        equity.append(equity[-1] * (1.0 + rets[k]))
    return BacktestResult(
        dates=dates[start:],
        weights=weights,
        returns=rets,
        equity=np.asarray(equity),
        regimes_used=regimes_used,
        strategy_name=strategy.name,
    )


def predict_daily_regimes(
    returns: ReturnsTable | np.ndarray, model, window_len: int = DEFAULT_LOOKBACK
) -> list:
    """Regime prediction per day from the trailing correlation window ending
    on that day (slots before the first full window are None).  Day t's
    entry uses data through day t, so a backtest applies it from t+1 on."""
    from .synth import corr_from_returns

    values = returns.values if isinstance(returns, ReturnsTable) else np.asarray(returns)
    t_len = values.shape[0]
    out: list = [None] * t_len
    for t in range(window_len - 1, t_len):
        corr = corr_from_returns(values[t - window_len + 1 : t + 1])
        out[t] = model.predict(corr.values)
    return out


@dataclass
class StrategyRow:
    name: str
    cumulative_return: float
    annualized_sharpe: float
    max_drawdown: float


def max_drawdown(equity: np.ndarray) -> float:
    """Largest peak-to-trough equity drop as a fraction of the peak."""
    peaks = np.maximum.accumulate(equity)
    return float(np.max(1.0 - equity / peaks))


def compare_strategies(results: list[BacktestResult]) -> list[StrategyRow]:
    rows = []
    for res in results:
        sd = res.returns.std(ddof=1) if res.returns.size > 1 else 0.0
        sharpe = float(res.returns.mean() / sd * np.sqrt(252.0)) if sd > 1e-15 else 0.0
        rows.append(
            StrategyRow(
                name=res.strategy_name,
                cumulative_return=res.cumulative_return,
                annualized_sharpe=sharpe,
                max_drawdown=max_drawdown(res.equity),
            )
        )
    return rows


def export_comparison_csv(rows: list[StrategyRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["strategy", "cumulative_return", "annualized_sharpe", "max_drawdown"])
        for r in rows:
            writer.writerow(
                [r.name, repr(r.cumulative_return), repr(r.annualized_sharpe), repr(r.max_drawdown)]
            )


def export_equity_csv(results: list[BacktestResult], path) -> None:
    """Long-format equity curves: (date, strategy, equity after that day)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date", "strategy", "equity"])
        for res in results:
            for d, e in zip(res.dates, res.equity[1:]):
                writer.writerow([d, res.strategy_name, repr(float(e))])


def export_weights_csv(result: BacktestResult, path, tickers=None) -> None:
    n = result.weights.shape[1]
    names = tickers if tickers is not None else [f"asset_{j}" for j in range(n)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date"] + list(names))
        for d, row in zip(result.dates, result.weights):
            writer.writerow([d] + [repr(float(v)) for v in row])
