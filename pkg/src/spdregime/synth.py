"""Nested hierarchical factor generator for block hierarchical SPD
correlation matrices, with Student-t window sampling and regime labeling.

The generator works per regime in three steps: calibrate a three-level
loading ladder (market -> cluster -> subcluster) so the implied mean
off-diagonal correlation hits the regime target; jitter the loadings per
asset and window; then draw a (T, N) Student-t window from the implied
correlation and label it through the basket Sharpe ratio.  A constant
cross-sectional drift pins the realized basket Sharpe ratio inside the
intended regime band -- a constant shift leaves the sample correlation
matrix untouched, so the labeled classes keep their designed correlation
levels.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DomainError
from .geometry import SPDMatrix, sym
from .regimes import (
    REGIMES,
    Regime,
    RegimeLabel,
    SampleSource,
    WindowedSample,
    label_from_sr,
    sharpe_ratio,
)

DATASET_FORMAT_VERSION = 1
_BINARY_MAGIC = b"SPDRDS01"

DEFAULT_REGIME_TARGETS = {
    Regime.STRESSED: 0.24,
    Regime.NORMAL: 0.18,
    Regime.RALLY: 0.10,
}

# Realized basket SR is pinned uniformly inside these (annualized) bands,
# comfortably interior to the labeling thresholds at -0.5 and 2.0.
SR_BANDS = {
    Regime.STRESSED: (-2.5, -0.75),
    Regime.NORMAL: (-0.25, 1.75),
    Regime.RALLY: (2.25, 4.0),
}


@dataclass
class SynthSpec:
    """Parameterization of the nested hierarchical factor generator."""

    n_assets: int = 60
    window_len: int = 252
    n_clusters: int = 5
    n_levels: int = 3
    dof: float = 3.0
    regime_targets: dict = field(default_factory=lambda: dict(DEFAULT_REGIME_TARGETS))
    n_series_total: int = 18000
    permute_seed: int = 27
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_assets % self.n_clusters != 0:
            raise ConfigError("n_assets must divide evenly into n_clusters groups")
        if self.n_levels != 3:
            raise ConfigError("the nested generator is defined for 3 levels")
        if self.dof <= 2.0:
            raise ConfigError("Student-t dof must exceed 2 for finite variance")
        if self.n_series_total % self.n_assets != 0:
            raise ConfigError("n_series_total must be a multiple of n_assets")
        t = self.regime_targets
        if not (t[Regime.STRESSED] > t[Regime.NORMAL] > t[Regime.RALLY]):
            raise ConfigError("regime targets must descend stressed > normal > rally")
        cluster = self.n_assets // self.n_clusters
        if cluster % 2 != 0:
            raise ConfigError("cluster size must be even to form two subclusters")

    @property
    def n_windows(self) -> int:
        return self.n_series_total // self.n_assets

    @property
    def cluster_size(self) -> int:
        return self.n_assets // self.n_clusters

    @property
    def subcluster_size(self) -> int:
        return self.cluster_size // 2


@dataclass
class FactorSpec:
    """Loading magnitudes and perturbation scales for the nested factors."""

    beta_range: tuple[float, float] = (0.9, 1.1)
    eta_scale: float = 0.1
    eps_scale: float | None = None  # None: complete idiosyncratic variance to 1
    level_shape: tuple[float, float, float] = (1.0, 0.8, 0.6)

    def __post_init__(self):
        lo, hi = self.beta_range
        if not (0.0 < lo <= hi):
            raise ConfigError("beta_range must satisfy 0 < lo <= hi")
        if self.eta_scale < 0.0:
            raise ConfigError("eta_scale must be >= 0")
        if any(s < 0.0 for s in self.level_shape):
            raise ConfigError("level loadings must be >= 0")


@dataclass
class SyntheticSample:
    """One generated window: permuted correlation, label, provenance."""

    corr: SPDMatrix
    regime: RegimeLabel
    permutation: np.ndarray
    window_index: int
    spec_echo: dict


def _membership(spec: SynthSpec) -> tuple[np.ndarray, np.ndarray]:
    """Cluster and subcluster id per asset."""
    idx = np.arange(spec.n_assets)
    cluster = idx // spec.cluster_size
    sub = idx // spec.subcluster_size
    return cluster, sub


def _pair_share_counts(spec: SynthSpec) -> tuple[int, int, int]:
    """Ordered off-diagonal pair counts sharing (level1 only, levels 1-2,
    levels 1-3)."""
    n = spec.n_assets
    cs = spec.cluster_size
    ss = spec.subcluster_size
    same_sub = 2 * spec.n_clusters * 2 * (ss * (ss - 1) // 2)
    same_cluster = 2 * spec.n_clusters * (cs * (cs - 1) // 2) - same_sub
    total = n * (n - 1)
    market_only = total - same_cluster - same_sub
    return market_only, same_cluster, same_sub


def _mean_offdiag_for_loadings(spec: SynthSpec, loadings: np.ndarray) -> float:
    a1, a2, a3 = loadings**2
    m, c, s = _pair_share_counts(spec)
    total = m + c + s
    return (m * a1 + c * (a1 + a2) + s * (a1 + a2 + a3)) / total


def calibrate_loadings(
    spec: SynthSpec, factors: FactorSpec, regime: Regime
) -> np.ndarray:
    """Scale the per-level loading shape so the implied mean off-diagonal
    correlation equals the regime target (bisection on a shared multiplier)."""
    target = spec.regime_targets[regime]
    shape = np.asarray(factors.level_shape, dtype=np.float64)
    if np.all(shape == 0.0):
        raise ConfigError("level_shape must have a nonzero loading")
    # valid upper bound: total systematic variance must stay below 1
    s_hi = 0.999 / np.sqrt(float(np.sum(shape**2)))
    if _mean_offdiag_for_loadings(spec, s_hi * shape) < target:
        raise ConfigError(f"regime target {target} is unreachable for this shape")
    s_lo = 0.0
    for _ in range(200):
        mid = 0.5 * (s_lo + s_hi)
        if _mean_offdiag_for_loadings(spec, mid * shape) < target:
            s_lo = mid
        else:
            s_hi = mid
    return 0.5 * (s_lo + s_hi) * shape


def build_block_hierarchical_corr(
    spec: SynthSpec, factors: FactorSpec, regime: Regime
) -> SPDMatrix:
    """Implied block-constant correlation of the calibrated nested model:
    c_ij sums the squared loadings of every level shared by i and j."""
    loadings = calibrate_loadings(spec, factors, regime)
    return _corr_from_asset_loadings(
        spec, np.tile(loadings, (spec.n_assets, 1))
    )


def _corr_from_asset_loadings(spec: SynthSpec, beta: np.ndarray) -> SPDMatrix:
    """Correlation implied by per-asset level loadings with idiosyncratic
    variance completing the diagonal to 1."""
    cluster, sub = _membership(spec)
    n = spec.n_assets
    c = np.outer(beta[:, 0], beta[:, 0])
    c += np.outer(beta[:, 1], beta[:, 1]) * (cluster[:, None] == cluster[None, :])
    c += np.outer(beta[:, 2], beta[:, 2]) * (sub[:, None] == sub[None, :])
    off = c - np.diag(np.diag(c))
    if np.any(np.abs(off) >= 1.0):
        raise ConfigError("loadings imply an off-diagonal correlation >= 1")
    if np.any(np.diag(c) >= 1.0):
        raise ConfigError("loadings leave no room for idiosyncratic variance")
    np.fill_diagonal(c, 1.0)
    return SPDMatrix(sym(c))


def _jittered_loadings(
    spec: SynthSpec, factors: FactorSpec, base: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Per-asset multiplicative beta jitter plus additive eta perturbation,
    rescaled when a row would exhaust the unit variance budget."""
    lo, hi = factors.beta_range
    u = rng.uniform(lo, hi, size=(spec.n_assets, 3))
    z = rng.standard_normal((spec.n_assets, 3))
    beta = base[None, :] * u + factors.eta_scale * base[None, :] * z
    beta = np.abs(beta)
    budget = 0.98
    norms = np.sum(beta**2, axis=1)
    over = norms > budget
    if np.any(over):
        beta[over] *= np.sqrt(budget / norms[over, None])
    return beta


def student_t_sample(
    sigma, v: float, t_len: int, seed: int | np.random.Generator
) -> np.ndarray:
    """(T, N) draws X ~ t_v(0, (v-2)/v * Sigma), so cov(X) -> Sigma."""
    if v <= 2.0:
        raise DomainError("Student-t sampling requires v > 2")
    a = np.asarray(sigma, dtype=np.float64)
    try:
        chol = np.linalg.cholesky(sym(a) * ((v - 2.0) / v))
    except np.linalg.LinAlgError as exc:
        raise DomainError(f"Cholesky factorization failed: {exc}") from None
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    z = rng.standard_normal((t_len, a.shape[0]))
    g = rng.chisquare(v, size=t_len)
    return (z @ chol.T) / np.sqrt(g / v)[:, None]


def corr_from_returns(r: np.ndarray) -> SPDMatrix:
    """Pearson sample correlation of a (T, N) return matrix."""
    x = np.asarray(r, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DataError("corr_from_returns needs a (T, N) matrix with T >= 2")
    centered = x - x.mean(axis=0)
    sd = centered.std(axis=0, ddof=1)
    bad = np.flatnonzero(sd < 1e-15)
    if bad.size:
        raise DataError(f"constant return column(s): {bad.tolist()}")
    c = (centered / sd).T @ (centered / sd) / (x.shape[0] - 1)
    c = np.clip(sym(c), -1.0, 1.0)
    np.fill_diagonal(c, 1.0)
    return SPDMatrix(c)


def permute_corr(
    c, seed: int | np.random.Generator
) -> tuple[SPDMatrix, np.ndarray]:
    """Apply one random simultaneous row/column permutation; spectrum is
    unchanged and the permutation is returned for invertibility."""
    a = np.asarray(c, dtype=np.float64)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    perm = rng.permutation(a.shape[0])
    out = a[np.ix_(perm, perm)]
    return SPDMatrix._trusted(out), perm


def apply_inverse_permutation(c, perm: np.ndarray) -> np.ndarray:
    inv = np.argsort(perm)
    a = np.asarray(c, dtype=np.float64)
    return a[np.ix_(inv, inv)]


def _pin_basket_sr(x: np.ndarray, target_sr: float) -> np.ndarray:
    """Add the constant that makes the realized annualized basket SR equal
    target_sr.  A constant shift leaves the sample correlation unchanged."""
    basket = x.mean(axis=1)
    sd = basket.std(ddof=1)
    shift = target_sr * sd / np.sqrt(252.0) - basket.mean()
    return x + shift


def generate_window(
    spec: SynthSpec,
    factors: FactorSpec,
    regime: Regime,
    base_loadings: np.ndarray,
    rng: np.random.Generator,
    permutation: np.ndarray,
    window_index: int,
) -> SyntheticSample:
    beta = _jittered_loadings(spec, factors, base_loadings, rng)
    implied = _corr_from_asset_loadings(spec, beta)
    x = student_t_sample(implied.values, spec.dof, spec.window_len, rng)
    lo, hi = SR_BANDS[regime]
    x = _pin_basket_sr(x, rng.uniform(lo, hi))
    corr = corr_from_returns(x)
    label = label_from_sr(sharpe_ratio(x))
    permuted = SPDMatrix._trusted(corr.values[np.ix_(permutation, permutation)])
    return SyntheticSample(
        corr=permuted,
        regime=label,
        permutation=permutation,
        window_index=window_index,
        spec_echo={"regime_intended": regime.name.lower()},
    )


def generate_dataset(
    spec: SynthSpec, factors_per_regime: dict | FactorSpec | None = None
) -> list[SyntheticSample]:
    """Generate ``n_series_total / n_assets`` labeled windows, regimes
    interleaved round-robin so every chronological segment stays balanced."""
    if factors_per_regime is None:
        factors_per_regime = FactorSpec()
    if isinstance(factors_per_regime, FactorSpec):
        factors_per_regime = {r: factors_per_regime for r in REGIMES}
    base = {
        r: calibrate_loadings(spec, factors_per_regime[r], r) for r in REGIMES
    }
    perm_rng = np.random.default_rng(spec.permute_seed)
    permutation = perm_rng.permutation(spec.n_assets)
    root = np.random.SeedSequence(spec.rng_seed)
    seeds = root.spawn(spec.n_windows)
    samples = []
    for w in range(spec.n_windows):
        regime = REGIMES[w % len(REGIMES)]
        rng = np.random.default_rng(seeds[w])
        samples.append(
            generate_window(
                spec, factors_per_regime[regime], regime, base[regime], rng,
                permutation, w,
            )
        )
    return samples


def samples_to_windows(
    samples: list[SyntheticSample], window_len: int = 252
) -> list[WindowedSample]:
    """Assign non-overlapping chronological spans so split purging applies."""
    return [
        WindowedSample(
            start_index=s.window_index * window_len,
            end_index=s.window_index * window_len + window_len - 1,
            corr=s.corr,
            label=s.regime,
            source=SampleSource.SYNTHETIC,
        )
        for s in samples
    ]


def mean_offdiagonal(c) -> float:
    a = np.asarray(c, dtype=np.float64)
    n = a.shape[0]
    return float((a.sum() - np.trace(a)) / (n * (n - 1)))


# ---------------------------------------------------------------------------
# Dataset serialization (text CSV and compact binary, both versioned)
# ---------------------------------------------------------------------------


def _sample_to_bytes(s: SyntheticSample) -> bytes:
    dim = s.corr.dim
    head = struct.pack(
        "<8sIIbdq",
        _BINARY_MAGIC,
        DATASET_FORMAT_VERSION,
        dim,
        s.regime.regime.index,
        s.regime.sr_value,
        s.window_index,
    )
    perm = np.asarray(s.permutation, dtype="<i4").tobytes()
    vals = np.asarray(s.corr.values, dtype="<f8").tobytes()
    return head + perm + vals


def _sample_from_bytes(raw: bytes) -> SyntheticSample:
    head_size = struct.calcsize("<8sIIbdq")
    magic, version, dim, regime_ix, sr, window_index = struct.unpack(
        "<8sIIbdq", raw[:head_size]
    )
    if magic != _BINARY_MAGIC:
        raise DataError("not a spdregime binary sample file")
    if version != DATASET_FORMAT_VERSION:
        raise DataError(f"unsupported sample format version {version}")
    off = head_size
    perm = np.frombuffer(raw, dtype="<i4", count=dim, offset=off).astype(np.int64)
    off += 4 * dim
    vals = np.frombuffer(raw, dtype="<f8", count=dim * dim, offset=off)
    corr = SPDMatrix(vals.reshape(dim, dim))
    return SyntheticSample(
        corr=corr,
        regime=RegimeLabel(regime=Regime.from_index(regime_ix), sr_value=sr),
        permutation=perm,
        window_index=int(window_index),
        spec_echo={},
    )


def _sample_to_csv(s: SyntheticSample, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["version", DATASET_FORMAT_VERSION])
        writer.writerow(["dim", s.corr.dim])
        writer.writerow(["regime", s.regime.regime.name.lower()])
        writer.writerow(["sr", repr(s.regime.sr_value)])
        writer.writerow(["window_index", s.window_index])
        writer.writerow(["permutation"] + [int(p) for p in s.permutation])
        for row in s.corr.values:
            writer.writerow([repr(v) for v in row])


def _sample_from_csv(path: Path) -> SyntheticSample:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    meta = {row[0]: row[1:] for row in rows[:6]}
    if int(meta["version"][0]) != DATASET_FORMAT_VERSION:
        raise DataError(f"unsupported sample format version {meta['version'][0]}")
    dim = int(meta["dim"][0])
    vals = np.array([[float(v) for v in row] for row in rows[6 : 6 + dim]])
    return SyntheticSample(
        corr=SPDMatrix(vals),
        regime=RegimeLabel(
            regime=Regime.parse(meta["regime"][0]), sr_value=float(meta["sr"][0])
        ),
        permutation=np.array([int(p) for p in meta["permutation"]], dtype=np.int64),
        window_index=int(meta["window_index"][0]),
        spec_echo={},
    )


def save_dataset(
    samples: list[SyntheticSample],
    directory,
    spec: SynthSpec | None = None,
    fmt: str = "binary",
) -> Path:
    """Write one file per sample plus a manifest with content digests."""
    if fmt not in ("binary", "csv"):
        raise ConfigError(f"unknown dataset format {fmt!r}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    counts = {r.name.lower(): 0 for r in REGIMES}
    for i, s in enumerate(samples):
        name = f"sample_{i:05d}." + ("spd" if fmt == "binary" else "csv")
        path = directory / name
        if fmt == "binary":
            raw = _sample_to_bytes(s)
            path.write_bytes(raw)
        else:
            _sample_to_csv(s, path)
            raw = path.read_bytes()
        counts[s.regime.regime.name.lower()] += 1
        entries.append({"file": name, "sha256": hashlib.sha256(raw).hexdigest()})
    manifest = {
        "format": fmt,
        "version": DATASET_FORMAT_VERSION,
        "n_samples": len(samples),
        "counts": counts,
        "samples": entries,
    }
    if spec is not None:
        manifest["spec"] = {
            "n_assets": spec.n_assets,
            "window_len": spec.window_len,
            "n_clusters": spec.n_clusters,
            "n_levels": spec.n_levels,
            "dof": spec.dof,
            "regime_targets": {
                r.name.lower(): spec.regime_targets[r] for r in REGIMES
            },
            "n_series_total": spec.n_series_total,
            "permute_seed": spec.permute_seed,
            "rng_seed": spec.rng_seed,
        }
    manifest_path = directory / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def load_dataset(directory) -> list[SyntheticSample]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no manifest.json under {directory}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("version") != DATASET_FORMAT_VERSION:
        raise DataError("unsupported dataset version")
    fmt = manifest.get("format", "binary")
    samples = []
    for entry in manifest["samples"]:
        path = directory / entry["file"]
        raw = path.read_bytes()
        digest = hashlib.sha256(raw).hexdigest()
        if digest != entry["sha256"]:
            raise DataError(f"digest mismatch for {entry['file']}")
        if fmt == "binary":
            samples.append(_sample_from_bytes(raw))
        else:
            samples.append(_sample_from_csv(path))
    return samples
