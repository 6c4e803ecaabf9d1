"""Model assembly, losses, training and evaluation for the SPD network
family: plain bilinear/rectification stacks, their batch-normalized
variants, and the U-shaped autoencoder with a classifier head at the
bottleneck.

Training is Riemannian SGD: orthonormal-column weights move by projected
gradient + QR retraction on the Stiefel manifold, everything Euclidean
(classifier, batchnorm bias) by plain SGD with heavy-ball momentum.
"""

from __future__ import annotations

import csv
import enum
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, TrainingDiverged
from .layers import (
    BiMapLayer,
    RBNLayer,
    ReEigLayer,
    expeig_backward_raw,
    expeig_forward_raw,
    logeig_backward_raw,
    logeig_forward_raw,
    stiefel_step,
    sym_batch,
    tri_dim,
    tri_flatten,
    tri_unflatten_grad,
)
from .regimes import REGIMES, Regime, WindowedSample

N_CLASSES = 3
CHECKPOINT_MAGIC = b"SPDRCKP1"
CHECKPOINT_VERSION = 1


class ModelName(enum.Enum):
    SPDNET = "SPDNet"
    SPDNET_BN = "SPDNetBN"
    SPDNET_3BIRE = "SPDNet-3BiRe"
    SPDNET_BN_3BIRE = "SPDNetBN-3BiRe"
    USPDNET_6BIRE = "U-SPDNet-6BiRe"

    @classmethod
    def parse(cls, name: str) -> "ModelName":
        for m in cls:
            if m.value.lower() == name.strip().lower():
                return m
        raise ConfigError(f"unknown model name: {name!r}")


_TABLE_PRESETS = {
    ModelName.SPDNET: dict(tmd=(60, 20, 3), use_rbn=False, learning_rate=1e-3),
    ModelName.SPDNET_BN: dict(tmd=(60, 20, 3), use_rbn=True, learning_rate=1e-3),
    ModelName.SPDNET_3BIRE: dict(
        tmd=(60, 40, 20, 10, 3), use_rbn=False, learning_rate=1e-4
    ),
    ModelName.SPDNET_BN_3BIRE: dict(
        tmd=(60, 40, 20, 10, 3), use_rbn=True, learning_rate=1e-4
    ),
    ModelName.USPDNET_6BIRE: dict(
        tmd=(60, 40, 20, 10, 3), use_rbn=False, learning_rate=(1e-2, 1e-5)
    ),
}


@dataclass
class ModelConfig:
    """Declarative description of one model configuration."""

    name: ModelName
    tmd: tuple
    use_rbn: bool = False
    learning_rate: float | tuple = 1e-3
    momentum: float = 0.9
    epochs: int = 600
    batch_size: int = 30
    seed: int = 0
    recon_weight: float = 1.0
    skip_combine_weight: float = 0.5
    reeig_eps: float = 1e-4
    rbn_momentum: float = 0.9
    oversample: bool = True
    whiten_inputs: bool = True

    def __post_init__(self):
        if isinstance(self.name, str):
            self.name = ModelName.parse(self.name)
        self.tmd = tuple(int(d) for d in self.tmd)
        if len(self.tmd) < 3:
            raise ConfigError("tmd needs at least input, feature and class dims")
        if any(a <= b for a, b in zip(self.tmd, self.tmd[1:])):
            raise ConfigError(f"tmd must be strictly decreasing, got {self.tmd}")
        lrs = self.learning_rate if isinstance(self.learning_rate, tuple) else (
            self.learning_rate,
        )
        # zero is admitted so a frozen run can serve as a determinism probe
        if any(lr < 0 for lr in lrs):
            raise ConfigError("learning rates must be >= 0")
        if isinstance(self.learning_rate, tuple) and any(lr == 0 for lr in lrs):
            raise ConfigError("annealing endpoints must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.recon_weight < 0:
            raise ConfigError("recon_weight must be >= 0")
        if self.is_autoencoder and len(self.tmd) < 4:
            raise ConfigError("the mirrored autoencoder needs at least two stages")
        if self.is_autoencoder and self.use_rbn:
            raise ConfigError("no batch-normalized autoencoder configuration exists")

    @property
    def is_autoencoder(self) -> bool:
        return self.name is ModelName.USPDNET_6BIRE

    def lr_at(self, epoch: int) -> float:
        """Constant learning rate, or geometric annealing across epochs for
        an (lr_start, lr_end) pair."""
        if not isinstance(self.learning_rate, tuple):
            return float(self.learning_rate)
        start, end = self.learning_rate
        if self.epochs == 1:
            return float(start)
        frac = epoch / (self.epochs - 1)
        return float(start * (end / start) ** frac)

    def to_dict(self) -> dict:
        d = {
            "name": self.name.value,
            "tmd": list(self.tmd),
            "use_rbn": self.use_rbn,
            "momentum": self.momentum,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "recon_weight": self.recon_weight,
            "skip_combine_weight": self.skip_combine_weight,
            "reeig_eps": self.reeig_eps,
            "rbn_momentum": self.rbn_momentum,
            "oversample": self.oversample,
            "whiten_inputs": self.whiten_inputs,
        }
        if isinstance(self.learning_rate, tuple):
            d["learning_rate"] = list(self.learning_rate)
        else:
            d["learning_rate"] = self.learning_rate
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if isinstance(d.get("learning_rate"), list):
            d["learning_rate"] = tuple(d["learning_rate"])
        if "tmd" in d:
            d["tmd"] = tuple(d["tmd"])
        return cls(**d)


def default_config(name: ModelName | str, **overrides) -> ModelConfig:
    """ModelConfig preset for one of the five published configurations."""
    name = ModelName.parse(name) if isinstance(name, str) else name
    base = dict(_TABLE_PRESETS[name])
    base.update(overrides)
    return ModelConfig(name=name, **base)


# ---------------------------------------------------------------------------
# Classifier stack
# ---------------------------------------------------------------------------


@dataclass
class _Entry:
    kind: str  # "rbn" | "bimap" | "reeig"
    layer: object


class _SPDModelBase:
    """Shared input-conditioning and prediction plumbing.

    ``input_whitener`` holds the inverse square root of a reference mean
    (fitted on the training split); when set, every input is congruence-
    transported to the identity before the first layer.  It is a fixed
    buffer, serialized with the model, so training, evaluation and
    prediction all see the same representation.
    """

    input_whitener: np.ndarray | None = None

    def transform_inputs(self, xs: np.ndarray) -> np.ndarray:
        if self.input_whitener is None:
            return xs
        p = self.input_whitener
        return sym_batch(p @ xs @ p)

    def set_input_whitening(self, reference_mean) -> None:
        from .geometry import _invsqrtm, sym

        self.input_whitener = _invsqrtm(sym(np.asarray(reference_mean, np.float64)))

    def _whitener_state(self, state: dict) -> dict:
        if self.input_whitener is not None:
            state["input.whitener"] = self.input_whitener.copy()
        return state

    def _load_whitener(self, state: dict) -> None:
        w = state.get("input.whitener")
        self.input_whitener = None if w is None else w.copy()

    def predict_batch(self, xs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def predict(self, x) -> Regime:
        xs = np.asarray(x, dtype=np.float64)[None]
        return Regime.from_index(int(self.predict_batch(xs)[0]))


class LayerStack(_SPDModelBase):
    """Sequential SPD feature stack ending in LogEig + linear classifier."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        self.input_whitener = None
        dims = config.tmd[:-1]
        self.entries: list[_Entry] = []
        for d_in, d_out in zip(dims, dims[1:]):
            if config.use_rbn:
                self.entries.append(
                    _Entry("rbn", RBNLayer(d_in, running_momentum=config.rbn_momentum))
                )
            self.entries.append(_Entry("bimap", BiMapLayer.init(d_in, d_out, rng)))
            self.entries.append(_Entry("reeig", ReEigLayer(config.reeig_eps)))
        self.feature_dim = dims[-1]
        p = tri_dim(self.feature_dim)
        self.cls_weight = np.zeros((N_CLASSES, p))
        self.cls_bias = np.zeros(N_CLASSES)

    @property
    def input_dim(self) -> int:
        return self.config.tmd[0]

    def param_entries(self) -> list[tuple[str, str, np.ndarray]]:
        """(key, kind, array) in declared order; kind 'stiefel' or 'euclid'."""
        out = []
        for i, e in enumerate(self.entries):
            if e.kind == "bimap":
                out.append((f"bimap{i}", "stiefel", e.layer.weight))
            elif e.kind == "rbn":
                out.append((f"rbn{i}.bias", "euclid", e.layer.bias_sym))
        out.append(("cls.weight", "euclid", self.cls_weight))
        out.append(("cls.bias", "euclid", self.cls_bias))
        return out

    def set_param(self, key: str, value: np.ndarray) -> None:
        for i, e in enumerate(self.entries):
            if e.kind == "bimap" and key == f"bimap{i}":
                e.layer.weight = value
                return
            if e.kind == "rbn" and key == f"rbn{i}.bias":
                e.layer.bias_sym = value
                return
        if key == "cls.weight":
            self.cls_weight = value
        elif key == "cls.bias":
            self.cls_bias = value
        else:
            raise KeyError(key)

    def state_arrays(self) -> dict:
        state = {k: v.copy() for k, _, v in self.param_entries()}
        for i, e in enumerate(self.entries):
            if e.kind == "rbn":
                state[f"rbn{i}.running_mean"] = e.layer.running_mean.copy()
        return self._whitener_state(state)

    def load_state_arrays(self, state: dict) -> None:
        for key, _, _ in self.param_entries():
            self.set_param(key, state[key].copy())
        for i, e in enumerate(self.entries):
            if e.kind == "rbn":
                e.layer.running_mean = state[f"rbn{i}.running_mean"].copy()
        self._load_whitener(state)

    # -- forward / backward ------------------------------------------------

    def forward_batch(self, xs: np.ndarray, training: bool, transformed: bool = False):
        h = xs if transformed else self.transform_inputs(xs)
        caches = []
        for e in self.entries:
            if e.kind == "bimap":
                caches.append(h)
                h = e.layer.forward(h)
            elif e.kind == "reeig":
                h, c = e.layer.forward_batch(h)
                caches.append(c)
            else:
                h, c = e.layer.forward_batch(h, training)
                caches.append(c)
        feats = np.empty_like(h)
        log_caches = []
        for b in range(h.shape[0]):
            feats[b], c = logeig_forward_raw(h[b])
            log_caches.append(c)
        v = tri_flatten(feats)
        logits = v @ self.cls_weight.T + self.cls_bias
        return logits, (caches, log_caches, v)

    def backward_batch(self, cache, dlogits: np.ndarray) -> dict:
        caches, log_caches, v = cache
        grads: dict = {}
        grads["cls.weight"] = dlogits.T @ v
        grads["cls.bias"] = dlogits.sum(axis=0)
        dv = dlogits @ self.cls_weight
        g = tri_unflatten_grad(dv, self.feature_dim)
        gs = np.empty((dlogits.shape[0], self.feature_dim, self.feature_dim))
        for b in range(gs.shape[0]):
            gs[b] = logeig_backward_raw(log_caches[b], g[b])
        g = gs
        for i in range(len(self.entries) - 1, -1, -1):
            e = self.entries[i]
            c = caches[i]
            if e.kind == "bimap":
                g, wg = e.layer.backward(c, g)
                grads[f"bimap{i}"] = wg
            elif e.kind == "reeig":
                out = np.empty_like(g)
                for b in range(g.shape[0]):
                    out[b] = e.layer.backward(c[b], g[b])
                g = out
            else:
                g, bias_grad = e.layer.backward_batch(c, g)
                grads[f"rbn{i}.bias"] = bias_grad
        return grads

    def predict_batch(self, xs: np.ndarray) -> np.ndarray:
        logits, _ = self.forward_batch(xs, training=False)
        return np.argmax(logits, axis=1)


# ---------------------------------------------------------------------------
# U-shaped autoencoder with classifier head at the bottleneck
# ---------------------------------------------------------------------------


class UpBiMapLayer:
    """Expanding bilinear map X -> W X W^T with orthonormal-column W of
    shape d_out x d_in (d_out > d_in); rank-deficient output is restored to
    SPD by the following rectification stage."""

    def __init__(self, weight: np.ndarray):
        weight = np.asarray(weight, dtype=np.float64)
        if weight.ndim != 2 or weight.shape[0] <= weight.shape[1]:
            raise ConfigError("UpBiMap weight must be d_out x d_in with d_out > d_in")
        self.weight = weight

    @classmethod
    def init(cls, d_in: int, d_out: int, rng: np.random.Generator) -> "UpBiMapLayer":
        from .layers import qf_retraction

        return cls(qf_retraction(rng.standard_normal((d_out, d_in))))

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.weight @ x @ self.weight.T

    def backward(self, x: np.ndarray, grad: np.ndarray):
        from .layers import batch_triple_sum

        w = self.weight
        input_grad = w.T @ grad @ w
        if x.ndim == 3:
            weight_grad = 2.0 * batch_triple_sum(grad, w, x)
        else:
            weight_grad = 2.0 * (grad @ w @ x)
        return input_grad, weight_grad


def _blend_forward(a: np.ndarray, b: np.ndarray, wgt: float):
    """Log-Euclidean geodesic combination exp((1-w) log a + w log b)."""
    la, ca = logeig_forward_raw(a)
    lb, cb = logeig_forward_raw(b)
    out, cm = expeig_forward_raw((1.0 - wgt) * la + wgt * lb)
    return out, (ca, cb, cm)


def _blend_backward(cache, grad: np.ndarray, wgt: float):
    ca, cb, cm = cache
    dm = expeig_backward_raw(cm, grad)
    da = logeig_backward_raw(ca, (1.0 - wgt) * dm)
    db = logeig_backward_raw(cb, wgt * dm)
    return da, db


class USPDNet(_SPDModelBase):
    """Mirrored encoder/decoder over the feature dims of the configuration,
    with the bottleneck feeding the classifier and log-Euclidean skip blends
    feeding each decoder stage."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        self.input_whitener = None
        dims = config.tmd[:-1]  # e.g. (60, 40, 20, 10)
        self.enc_dims = dims
        self.enc_bimaps = [
            BiMapLayer.init(a, b, rng) for a, b in zip(dims, dims[1:])
        ]
        self.dec_bimaps = [
            UpBiMapLayer.init(a, b, rng)
            for a, b in zip(dims[::-1], dims[::-1][1:])
        ]
        self.reeig = ReEigLayer(config.reeig_eps)
        self.skip_combine_weight = float(config.skip_combine_weight)
        self.feature_dim = dims[-1]
        p = tri_dim(self.feature_dim)
        self.cls_weight = np.zeros((N_CLASSES, p))
        self.cls_bias = np.zeros(N_CLASSES)

    @property
    def input_dim(self) -> int:
        return self.config.tmd[0]

    @property
    def latent_dim(self) -> int:
        return self.enc_dims[-2]

    def param_entries(self) -> list[tuple[str, str, np.ndarray]]:
        out = []
        for i, l in enumerate(self.enc_bimaps):
            out.append((f"enc{i}", "stiefel", l.weight))
        for i, l in enumerate(self.dec_bimaps):
            out.append((f"dec{i}", "stiefel", l.weight))
        out.append(("cls.weight", "euclid", self.cls_weight))
        out.append(("cls.bias", "euclid", self.cls_bias))
        return out

    def set_param(self, key: str, value: np.ndarray) -> None:
        if key.startswith("enc"):
            self.enc_bimaps[int(key[3:])].weight = value
        elif key.startswith("dec"):
            self.dec_bimaps[int(key[3:])].weight = value
        elif key == "cls.weight":
            self.cls_weight = value
        elif key == "cls.bias":
            self.cls_bias = value
        else:
            raise KeyError(key)

    def state_arrays(self) -> dict:
        return self._whitener_state({k: v.copy() for k, _, v in self.param_entries()})

    def load_state_arrays(self, state: dict) -> None:
        for key, _, _ in self.param_entries():
            self.set_param(key, state[key].copy())
        self._load_whitener(state)

    # -- forward / backward ------------------------------------------------

    def forward_batch(
        self, xs: np.ndarray, training: bool = False, transformed: bool = False
    ):
        if not transformed:
            xs = self.transform_inputs(xs)
        n_stage = len(self.enc_bimaps)
        feats = [xs]  # encoder ReEig outputs, feats[k] has dim enc_dims[k]
        enc_caches = []
        h = xs
        for l in self.enc_bimaps:
            x_in = h
            h = l.forward(h)
            h, re_cache = self.reeig.forward_batch(h)
            enc_caches.append((x_in, re_cache))
            feats.append(h)

        log_caches = []
        s = np.empty_like(h)
        for b in range(h.shape[0]):
            s[b], c = logeig_forward_raw(h[b])
            log_caches.append(c)
        v = tri_flatten(s)
        logits = v @ self.cls_weight.T + self.cls_bias

        w = self.skip_combine_weight
        d = feats[-1]
        dec_caches = []
        latent = None
        for k, l in enumerate(self.dec_bimaps):
            d_in = d
            up = l.forward(d)
            up, re_cache = self.reeig.forward_batch(up)
            if k < n_stage - 1:
                skip = feats[n_stage - 1 - k]
                blended = np.empty_like(up)
                blend_caches = []
                for b in range(up.shape[0]):
                    blended[b], bc = _blend_forward(skip[b], up[b], w)
                    blend_caches.append(bc)
                d = blended
            else:
                blend_caches = None
                d = up
            dec_caches.append((d_in, re_cache, blend_caches))
            if k == 0:
                latent = d
        recon = d
        cache = (enc_caches, log_caches, v, dec_caches)
        return logits, latent, recon, cache

    def backward_batch(self, cache, dlogits: np.ndarray, drecon: np.ndarray) -> dict:
        enc_caches, log_caches, v, dec_caches = cache
        n_stage = len(self.enc_bimaps)
        w = self.skip_combine_weight
        grads: dict = {}
        grads["cls.weight"] = dlogits.T @ v
        grads["cls.bias"] = dlogits.sum(axis=0)

        # gradients w.r.t. encoder ReEig outputs, indexed like feats
        dfeats = [None] * (n_stage + 1)

        # decoder, last stage first
        g = sym_batch(drecon)
        for k in range(n_stage - 1, -1, -1):
            d_in, re_cache, blend_caches = dec_caches[k]
            if blend_caches is not None:
                dskip = np.empty_like(g)
                dup = np.empty_like(g)
                for b in range(g.shape[0]):
                    dskip[b], dup[b] = _blend_backward(blend_caches[b], g[b], w)
                skip_index = n_stage - 1 - k
                dfeats[skip_index] = (
                    dskip if dfeats[skip_index] is None else dfeats[skip_index] + dskip
                )
                g = dup
            out = np.empty_like(g)
            for b in range(g.shape[0]):
                out[b] = self.reeig.backward(re_cache[b], g[b])
            g, wg = self.dec_bimaps[k].backward(d_in, out)
            grads[f"dec{k}"] = wg

        # classifier head gradient into the bottleneck
        dv = dlogits @ self.cls_weight
        gtri = tri_unflatten_grad(dv, self.feature_dim)
        gcls = np.empty_like(gtri)
        for b in range(gtri.shape[0]):
            gcls[b] = logeig_backward_raw(log_caches[b], gtri[b])
        dbottleneck = g + gcls
        dfeats[n_stage] = (
            dbottleneck if dfeats[n_stage] is None else dfeats[n_stage] + dbottleneck
        )

        # encoder, last stage first
        g = dfeats[n_stage]
        for k in range(n_stage - 1, -1, -1):
            x_in, re_cache = enc_caches[k]
            out = np.empty_like(g)
            for b in range(g.shape[0]):
                out[b] = self.reeig.backward(re_cache[b], g[b])
            g, wg = self.enc_bimaps[k].backward(x_in, out)
            grads[f"enc{k}"] = wg
            if k > 0 and dfeats[k] is not None:
                g = g + dfeats[k]
        return grads

    def predict_batch(self, xs: np.ndarray) -> np.ndarray:
        logits, _, _, _ = self.forward_batch(xs)
        return np.argmax(logits, axis=1)


def build_model(config: ModelConfig, seed: int | None = None):
    """Deterministically build a model: orthonormal-column weights from a
    seeded QR of Gaussians, batchnorm statistics and biases at identity,
    zero classifier."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    if config.is_autoencoder:
        return USPDNet(config, rng)
    return LayerStack(config, rng)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Per-sample CE and the mean-loss gradient w.r.t. the logits."""
    p = softmax(logits)
    n = logits.shape[0]
    idx = np.arange(n)
    ce = -np.log(np.maximum(p[idx, labels], 1e-300))
    dlogits = p.copy()
    dlogits[idx, labels] -= 1.0
    return ce, dlogits / n


def _ret_and_grad(recon: np.ndarray, target_logs: np.ndarray):
    """Squared log-Euclidean reconstruction error per sample, plus the
    gradient w.r.t. the reconstruction."""
    n = recon.shape[0]
    ret = np.empty(n)
    dr = np.empty_like(recon)
    for b in range(n):
        lr_, cache = logeig_forward_raw(recon[b])
        diff = lr_ - target_logs[b]
        ret[b] = float(np.sum(diff * diff))
        dr[b] = logeig_backward_raw(cache, 2.0 * diff)
    return ret, dr


def loss_total(logits, label, reconstruction=None, input_mat=None, recon_weight=0.0):
    """Cross-entropy plus ``recon_weight`` times the squared log-Euclidean
    distance between reconstruction and input."""
    from .geometry import log_euclidean_distance

    logits = np.asarray(logits, dtype=np.float64)
    if isinstance(label, Regime):
        label = label.index
    ce, _ = cross_entropy(logits[None], np.array([label]))
    total = float(ce[0])
    if recon_weight > 0.0:
        if reconstruction is None or input_mat is None:
            raise DataError("reconstruction loss requires both matrices")
        d = log_euclidean_distance(reconstruction, input_mat)
        total += recon_weight * d * d
    return total


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class SplitDataset:
    train: list[WindowedSample]
    val: list[WindowedSample]
    test: list[WindowedSample] = field(default_factory=list)

    @classmethod
    def from_plan(cls, windows, plan) -> "SplitDataset":
        return cls(
            train=[windows[i] for i in plan.train],
            val=[windows[i] for i in plan.val],
            test=[windows[i] for i in plan.test],
        )


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float


@dataclass
class TrainingReport:
    records: list[EpochRecord]
    best_epoch: int
    best_val_acc: float
    model_name: str

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "train_acc", "val_acc"])
            for r in self.records:
                writer.writerow(
                    [r.epoch, repr(r.train_loss), repr(r.train_acc), repr(r.val_acc)]
                )

    @property
    def final_val_acc(self) -> float:
        return self.records[-1].val_acc if self.records else float("nan")


def _stack_samples(samples: list[WindowedSample]):
    xs = np.stack([np.asarray(s.corr, dtype=np.float64) for s in samples])
    ys = np.array([s.label.regime.index for s in samples], dtype=np.int64)
    return xs, ys


def _oversample_indices(ys: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Indices with minority classes resampled (with replacement) to parity."""
    groups = [np.flatnonzero(ys == r.index) for r in REGIMES]
    target = max(len(g) for g in groups)
    out = []
    for g in groups:
        if len(g) == 0:
            continue
        out.append(g)
        extra = target - len(g)
        if extra > 0:
            out.append(rng.choice(g, size=extra, replace=True))
    idx = np.concatenate(out)
    rng.shuffle(idx)
    return idx


def _batch_loss_and_grads(model, xs, ys, recon_weight):
    """Forward + backward for one batch; returns (mean loss, n correct, grads)."""
    xt = model.transform_inputs(xs)
    if isinstance(model, USPDNet):
        logits, _, recon, cache = model.forward_batch(xt, training=True, transformed=True)
        ce, dlogits = cross_entropy(logits, ys)
        target_logs = np.empty_like(xt)
        for b in range(xt.shape[0]):
            target_logs[b], _ = logeig_forward_raw(xt[b])
        ret, dr = _ret_and_grad(recon, target_logs)
        loss = float(np.mean(ce + recon_weight * ret))
        drecon = dr * (recon_weight / xt.shape[0])
        grads = model.backward_batch(cache, dlogits, drecon)
    else:
        logits, cache = model.forward_batch(xt, training=True, transformed=True)
        ce, dlogits = cross_entropy(logits, ys)
        loss = float(np.mean(ce))
        grads = model.backward_batch(cache, dlogits)
    correct = int(np.sum(np.argmax(logits, axis=1) == ys))
    return loss, correct, grads


def _apply_updates(model, grads: dict, lr: float, momentum: float, buffers: dict):
    for key, kind, value in model.param_entries():
        g = grads.get(key)
        if g is None:
            continue
        if kind == "stiefel":
            new_w, new_buf = stiefel_step(value, g, buffers.get(key), lr, momentum)
            model.set_param(key, new_w)
            buffers[key] = new_buf
        else:
            buf = buffers.get(key)
            buf = g if buf is None else momentum * buf + g
            buffers[key] = buf
            model.set_param(key, value - lr * buf)


def accuracy_on(model, samples: list[WindowedSample]) -> float:
    if not samples:
        return float("nan")
    xs, ys = _stack_samples(samples)
    return float(np.mean(model.predict_batch(xs) == ys))


def fit_input_whitening(model, train_samples: list[WindowedSample]) -> None:
    """Fit the model's input conditioning to the Karcher mean of the
    training split (training data only, so no split leakage)."""
    from .geometry import karcher_mean

    mats = [np.asarray(s.corr, dtype=np.float64) for s in train_samples]
    mean = karcher_mean(mats, max_iter=100, tol=1e-8, init="log_euclidean")
    model.set_input_whitening(mean.values)


def train(model, dataset: SplitDataset, config: ModelConfig) -> TrainingReport:
    """Run ``config.epochs`` epochs of Riemannian SGD; restores and reports
    the best-validation parameters."""
    if not dataset.train:
        raise DataError("empty training split")
    xs_all, ys_all = _stack_samples(dataset.train)
    if xs_all.shape[-1] != config.tmd[0]:
        raise ConfigError(
            f"dataset dim {xs_all.shape[-1]} does not match tmd[0]={config.tmd[0]}"
        )
    if config.whiten_inputs and model.input_whitener is None:
        fit_input_whitening(model, dataset.train)
    rng = np.random.default_rng(config.seed + 1)
    buffers: dict = {}
    records: list[EpochRecord] = []
    best_val = -np.inf
    best_epoch = -1
    best_state = model.state_arrays()
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        if config.oversample:
            order = _oversample_indices(ys_all, rng)
        else:
            order = rng.permutation(len(ys_all))
        total_loss = 0.0
        total_correct = 0
        for start in range(0, len(order), config.batch_size):
            sel = order[start : start + config.batch_size]
            loss, correct, grads = _batch_loss_and_grads(
                model, xs_all[sel], ys_all[sel], config.recon_weight
            )
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", epoch=epoch)
            total_loss += loss * len(sel)
            total_correct += correct
            _apply_updates(model, grads, lr, config.momentum, buffers)
        train_loss = total_loss / len(order)
        train_acc = total_correct / len(order)
        val_acc = accuracy_on(model, dataset.val)
        records.append(EpochRecord(epoch, train_loss, train_acc, val_acc))
        score = val_acc if dataset.val else train_acc
        if np.isfinite(score) and score > best_val:
            best_val = score
            best_epoch = epoch
            best_state = model.state_arrays()
    model.load_state_arrays(best_state)
    return TrainingReport(
        records=records,
        best_epoch=best_epoch,
        best_val_acc=float(best_val) if np.isfinite(best_val) else float("nan"),
        model_name=config.name.value,
    )


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class ConfusionMatrix:
    """3x3 counts, rows = true regime, columns = predicted."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (N_CLASSES, N_CLASSES) or np.any(self.counts < 0):
            raise DataError("confusion matrix must be 3x3 with nonnegative counts")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv(self, path) -> None:
        names = [r.name.lower() for r in REGIMES]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["true\\pred"] + names)
            for i, r in enumerate(REGIMES):
                writer.writerow([names[i]] + [int(c) for c in self.counts[i]])


@dataclass
class EvalResult:
    accuracy: float
    per_class_recall: np.ndarray
    confusion: ConfusionMatrix
    corner_solution: bool

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "per_class_recall": [float(r) for r in self.per_class_recall],
            "confusion": self.confusion.counts.tolist(),
            "corner_solution": self.corner_solution,
        }


# A predicted-class share this dominant on a balanced test set marks a
# degenerate (corner) classifier.
CORNER_PRED_SHARE = 0.9
CORNER_BALANCED_MAX_TRUE_SHARE = 0.6


def evaluate(model, samples: list[WindowedSample]) -> EvalResult:
    """Accuracy, recalls and confusion counts, with the corner-solution
    diagnostic (one predicted class hoovering up a balanced test set)."""
    if not samples:
        raise DataError("cannot evaluate on an empty dataset")
    xs, ys = _stack_samples(samples)
    preds = model.predict_batch(xs)
    counts = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for t, p in zip(ys, preds):
        counts[t, p] += 1
    confusion = ConfusionMatrix(counts)
    accuracy = float(np.trace(counts) / counts.sum())
    row_sums = counts.sum(axis=1)
    recalls = np.where(row_sums > 0, np.diag(counts) / np.maximum(row_sums, 1), 0.0)
    pred_shares = counts.sum(axis=0) / counts.sum()
    true_shares = row_sums / counts.sum()
    corner = bool(
        pred_shares.max() > CORNER_PRED_SHARE
        and true_shares.max() <= CORNER_BALANCED_MAX_TRUE_SHARE
    )
    return EvalResult(
        accuracy=accuracy,
        per_class_recall=recalls,
        confusion=confusion,
        corner_solution=corner,
    )


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model, config: ModelConfig, path, extra: dict | None = None):
    """Versioned binary container: JSON header (config echo, tensor
    descriptors, seed) followed by raw little-endian float64 tensors."""
    entries = model.param_entries()
    state = model.state_arrays()
    names = sorted(state.keys())
    kinds = {k: kind for k, kind, _ in entries}
    header = {
        "config": config.to_dict(),
        "seed": config.seed,
        "tensors": [
            {
                "key": k,
                "kind": kinds.get(k, "buffer"),
                "shape": list(state[k].shape),
            }
            for k in names
        ],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for k in names:
            fh.write(np.ascontiguousarray(state[k], dtype="<f8").tobytes())


def load_checkpoint(path):
    """Rebuild the model from a checkpoint; returns (model, config, extra)."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise DataError("not a spdregime checkpoint")
        version, blob_len = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(blob_len).decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        model = build_model(config)
        state = {}
        for desc in header["tensors"]:
            shape = tuple(desc["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * count)
            state[desc["key"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    model.load_state_arrays(state)
    return model, config, header.get("extra", {})


def rbn_comparison_rows(reports: dict) -> list[dict]:
    """Rows comparing validation accuracy across configurations (used for
    the with/without batchnorm comparison export)."""
    rows = []
    for name, report in reports.items():
        rows.append(
            {
                "model": name,
                "best_val_acc": report.best_val_acc,
                "final_val_acc": report.final_val_acc,
                "best_epoch": report.best_epoch,
            }
        )
    return rows


def export_comparison_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "best_val_acc", "final_val_acc", "best_epoch"])
        for r in rows:
            writer.writerow(
                [r["model"], repr(r["best_val_acc"]), repr(r["final_val_acc"]), r["best_epoch"]]
            )
